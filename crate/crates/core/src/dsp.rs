//! Receiver-chain kernels: radix-2 IFFT, block (de)interleaver, Gray QAM
//! mapper and max-log demapper, plus the binary-exchange split of the IFFT
//! across cores.
//!
//! All arithmetic is `f32`. The IFFT is unnormalized:
//! `X[k] = sum_n x[n] * exp(+2*pi*i*n*k/N)`.

use std::f64::consts::PI;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ComplexSample = Complex32;

/// Samples per OFDM symbol.
pub const SYMBOL_LEN: usize = 256;
/// Default interleaver geometry (16 x 16 = 256).
pub const INTERLEAVER_ROWS: usize = 16;
pub const INTERLEAVER_COLS: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DspError {
    #[error("length {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("block of {len} values does not fill a {rows}x{cols} interleaver")]
    ShapeMismatch { len: usize, rows: usize, cols: usize },
    #[error("{len} bits is not a multiple of {per_symbol} bits per symbol")]
    BadBitCount { len: usize, per_symbol: usize },
    #[error("noise variance must be positive, got {0}")]
    NonPositiveNoise(f32),
    #[error("cannot split a {n}-point transform over {cores} cores")]
    InvalidSplit { n: usize, cores: usize },
}

/// `exp(+2*pi*i*j/size)`, evaluated in f64 and rounded once.
pub fn twiddle(j: usize, size: usize) -> Complex32 {
    let a = 2.0 * PI * j as f64 / size as f64;
    Complex32::new(a.cos() as f32, a.sin() as f32)
}

fn bit_reverse(i: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        i.reverse_bits() >> (usize::BITS - bits)
    }
}

/// Returns `x` reordered so that element `i` holds `x[bitrev(i)]`.
pub fn bit_reverse_permute(x: &[Complex32]) -> Result<Vec<Complex32>, DspError> {
    check_pow2(x.len())?;
    let bits = x.len().trailing_zeros();
    Ok((0..x.len()).map(|i| x[bit_reverse(i, bits)]).collect())
}

fn check_pow2(n: usize) -> Result<(), DspError> {
    if n.is_power_of_two() {
        Ok(())
    } else {
        Err(DspError::NotPowerOfTwo(n))
    }
}

/// One decimation-in-time butterfly pass of span `span` over a slice whose
/// first element has global index `base`. Pairs must lie inside the slice.
pub fn dit_pass(data: &mut [Complex32], base: usize, span: usize) {
    debug_assert!(span < data.len() || data.len() == 1);
    for k in 0..data.len() {
        let i = base + k;
        if i & span != 0 {
            continue;
        }
        let w = twiddle(i & (span - 1), 2 * span);
        let t = w * data[k + span];
        data[k + span] = data[k] - t;
        data[k] += t;
    }
}

pub fn ifft(x: &[Complex32]) -> Result<Vec<Complex32>, DspError> {
    let mut data = bit_reverse_permute(x)?;
    let mut span = 1;
    while span < data.len() {
        dit_pass(&mut data, 0, span);
        span <<= 1;
    }
    Ok(data)
}

/// Direct O(N^2) evaluation of the same sum in f64.
pub fn dft_oracle(x: &[Complex32]) -> Vec<Complex32> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (j, v) in x.iter().enumerate() {
                let a = 2.0 * PI * ((j * k) % n) as f64 / n as f64;
                let (s, c) = a.sin_cos();
                re += v.re as f64 * c - v.im as f64 * s;
                im += v.re as f64 * s + v.im as f64 * c;
            }
            Complex32::new(re as f32, im as f32)
        })
        .collect()
}

/// Writes row-wise into an R x C array and reads column-wise:
/// `y[c*R + r] = x[r*C + c]`.
pub fn interleave<T: Copy>(x: &[T], rows: usize, cols: usize) -> Result<Vec<T>, DspError> {
    check_shape(x.len(), rows, cols)?;
    Ok((0..x.len()).map(|j| x[(j % rows) * cols + j / rows]).collect())
}

pub fn deinterleave<T: Copy>(y: &[T], rows: usize, cols: usize) -> Result<Vec<T>, DspError> {
    check_shape(y.len(), rows, cols)?;
    Ok((0..y.len()).map(|i| y[deinterleave_source(i, rows, cols)]).collect())
}

/// Index in the interleaved block that lands at position `i` after
/// deinterleaving.
pub fn deinterleave_source(i: usize, rows: usize, cols: usize) -> usize {
    (i % cols) * rows + i / cols
}

fn check_shape(len: usize, rows: usize, cols: usize) -> Result<(), DspError> {
    if rows.checked_mul(cols) == Some(len) {
        Ok(())
    } else {
        Err(DspError::ShapeMismatch { len, rows, cols })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    Qpsk,
    Qam16,
}

impl Modulation {
    pub const fn bits_per_symbol(self) -> usize {
        match self {
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
        }
    }

    const fn bits_per_axis(self) -> usize {
        self.bits_per_symbol() / 2
    }

    fn axis_scale(self) -> f32 {
        match self {
            Modulation::Qpsk => std::f32::consts::FRAC_1_SQRT_2,
            Modulation::Qam16 => 1.0 / 10f32.sqrt(),
        }
    }

    /// Gray-coded amplitude for the bits of one axis, sign bit first.
    /// 16QAM: 00 -> +1, 01 -> +3, 11 -> -3, 10 -> -1 (before scaling).
    fn axis_level(self, bits: &[u8]) -> f32 {
        let sign = if bits[0] == 0 { 1.0 } else { -1.0 };
        let magnitude = match self {
            Modulation::Qpsk => 1.0,
            Modulation::Qam16 => {
                if bits[1] == 0 {
                    1.0
                } else {
                    3.0
                }
            }
        };
        sign * magnitude * self.axis_scale()
    }

    /// Every (bit pattern, level) pair of one axis.
    fn axis_table(self) -> Vec<(Vec<u8>, f32)> {
        let k = self.bits_per_axis();
        (0..1usize << k)
            .map(|v| {
                let bits: Vec<u8> = (0..k).map(|b| ((v >> (k - 1 - b)) & 1) as u8).collect();
                let level = self.axis_level(&bits);
                (bits, level)
            })
            .collect()
    }

    /// All constellation points with their bit labels.
    pub fn constellation(self) -> Vec<(Vec<u8>, Complex32)> {
        let axis = self.axis_table();
        let mut out = Vec::with_capacity(axis.len() * axis.len());
        for (re_bits, re) in &axis {
            for (im_bits, im) in &axis {
                let bits = re_bits.iter().chain(im_bits).copied().collect();
                out.push((bits, Complex32::new(*re, *im)));
            }
        }
        out
    }
}

/// Maps bits (one `u8` per bit, 0 or 1) to constellation points. The first
/// half of each symbol's bits selects the real axis, the second half the
/// imaginary axis.
pub fn map_bits(bits: &[u8], scheme: Modulation) -> Result<Vec<Complex32>, DspError> {
    let per = scheme.bits_per_symbol();
    if bits.len() % per != 0 {
        return Err(DspError::BadBitCount {
            len: bits.len(),
            per_symbol: per,
        });
    }
    let half = scheme.bits_per_axis();
    Ok(bits
        .chunks_exact(per)
        .map(|b| Complex32::new(scheme.axis_level(&b[..half]), scheme.axis_level(&b[half..])))
        .collect())
}

/// Max-log LLRs, positive for bit 0. The constellation is a product of two
/// Gray PAM axes, so each bit's minimum distances separate per axis.
pub fn demap(y: &[Complex32], scheme: Modulation, noise_var: f32) -> Result<Vec<f32>, DspError> {
    if !(noise_var > 0.0) {
        return Err(DspError::NonPositiveNoise(noise_var));
    }
    let axis = scheme.axis_table();
    let k = scheme.bits_per_axis();
    let mut llrs = Vec::with_capacity(y.len() * scheme.bits_per_symbol());
    for s in y {
        for v in [s.re, s.im] {
            for bit in 0..k {
                let (mut d0, mut d1) = (f32::INFINITY, f32::INFINITY);
                for (bits, level) in &axis {
                    let d = (v - level) * (v - level);
                    if bits[bit] == 0 {
                        d0 = d0.min(d);
                    } else {
                        d1 = d1.min(d);
                    }
                }
                llrs.push((d1 - d0) / noise_var);
            }
        }
    }
    Ok(llrs)
}

pub fn hard_decisions(llrs: &[f32]) -> Vec<u8> {
    llrs.iter().map(|&l| u8::from(l < 0.0)).collect()
}

/// Which butterfly output a core produces in an exchange stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Half {
    /// `x[i] + w*x[i+span]`; the core owns index `i`.
    Lower,
    /// `x[i] - w*x[i+span]`; the core owns index `i+span`.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeStage {
    /// Position among all log2(n) passes.
    pub stage: u32,
    /// Partner of core `c` is `c ^ mask`.
    pub mask: usize,
    pub span: usize,
}

/// Binary-exchange decomposition of an n-point DIT IFFT over `n_cores`.
///
/// Core `c` holds global indices `c*block_len .. (c+1)*block_len` of the
/// bit-reversed input throughout. The first `local_stages` passes pair
/// elements inside one block; each remaining pass pairs block `c` with block
/// `c ^ mask`, both cores swap their whole block and each computes the half
/// of the butterfly outputs it owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelFftPlan {
    pub n: usize,
    pub n_cores: usize,
    pub block_len: usize,
    pub local_stages: u32,
    pub exchange_stages: Vec<ExchangeStage>,
}

pub fn plan_parallel_ifft(n: usize, n_cores: usize) -> Result<ParallelFftPlan, DspError> {
    if !n.is_power_of_two() || !n_cores.is_power_of_two() || n_cores > n || n < 2 {
        return Err(DspError::InvalidSplit { n, cores: n_cores });
    }
    let block_len = n / n_cores;
    let local_stages = block_len.trailing_zeros();
    let exchange_stages = (0..n_cores.trailing_zeros())
        .map(|j| ExchangeStage {
            stage: local_stages + j,
            mask: 1 << j,
            span: block_len << j,
        })
        .collect();
    Ok(ParallelFftPlan {
        n,
        n_cores,
        block_len,
        local_stages,
        exchange_stages,
    })
}

impl ParallelFftPlan {
    pub fn stages(&self) -> u32 {
        self.n.trailing_zeros()
    }

    /// One barrier precedes every exchange stage.
    pub fn barriers(&self) -> usize {
        self.exchange_stages.len()
    }

    pub fn partner(&self, core: usize, stage: &ExchangeStage) -> usize {
        core ^ stage.mask
    }

    pub fn half(&self, core: usize, stage: &ExchangeStage) -> Half {
        if core & stage.mask == 0 {
            Half::Lower
        } else {
            Half::Upper
        }
    }

    /// Butterflies each core evaluates per pass.
    pub fn butterflies_per_core_per_stage(&self) -> usize {
        self.block_len / 2
    }

    pub fn butterflies_per_core(&self) -> usize {
        self.butterflies_per_core_per_stage() * self.stages() as usize
    }

    pub fn total_butterflies(&self) -> usize {
        self.butterflies_per_core() * self.n_cores
    }

    /// First global index held by `core`.
    pub fn base(&self, core: usize) -> usize {
        core * self.block_len
    }

    /// Runs the block-local passes of `core` in place.
    pub fn run_local_stages(&self, core: usize, block: &mut [Complex32]) {
        let mut span = 1;
        for _ in 0..self.local_stages {
            dit_pass(block, self.base(core), span);
            span <<= 1;
        }
    }

    /// Combines the core's block with its partner's for one exchange stage.
    pub fn exchange(&self, core: usize, stage: &ExchangeStage, own: &[Complex32], partner: &[Complex32]) -> Vec<Complex32> {
        let base = self.base(core);
        let half = self.half(core, stage);
        own.iter()
            .zip(partner)
            .enumerate()
            .map(|(k, (&mine, &theirs))| {
                let i = base + k;
                let w = twiddle(i & (stage.span - 1), 2 * stage.span);
                match half {
                    Half::Lower => mine + w * theirs,
                    Half::Upper => theirs - w * mine,
                }
            })
            .collect()
    }
}
