//! Reproducible test input for the receiver chain.
//!
//! Bits come from a 64-bit LCG (`s' = s * 6364136223846793005 +
//! 1442695040888963407 mod 2^64`, bit = top bit of `s'`), starting from the
//! seed as the initial state. They are Gray-mapped, interleaved and taken to
//! the transmit side with a forward FFT scaled by `1/N`, so that the chain's
//! unscaled IFFT recovers the interleaved constellation points.

use num_complex::Complex32;
use rustfft::FftPlanner;

use crate::dsp::{interleave, map_bits, DspError, Modulation};

const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
const INCREMENT: u64 = 1_442_695_040_888_963_407;

#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_mul(MULTIPLIER).wrapping_add(INCREMENT);
        self.state
    }

    pub fn next_bit(&mut self) -> u8 {
        (self.next_u64() >> 63) as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainInput {
    pub scheme: Modulation,
    /// Transmitted bits, which a correct chain must recover.
    pub bits: Vec<u8>,
    /// Frequency-domain samples entering the IFFT.
    pub samples: Vec<Complex32>,
}

pub fn generate_symbol(
    seed: u64,
    scheme: Modulation,
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<ChainInput, DspError> {
    let mut rng = Lcg64::new(seed);
    let bits: Vec<u8> = (0..n * scheme.bits_per_symbol()).map(|_| rng.next_bit()).collect();
    let mapped = map_bits(&bits, scheme)?;
    let mut buf = interleave(&mapped, rows, cols)?;
    FftPlanner::<f32>::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / n as f32;
    let samples = buf.into_iter().map(|v| v * scale).collect();
    Ok(ChainInput { scheme, bits, samples })
}
