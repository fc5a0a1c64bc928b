//! Builders that place the IFFT -> deinterleave -> demap chain onto cores.
//!
//! * Case I: all three kernels run back to back on one core.
//! * Case II: one kernel per core on three neighbouring cores; each hands
//!   the whole symbol to the next and raises one flag.
//! * Case III: the IFFT is split over a sub-grid of cores with a
//!   binary-exchange schedule, and deinterleave/demap are pipelined at a
//!   configurable block size.
//!
//! Kernel cycle costs come from [`Calibration`]; the kernels themselves run
//! for real inside the simulator so every case produces actual LLRs.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{
    bit_reverse_permute, deinterleave, deinterleave_source, demap, ifft, plan_parallel_ifft, DspError,
    Modulation, ParallelFftPlan, INTERLEAVER_COLS, INTERLEAVER_ROWS, SYMBOL_LEN,
};
use crate::memory::{complex_to_bytes, LocalMemory};
use crate::mesh::{CoreId, GlobalAddress, MeshConfig, MeshError};
use crate::sim::{run, ComputeAction, Instr, OutputStream, Payload, SimError, SimResult, TaskProgram, DEFAULT_WATCHDOG};
use crate::source::{generate_symbol, ChainInput};
use crate::sync::{emit_barrier, emit_signal, emit_wait, validate_channels, FlagChannel, SyncError, MAX_WAIT_DETECT};

pub const PROBE_ENTRY: &str = "chain_entry";
pub const PROBE_EXIT: &str = "chain_exit";
pub const PROBE_IFFT_DONE: &str = "ifft_done";
pub const PROBE_DEINT_BEGIN: &str = "deint_begin";
pub const PROBE_DEINT_END: &str = "deint_end";
pub const PROBE_DEMAP_BEGIN: &str = "demap_begin";

/// Barrier detect cost per flag, fitted with [`fit_barrier_detect`] against
/// the 2958-cycle eight-core IFFT on the default mesh.
pub const FITTED_BARRIER_DETECT: u64 = 25;

// Per-core memory map.
const IN: u32 = 0x0000;
const STAGE: u32 = 0x0800;
const LLR: u32 = 0x1000;
const EXCHANGE: u32 = 0x2000;
const BLOCK_FLAGS: u32 = 0x6000;
const GATHER_FLAGS: u32 = 0x6800;
const BARRIER_FLAGS: u32 = 0x7000;
const CREDIT_FLAG: u32 = 0x7c00;
const HANDOFF_FLAG: u32 = 0x7c04;

const SAMPLE_BYTES: u32 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeployError {
    #[error("block size {0} does not divide {SYMBOL_LEN}")]
    InvalidBlockSize(usize),
    #[error("IFFT core count {0} must be a power of two in 1..=32")]
    InvalidCoreCount(usize),
    #[error("{needed} cores do not fit on a {rows}x{cols} mesh")]
    MeshTooSmall { needed: usize, rows: u32, cols: u32 },
    #[error("invalid calibration: {0}")]
    Calibration(String),
    #[error("missing probe {0:?}")]
    MissingProbe(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CaseId {
    I,
    II,
    III,
}

impl CaseId {
    pub const ALL: [CaseId; 3] = [CaseId::I, CaseId::II, CaseId::III];

    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(CaseId::I),
            2 => Some(CaseId::II),
            3 => Some(CaseId::III),
            _ => None,
        }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaseId::I => "I",
            CaseId::II => "II",
            CaseId::III => "III",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostMode {
    /// Per-kernel totals measured on hardware, scaled linearly by sample count.
    Calibrated,
    /// Unit costs per butterfly / per sample. No reference numbers attached.
    Counted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mode: CostMode,
    pub ifft_cycles: u64,
    pub deint_cycles: u64,
    pub demap_cycles: u64,
    /// Consumer detect-and-clear cost of an ordinary flag wait.
    pub wait_detect_cycles: u64,
    /// Per-flag cost of the sequentially polled IFFT barrier.
    pub barrier_detect_cycles: u64,
    pub butterfly_cycles: u64,
    pub deint_sample_cycles: u64,
    pub demap_sample_cycles: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            mode: CostMode::Calibrated,
            ifft_cycles: 18_862,
            deint_cycles: 45_043,
            demap_cycles: 46_377,
            wait_detect_cycles: 1,
            barrier_detect_cycles: FITTED_BARRIER_DETECT,
            butterfly_cycles: 18,
            deint_sample_cycles: 176,
            demap_sample_cycles: 181,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<(), DeployError> {
        let positive = [
            ("ifft_cycles", self.ifft_cycles),
            ("deint_cycles", self.deint_cycles),
            ("demap_cycles", self.demap_cycles),
            ("butterfly_cycles", self.butterfly_cycles),
            ("deint_sample_cycles", self.deint_sample_cycles),
            ("demap_sample_cycles", self.demap_sample_cycles),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DeployError::Calibration(format!("{name} must be positive")));
            }
        }
        if self.wait_detect_cycles > MAX_WAIT_DETECT {
            return Err(DeployError::Calibration(format!(
                "wait_detect_cycles {} exceeds the {MAX_WAIT_DETECT}-cycle poll bound",
                self.wait_detect_cycles
            )));
        }
        Ok(())
    }

    /// Calibrated per-sample cost of a kernel.
    pub fn per_sample(&self, kernel: Kernel) -> f64 {
        self.total(kernel) as f64 / SYMBOL_LEN as f64
    }

    fn total(&self, kernel: Kernel) -> u64 {
        match kernel {
            Kernel::Ifft => self.ifft_cycles,
            Kernel::Deinterleave => self.deint_cycles,
            Kernel::Demap => self.demap_cycles,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    Ifft,
    Deinterleave,
    Demap,
}

/// Cycles to run `kernel` over `samples` of a 256-sample symbol.
///
/// Calibrated mode scales the symbol total, rounding half up; a full symbol
/// returns the total exactly. For the IFFT, `samples` is the share of the
/// transform one core owns.
pub fn kernel_cost(kernel: Kernel, samples: usize, cal: &Calibration) -> u64 {
    let samples = samples as u64;
    let n = SYMBOL_LEN as u64;
    match cal.mode {
        CostMode::Calibrated => (cal.total(kernel) * samples + n / 2) / n,
        CostMode::Counted => match kernel {
            Kernel::Ifft => samples / 2 * n.trailing_zeros() as u64 * cal.butterfly_cycles,
            Kernel::Deinterleave => samples * cal.deint_sample_cycles,
            Kernel::Demap => samples * cal.demap_sample_cycles,
        },
    }
}

/// Splits `total` over `parts` passes so the pieces sum back exactly.
fn pass_costs(total: u64, parts: u32) -> Vec<u64> {
    let parts = parts.max(1) as u64;
    (0..parts).map(|p| total * (p + 1) / parts - total * p / parts).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub scheme: Modulation,
    pub noise_var: f32,
    pub interleaver_rows: usize,
    pub interleaver_cols: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            scheme: Modulation::Qam16,
            noise_var: 1.0,
            interleaver_rows: INTERLEAVER_ROWS,
            interleaver_cols: INTERLEAVER_COLS,
            seed: 0,
        }
    }
}

impl ChainConfig {
    pub fn input(&self) -> Result<ChainInput, DspError> {
        generate_symbol(
            self.seed,
            self.scheme,
            SYMBOL_LEN,
            self.interleaver_rows,
            self.interleaver_cols,
        )
    }
}

/// How the pipelined deinterleave -> demap pair hands over blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineFlow {
    /// Each block lands in its own slot of a full-symbol buffer and raises
    /// its own flag. No flag is ever reused within a symbol.
    PerBlockFlags,
    /// One data flag plus a reverse credit flag: the producer may finish one
    /// block ahead but must see the previous block taken before signalling.
    Credit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseParams {
    pub case: CaseId,
    /// Samples per synchronization between deinterleave and demap (Case III).
    pub block_size: usize,
    /// Cores for the parallel IFFT (Case III).
    pub ifft_cores: usize,
    pub flow: PipelineFlow,
    pub chain: ChainConfig,
}

impl CaseParams {
    pub fn new(case: CaseId) -> Self {
        Self {
            case,
            block_size: 1,
            ifft_cores: 8,
            flow: PipelineFlow::PerBlockFlags,
            chain: ChainConfig::default(),
        }
    }
}

/// How a task or stage duration is read off a timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Busy cycles of one core.
    Occupancy(CoreId),
    /// From the earliest probe labelled `from` to the latest labelled `to`.
    Span { from: String, to: String },
}

impl Measure {
    fn span(from: &str, to: &str) -> Self {
        Measure::Span {
            from: from.into(),
            to: to.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMeasure {
    pub kernel: Kernel,
    pub measure: Measure,
}

#[derive(Debug, Clone)]
pub struct DeploymentPlan {
    pub case: CaseId,
    pub programs: Vec<TaskProgram>,
    pub channels: Vec<FlagChannel>,
    pub block_size: usize,
    pub ifft_cores: usize,
    /// Cores per kernel, in task order.
    pub placement: BTreeMap<String, Vec<CoreId>>,
    /// Per-kernel latency readings. Case III folds deinterleave and demap
    /// into one pipelined entry.
    pub tasks: Vec<TaskMeasure>,
    /// Stages that bound throughput; the largest one is the bottleneck.
    pub stages: Vec<Measure>,
    pub output: OutputRegion,
    pub input: ChainInput,
}

/// Where the chain result lives after a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputRegion {
    Llrs { core: CoreId, offset: u32, count: usize },
    /// Time-domain IFFT output spread over cores in block order.
    IfftBlocks { first: CoreId, block_len: usize },
}

impl DeploymentPlan {
    pub fn execute(&self, cfg: &MeshConfig) -> Result<SimResult, DeployError> {
        Ok(run(&self.programs, cfg, DEFAULT_WATCHDOG)?)
    }

    /// Chain output read from a finished run: LLRs for full chains, the
    /// assembled transform for IFFT-only plans.
    pub fn output_llrs(&self, result: &SimResult) -> Result<Vec<f32>, DeployError> {
        match self.output {
            OutputRegion::Llrs { core, offset, count } => Ok(result.memories[&core]
                .read_f32s(offset, count)
                .map_err(|source| SimError::Memory { core, source })?),
            OutputRegion::IfftBlocks { .. } => Ok(self
                .ifft_output(result)?
                .iter()
                .flat_map(|c| [c.re, c.im])
                .collect()),
        }
    }

    pub fn ifft_output(&self, result: &SimResult) -> Result<Vec<num_complex::Complex32>, DeployError> {
        let cores = self.placement.get("ifft").cloned().unwrap_or_default();
        let block_len = SYMBOL_LEN / cores.len().max(1);
        let mut out = Vec::with_capacity(SYMBOL_LEN);
        for core in cores {
            out.extend(
                result.memories[&core]
                    .read_complex(IN, block_len)
                    .map_err(|source| SimError::Memory { core, source })?,
            );
        }
        Ok(out)
    }

    pub fn core_count(&self) -> usize {
        self.programs.len()
    }
}

pub fn build_case(params: &CaseParams, cal: &Calibration, cfg: &MeshConfig) -> Result<DeploymentPlan, DeployError> {
    cal.validate()?;
    cfg.validate()?;
    let input = params.chain.input()?;
    match params.case {
        CaseId::I => build_single_core(params, cal, cfg, input),
        CaseId::II => build_task_parallel(params, cal, cfg, input),
        CaseId::III => build_data_parallel(params, cal, cfg, input),
    }
}

fn lexicographic_cores(cfg: &MeshConfig, n: usize) -> Result<Vec<CoreId>, DeployError> {
    let cores: Vec<CoreId> = cfg.cores().take(n).collect();
    if cores.len() < n {
        return Err(DeployError::MeshTooSmall {
            needed: n,
            rows: cfg.rows,
            cols: cfg.cols,
        });
    }
    Ok(cores)
}

fn ifft_action() -> ComputeAction {
    Arc::new(|m: &mut LocalMemory| {
        let x = m.read_complex(IN, SYMBOL_LEN)?;
        let y = ifft(&x).expect("symbol length is a power of two");
        m.write_complex(STAGE, &y)
    })
}

fn deint_action(
    chain: &ChainConfig,
    src: u32,
    dst: u32,
) -> ComputeAction {
    let (rows, cols) = (chain.interleaver_rows, chain.interleaver_cols);
    Arc::new(move |m: &mut LocalMemory| {
        let y = m.read_complex(src, SYMBOL_LEN)?;
        let x = deinterleave(&y, rows, cols).expect("interleaver geometry validated when building");
        m.write_complex(dst, &x)
    })
}

fn demap_action(
    chain: &ChainConfig,
    first: usize,
    count: usize,
) -> ComputeAction {
    let (scheme, noise) = (chain.scheme, chain.noise_var);
    let bps = scheme.bits_per_symbol();
    Arc::new(move |m: &mut LocalMemory| {
        let y = m.read_complex(IN + (first as u32) * SAMPLE_BYTES, count)?;
        let llrs = demap(&y, scheme, noise).expect("noise variance validated when building");
        m.write_f32s(LLR + (first * bps * 4) as u32, &llrs)
    })
}

fn check_chain(chain: &ChainConfig) -> Result<(), DeployError> {
    if chain.interleaver_rows * chain.interleaver_cols != SYMBOL_LEN {
        return Err(DspError::ShapeMismatch {
            len: SYMBOL_LEN,
            rows: chain.interleaver_rows,
            cols: chain.interleaver_cols,
        }
        .into());
    }
    if !(chain.noise_var > 0.0) {
        return Err(DspError::NonPositiveNoise(chain.noise_var).into());
    }
    Ok(())
}

fn llr_output(core: CoreId, chain: &ChainConfig) -> OutputRegion {
    OutputRegion::Llrs {
        core,
        offset: LLR,
        count: SYMBOL_LEN * chain.scheme.bits_per_symbol(),
    }
}

fn build_single_core(
    params: &CaseParams,
    cal: &Calibration,
    cfg: &MeshConfig,
    input: ChainInput,
) -> Result<DeploymentPlan, DeployError> {
    check_chain(&params.chain)?;
    let core = lexicographic_cores(cfg, 1)?[0];
    let mut p = TaskProgram::new(core);
    p.preload(IN, complex_to_bytes(&input.samples));
    p.probe(PROBE_ENTRY)
        .compute_with(kernel_cost(Kernel::Ifft, SYMBOL_LEN, cal), ifft_action(), None)
        .probe(PROBE_IFFT_DONE)
        .probe(PROBE_DEINT_BEGIN)
        .compute_with(
            kernel_cost(Kernel::Deinterleave, SYMBOL_LEN, cal),
            deint_action(&params.chain, STAGE, IN),
            None,
        )
        .probe(PROBE_DEINT_END)
        .probe(PROBE_DEMAP_BEGIN)
        .compute_with(
            kernel_cost(Kernel::Demap, SYMBOL_LEN, cal),
            demap_action(&params.chain, 0, SYMBOL_LEN),
            None,
        )
        .probe(PROBE_EXIT);
    let placement = [("ifft", core), ("deint", core), ("demap", core)]
        .into_iter()
        .map(|(k, c)| (k.to_string(), vec![c]))
        .collect();
    Ok(DeploymentPlan {
        case: CaseId::I,
        programs: vec![p],
        channels: Vec::new(),
        block_size: SYMBOL_LEN,
        ifft_cores: 1,
        placement,
        tasks: vec![
            TaskMeasure {
                kernel: Kernel::Ifft,
                measure: Measure::span(PROBE_ENTRY, PROBE_IFFT_DONE),
            },
            TaskMeasure {
                kernel: Kernel::Deinterleave,
                measure: Measure::span(PROBE_DEINT_BEGIN, PROBE_DEINT_END),
            },
            TaskMeasure {
                kernel: Kernel::Demap,
                measure: Measure::span(PROBE_DEMAP_BEGIN, PROBE_EXIT),
            },
        ],
        stages: vec![Measure::Occupancy(core)],
        output: llr_output(core, &params.chain),
        input,
    })
}

fn build_task_parallel(
    params: &CaseParams,
    cal: &Calibration,
    cfg: &MeshConfig,
    input: ChainInput,
) -> Result<DeploymentPlan, DeployError> {
    check_chain(&params.chain)?;
    let cores = lexicographic_cores(cfg, 3)?;
    let (a, b, c) = (cores[0], cores[1], cores[2]);
    let symbol_bytes = SYMBOL_LEN as u32 * SAMPLE_BYTES;
    let to_b = FlagChannel::new(b, HANDOFF_FLAG);
    let to_c = FlagChannel::new(c, HANDOFF_FLAG);
    let detect = cal.wait_detect_cycles;

    let mut pa = TaskProgram::new(a);
    pa.preload(IN, complex_to_bytes(&input.samples));
    pa.probe(PROBE_ENTRY).compute_with(
        kernel_cost(Kernel::Ifft, SYMBOL_LEN, cal),
        ifft_action(),
        Some(OutputStream {
            src_offset: STAGE,
            len: symbol_bytes,
            dst: GlobalAddress::compose(b, IN),
        }),
    );
    let pa = emit_signal(pa, to_b);

    let mut pb = emit_wait(TaskProgram::new(b), to_b, detect)?;
    pb.compute_with(
        kernel_cost(Kernel::Deinterleave, SYMBOL_LEN, cal),
        deint_action(&params.chain, IN, STAGE),
        Some(OutputStream {
            src_offset: STAGE,
            len: symbol_bytes,
            dst: GlobalAddress::compose(c, IN),
        }),
    );
    let pb = emit_signal(pb, to_c);

    let mut pc = emit_wait(TaskProgram::new(c), to_c, detect)?;
    pc.compute_with(
        kernel_cost(Kernel::Demap, SYMBOL_LEN, cal),
        demap_action(&params.chain, 0, SYMBOL_LEN),
        None,
    )
    .probe(PROBE_EXIT);

    let programs = vec![pa, pb, pc];
    let channels = vec![to_b, to_c];
    validate_channels(&channels, &programs)?;
    let placement = [("ifft", a), ("deint", b), ("demap", c)]
        .into_iter()
        .map(|(k, c)| (k.to_string(), vec![c]))
        .collect();
    Ok(DeploymentPlan {
        case: CaseId::II,
        programs,
        channels,
        block_size: SYMBOL_LEN,
        ifft_cores: 1,
        placement,
        tasks: vec![
            TaskMeasure {
                kernel: Kernel::Ifft,
                measure: Measure::Occupancy(a),
            },
            TaskMeasure {
                kernel: Kernel::Deinterleave,
                measure: Measure::Occupancy(b),
            },
            TaskMeasure {
                kernel: Kernel::Demap,
                measure: Measure::Occupancy(c),
            },
        ],
        stages: vec![Measure::Occupancy(a), Measure::Occupancy(b), Measure::Occupancy(c)],
        output: llr_output(c, &params.chain),
        input,
    })
}

/// Rows x cols of the near-square sub-grid holding `n` IFFT cores.
pub fn ifft_subgrid(n: usize) -> (usize, usize) {
    let rows = 1usize << (n.trailing_zeros() / 2);
    (rows, n / rows)
}

struct Layout {
    ifft: Vec<CoreId>,
    deint: CoreId,
    demap: CoreId,
}

fn data_parallel_layout(n_cores: usize, cfg: &MeshConfig) -> Result<Layout, DeployError> {
    let (rows, cols) = ifft_subgrid(n_cores);
    let too_small = || DeployError::MeshTooSmall {
        needed: n_cores + 2,
        rows: cfg.rows,
        cols: cfg.cols,
    };
    if rows > cfg.rows as usize || cols > cfg.cols as usize {
        return Err(too_small());
    }
    let ifft = (0..n_cores)
        .map(|i| CoreId::new((i / cols) as u32, (i % cols) as u32))
        .collect();
    let (deint, demap) = if cols + 2 <= cfg.cols as usize {
        (CoreId::new(0, cols as u32), CoreId::new(0, cols as u32 + 1))
    } else if rows < cfg.rows as usize && cfg.cols >= 2 {
        (CoreId::new(rows as u32, 0), CoreId::new(rows as u32, 1))
    } else {
        return Err(too_small());
    };
    Ok(Layout { ifft, deint, demap })
}

fn barrier_flag(owner: CoreId, stage: usize, from: usize, n_cores: usize) -> FlagChannel {
    FlagChannel::new(owner, BARRIER_FLAGS + ((stage * n_cores + from) as u32) * 4)
}

/// Programs for the parallel IFFT. With a sink, the last pass streams each
/// block into the sink's input buffer and raises a per-core gather flag.
fn parallel_ifft_programs(
    plan: &ParallelFftPlan,
    cores: &[CoreId],
    input: &ChainInput,
    cal: &Calibration,
    sink: Option<CoreId>,
) -> Result<(Vec<TaskProgram>, Vec<FlagChannel>), DeployError> {
    let n_cores = plan.n_cores;
    let m = plan.block_len;
    let block_bytes = m as u32 * SAMPLE_BYTES;
    let passes = pass_costs(kernel_cost(Kernel::Ifft, m, cal), plan.stages());
    let local_cost: u64 = passes[..plan.local_stages as usize].iter().sum();
    let permuted = bit_reverse_permute(&input.samples)?;
    let plan = Arc::new(plan.clone());
    let mut programs = Vec::with_capacity(n_cores);
    let mut channels = Vec::new();

    for (i, &core) in cores.iter().enumerate() {
        let mut p = TaskProgram::new(core);
        p.preload(IN, complex_to_bytes(&permuted[i * m..(i + 1) * m]));
        p.probe(PROBE_ENTRY);
        let out_stream = || {
            sink.map(|s| OutputStream {
                src_offset: IN,
                len: block_bytes,
                dst: GlobalAddress::compose(s, IN + i as u32 * block_bytes),
            })
        };
        let local_plan = Arc::clone(&plan);
        let local = Arc::new(move |mem: &mut LocalMemory| {
            let mut block = mem.read_complex(IN, m)?;
            local_plan.run_local_stages(i, &mut block);
            mem.write_complex(IN, &block)
        });
        let last_is_local = plan.exchange_stages.is_empty();
        let stream = if last_is_local { out_stream() } else { None };
        p.compute_with(local_cost, local, stream);

        for (j, stage) in plan.exchange_stages.iter().enumerate() {
            let partner = plan.partner(i, stage);
            let recv = EXCHANGE + j as u32 * block_bytes;
            p.push(Instr::RemoteWrite {
                dst: GlobalAddress::compose(cores[partner], recv),
                payload: Payload::Local {
                    offset: IN,
                    len: block_bytes,
                },
            });
            for (q, &other) in cores.iter().enumerate() {
                if q != i {
                    p = emit_signal(p, barrier_flag(other, j, i, n_cores));
                }
            }
            let inbound: Vec<FlagChannel> = (0..n_cores)
                .filter(|&q| q != i)
                .map(|q| barrier_flag(core, j, q, n_cores))
                .collect();
            channels.extend(inbound.iter().copied());
            p = emit_barrier(p, &inbound, cal.barrier_detect_cycles)?;

            let stage_plan = Arc::clone(&plan);
            let stage = *stage;
            let exchange = Arc::new(move |mem: &mut LocalMemory| {
                let own = mem.read_complex(IN, m)?;
                let theirs = mem.read_complex(recv, m)?;
                let out = stage_plan.exchange(i, &stage, &own, &theirs);
                mem.write_complex(IN, &out)
            });
            let last = j + 1 == plan.exchange_stages.len();
            let stream = if last { out_stream() } else { None };
            p.compute_with(passes[stage.stage as usize], exchange, stream);
        }
        p.probe(PROBE_IFFT_DONE);
        if let Some(s) = sink {
            let gather = FlagChannel::new(s, GATHER_FLAGS + i as u32 * 4);
            p = emit_signal(p, gather);
            channels.push(gather);
        }
        programs.push(p);
    }
    Ok((programs, channels))
}

fn check_ifft_cores(n: usize) -> Result<(), DeployError> {
    if n.is_power_of_two() && n <= 32 {
        Ok(())
    } else {
        Err(DeployError::InvalidCoreCount(n))
    }
}

fn build_data_parallel(
    params: &CaseParams,
    cal: &Calibration,
    cfg: &MeshConfig,
    input: ChainInput,
) -> Result<DeploymentPlan, DeployError> {
    check_chain(&params.chain)?;
    check_ifft_cores(params.ifft_cores)?;
    let b = params.block_size;
    if b == 0 || SYMBOL_LEN % b != 0 {
        return Err(DeployError::InvalidBlockSize(b));
    }
    let layout = data_parallel_layout(params.ifft_cores, cfg)?;
    let plan = plan_parallel_ifft(SYMBOL_LEN, params.ifft_cores)?;
    let (mut programs, mut channels) =
        parallel_ifft_programs(&plan, &layout.ifft, &input, cal, Some(layout.deint))?;

    let detect = cal.wait_detect_cycles;
    let blocks = SYMBOL_LEN / b;
    let gather: Vec<FlagChannel> = (0..params.ifft_cores)
        .map(|i| FlagChannel::new(layout.deint, GATHER_FLAGS + i as u32 * 4))
        .collect();
    let mut pd = emit_barrier(TaskProgram::new(layout.deint), &gather, detect)?;
    pd.probe(PROBE_DEINT_BEGIN);
    let mut pm = TaskProgram::new(layout.demap);
    pm.probe(PROBE_DEMAP_BEGIN);

    let data_flag = |k: usize| match params.flow {
        PipelineFlow::PerBlockFlags => FlagChannel::new(layout.demap, BLOCK_FLAGS + k as u32 * 4),
        PipelineFlow::Credit => FlagChannel::new(layout.demap, BLOCK_FLAGS),
    };
    let credit = FlagChannel::new(layout.deint, CREDIT_FLAG);
    let (rows, cols) = (params.chain.interleaver_rows, params.chain.interleaver_cols);
    let block_bytes = b as u32 * SAMPLE_BYTES;

    for k in 0..blocks {
        let first = k * b;
        let action = Arc::new(move |mem: &mut LocalMemory| {
            for pos in first..first + b {
                let src = deinterleave_source(pos, rows, cols) as u32;
                let v = mem.read_complex(IN + src * SAMPLE_BYTES, 1)?;
                mem.write_complex(STAGE + pos as u32 * SAMPLE_BYTES, &v)?;
            }
            Ok(())
        });
        pd.compute_with(
            kernel_cost(Kernel::Deinterleave, b, cal),
            action,
            Some(OutputStream {
                src_offset: STAGE + first as u32 * SAMPLE_BYTES,
                len: block_bytes,
                dst: GlobalAddress::compose(layout.demap, IN + first as u32 * SAMPLE_BYTES),
            }),
        );
        if params.flow == PipelineFlow::Credit && k >= 1 {
            pd = emit_wait(pd, credit, detect)?;
        }
        pd = emit_signal(pd, data_flag(k));

        pm = emit_wait(pm, data_flag(k), detect)?;
        if params.flow == PipelineFlow::Credit && k + 1 < blocks {
            pm = emit_signal(pm, credit);
        }
        pm.compute_with(
            kernel_cost(Kernel::Demap, b, cal),
            demap_action(&params.chain, first, b),
            None,
        );
    }
    pm.probe(PROBE_EXIT);
    pd.probe(PROBE_DEINT_END);

    channels.extend(gather.iter().copied());
    match params.flow {
        PipelineFlow::PerBlockFlags => channels.extend((0..blocks).map(data_flag)),
        PipelineFlow::Credit => {
            channels.push(data_flag(0));
            if blocks > 1 {
                channels.push(credit);
            }
        }
    }
    channels.sort();
    channels.dedup();
    programs.push(pd);
    programs.push(pm);
    validate_channels(&channels, &programs)?;

    let mut placement = BTreeMap::new();
    placement.insert("ifft".to_string(), layout.ifft.clone());
    placement.insert("deint".to_string(), vec![layout.deint]);
    placement.insert("demap".to_string(), vec![layout.demap]);
    let ifft_span = Measure::span(PROBE_ENTRY, PROBE_IFFT_DONE);
    let pair_span = Measure::span(PROBE_DEINT_BEGIN, PROBE_EXIT);
    Ok(DeploymentPlan {
        case: CaseId::III,
        programs,
        channels,
        block_size: b,
        ifft_cores: params.ifft_cores,
        placement,
        tasks: vec![
            TaskMeasure {
                kernel: Kernel::Ifft,
                measure: ifft_span.clone(),
            },
            TaskMeasure {
                kernel: Kernel::Deinterleave,
                measure: pair_span.clone(),
            },
        ],
        stages: vec![ifft_span, pair_span],
        output: llr_output(layout.demap, &params.chain),
        input,
    })
}

/// The parallel IFFT alone, as swept over core counts.
pub fn build_parallel_ifft(
    n_cores: usize,
    chain: &ChainConfig,
    cal: &Calibration,
    cfg: &MeshConfig,
) -> Result<DeploymentPlan, DeployError> {
    cal.validate()?;
    cfg.validate()?;
    check_ifft_cores(n_cores)?;
    let input = chain.input()?;
    let (rows, cols) = ifft_subgrid(n_cores);
    if rows > cfg.rows as usize || cols > cfg.cols as usize {
        return Err(DeployError::MeshTooSmall {
            needed: n_cores,
            rows: cfg.rows,
            cols: cfg.cols,
        });
    }
    let cores: Vec<CoreId> = (0..n_cores)
        .map(|i| CoreId::new((i / cols) as u32, (i % cols) as u32))
        .collect();
    let plan = plan_parallel_ifft(SYMBOL_LEN, n_cores)?;
    let (programs, mut channels) = parallel_ifft_programs(&plan, &cores, &input, cal, None)?;
    channels.sort();
    validate_channels(&channels, &programs)?;
    let span = Measure::span(PROBE_ENTRY, PROBE_IFFT_DONE);
    Ok(DeploymentPlan {
        case: CaseId::III,
        programs,
        channels,
        block_size: SYMBOL_LEN,
        ifft_cores: n_cores,
        placement: BTreeMap::from([("ifft".to_string(), cores.clone())]),
        tasks: vec![TaskMeasure {
            kernel: Kernel::Ifft,
            measure: span.clone(),
        }],
        stages: vec![span],
        output: OutputRegion::IfftBlocks {
            first: cores[0],
            block_len: plan.block_len,
        },
        input,
    })
}

/// Reads a measure off a finished timeline.
pub fn measure(m: &Measure, timeline: &crate::sim::Timeline) -> Result<u64, DeployError> {
    match m {
        Measure::Occupancy(core) => Ok(crate::sim::occupancy(timeline, *core)?),
        Measure::Span { from, to } => {
            let start = timeline
                .probes_labelled(from)
                .map(|p| p.cycle)
                .min()
                .ok_or_else(|| DeployError::MissingProbe(from.clone()))?;
            let end = timeline
                .probes_labelled(to)
                .map(|p| p.cycle)
                .max()
                .ok_or_else(|| DeployError::MissingProbe(to.clone()))?;
            Ok(end.saturating_sub(start))
        }
    }
}

/// IFFT latency on `n_cores`, obtained by simulating the exchange schedule.
pub fn parallel_ifft_latency_model(n_cores: usize, cal: &Calibration, cfg: &MeshConfig) -> Result<u64, DeployError> {
    if ![1, 2, 4, 8, 16, 32].contains(&n_cores) {
        return Err(DeployError::InvalidCoreCount(n_cores));
    }
    let plan = build_parallel_ifft(n_cores, &ChainConfig::default(), cal, cfg)?;
    let result = plan.execute(cfg)?;
    measure(&plan.stages[0], &result.timeline)
}

/// Latency of each core count, in input order.
pub fn ifft_sweep(cores: &[usize], cal: &Calibration, cfg: &MeshConfig) -> Result<Vec<(usize, u64)>, DeployError> {
    cores
        .par_iter()
        .map(|&n| parallel_ifft_latency_model(n, cal, cfg).map(|t| (n, t)))
        .collect()
}

/// Combined deinterleave + demap latency of Case III per block size.
pub fn blocksize_sweep(
    sizes: &[usize],
    base: &CaseParams,
    cal: &Calibration,
    cfg: &MeshConfig,
) -> Result<Vec<(usize, u64)>, DeployError> {
    sizes
        .par_iter()
        .map(|&b| {
            let params = CaseParams {
                case: CaseId::III,
                block_size: b,
                ..base.clone()
            };
            let plan = build_case(&params, cal, cfg)?;
            let result = plan.execute(cfg)?;
            let pair = plan.tasks[1].measure.clone();
            measure(&pair, &result.timeline).map(|t| (b, t))
        })
        .collect()
}

/// Divisors of `n` in increasing order.
pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Fits the per-flag barrier cost so the `n_cores` IFFT lands closest to
/// `target` cycles. Latency is non-decreasing in the barrier cost, so the
/// smallest best value is found by bisection on the crossing point.
pub fn fit_barrier_detect(
    n_cores: usize,
    target: u64,
    cal: &Calibration,
    cfg: &MeshConfig,
) -> Result<u64, DeployError> {
    let latency = |d: u64| {
        let c = Calibration {
            barrier_detect_cycles: d,
            ..cal.clone()
        };
        parallel_ifft_latency_model(n_cores, &c, cfg)
    };
    let (mut lo, mut hi) = (0u64, 1u64);
    while latency(hi)? < target {
        lo = hi;
        hi *= 2;
        if hi > 1 << 20 {
            return Err(DeployError::Calibration(format!("cannot reach {target} cycles")));
        }
    }
    // latency(lo) < target <= latency(hi), or lo == 0
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if latency(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (tl, th) = (latency(lo)?, latency(hi)?);
    Ok(if target.abs_diff(tl) <= th.abs_diff(target) { lo } else { hi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::hard_decisions;
    use proptest::prelude::*;

    fn cfg() -> MeshConfig {
        MeshConfig::default()
    }

    fn run_case(params: &CaseParams) -> (DeploymentPlan, SimResult) {
        let plan = build_case(params, &Calibration::default(), &cfg()).unwrap();
        let r = plan.execute(&cfg()).unwrap();
        (plan, r)
    }

    fn exit(r: &SimResult) -> u64 {
        r.timeline.probes_labelled(PROBE_EXIT).map(|p| p.cycle).max().unwrap()
    }

    #[test]
    fn kernel_cost_scales_and_rounds() {
        let cal = Calibration::default();
        assert_eq!(kernel_cost(Kernel::Ifft, 256, &cal), 18_862);
        assert_eq!(kernel_cost(Kernel::Deinterleave, 256, &cal), 45_043);
        assert_eq!(kernel_cost(Kernel::Demap, 1, &cal), 181);
        assert_eq!(kernel_cost(Kernel::Deinterleave, 1, &cal), 176);
        assert_eq!(kernel_cost(Kernel::Ifft, 32, &cal), 2358);
        let counted = Calibration {
            mode: CostMode::Counted,
            ..cal
        };
        assert_eq!(kernel_cost(Kernel::Ifft, 256, &counted), 1024 * 18);
    }

    #[test]
    fn pass_costs_sum_back() {
        for total in [0, 1, 7, 2358, 18_862] {
            for parts in 1..=8 {
                let v = pass_costs(total, parts);
                assert_eq!(v.len(), parts as usize);
                assert_eq!(v.iter().sum::<u64>(), total);
            }
        }
    }

    #[test]
    fn calibration_validation() {
        let mut cal = Calibration::default();
        assert!(cal.validate().is_ok());
        cal.wait_detect_cycles = 7;
        assert!(cal.validate().is_err());
        let cal = Calibration {
            demap_cycles: 0,
            ..Calibration::default()
        };
        assert!(cal.validate().is_err());
    }

    #[test]
    fn single_core_is_the_sum_of_kernels() {
        let (plan, r) = run_case(&CaseParams::new(CaseId::I));
        assert_eq!(plan.core_count(), 1);
        assert_eq!(exit(&r), 110_282);
        let tasks: Vec<u64> = plan.tasks.iter().map(|t| measure(&t.measure, &r.timeline).unwrap()).collect();
        assert_eq!(tasks, vec![18_862, 45_043, 46_377]);
    }

    #[test]
    fn task_parallel_adds_only_transfer_and_sync() {
        let (plan, r) = run_case(&CaseParams::new(CaseId::II));
        let total = exit(&r);
        assert!((110_282..=110_296).contains(&total), "{total}");
        let stages: Vec<u64> = plan.stages.iter().map(|m| measure(m, &r.timeline).unwrap()).collect();
        assert_eq!(stages.iter().max(), Some(&46_378));
        assert!(stages.iter().all(|&s| s > 0));
    }

    #[test]
    fn data_parallel_lands_near_reference() {
        let (plan, r) = run_case(&CaseParams::new(CaseId::III));
        let ifft = measure(&plan.tasks[0].measure, &r.timeline).unwrap();
        let pair = measure(&plan.tasks[1].measure, &r.timeline).unwrap();
        assert!(ifft.abs_diff(2958) * 20 <= 2958, "{ifft}");
        assert!(pair.abs_diff(47_585) * 20 <= 47_585, "{pair}");
        assert_eq!(plan.placement["ifft"].len(), 8);
    }

    #[test]
    fn every_case_recovers_the_bits() {
        let mut outputs = Vec::new();
        for case in CaseId::ALL {
            let (plan, r) = run_case(&CaseParams::new(case));
            let llrs = plan.output_llrs(&r).unwrap();
            assert_eq!(hard_decisions(&llrs), plan.input.bits, "case {case}");
            outputs.push(llrs);
        }
        assert_eq!(outputs[0], outputs[1]);
        // the parallel IFFT adds in a different order; LLRs agree closely
        for (a, b) in outputs[0].iter().zip(&outputs[2]) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn credit_flow_matches_per_block_flags() {
        for b in [1, 4, 256] {
            let mut params = CaseParams::new(CaseId::III);
            params.block_size = b;
            let (plan, r) = run_case(&params);
            params.flow = PipelineFlow::Credit;
            let (cplan, cr) = run_case(&params);
            assert_eq!(plan.output_llrs(&r).unwrap(), cplan.output_llrs(&cr).unwrap());
            assert!(exit(&cr) >= exit(&r));
        }
    }

    #[test]
    fn parallel_ifft_is_bit_identical_to_single_core() {
        let chain = ChainConfig::default();
        let reference = ifft(&chain.input().unwrap().samples).unwrap();
        for n in [1, 2, 4, 8, 16, 32] {
            let plan = build_parallel_ifft(n, &chain, &Calibration::default(), &cfg()).unwrap();
            let r = plan.execute(&cfg()).unwrap();
            assert_eq!(plan.ifft_output(&r).unwrap(), reference, "n_cores {n}");
        }
    }

    #[test]
    fn ifft_latency_curve() {
        let sweep = ifft_sweep(&[1, 2, 4, 8, 16, 32], &Calibration::default(), &cfg()).unwrap();
        let t: Vec<u64> = sweep.iter().map(|&(_, t)| t).collect();
        assert_eq!(sweep[0], (1, 18_862));
        assert!(t[0] > t[1] && t[1] > t[2] && t[2] > t[3]);
        assert!(t[5] > t[4]);
        let efficiency = t[0] as f64 / (8.0 * t[3] as f64);
        assert!((0.70..=0.90).contains(&efficiency), "{efficiency}");
    }

    #[test]
    fn barrier_fit_reproduces_the_default() {
        let fitted = fit_barrier_detect(8, 2958, &Calibration::default(), &cfg()).unwrap();
        assert_eq!(fitted, FITTED_BARRIER_DETECT);
    }

    #[test]
    fn smallest_block_is_fastest() {
        let sizes = divisors(256);
        assert_eq!(sizes, vec![1, 2, 4, 8, 16, 32, 64, 128, 256]);
        let sweep = blocksize_sweep(&sizes, &CaseParams::new(CaseId::III), &Calibration::default(), &cfg()).unwrap();
        let t: Vec<u64> = sweep.iter().map(|&(_, t)| t).collect();
        assert!(t.windows(2).all(|w| w[0] < w[1]), "{t:?}");
    }

    #[test]
    fn rejects_bad_parameters() {
        let cal = Calibration::default();
        let mut params = CaseParams::new(CaseId::III);
        params.block_size = 3;
        assert_eq!(build_case(&params, &cal, &cfg()).unwrap_err(), DeployError::InvalidBlockSize(3));
        params.block_size = 0;
        assert!(build_case(&params, &cal, &cfg()).is_err());
        for n in [0, 3, 64] {
            params.block_size = 1;
            params.ifft_cores = n;
            assert_eq!(build_case(&params, &cal, &cfg()).unwrap_err(), DeployError::InvalidCoreCount(n));
        }
        assert!(parallel_ifft_latency_model(64, &cal, &cfg()).is_err());
        let tiny = MeshConfig {
            rows: 2,
            cols: 2,
            ..cfg()
        };
        params.ifft_cores = 4;
        assert!(matches!(
            build_case(&params, &cal, &tiny),
            Err(DeployError::MeshTooSmall { .. })
        ));
        let single = MeshConfig {
            rows: 1,
            cols: 2,
            ..cfg()
        };
        assert!(build_case(&CaseParams::new(CaseId::II), &cal, &single).is_err());
    }

    #[test]
    fn case_one_ignores_pipeline_parameters() {
        let mut params = CaseParams::new(CaseId::I);
        params.block_size = 3;
        params.ifft_cores = 5;
        let (_, r) = run_case(&params);
        assert_eq!(exit(&r), 110_282);
    }

    #[test]
    fn subgrid_shapes() {
        let shapes: Vec<_> = [1, 2, 4, 8, 16, 32].iter().map(|&n| ifft_subgrid(n)).collect();
        assert_eq!(shapes, vec![(1, 1), (1, 2), (2, 2), (2, 4), (4, 4), (4, 8)]);
    }

    #[test]
    fn slower_links_change_timing_not_data() {
        let params = CaseParams::new(CaseId::III);
        let (plan, r) = run_case(&params);
        let slow = MeshConfig {
            hop_cycles: 5,
            ..cfg()
        };
        let splan = build_case(&params, &Calibration::default(), &slow).unwrap();
        let sr = splan.execute(&slow).unwrap();
        assert_eq!(plan.output_llrs(&r).unwrap(), splan.output_llrs(&sr).unwrap());
        assert!(exit(&sr) > exit(&r));
    }

    #[test]
    fn data_arrives_before_it_is_consumed() {
        let (_, r) = run_case(&CaseParams::new(CaseId::III));
        for w in &r.timeline.writes {
            assert!(w.delivery >= w.issue);
            assert!(w.delivery <= r.timeline.finish_cycle);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn pipelined_output_is_independent_of_blocking(seed in any::<u64>(), k in 0u32..9, cores in 0u32..6) {
            let mut params = CaseParams::new(CaseId::III);
            params.chain.seed = seed;
            params.block_size = 1 << k;
            params.ifft_cores = 1 << cores;
            let (plan, r) = run_case(&params);
            prop_assert_eq!(hard_decisions(&plan.output_llrs(&r).unwrap()), plan.input.bits.clone());
            let mut single = CaseParams::new(CaseId::I);
            single.chain.seed = seed;
            let (splan, sr) = run_case(&single);
            let a = plan.output_llrs(&r).unwrap();
            let b = splan.output_llrs(&sr).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-3));
        }

        #[test]
        fn ifft_latency_grows_with_barrier_cost(d in 0u64..60) {
            let lo = Calibration { barrier_detect_cycles: d, ..Calibration::default() };
            let hi = Calibration { barrier_detect_cycles: d + 1, ..Calibration::default() };
            let a = parallel_ifft_latency_model(8, &lo, &cfg()).unwrap();
            let b = parallel_ifft_latency_model(8, &hi, &cfg()).unwrap();
            prop_assert!(b >= a);
        }
    }
}
