//! Latency and throughput read off simulated timelines, plus CSV output.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::deploy::{measure, CaseId, DeployError, DeploymentPlan, Kernel, Measure, PROBE_ENTRY, PROBE_EXIT};
use crate::mesh::MeshConfig;
use crate::sim::SimResult;

/// Symbol period one core's work must fit into to keep up with the stream.
pub const THROUGHPUT_BUDGET_US: f64 = 83.0;
/// End-to-end latency allowed for one symbol.
pub const LATENCY_BUDGET_US: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("bottleneck must be a positive number of cycles")]
    ZeroBottleneck,
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub case: CaseId,
    pub ifft_cycles: u64,
    pub deint_cycles: u64,
    /// None when demap is pipelined with deinterleave and folded into it.
    pub demap_cycles: Option<u64>,
    pub total_cycles: u64,
    pub bottleneck_cycles: u64,
    pub throughput_sps: u64,
    pub latency_us: f64,
    pub meets_throughput_budget: bool,
    pub meets_latency_budget: bool,
}

pub fn cycles_to_us(cycles: u64, clock_hz: f64) -> f64 {
    cycles as f64 / clock_hz * 1e6
}

pub fn throughput_sps(bottleneck: u64, clock_hz: f64) -> Result<u64, MetricsError> {
    if bottleneck == 0 {
        return Err(MetricsError::ZeroBottleneck);
    }
    Ok((clock_hz / bottleneck as f64).round() as u64)
}

/// Cycles from the first chain entry to the last chain exit.
pub fn total_latency(result: &SimResult, plan: &DeploymentPlan) -> Result<u64, MetricsError> {
    if plan.programs.is_empty() {
        return Ok(0);
    }
    let span = Measure::Span {
        from: PROBE_ENTRY.into(),
        to: PROBE_EXIT.into(),
    };
    Ok(measure(&span, &result.timeline)?)
}

pub fn case_report(plan: &DeploymentPlan, result: &SimResult, cfg: &MeshConfig) -> Result<CaseReport, MetricsError> {
    let task = |k: Kernel| -> Result<Option<u64>, MetricsError> {
        plan.tasks
            .iter()
            .find(|t| t.kernel == k)
            .map(|t| measure(&t.measure, &result.timeline))
            .transpose()
            .map_err(Into::into)
    };
    let total = total_latency(result, plan)?;
    let bottleneck = plan
        .stages
        .iter()
        .map(|m| measure(m, &result.timeline))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .max()
        .unwrap_or(0);
    let latency_us = cycles_to_us(total, cfg.clock_hz);
    Ok(CaseReport {
        case: plan.case,
        ifft_cycles: task(Kernel::Ifft)?.unwrap_or(0),
        deint_cycles: task(Kernel::Deinterleave)?.unwrap_or(0),
        demap_cycles: task(Kernel::Demap)?,
        total_cycles: total,
        bottleneck_cycles: bottleneck,
        throughput_sps: throughput_sps(bottleneck, cfg.clock_hz)?,
        latency_us,
        meets_throughput_budget: cycles_to_us(bottleneck, cfg.clock_hz) <= THROUGHPUT_BUDGET_US,
        meets_latency_budget: latency_us <= LATENCY_BUDGET_US,
    })
}

/// Rows for one of the CSV schemas.
#[derive(Debug, Clone, Copy)]
pub enum Records<'a> {
    CaseReport(&'a [CaseReport]),
    IfftSweep(&'a [(usize, u64)]),
    BlocksizeSweep(&'a [(usize, u64)]),
}

#[derive(Serialize)]
struct CaseRow {
    case: String,
    ifft_cycles: u64,
    deint_cycles: u64,
    demap_cycles: Option<u64>,
    total_cycles: u64,
    bottleneck_cycles: u64,
    throughput_sps: u64,
    latency_us: String,
    meets_throughput_budget: bool,
    meets_latency_budget: bool,
}

pub fn write_csv_to<W: Write>(records: Records<'_>, out: W) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    match records {
        Records::CaseReport(rows) => {
            for r in rows {
                w.serialize(CaseRow {
                    case: r.case.to_string(),
                    ifft_cycles: r.ifft_cycles,
                    deint_cycles: r.deint_cycles,
                    demap_cycles: r.demap_cycles,
                    total_cycles: r.total_cycles,
                    bottleneck_cycles: r.bottleneck_cycles,
                    throughput_sps: r.throughput_sps,
                    latency_us: format!("{:.3}", r.latency_us),
                    meets_throughput_budget: r.meets_throughput_budget,
                    meets_latency_budget: r.meets_latency_budget,
                })?;
            }
            if rows.is_empty() {
                w.write_record([
                    "case",
                    "ifft_cycles",
                    "deint_cycles",
                    "demap_cycles",
                    "total_cycles",
                    "bottleneck_cycles",
                    "throughput_sps",
                    "latency_us",
                    "meets_throughput_budget",
                    "meets_latency_budget",
                ])?;
            }
        }
        Records::IfftSweep(rows) => {
            w.write_record(["n_cores", "cycles"])?;
            for &(n_cores, cycles) in rows {
                w.write_record([n_cores.to_string(), cycles.to_string()])?;
            }
        }
        Records::BlocksizeSweep(rows) => {
            w.write_record(["block_size", "cycles"])?;
            for &(block_size, cycles) in rows {
                w.write_record([block_size.to_string(), cycles.to_string()])?;
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_csv(records: Records<'_>, path: &Path) -> Result<(), MetricsError> {
    let wrap = |source| MetricsError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(wrap)?;
    write_csv_to(records, file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deploy::{build_case, Calibration, CaseParams};
    use proptest::prelude::*;

    fn report(case: CaseId) -> CaseReport {
        let cfg = MeshConfig::default();
        let plan = build_case(&CaseParams::new(case), &Calibration::default(), &cfg).unwrap();
        let r = plan.execute(&cfg).unwrap();
        case_report(&plan, &r, &cfg).unwrap()
    }

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput_sps(46_377, 600e6).unwrap(), 12_937);
        assert_eq!(throughput_sps(110_282, 600e6).unwrap(), 5_441);
        assert_eq!(throughput_sps(47_585, 600e6).unwrap(), 12_609);
        assert!(matches!(throughput_sps(0, 600e6), Err(MetricsError::ZeroBottleneck)));
    }

    #[test]
    fn single_core_report() {
        let r = report(CaseId::I);
        assert_eq!(r.total_cycles, 110_282);
        assert_eq!(r.throughput_sps, 5_441);
        assert_eq!(r.demap_cycles, Some(46_377));
        assert!((r.latency_us - 183.803).abs() < 1e-3);
        assert!(!r.meets_throughput_budget);
        assert!(!r.meets_latency_budget);
    }

    #[test]
    fn task_parallel_report() {
        let r = report(CaseId::II);
        assert!(r.throughput_sps.abs_diff(12_937) <= 1);
        assert!(r.meets_throughput_budget);
        assert!(!r.meets_latency_budget);
    }

    #[test]
    fn data_parallel_report() {
        let r = report(CaseId::III);
        assert_eq!(r.demap_cycles, None);
        assert!(r.total_cycles.abs_diff(50_543) * 20 <= 50_543);
        assert!(r.meets_latency_budget);
        assert!(r.meets_throughput_budget);
    }

    #[test]
    fn empty_plan_has_zero_latency() {
        let plan = build_case(&CaseParams::new(CaseId::I), &Calibration::default(), &MeshConfig::default()).unwrap();
        let r = plan.execute(&MeshConfig::default()).unwrap();
        let empty = DeploymentPlan {
            programs: Vec::new(),
            ..plan
        };
        assert_eq!(total_latency(&r, &empty).unwrap(), 0);
    }

    #[test]
    fn csv_layouts() {
        let mut buf = Vec::new();
        let sweep: Vec<(usize, u64)> = (0..6).map(|i| (1 << i, 100 - i as u64)).collect();
        write_csv_to(Records::IfftSweep(&sweep), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("n_cores,cycles\n1,100\n"));

        let reports: Vec<_> = CaseId::ALL.iter().map(|&c| report(c)).collect();
        let mut buf = Vec::new();
        write_csv_to(Records::CaseReport(&reports), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("case,ifft_cycles,"));
        assert!(lines[1].starts_with("I,18862,45043,46377,110282,110282,5441,183.803,"));
        assert!(lines[3].starts_with("III,") && lines[3].contains(",,"));

        let mut empty = Vec::new();
        write_csv_to(Records::BlocksizeSweep(&[]), &mut empty).unwrap();
        assert_eq!(empty, b"block_size,cycles\n");
    }

    #[test]
    fn files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [(1usize, 46_770u64), (2, 46_818)];
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_csv(Records::BlocksizeSweep(&rows), &a).unwrap();
        write_csv(Records::BlocksizeSweep(&rows), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let bad = dir.path().join("missing").join("x.csv");
        assert!(matches!(
            write_csv(Records::BlocksizeSweep(&rows), &bad),
            Err(MetricsError::Write { .. })
        ));
    }

    proptest! {
        #[test]
        fn throughput_is_antitone(a in 1u64..10_000_000, d in 0u64..1_000_000) {
            let fast = throughput_sps(a, 600e6).unwrap();
            let slow = throughput_sps(a + d, 600e6).unwrap();
            prop_assert!(slow <= fast);
        }
    }
}
