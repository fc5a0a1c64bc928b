//! Static model of the 2D mesh: core coordinates, the global address space,
//! and timing of writes over the on-chip write network.
//!
//! Only the write network is modelled. Reads are always local, so a datum
//! moving between tasks is always pushed by its producer into the consumer's
//! memory. Routing is XY, which makes the hop count the Manhattan distance.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MeshError {
    #[error("core ({row},{col}) is outside the {rows}x{cols} mesh")]
    InvalidCore {
        row: u32,
        col: u32,
        rows: u32,
        cols: u32,
    },
    #[error("offset {offset:#x} is outside local memory of {limit} bytes")]
    AddressOutOfRange { offset: u32, limit: u32 },
    #[error("invalid mesh configuration: {0}")]
    InvalidConfig(String),
}

/// Grid coordinate of one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId {
    pub row: u32,
    pub col: u32,
}

impl CoreId {
    pub const fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for CoreId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.row, self.col)
    }
}

/// Mesh geometry and timing. Defaults describe a 64-core part at 600 MHz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub rows: u32,
    pub cols: u32,
    /// Per-core local memory in bytes.
    pub local_mem_bytes: u32,
    /// Cycles per router hop. Not a measured value; configurable.
    pub hop_cycles: u64,
    pub link_bytes_per_cycle: u32,
    pub clock_hz: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            local_mem_bytes: 32 * 1024,
            hop_cycles: 1,
            link_bytes_per_cycle: 8,
            clock_hz: 600e6,
        }
    }
}

impl MeshConfig {
    pub fn validate(&self) -> Result<(), MeshError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(MeshError::InvalidConfig(format!(
                "mesh must have at least one core, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.rows > ROW_LIMIT || self.cols > COL_LIMIT {
            return Err(MeshError::InvalidConfig(format!(
                "mesh {}x{} exceeds the {}x{} address space",
                self.rows, self.cols, ROW_LIMIT, COL_LIMIT
            )));
        }
        if self.local_mem_bytes == 0 || self.local_mem_bytes > OFFSET_LIMIT {
            return Err(MeshError::InvalidConfig(format!(
                "local_mem_bytes must be in 1..={OFFSET_LIMIT}, got {}",
                self.local_mem_bytes
            )));
        }
        if self.link_bytes_per_cycle == 0 {
            return Err(MeshError::InvalidConfig(
                "link_bytes_per_cycle must be positive".into(),
            ));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(MeshError::InvalidConfig(format!(
                "clock_hz must be positive, got {}",
                self.clock_hz
            )));
        }
        Ok(())
    }

    pub fn core_count(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn check_core(&self, core: CoreId) -> Result<(), MeshError> {
        if core.row < self.rows && core.col < self.cols {
            Ok(())
        } else {
            Err(MeshError::InvalidCore {
                row: core.row,
                col: core.col,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    /// Checks that `len` bytes starting at `offset` fit in local memory.
    pub fn check_range(&self, offset: u32, len: u32) -> Result<(), MeshError> {
        if offset as u64 + len as u64 > self.local_mem_bytes as u64 {
            return Err(MeshError::AddressOutOfRange {
                offset,
                limit: self.local_mem_bytes,
            });
        }
        Ok(())
    }

    /// All cores in (row, col) lexicographic order.
    pub fn cores(&self) -> impl Iterator<Item = CoreId> + '_ {
        (0..self.rows).flat_map(move |r| (0..self.cols).map(move |c| CoreId::new(r, c)))
    }
}

const ROW_BITS: u32 = 6;
const COL_BITS: u32 = 6;
const OFFSET_BITS: u32 = 20;
const ROW_LIMIT: u32 = 1 << ROW_BITS;
const COL_LIMIT: u32 = 1 << COL_BITS;
const OFFSET_LIMIT: u32 = 1 << OFFSET_BITS;

/// A chip-wide 32-bit address: row in bits 31..26, column in 25..20,
/// local offset in 19..0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GlobalAddress(pub u32);

impl GlobalAddress {
    /// Packs a core and offset. Fields wider than their bit slots are masked.
    pub const fn compose(core: CoreId, offset: u32) -> Self {
        Self(
            ((core.row & (ROW_LIMIT - 1)) << (COL_BITS + OFFSET_BITS))
                | ((core.col & (COL_LIMIT - 1)) << OFFSET_BITS)
                | (offset & (OFFSET_LIMIT - 1)),
        )
    }

    pub const fn core(self) -> CoreId {
        CoreId::new(
            self.0 >> (COL_BITS + OFFSET_BITS),
            (self.0 >> OFFSET_BITS) & (COL_LIMIT - 1),
        )
    }

    pub const fn offset(self) -> u32 {
        self.0 & (OFFSET_LIMIT - 1)
    }
}

impl fmt::Display for GlobalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

pub fn resolve_address(addr: GlobalAddress, cfg: &MeshConfig) -> Result<(CoreId, u32), MeshError> {
    let core = addr.core();
    cfg.check_core(core)?;
    let offset = addr.offset();
    if offset >= cfg.local_mem_bytes {
        return Err(MeshError::AddressOutOfRange {
            offset,
            limit: cfg.local_mem_bytes,
        });
    }
    Ok((core, offset))
}

pub fn hop_distance(src: CoreId, dst: CoreId, cfg: &MeshConfig) -> Result<u64, MeshError> {
    cfg.check_core(src)?;
    cfg.check_core(dst)?;
    Ok((src.row.abs_diff(dst.row) + src.col.abs_diff(dst.col)) as u64)
}

/// Cycle at which a write issued at `issue` becomes visible at `dst`.
///
/// Local writes are visible in the issue cycle. Remote writes pay one
/// `hop_cycles` per router plus the link serialization of the payload; the
/// network has no start-up cost.
pub fn write_delivery_cycle(
    issue: u64,
    src: CoreId,
    dst: CoreId,
    payload: u32,
    cfg: &MeshConfig,
) -> Result<u64, MeshError> {
    let hops = hop_distance(src, dst, cfg)?;
    if hops == 0 {
        return Ok(issue);
    }
    let serialization = (payload.max(1) as u64).div_ceil(cfg.link_bytes_per_cycle as u64);
    Ok(issue + hops * cfg.hop_cycles + serialization)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> MeshConfig {
        MeshConfig::default()
    }

    #[test]
    fn hop_distance_examples() {
        let c = cfg();
        assert_eq!(hop_distance(CoreId::new(0, 0), CoreId::new(0, 0), &c), Ok(0));
        assert_eq!(hop_distance(CoreId::new(0, 0), CoreId::new(2, 3), &c), Ok(5));
        assert_eq!(hop_distance(CoreId::new(7, 7), CoreId::new(0, 0), &c), Ok(14));
    }

    #[test]
    fn hop_distance_rejects_outside_core() {
        let err = hop_distance(CoreId::new(0, 0), CoreId::new(8, 0), &cfg()).unwrap_err();
        assert!(matches!(err, MeshError::InvalidCore { row: 8, .. }));
    }

    #[test]
    fn delivery_examples() {
        let c = cfg();
        let o = CoreId::new(0, 0);
        assert_eq!(write_delivery_cycle(100, o, o, 8, &c), Ok(100));
        // 1 hop + ceil(4/8)
        assert_eq!(write_delivery_cycle(100, o, CoreId::new(0, 1), 4, &c), Ok(102));
        // 5 hops + ceil(32/8)
        assert_eq!(write_delivery_cycle(0, o, CoreId::new(2, 3), 32, &c), Ok(9));
    }

    #[test]
    fn address_examples() {
        let c = cfg();
        assert_eq!(resolve_address(GlobalAddress(0), &c), Ok((CoreId::new(0, 0), 0)));
        assert_eq!(GlobalAddress::compose(CoreId::new(0, 1), 0x10).0, 0x0010_0010);
        let far = GlobalAddress::compose(CoreId::new(0, 0), 40_000);
        assert!(matches!(
            resolve_address(far, &c),
            Err(MeshError::AddressOutOfRange { offset: 40_000, .. })
        ));
        let off_mesh = GlobalAddress::compose(CoreId::new(9, 0), 0);
        assert!(matches!(resolve_address(off_mesh, &c), Err(MeshError::InvalidCore { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        let bad = MeshConfig { rows: 0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = MeshConfig { link_bytes_per_cycle: 0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = MeshConfig { clock_hz: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
    }

    fn core_in(c: &MeshConfig) -> impl Strategy<Value = CoreId> {
        (0..c.rows, 0..c.cols).prop_map(|(r, c)| CoreId::new(r, c))
    }

    proptest! {
        #[test]
        fn hop_distance_is_a_metric(a in core_in(&cfg()), b in core_in(&cfg()), m in core_in(&cfg())) {
            let c = cfg();
            let ab = hop_distance(a, b, &c).unwrap();
            prop_assert_eq!(ab, hop_distance(b, a, &c).unwrap());
            prop_assert!(ab <= hop_distance(a, m, &c).unwrap() + hop_distance(m, b, &c).unwrap());
        }

        #[test]
        fn delivery_monotone(a in core_in(&cfg()), b in core_in(&cfg()), p in 1u32..4096, extra in 0u32..64, issue in 0u64..1000) {
            let c = cfg();
            let base = write_delivery_cycle(issue, a, b, p, &c).unwrap();
            prop_assert!(base >= issue);
            prop_assert!(write_delivery_cycle(issue, a, b, p + extra, &c).unwrap() >= base);
            // one more hop never arrives earlier
            let origin = CoreId::new(0, 0);
            let near = write_delivery_cycle(issue, origin, CoreId::new(0, 1), p, &c).unwrap();
            let far = write_delivery_cycle(issue, origin, CoreId::new(1, 1), p, &c).unwrap();
            prop_assert!(far >= near);
        }

        #[test]
        fn address_round_trip(core in core_in(&cfg()), offset in 0u32..32768) {
            let c = cfg();
            let addr = GlobalAddress::compose(core, offset);
            prop_assert_eq!(resolve_address(addr, &c).unwrap(), (core, offset));
        }
    }
}
