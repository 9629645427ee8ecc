//! Kernel tuning parameters and load instrumentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the three tile loops; the letter order is outermost first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoopOrder {
    Mnk,
    Mkn,
    Nmk,
    Nkm,
    Kmn,
    Knm,
}

impl LoopOrder {
    pub const ALL: [LoopOrder; 6] =
        [LoopOrder::Mnk, LoopOrder::Mkn, LoopOrder::Nmk, LoopOrder::Nkm, LoopOrder::Kmn, LoopOrder::Knm];

    /// The two orders with the m loop outermost.
    pub const M_OUTERMOST: [LoopOrder; 2] = [LoopOrder::Mnk, LoopOrder::Mkn];

    pub fn as_str(&self) -> &'static str {
        match self {
            LoopOrder::Mnk => "mnk",
            LoopOrder::Mkn => "mkn",
            LoopOrder::Nmk => "nmk",
            LoopOrder::Nkm => "nkm",
            LoopOrder::Kmn => "kmn",
            LoopOrder::Knm => "knm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown loop order '{}'", s)))
    }

    /// Axis indices (0=m, 1=n, 2=k), outermost first.
    pub fn axes(&self) -> [usize; 3] {
        match self {
            LoopOrder::Mnk => [0, 1, 2],
            LoopOrder::Mkn => [0, 2, 1],
            LoopOrder::Nmk => [1, 0, 2],
            LoopOrder::Nkm => [1, 2, 0],
            LoopOrder::Kmn => [2, 0, 1],
            LoopOrder::Knm => [2, 1, 0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelConfig {
    pub tile_m: usize,
    pub tile_n: usize,
    pub tile_k: usize,
    pub unroll: usize,
    pub loop_order: LoopOrder,
    pub vector_width_hint: usize,
}

impl Default for KernelConfig {
    /// Safe baseline the tuner must beat or match.
    fn default() -> Self {
        Self {
            tile_m: 32,
            tile_n: 32,
            tile_k: 32,
            unroll: 4,
            loop_order: LoopOrder::Mnk,
            vector_width_hint: 4,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_m == 0 || self.tile_n == 0 || self.tile_k == 0 {
            return Err(Error::Parameter("tile extents must be >= 1".into()));
        }
        if self.unroll == 0 {
            return Err(Error::Parameter("unroll must be >= 1".into()));
        }
        Ok(())
    }

    /// Working-set elements for one (tile_m, tile_n, tile_k) step.
    pub fn footprint(&self) -> usize {
        self.tile_m * self.tile_k + self.tile_k * self.tile_n + self.tile_m * self.tile_n
    }
}

/// Exact event tallies for memory-load instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadCounter {
    pub weight_loads: u64,
    pub activation_loads: u64,
}

/// Internal counting hook; the no-op impl compiles away in hot paths.
pub(crate) trait CountLoads {
    fn weight(&mut self, n: u64);
    #[allow(dead_code)]
    fn activation(&mut self, n: u64);
}

pub(crate) struct NoCount;

impl CountLoads for NoCount {
    #[inline(always)]
    fn weight(&mut self, _n: u64) {}
    #[inline(always)]
    fn activation(&mut self, _n: u64) {}
}

impl CountLoads for LoadCounter {
    #[inline(always)]
    fn weight(&mut self, n: u64) {
        self.weight_loads += n;
    }
    #[inline(always)]
    fn activation(&mut self, n: u64) {
        self.activation_loads += n;
    }
}
