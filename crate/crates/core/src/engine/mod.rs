//! Execution of the propagation pipeline, in core or spilling to disk.

mod amplitude;
pub mod consistency;
mod pipeline;
pub mod store;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{field_bytes, idler_slab_rows, BYTES_PER_VALUE};

pub use amplitude::build_biphoton_amplitude;
pub use consistency::{consistency_distance, consistency_scan, resample_bilinear, ConsistencyReport};
pub use pipeline::{
    run_pipeline, run_sweep, MaskSet, OutputRequest, PipelineResult, PositionOutcome, Provenance, Setup, Slice,
    SliceRequest, Stage, StageMaps, SweepResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    InCore,
    SpillToDisk,
}

/// Transient slab buffers alive at once in spill mode: one being read ahead,
/// one queued, one being computed on.
pub const SPILL_BUFFERS: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub mode: ExecMode,
    pub memory_budget: u64,
    pub cache_dir: Option<PathBuf>,
    /// Optional cap on bytes written to the cache directory.
    pub cache_limit: Option<u64>,
    pub threads: Option<usize>,
}

impl ExecutionPlan {
    pub fn in_core(memory_budget: u64) -> Self {
        Self {
            mode: ExecMode::InCore,
            memory_budget,
            cache_dir: None,
            cache_limit: None,
            threads: None,
        }
    }

    pub fn spill(memory_budget: u64, cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode: ExecMode::SpillToDisk,
            memory_budget,
            cache_dir: Some(cache_dir.into()),
            cache_limit: None,
            threads: None,
        }
    }

    /// In core when `fields` copies of the field plus workspace fit the
    /// budget, otherwise spilling to `cache_dir`.
    pub fn auto(n: usize, fields: u64, memory_budget: u64, cache_dir: impl Into<PathBuf>) -> Self {
        if in_core_bytes(n, fields) <= memory_budget {
            Self::in_core(memory_budget)
        } else {
            Self::spill(memory_budget, cache_dir)
        }
    }

    pub fn with_threads(mut self, threads: Option<usize>) -> Self {
        self.threads = threads;
        self
    }
}

/// Bytes of one signal row (`n³` complex doubles), the storage unit.
pub fn row_bytes(n: usize) -> u64 {
    (n as u64).pow(3) * BYTES_PER_VALUE
}

/// Transform workspace used in core: one idler tile of `n / 8` rows.
pub fn in_core_workspace(n: usize) -> u64 {
    idler_slab_rows(n) as u64 * row_bytes(n)
}

pub(crate) fn in_core_bytes(n: usize, fields: u64) -> u64 {
    fields * field_bytes(n) + in_core_workspace(n)
}

/// Rows per slab in spill mode for a given budget.
pub(crate) fn spill_rows(n: usize, budget: u64) -> Result<usize> {
    let per = SPILL_BUFFERS * row_bytes(n);
    if budget < per {
        return Err(Error::Budget {
            what: format!("spill-mode slab buffers at n={n}"),
            required: per,
            budget,
        });
    }
    Ok(((budget / per) as usize).clamp(1, n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub n: usize,
    pub mode: ExecMode,
    /// Raw `16 n⁴` bytes of one complex-double field.
    pub field_bytes: u64,
    /// Transform workspace on top of the field.
    pub workspace_bytes: u64,
    /// Resident memory: field plus workspace in core, slab buffers when spilling.
    pub bytes_core: u64,
    /// Cache directory usage.
    pub bytes_cache: u64,
    /// Number of 2D transforms over one photon's plane for a full run.
    pub transform_count: u64,
}

/// Resource needs of one pipeline run at lattice size `n`, before any
/// allocation. Spill figures assume single-row slabs.
pub fn estimate_resources(n: usize, mode: ExecMode) -> Result<ResourceEstimate> {
    if n < 8 {
        return Err(Error::config(format!("estimate needs n >= 8, got {n}")));
    }
    let field = field_bytes(n);
    let (workspace, core, cache) = match mode {
        ExecMode::InCore => {
            let w = in_core_workspace(n);
            (w, field + w, 0)
        }
        ExecMode::SpillToDisk => {
            let w = SPILL_BUFFERS * row_bytes(n);
            (w, w, field)
        }
    };
    let n2 = (n * n) as u64;
    Ok(ResourceEstimate {
        n,
        mode,
        field_bytes: field,
        workspace_bytes: workspace,
        bytes_core: core,
        bytes_cache: cache,
        transform_count: 4 * n2,
    })
}
