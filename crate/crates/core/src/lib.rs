//! Transverse simulation of SPDC photon pairs: builds the two-photon momentum
//! amplitude, propagates it through far- and near-field masks and reduces it to
//! single-photon and coincidence rate maps.

pub mod analysis;
pub mod apertures;
pub mod engine;
pub mod error;
pub mod fft;
pub mod field;
pub mod grid;
pub mod oracles;
pub mod phase_matching;
pub mod pump;
pub mod reduced;

pub use apertures::{ApertureMask, Axis, DoubleSlit, MaskMap, MaskShape};
pub use engine::{
    build_biphoton_amplitude, consistency_scan, estimate_resources, run_pipeline, run_sweep, ConsistencyReport,
    ExecMode, ExecutionPlan, MaskSet, OutputRequest, PipelineResult, Provenance, ResourceEstimate, Setup, Slice,
    SliceRequest, Stage, StageMaps, SweepResult,
};
pub use error::{Error, Result};
pub use fft::{CenteredFft2, Direction, C64};
pub use field::{field_bytes, BiphotonField, PhotonSel};
pub use grid::{Domain, Photon, TransverseGrid};
pub use phase_matching::{BeamCoefficients, Material, PhaseMatchModel, PmType, Polarization};
pub use pump::{PumpKind, PumpSpec};
pub use reduced::{Normalization, ReducedMap};
