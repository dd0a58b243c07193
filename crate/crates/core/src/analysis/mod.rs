//! Post-processing of reduced maps: detector response, which-slit
//! distinguishability, fringe visibility and the idler-position sweep.

mod convolve;
mod distinguishability;
pub mod fit;
pub mod fringes;
mod sweep;

pub use convolve::{block_average, detector_convolve};
pub use distinguishability::distinguishability;
pub use fit::{fit_visibility, fringe_model, FitOptions, FringeFit};
pub use fringes::{count_arc_fringes, fringe_profile, ArcFringes, FringeProfile};
pub use sweep::{dv_sweep, idler_disc, DVRecord, DvSweep, DvSweepSpec};
