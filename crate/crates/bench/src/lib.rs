//! Shared fixtures for the criterion benchmarks.

use biphoton_core::apertures::MaskShape;
use biphoton_core::phase_matching::{builtin_materials, find_material};
use biphoton_core::{
    ApertureMask, Axis, Domain, DoubleSlit, PhaseMatchModel, Photon, PmType, PumpSpec, Setup, TransverseGrid,
};

/// Double-slit experiment with the idler disc on the lower pump lobe, scaled
/// so the slits stay resolved down to n = 16.
pub fn double_slit_setup(n: usize) -> Setup {
    let grid = TransverseGrid::new(n, 4e-4).expect("valid lattice");
    let bbo = find_material(&builtin_materials(), "BBO").expect("built-in BBO");
    let mut crystal = PhaseMatchModel::from_material(&bbo, 2e-3, 42.4f64.to_radians(), PmType::TypeII, 404e-9)
        .expect("BBO phase matches at 42.4 deg");
    crystal.walkoff_azimuth = std::f64::consts::FRAC_PI_2;
    let mut s = Setup::new(grid, PumpSpec::tem01(2e-4, 404e-9), Some(crystal));
    s.masks.near_signal = ApertureMask::new(
        MaskShape::DoubleSlit(DoubleSlit::new(2e-4, 1e-4, Axis::Y)),
        Domain::Position,
        Photon::Signal,
    );
    s.masks.near_idler = ApertureMask::new(
        MaskShape::Circular {
            radius: 5e-5,
            center: [0.0, -5e-5],
        },
        Domain::Position,
        Photon::Idler,
    );
    s
}
