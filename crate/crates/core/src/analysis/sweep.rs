//! Distinguishability and visibility as the idler detector moves along
//! `ρ_ix = 0`.

use serde::{Deserialize, Serialize};

use super::{distinguishability, fit_visibility, fringe_profile, FitOptions, FringeFit};
use crate::apertures::{ApertureMask, DoubleSlit, MaskShape};
use crate::engine::{run_sweep, ExecutionPlan, OutputRequest, Provenance, Setup, Stage, StageMaps};
use crate::error::Result;
use crate::grid::{Domain, Photon};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DVRecord {
    /// Idler detector position `ρ_iy`.
    pub position: f64,
    pub distinguishability: f64,
    pub visibility: f64,
    pub d2_plus_v2: f64,
    pub fit: FringeFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvSweepSpec {
    pub slit: DoubleSlit,
    /// Radius of the idler detector disc.
    pub idler_radius: f64,
    pub positions: Vec<f64>,
    #[serde(default)]
    pub fit: FitOptions,
}

#[derive(Debug, Clone)]
pub struct DvSweep {
    pub records: Vec<DVRecord>,
    /// Positions that could not be evaluated, with the reason.
    pub failures: Vec<(f64, String)>,
    pub provenance: Provenance,
    /// Far field before and near field before the idler aperture.
    pub shared: Vec<StageMaps>,
    /// Near-field and far-field signal maps per successful position.
    pub maps: Vec<(f64, StageMaps, StageMaps)>,
}

impl DvSweep {
    /// Record with the largest `D² + V²`.
    pub fn best(&self) -> Option<&DVRecord> {
        self.records.iter().max_by(|a, b| a.d2_plus_v2.total_cmp(&b.d2_plus_v2))
    }
}

/// Disc aperture for the idler in the near field at `(0, y)`.
pub fn idler_disc(radius: f64, y: f64) -> ApertureMask {
    ApertureMask::new(
        MaskShape::Circular {
            radius,
            center: [0.0, y],
        },
        Domain::Position,
        Photon::Idler,
    )
}

/// Runs the shared stages once and one near-field/far-field evaluation per
/// idler position. The signal near-field mask of `setup` is replaced by the
/// double slit of `spec`.
pub fn dv_sweep(setup: &Setup, spec: &DvSweepSpec, plan: &ExecutionPlan) -> Result<DvSweep> {
    let mut setup = setup.clone();
    setup.masks.near_signal = ApertureMask::new(MaskShape::DoubleSlit(spec.slit), Domain::Position, Photon::Signal);
    let masks: Vec<_> = spec
        .positions
        .iter()
        .map(|&y| idler_disc(spec.idler_radius, y))
        .collect();
    let sweep = run_sweep(&setup, &masks, plan, &OutputRequest::default())?;
    let mut out = DvSweep {
        records: Vec::new(),
        failures: Vec::new(),
        provenance: sweep.provenance,
        shared: sweep.shared,
        maps: Vec::new(),
    };
    for pos in sweep.positions {
        let y = spec.positions[pos.index];
        let eval = pos.result.and_then(|(maps, _)| {
            let near = maps
                .iter()
                .find(|m| m.stage == Stage::P2PostN)
                .expect("sweep returns p2");
            let far = maps.iter().find(|m| m.stage == Stage::P3).expect("sweep returns p3");
            let d = distinguishability(&near.signal, &spec.slit).map_err(|e| e.to_string())?;
            let prof = fringe_profile(&far.signal, spec.slit.separation, spec.slit.width).map_err(|e| e.to_string())?;
            let fit = fit_visibility(&prof.x, &prof.y, spec.slit.separation, spec.slit.width, &spec.fit)
                .map_err(|e| e.to_string())?;
            Ok((d, fit, near.clone(), far.clone()))
        });
        match eval {
            Ok((d, fit, near, far)) => {
                out.records.push(DVRecord {
                    position: y,
                    distinguishability: d,
                    visibility: fit.visibility,
                    d2_plus_v2: d * d + fit.visibility * fit.visibility,
                    fit,
                });
                out.maps.push((y, near, far));
            }
            Err(e) => {
                log::warn!("idler position {y:.3e} m: {e}");
                out.failures.push((y, e));
            }
        }
    }
    Ok(out)
}
