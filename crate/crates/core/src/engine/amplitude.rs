//! Φ̃(q_s, q_i) = ũ(q_s + q_i) · sinc(Δk_z L / 2) on the momentum lattice.

use rayon::prelude::*;

use crate::error::Result;
use crate::fft::C64;
use crate::field::BiphotonField;
use crate::grid::{Domain, TransverseGrid};
use crate::phase_matching::{Beam, PhaseMatchModel};
use crate::pump::{PumpSpec, SumLattice};

struct MismatchTables {
    axial: f64,
    half_length: f64,
    signal: Vec<f64>,
    idler: Vec<f64>,
    /// Pump on the doubled lattice, `(2n − 1)²` entries.
    pump: Vec<f64>,
}

/// Precomputed per-axis and per-photon factors for filling Φ̃ block by block.
pub(crate) struct AmplitudeTables {
    n: usize,
    pump: SumLattice,
    mismatch: Option<MismatchTables>,
}

impl AmplitudeTables {
    pub(crate) fn new(pump: &PumpSpec, crystal: Option<&PhaseMatchModel>, grid: &TransverseGrid) -> Self {
        let n = grid.n();
        let q = grid.axis(Domain::Momentum);
        let mismatch = crystal.map(|m| {
            let plane = |beam: Beam| {
                let mut v = Vec::with_capacity(n * n);
                for &qy in &q {
                    for &qx in &q {
                        v.push(m.kz_transverse(beam, qx, qy));
                    }
                }
                v
            };
            let m2 = 2 * n - 1;
            let dq = grid.momentum_step();
            let qs = |k: usize| (k as f64 - n as f64) * dq;
            let mut pump = Vec::with_capacity(m2 * m2);
            for ky in 0..m2 {
                for kx in 0..m2 {
                    pump.push(m.kz_transverse(Beam::Pump, qs(kx), qs(ky)));
                }
            }
            MismatchTables {
                axial: m.delta_kz_axial(),
                half_length: m.length / 2.0,
                signal: plane(Beam::Signal),
                idler: plane(Beam::Idler),
                pump,
            }
        });
        Self {
            n,
            pump: pump.sum_lattice(grid),
            mismatch,
        }
    }

    /// Writes Φ̃(p_s, ·) over all idler points into `block`.
    pub(crate) fn fill_block(&self, ps: usize, block: &mut [C64]) {
        let n = self.n;
        let (sx, sy) = (ps % n, ps / n);
        let m2 = 2 * n - 1;
        for iy in 0..n {
            let fy = self.pump.y(sy, iy);
            let row = &mut block[iy * n..(iy + 1) * n];
            if fy.re == 0.0 && fy.im == 0.0 {
                row.fill(C64::new(0.0, 0.0));
                continue;
            }
            for (ix, z) in row.iter_mut().enumerate() {
                let u = self.pump.x(sx, ix) * fy;
                *z = match &self.mismatch {
                    None => u,
                    Some(t) => {
                        let pi = iy * n + ix;
                        let dk = t.axial + (t.pump[(sy + iy) * m2 + sx + ix] - t.signal[ps] - t.idler[pi]);
                        u * crate::phase_matching::sinc(dk * t.half_length)
                    }
                };
            }
        }
    }

    /// Ratio of the strongest phase-matching response on the lattice border
    /// to the strongest anywhere, for the anti-correlated pair `q_i = −q_s`.
    pub(crate) fn edge_ratio(&self) -> Option<f64> {
        let t = self.mismatch.as_ref()?;
        let n = self.n;
        let m2 = 2 * n - 1;
        let (mut edge, mut peak) = (0.0f64, 0.0f64);
        for sy in 1..n {
            for sx in 1..n {
                let ps = sy * n + sx;
                let pi = (n - sy) * n + (n - sx);
                let dk = t.axial + (t.pump[n * m2 + n] - t.signal[ps] - t.idler[pi]);
                let v = crate::phase_matching::sinc(dk * t.half_length).powi(2);
                peak = peak.max(v);
                if sx == 1 || sy == 1 || sx == n - 1 || sy == n - 1 {
                    edge = edge.max(v);
                }
            }
        }
        (peak > 0.0).then(|| edge / peak)
    }
}

/// Fraction of the ring maximum tolerated on the window border before a warning.
pub(crate) const EDGE_WARN_RATIO: f64 = 0.05;

pub(crate) fn warn_if_ring_clipped(tables: &AmplitudeTables) {
    if let Some(r) = tables.edge_ratio() {
        if r >= EDGE_WARN_RATIO {
            log::warn!(
                "phase-matching response at the momentum window edge is {:.1}% of its maximum; \
                 the ring may be clipped (reduce the spatial extent or raise n)",
                100.0 * r
            );
        }
    }
}

/// Builds the momentum-domain amplitude in core. `crystal = None` is the
/// thin-crystal limit, where the phase-matching factor is exactly one.
pub fn build_biphoton_amplitude(
    pump: &PumpSpec,
    crystal: Option<&PhaseMatchModel>,
    grid: &TransverseGrid,
    budget: Option<u64>,
) -> Result<BiphotonField> {
    pump.check_resolved(grid)?;
    if let Some(m) = crystal {
        m.validate()?;
    }
    let field = BiphotonField::zeros(*grid, [Domain::Momentum; 2], budget)?;
    let tables = AmplitudeTables::new(pump, crystal, grid);
    warn_if_ring_clipped(&tables);
    let n2 = grid.n2();
    let mut rows = field.into_rows();
    for (r, row) in rows.iter_mut().enumerate() {
        row.par_chunks_mut(n2)
            .enumerate()
            .for_each(|(b, block)| tables.fill_block(r * grid.n() + b, block));
    }
    Ok(BiphotonField::from_rows(*grid, rows, [Domain::Momentum; 2]))
}
