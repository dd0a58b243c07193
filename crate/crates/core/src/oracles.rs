//! Closed-form rates for the thin-crystal and plane-wave-pump limits, and the
//! relative error used to compare them with simulated maps.
//!
//! All oracle maps are unit-peak: the aperture-dependent constant in front of
//! the closed forms is dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, Photon, TransverseGrid};
use crate::phase_matching::PhaseMatchModel;
use crate::pump::PumpSpec;
use crate::reduced::ReducedMap;

/// Support of the two-photon rate on the lattice.
#[derive(Debug, Clone, PartialEq)]
enum Coincidence {
    /// `w(p_s)` where `ρ_s = ρ_i`, zero elsewhere.
    Diagonal(Vec<f64>),
    /// `w(p_s)` where `q_i = −q_s`, zero elsewhere.
    AntiDiagonal(Vec<f64>),
    /// `|ũ(q_s + q_i)|²` on the doubled lattice, `(2n − 1)²` entries.
    Sum(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    /// Single-photon rate of either photon.
    pub single: ReducedMap,
    grid: TransverseGrid,
    coincidence: Coincidence,
}

impl Oracle {
    pub fn grid(&self) -> &TransverseGrid {
        &self.grid
    }

    /// Unit-peak two-photon rate at signal point `ps`, idler point `pi`.
    pub fn coincidence(&self, ps: usize, pi: usize) -> f64 {
        let n = self.grid.n();
        match &self.coincidence {
            Coincidence::Diagonal(w) => {
                if ps == pi {
                    w[ps]
                } else {
                    0.0
                }
            }
            Coincidence::AntiDiagonal(w) => match mirror(ps, n) {
                Some(m) if m == pi => w[ps],
                _ => 0.0,
            },
            Coincidence::Sum(t) => {
                let (sx, sy, ix, iy) = (ps % n, ps / n, pi % n, pi / n);
                t[(sy + iy) * (2 * n - 1) + sx + ix]
            }
        }
    }

    /// Two-photon rate with one photon held at lattice point `(ix, iy)`.
    pub fn slice(&self, fixed: Photon, ix: usize, iy: usize) -> Result<ReducedMap> {
        let n = self.grid.n();
        let p = self.grid.flat(ix, iy);
        let values = (0..n * n)
            .map(|q| match fixed {
                Photon::Signal => self.coincidence(p, q),
                Photon::Idler => self.coincidence(q, p),
            })
            .collect();
        ReducedMap::new(self.grid, self.single.domain(), values)
    }
}

/// Flat index of `−q` for lattice point `p`; the first row and column have no
/// partner on an even lattice.
fn mirror(p: usize, n: usize) -> Option<usize> {
    let (x, y) = (p % n, p / n);
    (x > 0 && y > 0).then(|| (n - y) * n + (n - x))
}

fn unit_peak(grid: &TransverseGrid, domain: Domain, values: Vec<f64>) -> Result<ReducedMap> {
    ReducedMap::new(*grid, domain, values)?.to_unit_peak()
}

/// Thin crystal, near field: `C⁽¹⁾(ρ) = |u(ρ)|²`, two-photon rate on `ρ_s = ρ_i`.
pub fn thin_crystal_near(pump: &PumpSpec, grid: &TransverseGrid) -> Result<Oracle> {
    pump.validate()?;
    let x = grid.axis(Domain::Position);
    let mut v = Vec::with_capacity(grid.n2());
    for &y in &x {
        for &xx in &x {
            v.push(pump.field(xx, y).norm_sqr());
        }
    }
    let single = unit_peak(grid, Domain::Position, v)?;
    Ok(Oracle {
        coincidence: Coincidence::Diagonal(single.values().to_vec()),
        single,
        grid: *grid,
    })
}

/// Thin crystal, far field: constant `C⁽¹⁾`, `C⁽²⁾ = |ũ(q_s + q_i)|²`.
pub fn thin_crystal_far(pump: &PumpSpec, grid: &TransverseGrid) -> Result<Oracle> {
    pump.validate()?;
    let n = grid.n();
    let dq = grid.momentum_step();
    let q = |k: usize| (k as f64 - n as f64) * dq;
    let m2 = 2 * n - 1;
    let mut t = Vec::with_capacity(m2 * m2);
    for ky in 0..m2 {
        for kx in 0..m2 {
            t.push(pump.spectrum(q(kx), q(ky), grid.extent()).norm_sqr());
        }
    }
    let peak = t.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::Numerical("pump spectrum vanishes on the lattice".into()));
    }
    t.iter_mut().for_each(|v| *v /= peak);
    Ok(Oracle {
        single: ReducedMap::new(*grid, Domain::Momentum, vec![1.0; grid.n2()])?.to_unit_peak()?,
        coincidence: Coincidence::Sum(t),
        grid: *grid,
    })
}

/// Plane-wave pump, far field: `C⁽¹⁾(q) = sinc²(Δk_z(q, −q) L / 2)`, two-photon
/// rate on `q_i = −q_s`.
pub fn plane_wave_far(model: &PhaseMatchModel, grid: &TransverseGrid) -> Result<Oracle> {
    model.validate()?;
    let q = grid.axis(Domain::Momentum);
    let mut v = Vec::with_capacity(grid.n2());
    for &qy in &q {
        for &qx in &q {
            v.push(model.phase_matching(model.delta_kz((qx, qy), (-qx, -qy))).powi(2));
        }
    }
    let single = unit_peak(grid, Domain::Momentum, v)?;
    Ok(Oracle {
        coincidence: Coincidence::AntiDiagonal(single.values().to_vec()),
        single,
        grid: *grid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    /// `|C_oracle − s·C_sim| / max C_oracle`, lattice order.
    pub map: Vec<f64>,
    pub max: f64,
    /// Least-squares scale applied to the simulated map.
    pub scale: f64,
}

/// Pointwise deviation of `simulated` from `oracle`, after the single scale
/// factor that best fits the simulated map to the oracle.
pub fn relative_error(simulated: &ReducedMap, oracle: &ReducedMap) -> Result<RelativeError> {
    if simulated.grid() != oracle.grid() || simulated.domain() != oracle.domain() {
        return Err(Error::contract(
            "relative error needs both maps on the same lattice and domain",
        ));
    }
    let (s, o) = (simulated.values(), oracle.values());
    let ss: f64 = s.iter().map(|v| v * v).sum();
    let so: f64 = s.iter().zip(o).map(|(a, b)| a * b).sum();
    let peak = oracle.max();
    if ss == 0.0 || peak == 0.0 {
        return Err(Error::Numerical("relative error of an all-zero map".into()));
    }
    let scale = so / ss;
    let map: Vec<f64> = s.iter().zip(o).map(|(a, b)| (b - scale * a).abs() / peak).collect();
    let max = map.iter().cloned().fold(0.0, f64::max);
    Ok(RelativeError { map, max, scale })
}
