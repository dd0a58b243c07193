//! Pump transverse profiles u(ρ) and their analytic spectra ũ(q).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::C64;
use crate::grid::TransverseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpKind {
    Gaussian,
    /// Hermite-Gaussian HG01: node line along x, lobes separated along y.
    Tem01,
    PlaneWave,
}

/// Minimum window-to-width ratio accepted by [`PumpSpec::check_resolved`].
pub const MIN_WINDOW_RATIO: f64 = 2.0;
/// Minimum samples per beam width.
pub const MIN_SAMPLES_PER_WIDTH: f64 = 8.0;

/// Widths are 4σ of the intensity profile of the Gaussian envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpSpec {
    pub kind: PumpKind,
    pub width_x: f64,
    pub width_y: f64,
    pub wavelength: f64,
    #[serde(default)]
    pub center: [f64; 2],
}

impl PumpSpec {
    pub fn gaussian(width: f64, wavelength: f64) -> Self {
        Self {
            kind: PumpKind::Gaussian,
            width_x: width,
            width_y: width,
            wavelength,
            center: [0.0, 0.0],
        }
    }

    pub fn tem01(width: f64, wavelength: f64) -> Self {
        Self {
            kind: PumpKind::Tem01,
            ..Self::gaussian(width, wavelength)
        }
    }

    pub fn plane_wave(wavelength: f64) -> Self {
        Self {
            kind: PumpKind::PlaneWave,
            width_x: f64::INFINITY,
            width_y: f64::INFINITY,
            wavelength,
            center: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0 && self.wavelength.is_finite()) {
            return Err(Error::config("pump.wavelength must be a positive length"));
        }
        if self.kind != PumpKind::PlaneWave
            && !(self.width_x > 0.0 && self.width_y > 0.0 && self.width_x.is_finite() && self.width_y.is_finite())
        {
            return Err(Error::config("pump widths must be positive finite lengths"));
        }
        Ok(())
    }

    fn sigma(&self) -> (f64, f64) {
        (self.width_x / 4.0, self.width_y / 4.0)
    }

    /// Checks that the lattice window holds and samples the beam.
    pub fn check_resolved(&self, grid: &TransverseGrid) -> Result<()> {
        self.validate()?;
        if self.kind == PumpKind::PlaneWave {
            return Ok(());
        }
        for (axis, w) in [("x", self.width_x), ("y", self.width_y)] {
            let ratio = grid.extent() / w;
            if ratio < MIN_WINDOW_RATIO {
                return Err(Error::config(format!(
                    "pump width_{axis} {w:.3e} m does not fit the window: extent {:.3e} m is {ratio:.2} widths, \
                     at least {MIN_WINDOW_RATIO} are required",
                    grid.extent()
                )));
            }
            let per_width = w / grid.spatial_step();
            if per_width < MIN_SAMPLES_PER_WIDTH {
                return Err(Error::config(format!(
                    "pump width_{axis} {w:.3e} m is sampled by {per_width:.2} cells, at least \
                     {MIN_SAMPLES_PER_WIDTH} are required (raise n to {} or more)",
                    ((MIN_SAMPLES_PER_WIDTH * grid.extent() / w).ceil() as usize + 1) & !1
                )));
            }
        }
        Ok(())
    }

    /// Near-field amplitude u(x, y). A plane wave is the constant 1.
    pub fn field(&self, x: f64, y: f64) -> C64 {
        let (sx, sy) = self.sigma();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let env = || (-(dx * dx) / (4.0 * sx * sx) - (dy * dy) / (4.0 * sy * sy)).exp();
        match self.kind {
            PumpKind::PlaneWave => C64::new(1.0, 0.0),
            PumpKind::Gaussian => C64::new(env(), 0.0),
            PumpKind::Tem01 => C64::new(dy / sy * env(), 0.0),
        }
    }

    /// Factor of the separable spectrum along one axis at momentum `q`.
    /// For a plane wave this is the discrete transform of a constant over the
    /// window: `extent` at `q = 0`, zero at every other lattice momentum.
    pub fn axis_spectrum(&self, y_axis: bool, q: f64, extent: f64) -> C64 {
        let (sx, sy) = self.sigma();
        let (s, c) = if y_axis {
            (sy, self.center[1])
        } else {
            (sx, self.center[0])
        };
        let shift = C64::from_polar(1.0, -q * c);
        match self.kind {
            PumpKind::PlaneWave => {
                if q == 0.0 {
                    C64::new(extent, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }
            PumpKind::Tem01 if y_axis => C64::new(0.0, -4.0 * PI.sqrt() * s * s * q * (-s * s * q * q).exp()) * shift,
            _ => C64::new(2.0 * PI.sqrt() * s * (-s * s * q * q).exp(), 0.0) * shift,
        }
    }

    /// ũ(qx, qy) with the transform convention `∫ u(ρ) e^{-iρ·q} dρ`.
    pub fn spectrum(&self, qx: f64, qy: f64, extent: f64) -> C64 {
        self.axis_spectrum(false, qx, extent) * self.axis_spectrum(true, qy, extent)
    }

    /// ũ sampled on the momentum lattice, index `iy * n + ix`.
    pub fn pump_spectrum(&self, grid: &TransverseGrid) -> Result<Vec<C64>> {
        self.check_resolved(grid)?;
        let q = grid.axis(crate::grid::Domain::Momentum);
        let fx: Vec<C64> = q.iter().map(|&v| self.axis_spectrum(false, v, grid.extent())).collect();
        let fy: Vec<C64> = q.iter().map(|&v| self.axis_spectrum(true, v, grid.extent())).collect();
        let mut out = Vec::with_capacity(grid.n2());
        for y in &fy {
            for x in &fx {
                out.push(x * y);
            }
        }
        Ok(out)
    }

    /// Tables for ũ(q_s + q_i): sums of two lattice momenta fall on the
    /// doubled lattice `(k - n) Δq`, `k = ix_s + ix_i`.
    pub fn sum_lattice(&self, grid: &TransverseGrid) -> SumLattice {
        let n = grid.n();
        let dq = grid.momentum_step();
        let q = |k: usize| (k as f64 - n as f64) * dq;
        SumLattice {
            n,
            fx: (0..2 * n - 1)
                .map(|k| self.axis_spectrum(false, q(k), grid.extent()))
                .collect(),
            fy: (0..2 * n - 1)
                .map(|k| self.axis_spectrum(true, q(k), grid.extent()))
                .collect(),
        }
    }
}

/// Separable lookup of ũ(q_s + q_i).
#[derive(Debug, Clone)]
pub struct SumLattice {
    n: usize,
    fx: Vec<C64>,
    fy: Vec<C64>,
}

impl SumLattice {
    #[inline]
    pub fn x(&self, ix_s: usize, ix_i: usize) -> C64 {
        self.fx[ix_s + ix_i]
    }

    #[inline]
    pub fn y(&self, iy_s: usize, iy_i: usize) -> C64 {
        self.fy[iy_s + iy_i]
    }

    /// ũ(q_s + q_i) for flat lattice points.
    pub fn at(&self, ps: usize, pi: usize) -> C64 {
        let n = self.n;
        self.x(ps % n, pi % n) * self.y(ps / n, pi / n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{CenteredFft2, Direction};
    use crate::grid::Domain;

    fn sampled_transform(p: &PumpSpec, g: &TransverseGrid) -> Vec<C64> {
        let n = g.n();
        let mut plane: Vec<C64> = (0..n * n)
            .map(|k| p.field(g.position(k % n), g.position(k / n)))
            .collect();
        let fft = CenteredFft2::new(g);
        fft.transform(&mut plane, Direction::Forward, &mut fft.make_scratch());
        plane
    }

    #[test]
    fn analytic_spectra_match_sampled_transform() {
        let g = TransverseGrid::new(64, 600e-6).unwrap();
        for mut p in [PumpSpec::gaussian(100e-6, 404e-9), PumpSpec::tem01(100e-6, 404e-9)] {
            p.center = [10e-6, -15e-6];
            let num = sampled_transform(&p, &g);
            let ana = p.pump_spectrum(&g).unwrap();
            let peak = ana.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (a, b) in num.iter().zip(&ana) {
                assert!((a - b).norm() < 1e-6 * peak, "{:?}: {a} vs {b}", p.kind);
            }
        }
    }

    #[test]
    fn gaussian_width_product() {
        let p = PumpSpec::gaussian(120e-6, 404e-9);
        let sigma = 30e-6;
        let q = 1.0 / (2.0 * sigma);
        let ratio = p.spectrum(q, 0.0, 1.0).norm_sqr() / p.spectrum(0.0, 0.0, 1.0).norm_sqr();
        // |u|² has standard deviation σ, |ũ|² has 1/(2σ)
        assert!((ratio - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn tem01_node_and_lobes() {
        let p = PumpSpec::tem01(140e-6, 404e-9);
        for qx in [-3e5, 0.0, 1e4, 2e5] {
            assert_eq!(p.spectrum(qx, 0.0, 1.0).norm(), 0.0);
        }
        let g = TransverseGrid::new(128, 400e-6).unwrap();
        let n = g.n();
        let col: Vec<f64> = (0..n).map(|iy| p.field(0.0, g.position(iy)).norm_sqr()).collect();
        assert_eq!(col[n / 2], 0.0);
        let maxima: Vec<usize> = (1..n - 1)
            .filter(|&i| col[i] > col[i - 1] && col[i] > col[i + 1])
            .collect();
        assert_eq!(maxima.len(), 2);
        assert!(maxima[0] < n / 2 && maxima[1] > n / 2);
        // lobe peaks at |y| = √2 σ
        let y = g.position(maxima[1]);
        assert!((y - 2f64.sqrt() * 35e-6).abs() <= g.spatial_step());
    }

    #[test]
    fn plane_wave_single_sample() {
        let g = TransverseGrid::new(16, 1e-3).unwrap();
        let s = PumpSpec::plane_wave(404e-9).pump_spectrum(&g).unwrap();
        let c = g.flat(8, 8);
        for (k, z) in s.iter().enumerate() {
            if k == c {
                assert!((z.re - 1e-6).abs() < 1e-18);
            } else {
                assert_eq!(z.norm(), 0.0);
            }
        }
        // agrees with the discrete transform of the constant
        let num = sampled_transform(&PumpSpec::plane_wave(404e-9), &g);
        for (a, b) in num.iter().zip(&s) {
            assert!((a - b).norm() < 1e-18);
        }
    }

    #[test]
    fn sum_lattice_matches_direct_evaluation() {
        let g = TransverseGrid::new(16, 400e-6).unwrap();
        let p = PumpSpec::tem01(140e-6, 404e-9);
        let t = p.sum_lattice(&g);
        let n = 16;
        for ps in (0..n * n).step_by(7) {
            for pi in (0..n * n).step_by(5) {
                let qx = g.momentum(ps % n) + g.momentum(pi % n);
                let qy = g.momentum(ps / n) + g.momentum(pi / n);
                let e = p.spectrum(qx, qy, g.extent());
                assert!((t.at(ps, pi) - e).norm() <= 1e-12 * e.norm());
            }
        }
        // antidiagonal hits ũ(0)
        let g8 = TransverseGrid::new(8, 400e-6).unwrap();
        let gp = PumpSpec::gaussian(140e-6, 404e-9);
        let t8 = gp.sum_lattice(&g8);
        let mirror = |p: usize| {
            let (x, y) = (p % 8, p / 8);
            if x == 0 || y == 0 {
                None
            } else {
                Some((8 - y) * 8 + (8 - x))
            }
        };
        for ps in 0..64 {
            if let Some(pi) = mirror(ps) {
                assert_eq!(t8.at(ps, pi), gp.spectrum(0.0, 0.0, 0.0));
            }
        }
        // far outside the spectral width
        assert!(gp.spectrum(6.0 / 35e-6, 0.0, 0.0).norm() < 1e-12 * gp.spectrum(0.0, 0.0, 0.0).norm());
    }

    #[test]
    fn parseval_for_analytic_kinds() {
        let g = TransverseGrid::new(96, 420e-6).unwrap();
        for p in [PumpSpec::gaussian(140e-6, 404e-9), PumpSpec::tem01(140e-6, 404e-9)] {
            let n = g.n();
            let near: f64 = (0..n * n)
                .map(|k| p.field(g.position(k % n), g.position(k / n)).norm_sqr())
                .sum::<f64>()
                * g.cell_measure(Domain::Position);
            let far: f64 = p.pump_spectrum(&g).unwrap().iter().map(|z| z.norm_sqr()).sum::<f64>()
                * g.cell_measure(Domain::Momentum);
            assert!((near - far).abs() < 1e-6 * near, "{:?}: {near} {far}", p.kind);
        }
    }

    #[test]
    fn resolution_checks() {
        let p = PumpSpec::tem01(140e-6, 404e-9);
        assert!(p.check_resolved(&TransverseGrid::new(64, 320e-6).unwrap()).is_ok());
        assert!(p.check_resolved(&TransverseGrid::new(64, 250e-6).unwrap()).is_err());
        let e = p
            .check_resolved(&TransverseGrid::new(8, 320e-6).unwrap())
            .unwrap_err()
            .to_string();
        assert!(e.contains("raise n"), "{e}");
        assert!(PumpSpec::plane_wave(404e-9)
            .check_resolved(&TransverseGrid::new(8, 1.0).unwrap())
            .is_ok());
    }
}
