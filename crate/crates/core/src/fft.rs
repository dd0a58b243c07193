//! Centred 2D transforms on one photon's n x n plane.
//!
//! Forward is `Σ u(ρ) e^{-iρ·q} Δρ²`, inverse is `Σ ũ(q) e^{iρ·q} Δq²/(2π)²`,
//! with index `n/2` at the origin on both lattices. The centring shift is a
//! checkerboard sign flip before and after a plain DFT; for even n the global
//! phase `(-1)^(n/2)` appears once per axis and cancels in 2D.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::grid::{Domain, TransverseGrid};

pub type C64 = Complex<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// position -> momentum
    Forward,
    /// momentum -> position
    Inverse,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::Forward => Domain::Position,
            Direction::Inverse => Domain::Momentum,
        }
    }

    pub fn target(self) -> Domain {
        match self {
            Direction::Forward => Domain::Momentum,
            Direction::Inverse => Domain::Position,
        }
    }
}

#[derive(Clone)]
pub struct CenteredFft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    forward_scale: f64,
    inverse_scale: f64,
}

impl std::fmt::Debug for CenteredFft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CenteredFft2").field("n", &self.n).finish()
    }
}

impl CenteredFft2 {
    pub fn new(grid: &TransverseGrid) -> Self {
        let n = grid.n();
        let mut planner = FftPlanner::new();
        Self {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            forward_scale: grid.cell_measure(Domain::Position),
            inverse_scale: grid.cell_measure(Domain::Momentum),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Scratch length required by [`transform`](Self::transform).
    pub fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
    }

    pub fn make_scratch(&self) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); self.scratch_len()]
    }

    /// Transforms one plane (`n²` values, index `iy * n + ix`) in place.
    /// An all-zero plane is left untouched.
    pub fn transform(&self, plane: &mut [C64], direction: Direction, scratch: &mut [C64]) {
        let n = self.n;
        debug_assert_eq!(plane.len(), n * n);
        if plane.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
            return;
        }
        let (fft, scale) = match direction {
            Direction::Forward => (&self.forward, self.forward_scale),
            Direction::Inverse => (&self.inverse, self.inverse_scale),
        };
        checkerboard(plane, n, 1.0);
        fft.process_with_scratch(plane, scratch);
        transpose_square(plane, n);
        fft.process_with_scratch(plane, scratch);
        transpose_square(plane, n);
        checkerboard(plane, n, scale);
    }
}

fn checkerboard(plane: &mut [C64], n: usize, scale: f64) {
    for (iy, row) in plane.chunks_exact_mut(n).enumerate() {
        for (ix, z) in row.iter_mut().enumerate() {
            if (ix + iy) % 2 == 1 {
                *z *= -scale;
            } else if scale != 1.0 {
                *z *= scale;
            }
        }
    }
}

fn transpose_square(a: &mut [C64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            a.swap(i * n + j, j * n + i);
        }
    }
}
