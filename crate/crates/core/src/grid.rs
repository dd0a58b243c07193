//! Transverse sampling lattices shared by signal and idler.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which conjugate lattice a photon's coordinates currently live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Position,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Photon {
    Signal,
    Idler,
}

impl Photon {
    pub fn other(self) -> Photon {
        match self {
            Photon::Signal => Photon::Idler,
            Photon::Idler => Photon::Signal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Photon::Signal => "signal",
            Photon::Idler => "idler",
        }
    }
}

/// Square n x n lattice with spatial step `extent / n` and momentum step
/// `2π / extent`, both centred so that index `n / 2` is the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseGrid {
    n: usize,
    extent: f64,
}

impl TransverseGrid {
    pub const MIN_POINTS: usize = 8;

    pub fn new(n: usize, extent: f64) -> Result<Self> {
        if n < Self::MIN_POINTS || !n.is_multiple_of(2) {
            return Err(Error::config(format!(
                "grid.n must be even and at least {}, got {n}",
                Self::MIN_POINTS
            )));
        }
        if !(extent.is_finite() && extent > 0.0) {
            return Err(Error::config(format!(
                "grid.extent must be a positive length, got {extent}"
            )));
        }
        Ok(Self { n, extent })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of lattice points in the 2D plane.
    #[inline]
    pub fn n2(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn extent(&self) -> f64 {
        self.extent
    }

    #[inline]
    pub fn spatial_step(&self) -> f64 {
        self.extent / self.n as f64
    }

    #[inline]
    pub fn momentum_step(&self) -> f64 {
        2.0 * PI / self.extent
    }

    /// Signed lattice offset of index `i` from the centre.
    #[inline]
    pub fn offset(&self, i: usize) -> i64 {
        i as i64 - (self.n / 2) as i64
    }

    #[inline]
    pub fn position(&self, i: usize) -> f64 {
        self.offset(i) as f64 * self.spatial_step()
    }

    #[inline]
    pub fn momentum(&self, i: usize) -> f64 {
        self.offset(i) as f64 * self.momentum_step()
    }

    pub fn coordinate(&self, domain: Domain, i: usize) -> f64 {
        match domain {
            Domain::Position => self.position(i),
            Domain::Momentum => self.momentum(i),
        }
    }

    pub fn axis(&self, domain: Domain) -> Vec<f64> {
        (0..self.n).map(|i| self.coordinate(domain, i)).collect()
    }

    /// Area element of one lattice cell. In momentum space the `(2π)²` of the
    /// inverse transform is folded in, which makes Parseval an exact identity.
    pub fn cell_measure(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Position => self.spatial_step().powi(2),
            Domain::Momentum => (self.momentum_step() / (2.0 * PI)).powi(2),
        }
    }

    /// Index of the lattice point nearest to `value`, if it lies inside the
    /// window (half a cell of slack on either side).
    pub fn nearest_index(&self, domain: Domain, value: f64) -> Option<usize> {
        let step = match domain {
            Domain::Position => self.spatial_step(),
            Domain::Momentum => self.momentum_step(),
        };
        let k = (value / step).round() + (self.n / 2) as f64;
        if k >= 0.0 && k < self.n as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Flat in-plane index of lattice point `(ix, iy)`.
    #[inline]
    pub fn flat(&self, ix: usize, iy: usize) -> usize {
        iy * self.n + ix
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_and_small() {
        assert!(TransverseGrid::new(7, 1.0).is_err());
        assert!(TransverseGrid::new(9, 1.0).is_err());
        assert!(TransverseGrid::new(6, 1.0).is_err());
        assert!(TransverseGrid::new(8, 0.0).is_err());
        assert!(TransverseGrid::new(8, f64::NAN).is_err());
    }

    #[test]
    fn unit_grid() {
        let g = TransverseGrid::new(8, 8.0).unwrap();
        assert_eq!(g.spatial_step(), 1.0);
        assert_eq!(g.momentum_step(), 2.0 * PI / 8.0);
        assert_eq!(g.position(4), 0.0);
        assert_eq!(g.position(0), -4.0);
        assert_eq!(g.position(7), 3.0);
    }

    #[test]
    fn conjugate_identity() {
        let g = TransverseGrid::new(16, 1e-3).unwrap();
        assert!((g.momentum_step() * g.extent() - 2.0 * PI).abs() < 1e-12);
        assert!((g.momentum_step() - 2.0 * PI * 1e3).abs() < 1e-9);
    }

    #[test]
    fn desk_scale_step() {
        let g = TransverseGrid::new(240, 504e-6).unwrap();
        assert!((g.spatial_step() - 2.1e-6).abs() < 1e-12);
    }

    #[test]
    fn measures_are_reciprocal() {
        let g = TransverseGrid::new(32, 3e-4).unwrap();
        let prod = g.cell_measure(Domain::Position) * g.cell_measure(Domain::Momentum);
        assert!((prod * g.n2() as f64 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_index_round_trip() {
        let g = TransverseGrid::new(64, 3e-4).unwrap();
        for i in 0..64 {
            assert_eq!(g.nearest_index(Domain::Position, g.position(i)), Some(i));
            assert_eq!(g.nearest_index(Domain::Momentum, g.momentum(i)), Some(i));
        }
        assert_eq!(g.nearest_index(Domain::Position, 1.0), None);
    }
}
