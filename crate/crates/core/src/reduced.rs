use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, TransverseGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    UnitPeak,
}

/// Nonnegative 2D rate map on one photon's lattice, index `iy * n + ix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedMap {
    grid: TransverseGrid,
    domain: Domain,
    values: Vec<f64>,
    normalization: Normalization,
}

impl ReducedMap {
    pub fn new(grid: TransverseGrid, domain: Domain, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n2() {
            return Err(Error::contract(format!(
                "map has {} values, lattice has {}",
                values.len(),
                grid.n2()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Numerical(format!("rate map contains an invalid value {bad}")));
        }
        Ok(Self {
            grid,
            domain,
            values,
            normalization: Normalization::Raw,
        })
    }

    pub fn grid(&self) -> &TransverseGrid {
        &self.grid
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.n() + ix]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Riemann sum of the map over its lattice.
    pub fn integral(&self) -> f64 {
        self.sum() * self.grid.cell_measure(self.domain)
    }

    /// Rescales so that the largest value is exactly one.
    pub fn to_unit_peak(&self) -> Result<Self> {
        let peak = self.max();
        if peak <= 0.0 {
            return Err(Error::Numerical("cannot normalise an all-zero map".into()));
        }
        Ok(Self {
            grid: self.grid,
            domain: self.domain,
            values: self.values.iter().map(|v| v / peak).collect(),
            normalization: Normalization::UnitPeak,
        })
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.grid, self.domain, self.values.iter().map(|v| v * factor).collect())
    }

    /// Column at fixed `ix`, as a function of `iy`.
    pub fn column(&self, ix: usize) -> Vec<f64> {
        let n = self.grid.n();
        (0..n).map(|iy| self.values[iy * n + ix]).collect()
    }

    /// Largest relative deviation from `other`, normalised by the larger peak.
    pub fn max_relative_deviation(&self, other: &ReducedMap) -> f64 {
        let peak = self.max().max(other.max());
        if peak == 0.0 {
            return 0.0;
        }
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TransverseGrid {
        TransverseGrid::new(8, 1.0).unwrap()
    }

    #[test]
    fn rejects_negative_and_nan() {
        let mut v = vec![1.0; 64];
        v[3] = -1e-30;
        assert!(ReducedMap::new(grid(), Domain::Position, v.clone()).is_err());
        v[3] = f64::NAN;
        assert!(ReducedMap::new(grid(), Domain::Position, v).is_err());
        assert!(ReducedMap::new(grid(), Domain::Position, vec![1.0; 63]).is_err());
    }

    #[test]
    fn unit_peak_is_exact() {
        let v: Vec<f64> = (0..64).map(|k| (k as f64 * 0.731).sin().abs() * 3.7e-9).collect();
        let m = ReducedMap::new(grid(), Domain::Momentum, v).unwrap();
        let u = m.to_unit_peak().unwrap();
        assert_eq!(u.max(), 1.0);
        assert_eq!(u.normalization(), Normalization::UnitPeak);
        assert!(ReducedMap::new(grid(), Domain::Momentum, vec![0.0; 64])
            .unwrap()
            .to_unit_peak()
            .is_err());
    }
}
