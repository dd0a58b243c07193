//! Resolution consistency: how much the near-field signal map still moves
//! when the lattice is refined inside a fixed window.

use serde::{Deserialize, Serialize};

use super::pipeline::{run_pipeline, OutputRequest, Setup, Stage};
use super::ExecutionPlan;
use crate::error::{Error, Result};
use crate::grid::{Domain, Photon, TransverseGrid};
use crate::reduced::ReducedMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub ns: Vec<usize>,
    /// One value per consecutive pair of `ns`.
    pub values: Vec<f64>,
    /// Every value strictly below the previous one.
    pub monotone: bool,
}

/// Periodic bilinear interpolation of `map` at the lattice points of
/// `target`. Both lattices must share the window.
pub fn resample_bilinear(map: &ReducedMap, target: &TransverseGrid) -> Result<ReducedMap> {
    let src = map.grid();
    let rel = (src.extent() - target.extent()).abs() / src.extent();
    if rel > 1e-12 {
        return Err(Error::contract(format!(
            "resampling needs a common window, got {} and {}",
            src.extent(),
            target.extent()
        )));
    }
    let d = map.domain();
    let n = src.n();
    let step = match d {
        Domain::Position => src.spatial_step(),
        Domain::Momentum => src.momentum_step(),
    };
    let locate = |x: f64| {
        let t = x / step + (n / 2) as f64;
        let i0 = t.floor();
        let f = t - i0;
        let i = (i0 as i64).rem_euclid(n as i64) as usize;
        (i, (i + 1) % n, f)
    };
    let m = target.n();
    let mut out = Vec::with_capacity(m * m);
    for iy in 0..m {
        let (y0, y1, fy) = locate(target.coordinate(d, iy));
        for ix in 0..m {
            let (x0, x1, fx) = locate(target.coordinate(d, ix));
            let v = (1.0 - fy) * ((1.0 - fx) * map.get(x0, y0) + fx * map.get(x1, y0))
                + fy * ((1.0 - fx) * map.get(x0, y1) + fx * map.get(x1, y1));
            out.push(v.max(0.0));
        }
    }
    ReducedMap::new(*target, d, out)
}

/// RMS difference of two unit-peak maps after bringing the coarser onto the
/// finer lattice, per lattice point of refinement.
pub fn consistency_distance(a: &ReducedMap, b: &ReducedMap) -> Result<f64> {
    let (coarse, fine) = if a.grid().n() <= b.grid().n() { (a, b) } else { (b, a) };
    let fine = fine.to_unit_peak()?;
    let coarse = resample_bilinear(&coarse.to_unit_peak()?, fine.grid())?;
    let sq: f64 = coarse
        .values()
        .iter()
        .zip(fine.values())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let rms = (sq / fine.values().len() as f64).sqrt();
    let dn = fine.grid().n() - a.grid().n().min(b.grid().n());
    Ok(if dn == 0 { rms } else { rms / dn as f64 })
}

/// Runs `setup` at every lattice size in `ns` (same window) and compares the
/// near-field signal maps of consecutive sizes.
pub fn consistency_scan(setup: &Setup, ns: &[usize], plan: &ExecutionPlan) -> Result<ConsistencyReport> {
    if ns.len() < 2 {
        return Err(Error::config("consistency scan needs at least two lattice sizes"));
    }
    let mut maps = Vec::with_capacity(ns.len());
    for &n in ns {
        let s = setup.with_n(n)?;
        let r = run_pipeline(&s, plan, &OutputRequest::default())?;
        maps.push(r.map(Stage::P2PostN, Photon::Signal)?.clone());
    }
    let values = maps
        .windows(2)
        .map(|w| consistency_distance(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let monotone = values.windows(2).all(|w| w[1] < w[0]);
    Ok(ConsistencyReport {
        ns: ns.to_vec(),
        values,
        monotone,
    })
}
