use crate::error::{Error, Result};
use crate::grid::{Domain, TransverseGrid};
use crate::reduced::ReducedMap;

/// Offsets and weights of a normalized disc sampled at cell centres.
fn disc_kernel(radius: f64, step: f64) -> Vec<(i64, i64, f64)> {
    let r = (radius / step).floor() as i64;
    let mut k = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d = ((dx * dx + dy * dy) as f64).sqrt() * step;
            if d <= radius * (1.0 + 1e-12) {
                k.push((dx, dy, 1.0));
            }
        }
    }
    let w = 1.0 / k.len() as f64;
    k.iter_mut().for_each(|e| e.2 = w);
    k
}

/// Convolves a position-domain map with a unit-sum disc of `radius`
/// (periodic boundary), emulating a detector of finite area.
pub fn detector_convolve(map: &ReducedMap, radius: f64) -> Result<ReducedMap> {
    if map.domain() != Domain::Position {
        return Err(Error::contract("detector convolution acts on near-field maps"));
    }
    let g = *map.grid();
    let step = g.spatial_step();
    if radius.is_nan() || radius < step {
        return Err(Error::config(format!(
            "detector radius {radius:.3e} m is below one lattice step ({step:.3e} m); skip the convolution instead"
        )));
    }
    let kernel = disc_kernel(radius, step);
    let n = g.n() as i64;
    let v = map.values();
    let mut out = vec![0.0; g.n2()];
    for iy in 0..n {
        for ix in 0..n {
            let mut acc = 0.0;
            for &(dx, dy, w) in &kernel {
                let x = (ix - dx).rem_euclid(n);
                let y = (iy - dy).rem_euclid(n);
                acc += w * v[(y * n + x) as usize];
            }
            out[(iy * n + ix) as usize] = acc;
        }
    }
    ReducedMap::new(g, Domain::Position, out)
}

/// Mean over `factor × factor` blocks, giving a map on the lattice of
/// `n / factor` points over the same window. Block means sit half a fine cell
/// off the coarse cell centres when `factor` is even.
pub fn block_average(map: &ReducedMap, factor: usize) -> Result<ReducedMap> {
    let g = map.grid();
    let n = g.n();
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(Error::config(format!(
            "downsampling factor {factor} does not divide n = {n}"
        )));
    }
    let m = n / factor;
    let coarse = TransverseGrid::new(m, g.extent())?;
    let mut out = vec![0.0; m * m];
    for iy in 0..n {
        for ix in 0..n {
            out[(iy / factor) * m + ix / factor] += map.get(ix, iy);
        }
    }
    let w = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= w);
    ReducedMap::new(coarse, map.domain(), out)
}
