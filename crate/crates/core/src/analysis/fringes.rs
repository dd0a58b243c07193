//! Fringe profiles along the vertical line `q_x = 0` of a far-field map.
//!
//! The line crosses the phase-matching ring twice. Each crossing (arc) is
//! found as the maximum of the column smoothed over one fringe period, so
//! that the fringes themselves do not pull the estimate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Domain;
use crate::reduced::ReducedMap;

/// Fraction of the column maximum below which a local maximum is not a fringe.
pub const FRINGE_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeProfile {
    /// `q_y − q_arc` of each sample.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub arc_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcFringes {
    pub upper: usize,
    pub lower: usize,
}

fn check_far(map: &ReducedMap) -> Result<()> {
    if map.domain() != Domain::Momentum {
        return Err(Error::contract("fringe analysis needs a far-field map"));
    }
    Ok(())
}

/// Box average over `width` samples (odd), ignoring samples beyond the ends.
fn smooth(v: &[f64], width: usize) -> Vec<f64> {
    let h = width / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn argmax(v: &[f64], range: std::ops::Range<usize>) -> Option<usize> {
    range.max_by(|a, b| v[*a].total_cmp(&v[*b]))
}

/// Row indices of the lower and upper arc on the centre column.
fn arcs(map: &ReducedMap, separation: f64) -> Result<(Vec<f64>, usize, usize)> {
    check_far(map)?;
    let g = map.grid();
    let n = g.n();
    let col = map.column(n / 2);
    let period = 2.0 * PI / separation / g.momentum_step();
    let width = ((period.round() as usize).max(1)) | 1;
    let s = smooth(&col, width);
    let lower = argmax(&s, 0..n / 2).expect("n >= 8");
    let upper = argmax(&s, n / 2 + 1..n).expect("n >= 8");
    if s[lower] <= 0.0 {
        return Err(Error::Numerical(
            "far-field map is empty along q_x = 0 below the axis".into(),
        ));
    }
    Ok((col, lower, upper))
}

/// Rows within the central diffraction lobe `|q − q_arc| ≤ 2π / width` of
/// the arc at row `arc`.
fn lobe(map: &ReducedMap, arc: usize, width: f64) -> std::ops::Range<usize> {
    let g = map.grid();
    let half = 2.0 * PI / width * (1.0 + 1e-12);
    let arc_q = g.momentum(arc);
    let inside: Vec<usize> = (0..g.n()).filter(|&i| (g.momentum(i) - arc_q).abs() <= half).collect();
    inside[0]..inside[inside.len() - 1] + 1
}

/// Samples of the centre column around the lower arc, within its central
/// diffraction lobe.
pub fn fringe_profile(map: &ReducedMap, separation: f64, width: f64) -> Result<FringeProfile> {
    let (col, lower, _) = arcs(map, separation)?;
    let g = map.grid();
    let arc_q = g.momentum(lower);
    let rows = lobe(map, lower, width);
    Ok(FringeProfile {
        x: rows.clone().map(|i| g.momentum(i) - arc_q).collect(),
        y: col[rows].to_vec(),
        arc_q,
    })
}

/// Local maxima above `threshold`, with zeros assumed beyond both ends.
fn count_maxima(v: &[f64], threshold: f64) -> usize {
    let at = |i: isize| {
        if i < 0 || i as usize >= v.len() {
            0.0
        } else {
            v[i as usize]
        }
    };
    (0..v.len() as isize)
        .filter(|&i| {
            let c = at(i);
            c > threshold && c > at(i - 1) && c >= at(i + 1)
        })
        .count()
}

/// Fringe maxima on the upper and lower arc. Each arc cut is its central
/// diffraction lobe; maxima below [`FRINGE_THRESHOLD`] of the cut's peak are
/// ignored.
pub fn count_arc_fringes(map: &ReducedMap, separation: f64, width: f64) -> Result<ArcFringes> {
    let (col, lower, upper) = arcs(map, separation)?;
    let count = |arc: usize| {
        let cut = &col[lobe(map, arc, width)];
        count_maxima(cut, FRINGE_THRESHOLD * cut.iter().cloned().fold(0.0, f64::max))
    };
    Ok(ArcFringes {
        lower: count(lower),
        upper: count(upper),
    })
}
