use crate::apertures::DoubleSlit;
use crate::error::{Error, Result};
use crate::grid::Domain;
use crate::reduced::ReducedMap;

/// `D = |C_upper − C_lower| / (C_upper + C_lower)` with each rate summed over
/// the open area of one slit.
pub fn distinguishability(near: &ReducedMap, slit: &DoubleSlit) -> Result<f64> {
    if near.domain() != Domain::Position {
        return Err(Error::contract("distinguishability needs a near-field map"));
    }
    let g = near.grid();
    let step = g.spatial_step();
    let (mut upper, mut lower) = (0.0, 0.0);
    for iy in 0..g.n() {
        let y = g.position(iy);
        for ix in 0..g.n() {
            let x = g.position(ix);
            if slit.in_upper(x, y, step) {
                upper += near.get(ix, iy);
            } else if slit.in_lower(x, y, step) {
                lower += near.get(ix, iy);
            }
        }
    }
    if upper + lower <= 0.0 {
        return Err(Error::Numerical("no signal inside either slit; D is undefined".into()));
    }
    Ok((upper - lower).abs() / (upper + lower))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apertures::Axis;
    use crate::grid::TransverseGrid;
    use proptest::prelude::*;

    fn map_with(f: impl Fn(f64, f64) -> f64) -> ReducedMap {
        let g = TransverseGrid::new(64, 320e-6).unwrap();
        let mut v = Vec::new();
        for iy in 0..64 {
            for ix in 0..64 {
                v.push(f(g.position(ix), g.position(iy)));
            }
        }
        ReducedMap::new(g, Domain::Position, v).unwrap()
    }

    fn slit() -> DoubleSlit {
        DoubleSlit::new(105e-6, 30e-6, Axis::Y)
    }

    #[test]
    fn symmetric_map_has_zero_d() {
        let m = map_with(|x, y| (-(x * x + y * y) / 1e-8).exp());
        assert!(distinguishability(&m, &slit()).unwrap() < 1e-12);
    }

    #[test]
    fn one_sided_map_has_unit_d() {
        let m = map_with(|_, y| if y > 0.0 { 1.0 } else { 0.0 });
        assert_eq!(distinguishability(&m, &slit()).unwrap(), 1.0);
        let m = map_with(|_, y| if y < 0.0 { 1.0 } else { 0.0 });
        assert_eq!(distinguishability(&m, &slit()).unwrap(), 1.0);
    }

    #[test]
    fn empty_slits_are_an_error() {
        let m = map_with(|_, y| if y.abs() < 10e-6 { 1.0 } else { 0.0 });
        assert!(distinguishability(&m, &slit()).is_err());
    }

    proptest! {
        #[test]
        fn scale_invariant(c in 1e-6f64..1e6, shift in -40e-6f64..40e-6) {
            let m = map_with(|x, y| (-(x * x + (y - shift).powi(2)) / 2e-9).exp() + 1e-3);
            let d0 = distinguishability(&m, &slit()).unwrap();
            let d1 = distinguishability(&m.scaled(c).unwrap(), &slit()).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d0));
        }
    }
}
