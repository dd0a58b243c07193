//! The 4D two-photon amplitude and the slab kernels shared with the engine.
//!
//! Layout is signal-major: the value for signal point `p_s` and idler point
//! `p_i` (each `iy * n + ix`) lives in signal row `p_s / n` at offset
//! `(p_s % n) * n² + p_i`. A signal row therefore holds `n³` values and is the
//! unit of storage for both the in-core and the on-disk stores.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apertures::MaskMap;
use crate::error::{Error, Result};
use crate::fft::{CenteredFft2, Direction, C64};
use crate::grid::{Domain, Photon, TransverseGrid};
use crate::reduced::ReducedMap;

pub const BYTES_PER_VALUE: u64 = 16;

/// Bytes needed to hold an `n⁴` complex-double field.
pub fn field_bytes(n: usize) -> u64 {
    BYTES_PER_VALUE * (n as u64).pow(4)
}

/// Idler rows gathered per slab when transforming over signal coordinates
/// in core; the tile is `rows / n` of the field.
pub fn idler_slab_rows(n: usize) -> usize {
    (n / 8).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotonSel {
    Signal,
    Idler,
    Both,
}

impl PhotonSel {
    fn includes(self, p: Photon) -> bool {
        matches!(
            (self, p),
            (PhotonSel::Both, _) | (PhotonSel::Signal, Photon::Signal) | (PhotonSel::Idler, Photon::Idler)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiphotonField {
    grid: TransverseGrid,
    rows: Vec<Vec<C64>>,
    domains: [Domain; 2],
}

fn slot(p: Photon) -> usize {
    match p {
        Photon::Signal => 0,
        Photon::Idler => 1,
    }
}

impl BiphotonField {
    /// Zero field, refusing to allocate beyond `budget` bytes.
    pub fn zeros(grid: TransverseGrid, domains: [Domain; 2], budget: Option<u64>) -> Result<Self> {
        let n = grid.n();
        let required = field_bytes(n);
        if let Some(budget) = budget {
            if required > budget {
                return Err(Error::Budget {
                    what: format!("in-core field at n={n}"),
                    required,
                    budget,
                });
            }
        }
        let row_len = n * grid.n2();
        Ok(Self {
            grid,
            rows: (0..n).map(|_| vec![C64::new(0.0, 0.0); row_len]).collect(),
            domains,
        })
    }

    pub fn from_fn(grid: TransverseGrid, domains: [Domain; 2], f: impl Fn(usize, usize) -> C64 + Sync) -> Self {
        let n = grid.n();
        let n2 = grid.n2();
        let rows = (0..n)
            .into_par_iter()
            .map(|r| {
                let mut row = Vec::with_capacity(n * n2);
                for ix in 0..n {
                    let ps = r * n + ix;
                    row.extend((0..n2).map(|pi| f(ps, pi)));
                }
                row
            })
            .collect();
        Self { grid, rows, domains }
    }

    pub(crate) fn from_rows(grid: TransverseGrid, rows: Vec<Vec<C64>>, domains: [Domain; 2]) -> Self {
        Self { grid, rows, domains }
    }

    pub(crate) fn into_rows(self) -> Vec<Vec<C64>> {
        self.rows
    }

    pub fn grid(&self) -> &TransverseGrid {
        &self.grid
    }

    pub fn domain(&self, photon: Photon) -> Domain {
        self.domains[slot(photon)]
    }

    pub fn domains(&self) -> [Domain; 2] {
        self.domains
    }

    #[inline]
    pub fn get(&self, ps: usize, pi: usize) -> C64 {
        let n = self.grid.n();
        self.rows[ps / n][(ps % n) * self.grid.n2() + pi]
    }

    #[inline]
    pub fn set(&mut self, ps: usize, pi: usize, value: C64) {
        let n = self.grid.n();
        let n2 = self.grid.n2();
        self.rows[ps / n][(ps % n) * n2 + pi] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.rows
            .par_iter()
            .all(|r| r.iter().all(|z| z.re.is_finite() && z.im.is_finite()))
    }

    /// `Σ |Φ|²` times the cell measures of both photons.
    pub fn total_power(&self) -> f64 {
        let sum: f64 = self
            .rows
            .iter()
            .map(|r| r.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        sum * self.grid.cell_measure(self.domains[0]) * self.grid.cell_measure(self.domains[1])
    }

    /// In-place 2D transform over the selected photon's coordinates.
    pub fn fft2_per_photon(&mut self, photons: PhotonSel, direction: Direction) -> Result<()> {
        for p in [Photon::Signal, Photon::Idler] {
            if photons.includes(p) && self.domain(p) != direction.source() {
                return Err(Error::contract(format!(
                    "{direction:?} transform needs the {} photon in the {:?} domain, found {:?}",
                    p.name(),
                    direction.source(),
                    self.domain(p)
                )));
            }
        }
        let fft = CenteredFft2::new(&self.grid);
        if photons.includes(Photon::Idler) {
            for row in &mut self.rows {
                transform_planes(row, &fft, direction);
            }
            self.domains[1] = direction.target();
        }
        if photons.includes(Photon::Signal) {
            let n = self.grid.n();
            let n2 = self.grid.n2();
            let h = idler_slab_rows(n);
            let mut tile = vec![C64::new(0.0, 0.0); h * n * n2];
            let mut row0 = 0;
            while row0 < n {
                let count = h.min(n - row0);
                let tile = &mut tile[..count * n * n2];
                {
                    let views: Vec<&[C64]> = self.rows.iter().map(|r| r.as_slice()).collect();
                    gather_idler_tile(&views, n, row0, count, tile);
                }
                transform_planes(tile, &fft, direction);
                {
                    let mut views: Vec<&mut [C64]> = self.rows.iter_mut().map(|r| r.as_mut_slice()).collect();
                    scatter_idler_tile(&mut views, n, row0, count, tile);
                }
                row0 += count;
            }
            self.domains[0] = direction.target();
        }
        Ok(())
    }

    /// Single-photon rate with the other photon traced out.
    pub fn reduce(&self, keep: Photon) -> Result<ReducedMap> {
        let n2 = self.grid.n2();
        let traced = self.grid.cell_measure(self.domain(keep.other()));
        let values = match keep {
            Photon::Signal => {
                let mut v = Vec::with_capacity(n2);
                for row in &self.rows {
                    v.extend(row.chunks_exact(n2).map(|b| block_power(b) * traced));
                }
                v
            }
            Photon::Idler => {
                let partials: Vec<Vec<f64>> = self.rows.par_iter().map(|r| idler_partial(r, n2)).collect();
                let mut v = vec![0.0; n2];
                for p in &partials {
                    for (a, b) in v.iter_mut().zip(p) {
                        *a += b;
                    }
                }
                v.iter_mut().for_each(|a| *a *= traced);
                v
            }
        };
        ReducedMap::new(self.grid, self.domain(keep), values)
    }

    /// `|Φ|²` over one photon's lattice with the other photon pinned at
    /// lattice point `(ix, iy)`.
    pub fn slice_coincidence(&self, fixed: Photon, ix: usize, iy: usize) -> Result<ReducedMap> {
        let n = self.grid.n();
        if ix >= n || iy >= n {
            return Err(Error::OutOfRange(format!(
                "slice index ({ix}, {iy}) outside the {n} x {n} lattice"
            )));
        }
        let p = iy * n + ix;
        let values = match fixed {
            Photon::Idler => (0..self.grid.n2()).map(|ps| self.get(ps, p).norm_sqr()).collect(),
            Photon::Signal => (0..self.grid.n2()).map(|pi| self.get(p, pi).norm_sqr()).collect(),
        };
        ReducedMap::new(self.grid, self.domain(fixed.other()), values)
    }

    /// Multiplies by `signal(p_s) * idler(p_i)` in place.
    pub fn apply_masks(&mut self, signal: &MaskMap, idler: &MaskMap) -> Result<()> {
        for (mask, photon) in [(signal, Photon::Signal), (idler, Photon::Idler)] {
            check_mask(mask, photon, self.domain(photon), &self.grid)?;
        }
        let n = self.grid.n();
        let n2 = self.grid.n2();
        for (r, row) in self.rows.iter_mut().enumerate() {
            apply_block_masks(row, r * n, n2, signal, idler);
        }
        Ok(())
    }
}

pub(crate) fn check_mask(mask: &MaskMap, photon: Photon, domain: Domain, grid: &TransverseGrid) -> Result<()> {
    if mask.photon != photon {
        return Err(Error::contract(format!(
            "{} mask supplied for the {} photon",
            mask.photon.name(),
            photon.name()
        )));
    }
    if mask.plane != domain {
        return Err(Error::contract(format!(
            "{} mask lives in the {:?} plane but the photon is in the {:?} domain",
            photon.name(),
            mask.plane,
            domain
        )));
    }
    if mask.values.len() != grid.n2() {
        return Err(Error::contract("mask sampled on a different lattice"));
    }
    Ok(())
}

pub(crate) fn block_power(block: &[C64]) -> f64 {
    block.iter().map(|z| z.norm_sqr()).sum()
}

/// `Σ_{p_s in row} |Φ(p_s, p_i)|²` for every idler point, summed in signal order.
pub(crate) fn idler_partial(row: &[C64], n2: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n2];
    for block in row.chunks_exact(n2) {
        for (a, z) in acc.iter_mut().zip(block) {
            *a += z.norm_sqr();
        }
    }
    acc
}

/// Multiplies consecutive `n²`-blocks by `outer[first_block + b] * inner[k]`.
/// A zero outer factor clears the block; unit factors leave values untouched.
pub(crate) fn apply_block_masks(blocks: &mut [C64], first_block: usize, n2: usize, outer: &MaskMap, inner: &MaskMap) {
    blocks.par_chunks_mut(n2).enumerate().for_each(|(b, block)| {
        let t = outer.values[first_block + b];
        if t == 0.0 {
            block.fill(C64::new(0.0, 0.0));
        } else if inner.identity {
            if t != 1.0 {
                block.iter_mut().for_each(|z| *z *= t);
            }
        } else {
            for (z, ti) in block.iter_mut().zip(&inner.values) {
                *z *= t * ti;
            }
        }
    });
}

pub(crate) fn transform_planes(planes: &mut [C64], fft: &CenteredFft2, direction: Direction) {
    let n2 = fft.n() * fft.n();
    planes.par_chunks_mut(n2).for_each_init(
        || fft.make_scratch(),
        |scratch, plane| fft.transform(plane, direction, scratch),
    );
}

/// Copies idler rows `row0..row0+count` out of signal rows into a tile laid out
/// `[j][p_s]`, with `j` the idler point within the slab.
pub(crate) fn gather_idler_tile(rows: &[&[C64]], n: usize, row0: usize, count: usize, tile: &mut [C64]) {
    let n2 = n * n;
    let tile = &mut tile[..count * n * n2];
    tile.par_chunks_mut(n * n2).enumerate().for_each(|(k, chunk)| {
        let off = (row0 + k) * n;
        for (r, row) in rows.iter().enumerate() {
            for ix in 0..n {
                let src = &row[ix * n2 + off..ix * n2 + off + n];
                let ps = r * n + ix;
                for (j, z) in src.iter().enumerate() {
                    chunk[j * n2 + ps] = *z;
                }
            }
        }
    });
}

/// Inverse of [`gather_idler_tile`].
pub(crate) fn scatter_idler_tile(rows: &mut [&mut [C64]], n: usize, row0: usize, count: usize, tile: &[C64]) {
    let n2 = n * n;
    let width = count * n;
    rows.par_iter_mut().enumerate().for_each(|(r, row)| {
        for ix in 0..n {
            let ps = r * n + ix;
            let dst = &mut row[ix * n2 + row0 * n..ix * n2 + row0 * n + width];
            for (j, z) in dst.iter_mut().enumerate() {
                *z = tile[j * n2 + ps];
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apertures::{ApertureMask, MaskShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64, domains: [Domain; 2]) -> BiphotonField {
        let grid = TransverseGrid::new(n, 2.0e-4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<C64> = (0..n.pow(4))
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        BiphotonField::from_fn(grid, domains, |ps, pi| vals[ps * n * n + pi])
    }

    fn max_diff(a: &BiphotonField, b: &BiphotonField) -> f64 {
        let n2 = a.grid().n2();
        let mut m: f64 = 0.0;
        for ps in 0..n2 {
            for pi in 0..n2 {
                m = m.max((a.get(ps, pi) - b.get(ps, pi)).norm());
            }
        }
        m
    }

    /// Direct sum over both photons' coordinates.
    fn brute_dft(f: &BiphotonField, direction: Direction) -> Vec<C64> {
        let g = *f.grid();
        let n = g.n();
        let n2 = g.n2();
        let (sign, measure, src, dst) = match direction {
            Direction::Forward => (
                -1.0,
                g.cell_measure(Domain::Position),
                Domain::Position,
                Domain::Momentum,
            ),
            Direction::Inverse => (
                1.0,
                g.cell_measure(Domain::Momentum),
                Domain::Momentum,
                Domain::Position,
            ),
        };
        let coord = |d: Domain, p: usize| (g.coordinate(d, p % n), g.coordinate(d, p / n));
        let mut out = vec![C64::new(0.0, 0.0); n2 * n2];
        for ks in 0..n2 {
            let (ksx, ksy) = coord(dst, ks);
            for ki in 0..n2 {
                let (kix, kiy) = coord(dst, ki);
                let mut acc = C64::new(0.0, 0.0);
                for js in 0..n2 {
                    let (jsx, jsy) = coord(src, js);
                    for ji in 0..n2 {
                        let (jix, jiy) = coord(src, ji);
                        let ph = sign * (jsx * ksx + jsy * ksy + jix * kix + jiy * kiy);
                        acc += f.get(js, ji) * C64::from_polar(1.0, ph);
                    }
                }
                out[ks * n2 + ki] = acc * measure * measure;
            }
        }
        out
    }

    #[test]
    fn four_dim_transform_matches_direct_sum() {
        let f = random_field(8, 1, [Domain::Position; 2]);
        let expect = brute_dft(&f, Direction::Forward);
        let mut g = f.clone();
        g.fft2_per_photon(PhotonSel::Both, Direction::Forward).unwrap();
        let peak = expect.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for ps in 0..64 {
            for pi in 0..64 {
                assert!((g.get(ps, pi) - expect[ps * 64 + pi]).norm() <= 1e-10 * peak);
            }
        }
        assert_eq!(g.domains(), [Domain::Momentum; 2]);
    }

    #[test]
    fn photons_transform_independently() {
        let f = random_field(8, 2, [Domain::Momentum; 2]);
        let mut a = f.clone();
        a.fft2_per_photon(PhotonSel::Signal, Direction::Inverse).unwrap();
        a.fft2_per_photon(PhotonSel::Idler, Direction::Inverse).unwrap();
        let mut b = f.clone();
        b.fft2_per_photon(PhotonSel::Both, Direction::Inverse).unwrap();
        let peak = (0..64).map(|p| b.get(p, p).norm()).fold(0.0, f64::max);
        assert!(max_diff(&a, &b) < 1e-13 * peak);
    }

    #[test]
    fn round_trip_and_parseval() {
        let f = random_field(8, 3, [Domain::Position; 2]);
        let mut g = f.clone();
        g.fft2_per_photon(PhotonSel::Both, Direction::Forward).unwrap();
        let p0 = f.total_power();
        assert!((g.total_power() - p0).abs() <= 1e-10 * p0);
        g.fft2_per_photon(PhotonSel::Both, Direction::Inverse).unwrap();
        assert!(max_diff(&f, &g) < 1e-12);
    }

    #[test]
    fn domain_mismatch_is_contract_error() {
        let mut f = random_field(8, 4, [Domain::Momentum, Domain::Position]);
        let err = f.fft2_per_photon(PhotonSel::Both, Direction::Forward).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        // nothing was modified
        assert_eq!(f.domains(), [Domain::Momentum, Domain::Position]);
    }

    #[test]
    fn reduce_matches_double_loop() {
        let f = random_field(8, 5, [Domain::Position, Domain::Momentum]);
        let g = *f.grid();
        let n2 = g.n2();
        let s = f.reduce(Photon::Signal).unwrap();
        let i = f.reduce(Photon::Idler).unwrap();
        for a in 0..n2 {
            let mut es = 0.0;
            let mut ei = 0.0;
            for b in 0..n2 {
                es += f.get(a, b).norm_sqr();
                ei += f.get(b, a).norm_sqr();
            }
            es *= g.cell_measure(Domain::Momentum);
            ei *= g.cell_measure(Domain::Position);
            assert!((s.values()[a] - es).abs() <= 1e-12 * es);
            assert!((i.values()[a] - ei).abs() <= 1e-12 * ei);
        }
        assert_eq!(s.domain(), Domain::Position);
        assert_eq!(i.domain(), Domain::Momentum);
        let total = f.total_power();
        assert!((s.integral() - total).abs() < 1e-12 * total);
        assert!((i.integral() - total).abs() < 1e-12 * total);
    }

    #[test]
    fn separable_reduction() {
        let grid = TransverseGrid::new(8, 1e-4).unwrap();
        let fa = |p: usize| C64::new(1.0 + p as f64, 0.5);
        let gb = |p: usize| C64::new((p as f64).cos(), 0.1 * p as f64);
        let f = BiphotonField::from_fn(grid, [Domain::Position; 2], |ps, pi| fa(ps) * gb(pi));
        let m = f.reduce(Photon::Signal).unwrap();
        let gsum: f64 = (0..64).map(|p| gb(p).norm_sqr()).sum::<f64>() * grid.cell_measure(Domain::Position);
        for a in 0..64 {
            let e = fa(a).norm_sqr() * gsum;
            assert!((m.values()[a] - e).abs() < 1e-12 * e);
        }
    }

    #[test]
    fn slices_index_directly_and_sum_to_reduction() {
        let f = random_field(8, 6, [Domain::Momentum; 2]);
        let g = *f.grid();
        let s = f.slice_coincidence(Photon::Idler, 3, 5).unwrap();
        for ps in 0..64 {
            assert_eq!(s.values()[ps], f.get(ps, 5 * 8 + 3).norm_sqr());
        }
        let mut acc = vec![0.0; 64];
        for iy in 0..8 {
            for ix in 0..8 {
                let sl = f.slice_coincidence(Photon::Idler, ix, iy).unwrap();
                for (a, v) in acc.iter_mut().zip(sl.values()) {
                    *a += v * g.cell_measure(Domain::Momentum);
                }
            }
        }
        let r = f.reduce(Photon::Signal).unwrap();
        for (a, b) in acc.iter().zip(r.values()) {
            assert!((a - b).abs() < 1e-12 * b.max(1e-300));
        }
        assert!(f.slice_coincidence(Photon::Signal, 8, 0).is_err());
    }

    #[test]
    fn masks_multiply_pointwise() {
        let f = random_field(8, 7, [Domain::Position; 2]);
        let g = *f.grid();
        let sm = ApertureMask::new(
            MaskShape::Rectangular {
                width_x: 1.0e-4,
                width_y: 1.5e-4,
                center: [0.0, 0.0],
            },
            Domain::Position,
            Photon::Signal,
        )
        .evaluate(&g)
        .unwrap();
        let im = ApertureMask::new(
            MaskShape::Circular {
                radius: 0.6e-4,
                center: [0.0, 0.0],
            },
            Domain::Position,
            Photon::Idler,
        )
        .evaluate(&g)
        .unwrap();
        let mut h = f.clone();
        h.apply_masks(&sm, &im).unwrap();
        let red = h.reduce(Photon::Signal).unwrap();
        for ps in 0..64 {
            let mut e = 0.0;
            for pi in 0..64 {
                e += (f.get(ps, pi) * sm.values[ps] * im.values[pi]).norm_sqr();
                assert_eq!(h.get(ps, pi), f.get(ps, pi) * (sm.values[ps] * im.values[pi]));
            }
            e *= g.cell_measure(Domain::Position);
            assert!((red.values()[ps] - e).abs() <= 1e-12 * e.max(1e-300));
        }
        assert!(h.total_power() <= f.total_power());
        let ir = h.reduce(Photon::Idler).unwrap();
        for (pi, v) in ir.values().iter().enumerate() {
            if im.values[pi] == 0.0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn identity_masks_are_bit_exact() {
        let f = random_field(8, 8, [Domain::Momentum; 2]);
        let g = *f.grid();
        let mut h = f.clone();
        h.apply_masks(
            &MaskMap::identity(&g, Domain::Momentum, Photon::Signal),
            &MaskMap::identity(&g, Domain::Momentum, Photon::Idler),
        )
        .unwrap();
        assert_eq!(h, f);
    }

    #[test]
    fn mask_plane_mismatch() {
        let mut f = random_field(8, 9, [Domain::Momentum; 2]);
        let g = *f.grid();
        let err = f
            .apply_masks(
                &MaskMap::identity(&g, Domain::Position, Photon::Signal),
                &MaskMap::identity(&g, Domain::Momentum, Photon::Idler),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn budget_is_checked_before_allocation() {
        let g = TransverseGrid::new(64, 1e-3).unwrap();
        let err = BiphotonField::zeros(g, [Domain::Momentum; 2], Some(field_bytes(64) - 1)).unwrap_err();
        assert!(matches!(err, Error::Budget { required, .. } if required == 16 * 64u64.pow(4)));
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let f = random_field(10, 10, [Domain::Position; 2]);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut g = f.clone();
                g.fft2_per_photon(PhotonSel::Both, Direction::Forward).unwrap();
                (g, f.reduce(Photon::Idler).unwrap())
            })
        };
        let (a, ra) = run(1);
        let (b, rb) = run(3);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
