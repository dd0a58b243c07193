//! Build → T → F⁻¹ → N → F, with reductions recorded at every plane.
//!
//! Three passes over the field:
//!
//! 1. signal rows: fill Φ̃, reduce, apply T, reduce, inverse-transform idler;
//! 2. idler rows: inverse-transform signal, reduce, apply N, reduce,
//!    forward-transform signal;
//! 3. signal rows: forward-transform idler, reduce.
//!
//! Sweeps keep the field after the inverse transforms and repeat from the N
//! stage for every idler mask. Reductions accumulate per-row partial sums in
//! row order, so the result does not depend on slab size, storage mode or
//! thread count.

use std::sync::mpsc::{channel, sync_channel};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::amplitude::{warn_if_ring_clipped, AmplitudeTables};
use super::store::{CacheSession, DiskStore, FieldStore, MemoryMeter, MemoryStore};
use super::{in_core_bytes, spill_rows, ExecMode, ExecutionPlan};
use crate::apertures::{ApertureMask, MaskMap};
use crate::error::{Error, Result};
use crate::fft::{CenteredFft2, Direction, C64};
use crate::field::{
    apply_block_masks, block_power, field_bytes, idler_partial, idler_slab_rows, transform_planes, BiphotonField,
};
use crate::grid::{Domain, Photon, TransverseGrid};
use crate::phase_matching::PhaseMatchModel;
use crate::pump::PumpSpec;
use crate::reduced::ReducedMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// far field, before T
    P1PreT,
    P1PostT,
    /// near field, before N
    P2PreN,
    P2PostN,
    /// far field after N
    P3,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::P1PreT, Stage::P1PostT, Stage::P2PreN, Stage::P2PostN, Stage::P3];

    pub fn domain(self) -> Domain {
        match self {
            Stage::P2PreN | Stage::P2PostN => Domain::Position,
            _ => Domain::Momentum,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::P1PreT => "p1_pre_t",
            Stage::P1PostT => "p1_post_t",
            Stage::P2PreN => "p2_pre_n",
            Stage::P2PostN => "p2_post_n",
            Stage::P3 => "p3",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// T masks act in the far field (momentum), N masks in the near field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub far_signal: ApertureMask,
    pub far_idler: ApertureMask,
    pub near_signal: ApertureMask,
    pub near_idler: ApertureMask,
}

impl Default for MaskSet {
    fn default() -> Self {
        Self {
            far_signal: ApertureMask::identity(Domain::Momentum, Photon::Signal),
            far_idler: ApertureMask::identity(Domain::Momentum, Photon::Idler),
            near_signal: ApertureMask::identity(Domain::Position, Photon::Signal),
            near_idler: ApertureMask::identity(Domain::Position, Photon::Idler),
        }
    }
}

fn evaluate_mask(mask: &ApertureMask, plane: Domain, photon: Photon, grid: &TransverseGrid) -> Result<MaskMap> {
    if mask.plane != plane || mask.photon != photon {
        return Err(Error::contract(format!(
            "mask for the {} photon in the {:?} plane used where a {} mask in the {plane:?} plane is expected",
            mask.photon.name(),
            mask.plane,
            photon.name()
        )));
    }
    mask.evaluate(grid)
}

struct EvaluatedFar {
    signal: MaskMap,
    idler: MaskMap,
}

struct EvaluatedNear {
    signal: MaskMap,
    idler: MaskMap,
}

/// Physical description of one simulation. `crystal = None` selects the
/// thin-crystal limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub grid: TransverseGrid,
    pub pump: PumpSpec,
    pub crystal: Option<PhaseMatchModel>,
    pub masks: MaskSet,
    /// Turn pump resolution failures into warnings.
    #[serde(default)]
    pub lenient_resolution: bool,
}

impl Setup {
    pub fn new(grid: TransverseGrid, pump: PumpSpec, crystal: Option<PhaseMatchModel>) -> Self {
        Self {
            grid,
            pump,
            crystal,
            masks: MaskSet::default(),
            lenient_resolution: false,
        }
    }

    pub fn with_masks(mut self, masks: MaskSet) -> Self {
        self.masks = masks;
        self
    }

    /// Same setup on a different lattice size, keeping the window.
    pub fn with_n(&self, n: usize) -> Result<Self> {
        let mut s = self.clone();
        s.grid = TransverseGrid::new(n, self.grid.extent())?;
        Ok(s)
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).unwrap_or_default();
        hex_digest(text.as_bytes())
    }

    fn check(&self) -> Result<()> {
        if let Err(e) = self.pump.check_resolved(&self.grid) {
            if self.lenient_resolution && matches!(e, Error::Config(_)) {
                self.pump.validate()?;
                log::warn!("{e}");
            } else {
                return Err(e);
            }
        }
        if let Some(m) = &self.crystal {
            m.validate()?;
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceRequest {
    pub stage: Stage,
    /// The photon held at a fixed lattice point.
    pub fixed: Photon,
    pub ix: usize,
    pub iy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub request: SliceRequest,
    pub map: ReducedMap,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputRequest {
    pub slices: Vec<SliceRequest>,
    /// Keep the final far-field 4D amplitude (in-core runs only).
    pub retain_final_field: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMaps {
    pub stage: Stage,
    pub signal: ReducedMap,
    pub idler: ReducedMap,
}

impl StageMaps {
    pub fn photon(&self, p: Photon) -> &ReducedMap {
        match p {
            Photon::Signal => &self.signal,
            Photon::Idler => &self.idler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub setup_hash: String,
    pub n: usize,
    pub extent: f64,
    pub mode: ExecMode,
    pub threads: usize,
    pub runtime_seconds: f64,
    /// Field storage plus the high-water mark of transient buffers.
    pub peak_memory_bytes: u64,
    pub peak_cache_bytes: u64,
    pub transforms: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub stages: Vec<StageMaps>,
    pub slices: Vec<Slice>,
    pub provenance: Provenance,
    pub field: Option<BiphotonField>,
}

impl PipelineResult {
    pub fn stage(&self, stage: Stage) -> Option<&StageMaps> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn map(&self, stage: Stage, photon: Photon) -> Result<&ReducedMap> {
        self.stage(stage)
            .map(|s| s.photon(photon))
            .ok_or_else(|| Error::contract(format!("stage {} was not executed", stage.name())))
    }
}

#[derive(Debug, Clone)]
pub struct PositionOutcome {
    pub index: usize,
    /// `P2PostN` and `P3` maps plus slices, or the error that stopped this position.
    pub result: Result<(Vec<StageMaps>, Vec<Slice>), String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Stages shared by every position: `P1PreT`, `P1PostT`, `P2PreN`.
    pub shared: Vec<StageMaps>,
    pub positions: Vec<PositionOutcome>,
    pub provenance: Provenance,
}

/// Raw reduction sums for one stage.
struct Acc {
    stage: Stage,
    signal: Vec<f64>,
    idler: Vec<f64>,
}

impl Acc {
    fn new(stage: Stage, n2: usize) -> Self {
        Self {
            stage,
            signal: vec![0.0; n2],
            idler: vec![0.0; n2],
        }
    }

    fn add_signal_slab(&mut self, row0: usize, slab: &[C64], n: usize) {
        let n2 = n * n;
        let powers: Vec<f64> = slab.par_chunks(n2).map(block_power).collect();
        self.signal[row0 * n..row0 * n + powers.len()].copy_from_slice(&powers);
        let partials: Vec<Vec<f64>> = slab.par_chunks(n * n2).map(|row| idler_partial(row, n2)).collect();
        for p in &partials {
            for (a, b) in self.idler.iter_mut().zip(p) {
                *a += b;
            }
        }
    }

    fn add_idler_tile(&mut self, row0: usize, tile: &[C64], n: usize) {
        let n2 = n * n;
        let powers: Vec<f64> = tile.par_chunks(n2).map(block_power).collect();
        self.idler[row0 * n..row0 * n + powers.len()].copy_from_slice(&powers);
        let partials: Vec<Vec<f64>> = tile.par_chunks(n * n2).map(|row| idler_partial(row, n2)).collect();
        for p in &partials {
            for (a, b) in self.signal.iter_mut().zip(p) {
                *a += b;
            }
        }
    }

    fn finish(self, grid: &TransverseGrid) -> Result<StageMaps> {
        let d = self.stage.domain();
        let m = grid.cell_measure(d);
        let scale = |v: Vec<f64>| v.into_iter().map(|x| x * m).collect::<Vec<_>>();
        Ok(StageMaps {
            stage: self.stage,
            signal: ReducedMap::new(*grid, d, scale(self.signal))?,
            idler: ReducedMap::new(*grid, d, scale(self.idler))?,
        })
    }

    fn copy_as(&self, stage: Stage) -> Acc {
        Acc {
            stage,
            signal: self.signal.clone(),
            idler: self.idler.clone(),
        }
    }
}

struct SliceAcc {
    req: SliceRequest,
    values: Vec<f64>,
}

fn observe_signal_slab(slices: &mut [SliceAcc], stage: Stage, row0: usize, slab: &[C64], n: usize) {
    let n2 = n * n;
    for s in slices.iter_mut().filter(|s| s.req.stage == stage) {
        let p = s.req.iy * n + s.req.ix;
        match s.req.fixed {
            Photon::Idler => {
                for (b, block) in slab.chunks_exact(n2).enumerate() {
                    s.values[row0 * n + b] = block[p].norm_sqr();
                }
            }
            Photon::Signal => {
                let first = row0 * n;
                if p >= first && p < first + slab.len() / n2 {
                    let block = &slab[(p - first) * n2..(p - first + 1) * n2];
                    for (v, z) in s.values.iter_mut().zip(block) {
                        *v = z.norm_sqr();
                    }
                }
            }
        }
    }
}

fn observe_idler_tile(slices: &mut [SliceAcc], stage: Stage, row0: usize, tile: &[C64], n: usize) {
    let n2 = n * n;
    for s in slices.iter_mut().filter(|s| s.req.stage == stage) {
        let p = s.req.iy * n + s.req.ix;
        match s.req.fixed {
            Photon::Signal => {
                for (j, block) in tile.chunks_exact(n2).enumerate() {
                    s.values[row0 * n + j] = block[p].norm_sqr();
                }
            }
            Photon::Idler => {
                let first = row0 * n;
                if p >= first && p < first + tile.len() / n2 {
                    let block = &tile[(p - first) * n2..(p - first + 1) * n2];
                    for (v, z) in s.values.iter_mut().zip(block) {
                        *v = z.norm_sqr();
                    }
                }
            }
        }
    }
}

fn finish_slices(slices: Vec<SliceAcc>, grid: &TransverseGrid) -> Result<Vec<Slice>> {
    slices
        .into_iter()
        .map(|s| {
            Ok(Slice {
                map: ReducedMap::new(*grid, s.req.stage.domain(), s.values)?,
                request: s.req,
            })
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Layout {
    SignalRows,
    IdlerRows,
}

struct Engine {
    grid: TransverseGrid,
    fft: CenteredFft2,
    meter: Arc<MemoryMeter>,
    signal_rows: usize,
    idler_rows: usize,
    transforms: u64,
}

type SkipFn<'a> = &'a (dyn Fn(usize, usize) -> bool + Sync);

impl Engine {
    fn read(&self, layout: Layout, store: &dyn FieldStore, row0: usize, count: usize, buf: &mut [C64]) -> Result<()> {
        match layout {
            Layout::SignalRows => store.read_signal_rows(row0, count, buf),
            Layout::IdlerRows => store.read_idler_rows(row0, count, buf),
        }
    }

    fn write(&self, layout: Layout, store: &dyn FieldStore, row0: usize, count: usize, buf: &[C64]) -> Result<()> {
        match layout {
            Layout::SignalRows => store.write_signal_rows(row0, count, buf),
            Layout::IdlerRows => store.write_idler_rows(row0, count, buf),
        }
    }

    /// Streams slabs from `src` (or zeros) through `f` into `dst`. Slabs for
    /// which `skip` holds are not read and arrive zero-filled.
    fn pass(
        &self,
        layout: Layout,
        src: Option<&dyn FieldStore>,
        dst: Option<&dyn FieldStore>,
        skip: Option<SkipFn<'_>>,
        f: &mut dyn FnMut(usize, &mut [C64]) -> Result<()>,
    ) -> Result<()> {
        let n = self.grid.n();
        let row_len = n * self.grid.n2();
        let rows = match layout {
            Layout::SignalRows => self.signal_rows,
            Layout::IdlerRows => self.idler_rows,
        };
        let slabs: Vec<(usize, usize)> = (0..n).step_by(rows).map(|r| (r, rows.min(n - r))).collect();
        let load = |row0: usize, count: usize, buf: &mut [C64]| -> Result<()> {
            match src {
                Some(s) if !skip.is_some_and(|k| k(row0, count)) => self.read(layout, s, row0, count, buf),
                _ => {
                    buf.fill(C64::new(0.0, 0.0));
                    Ok(())
                }
            }
        };
        let prefetch = src.is_some_and(|s| s.prefers_prefetch()) && slabs.len() > 1;
        if !prefetch {
            let mut buf = self.meter.buffer(rows * row_len);
            for &(row0, count) in &slabs {
                let data = &mut buf.data[..count * row_len];
                load(row0, count, data)?;
                f(row0, data)?;
                if let Some(d) = dst {
                    self.write(layout, d, row0, count, data)?;
                }
            }
            return Ok(());
        }
        std::thread::scope(|scope| {
            let (tx, rx) = sync_channel(1);
            let (back_tx, back_rx) = channel::<super::store::MeteredBuffer>();
            let meter = Arc::clone(&self.meter);
            let slabs_reader = slabs.clone();
            let load = &load;
            scope.spawn(move || {
                for (row0, count) in slabs_reader {
                    let mut buf = back_rx.try_recv().unwrap_or_else(|_| meter.buffer(rows * row_len));
                    let res = load(row0, count, &mut buf.data[..count * row_len]).map(|_| (row0, count, buf));
                    let failed = res.is_err();
                    if tx.send(res).is_err() || failed {
                        break;
                    }
                }
            });
            for msg in rx {
                let (row0, count, mut buf) = msg?;
                let data = &mut buf.data[..count * row_len];
                f(row0, data)?;
                if let Some(d) = dst {
                    self.write(layout, d, row0, count, data)?;
                }
                let _ = back_tx.send(buf);
            }
            Ok(())
        })
    }

    /// Pass 1: Φ̃, far-field reductions, T, idler inverse transform.
    fn pass_build(
        &mut self,
        tables: &AmplitudeTables,
        far: &EvaluatedFar,
        dst: &dyn FieldStore,
        slices: &mut [SliceAcc],
    ) -> Result<(StageMaps, StageMaps)> {
        let n = self.grid.n();
        let n2 = self.grid.n2();
        let mut pre = Acc::new(Stage::P1PreT, n2);
        let mut post = Acc::new(Stage::P1PostT, n2);
        let identity = far.signal.identity && far.idler.identity;
        let fft = self.fft.clone();
        let mut transforms = 0u64;
        self.pass(Layout::SignalRows, None, Some(dst), None, &mut |row0, slab| {
            slab.par_chunks_mut(n2)
                .enumerate()
                .for_each(|(b, block)| tables.fill_block(row0 * n + b, block));
            pre.add_signal_slab(row0, slab, n);
            observe_signal_slab(slices, Stage::P1PreT, row0, slab, n);
            if !identity {
                apply_block_masks(slab, row0 * n, n2, &far.signal, &far.idler);
                post.add_signal_slab(row0, slab, n);
            }
            observe_signal_slab(slices, Stage::P1PostT, row0, slab, n);
            transform_planes(slab, &fft, Direction::Inverse);
            transforms += (slab.len() / n2) as u64;
            Ok(())
        })?;
        self.transforms += transforms;
        if identity {
            post = pre.copy_as(Stage::P1PostT);
        }
        Ok((pre.finish(&self.grid)?, post.finish(&self.grid)?))
    }

    /// Pass 2 over idler rows. Each step is optional so that sweeps can split
    /// it around the snapshot.
    #[allow(clippy::too_many_arguments)]
    fn pass_near(
        &mut self,
        src: &dyn FieldStore,
        dst: &dyn FieldStore,
        inverse: bool,
        pre: Option<&mut Acc>,
        near: Option<&EvaluatedNear>,
        post: Option<&mut Acc>,
        forward: bool,
        slices: &mut [SliceAcc],
    ) -> Result<()> {
        let n = self.grid.n();
        let n2 = self.grid.n2();
        let fft = self.fft.clone();
        let mut transforms = 0u64;
        let mut pre = pre;
        let mut post = post;
        let skip_fn = |row0: usize, count: usize| {
            near.is_some_and(|m| m.idler.values[row0 * n..(row0 + count) * n].iter().all(|v| *v == 0.0))
        };
        let skip: Option<SkipFn<'_>> = if inverse { None } else { Some(&skip_fn) };
        self.pass(Layout::IdlerRows, Some(src), Some(dst), skip, &mut |row0, tile| {
            if inverse {
                transform_planes(tile, &fft, Direction::Inverse);
                transforms += (tile.len() / n2) as u64;
            }
            if let Some(acc) = pre.as_deref_mut() {
                acc.add_idler_tile(row0, tile, n);
            }
            observe_idler_tile(slices, Stage::P2PreN, row0, tile, n);
            if let Some(m) = near {
                if !(m.signal.identity && m.idler.identity) {
                    apply_block_masks(tile, row0 * n, n2, &m.idler, &m.signal);
                }
            }
            if let Some(acc) = post.as_deref_mut() {
                acc.add_idler_tile(row0, tile, n);
            }
            observe_idler_tile(slices, Stage::P2PostN, row0, tile, n);
            if forward {
                transform_planes(tile, &fft, Direction::Forward);
                transforms += (tile.len() / n2) as u64;
            }
            Ok(())
        })?;
        self.transforms += transforms;
        Ok(())
    }

    /// Pass 3: idler forward transform and far-field reductions.
    fn pass_far(&mut self, src: &dyn FieldStore, keep: bool, slices: &mut [SliceAcc]) -> Result<StageMaps> {
        let n = self.grid.n();
        let n2 = self.grid.n2();
        let mut acc = Acc::new(Stage::P3, n2);
        let fft = self.fft.clone();
        let mut transforms = 0u64;
        let dst = if keep { Some(src) } else { None };
        self.pass(Layout::SignalRows, Some(src), dst, None, &mut |row0, slab| {
            transform_planes(slab, &fft, Direction::Forward);
            transforms += (slab.len() / n2) as u64;
            acc.add_signal_slab(row0, slab, n);
            observe_signal_slab(slices, Stage::P3, row0, slab, n);
            Ok(())
        })?;
        self.transforms += transforms;
        acc.finish(&self.grid)
    }
}

enum Backing {
    Memory(MemoryStore),
    Disk(DiskStore),
}

impl Backing {
    fn store(&self) -> &dyn FieldStore {
        match self {
            Backing::Memory(m) => m,
            Backing::Disk(d) => d,
        }
    }
}

/// Where the field lives for one run. Holds the cache session alive.
struct Storage {
    main: Backing,
    snapshot: Option<Backing>,
    session: Option<Arc<CacheSession>>,
    resident: u64,
}

fn allocate(grid: &TransverseGrid, plan: &ExecutionPlan, fields: u64) -> Result<(Storage, usize, usize)> {
    let n = grid.n();
    match plan.mode {
        ExecMode::InCore => {
            let required = in_core_bytes(n, fields);
            if required > plan.memory_budget {
                return Err(Error::Budget {
                    what: format!("in-core run at n={n} ({fields} field copies plus workspace)"),
                    required,
                    budget: plan.memory_budget,
                });
            }
            let h = idler_slab_rows(n);
            let storage = Storage {
                main: Backing::Memory(MemoryStore::zeros(*grid)),
                snapshot: (fields > 1).then(|| Backing::Memory(MemoryStore::zeros(*grid))),
                session: None,
                resident: fields * field_bytes(n),
            };
            Ok((storage, h, h))
        }
        ExecMode::SpillToDisk => {
            let rows = spill_rows(n, plan.memory_budget)?;
            let dir = plan
                .cache_dir
                .clone()
                .ok_or_else(|| Error::config("spill mode needs a cache directory"))?;
            let session = CacheSession::create(&dir, fields * field_bytes(n), plan.cache_limit)?;
            let labels: Vec<String> = if fields > 1 {
                vec!["main".into(), "snapshot".into()]
            } else {
                vec!["main".into()]
            };
            let main = Backing::Disk(DiskStore::create(&session, *grid, "main", &labels)?);
            let snapshot = if fields > 1 {
                Some(Backing::Disk(DiskStore::create(&session, *grid, "snapshot", &labels)?))
            } else {
                None
            };
            Ok((
                Storage {
                    main,
                    snapshot,
                    session: Some(session),
                    resident: 0,
                },
                rows,
                rows,
            ))
        }
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<(T, usize)> {
    match threads {
        Some(t) if t > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))?;
            Ok((pool.install(f), t))
        }
        _ => Ok((f(), rayon::current_num_threads())),
    }
}

fn check_slices(reqs: &[SliceRequest], grid: &TransverseGrid) -> Result<Vec<SliceAcc>> {
    reqs.iter()
        .map(|r| {
            if r.ix >= grid.n() || r.iy >= grid.n() {
                return Err(Error::OutOfRange(format!(
                    "slice at ({}, {}) outside the {} x {} lattice",
                    r.ix,
                    r.iy,
                    grid.n(),
                    grid.n()
                )));
            }
            Ok(SliceAcc {
                req: *r,
                values: vec![0.0; grid.n2()],
            })
        })
        .collect()
}

struct Prepared {
    tables: AmplitudeTables,
    far: EvaluatedFar,
}

fn prepare(setup: &Setup) -> Result<Prepared> {
    setup.check()?;
    let g = &setup.grid;
    let far = EvaluatedFar {
        signal: evaluate_mask(&setup.masks.far_signal, Domain::Momentum, Photon::Signal, g)?,
        idler: evaluate_mask(&setup.masks.far_idler, Domain::Momentum, Photon::Idler, g)?,
    };
    let tables = AmplitudeTables::new(&setup.pump, setup.crystal.as_ref(), g);
    warn_if_ring_clipped(&tables);
    Ok(Prepared { tables, far })
}

fn evaluate_near(signal: &ApertureMask, idler: &ApertureMask, grid: &TransverseGrid) -> Result<EvaluatedNear> {
    Ok(EvaluatedNear {
        signal: evaluate_mask(signal, Domain::Position, Photon::Signal, grid)?,
        idler: evaluate_mask(idler, Domain::Position, Photon::Idler, grid)?,
    })
}

/// Runs the full pipeline once and returns the reduced maps of every stage.
pub fn run_pipeline(setup: &Setup, plan: &ExecutionPlan, outputs: &OutputRequest) -> Result<PipelineResult> {
    let start = Instant::now();
    let grid = setup.grid;
    let prepared = prepare(setup)?;
    let near = evaluate_near(&setup.masks.near_signal, &setup.masks.near_idler, &grid)?;
    let mut slices = check_slices(&outputs.slices, &grid)?;
    if outputs.retain_final_field && plan.mode != ExecMode::InCore {
        return Err(Error::config("retaining the 4D field requires in-core execution"));
    }
    let (storage, signal_rows, idler_rows) = allocate(&grid, plan, 1)?;
    let meter = Arc::new(MemoryMeter::default());
    let mut engine = Engine {
        grid,
        fft: CenteredFft2::new(&grid),
        meter: Arc::clone(&meter),
        signal_rows,
        idler_rows,
        transforms: 0,
    };
    let (stages, threads) = with_threads(plan.threads, || -> Result<_> {
        let main = storage.main.store();
        let (p1_pre, p1_post) = engine.pass_build(&prepared.tables, &prepared.far, main, &mut slices)?;
        let mut pre = Acc::new(Stage::P2PreN, grid.n2());
        let mut post = Acc::new(Stage::P2PostN, grid.n2());
        engine.pass_near(
            main,
            main,
            true,
            Some(&mut pre),
            Some(&near),
            Some(&mut post),
            true,
            &mut slices,
        )?;
        let p3 = engine.pass_far(main, outputs.retain_final_field, &mut slices)?;
        Ok(vec![p1_pre, p1_post, pre.finish(&grid)?, post.finish(&grid)?, p3])
    })
    .and_then(|(r, t)| r.map(|v| (v, t)))?;
    let peak_cache = storage.session.as_ref().map_or(0, |s| s.used());
    let resident = storage.resident;
    let field = match storage.main {
        Backing::Memory(m) if outputs.retain_final_field => {
            Some(BiphotonField::from_rows(grid, m.into_rows(), [Domain::Momentum; 2]))
        }
        _ => None,
    };
    Ok(PipelineResult {
        stages,
        slices: finish_slices(slices, &grid)?,
        provenance: Provenance {
            setup_hash: setup.hash(),
            n: grid.n(),
            extent: grid.extent(),
            mode: plan.mode,
            threads,
            runtime_seconds: start.elapsed().as_secs_f64(),
            peak_memory_bytes: resident + meter.peak(),
            peak_cache_bytes: peak_cache,
            transforms: engine.transforms,
        },
        field,
    })
}

/// Runs the pipeline once up to the near field, then once per idler mask
/// from the N stage on. The signal near-field mask comes from `setup`.
pub fn run_sweep(
    setup: &Setup,
    idler_masks: &[ApertureMask],
    plan: &ExecutionPlan,
    outputs: &OutputRequest,
) -> Result<SweepResult> {
    let start = Instant::now();
    let grid = setup.grid;
    let prepared = prepare(setup)?;
    let mut shared_slices = check_slices(&outputs.slices, &grid)?;
    let (storage, signal_rows, idler_rows) = allocate(&grid, plan, 2)?;
    let meter = Arc::new(MemoryMeter::default());
    let mut engine = Engine {
        grid,
        fft: CenteredFft2::new(&grid),
        meter: Arc::clone(&meter),
        signal_rows,
        idler_rows,
        transforms: 0,
    };
    let ((shared, positions), threads) = with_threads(plan.threads, || -> Result<_> {
        let main = storage.main.store();
        let snap = storage.snapshot.as_ref().expect("sweep allocates a snapshot").store();
        let (p1_pre, p1_post) = engine.pass_build(&prepared.tables, &prepared.far, main, &mut shared_slices)?;
        let mut pre = Acc::new(Stage::P2PreN, grid.n2());
        engine.pass_near(main, snap, true, Some(&mut pre), None, None, false, &mut shared_slices)?;
        let shared = vec![p1_pre, p1_post, pre.finish(&grid)?];
        let mut positions = Vec::with_capacity(idler_masks.len());
        for (index, mask) in idler_masks.iter().enumerate() {
            let outcome = (|| -> Result<(Vec<StageMaps>, Vec<Slice>)> {
                let near = evaluate_near(&setup.masks.near_signal, mask, &grid)?;
                let mut slices = check_slices(&outputs.slices, &grid)?;
                slices.retain(|s| matches!(s.req.stage, Stage::P2PostN | Stage::P3));
                let mut post = Acc::new(Stage::P2PostN, grid.n2());
                engine.pass_near(snap, main, false, None, Some(&near), Some(&mut post), true, &mut slices)?;
                let p3 = engine.pass_far(main, false, &mut slices)?;
                Ok((vec![post.finish(&grid)?, p3], finish_slices(slices, &grid)?))
            })();
            match outcome {
                Ok(v) => positions.push(PositionOutcome { index, result: Ok(v) }),
                Err(e) if e.is_resource() => return Err(e),
                Err(e) => {
                    log::warn!("sweep position {index}: {e}");
                    positions.push(PositionOutcome {
                        index,
                        result: Err(e.to_string()),
                    })
                }
            }
        }
        Ok((shared, positions))
    })
    .and_then(|(r, t)| r.map(|v| (v, t)))?;
    let peak_cache = storage.session.as_ref().map_or(0, |s| s.used());
    Ok(SweepResult {
        shared,
        positions,
        provenance: Provenance {
            setup_hash: setup.hash(),
            n: grid.n(),
            extent: grid.extent(),
            mode: plan.mode,
            threads,
            runtime_seconds: start.elapsed().as_secs_f64(),
            peak_memory_bytes: storage.resident + meter.peak(),
            peak_cache_bytes: peak_cache,
            transforms: engine.transforms,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apertures::MaskShape;
    use crate::field::PhotonSel;
    use crate::phase_matching::{builtin_materials, find_material, PmType};

    fn setup(n: usize) -> Setup {
        let grid = TransverseGrid::new(n, 4e-4).unwrap();
        let bbo = find_material(&builtin_materials(), "BBO").unwrap();
        let crystal = PhaseMatchModel::from_material(&bbo, 2e-3, 42.4f64.to_radians(), PmType::TypeII, 404e-9).unwrap();
        let mut s = Setup::new(grid, PumpSpec::gaussian(2e-4, 404e-9), Some(crystal));
        s.masks.far_signal = ApertureMask::new(
            MaskShape::Circular {
                radius: 6e4,
                center: [1e4, 0.0],
            },
            Domain::Momentum,
            Photon::Signal,
        );
        s.masks.near_idler = ApertureMask::new(
            MaskShape::Rectangular {
                width_x: 2e-4,
                width_y: 1.5e-4,
                center: [0.0, 2.5e-5],
            },
            Domain::Position,
            Photon::Idler,
        );
        s
    }

    fn reference(s: &Setup) -> Vec<StageMaps> {
        let g = s.grid;
        let mut f = build_biphoton_amplitude_for_test(s);
        let mut out = Vec::new();
        let mut record = |stage, f: &BiphotonField| {
            out.push(StageMaps {
                stage,
                signal: f.reduce(Photon::Signal).unwrap(),
                idler: f.reduce(Photon::Idler).unwrap(),
            })
        };
        record(Stage::P1PreT, &f);
        f.apply_masks(
            &s.masks.far_signal.evaluate(&g).unwrap(),
            &s.masks.far_idler.evaluate(&g).unwrap(),
        )
        .unwrap();
        record(Stage::P1PostT, &f);
        f.fft2_per_photon(PhotonSel::Both, Direction::Inverse).unwrap();
        record(Stage::P2PreN, &f);
        f.apply_masks(
            &s.masks.near_signal.evaluate(&g).unwrap(),
            &s.masks.near_idler.evaluate(&g).unwrap(),
        )
        .unwrap();
        record(Stage::P2PostN, &f);
        f.fft2_per_photon(PhotonSel::Both, Direction::Forward).unwrap();
        record(Stage::P3, &f);
        out
    }

    fn build_biphoton_amplitude_for_test(s: &Setup) -> BiphotonField {
        super::super::build_biphoton_amplitude(&s.pump, s.crystal.as_ref(), &s.grid, None).unwrap()
    }

    fn assert_close(a: &ReducedMap, b: &ReducedMap, tol: f64, what: &str) {
        let scale = a.max().max(b.max());
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() <= tol * scale, "{what}: {x} vs {y}");
        }
    }

    #[test]
    fn matches_dense_reference() {
        for n in [16, 20] {
            let s = setup(n);
            let want = reference(&s);
            let got = run_pipeline(&s, &ExecutionPlan::in_core(u64::MAX), &OutputRequest::default()).unwrap();
            for w in &want {
                let g = got.stage(w.stage).unwrap();
                assert_close(&g.signal, &w.signal, 1e-12, w.stage.name());
                assert_close(&g.idler, &w.idler, 1e-12, w.stage.name());
            }
            assert_eq!(got.provenance.transforms, 4 * (n * n) as u64);
        }
    }

    #[test]
    fn slices_match_dense_field() {
        let s = setup(16);
        let reqs = vec![
            SliceRequest {
                stage: Stage::P1PreT,
                fixed: Photon::Idler,
                ix: 8,
                iy: 8,
            },
            SliceRequest {
                stage: Stage::P2PostN,
                fixed: Photon::Signal,
                ix: 7,
                iy: 9,
            },
            SliceRequest {
                stage: Stage::P3,
                fixed: Photon::Signal,
                ix: 8,
                iy: 6,
            },
        ];
        let out = OutputRequest {
            slices: reqs.clone(),
            retain_final_field: true,
        };
        let got = run_pipeline(&s, &ExecutionPlan::in_core(u64::MAX), &out).unwrap();
        let g = s.grid;
        let mut f = build_biphoton_amplitude_for_test(&s);
        let first = f.slice_coincidence(Photon::Idler, 8, 8).unwrap();
        assert_close(&got.slices[0].map, &first, 1e-13, "p1 slice");
        f.apply_masks(
            &s.masks.far_signal.evaluate(&g).unwrap(),
            &s.masks.far_idler.evaluate(&g).unwrap(),
        )
        .unwrap();
        f.fft2_per_photon(PhotonSel::Both, Direction::Inverse).unwrap();
        f.apply_masks(
            &s.masks.near_signal.evaluate(&g).unwrap(),
            &s.masks.near_idler.evaluate(&g).unwrap(),
        )
        .unwrap();
        assert_close(
            &got.slices[1].map,
            &f.slice_coincidence(Photon::Signal, 7, 9).unwrap(),
            1e-12,
            "p2 slice",
        );
        f.fft2_per_photon(PhotonSel::Both, Direction::Forward).unwrap();
        assert_close(
            &got.slices[2].map,
            &f.slice_coincidence(Photon::Signal, 8, 6).unwrap(),
            1e-12,
            "p3 slice",
        );
        let kept = got.field.unwrap();
        let scale = f.total_power();
        assert!(((kept.total_power() - scale) / scale).abs() < 1e-12);
    }

    #[test]
    fn power_is_conserved_by_transforms_and_lost_at_masks() {
        let s = setup(16);
        let r = run_pipeline(&s, &ExecutionPlan::in_core(u64::MAX), &OutputRequest::default()).unwrap();
        let total = |st| r.map(st, Photon::Signal).unwrap().integral();
        let rel = |a: f64, b: f64| ((a - b) / a).abs();
        assert!(rel(total(Stage::P1PostT), total(Stage::P2PreN)) < 1e-10);
        assert!(rel(total(Stage::P2PostN), total(Stage::P3)) < 1e-10);
        assert!(total(Stage::P1PostT) <= total(Stage::P1PreT));
        assert!(total(Stage::P2PostN) <= total(Stage::P2PreN));
        for st in Stage::ALL {
            let a = r.map(st, Photon::Signal).unwrap().integral();
            let b = r.map(st, Photon::Idler).unwrap().integral();
            assert!(rel(a, b) < 1e-12, "{}", st.name());
        }
    }

    #[test]
    fn identity_masks_change_nothing() {
        let s = Setup::new(setup(16).grid, setup(16).pump, setup(16).crystal);
        let r = run_pipeline(&s, &ExecutionPlan::in_core(u64::MAX), &OutputRequest::default()).unwrap();
        assert_eq!(
            r.map(Stage::P1PreT, Photon::Signal).unwrap(),
            r.map(Stage::P1PostT, Photon::Signal).unwrap()
        );
        assert_eq!(
            r.map(Stage::P2PreN, Photon::Idler).unwrap(),
            r.map(Stage::P2PostN, Photon::Idler).unwrap()
        );
    }

    #[test]
    fn wrong_plane_mask_is_rejected() {
        let mut s = setup(16);
        s.masks.near_signal = ApertureMask::new(
            MaskShape::Circular {
                radius: 1e-4,
                center: [0.0, 0.0],
            },
            Domain::Momentum,
            Photon::Signal,
        );
        let e = run_pipeline(&s, &ExecutionPlan::in_core(u64::MAX), &OutputRequest::default()).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }

    #[test]
    fn in_core_budget_is_enforced() {
        let s = setup(16);
        let need = in_core_bytes(16, 1);
        let e = run_pipeline(&s, &ExecutionPlan::in_core(need - 1), &OutputRequest::default()).unwrap_err();
        assert!(matches!(e, Error::Budget { .. }));
        let r = run_pipeline(&s, &ExecutionPlan::in_core(need), &OutputRequest::default()).unwrap();
        assert!(r.provenance.peak_memory_bytes <= need);
    }

    #[test]
    fn setup_hash_tracks_content() {
        let a = setup(16);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.pump.width_x *= 1.01;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
