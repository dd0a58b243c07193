//! Backing stores for the 4D field: in core, or as per-row files in a cache
//! directory. Both expose the same slab interface so every pass runs through
//! identical arithmetic regardless of where the data lives.

use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::{DirBuilderExt, FileExt, OpenOptionsExt};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fft::C64;
use crate::field::{gather_idler_tile, scatter_idler_tile, BYTES_PER_VALUE};
use crate::grid::TransverseGrid;

/// Slab-level access to a field stored signal-row by signal-row.
///
/// Signal slabs are `rows * n³` values in storage order. Idler tiles hold
/// idler rows `row0..row0+rows` for every signal point, laid out `[j][p_s]`.
/// Concurrent calls must touch disjoint rows.
pub trait FieldStore: Send + Sync {
    fn grid(&self) -> &TransverseGrid;
    fn read_signal_rows(&self, row0: usize, rows: usize, out: &mut [C64]) -> Result<()>;
    fn write_signal_rows(&self, row0: usize, rows: usize, data: &[C64]) -> Result<()>;
    fn read_idler_rows(&self, row0: usize, rows: usize, out: &mut [C64]) -> Result<()>;
    fn write_idler_rows(&self, row0: usize, rows: usize, data: &[C64]) -> Result<()>;
    /// Whether reads are slow enough to be worth overlapping with compute.
    fn prefers_prefetch(&self) -> bool {
        false
    }
}

/// Tracks current and peak bytes of transient buffers.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    current: AtomicU64,
    peak: AtomicU64,
}

impl MemoryMeter {
    pub fn acquire(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn release(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }

    /// Zero-filled buffer of `len` values, counted until dropped.
    pub fn buffer(self: &Arc<Self>, len: usize) -> MeteredBuffer {
        let bytes = len as u64 * BYTES_PER_VALUE;
        self.acquire(bytes);
        MeteredBuffer {
            data: vec![C64::new(0.0, 0.0); len],
            meter: Arc::clone(self),
            bytes,
        }
    }
}

pub struct MeteredBuffer {
    pub data: Vec<C64>,
    meter: Arc<MemoryMeter>,
    bytes: u64,
}

impl Drop for MeteredBuffer {
    fn drop(&mut self) {
        self.meter.release(self.bytes);
    }
}

pub struct MemoryStore {
    grid: TransverseGrid,
    rows: Vec<RwLock<Vec<C64>>>,
}

impl MemoryStore {
    pub fn zeros(grid: TransverseGrid) -> Self {
        let len = grid.n() * grid.n2();
        Self {
            grid,
            rows: (0..grid.n())
                .map(|_| RwLock::new(vec![C64::new(0.0, 0.0); len]))
                .collect(),
        }
    }

    pub fn from_rows(grid: TransverseGrid, rows: Vec<Vec<C64>>) -> Self {
        Self {
            grid,
            rows: rows.into_iter().map(RwLock::new).collect(),
        }
    }

    pub fn into_rows(self) -> Vec<Vec<C64>> {
        self.rows
            .into_iter()
            .map(|r| r.into_inner().unwrap_or_else(|e| e.into_inner()))
            .collect()
    }
}

fn poisoned() -> Error {
    Error::Numerical("a worker panicked while holding field storage".into())
}

impl FieldStore for MemoryStore {
    fn grid(&self) -> &TransverseGrid {
        &self.grid
    }

    fn read_signal_rows(&self, row0: usize, rows: usize, out: &mut [C64]) -> Result<()> {
        let len = self.grid.n() * self.grid.n2();
        for (k, chunk) in out.chunks_exact_mut(len).take(rows).enumerate() {
            chunk.copy_from_slice(&self.rows[row0 + k].read().map_err(|_| poisoned())?);
        }
        Ok(())
    }

    fn write_signal_rows(&self, row0: usize, rows: usize, data: &[C64]) -> Result<()> {
        let len = self.grid.n() * self.grid.n2();
        for (k, chunk) in data.chunks_exact(len).take(rows).enumerate() {
            self.rows[row0 + k]
                .write()
                .map_err(|_| poisoned())?
                .copy_from_slice(chunk);
        }
        Ok(())
    }

    fn read_idler_rows(&self, row0: usize, rows: usize, out: &mut [C64]) -> Result<()> {
        let guards = self
            .rows
            .iter()
            .map(|r| r.read().map_err(|_| poisoned()))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[C64]> = guards.iter().map(|g| g.as_slice()).collect();
        gather_idler_tile(&views, self.grid.n(), row0, rows, out);
        Ok(())
    }

    fn write_idler_rows(&self, row0: usize, rows: usize, data: &[C64]) -> Result<()> {
        let mut guards = self
            .rows
            .iter()
            .map(|r| r.write().map_err(|_| poisoned()))
            .collect::<Result<Vec<_>>>()?;
        let mut views: Vec<&mut [C64]> = guards.iter_mut().map(|g| g.as_mut_slice()).collect();
        scatter_idler_tile(&mut views, self.grid.n(), row0, rows, data);
        Ok(())
    }
}

/// Free bytes available to unprivileged writers on the filesystem of `path`.
pub fn available_space(path: &Path) -> Result<u64> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let c = CString::new(path.as_os_str().as_bytes())
        .map_err(|_| Error::config(format!("cache path {} contains a NUL byte", path.display())))?;
    let mut st: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `st` a writable statvfs.
    let rc = unsafe { libc::statvfs(c.as_ptr(), &mut st) };
    if rc != 0 {
        return Err(std::io::Error::last_os_error().into());
    }
    Ok(st.f_bavail as u64 * st.f_frsize as u64)
}

/// A private, run-scoped cache directory. Removed with everything in it when
/// the last store referencing it is dropped.
#[derive(Debug)]
pub struct CacheSession {
    dir: PathBuf,
    limit: Option<u64>,
    used: AtomicU64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    n: usize,
    extent: f64,
    bytes_per_row: u64,
    stores: &'a [String],
}

impl CacheSession {
    /// Creates `<parent>/biphoton-<pid>-<nonce>` with owner-only permissions
    /// after checking that `required` bytes are free.
    pub fn create(parent: &Path, required: u64, limit: Option<u64>) -> Result<Arc<Self>> {
        fs::create_dir_all(parent)?;
        let available = available_space(parent)?;
        if available < required {
            return Err(Error::InsufficientSpace {
                path: parent.display().to_string(),
                required,
                available,
            });
        }
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let nonce = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.subsec_nanos())
            .unwrap_or(0);
        let dir = parent.join(format!(
            "biphoton-{}-{}-{nonce:08x}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::SeqCst)
        ));
        fs::DirBuilder::new().mode(0o700).create(&dir)?;
        Ok(Arc::new(Self {
            dir,
            limit,
            used: AtomicU64::new(0),
        }))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::SeqCst)
    }

    fn reserve(&self, bytes: u64) -> Result<()> {
        let mut cur = self.used.load(Ordering::SeqCst);
        loop {
            let next = cur + bytes;
            if let Some(limit) = self.limit {
                if next > limit {
                    return Err(Error::CacheFull { attempted: next, limit });
                }
            }
            match self
                .used
                .compare_exchange(cur, next, Ordering::SeqCst, Ordering::SeqCst)
            {
                Ok(_) => return Ok(()),
                Err(actual) => cur = actual,
            }
        }
    }

    fn write_manifest(&self, grid: &TransverseGrid, stores: &[String]) -> Result<()> {
        let m = Manifest {
            n: grid.n(),
            extent: grid.extent(),
            bytes_per_row: row_bytes(grid),
            stores,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Numerical(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

impl Drop for CacheSession {
    fn drop(&mut self) {
        if let Err(e) = fs::remove_dir_all(&self.dir) {
            log::warn!("could not remove cache directory {}: {e}", self.dir.display());
        }
    }
}

fn row_bytes(grid: &TransverseGrid) -> u64 {
    (grid.n() * grid.n2()) as u64 * BYTES_PER_VALUE
}

/// Field stored as one file per signal row inside a [`CacheSession`].
/// Idler tiles are gathered with strided positioned reads, so the transpose
/// between signal-side and idler-side passes happens in the I/O itself.
pub struct DiskStore {
    grid: TransverseGrid,
    files: Vec<File>,
    written: Vec<AtomicBool>,
    session: Arc<CacheSession>,
}

impl DiskStore {
    pub fn create(
        session: &Arc<CacheSession>,
        grid: TransverseGrid,
        label: &str,
        all_labels: &[String],
    ) -> Result<Self> {
        let files = (0..grid.n())
            .map(|r| {
                OpenOptions::new()
                    .read(true)
                    .write(true)
                    .create_new(true)
                    .mode(0o600)
                    .open(session.dir.join(format!("{label}-row{r:05}.bin")))
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        session.write_manifest(&grid, all_labels)?;
        Ok(Self {
            grid,
            written: (0..grid.n()).map(|_| AtomicBool::new(false)).collect(),
            files,
            session: Arc::clone(session),
        })
    }

    fn claim_row(&self, r: usize) -> Result<()> {
        if !self.written[r].load(Ordering::SeqCst) {
            self.session.reserve(row_bytes(&self.grid))?;
            self.written[r].store(true, Ordering::SeqCst);
        }
        Ok(())
    }

    fn check_row(&self, r: usize) -> Result<()> {
        if !self.written[r].load(Ordering::SeqCst) {
            return Err(Error::contract(format!("cache row {r} read before it was written")));
        }
        Ok(())
    }
}

fn as_bytes(v: &[C64]) -> &[u8] {
    bytemuck::cast_slice(v)
}

fn as_bytes_mut(v: &mut [C64]) -> &mut [u8] {
    bytemuck::cast_slice_mut(v)
}

impl FieldStore for DiskStore {
    fn grid(&self) -> &TransverseGrid {
        &self.grid
    }

    fn read_signal_rows(&self, row0: usize, rows: usize, out: &mut [C64]) -> Result<()> {
        let len = self.grid.n() * self.grid.n2();
        for (k, chunk) in out.chunks_exact_mut(len).take(rows).enumerate() {
            self.check_row(row0 + k)?;
            self.files[row0 + k].read_exact_at(as_bytes_mut(chunk), 0)?;
        }
        Ok(())
    }

    fn write_signal_rows(&self, row0: usize, rows: usize, data: &[C64]) -> Result<()> {
        let len = self.grid.n() * self.grid.n2();
        for (k, chunk) in data.chunks_exact(len).take(rows).enumerate() {
            self.claim_row(row0 + k)?;
            self.files[row0 + k].write_all_at(as_bytes(chunk), 0)?;
        }
        Ok(())
    }

    fn read_idler_rows(&self, row0: usize, rows: usize, out: &mut [C64]) -> Result<()> {
        let n = self.grid.n();
        let n2 = self.grid.n2();
        let width = rows * n;
        let mut run = vec![C64::new(0.0, 0.0); width];
        for (r, file) in self.files.iter().enumerate() {
            self.check_row(r)?;
            for ix in 0..n {
                let offset = ((ix * n2 + row0 * n) as u64) * BYTES_PER_VALUE;
                file.read_exact_at(as_bytes_mut(&mut run), offset)?;
                let ps = r * n + ix;
                for (j, z) in run.iter().enumerate() {
                    out[j * n2 + ps] = *z;
                }
            }
        }
        Ok(())
    }

    fn write_idler_rows(&self, row0: usize, rows: usize, data: &[C64]) -> Result<()> {
        let n = self.grid.n();
        let n2 = self.grid.n2();
        let width = rows * n;
        let mut run = vec![C64::new(0.0, 0.0); width];
        for (r, file) in self.files.iter().enumerate() {
            self.claim_row(r)?;
            for ix in 0..n {
                let ps = r * n + ix;
                for (j, z) in run.iter_mut().enumerate() {
                    *z = data[j * n2 + ps];
                }
                let offset = ((ix * n2 + row0 * n) as u64) * BYTES_PER_VALUE;
                file.write_all_at(as_bytes(&run), offset)?;
            }
        }
        Ok(())
    }

    fn prefers_prefetch(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::idler_slab_rows;

    fn sample(grid: &TransverseGrid) -> Vec<Vec<C64>> {
        let n = grid.n();
        let n2 = grid.n2();
        (0..n)
            .map(|r| {
                (0..n * n2)
                    .map(|k| {
                        let v = (r * n * n2 + k) as f64;
                        C64::new(v, -0.5 * v)
                    })
                    .collect()
            })
            .collect()
    }

    fn exercise(store: &dyn FieldStore, rows: &[Vec<C64>]) {
        let g = *store.grid();
        let n = g.n();
        let n2 = g.n2();
        store.write_signal_rows(0, n, &rows.concat()).unwrap();
        let h = idler_slab_rows(n) + 1;
        let mut tile = vec![C64::new(0.0, 0.0); h * n * n2];
        let mut row0 = 0;
        while row0 < n {
            let count = h.min(n - row0);
            let t = &mut tile[..count * n * n2];
            store.read_idler_rows(row0, count, t).unwrap();
            for j in 0..count * n {
                let pi = row0 * n + j;
                for ps in 0..n2 {
                    assert_eq!(t[j * n2 + ps], rows[ps / n][(ps % n) * n2 + pi]);
                }
            }
            for z in t.iter_mut() {
                *z = -*z;
            }
            store.write_idler_rows(row0, count, t).unwrap();
            row0 += count;
        }
        let mut back = vec![C64::new(0.0, 0.0); n * n2];
        for (r, row) in rows.iter().enumerate() {
            store.read_signal_rows(r, 1, &mut back).unwrap();
            for (a, b) in back.iter().zip(row) {
                assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn memory_store_tiles() {
        let g = TransverseGrid::new(8, 1.0).unwrap();
        let rows = sample(&g);
        exercise(&MemoryStore::zeros(g), &rows);
    }

    #[test]
    fn disk_store_tiles_and_cleanup() {
        let tmp = tempfile::tempdir().unwrap();
        let g = TransverseGrid::new(8, 1.0).unwrap();
        let rows = sample(&g);
        let dir;
        {
            let session = CacheSession::create(tmp.path(), 0, None).unwrap();
            dir = session.dir().to_path_buf();
            let store = DiskStore::create(&session, g, "main", &["main".into()]).unwrap();
            exercise(&store, &rows);
            assert!(dir.join("manifest.json").exists());
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&dir).unwrap().permissions().mode() & 0o777, 0o700);
        }
        assert!(!dir.exists());
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    }

    #[test]
    fn cache_limit_is_enforced() {
        let tmp = tempfile::tempdir().unwrap();
        let g = TransverseGrid::new(8, 1.0).unwrap();
        let limit = crate::field::field_bytes(8) - row_bytes(&g);
        let session = CacheSession::create(tmp.path(), 0, Some(limit)).unwrap();
        let store = DiskStore::create(&session, g, "main", &["main".into()]).unwrap();
        let rows = sample(&g);
        for (r, row) in rows.iter().take(7).enumerate() {
            store.write_signal_rows(r, 1, row).unwrap();
        }
        let err = store.write_signal_rows(7, 1, &rows[7]).unwrap_err();
        assert!(matches!(err, Error::CacheFull { .. }));
    }

    #[test]
    fn unwritten_rows_are_not_readable() {
        let tmp = tempfile::tempdir().unwrap();
        let g = TransverseGrid::new(8, 1.0).unwrap();
        let session = CacheSession::create(tmp.path(), 0, None).unwrap();
        let store = DiskStore::create(&session, g, "main", &["main".into()]).unwrap();
        let mut buf = vec![C64::new(0.0, 0.0); 512];
        assert!(store.read_signal_rows(0, 1, &mut buf).is_err());
    }

    #[test]
    fn free_space_precheck() {
        let tmp = tempfile::tempdir().unwrap();
        let err = CacheSession::create(tmp.path(), u64::MAX, None).unwrap_err();
        assert!(matches!(err, Error::InsufficientSpace { .. }));
    }

    #[test]
    fn meter_tracks_peak() {
        let m = Arc::new(MemoryMeter::default());
        {
            let _a = m.buffer(10);
            let _b = m.buffer(5);
        }
        let _c = m.buffer(3);
        assert_eq!(m.peak(), 15 * BYTES_PER_VALUE);
    }
}
