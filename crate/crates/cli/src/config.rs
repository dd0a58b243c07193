//! Experiment configuration files.
//!
//! Flat sectioned `key = value` text. Every physical quantity carries a unit
//! suffix (`105um`, `42.4deg`, `3GB`); a bare number where a unit is expected
//! is rejected. Unknown sections and keys are errors. Files may reference
//! other files (a Sellmeier table, a second experiment) by a path relative to
//! the referencing file; names of shipped configs resolve to the copies
//! built into the binary when no such file exists.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use biphoton_core::analysis::FitOptions;
use biphoton_core::apertures::MaskShape;
use biphoton_core::phase_matching::{builtin_materials, find_material, parse_material_table, Beam};
use biphoton_core::{
    ApertureMask, Axis, Domain, DoubleSlit, ExecMode, ExecutionPlan, MaskSet, PhaseMatchModel, Photon, PmType,
    PumpKind, PumpSpec, Setup, SliceRequest, Stage, TransverseGrid,
};
use ini::{Ini, ParseOption};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Configs shipped with the binary, by file name.
pub const SHIPPED: &[(&str, &str)] = &[
    ("experiment1.cfg", include_str!("../configs/experiment1.cfg")),
    ("experiment2a.cfg", include_str!("../configs/experiment2a.cfg")),
    ("experiment2b.cfg", include_str!("../configs/experiment2b.cfg")),
    ("sweep.cfg", include_str!("../configs/sweep.cfg")),
    ("thin_validation.cfg", include_str!("../configs/thin_validation.cfg")),
    ("plane_wave_type1.cfg", include_str!("../configs/plane_wave_type1.cfg")),
    ("smoke.cfg", include_str!("../configs/smoke.cfg")),
];

pub fn shipped(name: &str) -> Option<&'static str> {
    SHIPPED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

const LENGTH: &[(&str, f64)] = &[
    ("nm", 1e-9),
    ("um", 1e-6),
    ("µm", 1e-6),
    ("mm", 1e-3),
    ("cm", 1e-2),
    ("m", 1.0),
];
const ANGLE: &[(&str, f64)] = &[("deg", std::f64::consts::PI / 180.0), ("mrad", 1e-3), ("rad", 1.0)];
const WAVENUMBER: &[(&str, f64)] = &[("rad/um", 1e6), ("rad/mm", 1e3), ("rad/m", 1.0)];
const BYTES: &[(&str, f64)] = &[
    ("KiB", 1024.0),
    ("MiB", 1048576.0),
    ("GiB", 1073741824.0),
    ("TiB", 1099511627776.0),
    ("kB", 1e3),
    ("KB", 1e3),
    ("MB", 1e6),
    ("GB", 1e9),
    ("TB", 1e12),
    ("B", 1.0),
];

fn units(table: &[(&str, f64)]) -> String {
    table.iter().map(|(u, _)| *u).collect::<Vec<_>>().join(", ")
}

/// `num × scale`; decimal prefixes shift the exponent so that `105um` is
/// exactly `105e-6`.
fn scaled(num: &str, scale: f64) -> Option<f64> {
    let v = num.parse::<f64>().ok()?;
    let exp = scale.log10().round();
    if 10f64.powi(exp as i32) != scale {
        return Some(v * scale);
    }
    let (mantissa, e) = match num.split_once(['e', 'E']) {
        Some((m, e)) => (m, e.parse::<i32>().ok()?),
        None => (num, 0),
    };
    format!("{mantissa}e{}", e + exp as i32).parse().ok()
}

/// Parses `<number><unit>` against a unit table, longest suffix first.
fn quantity(text: &str, table: &[(&str, f64)]) -> Option<f64> {
    let t = text.trim();
    let mut sorted: Vec<_> = table.iter().collect();
    sorted.sort_by_key(|(u, _)| std::cmp::Reverse(u.len()));
    for (unit, scale) in sorted {
        if let Some(num) = t.strip_suffix(unit) {
            let num = num.trim();
            // "1e-3m" must not match "m" against the digits of "mm" etc.
            if num.ends_with(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E') {
                continue;
            }
            if let Some(v) = scaled(num, *scale).filter(|v| v.is_finite()) {
                return Some(v);
            }
        }
    }
    None
}

pub fn parse_length(text: &str) -> Option<f64> {
    quantity(text, LENGTH)
}

pub fn parse_bytes(text: &str) -> Option<u64> {
    quantity(text, BYTES).filter(|v| *v >= 0.0).map(|v| v.round() as u64)
}

/// Comma-separated items, each a length or an inclusive range
/// `start:step:stop`.
pub fn parse_positions(text: &str) -> Option<Vec<f64>> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts[..] {
            [a, step, b] => {
                let (a, step, b) = (parse_length(a)?, parse_length(step)?, parse_length(b)?);
                if step == 0.0 || (b - a) * step < 0.0 {
                    return None;
                }
                let count = ((b - a) / step).round() as usize + 1;
                out.extend((0..count).map(|k| a + k as f64 * step));
            }
            [v] => out.push(parse_length(v)?),
            _ => return None,
        }
    }
    Some(out)
}

/// Choice of execution mode; `Auto` picks in core when the field fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    Auto,
    InCore,
    Spill,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionConfig {
    pub mode: ModeChoice,
    pub memory_budget: u64,
    pub cache_dir: PathBuf,
    pub cache_limit: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub stages: Vec<Stage>,
    pub photons: Vec<Photon>,
    pub csv: bool,
    pub binary: bool,
    pub pgm: bool,
    pub slices: Vec<SliceRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub distinguishability: bool,
    pub visibility: bool,
    pub fringe_count: bool,
    /// Signal fibre radius for the detector-response maps.
    pub detector_radius: Option<f64>,
    /// Block-average factor applied after the detector convolution.
    pub downsample: usize,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub idler_radius: f64,
    pub positions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateConfig {
    /// Lattice sizes of the thin-crystal oracle comparisons.
    pub oracle_ns: Vec<usize>,
    pub near_max: f64,
    pub far_max: f64,
    pub consistency_ns: Vec<usize>,
    pub plane_wave: Box<ExperimentConfig>,
    pub plane_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub setup: Setup,
    pub execution: ExecutionConfig,
    pub output: OutputConfig,
    pub analysis: AnalysisConfig,
    pub sweep: Option<SweepConfig>,
    pub validate: Option<ValidateConfig>,
    /// Seed for noise-injection tests; the simulation itself is deterministic.
    pub seed: u64,
    /// SHA-256 of the normalized config text and everything it references.
    pub hash: String,
}

const MASK_KEYS: &[&str] = &[
    "shape",
    "axis",
    "separation",
    "width",
    "radius",
    "width_x",
    "width_y",
    "center_x",
    "center_y",
];

/// Every section and the keys it may hold. Keys valid only for some choices
/// (a mask shape, a pump profile) are caught later as unused.
const SECTIONS: &[(&str, &[&str])] = &[
    ("experiment", &["name", "seed"]),
    ("grid", &["n", "extent"]),
    (
        "pump",
        &[
            "profile",
            "wavelength",
            "width",
            "width_x",
            "width_y",
            "center_x",
            "center_y",
        ],
    ),
    (
        "crystal",
        &[
            "model",
            "table",
            "material",
            "length",
            "cut_angle",
            "type",
            "signal_wavelength",
            "idler_wavelength",
            "extraordinary",
            "walkoff_azimuth",
            "pump_eta",
            "pump_alpha",
            "pump_beta",
            "pump_gamma",
            "pump_n_o",
            "signal_eta",
            "signal_alpha",
            "signal_beta",
            "signal_gamma",
            "signal_n_o",
            "idler_eta",
            "idler_alpha",
            "idler_beta",
            "idler_gamma",
            "idler_n_o",
        ],
    ),
    ("mask.far.signal", MASK_KEYS),
    ("mask.far.idler", MASK_KEYS),
    ("mask.near.signal", MASK_KEYS),
    ("mask.near.idler", MASK_KEYS),
    ("checks", &["strict_resolution"]),
    (
        "execution",
        &["mode", "memory_budget", "cache_dir", "cache_limit", "threads"],
    ),
    ("output", &["stages", "photons", "formats", "slices", "dir"]),
    (
        "analysis",
        &[
            "distinguishability",
            "visibility",
            "fringe_count",
            "detector_radius",
            "downsample",
            "fit_max_iterations",
            "fit_tolerance",
        ],
    ),
    ("sweep", &["positions", "idler_radius"]),
    (
        "validate",
        &[
            "plane_wave",
            "plane_n",
            "oracle_ns",
            "near_max",
            "far_max",
            "consistency_ns",
            "plane_max",
        ],
    ),
];

/// Parsed key/value sections with use tracking, so leftover keys can be
/// reported as unknown.
struct Doc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    used: RefCell<BTreeSet<(String, String)>>,
    base: Option<PathBuf>,
    /// Canonical text of this file and its references, fed to the hash.
    canon: RefCell<String>,
}

impl Doc {
    fn parse(text: &str, base: Option<PathBuf>) -> Result<Self> {
        let opt = ParseOption {
            enabled_quote: false,
            enabled_escape: false,
            ..ParseOption::default()
        };
        let ini = Ini::load_from_str_opt(text, opt).map_err(|e| CliError::config(format!("syntax: {e}")))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (sec, props) in ini.iter() {
            let name = match sec {
                Some(s) => s.trim().to_string(),
                None if props.is_empty() => continue,
                None => {
                    let key = props.iter().next().map(|(k, _)| k).unwrap_or_default();
                    return Err(CliError::config(format!("key '{key}' appears before any [section]")));
                }
            };
            let Some((_, known)) = SECTIONS.iter().find(|(s, _)| *s == name) else {
                return Err(CliError::config(format!("unknown section [{name}]")));
            };
            let entry = sections.entry(name.clone()).or_default();
            for (k, v) in props.iter() {
                if !known.contains(&k.trim()) {
                    return Err(CliError::config(format!("unknown key [{name}] {}", k.trim())));
                }
                if entry.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                    return Err(CliError::config(format!("[{name}] {k} is given twice")));
                }
            }
        }
        let mut canon = String::new();
        for (s, kv) in &sections {
            canon.push_str(&format!("[{s}]\n"));
            for (k, v) in kv {
                canon.push_str(&format!("{k}={v}\n"));
            }
        }
        Ok(Self {
            sections,
            used: RefCell::default(),
            base,
            canon: RefCell::new(canon),
        })
    }

    fn has(&self, sec: &str) -> bool {
        self.sections.contains_key(sec)
    }

    fn raw(&self, sec: &str, key: &str) -> Option<&str> {
        let v = self.sections.get(sec)?.get(key)?;
        self.used.borrow_mut().insert((sec.to_string(), key.to_string()));
        Some(v.as_str())
    }

    fn require(&self, sec: &str, key: &str) -> Result<&str> {
        self.raw(sec, key)
            .ok_or_else(|| CliError::config(format!("[{sec}] {key} is required")))
    }

    fn bad(sec: &str, key: &str, value: &str, want: &str) -> CliError {
        CliError::config(format!("[{sec}] {key} = '{value}': expected {want}"))
    }

    fn unit(&self, sec: &str, key: &str, table: &[(&str, f64)], what: &str) -> Result<Option<f64>> {
        self.raw(sec, key)
            .map(|v| {
                quantity(v, table)
                    .ok_or_else(|| Self::bad(sec, key, v, &format!("{what} with a unit suffix ({})", units(table))))
            })
            .transpose()
    }

    fn length(&self, sec: &str, key: &str) -> Result<Option<f64>> {
        self.unit(sec, key, LENGTH, "a length")
    }

    fn req_length(&self, sec: &str, key: &str) -> Result<f64> {
        self.require(sec, key)?;
        Ok(self.length(sec, key)?.expect("present"))
    }

    fn angle(&self, sec: &str, key: &str) -> Result<Option<f64>> {
        self.unit(sec, key, ANGLE, "an angle")
    }

    fn bytes(&self, sec: &str, key: &str) -> Result<Option<u64>> {
        Ok(self.unit(sec, key, BYTES, "a byte count")?.map(|v| v.round() as u64))
    }

    fn number<T: std::str::FromStr>(&self, sec: &str, key: &str, want: &str) -> Result<Option<T>> {
        self.raw(sec, key)
            .map(|v| v.parse::<T>().map_err(|_| Self::bad(sec, key, v, want)))
            .transpose()
    }

    fn flag(&self, sec: &str, key: &str, default: bool) -> Result<bool> {
        match self.raw(sec, key) {
            None => Ok(default),
            Some("true" | "yes" | "on") => Ok(true),
            Some("false" | "no" | "off") => Ok(false),
            Some(v) => Err(Self::bad(sec, key, v, "true or false")),
        }
    }

    fn list(&self, sec: &str, key: &str) -> Option<Vec<String>> {
        self.raw(sec, key).map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    fn sizes(&self, sec: &str, key: &str) -> Result<Vec<usize>> {
        let v = self.require(sec, key)?;
        v.split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Self::bad(sec, key, v, "a comma-separated list of lattice sizes"))
    }

    /// Reads a referenced file relative to this one, falling back to the
    /// shipped copy of the same name.
    fn reference(&self, sec: &str, key: &str) -> Result<Option<(String, Option<PathBuf>)>> {
        let Some(name) = self.raw(sec, key) else {
            return Ok(None);
        };
        let path = match &self.base {
            Some(b) => b.join(name),
            None => PathBuf::from(name),
        };
        let (text, base) = match std::fs::read_to_string(&path) {
            Ok(t) => (t, path.parent().map(Path::to_path_buf)),
            Err(e) => match Path::new(name).file_name().and_then(|f| shipped(&f.to_string_lossy())) {
                Some(t) => (t.to_string(), None),
                None => {
                    return Err(CliError::config(format!(
                        "[{sec}] {key}: cannot read '{}': {e}",
                        path.display()
                    )))
                }
            },
        };
        self.canon.borrow_mut().push_str(&format!("<{sec}.{key}>\n{text}\n"));
        Ok(Some((text, base)))
    }

    fn finish(&self) -> Result<String> {
        let used = self.used.borrow();
        for (s, kv) in &self.sections {
            for k in kv.keys() {
                if !used.contains(&(s.clone(), k.clone())) {
                    return Err(CliError::config(format!("unknown key [{s}] {k}")));
                }
            }
        }
        let digest = Sha256::digest(self.canon.borrow().as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn core(e: biphoton_core::Error, sec: &str) -> CliError {
    CliError::config(format!("[{sec}] {e}"))
}

fn pump(doc: &Doc) -> Result<PumpSpec> {
    let s = "pump";
    let profile = doc.require(s, "profile")?;
    let wavelength = doc.req_length(s, "wavelength")?;
    let kind = match profile {
        "gaussian" => PumpKind::Gaussian,
        "tem01" => PumpKind::Tem01,
        "plane_wave" => PumpKind::PlaneWave,
        v => return Err(Doc::bad(s, "profile", v, "gaussian, tem01 or plane_wave")),
    };
    let mut spec = PumpSpec::plane_wave(wavelength);
    spec.kind = kind;
    if kind != PumpKind::PlaneWave {
        let w = doc.length(s, "width")?;
        let wx = doc.length(s, "width_x")?.or(w);
        let wy = doc.length(s, "width_y")?.or(w);
        spec.width_x = wx.ok_or_else(|| CliError::config("[pump] width (or width_x) is required"))?;
        spec.width_y = wy.ok_or_else(|| CliError::config("[pump] width (or width_y) is required"))?;
    }
    spec.center = [
        doc.length(s, "center_x")?.unwrap_or(0.0),
        doc.length(s, "center_y")?.unwrap_or(0.0),
    ];
    spec.validate().map_err(|e| core(e, s))?;
    Ok(spec)
}

fn crystal(doc: &Doc, pump_wavelength: f64) -> Result<Option<PhaseMatchModel>> {
    let s = "crystal";
    if !doc.has(s) || doc.raw(s, "model") == Some("thin") {
        return Ok(None);
    }
    let table = match doc.reference(s, "table")? {
        Some((text, _)) => parse_material_table(&text).map_err(|e| core(e, s))?,
        None => builtin_materials(),
    };
    let material = find_material(&table, doc.raw(s, "material").unwrap_or("bbo")).map_err(|e| core(e, s))?;
    let length = doc.req_length(s, "length")?;
    doc.require(s, "cut_angle")?;
    let cut = doc.angle(s, "cut_angle")?.expect("present");
    let pm = match doc.require(s, "type")? {
        "I" | "i" => PmType::TypeI,
        "II" | "ii" => PmType::TypeII,
        v => return Err(Doc::bad(s, "type", v, "I or II")),
    };
    let ls = doc.length(s, "signal_wavelength")?.unwrap_or(2.0 * pump_wavelength);
    let li = doc.length(s, "idler_wavelength")?.unwrap_or(2.0 * pump_wavelength);
    let mut m = PhaseMatchModel::with_wavelengths(&material, length, cut, pm, pump_wavelength, ls, li)
        .map_err(|e| core(e, s))?;
    m.extraordinary = match doc.raw(s, "extraordinary").unwrap_or("idler") {
        "idler" => Beam::Idler,
        "signal" => Beam::Signal,
        v => return Err(Doc::bad(s, "extraordinary", v, "signal or idler")),
    };
    m.walkoff_azimuth = doc.angle(s, "walkoff_azimuth")?.unwrap_or(0.0);
    // explicit coefficients, e.g. `signal_alpha = 0.07`, replace the derived ones
    for (beam, c) in [
        ("pump", &mut m.pump),
        ("signal", &mut m.signal),
        ("idler", &mut m.idler),
    ] {
        let slots = [
            ("eta", &mut c.eta),
            ("alpha", &mut c.alpha),
            ("beta", &mut c.beta),
            ("gamma", &mut c.gamma),
            ("n_o", &mut c.n_o),
        ];
        for (name, slot) in slots {
            if let Some(v) = doc.number::<f64>(s, &format!("{beam}_{name}"), "a dimensionless number")? {
                *slot = v;
            }
        }
    }
    m.validate().map_err(|e| core(e, s))?;
    Ok(Some(m))
}

fn mask(doc: &Doc, plane: Domain, photon: Photon) -> Result<ApertureMask> {
    let s = format!(
        "mask.{}.{}",
        if plane == Domain::Position { "near" } else { "far" },
        photon.name()
    );
    let s = s.as_str();
    if !doc.has(s) {
        return Ok(ApertureMask::identity(plane, photon));
    }
    let (table, what) = match plane {
        Domain::Position => (LENGTH, "a length"),
        Domain::Momentum => (WAVENUMBER, "a wavenumber"),
    };
    let q = |key: &str| -> Result<f64> {
        doc.require(s, key)?;
        Ok(doc.unit(s, key, table, what)?.expect("present"))
    };
    let center = [
        doc.unit(s, "center_x", table, what)?.unwrap_or(0.0),
        doc.unit(s, "center_y", table, what)?.unwrap_or(0.0),
    ];
    let shape = match doc.require(s, "shape")? {
        "identity" => MaskShape::Identity,
        "double_slit" => {
            let axis = match doc.raw(s, "axis").unwrap_or("y") {
                "x" => Axis::X,
                "y" => Axis::Y,
                v => return Err(Doc::bad(s, "axis", v, "x or y")),
            };
            let mut slit = DoubleSlit::new(q("separation")?, q("width")?, axis);
            slit.center = center;
            MaskShape::DoubleSlit(slit)
        }
        "circle" => MaskShape::Circular {
            radius: q("radius")?,
            center,
        },
        "rectangle" => MaskShape::Rectangular {
            width_x: q("width_x")?,
            width_y: q("width_y")?,
            center,
        },
        v => return Err(Doc::bad(s, "shape", v, "identity, double_slit, circle or rectangle")),
    };
    Ok(ApertureMask::new(shape, plane, photon))
}

fn execution(doc: &Doc) -> Result<ExecutionConfig> {
    let s = "execution";
    let mode = match doc.raw(s, "mode").unwrap_or("auto") {
        "auto" => ModeChoice::Auto,
        "in_core" => ModeChoice::InCore,
        "spill" | "spill_to_disk" => ModeChoice::Spill,
        v => return Err(Doc::bad(s, "mode", v, "auto, in_core or spill")),
    };
    Ok(ExecutionConfig {
        mode,
        memory_budget: doc.bytes(s, "memory_budget")?.unwrap_or(4_000_000_000),
        cache_dir: doc
            .raw(s, "cache_dir")
            .map(PathBuf::from)
            .unwrap_or_else(std::env::temp_dir),
        cache_limit: doc.bytes(s, "cache_limit")?,
        threads: doc.number(s, "threads", "a thread count")?,
    })
}

fn photon(name: &str) -> Option<Photon> {
    match name {
        "signal" => Some(Photon::Signal),
        "idler" => Some(Photon::Idler),
        _ => None,
    }
}

fn slice(text: &str) -> Option<SliceRequest> {
    let p: Vec<&str> = text.split(':').map(str::trim).collect();
    if p.len() != 4 {
        return None;
    }
    Some(SliceRequest {
        stage: Stage::parse(p[0])?,
        fixed: photon(p[1])?,
        ix: p[2].parse().ok()?,
        iy: p[3].parse().ok()?,
    })
}

fn output(doc: &Doc, name: &str) -> Result<OutputConfig> {
    let s = "output";
    let stages = match doc.list(s, "stages") {
        None => Stage::ALL.to_vec(),
        Some(v) if v == ["all"] => Stage::ALL.to_vec(),
        Some(v) => v
            .iter()
            .map(|t| Stage::parse(t).ok_or_else(|| Doc::bad(s, "stages", t, "stage names such as p1_pre_t or p3")))
            .collect::<Result<_>>()?,
    };
    let photons = match doc.list(s, "photons") {
        None => vec![Photon::Signal, Photon::Idler],
        Some(v) => v
            .iter()
            .map(|t| photon(t).ok_or_else(|| Doc::bad(s, "photons", t, "signal or idler")))
            .collect::<Result<_>>()?,
    };
    let formats = doc
        .list(s, "formats")
        .unwrap_or_else(|| vec!["csv".into(), "bin".into(), "pgm".into()]);
    for f in &formats {
        if !["csv", "bin", "pgm"].contains(&f.as_str()) {
            return Err(Doc::bad(s, "formats", f, "csv, bin or pgm"));
        }
    }
    let slices = doc
        .list(s, "slices")
        .unwrap_or_default()
        .iter()
        .map(|t| slice(t).ok_or_else(|| Doc::bad(s, "slices", t, "stage:fixed_photon:ix:iy")))
        .collect::<Result<_>>()?;
    Ok(OutputConfig {
        dir: doc
            .raw(s, "dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new("out").join(name)),
        stages,
        photons,
        csv: formats.iter().any(|f| f == "csv"),
        binary: formats.iter().any(|f| f == "bin"),
        pgm: formats.iter().any(|f| f == "pgm"),
        slices,
    })
}

fn analysis(doc: &Doc) -> Result<AnalysisConfig> {
    let s = "analysis";
    let defaults = FitOptions::default();
    Ok(AnalysisConfig {
        distinguishability: doc.flag(s, "distinguishability", false)?,
        visibility: doc.flag(s, "visibility", false)?,
        fringe_count: doc.flag(s, "fringe_count", false)?,
        detector_radius: doc.length(s, "detector_radius")?,
        downsample: doc.number(s, "downsample", "a positive integer")?.unwrap_or(1),
        fit: FitOptions {
            max_iterations: doc
                .number(s, "fit_max_iterations", "an iteration count")?
                .unwrap_or(defaults.max_iterations),
            tolerance: doc
                .number(s, "fit_tolerance", "a number")?
                .unwrap_or(defaults.tolerance),
        },
    })
}

fn sweep(doc: &Doc) -> Result<Option<SweepConfig>> {
    let s = "sweep";
    if !doc.has(s) {
        return Ok(None);
    }
    let v = doc.require(s, "positions")?;
    let positions = parse_positions(v)
        .ok_or_else(|| Doc::bad(s, "positions", v, "comma-separated lengths or ranges 'start:step:stop'"))?;
    Ok(Some(SweepConfig {
        idler_radius: doc.req_length(s, "idler_radius")?,
        positions,
    }))
}

fn validate(doc: &Doc) -> Result<Option<ValidateConfig>> {
    let s = "validate";
    if !doc.has(s) {
        return Ok(None);
    }
    let num = |key: &str| -> Result<f64> {
        doc.require(s, key)?;
        Ok(doc.number(s, key, "a number")?.expect("present"))
    };
    let (text, base) = doc
        .reference(s, "plane_wave")?
        .ok_or_else(|| CliError::config("[validate] plane_wave is required"))?;
    let mut plane = ExperimentConfig::parse(&text, base.as_deref())
        .map_err(|e| CliError::config(format!("[validate] plane_wave: {e}")))?;
    if let Some(n) = doc.number::<usize>(s, "plane_n", "a lattice size")? {
        plane.setup = plane.setup.with_n(n).map_err(|e| core(e, s))?;
    }
    Ok(Some(ValidateConfig {
        oracle_ns: doc.sizes(s, "oracle_ns")?,
        near_max: num("near_max")?,
        far_max: num("far_max")?,
        consistency_ns: doc.sizes(s, "consistency_ns")?,
        plane_wave: Box::new(plane),
        plane_max: num("plane_max")?,
    }))
}

impl ExperimentConfig {
    /// Parses config text; references resolve relative to `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let doc = Doc::parse(text, base.map(Path::to_path_buf))?;
        let name = doc.raw("experiment", "name").unwrap_or("experiment").to_string();
        let seed = doc.number("experiment", "seed", "an integer")?.unwrap_or(0);
        let n = doc
            .number::<usize>("grid", "n", "an even lattice size")?
            .ok_or_else(|| CliError::config("[grid] n is required"))?;
        let grid = TransverseGrid::new(n, doc.req_length("grid", "extent")?).map_err(|e| core(e, "grid"))?;
        let pump = pump(&doc)?;
        let crystal = crystal(&doc, pump.wavelength)?;
        let masks = MaskSet {
            far_signal: mask(&doc, Domain::Momentum, Photon::Signal)?,
            far_idler: mask(&doc, Domain::Momentum, Photon::Idler)?,
            near_signal: mask(&doc, Domain::Position, Photon::Signal)?,
            near_idler: mask(&doc, Domain::Position, Photon::Idler)?,
        };
        let mut setup = Setup::new(grid, pump, crystal).with_masks(masks);
        setup.lenient_resolution = !doc.flag("checks", "strict_resolution", true)?;
        let cfg = ExperimentConfig {
            execution: execution(&doc)?,
            output: output(&doc, &name)?,
            analysis: analysis(&doc)?,
            sweep: sweep(&doc)?,
            validate: validate(&doc)?,
            name,
            setup,
            seed,
            hash: String::new(),
        };
        let hash = doc.finish()?;
        Ok(ExperimentConfig { hash, ..cfg })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// A config built into the binary, e.g. `"experiment1.cfg"`.
    pub fn shipped(name: &str) -> Result<Self> {
        let text = shipped(name).ok_or_else(|| CliError::config(format!("no shipped config named '{name}'")))?;
        Self::parse(text, None)
    }

    /// Execution plan for a run holding `fields` copies of the field.
    pub fn plan(&self, fields: u64) -> ExecutionPlan {
        let e = &self.execution;
        let n = self.setup.grid.n();
        let mut plan = match e.mode {
            ModeChoice::InCore => ExecutionPlan::in_core(e.memory_budget),
            ModeChoice::Spill => ExecutionPlan::spill(e.memory_budget, &e.cache_dir),
            ModeChoice::Auto => ExecutionPlan::auto(n, fields, e.memory_budget, &e.cache_dir),
        };
        plan.cache_limit = e.cache_limit;
        plan.threads = e.threads;
        if plan.mode == ExecMode::InCore {
            plan.cache_dir = None;
        }
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn units() {
        assert_eq!(parse_length("105um"), Some(105e-6));
        assert_eq!(parse_length("105 µm"), Some(105e-6));
        assert_eq!(parse_length("2mm"), Some(2e-3));
        assert_eq!(parse_length("404nm"), Some(404e-9));
        assert_eq!(parse_length("1e-3m"), Some(1e-3));
        assert_eq!(parse_length("3"), None);
        assert_eq!(parse_length("3deg"), None);
        assert_eq!(parse_bytes("4GB"), Some(4_000_000_000));
        assert_eq!(parse_bytes("2GiB"), Some(2 << 30));
        assert!((quantity("42.4deg", ANGLE).unwrap() - 42.4f64.to_radians()).abs() < 1e-15);
        assert_eq!(quantity("2rad/um", WAVENUMBER), Some(2e6));
    }

    #[test]
    fn position_ranges() {
        let p = parse_positions("-60um:5um:0um").unwrap();
        assert_eq!(p.len(), 13);
        assert!((p[0] + 60e-6).abs() < 1e-18 && p[12].abs() < 1e-18);
        assert_eq!(parse_positions("-48um, 0um").unwrap(), vec![-48e-6, 0.0]);
        assert_eq!(parse_positions("").unwrap(), Vec::<f64>::new());
        assert!(parse_positions("0um:-5um:10um").is_none());
        assert!(parse_positions("-48, 0").is_none());
        assert_eq!(parse_positions("-10um:5um:0um, -48um").unwrap().len(), 4);
    }

    #[test]
    fn shipped_configs_parse() {
        for (name, _) in SHIPPED {
            let c = ExperimentConfig::shipped(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.hash.len(), 64);
        }
        let c = ExperimentConfig::shipped("experiment2b.cfg").unwrap();
        let MaskShape::Circular { radius, center } = c.setup.masks.near_idler.shape else {
            panic!("idler mask")
        };
        assert_eq!((radius, center), (14e-6, [0.0, -48e-6]));
        let m = c.setup.crystal.unwrap();
        assert_eq!(m.pm_type, PmType::TypeII);
        assert!((m.walkoff_azimuth - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert!(ExperimentConfig::shipped("thin_validation.cfg")
            .unwrap()
            .setup
            .crystal
            .is_none());
    }

    fn minimal() -> String {
        "[grid]\nn = 16\nextent = 400um\n[pump]\nprofile = gaussian\nwidth = 100um\nwavelength = 404nm\n".into()
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::parse(&minimal().replace("100um", "100"), None).unwrap_err();
        assert!(e.to_string().contains("[pump] width"), "{e}");
        let e = ExperimentConfig::parse(&(minimal() + "colour = red\n"), None).unwrap_err();
        assert!(e.to_string().contains("[pump] colour"), "{e}");
        let e = ExperimentConfig::parse(&minimal().replace("[grid]", "[gird]"), None).unwrap_err();
        assert!(e.to_string().contains("gird"), "{e}");
        let e = ExperimentConfig::parse(&minimal().replace("n = 16\n", ""), None).unwrap_err();
        assert!(e.to_string().contains("[grid] n"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn crystal_coefficients_can_be_pinned() {
        let crystal = "[crystal]\nlength = 2mm\ncut_angle = 42.4deg\ntype = II\n";
        let derived = ExperimentConfig::parse(&(minimal() + crystal), None).unwrap();
        let text = minimal() + crystal + "signal_alpha = 0.07\nidler_eta = 1.6\npump_n_o = 1.69\n";
        let pinned = ExperimentConfig::parse(&text, None).unwrap();
        let (d, p) = (derived.setup.crystal.unwrap(), pinned.setup.crystal.unwrap());
        assert_eq!(p.signal.alpha, 0.07);
        assert_eq!(p.idler.eta, 1.6);
        assert_eq!(p.pump.n_o, 1.69);
        assert_eq!(p.idler.alpha, d.idler.alpha);
        assert_ne!(derived.hash, pinned.hash);
        let e = ExperimentConfig::parse(&(minimal() + crystal + "idler_beta = wide\n"), None).unwrap_err();
        assert!(e.to_string().contains("[crystal] idler_beta"), "{e}");
    }

    #[test]
    fn hash_follows_content_not_layout() {
        let a = ExperimentConfig::parse(&minimal(), None).unwrap();
        let b = ExperimentConfig::parse(&format!("# note\n{}", minimal().replace("n = 16", "n=16")), None).unwrap();
        let c = ExperimentConfig::parse(&minimal().replace("100um", "101um"), None).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
    }

    #[test]
    fn references_resolve_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let table =
            "mine o 2.7359 0.01878 0.01822 0.01354 0.22 1.06\nmine e 2.3753 0.01224 0.01667 0.01516 0.22 1.06\n";
        std::fs::write(dir.path().join("t.txt"), table).unwrap();
        let text =
            minimal() + "[crystal]\ntable = t.txt\nmaterial = mine\nlength = 2mm\ncut_angle = 42.4deg\ntype = II\n";
        std::fs::write(dir.path().join("e.cfg"), &text).unwrap();
        let c = ExperimentConfig::load(dir.path().join("e.cfg")).unwrap();
        assert!(c.setup.crystal.is_some());
        std::fs::write(dir.path().join("t.txt"), table.replace("2.7359", "2.7360")).unwrap();
        assert_ne!(ExperimentConfig::load(dir.path().join("e.cfg")).unwrap().hash, c.hash);
    }

    proptest! {
        #[test]
        fn lengths_round_trip(v in -1e3f64..1e3, unit in 0usize..4) {
            let (u, s) = [("nm", 1e-9), ("um", 1e-6), ("mm", 1e-3), ("m", 1.0)][unit];
            let parsed = parse_length(&format!("{v}{u}")).unwrap();
            prop_assert!((parsed - v * s).abs() <= 1e-15 * (v * s).abs());
        }
    }
}
