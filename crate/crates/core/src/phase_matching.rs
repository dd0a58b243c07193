//! Longitudinal wavevectors in a uniaxial crystal and the phase mismatch Δk_z.
//!
//! Extraordinary beams use the paraxial expansion
//! `k_z ≈ α u + ηK − (β² u² + γ² v²) / (2ηK)`, where `u` is the transverse
//! momentum along the walk-off direction, `v` the orthogonal component and
//! `K = ω / c₀` the vacuum wavenumber. Ordinary beams use
//! `k_z ≈ n_o K − |q|² / (2 n_o K)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const BUILTIN_TABLE: &str = include_str!("materials.txt");

/// Physics-convention sinc, `sin(x) / x` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Vacuum wavenumber `ω / c₀` of light at `wavelength`.
pub fn wavenumber(wavelength: f64) -> f64 {
    2.0 * PI / wavelength
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sellmeier {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    /// Validity range in µm.
    pub range_um: [f64; 2],
}

impl Sellmeier {
    pub fn index(&self, wavelength: f64) -> Result<f64> {
        let l = wavelength * 1e6;
        if !(l >= self.range_um[0] && l <= self.range_um[1]) {
            return Err(Error::config(format!(
                "wavelength {l:.4} µm outside the Sellmeier fit range [{}, {}] µm",
                self.range_um[0], self.range_um[1]
            )));
        }
        let l2 = l * l;
        Ok((self.a + self.b / (l2 - self.c) - self.d * l2).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    pub ordinary: Sellmeier,
    pub extraordinary: Sellmeier,
}

/// Parses a whitespace-separated Sellmeier table: name, `o`/`e`, A, B, C, D,
/// λ_min, λ_max. `#` starts a comment.
pub fn parse_material_table(text: &str) -> Result<Vec<Material>> {
    let mut partial: Vec<(String, Option<Sellmeier>, Option<Sellmeier>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 8 {
            return Err(Error::config(format!(
                "material table line {}: expected 8 columns, found {}",
                lineno + 1,
                cols.len()
            )));
        }
        let num = |k: usize| -> Result<f64> {
            cols[k]
                .parse::<f64>()
                .map_err(|_| Error::config(format!("material table line {}: bad number '{}'", lineno + 1, cols[k])))
        };
        let s = Sellmeier {
            a: num(2)?,
            b: num(3)?,
            c: num(4)?,
            d: num(5)?,
            range_um: [num(6)?, num(7)?],
        };
        let name = cols[0].to_ascii_lowercase();
        let idx = match partial.iter().position(|p| p.0 == name) {
            Some(i) => i,
            None => {
                partial.push((name.clone(), None, None));
                partial.len() - 1
            }
        };
        match cols[1] {
            "o" => partial[idx].1 = Some(s),
            "e" => partial[idx].2 = Some(s),
            other => {
                return Err(Error::config(format!(
                    "material table line {}: polarization must be 'o' or 'e', found '{other}'",
                    lineno + 1
                )))
            }
        }
    }
    partial
        .into_iter()
        .map(|(name, o, e)| match (o, e) {
            (Some(ordinary), Some(extraordinary)) => Ok(Material {
                name,
                ordinary,
                extraordinary,
            }),
            _ => Err(Error::config(format!("material '{name}' needs both 'o' and 'e' rows"))),
        })
        .collect()
}

pub fn builtin_materials() -> Vec<Material> {
    parse_material_table(BUILTIN_TABLE).expect("shipped material table parses")
}

pub fn find_material(table: &[Material], name: &str) -> Result<Material> {
    let key = name.to_ascii_lowercase();
    table
        .iter()
        .find(|m| m.name == key)
        .cloned()
        .ok_or_else(|| Error::config(format!("unknown material '{name}'")))
}

/// Expansion coefficients of one beam at its own frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamCoefficients {
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n_o: f64,
}

impl BeamCoefficients {
    /// Coefficients for which the extraordinary expansion equals the ordinary one.
    pub fn isotropic(n: f64) -> Self {
        Self {
            eta: n,
            alpha: 0.0,
            beta: 1.0,
            gamma: 1.0,
            n_o: n,
        }
    }
}

struct Ellipse {
    a: f64,
    b1: f64,
    ex: f64,
    ey: f64,
}

fn ellipse(theta: f64, n_o: f64, n_e: f64) -> Ellipse {
    let (s, c) = theta.sin_cos();
    let (io, ie) = (1.0 / (n_o * n_o), 1.0 / (n_e * n_e));
    Ellipse {
        a: c * c * io + s * s * ie,
        b1: 2.0 * s * c * (io - ie),
        ex: s * s * io + c * c * ie,
        ey: ie,
    }
}

/// Exact extraordinary `k_z` for transverse momentum `u` in the plane of the
/// optic axis and `v` orthogonal to it, with the optic axis tilted by `theta`
/// from the propagation direction.
pub fn exact_kz_extraordinary(u: f64, v: f64, k0: f64, theta: f64, n_o: f64, n_e: f64) -> f64 {
    let e = ellipse(theta, n_o, n_e);
    let c = e.ex * u * u + e.ey * v * v - k0 * k0;
    let bu = e.b1 * u;
    (-bu + (bu * bu - 4.0 * e.a * c).sqrt()) / (2.0 * e.a)
}

/// Coefficients of the extraordinary expansion from the index ellipse, plus
/// the ordinary index, for light of `wavelength` and cut angle `theta`.
pub fn derive_coefficients(theta: f64, wavelength: f64, material: &Material) -> Result<BeamCoefficients> {
    if !(0.0..=PI / 2.0).contains(&theta) {
        return Err(Error::config(format!("cut angle {theta} rad outside [0, π/2]")));
    }
    let n_o = material.ordinary.index(wavelength)?;
    let n_e = material.extraordinary.index(wavelength)?;
    let e = ellipse(theta, n_o, n_e);
    let eta = e.a.powf(-0.5);
    let alpha = -e.b1 / (2.0 * e.a);
    let beta2 = eta.powi(4) * (e.a * e.ex - e.b1 * e.b1 / 4.0);
    let gamma2 = eta * eta * e.ey;
    Ok(BeamCoefficients {
        eta,
        alpha,
        beta: beta2.sqrt(),
        gamma: gamma2.sqrt(),
        n_o,
    })
}

pub fn kz_extraordinary(qx: f64, qy: f64, k0: f64, c: &BeamCoefficients, azimuth: f64) -> f64 {
    let (s, co) = azimuth.sin_cos();
    let u = co * qx + s * qy;
    let v = -s * qx + co * qy;
    c.alpha * u + c.eta * k0 - (c.beta * c.beta * u * u + c.gamma * c.gamma * v * v) / (2.0 * c.eta * k0)
}

pub fn kz_ordinary(qx: f64, qy: f64, k0: f64, n_o: f64) -> f64 {
    n_o * k0 - (qx * qx + qy * qy) / (2.0 * n_o * k0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    Ordinary,
    Extraordinary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PmType {
    /// e → o + o
    #[serde(rename = "type_i")]
    TypeI,
    /// e → o + e
    #[serde(rename = "type_ii")]
    TypeII,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Beam {
    Pump,
    Signal,
    Idler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMatchModel {
    pub length: f64,
    pub cut_angle: f64,
    pub pm_type: PmType,
    /// Which down-converted beam is extraordinary in type-II.
    pub extraordinary: Beam,
    pub pump_wavelength: f64,
    pub signal_wavelength: f64,
    pub idler_wavelength: f64,
    pub pump: BeamCoefficients,
    pub signal: BeamCoefficients,
    pub idler: BeamCoefficients,
    /// Direction of the walk-off axis in the transverse plane, radians from +x.
    pub walkoff_azimuth: f64,
}

impl PhaseMatchModel {
    /// Degenerate model with coefficients derived from `material`.
    pub fn from_material(
        material: &Material,
        length: f64,
        cut_angle: f64,
        pm_type: PmType,
        pump_wavelength: f64,
    ) -> Result<Self> {
        Self::with_wavelengths(
            material,
            length,
            cut_angle,
            pm_type,
            pump_wavelength,
            2.0 * pump_wavelength,
            2.0 * pump_wavelength,
        )
    }

    pub fn with_wavelengths(
        material: &Material,
        length: f64,
        cut_angle: f64,
        pm_type: PmType,
        pump_wavelength: f64,
        signal_wavelength: f64,
        idler_wavelength: f64,
    ) -> Result<Self> {
        let model = Self {
            length,
            cut_angle,
            pm_type,
            extraordinary: Beam::Idler,
            pump_wavelength,
            signal_wavelength,
            idler_wavelength,
            pump: derive_coefficients(cut_angle, pump_wavelength, material)?,
            signal: derive_coefficients(cut_angle, signal_wavelength, material)?,
            idler: derive_coefficients(cut_angle, idler_wavelength, material)?,
            walkoff_azimuth: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::config("crystal.length must be a positive length"));
        }
        if !(self.cut_angle > 0.0 && self.cut_angle < PI / 2.0) {
            return Err(Error::config(
                "crystal.cut_angle must lie strictly between 0 and 90 degrees",
            ));
        }
        let (p, s, i) = (self.pump_wavelength, self.signal_wavelength, self.idler_wavelength);
        if !(p > 0.0 && s > 0.0 && i > 0.0) {
            return Err(Error::config("wavelengths must be positive"));
        }
        if ((1.0 / p - 1.0 / s - 1.0 / i) * p).abs() > 1e-9 {
            return Err(Error::config(format!(
                "energy conservation violated: 1/λp = {:.6e}, 1/λs + 1/λi = {:.6e}",
                1.0 / p,
                1.0 / s + 1.0 / i
            )));
        }
        if self.pm_type == PmType::TypeII && self.extraordinary == Beam::Pump {
            return Err(Error::config(
                "type-II needs the signal or the idler to be extraordinary",
            ));
        }
        for (name, c) in [("pump", &self.pump), ("signal", &self.signal), ("idler", &self.idler)] {
            if !(0.9..=1.1).contains(&c.beta) || !(0.9..=1.1).contains(&c.gamma) {
                return Err(Error::config(format!(
                    "{name} beta/gamma ({:.4}, {:.4}) outside [0.9, 1.1]",
                    c.beta, c.gamma
                )));
            }
            if !(c.eta > 0.0 && c.n_o > 0.0) {
                return Err(Error::config(format!("{name} indices must be positive")));
            }
        }
        Ok(())
    }

    pub fn polarization(&self, beam: Beam) -> Polarization {
        match (beam, self.pm_type) {
            (Beam::Pump, _) => Polarization::Extraordinary,
            (_, PmType::TypeI) => Polarization::Ordinary,
            (b, PmType::TypeII) if b == self.extraordinary => Polarization::Extraordinary,
            _ => Polarization::Ordinary,
        }
    }

    pub fn coefficients(&self, beam: Beam) -> &BeamCoefficients {
        match beam {
            Beam::Pump => &self.pump,
            Beam::Signal => &self.signal,
            Beam::Idler => &self.idler,
        }
    }

    pub fn wavelength(&self, beam: Beam) -> f64 {
        match beam {
            Beam::Pump => self.pump_wavelength,
            Beam::Signal => self.signal_wavelength,
            Beam::Idler => self.idler_wavelength,
        }
    }

    /// Angular frequency `ω = 2π c₀ / λ` of a beam.
    pub fn omega(&self, beam: Beam) -> f64 {
        2.0 * PI * SPEED_OF_LIGHT / self.wavelength(beam)
    }

    /// On-axis wavevector `ηK` or `n_o K`.
    pub fn kz_axial(&self, beam: Beam) -> f64 {
        let k0 = wavenumber(self.wavelength(beam));
        let c = self.coefficients(beam);
        match self.polarization(beam) {
            Polarization::Extraordinary => c.eta * k0,
            Polarization::Ordinary => c.n_o * k0,
        }
    }

    /// The momentum-dependent part of `k_z`, i.e. `k_z(q) − k_z(0)`.
    pub fn kz_transverse(&self, beam: Beam, qx: f64, qy: f64) -> f64 {
        let k0 = wavenumber(self.wavelength(beam));
        let c = self.coefficients(beam);
        match self.polarization(beam) {
            Polarization::Extraordinary => {
                let (s, co) = self.walkoff_azimuth.sin_cos();
                let u = co * qx + s * qy;
                let v = -s * qx + co * qy;
                c.alpha * u - (c.beta * c.beta * u * u + c.gamma * c.gamma * v * v) / (2.0 * c.eta * k0)
            }
            Polarization::Ordinary => -(qx * qx + qy * qy) / (2.0 * c.n_o * k0),
        }
    }

    pub fn kz(&self, beam: Beam, qx: f64, qy: f64) -> f64 {
        let k0 = wavenumber(self.wavelength(beam));
        let c = self.coefficients(beam);
        match self.polarization(beam) {
            Polarization::Extraordinary => kz_extraordinary(qx, qy, k0, c, self.walkoff_azimuth),
            Polarization::Ordinary => kz_ordinary(qx, qy, k0, c.n_o),
        }
    }

    /// Collinear mismatch `k_z,p(0) − k_z,s(0) − k_z,i(0)`.
    pub fn delta_kz_axial(&self) -> f64 {
        self.kz_axial(Beam::Pump) - self.kz_axial(Beam::Signal) - self.kz_axial(Beam::Idler)
    }

    /// `k_z,p(q_s + q_i) − k_z,s(q_s) − k_z,i(q_i)`, with the large on-axis
    /// terms cancelled before the transverse parts are added.
    pub fn delta_kz(&self, qs: (f64, f64), qi: (f64, f64)) -> f64 {
        self.delta_kz_axial()
            + (self.kz_transverse(Beam::Pump, qs.0 + qi.0, qs.1 + qi.1)
                // summed first so that swapping identical daughters is exact
                - (self.kz_transverse(Beam::Signal, qs.0, qs.1) + self.kz_transverse(Beam::Idler, qi.0, qi.1)))
    }

    /// `sinc(Δk_z L / 2)`.
    pub fn phase_matching(&self, dkz: f64) -> f64 {
        sinc(dkz * self.length / 2.0)
    }
}
