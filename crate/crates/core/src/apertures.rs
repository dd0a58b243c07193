//! Real transmission masks: T(q) in the far-field plane, N(ρ) in the near field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, Photon, TransverseGrid};

/// Minimum number of lattice samples across the smallest mask feature.
pub const MIN_FEATURE_SAMPLES: f64 = 4.0;

// Cell centres that land on an edge up to rounding are counted as inside.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Two parallel slits of width `width`, centres `separation` apart along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoubleSlit {
    pub separation: f64,
    pub width: f64,
    pub axis: Axis,
    #[serde(default)]
    pub center: [f64; 2],
}

impl DoubleSlit {
    pub fn new(separation: f64, width: f64, axis: Axis) -> Self {
        Self {
            separation,
            width,
            axis,
            center: [0.0, 0.0],
        }
    }

    fn along(&self, x: f64, y: f64) -> f64 {
        match self.axis {
            Axis::X => x - self.center[0],
            Axis::Y => y - self.center[1],
        }
    }

    fn in_slit(&self, t: f64, side: f64, step: f64) -> bool {
        (t - side * self.separation / 2.0).abs() <= self.width / 2.0 + EDGE_SLACK * step
    }

    /// Slit on the positive side of the separation axis.
    pub fn in_upper(&self, x: f64, y: f64, step: f64) -> bool {
        self.in_slit(self.along(x, y), 1.0, step)
    }

    pub fn in_lower(&self, x: f64, y: f64, step: f64) -> bool {
        self.in_slit(self.along(x, y), -1.0, step)
    }

    fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.separation > self.width) {
            return Err(Error::config(format!(
                "double slit needs separation > width > 0 (separation {}, width {})",
                self.separation, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskShape {
    Identity,
    DoubleSlit(DoubleSlit),
    Circular {
        radius: f64,
        center: [f64; 2],
    },
    Rectangular {
        width_x: f64,
        width_y: f64,
        center: [f64; 2],
    },
    Product {
        factors: Vec<MaskShape>,
    },
}

impl MaskShape {
    pub fn is_identity(&self) -> bool {
        match self {
            MaskShape::Identity => true,
            MaskShape::Product { factors } => factors.iter().all(MaskShape::is_identity),
            _ => false,
        }
    }

    fn transmission(&self, x: f64, y: f64, step: f64) -> f64 {
        let inside = match self {
            MaskShape::Identity => true,
            MaskShape::DoubleSlit(s) => s.in_upper(x, y, step) || s.in_lower(x, y, step),
            MaskShape::Circular { radius, center } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                (dx * dx + dy * dy).sqrt() <= radius + EDGE_SLACK * step
            }
            MaskShape::Rectangular {
                width_x,
                width_y,
                center,
            } => {
                (x - center[0]).abs() <= width_x / 2.0 + EDGE_SLACK * step
                    && (y - center[1]).abs() <= width_y / 2.0 + EDGE_SLACK * step
            }
            MaskShape::Product { factors } => return factors.iter().map(|f| f.transmission(x, y, step)).product(),
        };
        if inside {
            1.0
        } else {
            0.0
        }
    }

    /// Checks geometry, sampling density and window fit. `half` is the
    /// half-width of the lattice window in the plane's own units.
    fn check(&self, step: f64, half: f64, n: usize) -> Result<()> {
        let need = |what: &str, size: f64| -> Result<()> {
            let samples = size / step;
            if samples < MIN_FEATURE_SAMPLES {
                let required = ((MIN_FEATURE_SAMPLES * n as f64 * step / size).ceil() as usize + 1) & !1;
                return Err(Error::config(format!(
                    "mask feature '{what}' ({size:.4e}) spans {samples:.2} samples; \
                     at least {MIN_FEATURE_SAMPLES} are needed, i.e. n >= {required} for this window"
                )));
            }
            Ok(())
        };
        let fits = |what: &str, lo: f64, hi: f64| -> Result<()> {
            if lo < -half - step || hi > half {
                return Err(Error::config(format!(
                    "mask feature '{what}' spans [{lo:.4e}, {hi:.4e}], outside the lattice window ±{half:.4e}"
                )));
            }
            Ok(())
        };
        match self {
            MaskShape::Identity => Ok(()),
            MaskShape::DoubleSlit(s) => {
                s.validate()?;
                need("slit width", s.width)?;
                need("slit bar", s.separation - s.width)?;
                let c = match s.axis {
                    Axis::X => s.center[0],
                    Axis::Y => s.center[1],
                };
                let reach = s.separation / 2.0 + s.width / 2.0;
                fits("double slit", c - reach, c + reach)
            }
            MaskShape::Circular { radius, center } => {
                if radius.is_nan() || *radius <= 0.0 {
                    return Err(Error::config("circular aperture radius must be positive"));
                }
                need("aperture diameter", 2.0 * radius)?;
                fits("circular aperture (x)", center[0] - radius, center[0] + radius)?;
                fits("circular aperture (y)", center[1] - radius, center[1] + radius)
            }
            MaskShape::Rectangular {
                width_x,
                width_y,
                center,
            } => {
                if !(*width_x > 0.0 && *width_y > 0.0) {
                    return Err(Error::config("rectangular aperture widths must be positive"));
                }
                need("rectangle width_x", *width_x)?;
                need("rectangle width_y", *width_y)?;
                fits("rectangle (x)", center[0] - width_x / 2.0, center[0] + width_x / 2.0)?;
                fits("rectangle (y)", center[1] - width_y / 2.0, center[1] + width_y / 2.0)
            }
            MaskShape::Product { factors } => factors.iter().try_for_each(|f| f.check(step, half, n)),
        }
    }
}

/// A mask shape bound to a photon and a plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApertureMask {
    pub shape: MaskShape,
    pub plane: Domain,
    pub photon: Photon,
}

impl ApertureMask {
    pub fn new(shape: MaskShape, plane: Domain, photon: Photon) -> Self {
        Self { shape, plane, photon }
    }

    pub fn identity(plane: Domain, photon: Photon) -> Self {
        Self::new(MaskShape::Identity, plane, photon)
    }

    pub fn is_identity(&self) -> bool {
        self.shape.is_identity()
    }

    /// Samples the mask at cell centres of `grid`.
    pub fn evaluate(&self, grid: &TransverseGrid) -> Result<MaskMap> {
        let n = grid.n();
        let step = match self.plane {
            Domain::Position => grid.spatial_step(),
            Domain::Momentum => grid.momentum_step(),
        };
        let half = step * (n / 2) as f64;
        self.shape.check(step, half, n)?;
        let identity = self.is_identity();
        let values = if identity {
            vec![1.0; n * n]
        } else {
            let axis = grid.axis(self.plane);
            let mut v = Vec::with_capacity(n * n);
            for &y in &axis {
                for &x in &axis {
                    v.push(self.shape.transmission(x, y, step));
                }
            }
            v
        };
        Ok(MaskMap {
            plane: self.plane,
            photon: self.photon,
            values,
            identity,
        })
    }
}

/// Sampled transmission values of one mask, index `iy * n + ix`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMap {
    pub plane: Domain,
    pub photon: Photon,
    pub values: Vec<f64>,
    pub identity: bool,
}

impl MaskMap {
    pub fn identity(grid: &TransverseGrid, plane: Domain, photon: Photon) -> Self {
        Self {
            plane,
            photon,
            values: vec![1.0; grid.n2()],
            identity: true,
        }
    }

    pub fn open_cells(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }
}
