//! Pixel grid, scalar/vector fields, and the discrete differential operators
//! shared by every other module.
//!
//! Fields live on the full `nx x ny` rectangle; the circular reconstruction
//! domain is represented by [`disk_mask`]. The gradient uses forward
//! differences and the divergence backward differences, paired so that
//! `<grad u, p> = -<u, div p>` holds to rounding for every field pair. That
//! exact adjointness is what makes the discrete objective gradients exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical unit attached to a field; descriptive metadata recorded in file
/// headers, not enforced by arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Unit {
    /// Attenuation or absorption coefficients.
    PerMillimeter,
    /// Lengths such as the diffusion coefficient.
    Millimeter,
    #[default]
    Dimensionless,
}

impl Unit {
    pub fn label(self) -> &'static str {
        match self {
            Unit::PerMillimeter => "1/mm",
            Unit::Millimeter => "mm",
            Unit::Dimensionless => "1",
        }
    }
}

/// Regular pixel grid with a circular reconstruction domain inside it.
///
/// Pixel `(row, col)` has its center at physical coordinates returned by
/// [`GridGeometry::pixel_center`]; row 0 is the top of the image (largest y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    /// Pixel pitch in mm.
    pub h: f64,
    /// Physical coordinates of the grid center in mm.
    pub center: (f64, f64),
    /// Radius of the circular domain in mm.
    pub disk_radius: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self {
            nx: 100,
            ny: 100,
            h: 0.5,
            center: (0.0, 0.0),
            disk_radius: 25.0,
        }
    }
}

impl GridGeometry {
    pub fn new(nx: usize, ny: usize, h: f64, center: (f64, f64), disk_radius: f64) -> Result<Self> {
        let g = Self {
            nx,
            ny,
            h,
            center,
            disk_radius,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidParam("grid must have nonzero size".into()));
        }
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::InvalidParam(format!(
                "pixel pitch must be positive, got {}",
                self.h
            )));
        }
        if !(self.disk_radius > 0.0) {
            return Err(Error::InvalidParam(format!(
                "disk radius must be positive, got {}",
                self.disk_radius
            )));
        }
        let (w, h) = (self.nx as f64 * self.h, self.ny as f64 * self.h);
        if w < 2.0 * self.disk_radius || h < 2.0 * self.disk_radius {
            return Err(Error::InvalidParam(format!(
                "grid extent {w:.3} x {h:.3} mm does not cover the {:.3} mm disk",
                2.0 * self.disk_radius
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn n_pixels(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.ny && col < self.nx);
        row * self.nx + col
    }

    /// Physical center of pixel `(row, col)` in mm; row 0 is the top row.
    #[inline]
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.center.0 + (col as f64 - (self.nx as f64 - 1.0) / 2.0) * self.h;
        let y = self.center.1 + ((self.ny as f64 - 1.0) / 2.0 - row as f64) * self.h;
        (x, y)
    }

    /// True if the pixel center lies inside (or on) the disk.
    #[inline]
    pub fn in_disk(&self, row: usize, col: usize) -> bool {
        let (x, y) = self.pixel_center(row, col);
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        dx * dx + dy * dy <= self.disk_radius * self.disk_radius
    }
}

/// Real-valued function on the pixel grid, stored row-major with row 0 on top.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub geometry: GridGeometry,
    pub unit: Unit,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(geometry: GridGeometry, unit: Unit) -> Self {
        Self {
            geometry,
            unit,
            values: vec![0.0; geometry.n_pixels()],
        }
    }

    pub fn constant(geometry: GridGeometry, value: f64, unit: Unit) -> Self {
        Self {
            geometry,
            unit,
            values: vec![value; geometry.n_pixels()],
        }
    }

    pub fn from_values(geometry: GridGeometry, values: Vec<f64>, unit: Unit) -> Result<Self> {
        if values.len() != geometry.n_pixels() {
            return Err(Error::GeometryMismatch(format!(
                "field has {} values for a {}x{} grid",
                values.len(),
                geometry.nx,
                geometry.ny
            )));
        }
        Ok(Self {
            geometry,
            unit,
            values,
        })
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[self.geometry.idx(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = self.geometry.idx(row, col);
        self.values[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Plain Euclidean inner product `sum a*b` (no quadrature weight).
    pub fn inner(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn same_geometry(&self, other: &ScalarField) -> bool {
        self.geometry == other.geometry
    }

    /// Lossless CSV: `ny` rows of `nx` comma-separated values, row 0 on top.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let g = self.geometry;
        let mut out = String::with_capacity(g.n_pixels() * 20);
        for row in 0..g.ny {
            for col in 0..g.nx {
                if col > 0 {
                    out.push(',');
                }
                // Display for f64 prints the shortest string that round-trips.
                out.push_str(&format!("{}", self.at(row, col)));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Read a CSV written by [`ScalarField::write_csv`]; lines starting with
    /// `#` are ignored. The geometry must match the file dimensions.
    pub fn read_csv(path: &Path, geometry: GridGeometry, unit: Unit) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::with_capacity(geometry.n_pixels());
        let mut rows = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = 0usize;
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, format!("bad number {tok:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(path, "non-finite value"));
                }
                values.push(v);
                cols += 1;
            }
            if cols != geometry.nx {
                return Err(Error::parse(
                    path,
                    format!("row {rows} has {cols} columns, expected {}", geometry.nx),
                ));
            }
            rows += 1;
        }
        if rows != geometry.ny {
            return Err(Error::parse(
                path,
                format!("{rows} rows, expected {}", geometry.ny),
            ));
        }
        Self::from_values(geometry, values, unit)
    }

    /// 16-bit binary PGM for viewing, linearly windowed to `[lo, hi]`.
    /// The window and unit are recorded in a header comment.
    pub fn write_pgm16(&self, path: &Path, window: (f64, f64)) -> Result<()> {
        let (lo, hi) = window;
        if !(hi > lo) {
            return Err(Error::InvalidParam(format!(
                "display window [{lo}, {hi}] is empty"
            )));
        }
        let g = self.geometry;
        let mut buf = Vec::with_capacity(64 + 2 * g.n_pixels());
        let header = format!(
            "P5\n# window {lo} {hi} unit {}\n{} {}\n65535\n",
            self.unit.label(),
            g.nx,
            g.ny
        );
        buf.extend_from_slice(header.as_bytes());
        for &v in &self.values {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let q = (t * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// Two-component field holding discrete gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub geometry: GridGeometry,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl VectorField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.n_pixels();
        Self {
            geometry,
            x: vec![0.0; n],
            y: vec![0.0; n],
        }
    }

    pub fn inner(&self, other: &VectorField) -> f64 {
        let sx: f64 = self
            .x
            .iter()
            .zip(&other.x)
            .map(|(a, b)| a * b)
            .sum::<f64>();
        let sy: f64 = self
            .y
            .iter()
            .zip(&other.y)
            .map(|(a, b)| a * b)
            .sum::<f64>();
        sx + sy
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.x.iter().map(|v| v * v).sum::<f64>()
            + self.y.iter().map(|v| v * v).sum::<f64>();
        s.sqrt()
    }
}

/// Forward-difference gradient with replication at the last row/column, so
/// the derivative is zero there. `x` runs along columns, `y` along rows.
pub fn forward_gradient(f: &ScalarField) -> VectorField {
    let g = f.geometry;
    let inv_h = 1.0 / g.h;
    let mut out = VectorField::zeros(g);
    for row in 0..g.ny {
        let base = row * g.nx;
        for col in 0..g.nx - 1 {
            out.x[base + col] = (f.values[base + col + 1] - f.values[base + col]) * inv_h;
        }
    }
    for row in 0..g.ny - 1 {
        let base = row * g.nx;
        for col in 0..g.nx {
            out.y[base + col] = (f.values[base + g.nx + col] - f.values[base + col]) * inv_h;
        }
    }
    out
}

/// Backward-difference divergence, the exact negative adjoint of
/// [`forward_gradient`] under the plain inner product: for all `u`, `p`,
/// `<grad u, p> = -<u, div p>`.
pub fn backward_divergence(p: &VectorField) -> ScalarField {
    let g = p.geometry;
    let inv_h = 1.0 / g.h;
    let mut out = ScalarField::zeros(g, Unit::Dimensionless);
    for row in 0..g.ny {
        let base = row * g.nx;
        for col in 0..g.nx {
            let i = base + col;
            let dx = if col == 0 {
                p.x[i]
            } else if col < g.nx - 1 {
                p.x[i] - p.x[i - 1]
            } else {
                -p.x[i - 1]
            };
            let dy = if row == 0 {
                p.y[i]
            } else if row < g.ny - 1 {
                p.y[i] - p.y[i - g.nx]
            } else {
                -p.y[i - g.nx]
            };
            out.values[i] = (dx + dy) * inv_h;
        }
    }
    out
}

/// Indicator of the circular domain: 1 where the pixel center lies within
/// `disk_radius` of the center, 0 elsewhere.
pub fn disk_mask(g: &GridGeometry) -> ScalarField {
    let mut out = ScalarField::zeros(*g, Unit::Dimensionless);
    for row in 0..g.ny {
        for col in 0..g.nx {
            if g.in_disk(row, col) {
                out.values[g.idx(row, col)] = 1.0;
            }
        }
    }
    out
}
