//! Parallel-beam 2D Radon transform and its adjoint.
//!
//! The forward operator samples the image along each ray with bilinear
//! interpolation at a fixed step and sums; the adjoint scatters with the same
//! weights on the same sample lattice, so it is the algebraic transpose of
//! the discrete forward operator rather than a textbook backprojection. That
//! exact pairing is what the fidelity gradient relies on.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarField, Unit};

/// Parallel-beam scan layout: views uniform over [0, 180) degrees, rays per
/// view symmetric about the grid center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub n_views: usize,
    pub n_rays: usize,
    /// Lateral ray spacing in mm.
    pub ray_spacing: f64,
    /// Sampling step along each ray in mm.
    pub sample_step: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self {
            n_views: 30,
            n_rays: 100,
            ray_spacing: 0.5,
            sample_step: 0.25,
        }
    }
}

impl ScanGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.n_rays == 0 {
            return Err(Error::InvalidParam("scan needs views and rays".into()));
        }
        if !(self.ray_spacing > 0.0) || !(self.sample_step > 0.0) {
            return Err(Error::InvalidParam(
                "ray spacing and sample step must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Normal angle of view `k` in radians: k * pi / n_views.
    #[inline]
    pub fn view_angle(&self, k: usize) -> f64 {
        k as f64 * std::f64::consts::PI / self.n_views as f64
    }

    /// Signed lateral offset of ray `m` from the grid center in mm.
    #[inline]
    pub fn ray_offset(&self, m: usize) -> f64 {
        (m as f64 - (self.n_rays as f64 - 1.0) / 2.0) * self.ray_spacing
    }

    pub fn n_entries(&self) -> usize {
        self.n_views * self.n_rays
    }
}

/// XCT measurement: line integrals on the view x ray lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub scan: ScanGeometry,
    /// Row-major `n_views x n_rays`.
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(scan: ScanGeometry) -> Self {
        Self {
            scan,
            values: vec![0.0; scan.n_entries()],
        }
    }

    #[inline]
    pub fn at(&self, view: usize, ray: usize) -> f64 {
        self.values[view * self.scan.n_rays + ray]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &Sinogram) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// CSV with a header comment recording the scan layout; one row per view.
    pub fn write_csv(&self, path: &Path, extra_header: Option<&str>) -> Result<()> {
        let s = &self.scan;
        let mut out = String::new();
        out.push_str(&format!(
            "# sinogram n_views={} n_rays={} ray_spacing_mm={} sample_step_mm={} angles_deg=0:{}:180\n",
            s.n_views,
            s.n_rays,
            s.ray_spacing,
            s.sample_step,
            180.0 / s.n_views as f64
        ));
        if let Some(h) = extra_header {
            out.push_str(&format!("# {h}\n"));
        }
        for view in 0..s.n_views {
            for ray in 0..s.n_rays {
                if ray > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", self.at(view, ray)));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, scan: ScanGeometry) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::with_capacity(scan.n_entries());
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            for tok in line.split(',') {
                let v: f64 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::parse(path, format!("bad number {tok:?}")))?;
                values.push(v);
            }
        }
        if values.len() != scan.n_entries() {
            return Err(Error::parse(
                path,
                format!(
                    "{} entries, expected {}x{}",
                    values.len(),
                    scan.n_views,
                    scan.n_rays
                ),
            ));
        }
        Ok(Self { scan, values })
    }
}

/// Shared sample lattice for one scan/grid pairing: every ray is sampled at
/// `t = -t_max + q * step` in the direction orthogonal to the view normal.
/// Forward and adjoint must iterate the identical lattice.
struct RayLattice {
    t_start: f64,
    n_samples: usize,
}

fn ray_lattice(scan: &ScanGeometry, geometry: &GridGeometry) -> RayLattice {
    let half_w = geometry.nx as f64 * geometry.h / 2.0;
    let half_h = geometry.ny as f64 * geometry.h / 2.0;
    let t_max = half_w.hypot(half_h) + scan.sample_step;
    // Symmetric lattice t = +-k * step: mirror symmetries of the image map
    // onto exact sample-point symmetries.
    let half_count = (t_max / scan.sample_step).ceil() as usize;
    RayLattice {
        t_start: -(half_count as f64) * scan.sample_step,
        n_samples: 2 * half_count + 1,
    }
}

/// Bilinear stencil of a physical point: up to four (index, weight) pairs.
/// Out-of-grid neighbors are dropped, contributing zero.
#[inline]
fn bilinear_stencil(
    geometry: &GridGeometry,
    x: f64,
    y: f64,
    out: &mut [(usize, f64); 4],
) -> usize {
    let g = geometry;
    let fcol = (x - g.center.0) / g.h + (g.nx as f64 - 1.0) / 2.0;
    let frow = (g.ny as f64 - 1.0) / 2.0 - (y - g.center.1) / g.h;
    let col0 = fcol.floor();
    let row0 = frow.floor();
    let wc = fcol - col0;
    let wr = frow - row0;
    let mut n = 0;
    let mut push = |row: f64, col: f64, w: f64| {
        if w == 0.0 {
            return;
        }
        if row >= 0.0 && col >= 0.0 && (row as usize) < g.ny && (col as usize) < g.nx {
            out[n] = ((row as usize) * g.nx + col as usize, w);
            n += 1;
        }
    };
    push(row0, col0, (1.0 - wr) * (1.0 - wc));
    push(row0, col0 + 1.0, (1.0 - wr) * wc);
    push(row0 + 1.0, col0, wr * (1.0 - wc));
    push(row0 + 1.0, col0 + 1.0, wr * wc);
    n
}

/// Radon transform: entry (view k, ray m) approximates the line integral of
/// `u` along the line with normal angle `theta_k` and offset `s_m`; values
/// outside the grid contribute zero.
pub fn radon_forward(u: &ScalarField, scan: &ScanGeometry) -> Sinogram {
    let g = &u.geometry;
    let lattice = ray_lattice(scan, g);
    let mut sino = Sinogram::zeros(*scan);
    let mut stencil = [(0usize, 0.0f64); 4];
    for view in 0..scan.n_views {
        let phi = scan.view_angle(view);
        let (nx_dir, ny_dir) = (phi.cos(), phi.sin()); // line normal
        let (tx, ty) = (-ny_dir, nx_dir); // direction along the line
        for ray in 0..scan.n_rays {
            let s = scan.ray_offset(ray);
            let (ox, oy) = (g.center.0 + s * nx_dir, g.center.1 + s * ny_dir);
            let mut acc = 0.0;
            for q in 0..lattice.n_samples {
                let t = lattice.t_start + q as f64 * scan.sample_step;
                let (x, y) = (ox + t * tx, oy + t * ty);
                let n = bilinear_stencil(g, x, y, &mut stencil);
                for &(idx, w) in &stencil[..n] {
                    acc += w * u.values[idx];
                }
            }
            sino.values[view * scan.n_rays + ray] = acc * scan.sample_step;
        }
    }
    sino
}

/// Exact adjoint of [`radon_forward`]: scatters each sinogram entry back
/// through the same sample lattice and interpolation weights.
pub fn radon_adjoint(g1: &Sinogram, target: &GridGeometry) -> ScalarField {
    let scan = &g1.scan;
    let lattice = ray_lattice(scan, target);
    let mut out = ScalarField::zeros(*target, Unit::Dimensionless);
    let mut stencil = [(0usize, 0.0f64); 4];
    for view in 0..scan.n_views {
        let phi = scan.view_angle(view);
        let (nx_dir, ny_dir) = (phi.cos(), phi.sin());
        let (tx, ty) = (-ny_dir, nx_dir);
        for ray in 0..scan.n_rays {
            let c = g1.values[view * scan.n_rays + ray] * scan.sample_step;
            if c == 0.0 {
                continue;
            }
            let s = scan.ray_offset(ray);
            let (ox, oy) = (target.center.0 + s * nx_dir, target.center.1 + s * ny_dir);
            for q in 0..lattice.n_samples {
                let t = lattice.t_start + q as f64 * scan.sample_step;
                let (x, y) = (ox + t * tx, oy + t * ty);
                let n = bilinear_stencil(target, x, y, &mut stencil);
                for &(idx, w) in &stencil[..n] {
                    out.values[idx] += c * w;
                }
            }
        }
    }
    out
}
