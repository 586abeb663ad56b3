//! Diffusion-approximation DOT forward operator with known diffusion
//! coefficient, plus the adjoint-state gradient of the DOT fidelity term.
//!
//! The PDE `-div(D grad u) + mu_a u = 0` is discretized with a finite-volume
//! 5-point stencil on disk-interior pixels (harmonic face diffusivities). The
//! Robin condition `u + 2 D du/dn = q` is eliminated into the boundary-cell
//! rows, and the measurement at a detector is `(u - q) / 2`, the exitance
//! implied by the Robin and Neumann relations. One symmetric factorization is
//! shared by all source and adjoint solves for a given absorption map.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarField, Unit};
use crate::linalg::{conjugate_gradient, BandedCholesky, BandedMatrix};

const CG_TOLERANCE: f64 = 1e-10;
const CG_MAX_ITERS: usize = 20_000;

/// Homogeneous absorption (1/mm) of the reference medium used both as the
/// warm-start background and to scale the data metric.
pub const REFERENCE_BACKGROUND: f64 = 0.01;

/// Optode pairs whose reference signal falls below this fraction of the
/// strongest pair are weighted as if they sat at the floor; their readings
/// are noise-dominated and must not be amplified.
pub const PAIR_WEIGHT_FLOOR: f64 = 0.05;

/// Global scale of the DOT data metric. Fixes the unit in which boundary
/// residuals enter the joint objective so the data term and the smoothness
/// term trade off at the intended strength.
pub const DOT_METRIC_SCALE: f64 = 300.0;

/// Optode layout on the disk boundary: sources uniformly spaced, detectors
/// interleaved at half the source spacing so no optodes coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsGeometry {
    pub n_sources: usize,
    pub n_detectors: usize,
    /// Width of the Gaussian source profile in boundary arc length (mm).
    pub source_sigma: f64,
    /// Width of the detector averaging window in arc length (mm).
    pub detector_sigma: f64,
    /// Source amplitude (dimensionless boundary radiance scale).
    pub amplitude: f64,
}

impl Default for OpticsGeometry {
    fn default() -> Self {
        Self {
            n_sources: 16,
            n_detectors: 16,
            source_sigma: 2.0,
            detector_sigma: 1.0,
            amplitude: 1.0,
        }
    }
}

impl OpticsGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 || self.n_detectors == 0 {
            return Err(Error::InvalidParam("need sources and detectors".into()));
        }
        if !(self.source_sigma > 0.0) || !(self.detector_sigma > 0.0) {
            return Err(Error::InvalidParam("optode widths must be positive".into()));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::InvalidParam("amplitude must be nonnegative".into()));
        }
        Ok(())
    }

    /// Angular position of source `s` in radians.
    #[inline]
    pub fn source_angle(&self, s: usize) -> f64 {
        2.0 * std::f64::consts::PI * s as f64 / self.n_sources as f64
    }

    /// Angular position of detector `d`, offset by half the source spacing.
    #[inline]
    pub fn detector_angle(&self, d: usize) -> f64 {
        2.0 * std::f64::consts::PI * (d as f64 + 0.5) / self.n_detectors as f64
    }
}

/// Diffusion coefficient map and the positive lower clamp on absorption.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    /// Diffusion coefficient in mm, strictly positive everywhere.
    pub d: ScalarField,
    /// Absorption values are clamped to this floor (1/mm) before assembly.
    pub mu_a_floor: f64,
}

impl DiffusionModel {
    pub fn new(d: ScalarField, mu_a_floor: f64) -> Result<Self> {
        if !d.values.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParam(
                "diffusion coefficient must be positive and finite".into(),
            ));
        }
        if !(mu_a_floor > 0.0) {
            return Err(Error::InvalidParam(format!(
                "absorption floor must be positive, got {mu_a_floor}"
            )));
        }
        Ok(Self { d, mu_a_floor })
    }

    /// Uniform diffusion coefficient over the grid.
    pub fn uniform(geometry: GridGeometry, d_value: f64, mu_a_floor: f64) -> Result<Self> {
        Self::new(
            ScalarField::constant(geometry, d_value, Unit::Millimeter),
            mu_a_floor,
        )
    }
}

/// DOT measurement: exitance per source/detector pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    pub n_sources: usize,
    pub n_detectors: usize,
    /// Row-major `n_sources x n_detectors`.
    pub values: Vec<f64>,
}

impl BoundaryData {
    pub fn zeros(n_sources: usize, n_detectors: usize) -> Self {
        Self {
            n_sources,
            n_detectors,
            values: vec![0.0; n_sources * n_detectors],
        }
    }

    #[inline]
    pub fn at(&self, source: usize, detector: usize) -> f64 {
        self.values[source * self.n_detectors + detector]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// CSV with a header comment recording the optode layout; row = source.
    pub fn write_csv(
        &self,
        path: &Path,
        optics: &OpticsGeometry,
        d_label: &str,
        extra_header: Option<&str>,
    ) -> Result<()> {
        let mut out = String::new();
        let fmt_angles = |n: usize, f: &dyn Fn(usize) -> f64| {
            (0..n)
                .map(|i| format!("{:.3}", f(i).to_degrees()))
                .collect::<Vec<_>>()
                .join(";")
        };
        out.push_str(&format!(
            "# boundary_data sources={} detectors={} sigma_q_mm={} sigma_det_mm={} amplitude={} D={}\n",
            self.n_sources,
            self.n_detectors,
            optics.source_sigma,
            optics.detector_sigma,
            optics.amplitude,
            d_label
        ));
        out.push_str(&format!(
            "# source_angles_deg={}\n# detector_angles_deg={}\n",
            fmt_angles(self.n_sources, &|s| optics.source_angle(s)),
            fmt_angles(self.n_detectors, &|d| optics.detector_angle(d)),
        ));
        if let Some(h) = extra_header {
            out.push_str(&format!("# {h}\n"));
        }
        for s in 0..self.n_sources {
            for d in 0..self.n_detectors {
                if d > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{}", self.at(s, d)));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, n_sources: usize, n_detectors: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut values = Vec::with_capacity(n_sources * n_detectors);
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
        if values.len() != n_sources * n_detectors {
            return Err(Error::parse(
                path,
                format!(
                    "{} entries, expected {n_sources}x{n_detectors}",
                    values.len()
                ),
            ));
        }
        Ok(Self {
            n_sources,
            n_detectors,
            values,
        })
    }
}

/// A boundary face of the staircase disk domain.
#[derive(Debug, Clone, Copy)]
struct BoundaryFace {
    unknown: usize,
    /// Angle of the face midpoint around the disk center.
    angle: f64,
    /// Robin elimination coefficient D*h / (2D + h/2), already divided by h^2.
    coef: f64,
}

/// Sparse SPD system for one absorption map, in band form. Rows are scaled as
/// the PDE (interior diagonal `4D/h^2 + mu_a` for uniform D).
pub struct DiffusionSystem {
    matrix: BandedMatrix,
}

impl DiffusionSystem {
    pub fn n(&self) -> usize {
        self.matrix.n
    }

    /// Symmetric entry lookup (zero outside the band).
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn bandwidth(&self) -> usize {
        self.matrix.bw
    }

    /// y = A x, for residual checks and the CG fallback.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.mul_vec(x, y)
    }
}

/// Factorization plus per-source photon fields and measurements for one
/// absorption map; the expensive intermediates the gradient reuses.
pub struct DotEvaluation {
    system: DiffusionSystem,
    factor: Option<BandedCholesky>,
    /// Photon density per source, indexed by unknown.
    fields: Vec<Vec<f64>>,
    pub measurements: BoundaryData,
}

impl DotEvaluation {
    /// Sum of squared residuals against measured data.
    pub fn fidelity(&self, measured: &BoundaryData) -> f64 {
        self.measurements
            .values
            .iter()
            .zip(&measured.values)
            .map(|(m, g)| (m - g) * (m - g))
            .sum()
    }
}

/// The DOT forward operator G for a fixed geometry, diffusion model, and
/// optode layout. Construction precomputes the absorption-independent part of
/// the stiffness matrix, the Robin source profiles, and the detector windows.
pub struct DotOperator {
    pub geometry: GridGeometry,
    pub model: DiffusionModel,
    pub optics: OpticsGeometry,
    n: usize,
    unknown_of_pixel: Vec<i32>,
    pixel_of_unknown: Vec<usize>,
    bandwidth: usize,
    /// Stiffness diagonal without the absorption term.
    diag_base: Vec<f64>,
    /// Lower-triangle neighbor couplings (left, up) per unknown.
    lower: Vec<[Option<(usize, f64)>; 2]>,
    faces: Vec<BoundaryFace>,
    /// Robin data per source and boundary face.
    source_q: Vec<Vec<f64>>,
    /// Detector windows folded with the 1/2 exitance factor, per unknown.
    detector_weights: Vec<Vec<(usize, f64)>>,
    /// Constant measurement offset `-(1/2) sum_f c_d(f) q_s(f)`.
    measurement_offset: Vec<f64>,
    /// Fixed diagonal data-metric weights per source/detector pair,
    /// `1 / max(|reference signal|, floor)^2` for the homogeneous reference
    /// medium. Exitance spans several decades between adjacent and opposite
    /// optodes; an unweighted metric would let a handful of near pairs
    /// swamp every informative mid-range pair.
    pair_weights: Vec<f64>,
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x < -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

impl DotOperator {
    pub fn new(
        geometry: GridGeometry,
        model: DiffusionModel,
        optics: OpticsGeometry,
    ) -> Result<Self> {
        geometry.validate()?;
        optics.validate()?;
        if model.d.geometry != geometry {
            return Err(Error::GeometryMismatch(
                "diffusion coefficient geometry differs from grid".into(),
            ));
        }

        let (nx, ny, h) = (geometry.nx, geometry.ny, geometry.h);
        let mut unknown_of_pixel = vec![-1i32; geometry.n_pixels()];
        let mut pixel_of_unknown = Vec::new();
        for row in 0..ny {
            for col in 0..nx {
                if geometry.in_disk(row, col) {
                    unknown_of_pixel[row * nx + col] = pixel_of_unknown.len() as i32;
                    pixel_of_unknown.push(row * nx + col);
                }
            }
        }
        let n = pixel_of_unknown.len();
        if n == 0 {
            return Err(Error::InvalidParam("disk contains no pixels".into()));
        }

        let inv_h2 = 1.0 / (h * h);
        let mut diag_base = vec![0.0; n];
        let mut lower: Vec<[Option<(usize, f64)>; 2]> = vec![[None, None]; n];
        let mut faces = Vec::new();
        let mut bandwidth = 1usize;

        for i in 0..n {
            let p = pixel_of_unknown[i];
            let (row, col) = (p / nx, p % nx);
            let d_here = model.d.values[p];
            let (px, py) = geometry.pixel_center(row, col);
            // (neighbor row, neighbor col, face direction)
            let neighbors: [(isize, isize, f64, f64); 4] = [
                (0, -1, -0.5, 0.0),
                (0, 1, 0.5, 0.0),
                (-1, 0, 0.0, 0.5),
                (1, 0, 0.0, -0.5),
            ];
            for (dr, dc, fx, fy) in neighbors {
                let (nr, nc) = (row as isize + dr, col as isize + dc);
                let inside = nr >= 0
                    && nc >= 0
                    && (nr as usize) < ny
                    && (nc as usize) < nx
                    && geometry.in_disk(nr as usize, nc as usize);
                if inside {
                    let np = nr as usize * nx + nc as usize;
                    let j = unknown_of_pixel[np];
                    debug_assert!(j >= 0);
                    let j = j as usize;
                    let d_there = model.d.values[np];
                    let d_face = 2.0 * d_here * d_there / (d_here + d_there);
                    diag_base[i] += d_face * inv_h2;
                    if j < i {
                        let slot = if dc == -1 { 0 } else { 1 };
                        lower[i][slot] = Some((j, d_face * inv_h2));
                        bandwidth = bandwidth.max(i - j);
                    }
                } else {
                    // Boundary face: Robin elimination.
                    let coef = d_here * h / (2.0 * d_here + h / 2.0) * inv_h2;
                    diag_base[i] += coef;
                    let (mx, my) = (px + fx * h, py + fy * h);
                    let angle = (my - geometry.center.1).atan2(mx - geometry.center.0);
                    faces.push(BoundaryFace {
                        unknown: i,
                        angle,
                        coef,
                    });
                }
            }
        }

        // Gaussian arc-length profiles for sources and detector windows.
        let radius = geometry.disk_radius;
        let arc = |a: f64, b: f64| radius * wrap_angle(a - b).abs();
        let mut source_q = Vec::with_capacity(optics.n_sources);
        for s in 0..optics.n_sources {
            let a_s = optics.source_angle(s);
            source_q.push(
                faces
                    .iter()
                    .map(|f| {
                        let dist = arc(f.angle, a_s);
                        optics.amplitude
                            * (-dist * dist / (2.0 * optics.source_sigma * optics.source_sigma))
                                .exp()
                    })
                    .collect::<Vec<f64>>(),
            );
        }

        let mut detector_weights = Vec::with_capacity(optics.n_detectors);
        let mut detector_face_weights = Vec::with_capacity(optics.n_detectors);
        for d in 0..optics.n_detectors {
            let a_d = optics.detector_angle(d);
            let raw: Vec<f64> = faces
                .iter()
                .map(|f| {
                    let dist = arc(f.angle, a_d);
                    (-dist * dist / (2.0 * optics.detector_sigma * optics.detector_sigma)).exp()
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let normalized: Vec<f64> = raw.iter().map(|w| w / total).collect();
            let mut per_unknown: Vec<(usize, f64)> = Vec::new();
            for (f, w) in faces.iter().zip(&normalized) {
                if *w == 0.0 {
                    continue;
                }
                match per_unknown.iter_mut().find(|(u, _)| *u == f.unknown) {
                    Some((_, acc)) => *acc += 0.5 * w,
                    None => per_unknown.push((f.unknown, 0.5 * w)),
                }
            }
            detector_weights.push(per_unknown);
            detector_face_weights.push(normalized);
        }

        let mut measurement_offset = vec![0.0; optics.n_sources * optics.n_detectors];
        for s in 0..optics.n_sources {
            for d in 0..optics.n_detectors {
                let mut acc = 0.0;
                for (w, q) in detector_face_weights[d].iter().zip(&source_q[s]) {
                    acc += w * q;
                }
                measurement_offset[s * optics.n_detectors + d] = -0.5 * acc;
            }
        }

        let mut op = Self {
            geometry,
            model,
            optics,
            n,
            unknown_of_pixel,
            pixel_of_unknown,
            bandwidth,
            diag_base,
            lower,
            faces,
            source_q,
            detector_weights,
            measurement_offset,
            pair_weights: vec![1.0; optics.n_sources * optics.n_detectors],
        };
        // Data-metric weights from the homogeneous reference medium.
        let reference =
            ScalarField::constant(geometry, REFERENCE_BACKGROUND, Unit::PerMillimeter);
        let ref_meas = op.evaluate(&reference)?.measurements;
        let max_ref = ref_meas
            .values
            .iter()
            .fold(0.0f64, |a, &b| a.max(b.abs()));
        if max_ref > 0.0 {
            // TODO temporary sweep knobs, remove after calibration
            let floor_frac: f64 = std::env::var("JBMIR_FLOOR")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(PAIR_WEIGHT_FLOOR);
            let shape: String = std::env::var("JBMIR_SHAPE").unwrap_or_else(|_| "soft".into());
            let scale: f64 = std::env::var("JBMIR_SCALE")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(DOT_METRIC_SCALE);
            let floor = floor_frac * max_ref;
            op.pair_weights = ref_meas
                .values
                .iter()
                .map(|m| {
                    if shape == "wiener" {
                        scale / (m * m + floor * floor)
                    } else {
                        let s = m.abs().max(floor);
                        scale / (s * s)
                    }
                })
                .collect();
        }
        Ok(op)
    }

    pub fn n_unknowns(&self) -> usize {
        self.n
    }

    /// Unknown index of a pixel, if it lies inside the disk.
    pub fn unknown_index(&self, row: usize, col: usize) -> Option<usize> {
        let v = self.unknown_of_pixel[row * self.geometry.nx + col];
        (v >= 0).then_some(v as usize)
    }

    pub fn boundary_face_angles(&self) -> Vec<f64> {
        self.faces.iter().map(|f| f.angle).collect()
    }

    /// Robin data of source `s` per boundary face.
    pub fn source_profile(&self, s: usize) -> &[f64] {
        &self.source_q[s]
    }

    fn check_mu(&self, mu_a: &ScalarField) -> Result<()> {
        if mu_a.geometry != self.geometry {
            return Err(Error::GeometryMismatch(
                "absorption map geometry differs from operator grid".into(),
            ));
        }
        if !mu_a.is_finite() {
            return Err(Error::NonFinite("absorption map".into()));
        }
        Ok(())
    }

    /// Assemble the SPD system for an absorption map. Values below the floor
    /// are clamped before assembly, which keeps the system positive-definite
    /// when descent steps overshoot.
    pub fn assemble(&self, mu_a: &ScalarField) -> Result<DiffusionSystem> {
        self.check_mu(mu_a)?;
        let mut matrix = BandedMatrix::zeros(self.n, self.bandwidth);
        for i in 0..self.n {
            let mu = mu_a.values[self.pixel_of_unknown[i]].max(self.model.mu_a_floor);
            matrix.set(i, i, self.diag_base[i] + mu);
            for entry in self.lower[i].iter().flatten() {
                matrix.set(i, entry.0, -entry.1);
            }
        }
        Ok(DiffusionSystem { matrix })
    }

    fn robin_rhs(&self, q_per_face: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.n];
        for (f, &q) in self.faces.iter().zip(q_per_face) {
            b[f.unknown] += f.coef * q;
        }
        b
    }

    fn solve_system(
        &self,
        system: &DiffusionSystem,
        factor: &Option<BandedCholesky>,
        b: &[f64],
        source: usize,
    ) -> Result<Vec<f64>> {
        if let Some(f) = factor {
            return Ok(f.solve(b));
        }
        match conjugate_gradient(&system.matrix, b, CG_TOLERANCE, CG_MAX_ITERS) {
            Some((x, _)) => Ok(x),
            None => Err(Error::SolveFailure {
                source_index: source,
                reason: "conjugate gradient did not converge".into(),
            }),
        }
    }

    /// Solve the diffusion system once for an arbitrary per-face Robin datum.
    pub fn solve_robin(&self, mu_a: &ScalarField, q_per_face: &[f64]) -> Result<ScalarField> {
        if q_per_face.len() != self.faces.len() {
            return Err(Error::InvalidData(format!(
                "{} face values for {} boundary faces",
                q_per_face.len(),
                self.faces.len()
            )));
        }
        let system = self.assemble(mu_a)?;
        let factor = system.matrix.cholesky();
        let u = self.solve_system(&system, &factor, &self.robin_rhs(q_per_face), 0)?;
        Ok(self.scatter(&u))
    }

    fn scatter(&self, unknowns: &[f64]) -> ScalarField {
        let mut out = ScalarField::zeros(self.geometry, Unit::Dimensionless);
        for (i, &p) in self.pixel_of_unknown.iter().enumerate() {
            out.values[p] = unknowns[i];
        }
        out
    }

    fn measure(&self, source: usize, field: &[f64]) -> Vec<f64> {
        let nd = self.optics.n_detectors;
        let mut row = vec![0.0; nd];
        for (d, slot) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(u, w) in &self.detector_weights[d] {
                acc += w * field[u];
            }
            *slot = acc + self.measurement_offset[source * nd + d];
        }
        row
    }

    /// Full forward evaluation: one factorization, one solve per source, and
    /// the measurement matrix. Reused by the fidelity gradient.
    pub fn evaluate(&self, mu_a: &ScalarField) -> Result<DotEvaluation> {
        let system = self.assemble(mu_a)?;
        let factor = system.matrix.cholesky();
        let ns = self.optics.n_sources;
        let mut fields = Vec::with_capacity(ns);
        let mut measurements = BoundaryData::zeros(ns, self.optics.n_detectors);
        for s in 0..ns {
            let b = self.robin_rhs(&self.source_q[s]);
            let u = self.solve_system(&system, &factor, &b, s)?;
            let row = self.measure(s, &u);
            let nd = self.optics.n_detectors;
            measurements.values[s * nd..(s + 1) * nd].copy_from_slice(&row);
            fields.push(u);
        }
        Ok(DotEvaluation {
            system,
            factor,
            fields,
            measurements,
        })
    }

    /// Forward operator: boundary measurements plus the photon density field
    /// of every source (zero outside the disk).
    pub fn forward(&self, mu_a: &ScalarField) -> Result<(BoundaryData, Vec<ScalarField>)> {
        let eval = self.evaluate(mu_a)?;
        let fields = eval.fields.iter().map(|u| self.scatter(u)).collect();
        Ok((eval.measurements, fields))
    }

    /// Photon field of one source from a cached evaluation.
    pub fn photon_field(&self, eval: &DotEvaluation, source: usize) -> ScalarField {
        self.scatter(&eval.fields[source])
    }

    /// Gradient of `sum_{s,d} (G(mu)[s,d] - measured[s,d])^2` with respect to
    /// the per-pixel absorption, via the adjoint-state method: one extra
    /// solve per detector against the already-factored system.
    pub fn fidelity_gradient_from(
        &self,
        eval: &DotEvaluation,
        measured: &BoundaryData,
    ) -> Result<ScalarField> {
        self.residual_gradient(eval, measured, None)
    }

    fn residual_gradient(
        &self,
        eval: &DotEvaluation,
        measured: &BoundaryData,
        weights: Option<&[f64]>,
    ) -> Result<ScalarField> {
        let ns = self.optics.n_sources;
        let nd = self.optics.n_detectors;
        if measured.n_sources != ns || measured.n_detectors != nd {
            return Err(Error::GeometryMismatch(
                "measured data does not match the optode layout".into(),
            ));
        }
        // Adjoint field per detector: A lambda_d = c_d.
        let mut adjoints = Vec::with_capacity(nd);
        for d in 0..nd {
            let mut c = vec![0.0; self.n];
            for &(u, w) in &self.detector_weights[d] {
                c[u] += w;
            }
            adjoints.push(self.solve_system(&eval.system, &eval.factor, &c, d)?);
        }

        let mut grad_unknown = vec![0.0; self.n];
        let mut combo = vec![0.0; self.n];
        for s in 0..ns {
            combo.iter_mut().for_each(|v| *v = 0.0);
            for d in 0..nd {
                let mut r = eval.measurements.values[s * nd + d] - measured.values[s * nd + d];
                if let Some(w) = weights {
                    r *= w[s * nd + d];
                }
                if r == 0.0 {
                    continue;
                }
                for (c, l) in combo.iter_mut().zip(&adjoints[d]) {
                    *c += r * l;
                }
            }
            for ((g, c), u) in grad_unknown.iter_mut().zip(&combo).zip(&eval.fields[s]) {
                *g -= 2.0 * c * u;
            }
        }
        Ok(self.scatter(&grad_unknown))
    }

    /// Convenience: forward solve plus adjoint gradient in one call.
    pub fn fidelity_gradient(
        &self,
        mu_a: &ScalarField,
        measured: &BoundaryData,
    ) -> Result<ScalarField> {
        let eval = self.evaluate(mu_a)?;
        self.fidelity_gradient_from(&eval, measured)
    }

    /// Fidelity value at an absorption map.
    pub fn fidelity(&self, mu_a: &ScalarField, measured: &BoundaryData) -> Result<f64> {
        Ok(self.evaluate(mu_a)?.fidelity(measured))
    }

    /// The fixed data-metric weights per source/detector pair.
    pub fn pair_weights(&self) -> &[f64] {
        &self.pair_weights
    }

    /// Metric-weighted squared-residual sum `sum w_{sd} (m - g)^2`.
    pub fn weighted_fidelity(&self, eval: &DotEvaluation, measured: &BoundaryData) -> f64 {
        eval.measurements
            .values
            .iter()
            .zip(&measured.values)
            .zip(&self.pair_weights)
            .map(|((m, g), w)| w * (m - g) * (m - g))
            .sum()
    }

    /// Gradient of [`DotOperator::weighted_fidelity`] with respect to the
    /// per-pixel absorption; same adjoint machinery with weighted residuals.
    pub fn weighted_fidelity_gradient_from(
        &self,
        eval: &DotEvaluation,
        measured: &BoundaryData,
    ) -> Result<ScalarField> {
        self.residual_gradient(eval, measured, Some(&self.pair_weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{builtin, rasterize, GaussianStream, Modality};

    fn small_setup(n: usize) -> (GridGeometry, DotOperator) {
        let g = GridGeometry::new(n, n, 0.5, (0.0, 0.0), 0.22 * n as f64).unwrap();
        let model = DiffusionModel::uniform(g, 0.3, 1e-6).unwrap();
        let optics = OpticsGeometry {
            n_sources: 8,
            n_detectors: 8,
            source_sigma: 1.5,
            detector_sigma: 1.0,
            amplitude: 1.0,
        };
        let op = DotOperator::new(g, model, optics).unwrap();
        (g, op)
    }

    fn default_setup() -> (GridGeometry, DotOperator) {
        let g = GridGeometry::default();
        let model = DiffusionModel::uniform(g, 0.3, 1e-6).unwrap();
        let op = DotOperator::new(g, model, OpticsGeometry::default()).unwrap();
        (g, op)
    }

    #[test]
    fn interior_stencil_matches_five_point_formula() {
        let (g, op) = default_setup();
        let mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let sys = op.assemble(&mu).unwrap();
        let (d, h) = (0.3, g.h);
        // Center pixel is deep inside the disk with four interior neighbors.
        let i = op.unknown_index(g.ny / 2, g.nx / 2).unwrap();
        let left = op.unknown_index(g.ny / 2, g.nx / 2 - 1).unwrap();
        let up = op.unknown_index(g.ny / 2 - 1, g.nx / 2).unwrap();
        assert!((sys.entry(i, i) - (4.0 * d / (h * h) + 0.02)).abs() < 1e-12);
        assert!((sys.entry(i, left) + d / (h * h)).abs() < 1e-12);
        assert!((sys.entry(i, up) + d / (h * h)).abs() < 1e-12);
    }

    #[test]
    fn system_is_exactly_symmetric() {
        let (g, op) = small_setup(20);
        let mut rng = GaussianStream::new(12);
        let mu = ScalarField::from_values(
            g,
            (0..g.n_pixels())
                .map(|_| 0.02 + 0.005 * rng.next_normal().abs())
                .collect(),
            Unit::PerMillimeter,
        )
        .unwrap();
        let sys = op.assemble(&mu).unwrap();
        for i in 0..sys.n() {
            for j in i.saturating_sub(sys.bandwidth())..=i {
                assert_eq!(sys.entry(i, j), sys.entry(j, i));
            }
        }
    }

    #[test]
    fn system_has_m_matrix_sign_pattern() {
        let g = GridGeometry::new(24, 24, 0.5, (0.0, 0.0), 5.0).unwrap();
        let mut rng = GaussianStream::new(77);
        let d = ScalarField::from_values(
            g,
            (0..g.n_pixels())
                .map(|_| 0.2 + 0.1 * rng.next_normal().abs())
                .collect(),
            Unit::Millimeter,
        )
        .unwrap();
        let model = DiffusionModel::new(d, 1e-6).unwrap();
        let op = DotOperator::new(g, model, OpticsGeometry::default()).unwrap();
        let mu = ScalarField::from_values(
            g,
            (0..g.n_pixels())
                .map(|_| 0.01 + 0.01 * rng.next_normal().abs())
                .collect(),
            Unit::PerMillimeter,
        )
        .unwrap();
        let sys = op.assemble(&mu).unwrap();
        for i in 0..sys.n() {
            assert!(sys.entry(i, i) > 0.0, "diagonal {i}");
            for j in i.saturating_sub(sys.bandwidth())..i {
                assert!(sys.entry(i, j) <= 0.0, "off-diagonal ({i},{j})");
            }
        }
    }

    #[test]
    fn zero_robin_data_gives_zero_field() {
        let (g, op) = small_setup(20);
        let mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let q = vec![0.0; op.boundary_face_angles().len()];
        let u = op.solve_robin(&mu, &q).unwrap();
        assert!(u.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_amplitude_sources_give_zero_measurements() {
        let g = GridGeometry::new(24, 24, 0.5, (0.0, 0.0), 5.0).unwrap();
        let model = DiffusionModel::uniform(g, 0.3, 1e-6).unwrap();
        let optics = OpticsGeometry {
            amplitude: 0.0,
            ..OpticsGeometry::default()
        };
        let op = DotOperator::new(g, model, optics).unwrap();
        let mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let (data, fields) = op.forward(&mu).unwrap();
        assert!(data.values.iter().all(|&v| v == 0.0));
        assert!(fields
            .iter()
            .all(|f| f.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn maximum_principle_bounds_photon_fields() {
        let (g, op) = default_setup();
        let pair = builtin("phantom1").unwrap();
        let mu = rasterize(&pair, &g, Modality::Dot, 1e-6);
        let (_, fields) = op.forward(&mu).unwrap();
        for s in 0..op.optics.n_sources {
            let qmax = op
                .source_profile(s)
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            for &v in &fields[s].values {
                assert!(v >= -1e-12 * qmax, "negative photon density {v}");
                assert!(v <= qmax * (1.0 + 1e-12), "density {v} above {qmax}");
            }
        }
    }

    #[test]
    fn mirror_symmetry_across_x_axis() {
        let (_, op) = default_setup();
        let mu = ScalarField::constant(op.geometry, 0.02, Unit::PerMillimeter);
        let (data, _) = op.forward(&mu).unwrap();
        let ns = op.optics.n_sources;
        let nd = op.optics.n_detectors;
        for s in 0..ns {
            let ms = (ns - s) % ns;
            let row_norm: f64 = (0..nd).map(|d| data.at(s, d).powi(2)).sum::<f64>().sqrt();
            for d in 0..nd {
                let md = nd - 1 - d;
                let diff = (data.at(s, d) - data.at(ms, md)).abs();
                assert!(
                    diff < 1e-8 * row_norm,
                    "source {s} detector {d}: {} vs {}",
                    data.at(s, d),
                    data.at(ms, md)
                );
            }
        }
    }

    #[test]
    fn dihedral_rotation_leaves_uniform_measurements_invariant() {
        let (_, op) = default_setup();
        let mu = ScalarField::constant(op.geometry, 0.02, Unit::PerMillimeter);
        let (data, _) = op.forward(&mu).unwrap();
        let ns = op.optics.n_sources;
        let nd = op.optics.n_detectors;
        let quarter_s = ns / 4;
        let quarter_d = nd / 4;
        let scale = data.values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        for s in 0..ns {
            for d in 0..nd {
                let rot = data.at((s + quarter_s) % ns, (d + quarter_d) % nd);
                assert!(
                    (data.at(s, d) - rot).abs() < 1e-8 * scale,
                    "rotation invariance at ({s},{d})"
                );
            }
        }
    }

    #[test]
    fn raising_uniform_absorption_decreases_every_measurement() {
        let (g, op) = default_setup();
        let lo = ScalarField::constant(g, 0.01, Unit::PerMillimeter);
        let hi = ScalarField::constant(g, 0.03, Unit::PerMillimeter);
        let (dlo, _) = op.forward(&lo).unwrap();
        let (dhi, _) = op.forward(&hi).unwrap();
        for (a, b) in dlo.values.iter().zip(&dhi.values) {
            assert!(b < a, "expected strict decrease: {a} -> {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (g, op) = default_setup();
        let pair = builtin("phantom1").unwrap();
        let mu = rasterize(&pair, &g, Modality::Dot, 1e-6);
        let (a, _) = op.forward(&mu).unwrap();
        let (b, _) = op.forward(&mu).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn adjoint_solves_satisfy_system_residual() {
        let (g, op) = small_setup(32);
        let mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let eval = op.evaluate(&mu).unwrap();
        for d in 0..op.optics.n_detectors {
            let mut c = vec![0.0; op.n_unknowns()];
            for &(u, w) in &op.detector_weights[d] {
                c[u] += w;
            }
            let lambda = op
                .solve_system(&eval.system, &eval.factor, &c, d)
                .unwrap();
            let mut alc = vec![0.0; op.n_unknowns()];
            eval.system.mul_vec(&lambda, &mut alc);
            let rnorm: f64 = alc
                .iter()
                .zip(&c)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let cnorm: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(rnorm < 1e-10 * cnorm, "detector {d} residual {rnorm}");
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (g, op) = small_setup(24);
        let mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let eval = op.evaluate(&mu).unwrap();
        let grad = op
            .fidelity_gradient_from(&eval, &eval.measurements.clone())
            .unwrap();
        assert!(grad.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_is_zero_outside_disk() {
        let (g, op) = small_setup(24);
        let mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let mut measured = op.evaluate(&mu).unwrap().measurements;
        measured.values.iter_mut().for_each(|v| *v *= 1.1);
        let grad = op.fidelity_gradient(&mu, &measured).unwrap();
        for row in 0..g.ny {
            for col in 0..g.nx {
                if !g.in_disk(row, col) {
                    assert_eq!(grad.at(row, col), 0.0);
                }
            }
        }
        assert!(grad.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = GridGeometry::new(32, 32, 0.5, (0.0, 0.0), 7.0).unwrap();
        let model = DiffusionModel::uniform(g, 0.3, 1e-6).unwrap();
        let optics = OpticsGeometry {
            n_sources: 8,
            n_detectors: 8,
            source_sigma: 1.5,
            detector_sigma: 1.0,
            amplitude: 1.0,
        };
        let op = DotOperator::new(g, model, optics).unwrap();

        let mut rng = GaussianStream::new(31);
        let mut mu = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        for v in mu.values.iter_mut() {
            *v += 0.004 * rng.next_normal();
            *v = v.max(0.002);
        }
        // A fixed synthetic target so residuals are nonzero.
        let truth = ScalarField::constant(g, 0.015, Unit::PerMillimeter);
        let measured = op.evaluate(&truth).unwrap().measurements;

        let grad = op.fidelity_gradient(&mu, &measured).unwrap();
        let step = 1e-6;
        let mut checked = 0;
        let mut k = 0u64;
        while checked < 10 {
            k += 1;
            let row = 4 + (GaussianStream::new(500 + k).next_normal().abs() * 7.0) as usize % 24;
            let col = 4 + (GaussianStream::new(900 + k).next_normal().abs() * 7.0) as usize % 24;
            if !g.in_disk(row, col) {
                continue;
            }
            let i = g.idx(row, col);
            let mut plus = mu.clone();
            plus.values[i] += step;
            let mut minus = mu.clone();
            minus.values[i] -= step;
            let fp = op.fidelity(&plus, &measured).unwrap();
            let fm = op.fidelity(&minus, &measured).unwrap();
            let fd = (fp - fm) / (2.0 * step);
            let rel = (fd - grad.values[i]).abs() / grad.values[i].abs().max(1e-12);
            assert!(
                rel < 1e-4,
                "pixel ({row},{col}): fd {fd} vs adjoint {}",
                grad.values[i]
            );
            checked += 1;
        }
    }

    #[test]
    fn rejects_bad_model_parameters() {
        let g = GridGeometry::new(24, 24, 0.5, (0.0, 0.0), 5.0).unwrap();
        assert!(DiffusionModel::uniform(g, 0.0, 1e-6).is_err());
        assert!(DiffusionModel::uniform(g, 0.3, 0.0).is_err());
        let other = GridGeometry::new(20, 20, 0.5, (0.0, 0.0), 4.0).unwrap();
        let model = DiffusionModel::uniform(other, 0.3, 1e-6).unwrap();
        assert!(DotOperator::new(g, model, OpticsGeometry::default()).is_err());
    }

    #[test]
    fn boundary_data_csv_round_trip() {
        let (_, op) = small_setup(20);
        let mu = ScalarField::constant(op.geometry, 0.02, Unit::PerMillimeter);
        let (data, _) = op.forward(&mu).unwrap();
        let dir = std::env::temp_dir().join("jbmir_dot_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g2.csv");
        data.write_csv(&path, &op.optics, "0.3", Some("eta=0.02 seed=7"))
            .unwrap();
        let back = BoundaryData::read_csv(&path, data.n_sources, data.n_detectors).unwrap();
        assert_eq!(data.values, back.values);
    }
}
