//! The joint reconstruction objective and its four block gradients.
//!
//! For modalities i = 1, 2 (XCT, DOT) with images u_i and edge indicators
//! v_i in [0, 1], the objective is
//!
//! ```text
//! F = sum_i  |A_i(u_i) - g_i|^2
//!          + alpha_i h^2 sum_p v_i^2 |grad u_i|^2
//!          + beta_i  h^2 sum_p (eps_i |grad v_i|^2 + (1 - v_i)^2 / (4 eps_i))
//!                              * (1 + gamma_i (v_j - v_i)^2)
//! ```
//!
//! Data fidelity is a plain sum over measurement entries; domain integrals
//! carry the h^2 pixel quadrature weight. Gradients are derived from this
//! discrete form (discretize-then-optimize), so they match central finite
//! differences of `eval` to rounding.
//!
//! Every kernel branches on `gamma == 0` such that the zero-coupling path
//! never reads the other modality's edge field. Single-modality runs reuse
//! the identical code path, which is what makes the gamma = 0 reduction
//! bit-exact rather than merely close.

use serde::{Deserialize, Serialize};

use crate::dot::{BoundaryData, DotOperator};
use crate::error::{Error, Result};
use crate::grid::{backward_divergence, forward_gradient, GridGeometry, ScalarField, Unit};
use crate::xct::{radon_adjoint, radon_forward, ScanGeometry, Sinogram};

/// Regularization parameters of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityParams {
    /// Smoothness weight.
    pub alpha: f64,
    /// Edge weight.
    pub beta: f64,
    /// Edge-similarity coupling weight; zero decouples the modality.
    pub gamma: f64,
    /// Edge width of the indicator profile.
    pub eps: f64,
}

impl ModalityParams {
    pub fn validate(&self, gamma_cap: f64) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidParam(format!(
                "alpha, beta, eps must be positive; got {self:?}"
            )));
        }
        if !(self.gamma >= 0.0) || self.gamma > gamma_cap {
            return Err(Error::InvalidParam(format!(
                "gamma must lie in [0, {gamma_cap}]; got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn decoupled(&self) -> Self {
        Self {
            gamma: 0.0,
            ..*self
        }
    }
}

/// Full parameter set of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegParams {
    pub xct: ModalityParams,
    pub dot: ModalityParams,
    /// Upper bound accepted for the coupling weights.
    pub gamma_cap: f64,
}

impl Default for RegParams {
    /// The defaults reproduce the first benchmark experiment.
    fn default() -> Self {
        Self {
            xct: ModalityParams {
                alpha: 8.8e3,
                beta: 1.9e-3,
                gamma: 9.8,
                eps: 1e-4,
            },
            dot: ModalityParams {
                alpha: 1e5,
                beta: 6e-5,
                gamma: 5.0,
                eps: 1e-4,
            },
            gamma_cap: 10.0,
        }
    }
}

impl RegParams {
    pub fn validate(&self) -> Result<()> {
        self.xct.validate(self.gamma_cap)?;
        self.dot.validate(self.gamma_cap)
    }
}

/// The quadruple evolved by the alternating minimization.
#[derive(Debug, Clone)]
pub struct JointState {
    pub u1: ScalarField,
    pub v1: ScalarField,
    pub u2: ScalarField,
    pub v2: ScalarField,
}

impl JointState {
    pub fn validate(&self) -> Result<()> {
        let g = self.u1.geometry;
        for (name, f) in [
            ("u1", &self.u1),
            ("v1", &self.v1),
            ("u2", &self.u2),
            ("v2", &self.v2),
        ] {
            if f.geometry != g {
                return Err(Error::GeometryMismatch(format!(
                    "state field {name} has a different geometry"
                )));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("state field {name}")));
            }
        }
        for (name, v) in [("v1", &self.v1), ("v2", &self.v2)] {
            if !v.values.iter().all(|&x| (0.0..=1.0).contains(&x)) {
                return Err(Error::InvalidData(format!(
                    "edge indicator {name} leaves [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of one objective evaluation; `total` is always the fixed
/// order sum fidelity1 + smooth1 + edge1 + fidelity2 + smooth2 + edge2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub fidelity1: f64,
    pub smooth1: f64,
    pub edge1: f64,
    pub fidelity2: f64,
    pub smooth2: f64,
    pub edge2: f64,
    pub total: f64,
}

impl TermBreakdown {
    pub fn new(f1: f64, s1: f64, e1: f64, f2: f64, s2: f64, e2: f64) -> Self {
        Self {
            fidelity1: f1,
            smooth1: s1,
            edge1: e1,
            fidelity2: f2,
            smooth2: s2,
            edge2: e2,
            total: f1 + s1 + e1 + f2 + s2 + e2,
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub(crate) fn refresh_total(&mut self) {
        self.total = self.fidelity1
            + self.smooth1
            + self.edge1
            + self.fidelity2
            + self.smooth2
            + self.edge2;
    }
}

/// The DOT data term of the objective: the metric-weighted residual sum of
/// the operator, evaluated from a cached forward solve.
pub fn dot_fidelity_value(
    op: &DotOperator,
    eval: &crate::dot::DotEvaluation,
    data: &BoundaryData,
) -> f64 {
    op.weighted_fidelity(eval, data)
}

/// Gradient of the DOT data term from a cached forward evaluation.
pub fn dot_fidelity_gradient_value(
    op: &DotOperator,
    eval: &crate::dot::DotEvaluation,
    data: &BoundaryData,
) -> Result<ScalarField> {
    op.weighted_fidelity_gradient_from(eval, data)
}

/// Data term of one modality. `None` marks an absent modality in
/// single-modality runs; it contributes nothing.
pub enum DataFidelity {
    Xct {
        scan: ScanGeometry,
        data: Sinogram,
    },
    Dot {
        op: DotOperator,
        data: BoundaryData,
    },
    None,
}

impl DataFidelity {
    /// Squared-residual data fit at `u` (plain sum over entries).
    pub fn eval(&self, u: &ScalarField) -> Result<f64> {
        match self {
            DataFidelity::Xct { scan, data } => {
                let sino = radon_forward(u, scan);
                Ok(sino
                    .values
                    .iter()
                    .zip(&data.values)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum())
            }
            DataFidelity::Dot { op, data } => {
                let eval = op.evaluate(u)?;
                Ok(dot_fidelity_value(op, &eval, data))
            }
            DataFidelity::None => Ok(0.0),
        }
    }

    /// Gradient of the data fit with respect to `u`.
    pub fn gradient(&self, u: &ScalarField) -> Result<ScalarField> {
        match self {
            DataFidelity::Xct { scan, data } => {
                let mut resid = radon_forward(u, scan);
                for (r, g) in resid.values.iter_mut().zip(&data.values) {
                    *r -= g;
                }
                let mut adj = radon_adjoint(&resid, &u.geometry);
                adj.values.iter_mut().for_each(|v| *v *= 2.0);
                Ok(adj)
            }
            DataFidelity::Dot { op, data } => {
                let eval = op.evaluate(u)?;
                dot_fidelity_gradient_value(op, &eval, data)
            }
            DataFidelity::None => Ok(ScalarField::zeros(u.geometry, Unit::Dimensionless)),
        }
    }

    pub fn as_dot(&self) -> Option<(&DotOperator, &BoundaryData)> {
        match self {
            DataFidelity::Dot { op, data } => Some((op, data)),
            _ => None,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, DataFidelity::None)
    }
}

/// Smoothness term `alpha h^2 sum_p v_p^2 |grad u|_p^2`.
pub fn smooth_term(u: &ScalarField, v: &ScalarField, alpha: f64) -> f64 {
    debug_assert_eq!(u.geometry, v.geometry);
    let g = forward_gradient(u);
    let h2 = u.geometry.h * u.geometry.h;
    let mut sum = 0.0;
    for i in 0..u.values.len() {
        let m = g.x[i] * g.x[i] + g.y[i] * g.y[i];
        sum += v.values[i] * v.values[i] * m;
    }
    alpha * h2 * sum
}

/// Edge-indicator density `eps |grad v|^2 + (1 - v)^2 / (4 eps)` per pixel.
fn at_density(v: &ScalarField, eps: f64) -> Vec<f64> {
    let g = forward_gradient(v);
    let quarter = 1.0 / (4.0 * eps);
    (0..v.values.len())
        .map(|i| {
            let m = g.x[i] * g.x[i] + g.y[i] * g.y[i];
            let one_minus = 1.0 - v.values[i];
            eps * m + one_minus * one_minus * quarter
        })
        .collect()
}

/// Edge term `beta h^2 sum_p AT_p(v_i) (1 + gamma (v_j - v_i)^2)`. With
/// `gamma == 0` the other indicator is never read.
pub fn edge_term(v_own: &ScalarField, v_other: &ScalarField, p: &ModalityParams) -> f64 {
    let at = at_density(v_own, p.eps);
    let h2 = v_own.geometry.h * v_own.geometry.h;
    let mut sum = 0.0;
    if p.gamma == 0.0 {
        for a in &at {
            sum += a;
        }
    } else {
        debug_assert_eq!(v_own.geometry, v_other.geometry);
        for (i, a) in at.iter().enumerate() {
            let dv = v_other.values[i] - v_own.values[i];
            sum += a * (1.0 + p.gamma * dv * dv);
        }
    }
    p.beta * h2 * sum
}

/// Gradient of the smoothness term with respect to `u`:
/// `-2 alpha h^2 div(v^2 grad u)`.
pub fn smooth_gradient_u(u: &ScalarField, v: &ScalarField, alpha: f64) -> ScalarField {
    debug_assert_eq!(u.geometry, v.geometry);
    let mut flux = forward_gradient(u);
    for i in 0..u.values.len() {
        let w = v.values[i] * v.values[i];
        flux.x[i] *= w;
        flux.y[i] *= w;
    }
    let mut out = backward_divergence(&flux);
    let scale = -2.0 * alpha * u.geometry.h * u.geometry.h;
    out.values.iter_mut().for_each(|x| *x *= scale);
    out
}

/// Combine a fidelity gradient with the smoothness gradient; the single
/// composition point shared by every u-block caller.
pub fn compose_u_gradient(mut fidelity_grad: ScalarField, smooth_grad: &ScalarField) -> ScalarField {
    for (a, b) in fidelity_grad.values.iter_mut().zip(&smooth_grad.values) {
        *a += b;
    }
    fidelity_grad
}

/// Exact gradient of the discrete objective with respect to the edge
/// indicator `v_own`, all terms included:
/// (a) `2 alpha h^2 v |grad u|^2`,
/// (b) `beta h^2 [-2 eps div(w grad v) - w (1 - v)/(2 eps)
///      - 2 gamma (v_other - v) AT(v)]` with `w = 1 + gamma (v_other - v)^2`,
/// (c) the cross term `2 beta_other gamma_other h^2 (v - v_other)
///      AT(v_other)` from the other modality's integrand.
/// Zero-coupling branches skip (b3)/(c) and never read `v_other`.
pub fn v_block_gradient(
    u_own: &ScalarField,
    v_own: &ScalarField,
    v_other: &ScalarField,
    own: &ModalityParams,
    other: &ModalityParams,
) -> ScalarField {
    let geom = v_own.geometry;
    let n = v_own.values.len();
    let h2 = geom.h * geom.h;

    let gu = forward_gradient(u_own);
    let at_own = at_density(v_own, own.eps);

    // Weighted indicator flux w * grad v; w == 1 exactly when gamma == 0.
    let mut flux = forward_gradient(v_own);
    if own.gamma != 0.0 {
        for i in 0..n {
            let dv = v_other.values[i] - v_own.values[i];
            let w = 1.0 + own.gamma * dv * dv;
            flux.x[i] *= w;
            flux.y[i] *= w;
        }
    }
    let div_flux = backward_divergence(&flux);

    let half_eps = 1.0 / (2.0 * own.eps);
    let mut out = ScalarField::zeros(geom, Unit::Dimensionless);
    for i in 0..n {
        let gu2 = gu.x[i] * gu.x[i] + gu.y[i] * gu.y[i];
        let one_minus = 1.0 - v_own.values[i];
        let w = if own.gamma == 0.0 {
            1.0
        } else {
            let dv = v_other.values[i] - v_own.values[i];
            1.0 + own.gamma * dv * dv
        };
        out.values[i] = 2.0 * own.alpha * h2 * v_own.values[i] * gu2
            + own.beta * h2 * (-2.0 * own.eps * div_flux.values[i] - w * one_minus * half_eps);
    }
    if own.gamma != 0.0 {
        for i in 0..n {
            let dv = v_other.values[i] - v_own.values[i];
            out.values[i] += own.beta * h2 * (-2.0 * own.gamma) * dv * at_own[i];
        }
    }
    if other.gamma != 0.0 {
        let at_other = at_density(v_other, other.eps);
        for i in 0..n {
            let dv = v_own.values[i] - v_other.values[i];
            out.values[i] += other.beta * h2 * 2.0 * other.gamma * dv * at_other[i];
        }
    }
    out
}

/// One joint reconstruction problem: both data terms plus the parameters,
/// bound to a single grid.
pub struct JointProblem {
    pub geometry: GridGeometry,
    pub fidelity: [DataFidelity; 2],
    pub params: RegParams,
}

impl JointProblem {
    pub fn new(
        geometry: GridGeometry,
        fidelity1: DataFidelity,
        fidelity2: DataFidelity,
        params: RegParams,
    ) -> Result<Self> {
        geometry.validate()?;
        params.validate()?;
        if let DataFidelity::Dot { op, data } = &fidelity2 {
            if op.geometry != geometry {
                return Err(Error::GeometryMismatch(
                    "DOT operator grid differs from problem grid".into(),
                ));
            }
            if data.n_sources != op.optics.n_sources || data.n_detectors != op.optics.n_detectors {
                return Err(Error::GeometryMismatch(
                    "DOT data shape differs from optode layout".into(),
                ));
            }
        }
        if let DataFidelity::Xct { scan, data } = &fidelity1 {
            scan.validate()?;
            if data.scan != *scan {
                return Err(Error::GeometryMismatch(
                    "sinogram scan differs from problem scan".into(),
                ));
            }
        }
        if matches!(fidelity1, DataFidelity::Dot { .. })
            || matches!(fidelity2, DataFidelity::Xct { .. })
        {
            return Err(Error::InvalidParam(
                "modality 1 must be XCT and modality 2 DOT".into(),
            ));
        }
        Ok(Self {
            geometry,
            fidelity: [fidelity1, fidelity2],
            params,
        })
    }

    fn check_state(&self, state: &JointState) -> Result<()> {
        state.validate()?;
        if state.u1.geometry != self.geometry {
            return Err(Error::GeometryMismatch(
                "state geometry differs from problem grid".into(),
            ));
        }
        Ok(())
    }

    /// Evaluate all six objective terms.
    pub fn eval(&self, state: &JointState) -> Result<TermBreakdown> {
        self.check_state(state)?;
        let f1 = self.fidelity[0].eval(&state.u1)?;
        let s1 = smooth_term(&state.u1, &state.v1, self.params.xct.alpha);
        let e1 = edge_term(&state.v1, &state.v2, &self.params.xct);
        let f2 = self.fidelity[1].eval(&state.u2)?;
        let s2 = smooth_term(&state.u2, &state.v2, self.params.dot.alpha);
        let e2 = edge_term(&state.v2, &state.v1, &self.params.dot);
        Ok(TermBreakdown::new(f1, s1, e1, f2, s2, e2))
    }

    /// Gradient of the objective restricted to the XCT image.
    pub fn grad_u1(&self, state: &JointState) -> Result<ScalarField> {
        self.check_state(state)?;
        let fid = self.fidelity[0].gradient(&state.u1)?;
        let sm = smooth_gradient_u(&state.u1, &state.v1, self.params.xct.alpha);
        Ok(compose_u_gradient(fid, &sm))
    }

    /// Gradient restricted to the XCT edge indicator.
    pub fn grad_v1(&self, state: &JointState) -> Result<ScalarField> {
        self.check_state(state)?;
        Ok(v_block_gradient(
            &state.u1,
            &state.v1,
            &state.v2,
            &self.params.xct,
            &self.params.dot,
        ))
    }

    /// Gradient restricted to the DOT image.
    pub fn grad_u2(&self, state: &JointState) -> Result<ScalarField> {
        self.check_state(state)?;
        let fid = self.fidelity[1].gradient(&state.u2)?;
        let sm = smooth_gradient_u(&state.u2, &state.v2, self.params.dot.alpha);
        Ok(compose_u_gradient(fid, &sm))
    }

    /// Gradient restricted to the DOT edge indicator.
    pub fn grad_v2(&self, state: &JointState) -> Result<ScalarField> {
        self.check_state(state)?;
        Ok(v_block_gradient(
            &state.u2,
            &state.v2,
            &state.v1,
            &self.params.dot,
            &self.params.xct,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dot::{DiffusionModel, OpticsGeometry};
    use crate::phantom::GaussianStream;

    pub(crate) fn small_geometry() -> GridGeometry {
        GridGeometry::new(16, 16, 0.5, (0.0, 0.0), 3.5).unwrap()
    }

    fn small_scan() -> ScanGeometry {
        ScanGeometry {
            n_views: 10,
            n_rays: 20,
            ray_spacing: 0.4,
            sample_step: 0.25,
        }
    }

    fn small_optics() -> OpticsGeometry {
        OpticsGeometry {
            n_sources: 8,
            n_detectors: 8,
            source_sigma: 1.2,
            detector_sigma: 0.8,
            amplitude: 1.0,
        }
    }

    fn small_params() -> RegParams {
        RegParams {
            xct: ModalityParams {
                alpha: 2.0,
                beta: 0.5,
                gamma: 3.0,
                eps: 1e-2,
            },
            dot: ModalityParams {
                alpha: 4.0,
                beta: 0.25,
                gamma: 1.5,
                eps: 2e-2,
            },
            gamma_cap: 10.0,
        }
    }

    fn random_state(g: GridGeometry, seed: u64) -> JointState {
        let mut rng = GaussianStream::new(seed);
        let field = |rng: &mut GaussianStream, lo: f64, hi: f64| {
            let vals: Vec<f64> = (0..g.n_pixels())
                .map(|_| {
                    let t = (rng.next_normal() * 0.2 + 0.5).clamp(0.0, 1.0);
                    lo + t * (hi - lo)
                })
                .collect();
            ScalarField::from_values(g, vals, Unit::Dimensionless).unwrap()
        };
        JointState {
            u1: field(&mut rng, 0.0, 2.0),
            v1: field(&mut rng, 0.2, 0.95),
            u2: field(&mut rng, 0.005, 0.04),
            v2: field(&mut rng, 0.2, 0.95),
        }
    }

    pub(crate) fn small_problem(seed: u64) -> (JointProblem, JointState) {
        let g = small_geometry();
        let scan = small_scan();
        let state = random_state(g, seed);
        let truth = random_state(g, seed + 1000);
        let g1 = radon_forward(&truth.u1, &scan);
        let op = DotOperator::new(
            g,
            DiffusionModel::uniform(g, 0.3, 1e-6).unwrap(),
            small_optics(),
        )
        .unwrap();
        let (g2, _) = op.forward(&truth.u2).unwrap();
        let problem = JointProblem::new(
            g,
            DataFidelity::Xct { scan, data: g1 },
            DataFidelity::Dot { op, data: g2 },
            small_params(),
        )
        .unwrap();
        (problem, state)
    }

    #[test]
    fn consistent_flat_state_has_zero_objective() {
        let g = small_geometry();
        let scan = small_scan();
        let u1 = ScalarField::constant(g, 1.5, Unit::PerMillimeter);
        let u2 = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let v = ScalarField::constant(g, 1.0, Unit::Dimensionless);
        let g1 = radon_forward(&u1, &scan);
        let op = DotOperator::new(
            g,
            DiffusionModel::uniform(g, 0.3, 1e-6).unwrap(),
            small_optics(),
        )
        .unwrap();
        let (g2, _) = op.forward(&u2).unwrap();
        let problem = JointProblem::new(
            g,
            DataFidelity::Xct { scan, data: g1 },
            DataFidelity::Dot { op, data: g2 },
            small_params(),
        )
        .unwrap();
        let state = JointState {
            u1,
            v1: v.clone(),
            u2,
            v2: v,
        };
        let b = problem.eval(&state).unwrap();
        assert_eq!(b.fidelity1, 0.0);
        assert_eq!(b.smooth1, 0.0);
        assert_eq!(b.edge1, 0.0);
        assert_eq!(b.fidelity2, 0.0);
        assert_eq!(b.smooth2, 0.0);
        assert_eq!(b.edge2, 0.0);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn all_zero_indicators_give_closed_form_edge_terms() {
        let (problem, mut state) = small_problem(3);
        let g = state.v1.geometry;
        state.v1 = ScalarField::zeros(g, Unit::Dimensionless);
        state.v2 = ScalarField::zeros(g, Unit::Dimensionless);
        let b = problem.eval(&state).unwrap();
        let area = g.n_pixels() as f64 * g.h * g.h;
        let expect1 = problem.params.xct.beta * area / (4.0 * problem.params.xct.eps);
        let expect2 = problem.params.dot.beta * area / (4.0 * problem.params.dot.eps);
        assert!((b.edge1 - expect1).abs() < 1e-12 * expect1);
        assert!((b.edge2 - expect2).abs() < 1e-12 * expect2);
    }

    #[test]
    fn eval_matches_scalar_loop_oracle() {
        let g = GridGeometry::new(8, 8, 0.5, (0.0, 0.0), 1.8).unwrap();
        let scan = ScanGeometry {
            n_views: 5,
            n_rays: 9,
            ray_spacing: 0.5,
            sample_step: 0.25,
        };
        let state = random_state(g, 9);
        let truth = random_state(g, 17);
        let g1 = radon_forward(&truth.u1, &scan);
        let op = DotOperator::new(
            g,
            DiffusionModel::uniform(g, 0.3, 1e-6).unwrap(),
            OpticsGeometry {
                n_sources: 4,
                n_detectors: 4,
                source_sigma: 1.0,
                detector_sigma: 0.7,
                amplitude: 1.0,
            },
        )
        .unwrap();
        let (g2, _) = op.forward(&truth.u2).unwrap();
        // Keep handles for the oracle before the problem takes ownership.
        let g1_vals = g1.values.clone();
        let g2_vals = g2.values.clone();
        let sino = radon_forward(&state.u1, &scan);
        let meas = op.evaluate(&state.u2).unwrap().measurements.values.clone();
        let pair_w = op.pair_weights().to_vec();
        let params = small_params();
        let problem = JointProblem::new(
            g,
            DataFidelity::Xct { scan, data: g1 },
            DataFidelity::Dot { op, data: g2 },
            params,
        )
        .unwrap();
        let got = problem.eval(&state).unwrap();

        // Straightforward scalar re-evaluation of every term.
        let h2 = g.h * g.h;
        let n = g.n_pixels();
        let fd = |f: &ScalarField, row: usize, col: usize| {
            let gx = if col + 1 < g.nx {
                (f.at(row, col + 1) - f.at(row, col)) / g.h
            } else {
                0.0
            };
            let gy = if row + 1 < g.ny {
                (f.at(row + 1, col) - f.at(row, col)) / g.h
            } else {
                0.0
            };
            gx * gx + gy * gy
        };
        let fid1: f64 = sino
            .values
            .iter()
            .zip(&g1_vals)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let fid2: f64 = meas
            .iter()
            .zip(&g2_vals)
            .zip(&pair_w)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum();
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        let mut e1 = 0.0;
        let mut e2 = 0.0;
        for row in 0..g.ny {
            for col in 0..g.nx {
                let i = g.idx(row, col);
                s1 += state.v1.values[i].powi(2) * fd(&state.u1, row, col);
                s2 += state.v2.values[i].powi(2) * fd(&state.u2, row, col);
                let p = &params.xct;
                let at1 = p.eps * fd(&state.v1, row, col)
                    + (1.0 - state.v1.values[i]).powi(2) / (4.0 * p.eps);
                e1 += at1 * (1.0 + p.gamma * (state.v2.values[i] - state.v1.values[i]).powi(2));
                let q = &params.dot;
                let at2 = q.eps * fd(&state.v2, row, col)
                    + (1.0 - state.v2.values[i]).powi(2) / (4.0 * q.eps);
                e2 += at2 * (1.0 + q.gamma * (state.v1.values[i] - state.v2.values[i]).powi(2));
            }
        }
        s1 *= params.xct.alpha * h2;
        s2 *= params.dot.alpha * h2;
        e1 *= params.xct.beta * h2;
        e2 *= params.dot.beta * h2;
        let _ = n;
        for (name, a, b) in [
            ("fid1", got.fidelity1, fid1),
            ("smooth1", got.smooth1, s1),
            ("edge1", got.edge1, e1),
            ("fid2", got.fidelity2, fid2),
            ("smooth2", got.smooth2, s2),
            ("edge2", got.edge2, e2),
        ] {
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1e-300),
                "{name}: {a} vs oracle {b}"
            );
        }
    }

    #[test]
    fn terms_are_nonnegative_for_random_states() {
        for seed in 0..5 {
            let (problem, state) = small_problem(seed);
            let b = problem.eval(&state).unwrap();
            for t in [b.fidelity1, b.smooth1, b.edge1, b.fidelity2, b.smooth2, b.edge2] {
                assert!(t >= 0.0);
            }
            assert!(
                (b.total - (b.fidelity1 + b.smooth1 + b.edge1 + b.fidelity2 + b.smooth2 + b.edge2))
                    .abs()
                    == 0.0
            );
        }
    }

    #[test]
    fn zero_coupling_splits_into_single_modality_objectives() {
        let (mut problem, state) = small_problem(21);
        problem.params.xct.gamma = 0.0;
        problem.params.dot.gamma = 0.0;
        let joint = problem.eval(&state).unwrap();

        let s1 = smooth_term(&state.u1, &state.v1, problem.params.xct.alpha);
        let e1 = edge_term(&state.v1, &state.v1, &problem.params.xct);
        let s2 = smooth_term(&state.u2, &state.v2, problem.params.dot.alpha);
        let e2 = edge_term(&state.v2, &state.v2, &problem.params.dot);
        let f1 = problem.fidelity[0].eval(&state.u1).unwrap();
        let f2 = problem.fidelity[1].eval(&state.u2).unwrap();
        let split = (f1 + s1 + e1) + (f2 + s2 + e2);
        assert!((joint.total - split).abs() <= 1e-14 * split.abs());
        // The per-term values are bit-identical: the gamma = 0 kernels never
        // read the other indicator at all.
        assert_eq!(joint.edge1, e1);
        assert_eq!(joint.edge2, e2);
    }

    #[test]
    fn swapping_modalities_preserves_the_total() {
        // Build a symmetric problem twice with the roles exchanged and check
        // the totals agree. Both data terms must be swappable, so use None
        // fidelities and exercise the regularizer symmetry.
        let g = small_geometry();
        let state = random_state(g, 31);
        let params = small_params();
        let forward = JointProblem::new(
            g,
            DataFidelity::None,
            DataFidelity::None,
            params,
        )
        .unwrap();
        let swapped_params = RegParams {
            xct: params.dot,
            dot: params.xct,
            gamma_cap: params.gamma_cap,
        };
        let swapped = JointProblem::new(
            g,
            DataFidelity::None,
            DataFidelity::None,
            swapped_params,
        )
        .unwrap();
        let swapped_state = JointState {
            u1: state.u2.clone(),
            v1: state.v2.clone(),
            u2: state.u1.clone(),
            v2: state.v1.clone(),
        };
        let a = forward.eval(&state).unwrap();
        let b = swapped.eval(&swapped_state).unwrap();
        assert!((a.total - b.total).abs() <= 1e-14 * a.total.abs());
        assert_eq!(a.smooth1, b.smooth2);
        assert_eq!(a.edge1, b.edge2);
    }

    #[test]
    fn stationary_points_have_zero_gradients() {
        let g = small_geometry();
        let scan = small_scan();
        let u1 = ScalarField::constant(g, 1.0, Unit::PerMillimeter);
        let u2 = ScalarField::constant(g, 0.02, Unit::PerMillimeter);
        let ones = ScalarField::constant(g, 1.0, Unit::Dimensionless);
        let g1 = radon_forward(&u1, &scan);
        let op = DotOperator::new(
            g,
            DiffusionModel::uniform(g, 0.3, 1e-6).unwrap(),
            small_optics(),
        )
        .unwrap();
        let (g2, _) = op.forward(&u2).unwrap();
        let problem = JointProblem::new(
            g,
            DataFidelity::Xct { scan, data: g1 },
            DataFidelity::Dot { op, data: g2 },
            small_params(),
        )
        .unwrap();
        let state = JointState {
            u1,
            v1: ones.clone(),
            u2,
            v2: ones,
        };
        for (name, grad) in [
            ("u1", problem.grad_u1(&state).unwrap()),
            ("v1", problem.grad_v1(&state).unwrap()),
            ("u2", problem.grad_u2(&state).unwrap()),
            ("v2", problem.grad_v2(&state).unwrap()),
        ] {
            let max = grad.values.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
            assert!(max < 1e-10, "{name} gradient max {max}");
        }
    }

    #[test]
    fn v1_smoothness_factor_vanishes_with_zero_indicator() {
        let (problem, mut state) = small_problem(41);
        state.v1 = ScalarField::zeros(state.v1.geometry, Unit::Dimensionless);
        // With v1 = 0 the smoothness term contributes nothing to grad_u1.
        let grad = problem.grad_u1(&state).unwrap();
        let fid_only = problem.fidelity[0].gradient(&state.u1).unwrap();
        for (a, b) in grad.values.iter().zip(&fid_only.values) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cross_term_matches_closed_form_when_own_terms_vanish() {
        let (problem, mut state) = small_problem(55);
        let g = state.v1.geometry;
        state.u1 = ScalarField::constant(g, 0.7, Unit::PerMillimeter);
        state.v1 = ScalarField::constant(g, 1.0, Unit::Dimensionless);
        let grad = problem.grad_v1(&state).unwrap();
        let q = &problem.params.dot;
        let at2 = at_density(&state.v2, q.eps);
        let h2 = g.h * g.h;
        for i in 0..g.n_pixels() {
            let expect =
                q.beta * h2 * 2.0 * q.gamma * (1.0 - state.v2.values[i]) * at2[i];
            assert!(
                (grad.values[i] - expect).abs() <= 1e-12 * expect.abs().max(1e-12),
                "pixel {i}: {} vs {expect}",
                grad.values[i]
            );
        }
    }

    #[test]
    fn rejects_mismatched_construction() {
        let g = small_geometry();
        let scan = small_scan();
        let wrong_scan = ScanGeometry {
            n_views: 7,
            ..scan
        };
        let sino = Sinogram::zeros(wrong_scan);
        assert!(JointProblem::new(
            g,
            DataFidelity::Xct { scan, data: sino },
            DataFidelity::None,
            small_params(),
        )
        .is_err());

        let mut bad = small_params();
        bad.xct.gamma = 50.0;
        assert!(JointProblem::new(g, DataFidelity::None, DataFidelity::None, bad).is_err());
    }
}
