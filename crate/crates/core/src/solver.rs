//! Projected backtracking gradient descent and the four-block alternating
//! minimization, plus the single-modality baseline and the initializers.
//!
//! Each outer iteration minimizes the joint objective over u1, v1, u2, v2 in
//! that fixed order, running a budget of backtracking steps per block with
//! the other blocks frozen. Every block evaluates only the objective terms
//! that depend on it; terms the block cannot change are constants and stay
//! out of the Armijo comparison. Because the zero-coupling kernels never read
//! the other modality, a joint run with gamma = 0 executes bit-identical
//! arithmetic to the two single-modality runs.

use std::path::Path;

use serde::Serialize;

use crate::dot::{BoundaryData, DotEvaluation, DotOperator};
use crate::error::{Error, Result};
use crate::functional::{
    compose_u_gradient, dot_fidelity_gradient_value, dot_fidelity_value, edge_term,
    smooth_gradient_u, smooth_term, v_block_gradient, DataFidelity, JointProblem, JointState,
    ModalityParams, TermBreakdown,
};
use crate::grid::{GridGeometry, ScalarField, Unit};
use crate::metrics::{ssim_global, SsimDomain, SsimParams};
use crate::phantom::Modality;

/// Starting background for the DOT warm start, in 1/mm.
pub const DOT_WARMSTART_BACKGROUND: f64 = 0.01;

/// Armijo backtracking parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineSearchParams {
    /// Sufficient-decrease constant in (0, 1).
    pub c: f64,
    /// Step shrink factor in (0, 1).
    pub rho: f64,
    /// Default initial step for the standalone operation.
    pub t0: f64,
    /// Number of shrinks allowed before a step is declared stalled.
    pub max_backtracks: u32,
}

impl Default for LineSearchParams {
    fn default() -> Self {
        Self {
            c: 1e-4,
            rho: 0.5,
            t0: 1.0,
            max_backtracks: 40,
        }
    }
}

impl LineSearchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c < 1.0) || !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidParam(
                "line search needs c, rho in (0, 1)".into(),
            ));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::InvalidParam("initial step must be positive".into()));
        }
        Ok(())
    }
}

/// Iteration budget of the alternating scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleParams {
    /// Outer iterations of the four-block sweep.
    pub outer: usize,
    /// Backtracking steps per block and sweep.
    pub inner: usize,
    /// Fidelity-only descent steps for the DOT image initializer.
    pub dot_warmstart: usize,
    /// Edge-segmentation steps for the DOT indicator initializer.
    pub dot_edge_init: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            outer: 80,
            inner: 10,
            dot_warmstart: 50,
            dot_edge_init: 20,
        }
    }
}

/// Which variable a descent step touched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    U1,
    V1,
    U2,
    V2,
    InitU2,
    InitV2,
}

impl Block {
    /// True for blocks of the main alternating loop (not initialization).
    pub fn is_main(self) -> bool {
        matches!(self, Block::U1 | Block::V1 | Block::U2 | Block::V2)
    }

    fn memory_slot(self) -> usize {
        match self {
            Block::U1 => 0,
            Block::V1 => 1,
            Block::U2 => 2,
            Block::V2 => 3,
            Block::InitU2 => 4,
            Block::InitV2 => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Accepted,
    /// The gradient vanished; the block is at a stationary point.
    Converged,
    /// No step within the backtrack budget satisfied the Armijo test.
    Stalled,
}

/// One log entry per attempted block step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub outer: usize,
    pub block: Block,
    pub step: usize,
    pub status: StepStatus,
    pub step_size: f64,
    pub breakdown: TermBreakdown,
    /// SSIM of the block's image against the truth, when one was supplied.
    pub ssim: Option<f64>,
}

/// Full per-step history of a reconstruction run.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Totals of the accepted main-loop records, in order.
    pub fn accepted_main_totals(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.block.is_main() && r.status == StepStatus::Accepted)
            .map(|r| r.breakdown.total)
            .collect()
    }
}

/// Result of one projected backtracking step.
#[derive(Debug)]
pub enum BacktrackOutcome {
    Accepted { x: Vec<f64>, value: f64, step: f64 },
    Converged,
    Stalled,
}

/// One projected gradient step with Armijo backtracking: try
/// `x' = project(x - t g)` for `t in {t0 rho^k}` and accept the first trial
/// with `f(x') <= f(x) - c t |g|^2`. A vanishing gradient reports
/// convergence; exhausting the backtrack budget reports a stall. Non-finite
/// trial values are treated as rejections; a non-finite input value or
/// gradient is a hard error.
pub fn backtracking_step(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    f0: f64,
    gradient: &[f64],
    x: &[f64],
    project: impl Fn(&mut [f64]),
    ls: &LineSearchParams,
    t0: f64,
) -> Result<BacktrackOutcome> {
    ls.validate()?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    if !(t0 > 0.0) || !t0.is_finite() {
        return Err(Error::InvalidParam(format!("initial step {t0} invalid")));
    }
    let gnorm2: f64 = gradient.iter().map(|g| g * g).sum();
    if gnorm2 == 0.0 {
        return Ok(BacktrackOutcome::Converged);
    }
    let mut t = t0;
    for _ in 0..=ls.max_backtracks {
        let mut trial: Vec<f64> = x
            .iter()
            .zip(gradient)
            .map(|(xi, gi)| xi - t * gi)
            .collect();
        project(&mut trial);
        let ft = f(&trial)?;
        if ft.is_finite() && ft <= f0 - ls.c * t * gnorm2 {
            return Ok(BacktrackOutcome::Accepted {
                x: trial,
                value: ft,
                step: t,
            });
        }
        t *= ls.rho;
    }
    Ok(BacktrackOutcome::Stalled)
}

#[derive(Debug, Clone, Copy)]
enum TermSlot {
    Fid1,
    Smooth1,
    Edge1,
    Fid2,
    Smooth2,
    Edge2,
}

/// Evaluation of one block's restricted objective, together with the values
/// of every full-objective term the block's variable influences (for the
/// log) and, for the DOT image block, the reusable solve state.
struct BlockEval {
    value: f64,
    patch: Vec<(TermSlot, f64)>,
    dot: Option<DotEvaluation>,
}

struct Ctx<'t> {
    breakdown: TermBreakdown,
    log: Vec<StepRecord>,
    memory: [Option<f64>; 6],
    dot_cache: Option<DotEvaluation>,
    truth_u1: Option<&'t ScalarField>,
    truth_u2: Option<&'t ScalarField>,
}

impl<'t> Ctx<'t> {
    fn new(truth_u1: Option<&'t ScalarField>, truth_u2: Option<&'t ScalarField>) -> Self {
        Self {
            breakdown: TermBreakdown::zero(),
            log: Vec::new(),
            memory: [None; 6],
            dot_cache: None,
            truth_u1,
            truth_u2,
        }
    }

    fn apply_patch(&mut self, patch: &[(TermSlot, f64)]) {
        for &(slot, v) in patch {
            match slot {
                TermSlot::Fid1 => self.breakdown.fidelity1 = v,
                TermSlot::Smooth1 => self.breakdown.smooth1 = v,
                TermSlot::Edge1 => self.breakdown.edge1 = v,
                TermSlot::Fid2 => self.breakdown.fidelity2 = v,
                TermSlot::Smooth2 => self.breakdown.smooth2 = v,
                TermSlot::Edge2 => self.breakdown.edge2 = v,
            }
        }
        self.breakdown.refresh_total();
    }

    fn record(
        &mut self,
        block: Block,
        outer: usize,
        step: usize,
        status: StepStatus,
        step_size: f64,
        ssim: Option<f64>,
    ) {
        self.log.push(StepRecord {
            outer,
            block,
            step,
            status,
            step_size,
            breakdown: self.breakdown,
            ssim,
        });
    }
}

fn ssim_against(truth: Option<&ScalarField>, geometry: GridGeometry, x: &[f64]) -> Option<f64> {
    truth.and_then(|t| {
        let field = ScalarField::from_values(geometry, x.to_vec(), Unit::PerMillimeter).ok()?;
        ssim_global(&field, t, SsimDomain::Disk, &SsimParams::default()).ok()
    })
}

/// Run `inner` backtracking steps of one block. `current` must be the
/// block's restricted evaluation at the entering `x`; the final evaluation
/// (always at the returned `x`) is handed back for reuse.
#[allow(clippy::too_many_arguments)]
fn descend_block<E, G, P>(
    block: Block,
    outer: usize,
    inner: usize,
    x: &mut Vec<f64>,
    mut current: BlockEval,
    eval: E,
    grad: G,
    project: P,
    ls: &LineSearchParams,
    ctx: &mut Ctx<'_>,
    geometry: GridGeometry,
    truth: Option<&ScalarField>,
) -> Result<BlockEval>
where
    E: Fn(&[f64]) -> Result<BlockEval>,
    G: Fn(&[f64], &BlockEval) -> Result<Vec<f64>>,
    P: Fn(&mut [f64]),
{
    for step in 0..inner {
        let g = grad(x, &current)?;
        let t0 = match ctx.memory[block.memory_slot()] {
            Some(t) => t,
            None => {
                // First step of this block ever: scale the trial so the
                // largest component moves by about the variable's range.
                let ginf = g.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                if ginf == 0.0 {
                    1.0
                } else {
                    let range = x.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                    (if range > 0.0 { range } else { 1.0 }) / ginf
                }
            }
        };

        let mut stash: Option<BlockEval> = None;
        let outcome = backtracking_step(
            |vals: &[f64]| {
                let e = eval(vals)?;
                let v = e.value;
                stash = Some(e);
                Ok(v)
            },
            current.value,
            &g,
            x,
            &project,
            ls,
            t0,
        )?;
        match outcome {
            BacktrackOutcome::Accepted {
                x: new_x,
                value,
                step: t,
            } => {
                *x = new_x;
                // The accepted trial is always the last one evaluated.
                current = stash.take().expect("accepted trial was evaluated");
                debug_assert_eq!(current.value, value);
                ctx.memory[block.memory_slot()] = Some(2.0 * t);
                let patch = std::mem::take(&mut current.patch);
                ctx.apply_patch(&patch);
                let ssim = ssim_against(truth, geometry, x);
                ctx.record(block, outer, step, StepStatus::Accepted, t, ssim);
            }
            BacktrackOutcome::Converged => {
                ctx.record(block, outer, step, StepStatus::Converged, 0.0, None);
                break;
            }
            BacktrackOutcome::Stalled => {
                ctx.record(block, outer, step, StepStatus::Stalled, 0.0, None);
                break;
            }
        }
    }
    Ok(current)
}

/// XCT image block: fidelity plus its smoothness term.
#[allow(clippy::too_many_arguments)]
fn run_u_xct(
    fid: &DataFidelity,
    alpha: f64,
    u: &mut ScalarField,
    v: &ScalarField,
    ctx: &mut Ctx<'_>,
    outer: usize,
    inner: usize,
    ls: &LineSearchParams,
) -> Result<()> {
    let geometry = u.geometry;
    let mut x = std::mem::take(&mut u.values);
    let eval = |vals: &[f64]| -> Result<BlockEval> {
        let trial = ScalarField::from_values(geometry, vals.to_vec(), Unit::PerMillimeter)?;
        let f = fid.eval(&trial)?;
        let s = smooth_term(&trial, v, alpha);
        Ok(BlockEval {
            value: f + s,
            patch: vec![(TermSlot::Fid1, f), (TermSlot::Smooth1, s)],
            dot: None,
        })
    };
    let grad = |vals: &[f64], _cur: &BlockEval| -> Result<Vec<f64>> {
        let trial = ScalarField::from_values(geometry, vals.to_vec(), Unit::PerMillimeter)?;
        let fg = fid.gradient(&trial)?;
        let sg = smooth_gradient_u(&trial, v, alpha);
        Ok(compose_u_gradient(fg, &sg).values)
    };
    let entering = eval(&x)?;
    let truth = ctx.truth_u1;
    descend_block(
        Block::U1,
        outer,
        inner,
        &mut x,
        entering,
        eval,
        grad,
        |_: &mut [f64]| {},
        ls,
        ctx,
        geometry,
        truth,
    )?;
    u.values = x;
    Ok(())
}

/// DOT image block (and its fidelity-only warm-start variant). The entering
/// evaluation reuses the cached factorization when the image is unchanged
/// since the last DOT solve; the final evaluation refills the cache.
#[allow(clippy::too_many_arguments)]
fn run_u_dot(
    block: Block,
    include_smooth: bool,
    op: &DotOperator,
    data: &BoundaryData,
    alpha: f64,
    u: &mut ScalarField,
    v: &ScalarField,
    ctx: &mut Ctx<'_>,
    outer: usize,
    inner: usize,
    ls: &LineSearchParams,
) -> Result<()> {
    let geometry = u.geometry;
    let floor = op.model.mu_a_floor;
    let mut x = std::mem::take(&mut u.values);
    let eval = |vals: &[f64]| -> Result<BlockEval> {
        let trial = ScalarField::from_values(geometry, vals.to_vec(), Unit::PerMillimeter)?;
        let e = op.evaluate(&trial)?;
        let f = dot_fidelity_value(op, &e, data);
        let s = smooth_term(&trial, v, alpha);
        Ok(BlockEval {
            value: if include_smooth { f + s } else { f },
            patch: vec![(TermSlot::Fid2, f), (TermSlot::Smooth2, s)],
            dot: Some(e),
        })
    };
    let grad = |vals: &[f64], cur: &BlockEval| -> Result<Vec<f64>> {
        let e = cur.dot.as_ref().expect("DOT block carries its evaluation");
        let fg = dot_fidelity_gradient_value(op, e, data)?;
        if include_smooth {
            let trial = ScalarField::from_values(geometry, vals.to_vec(), Unit::PerMillimeter)?;
            let sg = smooth_gradient_u(&trial, v, alpha);
            Ok(compose_u_gradient(fg, &sg).values)
        } else {
            Ok(fg.values)
        }
    };
    let entering = match ctx.dot_cache.take() {
        // Valid because only DOT image blocks mutate u2, and each one parks
        // its final evaluation back in the cache.
        Some(e) => {
            let f = dot_fidelity_value(op, &e, data);
            let trial = ScalarField::from_values(geometry, x.clone(), Unit::PerMillimeter)?;
            let s = smooth_term(&trial, v, alpha);
            BlockEval {
                value: if include_smooth { f + s } else { f },
                patch: Vec::new(),
                dot: Some(e),
            }
        }
        None => eval(&x)?,
    };
    let truth = ctx.truth_u2;
    let final_eval = descend_block(
        block,
        outer,
        inner,
        &mut x,
        entering,
        eval,
        grad,
        |vals: &mut [f64]| {
            for t in vals.iter_mut() {
                if *t < floor {
                    *t = floor;
                }
            }
        },
        ls,
        ctx,
        geometry,
        truth,
    )?;
    ctx.dot_cache = final_eval.dot;
    u.values = x;
    Ok(())
}

/// Edge-indicator block of either modality. With both couplings zero the
/// other indicator is never read, so the single-modality runs share this
/// exact code path.
#[allow(clippy::too_many_arguments)]
fn run_v_block(
    block: Block,
    slots: (TermSlot, TermSlot, TermSlot),
    u_own: &ScalarField,
    v_own: &mut ScalarField,
    v_other: &ScalarField,
    own: ModalityParams,
    other: ModalityParams,
    ctx: &mut Ctx<'_>,
    outer: usize,
    inner: usize,
    ls: &LineSearchParams,
) -> Result<()> {
    let geometry = v_own.geometry;
    let (slot_smooth, slot_edge_own, slot_edge_other) = slots;
    let mut x = std::mem::take(&mut v_own.values);
    let eval = |vals: &[f64]| -> Result<BlockEval> {
        let trial = ScalarField::from_values(geometry, vals.to_vec(), Unit::Dimensionless)?;
        let s = smooth_term(u_own, &trial, own.alpha);
        let e_own = edge_term(&trial, v_other, &own);
        let mut value = s + e_own;
        let mut patch = vec![(slot_smooth, s), (slot_edge_own, e_own)];
        if other.gamma != 0.0 {
            // The other modality's edge integrand carries this indicator in
            // its coupling weight, so it moves with us.
            let e_other = edge_term(v_other, &trial, &other);
            value += e_other;
            patch.push((slot_edge_other, e_other));
        }
        Ok(BlockEval {
            value,
            patch,
            dot: None,
        })
    };
    let grad = |vals: &[f64], _cur: &BlockEval| -> Result<Vec<f64>> {
        let trial = ScalarField::from_values(geometry, vals.to_vec(), Unit::Dimensionless)?;
        Ok(v_block_gradient(u_own, &trial, v_other, &own, &other).values)
    };
    let entering = eval(&x)?;
    descend_block(
        block,
        outer,
        inner,
        &mut x,
        entering,
        eval,
        grad,
        |vals: &mut [f64]| {
            for t in vals.iter_mut() {
                *t = t.clamp(0.0, 1.0);
            }
        },
        ls,
        ctx,
        geometry,
        None,
    )?;
    v_own.values = x;
    Ok(())
}

/// XCT initialization: zero image, edge indicator one everywhere.
pub fn init_xct(geometry: GridGeometry) -> (ScalarField, ScalarField) {
    (
        ScalarField::zeros(geometry, Unit::PerMillimeter),
        ScalarField::constant(geometry, 1.0, Unit::Dimensionless),
    )
}

/// Shared DOT initialization phase: fidelity-only descent from the constant
/// background for the image, then edge segmentation of that image for the
/// indicator (single-modality objective, coupling off).
#[allow(clippy::too_many_arguments)]
fn init_dot_phase(
    op: &DotOperator,
    data: &BoundaryData,
    params: &ModalityParams,
    u2: &mut ScalarField,
    v2: &mut ScalarField,
    v1: &ScalarField,
    ctx: &mut Ctx<'_>,
    schedule: &ScheduleParams,
    ls: &LineSearchParams,
) -> Result<()> {
    run_u_dot(
        Block::InitU2,
        false,
        op,
        data,
        params.alpha,
        u2,
        v2,
        ctx,
        0,
        schedule.dot_warmstart,
        ls,
    )?;
    run_v_block(
        Block::InitV2,
        (TermSlot::Smooth2, TermSlot::Edge2, TermSlot::Edge1),
        u2,
        v2,
        v1,
        params.decoupled(),
        params.decoupled(),
        ctx,
        0,
        schedule.dot_edge_init,
        ls,
    )
}

/// Standalone DOT initializer: returns the warm-started image, its segmented
/// edge indicator, and the log of the initialization steps.
pub fn init_dot(
    op: &DotOperator,
    data: &BoundaryData,
    params: &ModalityParams,
    schedule: &ScheduleParams,
    ls: &LineSearchParams,
) -> Result<(ScalarField, ScalarField, RunLog)> {
    let geometry = op.geometry;
    let mut u2 = ScalarField::constant(geometry, DOT_WARMSTART_BACKGROUND, Unit::PerMillimeter);
    let mut v2 = ScalarField::constant(geometry, 1.0, Unit::Dimensionless);
    let dummy_v1 = ScalarField::constant(geometry, 1.0, Unit::Dimensionless);
    let mut ctx = Ctx::new(None, None);
    let e = op.evaluate(&u2)?;
    ctx.breakdown = TermBreakdown::new(0.0, 0.0, 0.0, dot_fidelity_value(op, &e, data), 0.0, 0.0);
    ctx.dot_cache = Some(e);
    init_dot_phase(
        op, data, params, &mut u2, &mut v2, &dummy_v1, &mut ctx, schedule, ls,
    )?;
    Ok((
        u2,
        v2,
        RunLog {
            records: ctx.log,
        },
    ))
}

/// Joint bi-modal reconstruction: initializers plus the alternating loop.
/// `truth` images, when given, only add SSIM columns to the log.
pub fn jbmir(
    problem: &JointProblem,
    schedule: &ScheduleParams,
    ls: &LineSearchParams,
    truth: Option<(&ScalarField, &ScalarField)>,
) -> Result<(JointState, RunLog)> {
    ls.validate()?;
    let (op, data2) = problem.fidelity[1]
        .as_dot()
        .ok_or_else(|| Error::InvalidParam("joint run needs the DOT modality".into()))?;
    if problem.fidelity[0].is_none() {
        return Err(Error::InvalidParam("joint run needs the XCT modality".into()));
    }
    let geometry = problem.geometry;
    let params = problem.params;

    let (u1, v1) = init_xct(geometry);
    let u2 = ScalarField::constant(geometry, DOT_WARMSTART_BACKGROUND, Unit::PerMillimeter);
    let v2 = ScalarField::constant(geometry, 1.0, Unit::Dimensionless);
    let mut state = JointState { u1, v1, u2, v2 };

    let mut ctx = Ctx::new(truth.map(|t| t.0), truth.map(|t| t.1));
    let e2 = op.evaluate(&state.u2)?;
    ctx.breakdown = TermBreakdown::new(
        problem.fidelity[0].eval(&state.u1)?,
        smooth_term(&state.u1, &state.v1, params.xct.alpha),
        edge_term(&state.v1, &state.v2, &params.xct),
        dot_fidelity_value(op, &e2, data2),
        smooth_term(&state.u2, &state.v2, params.dot.alpha),
        edge_term(&state.v2, &state.v1, &params.dot),
    );
    ctx.dot_cache = Some(e2);

    init_dot_phase(
        op,
        data2,
        &params.dot,
        &mut state.u2,
        &mut state.v2,
        &state.v1,
        &mut ctx,
        schedule,
        ls,
    )?;

    // Re-anchor the logged terms at the initialized state with the real
    // coupling weights before the main loop starts patching them.
    let f2 = dot_fidelity_value(
        op,
        ctx.dot_cache
            .as_ref()
            .expect("warm start leaves an evaluation"),
        data2,
    );
    ctx.breakdown = TermBreakdown::new(
        ctx.breakdown.fidelity1,
        ctx.breakdown.smooth1,
        edge_term(&state.v1, &state.v2, &params.xct),
        f2,
        smooth_term(&state.u2, &state.v2, params.dot.alpha),
        edge_term(&state.v2, &state.v1, &params.dot),
    );

    for outer in 0..schedule.outer {
        run_u_xct(
            &problem.fidelity[0],
            params.xct.alpha,
            &mut state.u1,
            &state.v1,
            &mut ctx,
            outer,
            schedule.inner,
            ls,
        )?;
        run_v_block(
            Block::V1,
            (TermSlot::Smooth1, TermSlot::Edge1, TermSlot::Edge2),
            &state.u1,
            &mut state.v1,
            &state.v2,
            params.xct,
            params.dot,
            &mut ctx,
            outer,
            schedule.inner,
            ls,
        )?;
        run_u_dot(
            Block::U2,
            true,
            op,
            data2,
            params.dot.alpha,
            &mut state.u2,
            &state.v2,
            &mut ctx,
            outer,
            schedule.inner,
            ls,
        )?;
        run_v_block(
            Block::V2,
            (TermSlot::Smooth2, TermSlot::Edge2, TermSlot::Edge1),
            &state.u2,
            &mut state.v2,
            &state.v1,
            params.dot,
            params.xct,
            &mut ctx,
            outer,
            schedule.inner,
            ls,
        )?;
    }

    Ok((
        state,
        RunLog {
            records: ctx.log,
        },
    ))
}

/// Single-modality baseline: the uncoupled Mumford-Shah objective for one
/// modality, same schedule and line search. Coupling weights are forced to
/// zero, so this is exactly the gamma = 0 reduction of the joint run.
pub fn smir(
    problem: &JointProblem,
    modality: Modality,
    schedule: &ScheduleParams,
    ls: &LineSearchParams,
    truth: Option<&ScalarField>,
) -> Result<(ScalarField, ScalarField, RunLog)> {
    ls.validate()?;
    let geometry = problem.geometry;
    let params = problem.params;
    match modality {
        Modality::Xct => {
            if matches!(problem.fidelity[0], DataFidelity::None) {
                return Err(Error::InvalidParam(
                    "XCT baseline needs the XCT data term".into(),
                ));
            }
            let own = params.xct.decoupled();
            let other = params.dot.decoupled();
            let (mut u1, mut v1) = init_xct(geometry);
            let v2_dummy = ScalarField::constant(geometry, 1.0, Unit::Dimensionless);
            let mut ctx = Ctx::new(truth, None);
            ctx.breakdown = TermBreakdown::new(
                problem.fidelity[0].eval(&u1)?,
                smooth_term(&u1, &v1, own.alpha),
                edge_term(&v1, &v2_dummy, &own),
                0.0,
                0.0,
                0.0,
            );
            for outer in 0..schedule.outer {
                run_u_xct(
                    &problem.fidelity[0],
                    own.alpha,
                    &mut u1,
                    &v1,
                    &mut ctx,
                    outer,
                    schedule.inner,
                    ls,
                )?;
                run_v_block(
                    Block::V1,
                    (TermSlot::Smooth1, TermSlot::Edge1, TermSlot::Edge2),
                    &u1,
                    &mut v1,
                    &v2_dummy,
                    own,
                    other,
                    &mut ctx,
                    outer,
                    schedule.inner,
                    ls,
                )?;
            }
            Ok((
                u1,
                v1,
                RunLog {
                    records: ctx.log,
                },
            ))
        }
        Modality::Dot => {
            let (op, data) = problem.fidelity[1].as_dot().ok_or_else(|| {
                Error::InvalidParam("DOT baseline needs the DOT data term".into())
            })?;
            let own = params.dot.decoupled();
            let other = params.xct.decoupled();
            let mut u2 =
                ScalarField::constant(geometry, DOT_WARMSTART_BACKGROUND, Unit::PerMillimeter);
            let mut v2 = ScalarField::constant(geometry, 1.0, Unit::Dimensionless);
            let v1_dummy = ScalarField::constant(geometry, 1.0, Unit::Dimensionless);
            let mut ctx = Ctx::new(None, truth);
            let e = op.evaluate(&u2)?;
            ctx.breakdown = TermBreakdown::new(
                0.0,
                0.0,
                0.0,
                dot_fidelity_value(op, &e, data),
                smooth_term(&u2, &v2, own.alpha),
                edge_term(&v2, &v1_dummy, &own),
            );
            ctx.dot_cache = Some(e);
            init_dot_phase(
                op, data, &own, &mut u2, &mut v2, &v1_dummy, &mut ctx, schedule, ls,
            )?;
            let f2 = dot_fidelity_value(
                op,
                ctx.dot_cache
                    .as_ref()
                    .expect("warm start leaves an evaluation"),
                data,
            );
            ctx.breakdown = TermBreakdown::new(
                0.0,
                0.0,
                0.0,
                f2,
                smooth_term(&u2, &v2, own.alpha),
                edge_term(&v2, &v1_dummy, &own),
            );
            for outer in 0..schedule.outer {
                run_u_dot(
                    Block::U2,
                    true,
                    op,
                    data,
                    own.alpha,
                    &mut u2,
                    &v2,
                    &mut ctx,
                    outer,
                    schedule.inner,
                    ls,
                )?;
                run_v_block(
                    Block::V2,
                    (TermSlot::Smooth2, TermSlot::Edge2, TermSlot::Edge1),
                    &u2,
                    &mut v2,
                    &v1_dummy,
                    own,
                    other,
                    &mut ctx,
                    outer,
                    schedule.inner,
                    ls,
                )?;
            }
            Ok((
                u2,
                v2,
                RunLog {
                    records: ctx.log,
                },
            ))
        }
    }
}
