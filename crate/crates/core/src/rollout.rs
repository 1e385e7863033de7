//! Trajectory simulation: input-state and input-output maps, closed-loop
//! rollout, and the stacked affine-block maps.
//!
//! All rollouts guard against blow-up: any state with magnitude above
//! [`OVERFLOW_LIMIT`] (or a non-finite intermediate) aborts with the step
//! index instead of propagating infinities downstream.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{ExprScratch, Slot, VarEnv, VarRef};
use crate::policy::{OutputFeedback, PolicyError};
use crate::system::{
    ControlTrajectory, ModelError, OutputTrajectory, Scenario, StateTrajectory, SystemModel,
};

/// States above this magnitude abort the rollout.
pub const OVERFLOW_LIMIT: f64 = 1e12;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum RolloutError {
    #[error("dimension mismatch at step {step} in {block}: expected {expected}, got {got}")]
    DimensionMismatch {
        step: usize,
        block: String,
        expected: usize,
        got: usize,
    },
    #[error("state overflow at step {step}: |state| exceeded {OVERFLOW_LIMIT:e} or became non-finite")]
    Overflow { step: usize },
    #[error("non-finite output at step {step}")]
    NonFiniteOutput { step: usize },
    #[error("non-finite control at step {step}")]
    NonFiniteControl { step: usize },
    #[error("model has an empty affine block")]
    EmptyAffineBlock,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Evaluation environment over (a prefix of) a trajectory.
pub(crate) struct TrajEnv<'a> {
    pub aff: &'a [DVector<f64>],
    pub cvx: &'a [DVector<f64>],
    pub controls: &'a [DVector<f64>],
    pub scenario: &'a Scenario,
}

impl VarEnv for TrajEnv<'_> {
    fn value(&self, var: VarRef) -> f64 {
        match var.slot {
            Slot::AffState => self.aff[var.t][var.i],
            Slot::CvxState => self.cvx[var.t][var.i],
            Slot::Control => self.controls[var.t][var.i],
            Slot::Exogenous => self.scenario.value(var.t, var.i),
        }
    }
}

fn check_control_dims(
    model: &SystemModel,
    u: &ControlTrajectory,
) -> Result<(), RolloutError> {
    let t_max = model.horizon().steps();
    if u.len() != t_max {
        return Err(RolloutError::DimensionMismatch {
            step: 0,
            block: "control trajectory length".into(),
            expected: t_max,
            got: u.len(),
        });
    }
    for t in 0..t_max {
        if u.step(t).len() != model.dims().n_u {
            return Err(RolloutError::DimensionMismatch {
                step: t,
                block: "control".into(),
                expected: model.dims().n_u,
                got: u.step(t).len(),
            });
        }
    }
    Ok(())
}

fn guard_state(v: &DVector<f64>, step: usize) -> Result<(), RolloutError> {
    for &x in v.iter() {
        if !x.is_finite() || x.abs() > OVERFLOW_LIMIT {
            return Err(RolloutError::Overflow { step });
        }
    }
    Ok(())
}

/// Compute the state at step t from a history whose entry t-1 is valid
/// (earlier entries are never read by the step expressions).
pub(crate) fn step_once(
    model: &SystemModel,
    t: usize,
    aff: &[DVector<f64>],
    cvx: &[DVector<f64>],
    controls: &[DVector<f64>],
    scenario: &Scenario,
    scratch: &mut ExprScratch,
) -> Result<(DVector<f64>, DVector<f64>), RolloutError> {
    let d = model.dims();
    let step = &model.compiled.steps[t - 1];
    let env = TrajEnv {
        aff,
        cvx,
        controls,
        scenario,
    };
    let mut new_aff = DVector::zeros(d.n_aff);
    for r in 0..d.n_aff {
        let mut acc = step.w[r].eval(&env, scratch);
        for c in 0..d.n_aff {
            acc += step.a[r][c].eval(&env, scratch) * aff[t - 1][c];
        }
        for c in 0..d.n_u {
            acc += step.b[r][c].eval(&env, scratch) * controls[t - 1][c];
        }
        new_aff[r] = acc;
    }
    let mut new_cvx = DVector::zeros(d.n_cvx);
    for r in 0..d.n_cvx {
        new_cvx[r] = step.cvx_rows[r].eval(&env, scratch);
    }
    guard_state(&new_aff, t)?;
    guard_state(&new_cvx, t)?;
    Ok((new_aff, new_cvx))
}

/// Advance states one step in place.
fn advance_state(
    model: &SystemModel,
    t: usize,
    aff: &mut Vec<DVector<f64>>,
    cvx: &mut Vec<DVector<f64>>,
    controls: &[DVector<f64>],
    scenario: &Scenario,
    scratch: &mut ExprScratch,
) -> Result<(), RolloutError> {
    let (new_aff, new_cvx) = step_once(model, t, aff, cvx, controls, scenario, scratch)?;
    aff.push(new_aff);
    cvx.push(new_cvx);
    Ok(())
}

fn initial_state(
    model: &SystemModel,
    scenario: &Scenario,
    scratch: &mut ExprScratch,
) -> Result<(DVector<f64>, DVector<f64>), RolloutError> {
    let d = model.dims();
    let env = TrajEnv {
        aff: &[],
        cvx: &[],
        controls: &[],
        scenario,
    };
    let aff0 = DVector::from_iterator(
        d.n_aff,
        model.compiled.init_aff.iter().map(|e| e.eval(&env, scratch)),
    );
    let cvx0 = DVector::from_iterator(
        d.n_cvx,
        model.compiled.init_cvx.iter().map(|e| e.eval(&env, scratch)),
    );
    guard_state(&aff0, 0)?;
    guard_state(&cvx0, 0)?;
    Ok((aff0, cvx0))
}

pub(crate) fn rollout_states_ws(
    model: &SystemModel,
    u: &ControlTrajectory,
    scenario: &Scenario,
    scratch: &mut ExprScratch,
) -> Result<StateTrajectory, RolloutError> {
    model.check_scenario(scenario)?;
    check_control_dims(model, u)?;
    let t_max = model.horizon().steps();
    let (aff0, cvx0) = initial_state(model, scenario, scratch)?;
    let mut aff = Vec::with_capacity(t_max + 1);
    let mut cvx = Vec::with_capacity(t_max + 1);
    aff.push(aff0);
    cvx.push(cvx0);
    for t in 1..=t_max {
        advance_state(model, t, &mut aff, &mut cvx, &u.0, scenario, scratch)?;
    }
    Ok(StateTrajectory { aff, cvx })
}

/// The input-state map: simulate the dynamics under a fixed control
/// trajectory and scenario.
pub fn rollout_states(
    model: &SystemModel,
    u: &ControlTrajectory,
    scenario: &Scenario,
) -> Result<StateTrajectory, RolloutError> {
    rollout_states_ws(model, u, scenario, &mut ExprScratch::default())
}

/// Simulate only states 0..=steps using the first `steps` controls.
pub(crate) fn rollout_prefix(
    model: &SystemModel,
    controls: &[DVector<f64>],
    scenario: &Scenario,
    steps: usize,
    scratch: &mut ExprScratch,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), RolloutError> {
    let (aff0, cvx0) = initial_state(model, scenario, scratch)?;
    let mut aff = vec![aff0];
    let mut cvx = vec![cvx0];
    for t in 1..=steps {
        advance_state(model, t, &mut aff, &mut cvx, controls, scenario, scratch)?;
    }
    Ok((aff, cvx))
}

/// Evaluate the measurement rows at step t on explicit state slices.
pub(crate) fn measure_only(
    model: &SystemModel,
    t: usize,
    aff: &[DVector<f64>],
    cvx: &[DVector<f64>],
    controls: &[DVector<f64>],
    scenario: &Scenario,
    scratch: &mut ExprScratch,
) -> Result<DVector<f64>, RolloutError> {
    measure_ws(model, t, (aff, cvx), controls, scenario, scratch)
}

pub(crate) fn measure_ws(
    model: &SystemModel,
    t: usize,
    states: (&[DVector<f64>], &[DVector<f64>]),
    controls: &[DVector<f64>],
    scenario: &Scenario,
    scratch: &mut ExprScratch,
) -> Result<DVector<f64>, RolloutError> {
    let env = TrajEnv {
        aff: states.0,
        cvx: states.1,
        controls,
        scenario,
    };
    let rows = &model.compiled.measurements[t];
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|e| e.eval(&env, scratch)));
    if y.iter().any(|v| !v.is_finite()) {
        return Err(RolloutError::NonFiniteOutput { step: t });
    }
    Ok(y)
}

/// The input-output map: states are computed internally, then measurement
/// rows are evaluated per step.
pub fn rollout_outputs(
    model: &SystemModel,
    u: &ControlTrajectory,
    scenario: &Scenario,
) -> Result<OutputTrajectory, RolloutError> {
    let mut scratch = ExprScratch::default();
    let states = rollout_states_ws(model, u, scenario, &mut scratch)?;
    let mut outputs = Vec::with_capacity(model.horizon().steps());
    for t in 0..model.horizon().steps() {
        outputs.push(measure_ws(
            model,
            t,
            (&states.aff, &states.cvx),
            &u.0,
            scenario,
            &mut scratch,
        )?);
    }
    Ok(OutputTrajectory(outputs))
}

/// Closed-loop rollout: at each step the output is measured, the policy
/// produces the control, and the state advances. The returned triple is
/// mutually consistent (re-simulating with the returned controls reproduces
/// the returned states and outputs exactly).
pub fn rollout_closed_loop(
    model: &SystemModel,
    policy: &mut dyn OutputFeedback,
    scenario: &Scenario,
) -> Result<(StateTrajectory, ControlTrajectory, OutputTrajectory), RolloutError> {
    model.check_scenario(scenario)?;
    let t_max = model.horizon().steps();
    let d = model.dims();
    let mut scratch = ExprScratch::default();
    let (aff0, cvx0) = initial_state(model, scenario, &mut scratch)?;
    let mut aff = vec![aff0];
    let mut cvx = vec![cvx0];
    let mut controls: Vec<DVector<f64>> = Vec::with_capacity(t_max);
    let mut outputs: Vec<DVector<f64>> = Vec::with_capacity(t_max);
    policy.reset();
    for t in 0..t_max {
        let y = measure_ws(model, t, (&aff, &cvx), &controls, scenario, &mut scratch)?;
        let u_t = policy.step(t, &y)?;
        if u_t.len() != d.n_u {
            return Err(RolloutError::DimensionMismatch {
                step: t,
                block: "policy control".into(),
                expected: d.n_u,
                got: u_t.len(),
            });
        }
        if u_t.iter().any(|v| !v.is_finite()) {
            return Err(RolloutError::NonFiniteControl { step: t });
        }
        outputs.push(y);
        controls.push(u_t);
        advance_state(model, t + 1, &mut aff, &mut cvx, &controls, scenario, &mut scratch)?;
    }
    Ok((
        StateTrajectory { aff, cvx },
        ControlTrajectory(controls),
        OutputTrajectory(outputs),
    ))
}

/// The stacked affine-block maps: x_aff = C u + v with C block lower
/// triangular.
///
/// Block row t of `c` (t = 0..=T) maps the stacked control vector to
/// x_aff_t; row 0 is zero and `v` row 0 is the initial affine state.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineBlockMaps {
    pub c: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl AffineBlockMaps {
    /// Reconstruct the stacked affine-state trajectory for a flat control
    /// vector.
    pub fn apply(&self, u_flat: &DVector<f64>) -> DVector<f64> {
        &self.c * u_flat + &self.v
    }

    /// Block rows for t = 1..=T only (dropping the initial state row).
    pub fn tail_rows(&self, n_aff: usize) -> (DMatrix<f64>, DVector<f64>) {
        let rows = self.c.nrows() - n_aff;
        (
            self.c.rows(n_aff, rows).into_owned(),
            self.v.rows(n_aff, rows).into_owned(),
        )
    }
}

/// Unroll the affine-block recursion C_t = [A_t C_{t-1}, B_t],
/// v_t = A_t v_{t-1} + w_t for one scenario.
pub fn affine_block_maps(
    model: &SystemModel,
    scenario: &Scenario,
) -> Result<AffineBlockMaps, RolloutError> {
    let d = model.dims();
    if d.n_aff == 0 {
        return Err(RolloutError::EmptyAffineBlock);
    }
    model.check_scenario(scenario)?;
    let t_max = model.horizon().steps();
    let n = d.n_aff;
    let m = d.n_u;
    let mut scratch = ExprScratch::default();
    let env = TrajEnv {
        aff: &[],
        cvx: &[],
        controls: &[],
        scenario,
    };

    let mut c = DMatrix::zeros((t_max + 1) * n, t_max * m);
    let mut v = DVector::zeros((t_max + 1) * n);
    for (r, e) in model.compiled.init_aff.iter().enumerate() {
        v[r] = e.eval(&env, &mut scratch);
    }
    for t in 1..=t_max {
        let step = &model.compiled.steps[t - 1];
        let a_t = DMatrix::from_fn(n, n, |r, cidx| step.a[r][cidx].eval(&env, &mut scratch));
        let b_t = DMatrix::from_fn(n, m, |r, cidx| step.b[r][cidx].eval(&env, &mut scratch));
        let w_t = DVector::from_fn(n, |r, _| step.w[r].eval(&env, &mut scratch));

        let prev_c = c.rows((t - 1) * n, n).into_owned();
        let prev_v = v.rows((t - 1) * n, n).into_owned();
        let new_c_left = &a_t * prev_c.columns(0, (t - 1) * m);
        c.view_mut((t * n, 0), (n, (t - 1) * m)).copy_from(&new_c_left);
        c.view_mut((t * n, (t - 1) * m), (n, m)).copy_from(&b_t);
        let new_v = &a_t * prev_v + w_t;
        v.rows_mut(t * n, n).copy_from(&new_v);
    }
    Ok(AffineBlockMaps { c, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::system::{AffineStep, Dims, Horizon, StepDynamics, SystemModelBuilder};

    fn integrator(t_max: usize) -> SystemModel {
        SystemModelBuilder::new(
            Horizon::new(t_max).unwrap(),
            Dims {
                n_aff: 1,
                n_cvx: 0,
                n_u: 1,
                n_y: 1,
                n_delta: 1,
            },
        )
        .init(vec![Expr::constant(0.0)], vec![])
        .dynamics(|_t| StepDynamics {
            affine: AffineStep {
                a: vec![vec![Expr::constant(1.0)]],
                b: vec![vec![Expr::constant(1.0)]],
                w: vec![Expr::constant(0.0)],
            },
            cvx_rows: vec![],
        })
        .measurements(|t| vec![Expr::var(Slot::AffState, t, 0)])
        .costs(vec![Expr::var(Slot::Control, 0, 0).abs()])
        .build()
        .unwrap()
    }

    fn zero_scenario(t_max: usize) -> Scenario {
        Scenario::new(vec![DVector::zeros(1); t_max + 1]).unwrap()
    }

    #[test]
    fn integrator_rollout_accumulates_controls() {
        let m = integrator(3);
        let u = ControlTrajectory(vec![
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![2.0]),
            DVector::from_vec(vec![-0.5]),
        ]);
        let x = rollout_states(&m, &u, &zero_scenario(3)).unwrap();
        let vals: Vec<f64> = x.aff.iter().map(|v| v[0]).collect();
        assert_eq!(vals, vec![0.0, 1.0, 3.0, 2.5]);
    }

    #[test]
    fn integrator_affine_maps_match_hand_unroll() {
        // T = 2: rows for (x_1, x_2) are [[1,0],[1,1]], v = 0.
        let m = integrator(2);
        let maps = affine_block_maps(&m, &zero_scenario(2)).unwrap();
        let (c_tail, v_tail) = maps.tail_rows(1);
        assert_eq!(c_tail, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
        assert_eq!(v_tail, DVector::zeros(2));
        // Row 0 (initial state) carries no control dependence.
        assert_eq!(maps.c.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn overflow_guard_names_the_step() {
        // x_t = x_{t-1}^2 with x_0 = 10 overflows quickly.
        let m = SystemModelBuilder::new(
            Horizon::new(6).unwrap(),
            Dims {
                n_aff: 0,
                n_cvx: 1,
                n_u: 1,
                n_y: 1,
                n_delta: 1,
            },
        )
        .init(vec![], vec![Expr::constant(10.0)])
        .dynamics(|t| StepDynamics {
            affine: AffineStep::default(),
            cvx_rows: vec![Expr::var(Slot::CvxState, t - 1, 0).pos().square()],
        })
        .measurements(|t| vec![Expr::var(Slot::CvxState, t, 0)])
        .costs(vec![Expr::constant(0.0)])
        .build()
        .unwrap();
        let u = ControlTrajectory::zeros(6, 1);
        let err = rollout_states(&m, &u, &zero_scenario(6)).unwrap_err();
        // 10 -> 1e2 -> 1e4 -> 1e8 -> 1e16 exceeds the guard at step 4.
        assert_eq!(err, RolloutError::Overflow { step: 4 });
    }

    #[test]
    fn control_length_mismatch_is_structured() {
        let m = integrator(3);
        let u = ControlTrajectory::zeros(2, 1);
        let err = rollout_states(&m, &u, &zero_scenario(3)).unwrap_err();
        assert!(matches!(err, RolloutError::DimensionMismatch { .. }));
    }
}
