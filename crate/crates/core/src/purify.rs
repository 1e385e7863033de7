//! Purifier constructions and the policy bijection recursions.
//!
//! A purifier removes the influence of past controls from the measured
//! outputs: `p_t(y_{0:t}, u_{0:t-1}) = e_t`, reversibly, with the purified
//! output depending on the exogenous inputs alone (`e_t = xi_t(d_{0:t})`).
//! Five constructive families are provided, mirroring the situations where
//! purification is possible: measured exogenous inputs, pure estimation,
//! perfect state information with dynamics invertible in the disturbance,
//! deterministic dynamics with invertible measurements, and state-affine
//! dynamics/measurements with additive uncertainty.
//!
//! The Q-parameterization lives here too: `pi_from_q` turns a causal policy
//! in the purified outputs into an output-feedback law via the recursion
//! `pi_t(y_{0:t}) = Q_t(p_{0:t}(y_{0:t}, pi_{0:t-1}(...)))`, evaluated
//! incrementally, and `q_from_pi` inverts it.

use std::cell::RefCell;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::expr::{Expr, ExprScratch, Slot};
use crate::policy::{OutputFeedback, PolicyError, PurifiedFeedback};
use crate::rollout::{self, RolloutError};
use crate::system::{ControlTrajectory, OutputTrajectory, Scenario, SystemModel};

/// Purified outputs e_0..e_{T-1}; entry dimensions may vary by step.
#[derive(Clone, Debug, PartialEq)]
pub struct PurifiedTrajectory(pub Vec<DVector<f64>>);

impl PurifiedTrajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn step(&self, t: usize) -> &DVector<f64> {
        &self.0[t]
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PurifyError {
    #[error("purifier singular at step {step}: {reason}")]
    Singular { step: usize, reason: String },
    #[error("model does not fit the {family} family: {requirement}")]
    Structural {
        family: &'static str,
        requirement: String,
    },
    #[error("{what} history at step {t} has length {got}, expected {expected}")]
    HistoryLength {
        t: usize,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("registered inverse disagrees with the dynamics at step {step} (error {error:.3e})")]
    InverseMismatch { step: usize, error: f64 },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

/// Inverse of the dynamics with respect to the disturbance, registered for
/// the perfect-state family.
#[derive(Clone)]
pub enum DynamicsInverse {
    /// Additive-disturbance shortcut: e_t = y_t - f_t(y_{t-1}, u_{t-1}, 0).
    Additive,
    /// Custom inverse (t, y_t, y_{t-1}, u_{t-1}) -> e_t.
    Custom(
        Arc<
            dyn Fn(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>, PurifyError>
                + Send
                + Sync,
        >,
    ),
}

impl std::fmt::Debug for DynamicsInverse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DynamicsInverse::Additive => write!(f, "DynamicsInverse::Additive"),
            DynamicsInverse::Custom(_) => write!(f, "DynamicsInverse::Custom(..)"),
        }
    }
}

/// Inverse of the measurement map with respect to the noise, registered for
/// the deterministic-dynamics family.
#[derive(Clone)]
pub enum MeasurementInverse {
    /// Additive-noise shortcut: e_t = y_t - g_t(x_t, u_{t-1}, 0).
    Additive,
    /// Custom inverse (t, y_t, x_t stacked, u_{t-1}) -> e_t.
    Custom(
        Arc<
            dyn Fn(usize, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>, PurifyError>
                + Send
                + Sync,
        >,
    ),
}

impl std::fmt::Debug for MeasurementInverse {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MeasurementInverse::Additive => write!(f, "MeasurementInverse::Additive"),
            MeasurementInverse::Custom(_) => write!(f, "MeasurementInverse::Custom(..)"),
        }
    }
}

/// The five purifier families.
#[derive(Clone, Debug)]
pub enum PurifierFamily {
    /// Outputs are the exogenous inputs themselves (y depends on d only).
    MeasuredExogenous,
    /// The controller observes but cannot influence the system.
    PureEstimation,
    /// Perfect state information with dynamics invertible in the listed
    /// disturbance channels.
    PerfectState {
        disturbance_channels: Vec<usize>,
        inverse: DynamicsInverse,
    },
    /// Deterministic dynamics, exactly measured initial state, and
    /// measurements invertible in the listed noise channels.
    DeterministicInvertibleMeasurement {
        noise_channels: Vec<usize>,
        inverse: MeasurementInverse,
    },
    /// State-affine dynamics and measurements with additive uncertainty and
    /// separable control terms.
    StateAffineAdditive,
}

impl PurifierFamily {
    fn name(&self) -> &'static str {
        match self {
            PurifierFamily::MeasuredExogenous => "measured-exogenous",
            PurifierFamily::PureEstimation => "pure-estimation",
            PurifierFamily::PerfectState { .. } => "perfect-state",
            PurifierFamily::DeterministicInvertibleMeasurement { .. } => {
                "deterministic-invertible-measurement"
            }
            PurifierFamily::StateAffineAdditive => "state-affine-additive",
        }
    }
}

/// A purifier: pure step maps p_t, q_t and the oracle xi_t, plus the family
/// tag. Stateful incremental use is layered on top by [`pi_from_q`].
#[derive(Clone, Debug)]
pub struct Purifier {
    family: PurifierFamily,
    model: Arc<SystemModel>,
}

fn structural(family: &'static str, requirement: impl Into<String>) -> PurifyError {
    PurifyError::Structural {
        family,
        requirement: requirement.into(),
    }
}

/// Check that measurement rows at step t are exactly the stacked state.
fn measurement_is_state_identity(model: &SystemModel, t: usize) -> bool {
    let d = model.dims();
    let rows = model.measurement(t);
    if rows.len() != d.n_state() {
        return false;
    }
    rows.iter().enumerate().all(|(k, e)| match e {
        Expr::Var(v) => {
            if k < d.n_aff {
                v.slot == Slot::AffState && v.t == t && v.i == k
            } else {
                v.slot == Slot::CvxState && v.t == t && v.i == k - d.n_aff
            }
        }
        _ => false,
    })
}

fn expr_refs_control(e: &Expr) -> bool {
    let mut found = false;
    e.for_each_var(&mut |v| {
        if v.slot == Slot::Control {
            found = true;
        }
    });
    found
}

fn exo_channels_within(e: &Expr, allowed: &[usize]) -> bool {
    let mut ok = true;
    e.for_each_var(&mut |v| {
        if v.slot == Slot::Exogenous && !allowed.contains(&v.i) {
            ok = false;
        }
    });
    ok
}

fn expr_refs_exogenous(e: &Expr) -> bool {
    let mut found = false;
    e.for_each_var(&mut |v| {
        if v.slot == Slot::Exogenous {
            found = true;
        }
    });
    found
}

fn is_zero_const(e: &Expr) -> bool {
    matches!(e, Expr::Const(c) if *c == 0.0)
}

fn expr_is_var_free(e: &Expr) -> bool {
    e.vars().is_empty()
}

/// Group-separability check for the state-affine-additive family: the
/// expression must split as (affine in states with constant coefficients)
/// + (control-only term) + (exogenous-only term).
fn is_state_affine_separable(e: &Expr) -> bool {
    fn leaves<'a>(e: &'a Expr, out: &mut Vec<&'a Expr>) {
        match e {
            Expr::Sum(cs) => {
                for c in cs {
                    leaves(c, out);
                }
            }
            other => out.push(other),
        }
    }
    let mut parts = Vec::new();
    leaves(e, &mut parts);
    for leaf in parts {
        let vars = leaf.vars();
        let has_state = vars
            .iter()
            .any(|v| matches!(v.slot, Slot::AffState | Slot::CvxState));
        let has_control = vars.iter().any(|v| v.slot == Slot::Control);
        let has_exo = vars.iter().any(|v| v.slot == Slot::Exogenous);
        let groups = has_state as u8 + has_control as u8 + has_exo as u8;
        if groups > 1 {
            return false;
        }
        if has_state {
            // State terms must be affine with realization-independent
            // coefficients; since the leaf has no exogenous variables,
            // verified affinity is enough.
            match crate::analyze::analyze(leaf) {
                Ok(a) => {
                    if !matches!(a.curvature, crate::analyze::Curvature::Affine) {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
    }
    true
}

/// Construct a purifier for one of the five families, checking the family's
/// structural requirements against the model and spot-checking registered
/// inverses on short simulated trajectories.
pub fn make_purifier(
    family: PurifierFamily,
    model: Arc<SystemModel>,
) -> Result<Purifier, PurifyError> {
    let name = family.name();
    let d = model.dims();
    let t_max = model.horizon().steps();
    match &family {
        PurifierFamily::MeasuredExogenous => {
            for t in 0..t_max {
                for (k, row) in model.measurement(t).iter().enumerate() {
                    let mut only_exo = true;
                    row.for_each_var(&mut |v| {
                        if v.slot != Slot::Exogenous {
                            only_exo = false;
                        }
                    });
                    if !only_exo {
                        return Err(structural(
                            name,
                            format!("measurement row {k} at t={t} must depend on the exogenous input only"),
                        ));
                    }
                }
            }
        }
        PurifierFamily::PureEstimation => {
            for t in 1..=t_max {
                let step = model.step_dynamics(t);
                for row in step.affine.b.iter().flatten() {
                    if !is_zero_const(row) {
                        return Err(structural(
                            name,
                            format!("affine block B at t={t} must be zero (no control influence)"),
                        ));
                    }
                }
                for (k, row) in step.cvx_rows.iter().enumerate() {
                    if expr_refs_control(row) {
                        return Err(structural(
                            name,
                            format!("dynamics row {k} at t={t} references the control"),
                        ));
                    }
                }
            }
            for t in 0..t_max {
                for (k, row) in model.measurement(t).iter().enumerate() {
                    if expr_refs_control(row) {
                        return Err(structural(
                            name,
                            format!("measurement row {k} at t={t} references the control"),
                        ));
                    }
                }
            }
        }
        PurifierFamily::PerfectState {
            disturbance_channels,
            ..
        } => {
            if d.n_y != d.n_state() {
                return Err(structural(
                    name,
                    format!(
                        "perfect state information needs n_y = n_state ({} != {})",
                        d.n_y,
                        d.n_state()
                    ),
                ));
            }
            for t in 0..t_max {
                if !measurement_is_state_identity(&model, t) {
                    return Err(structural(
                        name,
                        format!("measurement at t={t} is not the state identity"),
                    ));
                }
            }
            for &c in disturbance_channels {
                if c >= d.n_delta {
                    return Err(structural(
                        name,
                        format!("disturbance channel {c} out of range ({})", d.n_delta),
                    ));
                }
            }
            for t in 1..=t_max {
                let step = model.step_dynamics(t);
                let all = step
                    .affine
                    .a
                    .iter()
                    .chain(step.affine.b.iter())
                    .flatten()
                    .chain(step.affine.w.iter())
                    .chain(step.cvx_rows.iter());
                for row in all {
                    if !exo_channels_within(row, disturbance_channels) {
                        return Err(structural(
                            name,
                            format!(
                                "dynamics at t={t} reference exogenous channels outside the invertible set"
                            ),
                        ));
                    }
                }
            }
        }
        PurifierFamily::DeterministicInvertibleMeasurement { noise_channels, .. } => {
            if d.n_y != d.n_state() || !measurement_is_state_identity(&model, 0) {
                return Err(structural(
                    name,
                    "the initial measurement must be the exact state (y_0 = x_0)",
                ));
            }
            for &c in noise_channels {
                if c >= d.n_delta {
                    return Err(structural(
                        name,
                        format!("noise channel {c} out of range ({})", d.n_delta),
                    ));
                }
            }
            for t in 1..=t_max {
                let step = model.step_dynamics(t);
                let all = step
                    .affine
                    .a
                    .iter()
                    .chain(step.affine.b.iter())
                    .flatten()
                    .chain(step.affine.w.iter())
                    .chain(step.cvx_rows.iter());
                for row in all {
                    if expr_refs_exogenous(row) {
                        return Err(structural(
                            name,
                            format!("dynamics at t={t} must be deterministic"),
                        ));
                    }
                }
            }
            for t in 1..t_max {
                for (k, row) in model.measurement(t).iter().enumerate() {
                    if !exo_channels_within(row, noise_channels) {
                        return Err(structural(
                            name,
                            format!(
                                "measurement row {k} at t={t} references exogenous channels outside the invertible set"
                            ),
                        ));
                    }
                }
            }
        }
        PurifierFamily::StateAffineAdditive => {
            for t in 1..=t_max {
                let step = model.step_dynamics(t);
                for row in step.affine.a.iter().flatten().chain(step.affine.b.iter().flatten()) {
                    if !expr_is_var_free(row) {
                        return Err(structural(
                            name,
                            format!("affine block matrices at t={t} must be constant"),
                        ));
                    }
                }
                for (k, row) in step.cvx_rows.iter().enumerate() {
                    if !is_state_affine_separable(row) {
                        return Err(structural(
                            name,
                            format!("dynamics row {k} at t={t} is not state-affine with separable control and disturbance terms"),
                        ));
                    }
                }
            }
            for t in 0..t_max {
                for (k, row) in model.measurement(t).iter().enumerate() {
                    if !is_state_affine_separable(row) {
                        return Err(structural(
                            name,
                            format!("measurement row {k} at t={t} is not state-affine with separable control and noise terms"),
                        ));
                    }
                }
            }
        }
    }
    let purifier = Purifier { family, model };
    purifier.spot_check()?;
    Ok(purifier)
}

impl Purifier {
    pub fn family_name(&self) -> &'static str {
        self.family.name()
    }

    pub fn model(&self) -> &Arc<SystemModel> {
        &self.model
    }

    /// Dimension of e_t for t = 0..T-1.
    pub fn e_dims(&self) -> Vec<usize> {
        let d = self.model.dims();
        let t_max = self.model.horizon().steps();
        (0..t_max)
            .map(|t| match &self.family {
                PurifierFamily::MeasuredExogenous
                | PurifierFamily::PureEstimation
                | PurifierFamily::StateAffineAdditive => d.n_y,
                PurifierFamily::PerfectState {
                    disturbance_channels,
                    ..
                } => {
                    if t == 0 {
                        d.n_y
                    } else {
                        disturbance_channels.len()
                    }
                }
                PurifierFamily::DeterministicInvertibleMeasurement { noise_channels, .. } => {
                    if t == 0 {
                        d.n_y
                    } else {
                        noise_channels.len()
                    }
                }
            })
            .collect()
    }

    fn check_hist(
        &self,
        t: usize,
        what: &'static str,
        got: usize,
        expected: usize,
    ) -> Result<(), PurifyError> {
        if got != expected {
            return Err(PurifyError::HistoryLength {
                t,
                what,
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Build a scenario whose listed channels at steps 1..=t come from the
    /// purified history, all other entries zero.
    fn scenario_from_e(
        &self,
        channels: &[usize],
        e_hist: &[DVector<f64>],
        t: usize,
    ) -> Scenario {
        let d = self.model.dims();
        let mut delta = vec![DVector::zeros(d.n_delta); self.model.horizon().steps() + 1];
        for tau in 1..=t {
            for (k, &c) in channels.iter().enumerate() {
                delta[tau][c] = e_hist[tau][k];
            }
        }
        Scenario::new(delta).expect("finite by construction")
    }

    /// Split a stacked perfect-state output into (aff, cvx) blocks.
    fn split_output(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let d = self.model.dims();
        (
            y.rows(0, d.n_aff).into_owned(),
            y.rows(d.n_aff, d.n_cvx).into_owned(),
        )
    }

    /// The purifier map p_t(y_{0:t}, u_{0:t-1}) -> e_t.
    pub fn p(
        &self,
        t: usize,
        y_hist: &[DVector<f64>],
        u_hist: &[DVector<f64>],
    ) -> Result<DVector<f64>, PurifyError> {
        self.check_hist(t, "output", y_hist.len(), t + 1)?;
        self.check_hist(t, "control", u_hist.len(), t)?;
        if t == 0 {
            return Ok(y_hist[0].clone());
        }
        match &self.family {
            PurifierFamily::MeasuredExogenous | PurifierFamily::PureEstimation => {
                Ok(y_hist[t].clone())
            }
            PurifierFamily::PerfectState {
                disturbance_channels,
                inverse,
            } => match inverse {
                DynamicsInverse::Custom(f) => f(t, &y_hist[t], &y_hist[t - 1], &u_hist[t - 1]),
                DynamicsInverse::Additive => {
                    // e_t = y_t - f_t(y_{t-1}, u_{t-1}, 0), read out on the
                    // disturbance channels' state rows in listed order.
                    let mut scratch = ExprScratch::default();
                    let zero = self.scenario_from_e(disturbance_channels, &[], 0);
                    let (aff_prev, cvx_prev) = self.split_output(&y_hist[t - 1]);
                    let pred = self.one_step(
                        t,
                        &aff_prev,
                        &cvx_prev,
                        &u_hist[t - 1],
                        &zero,
                        &mut scratch,
                    )?;
                    let diff = &y_hist[t] - &pred;
                    Ok(DVector::from_iterator(
                        disturbance_channels.len(),
                        (0..disturbance_channels.len()).map(|k| diff[k]),
                    ))
                }
            },
            PurifierFamily::DeterministicInvertibleMeasurement {
                noise_channels,
                inverse,
            } => {
                // Reconstruct x_t deterministically from x_0 = y_0.
                let mut scratch = ExprScratch::default();
                let zero = self.scenario_from_e(noise_channels, &[], 0);
                let (aff, cvx) = self.simulate_states(&y_hist[0], u_hist, t, &zero, &mut scratch)?;
                let x_t = stack(&aff[t], &cvx[t]);
                match inverse {
                    MeasurementInverse::Custom(f) => f(t, &y_hist[t], &x_t, &u_hist[t - 1]),
                    MeasurementInverse::Additive => {
                        let pred = self.measure_at(t, &aff, &cvx, u_hist, &zero, &mut scratch)?;
                        let diff = &y_hist[t] - &pred;
                        Ok(DVector::from_iterator(
                            noise_channels.len(),
                            (0..noise_channels.len()).map(|k| diff[k]),
                        ))
                    }
                }
            }
            PurifierFamily::StateAffineAdditive => {
                // e_t = y_t - (psi_t(u, 0) - psi_t(0, 0)).
                let mut scratch = ExprScratch::default();
                let zero = Scenario::new(vec![
                    DVector::zeros(self.model.dims().n_delta);
                    self.model.horizon().steps() + 1
                ])
                .expect("zeros are finite");
                let psi_u = self.output_at(t, u_hist, &zero, &mut scratch)?;
                let zero_controls =
                    vec![DVector::zeros(self.model.dims().n_u); u_hist.len()];
                let psi_0 = self.output_at(t, &zero_controls, &zero, &mut scratch)?;
                Ok(&y_hist[t] - (psi_u - psi_0))
            }
        }
    }

    /// The inverse map q_t(e_{0:t}, u_{0:t-1}) -> y_t.
    pub fn q(
        &self,
        t: usize,
        e_hist: &[DVector<f64>],
        u_hist: &[DVector<f64>],
    ) -> Result<DVector<f64>, PurifyError> {
        self.check_hist(t, "purified", e_hist.len(), t + 1)?;
        self.check_hist(t, "control", u_hist.len(), t)?;
        if t == 0 {
            return Ok(e_hist[0].clone());
        }
        match &self.family {
            PurifierFamily::MeasuredExogenous | PurifierFamily::PureEstimation => {
                Ok(e_hist[t].clone())
            }
            PurifierFamily::PerfectState {
                disturbance_channels,
                ..
            } => {
                let mut scratch = ExprScratch::default();
                let scen = self.scenario_from_e(disturbance_channels, e_hist, t);
                let (aff, cvx) =
                    self.simulate_states(&e_hist[0], u_hist, t, &scen, &mut scratch)?;
                Ok(stack(&aff[t], &cvx[t]))
            }
            PurifierFamily::DeterministicInvertibleMeasurement { noise_channels, .. } => {
                let mut scratch = ExprScratch::default();
                let scen = self.scenario_from_e(noise_channels, e_hist, t);
                let (aff, cvx) =
                    self.simulate_states(&e_hist[0], u_hist, t, &scen, &mut scratch)?;
                self.measure_at(t, &aff, &cvx, u_hist, &scen, &mut scratch)
            }
            PurifierFamily::StateAffineAdditive => {
                let mut scratch = ExprScratch::default();
                let zero = Scenario::new(vec![
                    DVector::zeros(self.model.dims().n_delta);
                    self.model.horizon().steps() + 1
                ])
                .expect("zeros are finite");
                let psi_u = self.output_at(t, u_hist, &zero, &mut scratch)?;
                let zero_controls =
                    vec![DVector::zeros(self.model.dims().n_u); u_hist.len()];
                let psi_0 = self.output_at(t, &zero_controls, &zero, &mut scratch)?;
                Ok(&e_hist[t] + (psi_u - psi_0))
            }
        }
    }

    /// The oracle form xi_t(d_{0:t}) -> e_t, used for testing and scenario
    /// precomputation inside Q-design.
    pub fn xi(&self, t: usize, scenario: &Scenario) -> Result<DVector<f64>, PurifyError> {
        let mut scratch = ExprScratch::default();
        match &self.family {
            PurifierFamily::MeasuredExogenous
            | PurifierFamily::PureEstimation
            | PurifierFamily::StateAffineAdditive => {
                let zero_controls = vec![DVector::zeros(self.model.dims().n_u); t];
                self.output_at(t, &zero_controls, scenario, &mut scratch)
            }
            PurifierFamily::PerfectState {
                disturbance_channels,
                ..
            } => {
                if t == 0 {
                    let zero_controls: Vec<DVector<f64>> = vec![];
                    self.output_at(0, &zero_controls, scenario, &mut scratch)
                } else {
                    Ok(DVector::from_iterator(
                        disturbance_channels.len(),
                        disturbance_channels.iter().map(|&c| scenario.value(t, c)),
                    ))
                }
            }
            PurifierFamily::DeterministicInvertibleMeasurement { noise_channels, .. } => {
                if t == 0 {
                    let zero_controls: Vec<DVector<f64>> = vec![];
                    self.output_at(0, &zero_controls, scenario, &mut scratch)
                } else {
                    Ok(DVector::from_iterator(
                        noise_channels.len(),
                        noise_channels.iter().map(|&c| scenario.value(t, c)),
                    ))
                }
            }
        }
    }

    /// Purify a full trajectory.
    pub fn purify(
        &self,
        y: &OutputTrajectory,
        u: &ControlTrajectory,
    ) -> Result<PurifiedTrajectory, PurifyError> {
        let mut e = Vec::with_capacity(y.len());
        for t in 0..y.len() {
            e.push(self.p(t, &y.0[..=t], &u.0[..t])?);
        }
        Ok(PurifiedTrajectory(e))
    }

    /// Invert a purified trajectory back into outputs; exact inverse of
    /// [`Purifier::purify`] on consistent data.
    pub fn unpurify(
        &self,
        e: &PurifiedTrajectory,
        u: &ControlTrajectory,
    ) -> Result<OutputTrajectory, PurifyError> {
        let mut y = Vec::with_capacity(e.len());
        for t in 0..e.len() {
            y.push(self.q(t, &e.0[..=t], &u.0[..t])?);
        }
        Ok(OutputTrajectory(y))
    }

    /// The full purified trajectory from the oracle.
    pub fn xi_trajectory(&self, scenario: &Scenario) -> Result<PurifiedTrajectory, PurifyError> {
        let t_max = self.model.horizon().steps();
        let mut e = Vec::with_capacity(t_max);
        for t in 0..t_max {
            e.push(self.xi(t, scenario)?);
        }
        Ok(PurifiedTrajectory(e))
    }

    /// One dynamics step from a known split state.
    fn one_step(
        &self,
        t: usize,
        aff_prev: &DVector<f64>,
        cvx_prev: &DVector<f64>,
        u_prev: &DVector<f64>,
        scenario: &Scenario,
        scratch: &mut ExprScratch,
    ) -> Result<DVector<f64>, PurifyError> {
        // Simulate one step by embedding the state at index t-1 of a
        // history; times inside the row expressions are absolute.
        let mut aff = vec![DVector::zeros(0); t - 1];
        let mut cvx = vec![DVector::zeros(0); t - 1];
        aff.push(aff_prev.clone());
        cvx.push(cvx_prev.clone());
        let mut controls = vec![DVector::zeros(0); t - 1];
        controls.push(u_prev.clone());
        let (aff2, cvx2) =
            rollout::step_once(&self.model, t, &aff, &cvx, &controls, scenario, scratch)?;
        Ok(stack(&aff2, &cvx2))
    }

    /// States 0..=t from a stacked initial state under a scenario.
    fn simulate_states(
        &self,
        x0: &DVector<f64>,
        u_hist: &[DVector<f64>],
        t: usize,
        scenario: &Scenario,
        scratch: &mut ExprScratch,
    ) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>), PurifyError> {
        let (aff0, cvx0) = self.split_output(x0);
        let mut aff = vec![aff0];
        let mut cvx = vec![cvx0];
        for tau in 1..=t {
            let (a, c) =
                rollout::step_once(&self.model, tau, &aff, &cvx, u_hist, scenario, scratch)?;
            aff.push(a);
            cvx.push(c);
        }
        Ok((aff, cvx))
    }

    fn measure_at(
        &self,
        t: usize,
        aff: &[DVector<f64>],
        cvx: &[DVector<f64>],
        u_hist: &[DVector<f64>],
        scenario: &Scenario,
        scratch: &mut ExprScratch,
    ) -> Result<DVector<f64>, PurifyError> {
        Ok(rollout::measure_only(
            &self.model,
            t,
            aff,
            cvx,
            u_hist,
            scenario,
            scratch,
        )?)
    }

    /// Output y_t under given controls and scenario (fresh simulation).
    fn output_at(
        &self,
        t: usize,
        u_hist: &[DVector<f64>],
        scenario: &Scenario,
        scratch: &mut ExprScratch,
    ) -> Result<DVector<f64>, PurifyError> {
        let (aff, cvx) = rollout::rollout_prefix(&self.model, u_hist, scenario, t, scratch)?;
        self.measure_at(t, &aff, &cvx, u_hist, scenario, scratch)
    }

    /// Short simulated round trips verifying p inverts the true dynamics and
    /// q inverts p; guards registered inverses at construction time.
    fn spot_check(&self) -> Result<(), PurifyError> {
        let d = self.model.dims();
        let t_max = self.model.horizon().steps().min(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_caf3);
        let mut checked = false;
        for _ in 0..4 {
            let scenario = Scenario::new(
                (0..self.model.horizon().steps() + 1)
                    .map(|_| {
                        DVector::from_iterator(
                            d.n_delta,
                            (0..d.n_delta).map(|_| rng.gen_range(-0.3..0.3)),
                        )
                    })
                    .collect(),
            )
            .expect("finite");
            let controls: Vec<DVector<f64>> = (0..t_max)
                .map(|_| {
                    DVector::from_iterator(d.n_u, (0..d.n_u).map(|_| rng.gen_range(-0.3..0.3)))
                })
                .collect();
            let mut scratch = ExprScratch::default();
            let run = (|| -> Result<(), PurifyError> {
                let mut ys = Vec::new();
                let (aff, cvx) = rollout::rollout_prefix(
                    &self.model,
                    &controls,
                    &scenario,
                    t_max.saturating_sub(1),
                    &mut scratch,
                )?;
                for t in 0..t_max {
                    ys.push(self.measure_at(t, &aff, &cvx, &controls, &scenario, &mut scratch)?);
                }
                let mut es = Vec::new();
                for t in 0..t_max {
                    let e = self.p(t, &ys[..=t], &controls[..t])?;
                    let oracle = self.xi(t, &scenario)?;
                    let err = (&e - &oracle).amax();
                    if err > 1e-6 * (1.0 + oracle.amax()) {
                        return Err(PurifyError::InverseMismatch { step: t, error: err });
                    }
                    es.push(e);
                    let back = self.q(t, &es, &controls[..t])?;
                    let err = (&back - &ys[t]).amax();
                    if err > 1e-6 * (1.0 + ys[t].amax()) {
                        return Err(PurifyError::InverseMismatch { step: t, error: err });
                    }
                }
                Ok(())
            })();
            match run {
                Ok(()) => {
                    checked = true;
                }
                // Simulation left the evaluable region (overflow or a
                // singular point); try another probe.
                Err(PurifyError::Rollout(_)) | Err(PurifyError::Singular { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        // If every probe left the domain the constructors' structural checks
        // still hold; the mutual-inverse property is then covered by tests.
        let _ = checked;
        Ok(())
    }
}

fn stack(aff: &DVector<f64>, cvx: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(aff.len() + cvx.len());
    out.rows_mut(0, aff.len()).copy_from(aff);
    out.rows_mut(aff.len(), cvx.len()).copy_from(cvx);
    out
}

/// Output-feedback law built from a purified-output policy via the
/// construction recursion; maintains the purified history incrementally
/// (one purifier call per step).
pub struct PiFromQ {
    purifier: Arc<Purifier>,
    q: Arc<dyn PurifiedFeedback + Send + Sync>,
    y_hist: Vec<DVector<f64>>,
    u_hist: Vec<DVector<f64>>,
    e_hist: Vec<DVector<f64>>,
}

/// Build pi from Q: pi_0(y_0) = Q_0(y_0) and
/// pi_t(y_{0:t}) = Q_t(p_{0:t}(y_{0:t}, pi_{0:t-1}(y_{0:t-1}))).
pub fn pi_from_q(
    purifier: Arc<Purifier>,
    q: Arc<dyn PurifiedFeedback + Send + Sync>,
) -> PiFromQ {
    PiFromQ {
        purifier,
        q,
        y_hist: Vec::new(),
        u_hist: Vec::new(),
        e_hist: Vec::new(),
    }
}

impl OutputFeedback for PiFromQ {
    fn reset(&mut self) {
        self.y_hist.clear();
        self.u_hist.clear();
        self.e_hist.clear();
    }

    fn step(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, PolicyError> {
        if self.y_hist.len() != t {
            return Err(PolicyError::HistoryLength {
                t,
                expected: t,
                got: self.y_hist.len(),
            });
        }
        self.y_hist.push(y.clone());
        let e_t = self
            .purifier
            .p(t, &self.y_hist, &self.u_hist)
            .map_err(|e| PolicyError::Purifier {
                t,
                reason: e.to_string(),
            })?;
        self.e_hist.push(e_t);
        let u_t = self.q.control(t, &self.e_hist)?;
        self.u_hist.push(u_t.clone());
        Ok(u_t)
    }
}

/// Purified-output policy built from an output-feedback law via the inverse
/// recursion: Q_0(e_0) = pi_0(e_0) and
/// Q_t(e_{0:t}) = pi_t(q_{0:t}(e_{0:t}, Q_{0:t-1}(e_{0:t-1}))).
pub struct QFromPi {
    purifier: Arc<Purifier>,
    pi: RefCell<Box<dyn OutputFeedback>>,
}

pub fn q_from_pi(purifier: Arc<Purifier>, pi: Box<dyn OutputFeedback>) -> QFromPi {
    QFromPi {
        purifier,
        pi: RefCell::new(pi),
    }
}

impl PurifiedFeedback for QFromPi {
    fn control(&self, t: usize, e_hist: &[DVector<f64>]) -> Result<DVector<f64>, PolicyError> {
        if e_hist.len() != t + 1 {
            return Err(PolicyError::HistoryLength {
                t,
                expected: t + 1,
                got: e_hist.len(),
            });
        }
        let mut pi = self.pi.borrow_mut();
        pi.reset();
        let mut us: Vec<DVector<f64>> = Vec::with_capacity(t + 1);
        for tau in 0..=t {
            let y_tau = self
                .purifier
                .q(tau, &e_hist[..=tau], &us)
                .map_err(|e| PolicyError::Purifier {
                    t: tau,
                    reason: e.to_string(),
                })?;
            let u_tau = pi.step(tau, &y_tau)?;
            us.push(u_tau);
        }
        Ok(us.pop().expect("at least one step"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::OpenLoopPolicy;
    use crate::system::{AffineStep, Dims, Horizon, StepDynamics, SystemModelBuilder};

    /// y_t = d_t (both channels measured).
    fn measured_exo_model(t_max: usize) -> Arc<SystemModel> {
        Arc::new(
            SystemModelBuilder::new(
                Horizon::new(t_max).unwrap(),
                Dims {
                    n_aff: 0,
                    n_cvx: 1,
                    n_u: 1,
                    n_y: 1,
                    n_delta: 1,
                },
            )
            .init(vec![], vec![Expr::constant(0.0)])
            .dynamics(|t| StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![
                    Expr::var(Slot::CvxState, t - 1, 0).scale(0.5)
                        + Expr::var(Slot::Control, t - 1, 0)
                        + Expr::var(Slot::Exogenous, t, 0),
                ],
            })
            .measurements(|t| vec![Expr::var(Slot::Exogenous, t, 0)])
            .costs(vec![Expr::constant(0.0)])
            .build()
            .unwrap(),
        )
    }

    fn constant_scenario(t_max: usize, v: f64) -> Scenario {
        Scenario::new(vec![DVector::from_vec(vec![v]); t_max + 1]).unwrap()
    }

    #[test]
    fn measured_exogenous_purifier_is_identity() {
        let model = measured_exo_model(4);
        let pur = make_purifier(PurifierFamily::MeasuredExogenous, model.clone()).unwrap();
        let scen = constant_scenario(4, 0.7);
        let u = ControlTrajectory(vec![DVector::from_vec(vec![0.3]); 4]);
        let y = crate::rollout::rollout_outputs(&model, &u, &scen).unwrap();
        let e = pur.purify(&y, &u).unwrap();
        for t in 0..4 {
            assert_eq!(e.step(t), y.step(t));
        }
        let back = pur.unpurify(&e, &u).unwrap();
        for t in 0..4 {
            assert_eq!(back.step(t), y.step(t));
        }
    }

    #[test]
    fn measured_exogenous_rejects_state_measurements() {
        let model = Arc::new(
            SystemModelBuilder::new(
                Horizon::new(2).unwrap(),
                Dims {
                    n_aff: 0,
                    n_cvx: 1,
                    n_u: 1,
                    n_y: 1,
                    n_delta: 1,
                },
            )
            .init(vec![], vec![Expr::constant(0.0)])
            .dynamics(|t| StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![Expr::var(Slot::CvxState, t - 1, 0).scale(0.5)],
            })
            .measurements(|t| vec![Expr::var(Slot::CvxState, t, 0)])
            .costs(vec![Expr::constant(0.0)])
            .build()
            .unwrap(),
        );
        let err = make_purifier(PurifierFamily::MeasuredExogenous, model).unwrap_err();
        assert!(matches!(err, PurifyError::Structural { .. }));
    }

    /// Perfect-state model with additive disturbance:
    /// x_t = 0.5 x_{t-1} + u_{t-1} + w_t, y_t = x_t.
    fn additive_perfect_state(t_max: usize) -> Arc<SystemModel> {
        Arc::new(
            SystemModelBuilder::new(
                Horizon::new(t_max).unwrap(),
                Dims {
                    n_aff: 0,
                    n_cvx: 1,
                    n_u: 1,
                    n_y: 1,
                    n_delta: 1,
                },
            )
            .init(vec![], vec![Expr::var(Slot::Exogenous, 0, 0)])
            .dynamics(|t| StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![
                    Expr::var(Slot::CvxState, t - 1, 0).scale(0.5)
                        + Expr::var(Slot::Control, t - 1, 0)
                        + Expr::var(Slot::Exogenous, t, 0),
                ],
            })
            .measurements(|t| vec![Expr::var(Slot::CvxState, t, 0)])
            .costs(vec![Expr::constant(0.0)])
            .build()
            .unwrap(),
        )
    }

    #[test]
    fn additive_perfect_state_recovers_disturbances() {
        let model = additive_perfect_state(5);
        let pur = make_purifier(
            PurifierFamily::PerfectState {
                disturbance_channels: vec![0],
                inverse: DynamicsInverse::Additive,
            },
            model.clone(),
        )
        .unwrap();
        let scen = Scenario::new(
            (0..6)
                .map(|t| DVector::from_vec(vec![0.1 * t as f64 - 0.2]))
                .collect(),
        )
        .unwrap();
        let u = ControlTrajectory(vec![DVector::from_vec(vec![0.25]); 5]);
        let y = crate::rollout::rollout_outputs(&model, &u, &scen).unwrap();
        let e = pur.purify(&y, &u).unwrap();
        // e_0 = y_0 = x_0, e_t = w_t afterwards.
        assert!((e.step(0)[0] - y.step(0)[0]).abs() < 1e-12);
        for t in 1..5 {
            assert!((e.step(t)[0] - scen.value(t, 0)).abs() < 1e-9, "t={t}");
        }
        let back = pur.unpurify(&e, &u).unwrap();
        for t in 0..5 {
            assert!((back.step(t)[0] - y.step(t)[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn pi_from_q_constant_policy_collapses() {
        let model = additive_perfect_state(4);
        let pur = Arc::new(
            make_purifier(
                PurifierFamily::PerfectState {
                    disturbance_channels: vec![0],
                    inverse: DynamicsInverse::Additive,
                },
                model.clone(),
            )
            .unwrap(),
        );
        let fixed = OpenLoopPolicy::new(vec![DVector::from_vec(vec![0.4]); 4]);
        let mut pi = pi_from_q(pur, Arc::new(fixed.clone()));
        let scen = constant_scenario(4, 0.15);
        let (_, u_closed, _) =
            crate::rollout::rollout_closed_loop(&model, &mut pi, &scen).unwrap();
        for t in 0..4 {
            assert_eq!(u_closed.step(t)[0], 0.4);
        }
        let _ = fixed;
    }

    #[test]
    fn q_from_pi_round_trip_on_sampled_histories() {
        let model = additive_perfect_state(4);
        let pur = Arc::new(
            make_purifier(
                PurifierFamily::PerfectState {
                    disturbance_channels: vec![0],
                    inverse: DynamicsInverse::Additive,
                },
                model.clone(),
            )
            .unwrap(),
        );
        // Q_t(e) = 0.3 e_t + 0.1 (a genuinely feedback policy).
        struct Q;
        impl PurifiedFeedback for Q {
            fn control(
                &self,
                t: usize,
                e_hist: &[DVector<f64>],
            ) -> Result<DVector<f64>, PolicyError> {
                Ok(DVector::from_vec(vec![0.3 * e_hist[t][0] + 0.1]))
            }
        }
        let pi = pi_from_q(pur.clone(), Arc::new(Q));
        let q_back = q_from_pi(pur.clone(), Box::new(pi));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let t = rng.gen_range(0..4);
            let e_hist: Vec<DVector<f64>> = (0..=t)
                .map(|_| DVector::from_vec(vec![rng.gen_range(-1.0..1.0)]))
                .collect();
            let direct = Q.control(t, &e_hist).unwrap();
            let via = q_back.control(t, &e_hist).unwrap();
            assert!((direct[0] - via[0]).abs() <= 1e-9);
        }
    }

    #[test]
    fn purified_outputs_do_not_depend_on_policy() {
        let model = additive_perfect_state(5);
        let pur = make_purifier(
            PurifierFamily::PerfectState {
                disturbance_channels: vec![0],
                inverse: DynamicsInverse::Additive,
            },
            model.clone(),
        )
        .unwrap();
        let scen = Scenario::new(
            (0..6)
                .map(|t| DVector::from_vec(vec![(t as f64 * 0.37).sin() * 0.4]))
                .collect(),
        )
        .unwrap();
        let u1 = ControlTrajectory(vec![DVector::from_vec(vec![0.0]); 5]);
        let u2 = ControlTrajectory(
            (0..5)
                .map(|t| DVector::from_vec(vec![0.2 * t as f64 - 0.3]))
                .collect(),
        );
        let y1 = crate::rollout::rollout_outputs(&model, &u1, &scen).unwrap();
        let y2 = crate::rollout::rollout_outputs(&model, &u2, &scen).unwrap();
        let e1 = pur.purify(&y1, &u1).unwrap();
        let e2 = pur.purify(&y2, &u2).unwrap();
        for t in 0..5 {
            assert!((e1.step(t)[0] - e2.step(t)[0]).abs() <= 1e-9, "t={t}");
        }
    }

    #[test]
    fn pure_estimation_requires_no_control_influence() {
        let influenced = additive_perfect_state(3);
        assert!(matches!(
            make_purifier(PurifierFamily::PureEstimation, influenced),
            Err(PurifyError::Structural { .. })
        ));
    }

    #[test]
    fn state_affine_additive_family_round_trip() {
        // x_t = 0.8 x_{t-1} + u^3 + w_t (control enters nonlinearly but
        // separably), y_t = x_t + v_t.
        let model = Arc::new(
            SystemModelBuilder::new(
                Horizon::new(4).unwrap(),
                Dims {
                    n_aff: 0,
                    n_cvx: 1,
                    n_u: 1,
                    n_y: 1,
                    n_delta: 2,
                },
            )
            .init(vec![], vec![Expr::var(Slot::Exogenous, 0, 0)])
            .dynamics(|t| StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![Expr::sum(vec![
                    Expr::var(Slot::CvxState, t - 1, 0).scale(0.8),
                    Expr::var(Slot::Control, t - 1, 0).pos().powf(3.0),
                    Expr::var(Slot::Exogenous, t, 0),
                ])],
            })
            .measurements(|t| {
                vec![Expr::var(Slot::CvxState, t, 0) + Expr::var(Slot::Exogenous, t, 1)]
            })
            .costs(vec![Expr::constant(0.0)])
            .build()
            .unwrap(),
        );
        let pur = make_purifier(PurifierFamily::StateAffineAdditive, model.clone()).unwrap();
        let scen = Scenario::new(
            (0..5)
                .map(|t| DVector::from_vec(vec![0.1 * t as f64, 0.05 * (t as f64 - 2.0)]))
                .collect(),
        )
        .unwrap();
        let u = ControlTrajectory(
            (0..4)
                .map(|t| DVector::from_vec(vec![0.3 + 0.1 * t as f64]))
                .collect(),
        );
        let y = crate::rollout::rollout_outputs(&model, &u, &scen).unwrap();
        let e = pur.purify(&y, &u).unwrap();
        // Purified output equals the zero-control output.
        let y0 = crate::rollout::rollout_outputs(
            &model,
            &ControlTrajectory::zeros(4, 1),
            &scen,
        )
        .unwrap();
        for t in 0..4 {
            assert!((e.step(t)[0] - y0.step(t)[0]).abs() <= 1e-9);
        }
        let back = pur.unpurify(&e, &u).unwrap();
        for t in 0..4 {
            assert!((back.step(t)[0] - y.step(t)[0]).abs() <= 1e-9);
        }
        // Zero control: e = y.
        let e0 = pur.purify(&y0, &ControlTrajectory::zeros(4, 1)).unwrap();
        for t in 0..4 {
            assert!((e0.step(t)[0] - y0.step(t)[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn state_affine_rejects_control_state_coupling() {
        // x_t = x_{t-1} * pos(u): not separable.
        let model = Arc::new(
            SystemModelBuilder::new(
                Horizon::new(2).unwrap(),
                Dims {
                    n_aff: 0,
                    n_cvx: 1,
                    n_u: 1,
                    n_y: 1,
                    n_delta: 1,
                },
            )
            .init(vec![], vec![Expr::var(Slot::Exogenous, 0, 0)])
            .dynamics(|t| StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![Expr::var(Slot::CvxState, t - 1, 0)
                    .mul(Expr::var(Slot::Control, t - 1, 0).pos())],
            })
            .measurements(|t| vec![Expr::var(Slot::CvxState, t, 0)])
            .costs(vec![Expr::constant(0.0)])
            .build()
            .unwrap(),
        );
        assert!(matches!(
            make_purifier(PurifierFamily::StateAffineAdditive, model),
            Err(PurifyError::Structural { .. })
        ));
    }

    #[test]
    fn deterministic_invertible_measurement_family() {
        // Deterministic x_t = 0.5 x_{t-1} + u_{t-1}, y_0 = x_0,
        // y_t = x_t + v_t for t >= 1 (channel 1 is the noise).
        let model = Arc::new(
            SystemModelBuilder::new(
                Horizon::new(4).unwrap(),
                Dims {
                    n_aff: 0,
                    n_cvx: 1,
                    n_u: 1,
                    n_y: 1,
                    n_delta: 2,
                },
            )
            .init(vec![], vec![Expr::var(Slot::Exogenous, 0, 0)])
            .dynamics(|t| StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![
                    Expr::var(Slot::CvxState, t - 1, 0).scale(0.5)
                        + Expr::var(Slot::Control, t - 1, 0),
                ],
            })
            .measurements(|t| {
                if t == 0 {
                    vec![Expr::var(Slot::CvxState, 0, 0)]
                } else {
                    vec![Expr::var(Slot::CvxState, t, 0) + Expr::var(Slot::Exogenous, t, 1)]
                }
            })
            .costs(vec![Expr::constant(0.0)])
            .build()
            .unwrap(),
        );
        let pur = make_purifier(
            PurifierFamily::DeterministicInvertibleMeasurement {
                noise_channels: vec![1],
                inverse: MeasurementInverse::Additive,
            },
            model.clone(),
        )
        .unwrap();
        let scen = Scenario::new(
            (0..5)
                .map(|t| DVector::from_vec(vec![0.6, 0.1 * (t as f64)]))
                .collect(),
        )
        .unwrap();
        let u = ControlTrajectory(vec![DVector::from_vec(vec![0.2]); 4]);
        let y = crate::rollout::rollout_outputs(&model, &u, &scen).unwrap();
        let e = pur.purify(&y, &u).unwrap();
        assert!((e.step(0)[0] - 0.6).abs() < 1e-12);
        for t in 1..4 {
            // e_t recovers the measurement noise v_t.
            assert!((e.step(t)[0] - scen.value(t, 1)).abs() < 1e-9, "t={t}");
        }
        let back = pur.unpurify(&e, &u).unwrap();
        for t in 0..4 {
            assert!((back.step(t)[0] - y.step(t)[0]).abs() < 1e-9);
        }
    }
}
