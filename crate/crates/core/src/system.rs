//! System models, scenarios and trajectory containers.
//!
//! A model is structured dynamics over a finite horizon: an affine block
//! `x_aff_t = A_t(d_t) x_aff_{t-1} + B_t(d_t) u_{t-1} + w_t(d_t)` stacked
//! with a convex block `x_cvx_t = h_t(x_aff_{t-1}, x_cvx_{t-1}, u_{t-1}, d_t)`,
//! plus measurement rows and cost/constraint functions over whole
//! trajectories. The affine block stores expression-valued matrix entries
//! that may depend on the exogenous input only, so the structural rule that
//! affine rows never reference convex states holds by construction.

use nalgebra::DVector;
use thiserror::Error;

use crate::analyze::VarBounds;
use crate::expr::{CompiledExpr, Expr, Interval, Slot, VarRef};

/// Number of control steps T; states run 0..=T, controls and outputs 0..T-1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Horizon(usize);

impl Horizon {
    pub fn new(t: usize) -> Result<Horizon, ModelError> {
        if t == 0 {
            return Err(ModelError::EmptyHorizon);
        }
        Ok(Horizon(t))
    }

    /// The number of control steps T.
    pub fn steps(&self) -> usize {
        self.0
    }
}

/// Per-step dimensions, constant across the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub n_aff: usize,
    pub n_cvx: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_delta: usize,
}

impl Dims {
    pub fn n_state(&self) -> usize {
        self.n_aff + self.n_cvx
    }
}

/// A named scalar component of the exogenous input vector, with declared
/// bounds used by the convexity certifier (unbounded when unknown).
#[derive(Clone, Debug)]
pub struct Channel {
    pub name: String,
    pub bounds: Interval,
}

impl Channel {
    pub fn new(name: impl Into<String>, bounds: Interval) -> Channel {
        Channel {
            name: name.into(),
            bounds,
        }
    }

    pub fn unbounded(name: impl Into<String>) -> Channel {
        Channel::new(name, Interval::UNBOUNDED)
    }
}

/// Affine-block data for one step: entries are expressions in the exogenous
/// input at that step only.
#[derive(Clone, Debug, Default)]
pub struct AffineStep {
    /// n_aff x n_aff matrix A_t.
    pub a: Vec<Vec<Expr>>,
    /// n_aff x n_u matrix B_t.
    pub b: Vec<Vec<Expr>>,
    /// n_aff offset w_t.
    pub w: Vec<Expr>,
}

/// Dynamics for one step t (describing the map from step t-1 to t).
#[derive(Clone, Debug, Default)]
pub struct StepDynamics {
    pub affine: AffineStep,
    /// Convex-block rows h_t, expressions over the previous state, previous
    /// control, and the current exogenous input.
    pub cvx_rows: Vec<Expr>,
}

/// One realization of the exogenous input trajectory d_0..d_T.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    delta: Vec<DVector<f64>>,
}

impl Scenario {
    pub fn new(delta: Vec<DVector<f64>>) -> Result<Scenario, ModelError> {
        for (t, d) in delta.iter().enumerate() {
            if d.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteScenario { t });
            }
        }
        Ok(Scenario { delta })
    }

    /// Number of entries (T+1 for a horizon-T model).
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn step(&self, t: usize) -> &DVector<f64> {
        &self.delta[t]
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.delta[t][channel]
    }

    pub fn steps(&self) -> &[DVector<f64>] {
        &self.delta
    }
}

/// State trajectory split into affine and convex blocks, one entry per
/// t = 0..=T.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    pub aff: Vec<DVector<f64>>,
    pub cvx: Vec<DVector<f64>>,
}

impl StateTrajectory {
    pub fn len(&self) -> usize {
        self.aff.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aff.is_empty()
    }

    pub fn state(&self, t: usize) -> SplitState {
        SplitState {
            aff: self.aff[t].clone(),
            cvx: self.cvx[t].clone(),
        }
    }
}

/// A single step's state, split into blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitState {
    pub aff: DVector<f64>,
    pub cvx: DVector<f64>,
}

/// Control trajectory u_0..u_{T-1}.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTrajectory(pub Vec<DVector<f64>>);

impl ControlTrajectory {
    pub fn zeros(horizon: usize, n_u: usize) -> ControlTrajectory {
        ControlTrajectory(vec![DVector::zeros(n_u); horizon])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn step(&self, t: usize) -> &DVector<f64> {
        &self.0[t]
    }

    /// Stack into one vector (u_0; u_1; ...).
    pub fn to_flat(&self) -> DVector<f64> {
        let n: usize = self.0.iter().map(|u| u.len()).sum();
        let mut out = DVector::zeros(n);
        let mut k = 0;
        for u in &self.0 {
            out.rows_mut(k, u.len()).copy_from(u);
            k += u.len();
        }
        out
    }

    pub fn from_flat(flat: &DVector<f64>, horizon: usize, n_u: usize) -> ControlTrajectory {
        let mut steps = Vec::with_capacity(horizon);
        for t in 0..horizon {
            steps.push(DVector::from_iterator(
                n_u,
                (0..n_u).map(|i| flat[t * n_u + i]),
            ));
        }
        ControlTrajectory(steps)
    }
}

/// Output trajectory y_0..y_{T-1}.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputTrajectory(pub Vec<DVector<f64>>);

impl OutputTrajectory {
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
pub enum ModelError {
    #[error("horizon must be at least one step")]
    EmptyHorizon,
    #[error("expected {expected} channels, got {got}")]
    ChannelCount { expected: usize, got: usize },
    #[error("{context}: expected {expected} rows, got {got}")]
    RowCount {
        context: String,
        expected: usize,
        got: usize,
    },
    #[error("{context}: variable {var:?} is out of range or not allowed here")]
    BadVariable { context: String, var: VarRef },
    #[error("scenario entry at t={t} is not finite")]
    NonFiniteScenario { t: usize },
}

/// Compiled evaluation caches for one model.
#[derive(Clone, Debug)]
pub(crate) struct CompiledModel {
    pub init_aff: Vec<CompiledExpr>,
    pub init_cvx: Vec<CompiledExpr>,
    /// Indexed by t-1 for t = 1..=T.
    pub steps: Vec<CompiledStep>,
    /// Indexed by t for t = 0..T-1.
    pub measurements: Vec<Vec<CompiledExpr>>,
    pub costs: Vec<CompiledExpr>,
}

#[derive(Clone, Debug)]
pub(crate) struct CompiledStep {
    pub a: Vec<Vec<CompiledExpr>>,
    pub b: Vec<Vec<CompiledExpr>>,
    pub w: Vec<CompiledExpr>,
    pub cvx_rows: Vec<CompiledExpr>,
}

/// Structured dynamics, measurements and cost/constraint functions.
#[derive(Clone, Debug)]
pub struct SystemModel {
    horizon: Horizon,
    dims: Dims,
    channels: Vec<Channel>,
    init_aff: Vec<Expr>,
    init_cvx: Vec<Expr>,
    steps: Vec<StepDynamics>,
    measurements: Vec<Vec<Expr>>,
    costs: Vec<Expr>,
    pub(crate) compiled: CompiledModel,
}

impl SystemModel {
    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn init_aff(&self) -> &[Expr] {
        &self.init_aff
    }

    pub fn init_cvx(&self) -> &[Expr] {
        &self.init_cvx
    }

    /// Dynamics for step t in 1..=T.
    pub fn step_dynamics(&self, t: usize) -> &StepDynamics {
        &self.steps[t - 1]
    }

    /// Measurement rows for t in 0..T-1.
    pub fn measurement(&self, t: usize) -> &[Expr] {
        &self.measurements[t]
    }

    /// Cost and constraint functions c_0..c_J.
    pub fn costs(&self) -> &[Expr] {
        &self.costs
    }

    pub fn num_constraints(&self) -> usize {
        self.costs.len().saturating_sub(1)
    }

    /// Check a scenario's shape against this model.
    pub fn check_scenario(&self, scenario: &Scenario) -> Result<(), ModelError> {
        let expected = self.horizon.steps() + 1;
        if scenario.len() != expected {
            return Err(ModelError::RowCount {
                context: "scenario length".into(),
                expected,
                got: scenario.len(),
            });
        }
        for t in 0..expected {
            if scenario.step(t).len() != self.dims.n_delta {
                return Err(ModelError::RowCount {
                    context: format!("scenario entry at t={t}"),
                    expected: self.dims.n_delta,
                    got: scenario.step(t).len(),
                });
            }
        }
        Ok(())
    }
}

impl VarBounds for SystemModel {
    fn exogenous_bounds(&self, _t: usize, i: usize) -> Interval {
        self.channels
            .get(i)
            .map(|c| c.bounds)
            .unwrap_or(Interval::UNBOUNDED)
    }
}

/// Builder for [`SystemModel`]; validates every expression's variable
/// references against the declared dimensions and step structure.
pub struct SystemModelBuilder {
    horizon: Horizon,
    dims: Dims,
    channels: Vec<Channel>,
    init_aff: Vec<Expr>,
    init_cvx: Vec<Expr>,
    steps: Vec<StepDynamics>,
    measurements: Vec<Vec<Expr>>,
    costs: Vec<Expr>,
}

impl SystemModelBuilder {
    pub fn new(horizon: Horizon, dims: Dims) -> SystemModelBuilder {
        SystemModelBuilder {
            horizon,
            dims,
            channels: (0..dims.n_delta)
                .map(|i| Channel::unbounded(format!("d{i}")))
                .collect(),
            init_aff: Vec::new(),
            init_cvx: Vec::new(),
            steps: Vec::new(),
            measurements: Vec::new(),
            costs: Vec::new(),
        }
    }

    pub fn channels(mut self, channels: Vec<Channel>) -> Self {
        self.channels = channels;
        self
    }

    pub fn init(mut self, init_aff: Vec<Expr>, init_cvx: Vec<Expr>) -> Self {
        self.init_aff = init_aff;
        self.init_cvx = init_cvx;
        self
    }

    /// Provide dynamics per step; called for t = 1..=T.
    pub fn dynamics(mut self, f: impl Fn(usize) -> StepDynamics) -> Self {
        self.steps = (1..=self.horizon.steps()).map(f).collect();
        self
    }

    /// Provide measurement rows per step; called for t = 0..T-1.
    pub fn measurements(mut self, f: impl Fn(usize) -> Vec<Expr>) -> Self {
        self.measurements = (0..self.horizon.steps()).map(f).collect();
        self
    }

    /// Cost c_0 followed by constraints c_1..c_J.
    pub fn costs(mut self, costs: Vec<Expr>) -> Self {
        self.costs = costs;
        self
    }

    pub fn build(self) -> Result<SystemModel, ModelError> {
        let t_max = self.horizon.steps();
        let d = self.dims;
        if self.channels.len() != d.n_delta {
            return Err(ModelError::ChannelCount {
                expected: d.n_delta,
                got: self.channels.len(),
            });
        }
        check_rows("initial affine states", &self.init_aff, d.n_aff)?;
        check_rows("initial convex states", &self.init_cvx, d.n_cvx)?;
        for e in self.init_aff.iter().chain(self.init_cvx.iter()) {
            check_vars("initial state", e, |v| {
                v.slot == Slot::Exogenous && v.t == 0 && v.i < d.n_delta
            })?;
        }
        if self.steps.len() != t_max {
            return Err(ModelError::RowCount {
                context: "dynamics steps".into(),
                expected: t_max,
                got: self.steps.len(),
            });
        }
        for (idx, step) in self.steps.iter().enumerate() {
            let t = idx + 1;
            let ctx = format!("dynamics at t={t}");
            check_rows(&ctx, &step.cvx_rows, d.n_cvx)?;
            check_matrix(&ctx, &step.affine.a, d.n_aff, d.n_aff)?;
            check_matrix(&ctx, &step.affine.b, d.n_aff, d.n_u)?;
            check_rows(&ctx, &step.affine.w, d.n_aff)?;
            for e in step
                .affine
                .a
                .iter()
                .chain(step.affine.b.iter())
                .flatten()
                .chain(step.affine.w.iter())
            {
                check_vars(&format!("{ctx} (affine block)"), e, |v| {
                    v.slot == Slot::Exogenous && v.t == t && v.i < d.n_delta
                })?;
            }
            for e in &step.cvx_rows {
                check_vars(&format!("{ctx} (convex block)"), e, |v| match v.slot {
                    Slot::AffState => v.t + 1 == t && v.i < d.n_aff,
                    Slot::CvxState => v.t + 1 == t && v.i < d.n_cvx,
                    Slot::Control => v.t + 1 == t && v.i < d.n_u,
                    Slot::Exogenous => v.t == t && v.i < d.n_delta,
                })?;
            }
        }
        if self.measurements.len() != t_max {
            return Err(ModelError::RowCount {
                context: "measurement steps".into(),
                expected: t_max,
                got: self.measurements.len(),
            });
        }
        for (t, rows) in self.measurements.iter().enumerate() {
            let ctx = format!("measurement at t={t}");
            check_rows(&ctx, rows, d.n_y)?;
            for e in rows {
                check_vars(&ctx, e, |v| match v.slot {
                    Slot::AffState => v.t == t && v.i < d.n_aff,
                    Slot::CvxState => v.t == t && v.i < d.n_cvx,
                    Slot::Control => t > 0 && v.t + 1 == t && v.i < d.n_u,
                    Slot::Exogenous => v.t == t && v.i < d.n_delta,
                })?;
            }
        }
        if self.costs.is_empty() {
            return Err(ModelError::RowCount {
                context: "costs".into(),
                expected: 1,
                got: 0,
            });
        }
        for (j, e) in self.costs.iter().enumerate() {
            check_vars(&format!("cost c_{j}"), e, |v| match v.slot {
                Slot::AffState => v.t <= t_max && v.i < d.n_aff,
                Slot::CvxState => v.t <= t_max && v.i < d.n_cvx,
                Slot::Control => v.t < t_max && v.i < d.n_u,
                Slot::Exogenous => v.t <= t_max && v.i < d.n_delta,
            })?;
        }

        let compiled = CompiledModel {
            init_aff: self.init_aff.iter().map(Expr::compile).collect(),
            init_cvx: self.init_cvx.iter().map(Expr::compile).collect(),
            steps: self
                .steps
                .iter()
                .map(|s| CompiledStep {
                    a: s.affine
                        .a
                        .iter()
                        .map(|row| row.iter().map(Expr::compile).collect())
                        .collect(),
                    b: s.affine
                        .b
                        .iter()
                        .map(|row| row.iter().map(Expr::compile).collect())
                        .collect(),
                    w: s.affine.w.iter().map(Expr::compile).collect(),
                    cvx_rows: s.cvx_rows.iter().map(Expr::compile).collect(),
                })
                .collect(),
            measurements: self
                .measurements
                .iter()
                .map(|rows| rows.iter().map(Expr::compile).collect())
                .collect(),
            costs: self.costs.iter().map(Expr::compile).collect(),
        };

        Ok(SystemModel {
            horizon: self.horizon,
            dims: self.dims,
            channels: self.channels,
            init_aff: self.init_aff,
            init_cvx: self.init_cvx,
            steps: self.steps,
            measurements: self.measurements,
            costs: self.costs,
            compiled,
        })
    }
}

fn check_rows(context: &str, rows: &[Expr], expected: usize) -> Result<(), ModelError> {
    if rows.len() != expected {
        return Err(ModelError::RowCount {
            context: context.into(),
            expected,
            got: rows.len(),
        });
    }
    Ok(())
}

fn check_matrix(
    context: &str,
    m: &[Vec<Expr>],
    rows: usize,
    cols: usize,
) -> Result<(), ModelError> {
    if m.len() != rows {
        return Err(ModelError::RowCount {
            context: format!("{context} (matrix rows)"),
            expected: rows,
            got: m.len(),
        });
    }
    for r in m {
        if r.len() != cols {
            return Err(ModelError::RowCount {
                context: format!("{context} (matrix cols)"),
                expected: cols,
                got: r.len(),
            });
        }
    }
    Ok(())
}

fn check_vars(
    context: &str,
    e: &Expr,
    allowed: impl Fn(VarRef) -> bool,
) -> Result<(), ModelError> {
    let mut bad = None;
    e.for_each_var(&mut |v| {
        if bad.is_none() && !allowed(v) {
            bad = Some(v);
        }
    });
    match bad {
        Some(var) => Err(ModelError::BadVariable {
            context: context.into(),
            var,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar integrator x_t = x_{t-1} + u_{t-1} as an affine-block model.
    pub fn integrator(t_max: usize) -> SystemModel {
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

    #[test]
    fn builder_accepts_integrator() {
        let m = integrator(3);
        assert_eq!(m.horizon().steps(), 3);
        assert_eq!(m.dims().n_aff, 1);
        assert_eq!(m.num_constraints(), 0);
    }

    #[test]
    fn builder_rejects_out_of_step_reference() {
        // Dynamics at step t referencing the state two steps back.
        let r = SystemModelBuilder::new(
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
        .dynamics(|_t| StepDynamics {
            affine: AffineStep::default(),
            cvx_rows: vec![Expr::var(Slot::CvxState, 0, 0)],
        })
        .measurements(|t| vec![Expr::var(Slot::CvxState, t, 0)])
        .costs(vec![Expr::constant(0.0)])
        .build();
        assert!(matches!(r, Err(ModelError::BadVariable { .. })));
    }

    #[test]
    fn scenario_rejects_non_finite_entries() {
        let bad = Scenario::new(vec![DVector::from_vec(vec![f64::NAN])]);
        assert!(matches!(bad, Err(ModelError::NonFiniteScenario { t: 0 })));
    }

    #[test]
    fn control_flat_round_trip() {
        let u = ControlTrajectory(vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, 4.0]),
        ]);
        let flat = u.to_flat();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ControlTrajectory::from_flat(&flat, 2, 2), u);
    }
}
