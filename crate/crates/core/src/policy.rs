//! Policy representations: open-loop vectors, causal output-feedback
//! evaluators, causal purified-output policies, and the basis-parameterized
//! family used by Q-design and closed-loop MPC.
//!
//! Output-feedback policies are stateful step evaluators: the rollout feeds
//! outputs one step at a time and receives controls, which keeps policies
//! causal by construction and lets purified-feedback policies maintain their
//! running histories incrementally. Purified-output policies are pure
//! functions of the whole history.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy expected history length {expected} at step {t}, got {got}")]
    HistoryLength { t: usize, expected: usize, got: usize },
    #[error("policy produced a control of dimension {got}, expected {expected}")]
    ControlDimension { expected: usize, got: usize },
    #[error("purifier failure inside policy at step {t}: {reason}")]
    Purifier { t: usize, reason: String },
    #[error("policy parameter vector has length {got}, expected {expected}")]
    ParameterLength { expected: usize, got: usize },
}

/// A causal output-feedback law evaluated one step at a time.
///
/// `step` must be called with t = 0, 1, 2, ... in order after a `reset`.
pub trait OutputFeedback {
    fn reset(&mut self);
    fn step(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, PolicyError>;
}

/// A causal policy in the purified output, evaluated on the full history
/// e_0..e_t.
pub trait PurifiedFeedback {
    fn control(&self, t: usize, e_hist: &[DVector<f64>]) -> Result<DVector<f64>, PolicyError>;
}

/// A fixed control trajectory acting as a constant policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopPolicy {
    pub controls: Vec<Vec<f64>>,
}

impl OpenLoopPolicy {
    pub fn new(controls: Vec<DVector<f64>>) -> OpenLoopPolicy {
        OpenLoopPolicy {
            controls: controls.iter().map(|u| u.as_slice().to_vec()).collect(),
        }
    }

    pub fn control_at(&self, t: usize) -> DVector<f64> {
        DVector::from_vec(self.controls[t].clone())
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

impl OutputFeedback for OpenLoopPolicy {
    fn reset(&mut self) {}

    fn step(&mut self, t: usize, _y: &DVector<f64>) -> Result<DVector<f64>, PolicyError> {
        if t >= self.controls.len() {
            return Err(PolicyError::HistoryLength {
                t,
                expected: self.controls.len(),
                got: t + 1,
            });
        }
        Ok(self.control_at(t))
    }
}

impl PurifiedFeedback for OpenLoopPolicy {
    fn control(&self, t: usize, _e_hist: &[DVector<f64>]) -> Result<DVector<f64>, PolicyError> {
        if t >= self.controls.len() {
            return Err(PolicyError::HistoryLength {
                t,
                expected: self.controls.len(),
                got: t + 1,
            });
        }
        Ok(self.control_at(t))
    }
}

/// Basis family for parameterized purified-output policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFamily {
    /// Intercept plus the raw purified outputs in the memory window.
    Affine,
    /// Affine features plus (e)_+^2 and hinge features (e - kappa)_+ per knot.
    PiecewiseQuadratic,
}

/// Configuration of the basis-policy family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub family: BasisFamily,
    /// Memory window length m: step t reads e_tau for t-m < tau <= t.
    /// `None` means the full history.
    pub memory: Option<usize>,
    /// Hinge knots for the piecewise-quadratic family.
    pub knots: Vec<f64>,
}

impl BasisConfig {
    pub fn affine(memory: Option<usize>) -> BasisConfig {
        BasisConfig {
            family: BasisFamily::Affine,
            memory,
            knots: Vec::new(),
        }
    }

    /// The default piecewise-quadratic family: knots {0, 0.5, 1}, memory 3.
    pub fn piecewise_quadratic_default() -> BasisConfig {
        BasisConfig {
            family: BasisFamily::PiecewiseQuadratic,
            memory: Some(3),
            knots: vec![0.0, 0.5, 1.0],
        }
    }

    fn window_start(&self, t: usize) -> usize {
        match self.memory {
            Some(m) => (t + 1).saturating_sub(m),
            None => 0,
        }
    }

    /// Features per scalar history entry (excluding the intercept).
    fn features_per_entry(&self) -> usize {
        match self.family {
            BasisFamily::Affine => 1,
            BasisFamily::PiecewiseQuadratic => 2 + self.knots.len(),
        }
    }

    /// Number of features emitted at step t for per-step history dimensions
    /// `e_dims`.
    pub fn num_features(&self, t: usize, e_dims: &[usize]) -> usize {
        let start = self.window_start(t);
        let entries: usize = e_dims[start..=t].iter().sum();
        1 + entries * self.features_per_entry()
    }
}

/// Deterministic feature map for one step.
///
/// Ordering: intercept first, then history entries in increasing time order;
/// for each scalar entry the affine family emits `e`, and the
/// piecewise-quadratic family emits `e, (e)_+^2, (e - kappa)_+` per knot in
/// declared order.
pub fn basis_features(
    config: &BasisConfig,
    t: usize,
    e_hist: &[DVector<f64>],
) -> Result<DVector<f64>, PolicyError> {
    if e_hist.len() != t + 1 {
        return Err(PolicyError::HistoryLength {
            t,
            expected: t + 1,
            got: e_hist.len(),
        });
    }
    let mut feats = vec![1.0];
    for e in &e_hist[config.window_start(t)..=t] {
        for &v in e.iter() {
            match config.family {
                BasisFamily::Affine => feats.push(v),
                BasisFamily::PiecewiseQuadratic => {
                    feats.push(v);
                    let p = v.max(0.0);
                    feats.push(p * p);
                    for &k in &config.knots {
                        feats.push((v - k).max(0.0));
                    }
                }
            }
        }
    }
    Ok(DVector::from_vec(feats))
}

/// Number of parameters of a basis policy over a horizon: features summed
/// over steps, times the control dimension.
pub fn num_params(config: &BasisConfig, horizon: usize, e_dims: &[usize], n_u: usize) -> usize {
    assert!(horizon >= 1, "basis policies need at least one step");
    assert!(e_dims.len() >= horizon);
    (0..horizon)
        .map(|t| config.num_features(t, e_dims) * n_u)
        .sum()
}

/// A basis policy with parameter vector theta: u_t = Theta_t f_t(e_{0:t}),
/// linear in theta for every fixed history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisQPolicy {
    pub config: BasisConfig,
    pub horizon: usize,
    /// Per-step purified-output dimensions (e_0..e_{T-1}).
    pub e_dims: Vec<usize>,
    pub n_u: usize,
    pub theta: Vec<f64>,
}

impl BasisQPolicy {
    pub fn zeros(
        config: BasisConfig,
        horizon: usize,
        e_dims: Vec<usize>,
        n_u: usize,
    ) -> BasisQPolicy {
        let k = num_params(&config, horizon, &e_dims, n_u);
        BasisQPolicy {
            config,
            horizon,
            e_dims,
            n_u,
            theta: vec![0.0; k],
        }
    }

    pub fn num_params(&self) -> usize {
        num_params(&self.config, self.horizon, &self.e_dims, self.n_u)
    }

    pub fn with_theta(&self, theta: &DVector<f64>) -> Result<BasisQPolicy, PolicyError> {
        if theta.len() != self.num_params() {
            return Err(PolicyError::ParameterLength {
                expected: self.num_params(),
                got: theta.len(),
            });
        }
        Ok(BasisQPolicy {
            theta: theta.as_slice().to_vec(),
            ..self.clone()
        })
    }

    /// Offset of step t's parameter block in theta.
    pub fn step_offset(&self, t: usize) -> usize {
        (0..t)
            .map(|s| self.config.num_features(s, &self.e_dims) * self.n_u)
            .sum()
    }

    /// Theta whose intercept terms reproduce a fixed control trajectory and
    /// whose feedback terms are zero.
    pub fn theta_for_constant_controls(&self, controls: &[DVector<f64>]) -> DVector<f64> {
        let mut theta = DVector::zeros(self.num_params());
        for t in 0..self.horizon {
            let f = self.config.num_features(t, &self.e_dims);
            let off = self.step_offset(t);
            for j in 0..self.n_u {
                // Intercept is the first feature of each row block.
                theta[off + j * f] = controls[t][j];
            }
        }
        theta
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("basis policy is serializable")
    }
}

impl PurifiedFeedback for BasisQPolicy {
    fn control(&self, t: usize, e_hist: &[DVector<f64>]) -> Result<DVector<f64>, PolicyError> {
        if t >= self.horizon {
            return Err(PolicyError::HistoryLength {
                t,
                expected: self.horizon,
                got: t + 1,
            });
        }
        let feats = basis_features(&self.config, t, e_hist)?;
        let f = feats.len();
        let off = self.step_offset(t);
        let mut u = DVector::zeros(self.n_u);
        for j in 0..self.n_u {
            let mut acc = 0.0;
            for k in 0..f {
                acc += self.theta[off + j * f + k] * feats[k];
            }
            u[j] = acc;
        }
        Ok(u)
    }
}

/// Wrap a purified policy as an output-feedback law when outputs are already
/// purified (identity purifier families); mainly a testing convenience.
pub struct DirectQPolicy<Q: PurifiedFeedback> {
    pub q: Q,
    hist: Vec<DVector<f64>>,
}

impl<Q: PurifiedFeedback> DirectQPolicy<Q> {
    pub fn new(q: Q) -> Self {
        DirectQPolicy { q, hist: Vec::new() }
    }
}

impl<Q: PurifiedFeedback> OutputFeedback for DirectQPolicy<Q> {
    fn reset(&mut self) {
        self.hist.clear();
    }

    fn step(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, PolicyError> {
        self.hist.truncate(t);
        self.hist.push(y.clone());
        self.q.control(t, &self.hist)
    }
}

/// A stateless function of (t, full output history); used by tests and the
/// bijection recursions.
pub struct FnPolicy<F: FnMut(usize, &[DVector<f64>]) -> DVector<f64>> {
    f: F,
    hist: Vec<DVector<f64>>,
}

impl<F: FnMut(usize, &[DVector<f64>]) -> DVector<f64>> FnPolicy<F> {
    pub fn new(f: F) -> Self {
        FnPolicy { f, hist: Vec::new() }
    }
}

impl<F: FnMut(usize, &[DVector<f64>]) -> DVector<f64>> OutputFeedback for FnPolicy<F> {
    fn reset(&mut self) {
        self.hist.clear();
    }

    fn step(&mut self, t: usize, y: &DVector<f64>) -> Result<DVector<f64>, PolicyError> {
        self.hist.truncate(t);
        self.hist.push(y.clone());
        Ok((self.f)(t, &self.hist))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_hist(values: &[f64]) -> Vec<DVector<f64>> {
        values.iter().map(|&v| DVector::from_vec(vec![v])).collect()
    }

    #[test]
    fn affine_features_at_step_zero() {
        let cfg = BasisConfig::affine(None);
        let f = basis_features(&cfg, 0, &scalar_hist(&[2.0])).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn piecewise_quadratic_features_include_hinges() {
        let cfg = BasisConfig {
            family: BasisFamily::PiecewiseQuadratic,
            memory: None,
            knots: vec![0.5],
        };
        let f = basis_features(&cfg, 0, &scalar_hist(&[1.0])).unwrap();
        // [1, e, (e)_+^2, (e - 0.5)_+]
        assert_eq!(f.as_slice(), &[1.0, 1.0, 1.0, 0.5]);
        let f = basis_features(&cfg, 0, &scalar_hist(&[-1.0])).unwrap();
        assert_eq!(f.as_slice(), &[1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn memory_window_limits_history() {
        let cfg = BasisConfig::affine(Some(1));
        let f = basis_features(&cfg, 2, &scalar_hist(&[5.0, 6.0, 7.0])).unwrap();
        // window t-m < tau <= t with m = 1 keeps only e_t.
        assert_eq!(f.as_slice(), &[1.0, 7.0]);
    }

    #[test]
    fn num_params_matches_hand_counts() {
        // Affine, full memory, T = 3, scalar e and u: 2 + 3 + 4 = 9.
        let cfg = BasisConfig::affine(None);
        assert_eq!(num_params(&cfg, 3, &[1, 1, 1], 1), 9);
        // Memory 1 variant: 2 + 2 + 2 = 6.
        let cfg = BasisConfig::affine(Some(1));
        assert_eq!(num_params(&cfg, 3, &[1, 1, 1], 1), 6);
    }

    #[test]
    #[should_panic(expected = "at least one step")]
    fn num_params_rejects_empty_horizon() {
        num_params(&BasisConfig::affine(None), 0, &[], 1);
    }

    #[test]
    fn zero_theta_gives_zero_control() {
        let q = BasisQPolicy::zeros(BasisConfig::affine(None), 3, vec![1, 1, 1], 1);
        let u = q.control(1, &scalar_hist(&[1.0, 2.0])).unwrap();
        assert_eq!(u.as_slice(), &[0.0]);
    }

    #[test]
    fn basis_selection_recovers_history_entry() {
        // theta selecting the e_t feature at each step: u_t = e_t.
        let mut q = BasisQPolicy::zeros(BasisConfig::affine(None), 2, vec![1, 1], 1);
        // Step 0 features [1, e0]; step 1 features [1, e0, e1].
        q.theta = vec![0.0, 1.0, 0.0, 0.0, 1.0];
        let u0 = q.control(0, &scalar_hist(&[3.0])).unwrap();
        let u1 = q.control(1, &scalar_hist(&[3.0, 4.0])).unwrap();
        assert_eq!(u0[0], 3.0);
        assert_eq!(u1[0], 4.0);
    }

    #[test]
    fn theta_linearity_disjoint_supports_is_exact() {
        let base = BasisQPolicy::zeros(BasisConfig::affine(None), 2, vec![1, 1], 1);
        let hist = scalar_hist(&[1.7, -0.3]);
        let k = base.num_params();
        let mut t1 = DVector::zeros(k);
        let mut t2 = DVector::zeros(k);
        t1[0] = 0.37;
        t1[3] = -1.25;
        t2[1] = 0.91;
        t2[4] = 2.0;
        let q1 = base.with_theta(&t1).unwrap();
        let q2 = base.with_theta(&t2).unwrap();
        let q12 = base.with_theta(&(&t1 + &t2)).unwrap();
        for t in 0..2 {
            let a = q1.control(t, &hist[..=t]).unwrap();
            let b = q2.control(t, &hist[..=t]).unwrap();
            let c = q12.control(t, &hist[..=t]).unwrap();
            // Disjoint supports make the sum exact in floating point.
            assert_eq!(c[0], a[0] + b[0]);
        }
    }

    #[test]
    fn theta_scaling_by_two_is_exact() {
        let base = BasisQPolicy::zeros(BasisConfig::affine(None), 2, vec![1, 1], 1);
        let hist = scalar_hist(&[1.7, -0.3]);
        let t1 = DVector::from_vec(vec![0.3, -0.7, 1.1, 0.2, 0.9]);
        let q1 = base.with_theta(&t1).unwrap();
        let q2 = base.with_theta(&(2.0 * &t1)).unwrap();
        for t in 0..2 {
            let a = q1.control(t, &hist[..=t]).unwrap();
            let b = q2.control(t, &hist[..=t]).unwrap();
            assert_eq!(b[0], 2.0 * a[0]);
        }
    }

    #[test]
    fn causality_features_ignore_future() {
        let cfg = BasisConfig::affine(None);
        let f2 = basis_features(&cfg, 1, &scalar_hist(&[1.0, 2.0])).unwrap();
        let err = basis_features(&cfg, 1, &scalar_hist(&[1.0, 2.0, 99.0]));
        assert!(err.is_err());
        assert_eq!(f2.as_slice(), &[1.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_control_theta_reproduces_trajectory() {
        let base = BasisQPolicy::zeros(BasisConfig::affine(Some(2)), 3, vec![1, 1, 1], 1);
        let controls = scalar_hist(&[4.0, -1.0, 0.5]);
        let theta = base.theta_for_constant_controls(&controls);
        let q = base.with_theta(&theta).unwrap();
        let hist = scalar_hist(&[9.0, 8.0, 7.0]);
        for t in 0..3 {
            assert_eq!(q.control(t, &hist[..=t]).unwrap()[0], controls[t][0]);
        }
    }

    #[test]
    fn policy_serialization_round_trip() {
        let q = BasisQPolicy::zeros(BasisConfig::piecewise_quadratic_default(), 2, vec![1, 1], 1);
        let json = serde_json::to_string(&q).unwrap();
        let back: BasisQPolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(q, back);
    }
}
