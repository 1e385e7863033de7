//! Coherent risk measures on sample sets and the CVaR epigraph transform.
//!
//! Sample-based forms: expectation is the sample mean, worst case and
//! value-at-risk are the sample maximum, and CVaR_beta is evaluated exactly
//! by tail sort. The Rockafellar-Uryasev objective
//! `alpha + mean((v - alpha)_+) / (1 - beta)` attains its infimum at a sample
//! point, and when `(1 - beta) * N` is an integer the value reduces to the
//! mean of the `(1 - beta) * N` largest samples; the implementation computes
//! exactly that tail mean, in descending sample order, so no tolerance enters
//! the core risk path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Near-integer snap applied to `(1 - beta) * N` before the tail split, so
/// that mathematically integer tail counts are treated exactly despite the
/// binary representation of beta.
const TAIL_COUNT_SNAP: f64 = 1e-9;

/// Sample-level predictor used by the predicted-value risk measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorTag {
    /// Predict by the sample mean.
    SampleMean,
}

/// A risk measure specification.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RiskSpec {
    Expected,
    Predicted { predictor: PredictorTag },
    WorstCase,
    Var { beta: f64 },
    Cvar { beta: f64 },
}

impl RiskSpec {
    pub fn cvar(beta: f64) -> Result<RiskSpec, RiskError> {
        check_beta(beta)?;
        Ok(RiskSpec::Cvar { beta })
    }

    pub fn var(beta: f64) -> Result<RiskSpec, RiskError> {
        check_beta(beta)?;
        Ok(RiskSpec::Var { beta })
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        match self {
            RiskSpec::Var { beta } | RiskSpec::Cvar { beta } => check_beta(*beta),
            _ => Ok(()),
        }
    }
}

fn check_beta(beta: f64) -> Result<(), RiskError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(RiskError::BetaOutOfRange { beta });
    }
    Ok(())
}

/// Realized scalar samples of a cost or constraint function.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(values: Vec<f64>) -> Result<SampleSet, RiskError> {
        if values.is_empty() {
            return Err(RiskError::EmptySampleSet);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RiskError::NonFiniteSample);
        }
        Ok(SampleSet { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum RiskError {
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("sample set contains a non-finite value")]
    NonFiniteSample,
    #[error("beta = {beta} is outside (0, 1)")]
    BetaOutOfRange { beta: f64 },
    #[error("paired sample sets have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
}

/// Indices sorted by descending value, ties by ascending index, plus the
/// tail weights of CVaR_beta: weight 1/m on the floor(m) largest samples and
/// (m - floor(m))/m on the boundary sample, with m = (1 - beta) * N snapped
/// to nearby integers.
pub(crate) fn cvar_tail(values: &[f64], beta: f64) -> (f64, Vec<(usize, f64)>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut m = (1.0 - beta) * n as f64;
    let nearest = m.round();
    if nearest >= 1.0 && (m - nearest).abs() <= TAIL_COUNT_SNAP * (n as f64).max(1.0) {
        m = nearest;
    }
    let whole = m.floor() as usize;
    let frac = m - whole as f64;
    let mut weights = Vec::with_capacity(whole + 1);
    let mut acc = 0.0;
    for &idx in order.iter().take(whole) {
        acc += values[idx];
        weights.push((idx, 1.0 / m));
    }
    let mut value = acc / m;
    if frac > 0.0 && whole < n {
        let idx = order[whole];
        // The fractional term keeps the integer case bit-identical to the
        // plain tail mean: it is only added when frac is nonzero.
        value = (acc + frac * values[idx]) / m;
        weights.push((idx, frac / m));
    }
    (value, weights)
}

/// Evaluate a risk measure on samples.
pub fn eval_risk(spec: &RiskSpec, samples: &SampleSet) -> Result<f64, RiskError> {
    spec.validate()?;
    let v = samples.values();
    let n = v.len() as f64;
    Ok(match spec {
        RiskSpec::Expected | RiskSpec::Predicted { predictor: PredictorTag::SampleMean } => {
            v.iter().sum::<f64>() / n
        }
        RiskSpec::WorstCase | RiskSpec::Var { .. } => {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
        RiskSpec::Cvar { beta } => cvar_tail(v, *beta).0,
    })
}

/// The CVaR epigraph transform: nonpositivity of the returned builder's
/// value, for some alpha, is equivalent to `cvar_beta(samples) <= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvarEpigraph {
    pub beta: f64,
}

/// Build the epigraph constraint for confidence level beta.
pub fn cvar_epigraph(beta: f64) -> Result<CvarEpigraph, RiskError> {
    check_beta(beta)?;
    Ok(CvarEpigraph { beta })
}

impl CvarEpigraph {
    /// mean((c - alpha)_+) + alpha (1 - beta), jointly convex in the samples
    /// and alpha.
    pub fn value(&self, samples: &[f64], alpha: f64) -> f64 {
        let n = samples.len() as f64;
        let mean_excess = samples.iter().map(|&c| (c - alpha).max(0.0)).sum::<f64>() / n;
        mean_excess + alpha * (1.0 - self.beta)
    }

    /// The Rockafellar-Uryasev objective `alpha + mean((c - alpha)_+)/(1-beta)`
    /// whose minimum over alpha is CVaR itself.
    pub fn ru_objective(&self, samples: &[f64], alpha: f64) -> f64 {
        let n = samples.len() as f64;
        let mean_excess = samples.iter().map(|&c| (c - alpha).max(0.0)).sum::<f64>() / n;
        alpha + mean_excess / (1.0 - self.beta)
    }

    /// Exact minimizer of the epigraph value over alpha at fixed samples
    /// (any beta-quantile of the empirical distribution works; the smallest
    /// candidate among sample points is returned for determinism).
    pub fn best_alpha(&self, samples: &[f64]) -> f64 {
        let mut best = samples[0];
        let mut best_val = self.value(samples, best);
        for &a in samples.iter().skip(1) {
            let val = self.value(samples, a);
            if val < best_val || (val == best_val && a < best) {
                best = a;
                best_val = val;
            }
        }
        best
    }
}

/// Outcome of probing the coherence axioms on sampled data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub monotone: bool,
    pub convex: bool,
    pub preserves_certainty: bool,
    pub max_monotonicity_violation: f64,
    pub max_convexity_violation: f64,
    pub max_certainty_violation: f64,
}

impl CoherenceReport {
    pub fn all_pass(&self) -> bool {
        self.monotone && self.convex && self.preserves_certainty
    }
}

const COHERENCE_TOL: f64 = 1e-9;

/// Probe monotonicity, convexity and certainty preservation of a risk
/// measure on element-wise coupled sample pairs.
///
/// Monotonicity is probed against the element-wise maximum of each pair (so
/// an ordered pair always exists); convexity is probed on a fixed grid of
/// mixing weights; certainty preservation is probed on constants drawn from
/// the data. Lower semicontinuity is not checked.
pub fn coherence_probe(
    spec: &RiskSpec,
    pairs: &[(SampleSet, SampleSet)],
) -> Result<CoherenceReport, RiskError> {
    spec.validate()?;
    let mut mono_viol: f64 = 0.0;
    let mut cvx_viol: f64 = 0.0;
    let mut cert_viol: f64 = 0.0;
    for (a, b) in pairs {
        if a.len() != b.len() {
            return Err(RiskError::LengthMismatch {
                a: a.len(),
                b: b.len(),
            });
        }
        let upper = SampleSet::new(
            a.values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| x.max(y))
                .collect(),
        )?;
        let ra = eval_risk(spec, a)?;
        let rb = eval_risk(spec, b)?;
        let r_up = eval_risk(spec, &upper)?;
        mono_viol = mono_viol.max(ra - r_up).max(rb - r_up);

        for lambda in [0.25, 0.5, 0.75] {
            let mix = SampleSet::new(
                a.values()
                    .iter()
                    .zip(b.values())
                    .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
                    .collect(),
            )?;
            let r_mix = eval_risk(spec, &mix)?;
            cvx_viol = cvx_viol.max(r_mix - (lambda * ra + (1.0 - lambda) * rb));
        }

        let mean_a = a.values().iter().sum::<f64>() / a.len() as f64;
        for c in [0.0, 1.0, mean_a] {
            let constant = SampleSet::new(vec![c; a.len()])?;
            cert_viol = cert_viol.max((eval_risk(spec, &constant)? - c).abs());
        }
    }
    Ok(CoherenceReport {
        monotone: mono_viol <= COHERENCE_TOL,
        convex: cvx_viol <= COHERENCE_TOL,
        preserves_certainty: cert_viol <= COHERENCE_TOL,
        max_monotonicity_violation: mono_viol,
        max_convexity_violation: cvx_viol,
        max_certainty_violation: cert_viol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(v: &[f64]) -> SampleSet {
        SampleSet::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cvar_tail_mean_example() {
        // beta = 0.75 on 4 samples: the worst 25% tail is the single maximum.
        let r = eval_risk(&RiskSpec::cvar(0.75).unwrap(), &samples(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(r.unwrap(), 4.0);
    }

    #[test]
    fn constant_samples_are_preserved_by_every_kind() {
        let s = samples(&[2.5; 7]);
        for spec in [
            RiskSpec::Expected,
            RiskSpec::Predicted {
                predictor: PredictorTag::SampleMean,
            },
            RiskSpec::WorstCase,
            RiskSpec::var(0.9).unwrap(),
            RiskSpec::cvar(0.9).unwrap(),
        ] {
            assert_eq!(eval_risk(&spec, &s).unwrap(), 2.5);
        }
    }

    #[test]
    fn worst_case_is_max() {
        let r = eval_risk(&RiskSpec::WorstCase, &samples(&[-1.0, 0.0, 2.0])).unwrap();
        assert_eq!(r, 2.0);
    }

    #[test]
    fn empty_sample_set_is_an_error() {
        assert_eq!(SampleSet::new(vec![]).unwrap_err(), RiskError::EmptySampleSet);
    }

    #[test]
    fn beta_out_of_range_rejected() {
        assert!(RiskSpec::cvar(0.0).is_err());
        assert!(RiskSpec::cvar(1.0).is_err());
        assert!(cvar_epigraph(1.5).is_err());
    }

    #[test]
    fn epigraph_hand_example() {
        // samples {1,2,3,4}, beta = 0.75, alpha = 3:
        // mean((v-3)_+) + 3 * 0.25 = 0.25 + 0.75 = 1.0
        let b = cvar_epigraph(0.75).unwrap();
        assert_eq!(b.value(&[1.0, 2.0, 3.0, 4.0], 3.0), 1.0);
        assert_eq!(b.value(&[0.0, 0.0, 0.0], 0.0), 0.0);
    }

    #[test]
    fn ru_scan_over_sample_alphas_matches_tail_sort() {
        let b = cvar_epigraph(0.8).unwrap();
        let v = [0.3, -1.2, 4.0, 2.2, 0.0, 1.7, -0.4, 3.1, 0.9, -2.0];
        let scan = v
            .iter()
            .map(|&a| b.ru_objective(&v, a))
            .fold(f64::INFINITY, f64::min);
        let tail = eval_risk(&RiskSpec::cvar(0.8).unwrap(), &samples(&v)).unwrap();
        assert!((scan - tail).abs() <= 1e-12, "scan {scan} vs tail {tail}");
    }

    #[test]
    fn fractional_tail_interpolates() {
        // N = 3, beta = 0.5: m = 1.5, tail = max + 0.5 * second / 1.5.
        let tail = eval_risk(&RiskSpec::cvar(0.5).unwrap(), &samples(&[1.0, 2.0, 3.0])).unwrap();
        assert!((tail - (3.0 + 0.5 * 2.0) / 1.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_tail_equals_max() {
        // (1 - beta) * N < 1: CVaR equals the sample maximum.
        let tail = eval_risk(&RiskSpec::cvar(0.99).unwrap(), &samples(&[5.0, -1.0, 2.0])).unwrap();
        assert_eq!(tail, 5.0);
    }

    #[test]
    fn cvar_sandwich_and_translation() {
        let v = samples(&[0.4, -0.7, 2.3, 1.1, -1.9, 0.0, 3.2, 0.6]);
        let mean = eval_risk(&RiskSpec::Expected, &v).unwrap();
        let max = eval_risk(&RiskSpec::WorstCase, &v).unwrap();
        let c1 = eval_risk(&RiskSpec::cvar(0.5).unwrap(), &v).unwrap();
        let c2 = eval_risk(&RiskSpec::cvar(0.875).unwrap(), &v).unwrap();
        assert!(mean <= c1 && c1 <= c2 && c2 <= max);

        for spec in [
            RiskSpec::Expected,
            RiskSpec::WorstCase,
            RiskSpec::var(0.75).unwrap(),
            RiskSpec::cvar(0.75).unwrap(),
        ] {
            let shifted = SampleSet::new(v.values().iter().map(|x| x + 1.25).collect()).unwrap();
            let lhs = eval_risk(&spec, &shifted).unwrap();
            let rhs = eval_risk(&spec, &v).unwrap() + 1.25;
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn coherence_probe_passes_for_coherent_kinds() {
        let pairs: Vec<(SampleSet, SampleSet)> = (0..64)
            .map(|k| {
                let a: Vec<f64> = (0..20)
                    .map(|i| ((i * 7 + k * 13) % 17) as f64 / 3.0 - 2.0)
                    .collect();
                let b: Vec<f64> = (0..20)
                    .map(|i| ((i * 11 + k * 5) % 23) as f64 / 4.0 - 2.5)
                    .collect();
                (SampleSet::new(a).unwrap(), SampleSet::new(b).unwrap())
            })
            .collect();
        for spec in [
            RiskSpec::Expected,
            RiskSpec::WorstCase,
            RiskSpec::var(0.9).unwrap(),
            RiskSpec::cvar(0.9).unwrap(),
        ] {
            let report = coherence_probe(&spec, &pairs).unwrap();
            assert!(report.all_pass(), "{spec:?}: {report:?}");
        }
    }

    #[test]
    fn coherence_probe_rejects_length_mismatch() {
        let pairs = vec![(samples(&[1.0, 2.0]), samples(&[1.0]))];
        assert!(matches!(
            coherence_probe(&RiskSpec::Expected, &pairs),
            Err(RiskError::LengthMismatch { a: 2, b: 1 })
        ));
    }

    #[test]
    fn minimizing_epigraph_alpha_reproduces_cvar_sign() {
        // Feasibility equivalence on samples: min over alpha of the builder
        // is (1 - beta) * cvar, so the signs agree.
        let v = [0.2, -0.8, 1.4, -0.1, 0.9, -1.3];
        let beta = 0.75;
        let b = cvar_epigraph(beta).unwrap();
        let min_builder = v
            .iter()
            .map(|&a| b.value(&v, a))
            .fold(f64::INFINITY, f64::min);
        let cvar = cvar_tail(&v, beta).0;
        assert!((min_builder - (1.0 - beta) * cvar).abs() <= 1e-12);
    }
}
