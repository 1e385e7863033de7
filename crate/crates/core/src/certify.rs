//! Convex-system certification and the concave-dynamics sign flip.
//!
//! A model is certified when every convex-block dynamics row is jointly
//! convex in the previous state and control and nondecreasing in each convex
//! state, every cost/constraint is convex and nondecreasing in each convex
//! state, and affine rows touch no convex state. The analysis runs under the
//! model's declared exogenous channel bounds, so the verdict holds for every
//! admissible realization. Certification is conservative: an unverified rule
//! yields a rejection, never a false pass.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{
    analyze_bounded, blame_curvature, blame_monotonicity, AnalyzeError, Curvature, CurvatureReq,
    Monotonicity, MonotonicityReq,
};
use crate::expr::{Expr, Slot, VarRef};
use crate::system::{ModelError, StepDynamics, SystemModel, SystemModelBuilder};

/// Which certification condition a finding violates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// A convex-block dynamics row is not verifiably convex.
    DynamicsRowNotConvex,
    /// A convex-block dynamics row is not verifiably nondecreasing in a
    /// convex state.
    DynamicsRowNotMonotone,
    /// A cost or constraint is not verifiably convex.
    CostNotConvex,
    /// A cost or constraint is not verifiably nondecreasing in a convex
    /// state.
    CostNotMonotone,
    /// An affine-block entry references a convex state.
    AffineRowReferencesCvxState,
    /// Expression left its domain during analysis.
    DomainViolation,
}

/// One rule violation, localized to a step, row and subtree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    /// Dynamics step t, or `None` for cost/constraint findings.
    pub step: Option<usize>,
    /// Dynamics row index, or cost index j.
    pub row: usize,
    pub condition: Condition,
    /// Child-index path to the offending subtree.
    pub path: Vec<usize>,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    ConvexSystem,
    Rejected,
}

/// The certification result: a verdict plus the findings that justify a
/// rejection. The verdict is `ConvexSystem` exactly when no findings exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub findings: Vec<Finding>,
}

impl Certificate {
    pub fn is_convex_system(&self) -> bool {
        matches!(self.verdict, Verdict::ConvexSystem)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }
}

fn domain_finding(step: Option<usize>, row: usize, err: &AnalyzeError) -> Finding {
    let AnalyzeError::Domain { path, reason } = err;
    Finding {
        step,
        row,
        condition: Condition::DomainViolation,
        path: path.clone(),
        detail: reason.clone(),
    }
}

/// Certify a model against the convex-system conditions. Rejection is a
/// verdict, not an error.
pub fn certify_system(model: &SystemModel) -> Certificate {
    let mut findings = Vec::new();
    let t_max = model.horizon().steps();
    let d = model.dims();

    for t in 1..=t_max {
        let step = model.step_dynamics(t);
        // Structural rule: affine rows may not reference convex states.
        // The model representation already enforces this; re-checked here so
        // the certificate does not depend on construction-time invariants.
        for e in step
            .affine
            .a
            .iter()
            .chain(step.affine.b.iter())
            .flatten()
            .chain(step.affine.w.iter())
        {
            let mut bad = None;
            e.for_each_var(&mut |v| {
                if bad.is_none() && v.slot == Slot::CvxState {
                    bad = Some(v);
                }
            });
            if let Some(v) = bad {
                findings.push(Finding {
                    step: Some(t),
                    row: 0,
                    condition: Condition::AffineRowReferencesCvxState,
                    path: vec![],
                    detail: format!("affine block at t={t} references convex state {v:?}"),
                });
            }
        }
        for (r, row) in step.cvx_rows.iter().enumerate() {
            let analysis = match analyze_bounded(row, model) {
                Ok(a) => a,
                Err(e) => {
                    findings.push(domain_finding(Some(t), r, &e));
                    continue;
                }
            };
            if !analysis.curvature.is_convex() {
                findings.push(Finding {
                    step: Some(t),
                    row: r,
                    condition: Condition::DynamicsRowNotConvex,
                    path: blame_curvature(row, model, CurvatureReq::Convex),
                    detail: format!(
                        "dynamics row {r} at t={t} analyzed {:?}, needs convex",
                        analysis.curvature
                    ),
                });
            }
            for i in 0..d.n_cvx {
                let var = VarRef::new(Slot::CvxState, t - 1, i);
                let tag = analysis.monotonicity(var);
                if !tag.is_nondecreasing() {
                    findings.push(Finding {
                        step: Some(t),
                        row: r,
                        condition: Condition::DynamicsRowNotMonotone,
                        path: blame_monotonicity(row, model, var, MonotonicityReq::Nondecreasing),
                        detail: format!(
                            "dynamics row {r} at t={t} analyzed {tag:?} in convex state {i}, needs nondecreasing"
                        ),
                    });
                }
            }
        }
    }

    for (j, cost) in model.costs().iter().enumerate() {
        let analysis = match analyze_bounded(cost, model) {
            Ok(a) => a,
            Err(e) => {
                findings.push(domain_finding(None, j, &e));
                continue;
            }
        };
        if !analysis.curvature.is_convex() {
            findings.push(Finding {
                step: None,
                row: j,
                condition: Condition::CostNotConvex,
                path: blame_curvature(cost, model, CurvatureReq::Convex),
                detail: format!("c_{j} analyzed {:?}, needs convex", analysis.curvature),
            });
        }
        // Nondecreasing in every convex-state component the cost references;
        // unreferenced components are constant and pass.
        for (var, tag) in analysis.monotonicities() {
            if var.slot == Slot::CvxState && !tag.is_nondecreasing() {
                findings.push(Finding {
                    step: None,
                    row: j,
                    condition: Condition::CostNotMonotone,
                    path: blame_monotonicity(cost, model, *var, MonotonicityReq::Nondecreasing),
                    detail: format!(
                        "c_{j} analyzed {tag:?} in convex state (t={}, i={}), needs nondecreasing",
                        var.t, var.i
                    ),
                });
            }
        }
    }

    Certificate {
        verdict: if findings.is_empty() {
            Verdict::ConvexSystem
        } else {
            Verdict::Rejected
        },
        findings,
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum FlipError {
    #[error("row {row} is out of range for the convex block of size {n_cvx}")]
    RowOutOfRange { row: usize, n_cvx: usize },
    #[error("row {row} at t={t} analyzed {got:?}, expected {expected} (subtree path {path:?})")]
    WrongCurvature {
        t: usize,
        row: usize,
        got: Curvature,
        expected: &'static str,
        path: Vec<usize>,
    },
    #[error("row {row} at t={t} is {got:?} in convex state {component}, expected {expected} (subtree path {path:?})")]
    MonotonePattern {
        t: usize,
        row: usize,
        component: usize,
        got: Monotonicity,
        expected: &'static str,
        path: Vec<usize>,
    },
    #[error(transparent)]
    Domain(#[from] AnalyzeError),
    #[error(transparent)]
    Rebuild(#[from] ModelError),
}

/// Negate the listed concave state rows so the transformed model meets the
/// convex-system conditions.
///
/// Preconditions follow the cross-monotonicity pattern: listed rows must be
/// concave, nondecreasing in listed (same-sign) states and nonincreasing in
/// unlisted ones; unlisted rows must be convex, nondecreasing in unlisted
/// states and nonincreasing in listed ones. The listed states are replaced
/// by their negations everywhere they appear, including measurements, costs
/// and constraints, so simulations of the original and transformed models
/// agree after un-negating the listed components.
pub fn flip_concave(
    model: &SystemModel,
    concave_rows: &BTreeSet<usize>,
) -> Result<SystemModel, FlipError> {
    let d = model.dims();
    let t_max = model.horizon().steps();
    for &r in concave_rows {
        if r >= d.n_cvx {
            return Err(FlipError::RowOutOfRange {
                row: r,
                n_cvx: d.n_cvx,
            });
        }
    }
    if concave_rows.is_empty() {
        return Ok(model.clone());
    }

    // Verify curvature and the cross-monotonicity pattern on every step.
    for t in 1..=t_max {
        let step = model.step_dynamics(t);
        for (r, row) in step.cvx_rows.iter().enumerate() {
            let flipped_row = concave_rows.contains(&r);
            let analysis = analyze_bounded(row, model)?;
            if flipped_row && !analysis.curvature.is_concave() {
                return Err(FlipError::WrongCurvature {
                    t,
                    row: r,
                    got: analysis.curvature,
                    expected: "concave",
                    path: blame_curvature(row, model, CurvatureReq::Concave),
                });
            }
            if !flipped_row && !analysis.curvature.is_convex() {
                return Err(FlipError::WrongCurvature {
                    t,
                    row: r,
                    got: analysis.curvature,
                    expected: "convex",
                    path: blame_curvature(row, model, CurvatureReq::Convex),
                });
            }
            for i in 0..d.n_cvx {
                let var = VarRef::new(Slot::CvxState, t - 1, i);
                let tag = analysis.monotonicity(var);
                let same_sign = concave_rows.contains(&i) == flipped_row;
                if same_sign && !tag.is_nondecreasing() {
                    return Err(FlipError::MonotonePattern {
                        t,
                        row: r,
                        component: i,
                        got: tag,
                        expected: "nondecreasing",
                        path: blame_monotonicity(row, model, var, MonotonicityReq::Nondecreasing),
                    });
                }
                if !same_sign && !tag.is_nonincreasing() {
                    return Err(FlipError::MonotonePattern {
                        t,
                        row: r,
                        component: i,
                        got: tag,
                        expected: "nonincreasing",
                        path: blame_monotonicity(row, model, var, MonotonicityReq::Nonincreasing),
                    });
                }
            }
        }
    }

    // z_i = -z'_i for listed components, everywhere the old state appears.
    let subst = |v: VarRef| -> Option<Expr> {
        (v.slot == Slot::CvxState && concave_rows.contains(&v.i)).then(|| Expr::Var(v).neg())
    };

    let negate_if_flipped = |r: usize, e: Expr| -> Expr {
        if concave_rows.contains(&r) {
            e.neg()
        } else {
            e
        }
    };

    let init_cvx = model
        .init_cvx()
        .iter()
        .enumerate()
        .map(|(r, e)| negate_if_flipped(r, e.clone()))
        .collect();

    let steps: Vec<StepDynamics> = (1..=t_max)
        .map(|t| {
            let step = model.step_dynamics(t);
            StepDynamics {
                affine: step.affine.clone(),
                cvx_rows: step
                    .cvx_rows
                    .iter()
                    .enumerate()
                    .map(|(r, e)| negate_if_flipped(r, e.substitute(&subst)))
                    .collect(),
            }
        })
        .collect();

    let measurements: Vec<Vec<Expr>> = (0..t_max)
        .map(|t| {
            model
                .measurement(t)
                .iter()
                .map(|e| e.substitute(&subst))
                .collect()
        })
        .collect();

    let costs = model
        .costs()
        .iter()
        .map(|e| e.substitute(&subst))
        .collect();

    let rebuilt = SystemModelBuilder::new(model.horizon(), d)
        .channels(model.channels().to_vec())
        .init(model.init_aff().to_vec(), init_cvx)
        .dynamics(|t| steps[t - 1].clone())
        .measurements(|t| measurements[t].clone())
        .costs(costs)
        .build()?;
    Ok(rebuilt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{
        AffineStep, ControlTrajectory, Dims, Horizon, Scenario, StepDynamics, SystemModelBuilder,
    };
    use nalgebra::DVector;

    fn xc(t: usize) -> Expr {
        Expr::var(Slot::CvxState, t, 0)
    }

    fn uv(t: usize) -> Expr {
        Expr::var(Slot::Control, t, 0)
    }

    /// x_t = (x_{t-1})_+^2 - u_{t-1}, constraint max(x) - 1.
    fn toy_convex(t_max: usize, negate_dynamics: bool, bad_cost: bool) -> SystemModel {
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
        .dynamics(|t| {
            let row = xc(t - 1).pos().square() - uv(t - 1);
            StepDynamics {
                affine: AffineStep::default(),
                cvx_rows: vec![if negate_dynamics { row.neg() } else { row }],
            }
        })
        .measurements(|t| vec![xc(t)])
        .costs(vec![
            Expr::sum((0..t_max).map(|t| uv(t).abs()).collect()),
            if bad_cost {
                xc(t_max).neg()
            } else {
                Expr::max((1..=t_max).map(xc).collect()) - Expr::constant(1.0)
            },
        ])
        .build()
        .unwrap()
    }

    #[test]
    fn toy_model_certifies() {
        let cert = certify_system(&toy_convex(3, false, false));
        assert!(cert.is_convex_system());
        assert!(cert.findings.is_empty());
    }

    #[test]
    fn negated_dynamics_rejected_with_localized_finding() {
        let cert = certify_system(&toy_convex(3, true, false));
        assert_eq!(cert.verdict, Verdict::Rejected);
        let f = cert
            .findings
            .iter()
            .find(|f| f.condition == Condition::DynamicsRowNotConvex)
            .expect("convexity finding");
        assert_eq!(f.step, Some(1));
        assert_eq!(f.row, 0);
        // The path leads to a real subtree of the row.
        let row = &toy_convex(3, true, false).step_dynamics(1).cvx_rows[0].clone();
        assert!(row.descend(&f.path).is_some());
    }

    #[test]
    fn decreasing_constraint_rejected() {
        let cert = certify_system(&toy_convex(3, false, true));
        assert_eq!(cert.verdict, Verdict::Rejected);
        let f = cert
            .findings
            .iter()
            .find(|f| f.condition == Condition::CostNotMonotone)
            .expect("monotonicity finding");
        assert_eq!(f.step, None);
        assert_eq!(f.row, 1);
    }

    #[test]
    fn findings_only_grow_when_adding_constraints() {
        let base = toy_convex(3, true, false);
        let cert_base = certify_system(&base);
        let more = toy_convex(3, true, true);
        let cert_more = certify_system(&more);
        assert!(cert_more.findings.len() > cert_base.findings.len());
        // Every base dynamics finding survives.
        for f in cert_base
            .findings
            .iter()
            .filter(|f| f.step.is_some())
        {
            assert!(cert_more.findings.contains(f));
        }
    }

    /// z_t = -(-z_{t-1})_+^2 + u_{t-1}: concave, nondecreasing in z.
    fn concave_model(t_max: usize) -> SystemModel {
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
            cvx_rows: vec![xc(t - 1).neg().pos().square().neg() + uv(t - 1)],
        })
        .measurements(|t| vec![xc(t)])
        .costs(vec![
            Expr::sum((0..t_max).map(|t| uv(t).abs()).collect()),
            // Nonincreasing in z, so it becomes nondecreasing after the flip.
            xc(t_max).neg(),
        ])
        .build()
        .unwrap()
    }

    #[test]
    fn flip_concave_row_certifies_after_transform() {
        let m = concave_model(3);
        assert_eq!(certify_system(&m).verdict, Verdict::Rejected);
        let flipped = flip_concave(&m, &BTreeSet::from([0])).unwrap();
        let cert = certify_system(&flipped);
        assert!(cert.is_convex_system(), "{:?}", cert.findings);
    }

    #[test]
    fn flip_empty_set_is_identity() {
        let m = toy_convex(3, false, false);
        let same = flip_concave(&m, &BTreeSet::new()).unwrap();
        assert_eq!(m.costs(), same.costs());
        assert_eq!(
            m.step_dynamics(1).cvx_rows,
            same.step_dynamics(1).cvx_rows
        );
    }

    #[test]
    fn flip_rejects_non_concave_row() {
        let m = toy_convex(3, false, false);
        let err = flip_concave(&m, &BTreeSet::from([0])).unwrap_err();
        assert!(matches!(
            err,
            FlipError::WrongCurvature {
                expected: "concave",
                ..
            }
        ));
    }

    #[test]
    fn flip_round_trip_simulation_matches_after_unnegation() {
        let m = concave_model(4);
        let flipped = flip_concave(&m, &BTreeSet::from([0])).unwrap();
        let scenario = Scenario::new(vec![DVector::from_vec(vec![0.4]); 5]).unwrap();
        let u = ControlTrajectory(vec![
            DVector::from_vec(vec![0.3]),
            DVector::from_vec(vec![-0.2]),
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![0.0]),
        ]);
        let orig = crate::rollout::rollout_states(&m, &u, &scenario).unwrap();
        let transformed = crate::rollout::rollout_states(&flipped, &u, &scenario).unwrap();
        for t in 0..=4 {
            let diff = (orig.cvx[t][0] - (-transformed.cvx[t][0])).abs();
            assert!(diff <= 1e-12, "t={t}: {diff}");
        }
    }
}
