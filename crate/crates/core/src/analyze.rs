//! Curvature and monotonicity calculus on expression trees.
//!
//! The calculus is conservative: a tag of convex or nondecreasing is a
//! guarantee, while `Unknown` means the composition rules could not verify
//! the property (not that it fails). Exogenous variables are treated as
//! constants whose sign is resolved through declared channel bounds; a
//! product is only analyzable when at least one factor is free of decision
//! variables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, Interval, Slot, VarRef};

/// Curvature of an expression in the decision variables (states and
/// controls), holding for every exogenous realization consistent with the
/// declared bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Curvature {
    Affine,
    Convex,
    Concave,
    Unknown,
}

impl Curvature {
    pub fn is_convex(self) -> bool {
        matches!(self, Curvature::Affine | Curvature::Convex)
    }

    pub fn is_concave(self) -> bool {
        matches!(self, Curvature::Affine | Curvature::Concave)
    }

    fn flip(self) -> Curvature {
        match self {
            Curvature::Convex => Curvature::Concave,
            Curvature::Concave => Curvature::Convex,
            other => other,
        }
    }
}

/// Per-variable monotonicity tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Monotonicity {
    /// The expression does not depend on the variable.
    Constant,
    Nondecreasing,
    Nonincreasing,
    Unknown,
}

impl Monotonicity {
    pub fn is_nondecreasing(self) -> bool {
        matches!(self, Monotonicity::Constant | Monotonicity::Nondecreasing)
    }

    pub fn is_nonincreasing(self) -> bool {
        matches!(self, Monotonicity::Constant | Monotonicity::Nonincreasing)
    }

    fn flip(self) -> Monotonicity {
        match self {
            Monotonicity::Nondecreasing => Monotonicity::Nonincreasing,
            Monotonicity::Nonincreasing => Monotonicity::Nondecreasing,
            other => other,
        }
    }

    fn join(self, other: Monotonicity) -> Monotonicity {
        use Monotonicity::*;
        match (self, other) {
            (Constant, x) | (x, Constant) => x,
            (Nondecreasing, Nondecreasing) => Nondecreasing,
            (Nonincreasing, Nonincreasing) => Nonincreasing,
            _ => Unknown,
        }
    }
}

/// Declared ranges for exogenous variables; decision variables are always
/// treated as unbounded.
pub trait VarBounds {
    fn exogenous_bounds(&self, t: usize, i: usize) -> Interval;
}

/// No declared bounds: every exogenous entry ranges over the whole line.
pub struct NoBounds;

impl VarBounds for NoBounds {
    fn exogenous_bounds(&self, _t: usize, _i: usize) -> Interval {
        Interval::UNBOUNDED
    }
}

/// Result of analyzing one expression.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub curvature: Curvature,
    /// Conservative range of the expression value.
    pub range: Interval,
    mono: BTreeMap<VarRef, Monotonicity>,
}

impl Analysis {
    /// Monotonicity in one variable; variables the expression never
    /// references are constant.
    pub fn monotonicity(&self, var: VarRef) -> Monotonicity {
        self.mono.get(&var).copied().unwrap_or(Monotonicity::Constant)
    }

    pub fn monotonicities(&self) -> &BTreeMap<VarRef, Monotonicity> {
        &self.mono
    }
}

/// Analysis failure: the expression leaves its domain regardless of tags.
#[derive(Clone, Debug, Error, PartialEq)]
pub enum AnalyzeError {
    #[error("domain violation at subtree path {path:?}: {reason}")]
    Domain { path: Vec<usize>, reason: String },
}

/// Analyze with all exogenous entries unbounded.
pub fn analyze(e: &Expr) -> Result<Analysis, AnalyzeError> {
    analyze_bounded(e, &NoBounds)
}

/// Analyze under declared exogenous bounds.
pub fn analyze_bounded(e: &Expr, bounds: &impl VarBounds) -> Result<Analysis, AnalyzeError> {
    let mut path = Vec::new();
    walk(e, bounds, &mut path)
}

fn var_range(v: VarRef, bounds: &impl VarBounds) -> Interval {
    match v.slot {
        Slot::Exogenous => bounds.exogenous_bounds(v.t, v.i),
        _ => Interval::UNBOUNDED,
    }
}

fn walk(
    e: &Expr,
    bounds: &impl VarBounds,
    path: &mut Vec<usize>,
) -> Result<Analysis, AnalyzeError> {
    use Curvature as C;
    use Monotonicity as M;

    let singleton = |v: VarRef| {
        let mut m = BTreeMap::new();
        m.insert(v, M::Nondecreasing);
        m
    };

    match e {
        Expr::Const(c) => Ok(Analysis {
            curvature: C::Affine,
            range: Interval::point(*c),
            mono: BTreeMap::new(),
        }),
        Expr::Var(v) => Ok(Analysis {
            curvature: C::Affine,
            range: var_range(*v, bounds),
            mono: singleton(*v),
        }),
        Expr::Affine { terms, offset } => {
            let mut range = Interval::point(*offset);
            let mut mono: BTreeMap<VarRef, M> = BTreeMap::new();
            for (coef, v) in terms {
                range = range.add(var_range(*v, bounds).scale(*coef));
                let tag = if *coef > 0.0 {
                    M::Nondecreasing
                } else if *coef < 0.0 {
                    M::Nonincreasing
                } else {
                    M::Constant
                };
                mono.entry(*v)
                    .and_modify(|m| *m = m.join(tag))
                    .or_insert(tag);
            }
            Ok(Analysis {
                curvature: C::Affine,
                range,
                mono,
            })
        }
        Expr::Sum(children) => {
            let mut curvature = C::Affine;
            let mut range = Interval::point(0.0);
            let mut mono: BTreeMap<VarRef, M> = BTreeMap::new();
            for (k, c) in children.iter().enumerate() {
                path.push(k);
                let a = walk(c, bounds, path)?;
                path.pop();
                curvature = sum_curvature(curvature, a.curvature);
                range = range.add(a.range);
                merge_mono(&mut mono, &a.mono, |m| m);
            }
            Ok(Analysis {
                curvature,
                range,
                mono,
            })
        }
        Expr::Scale(coef, child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            let (curvature, mono) = if *coef == 0.0 {
                (C::Affine, BTreeMap::new())
            } else if *coef > 0.0 {
                (a.curvature, a.mono)
            } else {
                (
                    a.curvature.flip(),
                    a.mono.iter().map(|(v, m)| (*v, m.flip())).collect(),
                )
            };
            Ok(Analysis {
                curvature,
                range: a.range.scale(*coef),
                mono,
            })
        }
        Expr::Max(children) | Expr::Min(children) => {
            let is_max = matches!(e, Expr::Max(_));
            let mut parts = Vec::with_capacity(children.len());
            for (k, c) in children.iter().enumerate() {
                path.push(k);
                parts.push(walk(c, bounds, path)?);
                path.pop();
            }
            if parts.is_empty() {
                return Err(AnalyzeError::Domain {
                    path: path.clone(),
                    reason: "max/min of an empty argument list".into(),
                });
            }
            let mut range = parts[0].range;
            let mut mono = parts[0].mono.clone();
            let mut curvature = parts[0].curvature;
            for a in &parts[1..] {
                range = if is_max {
                    range.max_with(a.range)
                } else {
                    range.min_with(a.range)
                };
                merge_mono(&mut mono, &a.mono, |m| m);
                curvature = if is_max {
                    if curvature.is_convex() && a.curvature.is_convex() {
                        C::Convex
                    } else {
                        C::Unknown
                    }
                } else if curvature.is_concave() && a.curvature.is_concave() {
                    C::Concave
                } else {
                    C::Unknown
                };
            }
            Ok(Analysis {
                curvature,
                range,
                mono,
            })
        }
        Expr::Pos(child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            // pos is convex and nondecreasing; range shortcuts keep more
            // information when the child sign is known.
            let curvature = if a.range.is_nonneg() {
                a.curvature
            } else if a.range.is_nonpos() {
                C::Affine
            } else if a.curvature.is_convex() {
                C::Convex
            } else {
                C::Unknown
            };
            Ok(Analysis {
                curvature,
                range: a.range.pos(),
                mono: a.mono,
            })
        }
        Expr::Abs(child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            let curvature = if a.range.is_nonneg() {
                a.curvature
            } else if a.range.is_nonpos() {
                a.curvature.flip()
            } else if matches!(a.curvature, C::Affine) {
                C::Convex
            } else {
                C::Unknown
            };
            let mono = sign_composed_mono(&a, false);
            Ok(Analysis {
                curvature,
                range: a.range.abs(),
                mono,
            })
        }
        Expr::Square(child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            let curvature = if matches!(a.curvature, C::Affine) {
                C::Convex
            } else if a.range.is_nonneg() && a.curvature.is_convex() {
                C::Convex
            } else if a.range.is_nonpos() && a.curvature.is_concave() {
                C::Convex
            } else {
                C::Unknown
            };
            let mono = sign_composed_mono(&a, false);
            Ok(Analysis {
                curvature,
                range: a.range.square(),
                mono,
            })
        }
        Expr::Power(p, child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            if *p < 1.0 {
                return Err(AnalyzeError::Domain {
                    path: path.clone(),
                    reason: format!("power exponent {p} is below 1"),
                });
            }
            if !a.range.is_nonneg() {
                return Err(AnalyzeError::Domain {
                    path: path.clone(),
                    reason: "power applied to a child not known to be nonnegative".into(),
                });
            }
            let curvature = if *p == 1.0 {
                a.curvature
            } else if a.curvature.is_convex() {
                C::Convex
            } else {
                C::Unknown
            };
            Ok(Analysis {
                curvature,
                range: a.range.powf_nonneg(*p),
                mono: a.mono,
            })
        }
        Expr::Exp(child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            let curvature = if a.curvature.is_convex() {
                C::Convex
            } else {
                C::Unknown
            };
            Ok(Analysis {
                curvature,
                range: a.range.exp(),
                mono: a.mono,
            })
        }
        Expr::Log(child) => {
            path.push(0);
            let a = walk(child, bounds, path)?;
            path.pop();
            if !a.range.is_strictly_pos() {
                return Err(AnalyzeError::Domain {
                    path: path.clone(),
                    reason: "log applied to a child not known to be strictly positive".into(),
                });
            }
            let curvature = if a.curvature.is_concave() {
                C::Concave
            } else {
                C::Unknown
            };
            Ok(Analysis {
                curvature,
                range: a.range.ln(),
                mono: a.mono,
            })
        }
        Expr::Mul(lhs, rhs) => {
            path.push(0);
            let a = walk(lhs, bounds, path)?;
            path.pop();
            path.push(1);
            let b = walk(rhs, bounds, path)?;
            path.pop();
            let a_param = lhs.is_parameter();
            let b_param = rhs.is_parameter();
            let range = a.range.mul(b.range);
            if a_param && b_param {
                // A pure parameter expression is affine (constant) in the
                // decision variables; monotonicity in the exogenous entries
                // is not tracked through products.
                let mono = with_unknown_vars(&a.mono, &b.mono);
                return Ok(Analysis {
                    curvature: C::Affine,
                    range,
                    mono,
                });
            }
            let (coef, f, f_param_mono) = if a_param {
                (&a, &b, &a.mono)
            } else if b_param {
                (&b, &a, &b.mono)
            } else {
                let mono = with_unknown_vars(&a.mono, &b.mono);
                return Ok(Analysis {
                    curvature: C::Unknown,
                    range,
                    mono,
                });
            };
            let curvature = if matches!(f.curvature, C::Affine) {
                // coef(delta) * affine stays affine for each realization.
                C::Affine
            } else if coef.range.is_nonneg() {
                f.curvature
            } else if coef.range.is_nonpos() {
                f.curvature.flip()
            } else {
                C::Unknown
            };
            let mut mono: BTreeMap<VarRef, M> = if coef.range.is_nonneg() {
                f.mono.clone()
            } else if coef.range.is_nonpos() {
                f.mono.iter().map(|(v, m)| (*v, m.flip())).collect()
            } else {
                f.mono.keys().map(|v| (*v, M::Unknown)).collect()
            };
            // Exogenous entries inside the coefficient: unknown unless the
            // other factor has a known sign, which we do not chase here.
            for v in f_param_mono.keys() {
                mono.insert(*v, M::Unknown);
            }
            Ok(Analysis {
                curvature,
                range,
                mono,
            })
        }
    }
}

fn sum_curvature(a: Curvature, b: Curvature) -> Curvature {
    use Curvature::*;
    match (a, b) {
        (Affine, x) | (x, Affine) => x,
        (Convex, Convex) => Convex,
        (Concave, Concave) => Concave,
        _ => Unknown,
    }
}

fn merge_mono(
    into: &mut BTreeMap<VarRef, Monotonicity>,
    from: &BTreeMap<VarRef, Monotonicity>,
    map: impl Fn(Monotonicity) -> Monotonicity,
) {
    for (v, m) in from {
        let mapped = map(*m);
        into.entry(*v)
            .and_modify(|cur| *cur = cur.join(mapped))
            .or_insert(mapped);
    }
}

/// Monotonicity through a non-monotone outer function (abs, square): known
/// only when the child sign is fixed.
fn sign_composed_mono(a: &Analysis, _strict: bool) -> BTreeMap<VarRef, Monotonicity> {
    if a.range.is_nonneg() {
        a.mono.clone()
    } else if a.range.is_nonpos() {
        a.mono.iter().map(|(v, m)| (*v, m.flip())).collect()
    } else {
        a.mono
            .iter()
            .map(|(v, m)| {
                let tag = if matches!(m, Monotonicity::Constant) {
                    Monotonicity::Constant
                } else {
                    Monotonicity::Unknown
                };
                (*v, tag)
            })
            .collect()
    }
}

fn with_unknown_vars(
    a: &BTreeMap<VarRef, Monotonicity>,
    b: &BTreeMap<VarRef, Monotonicity>,
) -> BTreeMap<VarRef, Monotonicity> {
    let mut out: BTreeMap<VarRef, Monotonicity> = BTreeMap::new();
    for v in a.keys().chain(b.keys()) {
        out.insert(*v, Monotonicity::Unknown);
    }
    out
}

/// A curvature requirement a subtree must meet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurvatureReq {
    Convex,
    Concave,
}

impl CurvatureReq {
    fn flip(self) -> CurvatureReq {
        match self {
            CurvatureReq::Convex => CurvatureReq::Concave,
            CurvatureReq::Concave => CurvatureReq::Convex,
        }
    }

    fn satisfied_by(self, c: Curvature) -> bool {
        match self {
            CurvatureReq::Convex => c.is_convex(),
            CurvatureReq::Concave => c.is_concave(),
        }
    }
}

/// Path to the subtree responsible for a failed curvature requirement.
///
/// Follows the composition rules downward: at each node the requirement is
/// mapped onto the children (flipping through negative scalings and
/// sign-definite coefficients), and the walk descends into the first child
/// that fails its derived requirement. When no child requirement can be
/// derived or all children pass, the current node is to blame. Returns the
/// empty path when the root itself satisfies the requirement.
pub fn blame_curvature(e: &Expr, bounds: &impl VarBounds, req: CurvatureReq) -> Vec<usize> {
    let mut path = Vec::new();
    let mut node = e;
    let mut req = req;
    loop {
        let ok = analyze_bounded(node, bounds)
            .map(|a| req.satisfied_by(a.curvature))
            .unwrap_or(false);
        if ok {
            return path;
        }
        let Some((idx, child_req)) = failing_child_curvature(node, bounds, req) else {
            return path;
        };
        path.push(idx);
        node = node.children()[idx];
        req = child_req;
    }
}

fn failing_child_curvature(
    e: &Expr,
    bounds: &impl VarBounds,
    req: CurvatureReq,
) -> Option<(usize, CurvatureReq)> {
    let child_req = |k: usize| -> Option<CurvatureReq> {
        match e {
            Expr::Sum(_) | Expr::Max(_) | Expr::Min(_) => Some(req),
            Expr::Scale(a, _) => Some(if *a < 0.0 { req.flip() } else { req }),
            Expr::Pos(_) | Expr::Power(..) | Expr::Exp(_) => {
                (req == CurvatureReq::Convex).then_some(CurvatureReq::Convex)
            }
            Expr::Log(_) => (req == CurvatureReq::Concave).then_some(CurvatureReq::Concave),
            Expr::Abs(c) | Expr::Square(c) => {
                if req != CurvatureReq::Convex {
                    return None;
                }
                let range = analyze_bounded(c, bounds).ok()?.range;
                if range.is_nonneg() {
                    Some(CurvatureReq::Convex)
                } else if range.is_nonpos() {
                    Some(CurvatureReq::Concave)
                } else {
                    None
                }
            }
            Expr::Mul(a, b) => {
                let (coef, f_idx) = if a.is_parameter() && !b.is_parameter() {
                    (a, 1)
                } else if b.is_parameter() && !a.is_parameter() {
                    (b, 0)
                } else {
                    return None;
                };
                if k != f_idx {
                    return None;
                }
                let range = analyze_bounded(coef, bounds).ok()?.range;
                if range.is_nonneg() {
                    Some(req)
                } else if range.is_nonpos() {
                    Some(req.flip())
                } else {
                    None
                }
            }
            _ => None,
        }
    };
    for (k, c) in e.children().iter().enumerate() {
        let Some(creq) = child_req(k) else { continue };
        let ok = analyze_bounded(c, bounds)
            .map(|a| creq.satisfied_by(a.curvature))
            .unwrap_or(false);
        if !ok {
            return Some((k, creq));
        }
    }
    None
}

/// A monotonicity requirement in one variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MonotonicityReq {
    Nondecreasing,
    Nonincreasing,
}

impl MonotonicityReq {
    fn flip(self) -> MonotonicityReq {
        match self {
            MonotonicityReq::Nondecreasing => MonotonicityReq::Nonincreasing,
            MonotonicityReq::Nonincreasing => MonotonicityReq::Nondecreasing,
        }
    }

    fn satisfied_by(self, m: Monotonicity) -> bool {
        match self {
            MonotonicityReq::Nondecreasing => m.is_nondecreasing(),
            MonotonicityReq::Nonincreasing => m.is_nonincreasing(),
        }
    }
}

/// Path to the subtree responsible for a failed monotonicity requirement in
/// `var`. Same walk structure as [`blame_curvature`].
pub fn blame_monotonicity(
    e: &Expr,
    bounds: &impl VarBounds,
    var: VarRef,
    req: MonotonicityReq,
) -> Vec<usize> {
    let mut path = Vec::new();
    let mut node = e;
    let mut req = req;
    loop {
        let ok = analyze_bounded(node, bounds)
            .map(|a| req.satisfied_by(a.monotonicity(var)))
            .unwrap_or(false);
        if ok {
            return path;
        }
        let Some((idx, child_req)) = failing_child_mono(node, bounds, var, req) else {
            return path;
        };
        path.push(idx);
        node = node.children()[idx];
        req = child_req;
    }
}

fn failing_child_mono(
    e: &Expr,
    bounds: &impl VarBounds,
    var: VarRef,
    req: MonotonicityReq,
) -> Option<(usize, MonotonicityReq)> {
    let child_req = |k: usize| -> Option<MonotonicityReq> {
        match e {
            Expr::Sum(_) | Expr::Max(_) | Expr::Min(_) => Some(req),
            Expr::Scale(a, _) => {
                if *a == 0.0 {
                    None
                } else {
                    Some(if *a < 0.0 { req.flip() } else { req })
                }
            }
            Expr::Pos(_) | Expr::Power(..) | Expr::Exp(_) | Expr::Log(_) => Some(req),
            Expr::Abs(c) | Expr::Square(c) => {
                let range = analyze_bounded(c, bounds).ok()?.range;
                if range.is_nonneg() {
                    Some(req)
                } else if range.is_nonpos() {
                    Some(req.flip())
                } else {
                    None
                }
            }
            Expr::Mul(a, b) => {
                let (coef, f_idx) = if a.is_parameter() && !b.is_parameter() {
                    (a, 1)
                } else if b.is_parameter() && !a.is_parameter() {
                    (b, 0)
                } else {
                    return None;
                };
                if k != f_idx {
                    return None;
                }
                let range = analyze_bounded(coef, bounds).ok()?.range;
                if range.is_nonneg() {
                    Some(req)
                } else if range.is_nonpos() {
                    Some(req.flip())
                } else {
                    None
                }
            }
            _ => None,
        }
    };
    for (k, c) in e.children().iter().enumerate() {
        let Some(creq) = child_req(k) else { continue };
        let ok = analyze_bounded(c, bounds)
            .map(|a| creq.satisfied_by(a.monotonicity(var)))
            .unwrap_or(false);
        if !ok {
            return Some((k, creq));
        }
    }
    None
}
