//! Scalar expression trees over trajectory variables.
//!
//! Expressions reference variables by slot (affine state, convex state,
//! control, exogenous input), time index and component index. The same tree
//! type is used for per-step dynamics rows, measurement rows and
//! whole-trajectory cost/constraint functions. Curvature and monotonicity
//! analysis lives in [`crate::analyze`]; here we define the tree, interval
//! bounds, and a compiled tape form for fast evaluation and reverse-mode
//! subgradient propagation.

use serde::{Deserialize, Serialize};

/// Which block of the trajectory a variable lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    /// States with affine dynamics, x^aff_t.
    AffState,
    /// States with convex (nonlinear) dynamics, x^cvx_t.
    CvxState,
    /// Control inputs u_t.
    Control,
    /// Exogenous inputs delta_t (uncertain parameters).
    Exogenous,
}

/// A reference to one scalar trajectory variable: slot, time step, component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarRef {
    pub slot: Slot,
    pub t: usize,
    pub i: usize,
}

impl VarRef {
    pub fn new(slot: Slot, t: usize, i: usize) -> Self {
        VarRef { slot, t, i }
    }

    /// True if this variable is a decision-relevant quantity (state or
    /// control) rather than an exogenous parameter.
    pub fn is_decision(&self) -> bool {
        !matches!(self.slot, Slot::Exogenous)
    }
}

/// A scalar expression tree.
///
/// `Mul` is restricted by the analyzer to products where at least one factor
/// contains no decision variables; evaluation itself is unrestricted.
/// Function composition is expressed by nesting (e.g. `Square(Pos(x))`).
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(VarRef),
    Sum(Vec<Expr>),
    Scale(f64, Box<Expr>),
    /// Inline affine form: offset + sum of coef * var.
    Affine {
        terms: Vec<(f64, VarRef)>,
        offset: f64,
    },
    Max(Vec<Expr>),
    Min(Vec<Expr>),
    /// Positive part, max(0, x).
    Pos(Box<Expr>),
    Abs(Box<Expr>),
    Square(Box<Expr>),
    /// x^p for p >= 1; the analyzer additionally requires a provably
    /// nonnegative child.
    Power(f64, Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(slot: Slot, t: usize, i: usize) -> Expr {
        Expr::Var(VarRef::new(slot, t, i))
    }

    pub fn sum(terms: Vec<Expr>) -> Expr {
        Expr::Sum(terms)
    }

    pub fn scale(self, coef: f64) -> Expr {
        Expr::Scale(coef, Box::new(self))
    }

    pub fn neg(self) -> Expr {
        self.scale(-1.0)
    }

    pub fn max(terms: Vec<Expr>) -> Expr {
        Expr::Max(terms)
    }

    pub fn min(terms: Vec<Expr>) -> Expr {
        Expr::Min(terms)
    }

    pub fn pos(self) -> Expr {
        Expr::Pos(Box::new(self))
    }

    pub fn abs(self) -> Expr {
        Expr::Abs(Box::new(self))
    }

    pub fn square(self) -> Expr {
        Expr::Square(Box::new(self))
    }

    pub fn powf(self, p: f64) -> Expr {
        Expr::Power(p, Box::new(self))
    }

    pub fn exp(self) -> Expr {
        Expr::Exp(Box::new(self))
    }

    pub fn ln(self) -> Expr {
        Expr::Log(Box::new(self))
    }

    pub fn mul(self, other: Expr) -> Expr {
        Expr::Mul(Box::new(self), Box::new(other))
    }

    pub fn affine(terms: Vec<(f64, VarRef)>, offset: f64) -> Expr {
        Expr::Affine { terms, offset }
    }

    /// Immediate children, in a fixed order used by subtree paths.
    pub fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Affine { .. } => vec![],
            Expr::Sum(cs) | Expr::Max(cs) | Expr::Min(cs) => cs.iter().collect(),
            Expr::Scale(_, c)
            | Expr::Pos(c)
            | Expr::Abs(c)
            | Expr::Square(c)
            | Expr::Power(_, c)
            | Expr::Exp(c)
            | Expr::Log(c) => vec![c.as_ref()],
            Expr::Mul(a, b) => vec![a.as_ref(), b.as_ref()],
        }
    }

    /// Follow a child-index path from this node.
    pub fn descend(&self, path: &[usize]) -> Option<&Expr> {
        let mut node = self;
        for &idx in path {
            node = *node.children().get(idx)?;
        }
        Some(node)
    }

    /// Visit every variable reference in the tree.
    pub fn for_each_var(&self, f: &mut impl FnMut(VarRef)) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Affine { terms, .. } => {
                for (_, v) in terms {
                    f(*v);
                }
            }
            _ => {
                for c in self.children() {
                    c.for_each_var(f);
                }
            }
        }
    }

    /// Collected variable references, sorted and deduplicated.
    pub fn vars(&self) -> Vec<VarRef> {
        let mut out = Vec::new();
        self.for_each_var(&mut |v| out.push(v));
        out.sort();
        out.dedup();
        out
    }

    /// True if the expression contains no state or control variables.
    pub fn is_parameter(&self) -> bool {
        let mut param = true;
        self.for_each_var(&mut |v| {
            if v.is_decision() {
                param = false;
            }
        });
        param
    }

    /// Rewrite the tree, replacing selected variables via `subst`.
    ///
    /// Variables for which `subst` returns `Some(expr)` are replaced by that
    /// expression; everything else is copied unchanged. Used by the
    /// concave-row sign flip.
    pub fn substitute(&self, subst: &impl Fn(VarRef) -> Option<Expr>) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(v) => subst(*v).unwrap_or(Expr::Var(*v)),
            Expr::Affine { terms, offset } => {
                // Expand only the substituted terms; keep the rest inline.
                let mut kept = Vec::new();
                let mut extra = Vec::new();
                for (coef, v) in terms {
                    match subst(*v) {
                        Some(e) => extra.push(e.scale(*coef)),
                        None => kept.push((*coef, *v)),
                    }
                }
                let base = Expr::Affine {
                    terms: kept,
                    offset: *offset,
                };
                if extra.is_empty() {
                    base
                } else {
                    let mut all = vec![base];
                    all.extend(extra);
                    Expr::Sum(all)
                }
            }
            Expr::Sum(cs) => Expr::Sum(cs.iter().map(|c| c.substitute(subst)).collect()),
            Expr::Max(cs) => Expr::Max(cs.iter().map(|c| c.substitute(subst)).collect()),
            Expr::Min(cs) => Expr::Min(cs.iter().map(|c| c.substitute(subst)).collect()),
            Expr::Scale(a, c) => Expr::Scale(*a, Box::new(c.substitute(subst))),
            Expr::Pos(c) => Expr::Pos(Box::new(c.substitute(subst))),
            Expr::Abs(c) => Expr::Abs(Box::new(c.substitute(subst))),
            Expr::Square(c) => Expr::Square(Box::new(c.substitute(subst))),
            Expr::Power(p, c) => Expr::Power(*p, Box::new(c.substitute(subst))),
            Expr::Exp(c) => Expr::Exp(Box::new(c.substitute(subst))),
            Expr::Log(c) => Expr::Log(Box::new(c.substitute(subst))),
            Expr::Mul(a, b) => Expr::Mul(
                Box::new(a.substitute(subst)),
                Box::new(b.substitute(subst)),
            ),
        }
    }

    /// Compile to a flat tape for repeated evaluation.
    pub fn compile(&self) -> CompiledExpr {
        let mut ops = Vec::new();
        let root = flatten(self, &mut ops);
        CompiledExpr { ops, root }
    }
}

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Sum(vec![self, rhs])
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Sum(vec![self, rhs.neg()])
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

// ---------------------------------------------------------------------------
// Closed intervals for range/sign propagation
// ---------------------------------------------------------------------------

/// A closed interval [lo, hi] with infinite endpoints allowed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNBOUNDED: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Interval {
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Interval {
        Interval { lo: v, hi: v }
    }

    pub fn is_nonneg(&self) -> bool {
        self.lo >= 0.0
    }

    pub fn is_nonpos(&self) -> bool {
        self.hi <= 0.0
    }

    pub fn is_strictly_pos(&self) -> bool {
        self.lo > 0.0
    }

    pub fn add(self, o: Interval) -> Interval {
        Interval::new(self.lo + o.lo, self.hi + o.hi)
    }

    pub fn scale(self, a: f64) -> Interval {
        if a >= 0.0 {
            Interval::new(a * self.lo, a * self.hi)
        } else {
            Interval::new(a * self.hi, a * self.lo)
        }
    }

    pub fn mul(self, o: Interval) -> Interval {
        let cands = [
            self.lo * o.lo,
            self.lo * o.hi,
            self.hi * o.lo,
            self.hi * o.hi,
        ];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in cands {
            // 0 * inf produces NaN; treat such products as unbounded in that
            // direction only when both operands admit it.
            if c.is_nan() {
                return Interval::UNBOUNDED;
            }
            lo = lo.min(c);
            hi = hi.max(c);
        }
        Interval::new(lo, hi)
    }

    pub fn max_with(self, o: Interval) -> Interval {
        Interval::new(self.lo.max(o.lo), self.hi.max(o.hi))
    }

    pub fn min_with(self, o: Interval) -> Interval {
        Interval::new(self.lo.min(o.lo), self.hi.min(o.hi))
    }

    pub fn pos(self) -> Interval {
        Interval::new(self.lo.max(0.0), self.hi.max(0.0))
    }

    pub fn abs(self) -> Interval {
        if self.is_nonneg() {
            self
        } else if self.is_nonpos() {
            Interval::new(-self.hi, -self.lo)
        } else {
            Interval::new(0.0, self.hi.max(-self.lo))
        }
    }

    pub fn square(self) -> Interval {
        let a = self.abs();
        Interval::new(a.lo * a.lo, a.hi * a.hi)
    }

    pub fn exp(self) -> Interval {
        Interval::new(self.lo.exp(), self.hi.exp())
    }

    pub fn ln(self) -> Interval {
        Interval::new(self.lo.ln(), self.hi.ln())
    }

    /// x^p on a nonnegative interval for p >= 1.
    pub fn powf_nonneg(self, p: f64) -> Interval {
        Interval::new(self.lo.max(0.0).powf(p), self.hi.max(0.0).powf(p))
    }
}

// ---------------------------------------------------------------------------
// Evaluation environments and gradient sinks
// ---------------------------------------------------------------------------

/// Supplies values for trajectory variables during evaluation.
///
/// Implementations are validated up front (dimensions checked at model or
/// rollout construction), so lookups are infallible.
pub trait VarEnv {
    fn value(&self, var: VarRef) -> f64;
}

/// Accumulates partial derivatives during reverse-mode sweeps.
pub trait GradSink {
    fn add(&mut self, var: VarRef, value: f64);
}

impl<F: FnMut(VarRef, f64)> GradSink for F {
    fn add(&mut self, var: VarRef, value: f64) {
        self(var, value)
    }
}

// ---------------------------------------------------------------------------
// Compiled tape
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum TapeOp {
    Const(f64),
    Var(VarRef),
    Sum(Vec<usize>),
    Scale(f64, usize),
    Affine(Vec<(f64, VarRef)>, f64),
    Max(Vec<usize>),
    Min(Vec<usize>),
    Pos(usize),
    Abs(usize),
    Square(usize),
    Power(f64, usize),
    Exp(usize),
    Log(usize),
    Mul(usize, usize),
}

/// An expression flattened to a post-order tape.
///
/// One forward pass computes all node values; one reverse pass accumulates
/// adjoints. At nonsmooth points a fixed subderivative is selected: positive
/// part and max/min take the inactive side at a kink (zero slope for `pos`,
/// first-listed argument on ties), and `abs` takes slope zero at the origin.
/// These choices make repeated runs reproducible.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    ops: Vec<TapeOp>,
    root: usize,
}

fn flatten(e: &Expr, ops: &mut Vec<TapeOp>) -> usize {
    let op = match e {
        Expr::Const(c) => TapeOp::Const(*c),
        Expr::Var(v) => TapeOp::Var(*v),
        Expr::Sum(cs) => TapeOp::Sum(cs.iter().map(|c| flatten(c, ops)).collect()),
        Expr::Scale(a, c) => TapeOp::Scale(*a, flatten(c, ops)),
        Expr::Affine { terms, offset } => TapeOp::Affine(terms.clone(), *offset),
        Expr::Max(cs) => TapeOp::Max(cs.iter().map(|c| flatten(c, ops)).collect()),
        Expr::Min(cs) => TapeOp::Min(cs.iter().map(|c| flatten(c, ops)).collect()),
        Expr::Pos(c) => TapeOp::Pos(flatten(c, ops)),
        Expr::Abs(c) => TapeOp::Abs(flatten(c, ops)),
        Expr::Square(c) => TapeOp::Square(flatten(c, ops)),
        Expr::Power(p, c) => TapeOp::Power(*p, flatten(c, ops)),
        Expr::Exp(c) => TapeOp::Exp(flatten(c, ops)),
        Expr::Log(c) => TapeOp::Log(flatten(c, ops)),
        Expr::Mul(a, b) => {
            let ia = flatten(a, ops);
            let ib = flatten(b, ops);
            TapeOp::Mul(ia, ib)
        }
    };
    ops.push(op);
    ops.len() - 1
}

/// Reusable scratch buffers for tape evaluation.
#[derive(Clone, Debug, Default)]
pub struct ExprScratch {
    vals: Vec<f64>,
    adj: Vec<f64>,
}

impl CompiledExpr {
    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Forward evaluation.
    pub fn eval(&self, env: &impl VarEnv, scratch: &mut ExprScratch) -> f64 {
        self.forward(env, scratch);
        scratch.vals[self.root]
    }

    fn forward(&self, env: &impl VarEnv, scratch: &mut ExprScratch) {
        let vals = &mut scratch.vals;
        vals.clear();
        vals.resize(self.ops.len(), 0.0);
        for (k, op) in self.ops.iter().enumerate() {
            vals[k] = match op {
                TapeOp::Const(c) => *c,
                TapeOp::Var(v) => env.value(*v),
                TapeOp::Sum(cs) => cs.iter().map(|&c| vals[c]).sum(),
                TapeOp::Scale(a, c) => a * vals[*c],
                TapeOp::Affine(terms, offset) => {
                    let mut acc = *offset;
                    for (coef, v) in terms {
                        acc += coef * env.value(*v);
                    }
                    acc
                }
                TapeOp::Max(cs) => cs.iter().map(|&c| vals[c]).fold(f64::NEG_INFINITY, f64::max),
                TapeOp::Min(cs) => cs.iter().map(|&c| vals[c]).fold(f64::INFINITY, f64::min),
                TapeOp::Pos(c) => vals[*c].max(0.0),
                TapeOp::Abs(c) => vals[*c].abs(),
                TapeOp::Square(c) => vals[*c] * vals[*c],
                TapeOp::Power(p, c) => vals[*c].powf(*p),
                TapeOp::Exp(c) => vals[*c].exp(),
                TapeOp::Log(c) => vals[*c].ln(),
                TapeOp::Mul(a, b) => vals[*a] * vals[*b],
            };
        }
    }

    /// Forward + reverse sweep. Returns the value and accumulates
    /// `seed * d(expr)/d(var)` into the sink for every variable.
    pub fn eval_grad(
        &self,
        env: &impl VarEnv,
        seed: f64,
        sink: &mut impl GradSink,
        scratch: &mut ExprScratch,
    ) -> f64 {
        self.forward(env, scratch);
        let vals = &scratch.vals;
        let adj = &mut scratch.adj;
        adj.clear();
        adj.resize(self.ops.len(), 0.0);
        adj[self.root] = seed;
        for k in (0..self.ops.len()).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            match &self.ops[k] {
                TapeOp::Const(_) => {}
                TapeOp::Var(v) => sink.add(*v, a),
                TapeOp::Sum(cs) => {
                    for &c in cs {
                        adj[c] += a;
                    }
                }
                TapeOp::Scale(s, c) => adj[*c] += s * a,
                TapeOp::Affine(terms, _) => {
                    for (coef, v) in terms {
                        sink.add(*v, coef * a);
                    }
                }
                TapeOp::Max(cs) => {
                    // First-listed argmax receives the full adjoint.
                    let mut best = 0;
                    for (j, &c) in cs.iter().enumerate() {
                        if vals[c] > vals[cs[best]] {
                            best = j;
                        }
                    }
                    adj[cs[best]] += a;
                }
                TapeOp::Min(cs) => {
                    let mut best = 0;
                    for (j, &c) in cs.iter().enumerate() {
                        if vals[c] < vals[cs[best]] {
                            best = j;
                        }
                    }
                    adj[cs[best]] += a;
                }
                TapeOp::Pos(c) => {
                    if vals[*c] > 0.0 {
                        adj[*c] += a;
                    }
                }
                TapeOp::Abs(c) => {
                    let x = vals[*c];
                    if x > 0.0 {
                        adj[*c] += a;
                    } else if x < 0.0 {
                        adj[*c] -= a;
                    }
                }
                TapeOp::Square(c) => adj[*c] += 2.0 * vals[*c] * a,
                TapeOp::Power(p, c) => {
                    let x = vals[*c];
                    let d = if x == 0.0 && *p > 1.0 {
                        0.0
                    } else {
                        p * x.powf(p - 1.0)
                    };
                    adj[*c] += d * a;
                }
                TapeOp::Exp(c) => adj[*c] += vals[*c].exp() * a,
                TapeOp::Log(c) => adj[*c] += a / vals[*c],
                TapeOp::Mul(x, y) => {
                    adj[*x] += vals[*y] * a;
                    adj[*y] += vals[*x] * a;
                }
            }
        }
        vals[self.root]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct MapEnv(HashMap<VarRef, f64>);

    impl VarEnv for MapEnv {
        fn value(&self, var: VarRef) -> f64 {
            *self.0.get(&var).expect("missing variable")
        }
    }

    fn env(pairs: &[(VarRef, f64)]) -> MapEnv {
        MapEnv(pairs.iter().copied().collect())
    }

    fn x() -> VarRef {
        VarRef::new(Slot::CvxState, 0, 0)
    }

    fn u() -> VarRef {
        VarRef::new(Slot::Control, 0, 0)
    }

    #[test]
    fn eval_pos_square_composition() {
        // (x)_+^2
        let e = Expr::Var(x()).pos().square().compile();
        let mut scratch = ExprScratch::default();
        assert_eq!(e.eval(&env(&[(x(), 3.0)]), &mut scratch), 9.0);
        assert_eq!(e.eval(&env(&[(x(), -3.0)]), &mut scratch), 0.0);
    }

    #[test]
    fn eval_affine_and_max() {
        let e = Expr::max(vec![
            Expr::affine(vec![(2.0, x()), (-1.0, u())], 0.5),
            Expr::constant(0.0),
        ])
        .compile();
        let mut scratch = ExprScratch::default();
        assert_eq!(e.eval(&env(&[(x(), 1.0), (u(), 3.0)]), &mut scratch), 0.0);
        assert_eq!(e.eval(&env(&[(x(), 1.0), (u(), 0.0)]), &mut scratch), 2.5);
    }

    #[test]
    fn grad_matches_hand_computation() {
        // f = (x)_+^2 - u, df/dx = 2 x at x > 0, df/du = -1
        let e = (Expr::Var(x()).pos().square() - Expr::Var(u())).compile();
        let mut grads: HashMap<VarRef, f64> = HashMap::new();
        let mut sink = |v: VarRef, g: f64| *grads.entry(v).or_insert(0.0) += g;
        let mut scratch = ExprScratch::default();
        let val = e.eval_grad(&env(&[(x(), 2.0), (u(), 1.0)]), 1.0, &mut sink, &mut scratch);
        assert_eq!(val, 3.0);
        assert_eq!(grads[&x()], 4.0);
        assert_eq!(grads[&u()], -1.0);
    }

    #[test]
    fn subgradient_kink_choices() {
        // pos at the kink contributes zero; abs at zero contributes zero;
        // tied max routes to the first argument.
        let mut scratch = ExprScratch::default();
        let mut grads: HashMap<VarRef, f64> = HashMap::new();

        let e = Expr::Var(x()).pos().compile();
        let mut sink = |v: VarRef, g: f64| *grads.entry(v).or_insert(0.0) += g;
        e.eval_grad(&env(&[(x(), 0.0)]), 1.0, &mut sink, &mut scratch);
        assert_eq!(grads.get(&x()).copied().unwrap_or(0.0), 0.0);

        grads.clear();
        let e = Expr::Var(x()).abs().compile();
        let mut sink = |v: VarRef, g: f64| *grads.entry(v).or_insert(0.0) += g;
        e.eval_grad(&env(&[(x(), 0.0)]), 1.0, &mut sink, &mut scratch);
        assert_eq!(grads.get(&x()).copied().unwrap_or(0.0), 0.0);

        grads.clear();
        let e = Expr::max(vec![Expr::Var(x()), Expr::Var(u())]).compile();
        let mut sink = |v: VarRef, g: f64| *grads.entry(v).or_insert(0.0) += g;
        e.eval_grad(&env(&[(x(), 1.0), (u(), 1.0)]), 1.0, &mut sink, &mut scratch);
        assert_eq!(grads.get(&x()).copied().unwrap_or(0.0), 1.0);
        assert_eq!(grads.get(&u()).copied().unwrap_or(0.0), 0.0);
    }

    #[test]
    fn substitute_negates_selected_variable() {
        let e = Expr::Var(x()).pos().square() + Expr::Var(u());
        let flipped = e.substitute(&|v| (v == x()).then(|| Expr::Var(v).neg()));
        let mut scratch = ExprScratch::default();
        let c = flipped.compile();
        // (-x)_+^2 + u at x = -2, u = 1 is 4 + 1.
        assert_eq!(c.eval(&env(&[(x(), -2.0), (u(), 1.0)]), &mut scratch), 5.0);
    }

    #[test]
    fn descend_follows_paths() {
        let e = Expr::Var(x()).pos().square();
        assert!(matches!(e.descend(&[]), Some(Expr::Square(_))));
        assert!(matches!(e.descend(&[0]), Some(Expr::Pos(_))));
        assert!(matches!(e.descend(&[0, 0]), Some(Expr::Var(_))));
        assert!(e.descend(&[0, 0, 0]).is_none());
    }

    #[test]
    fn interval_arithmetic_basics() {
        let w = Interval::new(-1.0, 2.0);
        // 1 - w/20 on the benchmark disturbance support stays positive.
        let coef = w.scale(-1.0 / 20.0).add(Interval::point(1.0));
        assert!(coef.is_nonneg());
        assert!((coef.lo - 0.9).abs() < 1e-12);
        assert!((coef.hi - 1.05).abs() < 1e-12);
        assert_eq!(Interval::new(-3.0, 2.0).square().hi, 9.0);
        assert_eq!(Interval::new(-3.0, 2.0).square().lo, 0.0);
        assert_eq!(Interval::new(-3.0, 2.0).pos().lo, 0.0);
    }
}
