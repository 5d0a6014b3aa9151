//! The researcher's dynamic discrete choice model: primitives, the Λ and φ
//! mappings, the policy operator Ψ = Λ∘φ, its fixed point and derivatives.
//!
//! Layout conventions used throughout the crate (all indices 0-based):
//!
//! * choice-value arrays and CCP matrices are `|A| × |X|` (row = action);
//! * reduced CCP vectors drop the last action and put the state outermost,
//!   `index = x * (|A| - 1) + a`;
//! * transition arrays store `f(x'|x,a)` with `x'` innermost.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math;

/// Euler–Mascheroni constant, the mean of a standard Gumbel draw.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Default sup-norm tolerance for Ψ-iteration.
pub const FIXED_POINT_TOL: f64 = 1e-12;
/// Default iteration cap for Ψ-iteration.
pub const FIXED_POINT_MAX_ITER: usize = 10_000;
/// Relative step of every central finite difference in this module.
pub const FD_STEP: f64 = 1e-6;

const ROW_SUM_TOL: f64 = 1e-12;
const COLUMN_SUM_TOL: f64 = 1e-10;

/// Transition probabilities `f(x'|x,a)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransitionArray {
    n_states: usize,
    n_actions: usize,
    data: Vec<f64>,
}

impl TransitionArray {
    pub fn new(n_states: usize, n_actions: usize, data: Vec<f64>) -> Result<Self> {
        let expected = n_states * n_states * n_actions;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "transition array",
                expected,
                found: data.len(),
            });
        }
        let t = Self {
            n_states,
            n_actions,
            data,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(n_states * n_states * n_actions);
        for x in 0..n_states {
            for a in 0..n_actions {
                for xn in 0..n_states {
                    data.push(f(x, a, xn));
                }
            }
        }
        Self::new(n_states, n_actions, data)
    }

    fn validate(&self) -> Result<()> {
        for x in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.row(x, a);
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    return Err(Error::InvalidKernel(format!(
                        "negative or non-finite probability in f(.|x={x}, a={a})"
                    )));
                }
                let s: f64 = row.iter().sum();
                if math::abs(s - 1.0) > ROW_SUM_TOL {
                    return Err(Error::InvalidKernel(format!(
                        "f(.|x={x}, a={a}) sums to {s}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, x: usize, a: usize, x_next: usize) -> f64 {
        self.data[(x * self.n_actions + a) * self.n_states + x_next]
    }

    #[inline]
    pub fn row(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.n_states;
        &self.data[start..start + self.n_states]
    }

    /// `Σ_x' f(x'|x,a) v(x')`.
    #[inline]
    pub fn expect(&self, x: usize, a: usize, v: &DVector<f64>) -> f64 {
        self.row(x, a).iter().zip(v.iter()).map(|(p, v)| p * v).sum()
    }
}

/// Parameterized transition kernel `θ_f ↦ f_θf`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TransitionSpec {
    /// Engine-replacement chain with two actions. Keeping (action 0) leaves
    /// the state unchanged with probability `θ_f` and moves it up one step
    /// (capped at the top state) otherwise; replacing (action 1) resets to
    /// state 0. `θ_f ∈ [0, 1]`.
    Bus,
    /// A known kernel with no parameters.
    Fixed(TransitionArray),
    /// `(1 - θ_f)·base + θ_f·alt`, `θ_f ∈ [0, 1]`.
    Blend {
        base: TransitionArray,
        alt: TransitionArray,
    },
}

impl TransitionSpec {
    pub fn n_params(&self) -> usize {
        match self {
            TransitionSpec::Fixed(_) => 0,
            TransitionSpec::Bus | TransitionSpec::Blend { .. } => 1,
        }
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.n_params()]
    }

    pub fn kernel(
        &self,
        n_states: usize,
        n_actions: usize,
        theta_f: &[f64],
    ) -> Result<TransitionArray> {
        if theta_f.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                what: "theta_f",
                expected: self.n_params(),
                found: theta_f.len(),
            });
        }
        if theta_f.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("theta_f"));
        }
        match self {
            TransitionSpec::Bus => {
                if n_actions != 2 {
                    return Err(Error::InvalidKernel(format!(
                        "the replacement chain needs 2 actions, model has {n_actions}"
                    )));
                }
                let stay = theta_f[0];
                if !(0.0..=1.0).contains(&stay) {
                    return Err(Error::InvalidKernel(format!("theta_f = {stay} outside [0, 1]")));
                }
                TransitionArray::from_fn(n_states, n_actions, |x, a, xn| {
                    if a == 1 {
                        return if xn == 0 { 1.0 } else { 0.0 };
                    }
                    let up = (x + 1).min(n_states - 1);
                    let mut p = 0.0;
                    if xn == x {
                        p += stay;
                    }
                    if xn == up {
                        p += 1.0 - stay;
                    }
                    p
                })
            }
            TransitionSpec::Fixed(t) => {
                check_kernel_shape(t, n_states, n_actions)?;
                Ok(t.clone())
            }
            TransitionSpec::Blend { base, alt } => {
                check_kernel_shape(base, n_states, n_actions)?;
                check_kernel_shape(alt, n_states, n_actions)?;
                let w = theta_f[0];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidKernel(format!("theta_f = {w} outside [0, 1]")));
                }
                let data = base
                    .data
                    .iter()
                    .zip(&alt.data)
                    .map(|(b, a)| (1.0 - w) * b + w * a)
                    .collect();
                TransitionArray::new(n_states, n_actions, data)
            }
        }
    }
}

fn check_kernel_shape(t: &TransitionArray, n_states: usize, n_actions: usize) -> Result<()> {
    if t.n_states != n_states || t.n_actions != n_actions {
        return Err(Error::DimensionMismatch {
            what: "transition array shape",
            expected: n_states * n_actions,
            found: t.n_states * t.n_actions,
        });
    }
    Ok(())
}

/// Linear-in-parameters flow utility `u_α(x,a) = features(x,a)·α`, plus an
/// optional known term used only when building a true DGP.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UtilitySpec {
    n_params: usize,
    n_actions: usize,
    features: Vec<f64>,
    extra: Option<Vec<f64>>,
    bound: f64,
}

impl UtilitySpec {
    /// `features` is laid out as `((x * n_actions) + a) * n_params + k`.
    /// The parameter space is the box `[-bound, bound]^n_params`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        n_params: usize,
        features: Vec<f64>,
        bound: f64,
    ) -> Result<Self> {
        let expected = n_states * n_actions * n_params;
        if features.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "utility features",
                expected,
                found: features.len(),
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("utility features"));
        }
        if !(bound > 0.0) {
            return Err(Error::InvalidParameter(format!("parameter bound {bound} must be positive")));
        }
        Ok(Self {
            n_params,
            n_actions,
            features,
            extra: None,
            bound,
        })
    }

    pub fn from_fn(
        n_states: usize,
        n_actions: usize,
        n_params: usize,
        bound: f64,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut features = Vec::with_capacity(n_states * n_actions * n_params);
        for x in 0..n_states {
            for a in 0..n_actions {
                for k in 0..n_params {
                    features.push(f(x, a, k));
                }
            }
        }
        Self::new(n_states, n_actions, n_params, features, bound)
    }

    /// Adds a known utility term laid out as `x * n_actions + a`.
    pub fn with_extra(mut self, extra: Vec<f64>) -> Result<Self> {
        let expected = self.features.len() / self.n_params.max(1);
        let expected = if self.n_params == 0 { extra.len() } else { expected };
        if extra.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "extra utility term",
                expected,
                found: extra.len(),
            });
        }
        if extra.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extra utility term"));
        }
        self.extra = Some(extra);
        Ok(self)
    }

    pub fn without_extra(mut self) -> Self {
        self.extra = None;
        self
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn has_extra(&self) -> bool {
        self.extra.is_some()
    }

    #[inline]
    pub fn feature(&self, x: usize, a: usize, k: usize) -> f64 {
        self.features[(x * self.n_actions + a) * self.n_params + k]
    }

    #[inline]
    pub fn extra(&self, x: usize, a: usize) -> f64 {
        self.extra
            .as_ref()
            .map_or(0.0, |e| e[x * self.n_actions + a])
    }

    /// `features(x,a)·α + extra(x,a)`.
    #[inline]
    pub fn flow(&self, x: usize, a: usize, alpha: &[f64]) -> f64 {
        let base = (x * self.n_actions + a) * self.n_params;
        self.features[base..base + self.n_params]
            .iter()
            .zip(alpha)
            .map(|(f, a)| f * a)
            .sum::<f64>()
            + self.extra(x, a)
    }
}

/// A single-agent dynamic discrete choice model with extreme-value type I
/// shocks and a known discount factor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    n_states: usize,
    n_actions: usize,
    beta: f64,
    utility: UtilitySpec,
    transition: TransitionSpec,
}

impl ModelSpec {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        beta: f64,
        utility: UtilitySpec,
        transition: TransitionSpec,
    ) -> Result<Self> {
        if n_states < 1 {
            return Err(Error::InvalidParameter("need at least one state".into()));
        }
        if n_actions < 2 {
            return Err(Error::InvalidParameter("need at least two actions".into()));
        }
        if !(beta >= 0.0 && beta < 1.0) {
            return Err(Error::InvalidParameter(format!("discount factor {beta} outside [0, 1)")));
        }
        if utility.n_actions != n_actions
            || utility.features.len() != n_states * n_actions * utility.n_params
        {
            return Err(Error::DimensionMismatch {
                what: "utility shape",
                expected: n_states * n_actions * utility.n_params,
                found: utility.features.len(),
            });
        }
        if let TransitionSpec::Fixed(t) = &transition {
            check_kernel_shape(t, n_states, n_actions)?;
        }
        if let TransitionSpec::Blend { base, alt } = &transition {
            check_kernel_shape(base, n_states, n_actions)?;
            check_kernel_shape(alt, n_states, n_actions)?;
        }
        if matches!(transition, TransitionSpec::Bus) && n_actions != 2 {
            return Err(Error::InvalidKernel("the replacement chain needs 2 actions".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            beta,
            utility,
            transition,
        })
    }

    /// Engine-replacement model: `u(x, keep) = -α₂·x`, `u(x, replace) = -α₁`
    /// with mileage `x = 1..n_states`, parameter box `[-10, 10]²` and the
    /// [`TransitionSpec::Bus`] chain. Action 0 is "keep", action 1 "replace".
    pub fn bus(n_states: usize, beta: f64) -> Result<Self> {
        let utility = UtilitySpec::from_fn(n_states, 2, 2, 10.0, |x, a, k| match (a, k) {
            (0, 1) => -((x + 1) as f64),
            (1, 0) => -1.0,
            _ => 0.0,
        })?;
        Self::new(n_states, 2, beta, utility, TransitionSpec::Bus)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn utility(&self) -> &UtilitySpec {
        &self.utility
    }

    pub fn transition(&self) -> &TransitionSpec {
        &self.transition
    }

    pub fn n_alpha(&self) -> usize {
        self.utility.n_params
    }

    pub fn n_theta_f(&self) -> usize {
        self.transition.n_params()
    }

    /// `|Ã × X|`, the length of a reduced CCP vector.
    pub fn n_reduced(&self) -> usize {
        (self.n_actions - 1) * self.n_states
    }

    /// Same model with the known utility term replaced.
    pub fn with_extra_utility(&self, extra: Vec<f64>) -> Result<Self> {
        let mut m = self.clone();
        m.utility = m.utility.with_extra(extra)?;
        Ok(m)
    }

    /// Same model with the known utility term removed.
    pub fn researcher_model(&self) -> Self {
        let mut m = self.clone();
        m.utility = m.utility.without_extra();
        m
    }

    pub fn kernel(&self, theta_f: &[f64]) -> Result<TransitionArray> {
        self.transition
            .kernel(self.n_states, self.n_actions, theta_f)
    }

    /// Evaluates flow utilities and the transition kernel at `(α, θ_f)`.
    pub fn primitives(&self, alpha: &[f64], theta_f: &[f64]) -> Result<Primitives<'_>> {
        if alpha.len() != self.n_alpha() {
            return Err(Error::DimensionMismatch {
                what: "alpha",
                expected: self.n_alpha(),
                found: alpha.len(),
            });
        }
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("alpha"));
        }
        let kernel = self.kernel(theta_f)?;
        let flow = DMatrix::from_fn(self.n_actions, self.n_states, |a, x| {
            self.utility.flow(x, a, alpha)
        });
        Ok(Primitives {
            model: self,
            flow,
            kernel,
        })
    }

    /// Decomposes `v(x,a; α)` at fixed `(θ_f, P)` into `c₀ + Σ_k α_k c_k`.
    /// `v` here is the choice-value array whose softmax is `Ψ_(α,θf)(P)`;
    /// it is affine in `α` because φ is affine in the flow utility.
    pub fn linear_index(&self, theta_f: &[f64], p: &CcpMatrix) -> Result<LinearIndex> {
        self.check_ccp_shape(p)?;
        p.require_interior()?;
        let kernel = self.kernel(theta_f)?;
        let (ns, na, d) = (self.n_states, self.n_actions, self.n_alpha());
        let system = self.policy_system(&kernel, p);
        let mut rhs = DMatrix::zeros(ns, d + 1);
        for x in 0..ns {
            for a in 0..na {
                let pa = p.get(a, x);
                rhs[(x, 0)] += pa * (self.utility.extra(x, a) + EULER_GAMMA - math::ln(pa));
                for k in 0..d {
                    rhs[(x, k + 1)] += pa * self.utility.feature(x, a, k);
                }
            }
        }
        let values = system
            .lu()
            .solve(&rhs)
            .ok_or(Error::Singular {
                what: "I - beta F_P",
                condition: f64::INFINITY,
            })?;
        let beta = self.beta;
        let column = |j: usize| values.column(j).into_owned();
        let v0 = column(0);
        let constant = DMatrix::from_fn(na, ns, |a, x| {
            self.utility.extra(x, a) + beta * kernel.expect(x, a, &v0)
        });
        let slopes = (0..d)
            .map(|k| {
                let vk = column(k + 1);
                DMatrix::from_fn(na, ns, |a, x| {
                    self.utility.feature(x, a, k) + beta * kernel.expect(x, a, &vk)
                })
            })
            .collect();
        Ok(LinearIndex { constant, slopes })
    }

    /// `I - β F̄_P`, where `F̄_P(x, x') = Σ_a P(a|x) f(x'|x,a)`.
    fn policy_system(&self, kernel: &TransitionArray, p: &CcpMatrix) -> DMatrix<f64> {
        let ns = self.n_states;
        let mut system = DMatrix::identity(ns, ns);
        for x in 0..ns {
            for a in 0..self.n_actions {
                let pa = p.get(a, x);
                for (xn, f) in kernel.row(x, a).iter().enumerate() {
                    system[(x, xn)] -= self.beta * pa * f;
                }
            }
        }
        system
    }

    fn check_ccp_shape(&self, p: &CcpMatrix) -> Result<()> {
        if p.n_actions() != self.n_actions || p.n_states() != self.n_states {
            return Err(Error::DimensionMismatch {
                what: "CCP matrix",
                expected: self.n_actions * self.n_states,
                found: p.n_actions() * p.n_states(),
            });
        }
        Ok(())
    }
}

/// Flow utilities and kernel evaluated at one parameter value.
#[derive(Debug, Clone)]
pub struct Primitives<'m> {
    model: &'m ModelSpec,
    flow: DMatrix<f64>,
    kernel: TransitionArray,
}

impl Primitives<'_> {
    pub fn flow(&self) -> &DMatrix<f64> {
        &self.flow
    }

    pub fn kernel(&self) -> &TransitionArray {
        &self.kernel
    }

    pub fn choice_values(&self, v: &ValueVector) -> Result<DMatrix<f64>> {
        let m = self.model;
        if v.len() != m.n_states {
            return Err(Error::DimensionMismatch {
                what: "value vector",
                expected: m.n_states,
                found: v.len(),
            });
        }
        if v.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("value vector"));
        }
        Ok(DMatrix::from_fn(m.n_actions, m.n_states, |a, x| {
            self.flow[(a, x)] + m.beta * self.kernel.expect(x, a, &v.0)
        }))
    }

    /// Hotz–Miller inversion: solves `(I - βF̄_P) V = ū_P`.
    pub fn varphi(&self, p: &CcpMatrix) -> Result<ValueVector> {
        let m = self.model;
        m.check_ccp_shape(p)?;
        p.require_interior()?;
        let system = m.policy_system(&self.kernel, p);
        let ubar = DVector::from_fn(m.n_states, |x, _| {
            (0..m.n_actions)
                .map(|a| {
                    let pa = p.get(a, x);
                    pa * (self.flow[(a, x)] + EULER_GAMMA - math::ln(pa))
                })
                .sum::<f64>()
        });
        let v = system.lu().solve(&ubar).ok_or(Error::Singular {
            what: "I - beta F_P",
            condition: f64::INFINITY,
        })?;
        ValueVector::new(v)
    }

    pub fn psi(&self, p: &CcpMatrix) -> Result<CcpMatrix> {
        let v = self.varphi(p)?;
        lambda_map(&self.choice_values(&v)?)
    }

    /// Smoothed Bellman operator `V ↦ γ + logsumexp_a v(x,a)`.
    pub fn bellman(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = self.model;
        DVector::from_fn(m.n_states, |x, _| {
            let vals = (0..m.n_actions)
                .map(|a| self.flow[(a, x)] + m.beta * self.kernel.expect(x, a, v));
            EULER_GAMMA + math::logsumexp(vals)
        })
    }
}

/// `v(x,a; α) = constant + Σ_k α_k slopes[k]`, each `|A| × |X|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearIndex {
    pub constant: DMatrix<f64>,
    pub slopes: Vec<DMatrix<f64>>,
}

impl LinearIndex {
    pub fn values(&self, alpha: &[f64]) -> DMatrix<f64> {
        let mut v = self.constant.clone();
        for (s, a) in self.slopes.iter().zip(alpha) {
            v += s * *a;
        }
        v
    }
}

/// Conditional choice probabilities `P(a|x)`, `|A| × |X|`, columns summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct CcpMatrix {
    probs: DMatrix<f64>,
}

impl CcpMatrix {
    /// Validates entries in `[0, 1]` and unit column sums. Strict interiority
    /// is a separate precondition, see [`CcpMatrix::require_interior`].
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() < 2 {
            return Err(Error::InvalidParameter("need at least two actions".into()));
        }
        for x in 0..probs.ncols() {
            let col = probs.column(x);
            if col.iter().any(|p| !(p.is_finite() && (0.0..=1.0).contains(p))) {
                return Err(Error::InvalidParameter(format!(
                    "CCP column {x} has entries outside [0, 1]"
                )));
            }
            let s = col.sum();
            if math::abs(s - 1.0) > COLUMN_SUM_TOL {
                return Err(Error::InvalidParameter(format!("CCP column {x} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_actions: usize, n_states: usize) -> Self {
        Self {
            probs: DMatrix::from_element(n_actions, n_states, 1.0 / n_actions as f64),
        }
    }

    /// Appends `1 - Σ_{a<|A|} P(a|x)` to each state block.
    pub fn from_reduced(r: &ReducedCcp) -> Result<Self> {
        let (na, ns) = (r.n_actions, r.n_states);
        let k = na - 1;
        let probs = DMatrix::from_fn(na, ns, |a, x| {
            if a < k {
                r.values[x * k + a]
            } else {
                1.0 - (0..k).map(|b| r.values[x * k + b]).sum::<f64>()
            }
        });
        Self::new(probs)
    }

    pub fn reduced(&self) -> ReducedCcp {
        let (na, ns) = (self.n_actions(), self.n_states());
        let k = na - 1;
        ReducedCcp {
            n_actions: na,
            n_states: ns,
            values: DVector::from_fn(k * ns, |i, _| self.probs[(i % k, i / k)]),
        }
    }

    pub fn n_actions(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_states(&self) -> usize {
        self.probs.ncols()
    }

    #[inline]
    pub fn get(&self, a: usize, x: usize) -> f64 {
        self.probs[(a, x)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.probs
    }

    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|p| *p > 0.0 && *p < 1.0)
    }

    pub fn require_interior(&self) -> Result<()> {
        for x in 0..self.n_states() {
            for a in 0..self.n_actions() {
                let p = self.probs[(a, x)];
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::NotInterior { a, x, p });
                }
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &CcpMatrix) -> f64 {
        self.probs
            .iter()
            .zip(other.probs.iter())
            .fold(0.0, |m, (a, b)| m.max(math::abs(a - b)))
    }
}

/// CCPs with the last action dropped, state-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCcp {
    n_actions: usize,
    n_states: usize,
    values: DVector<f64>,
}

impl ReducedCcp {
    pub fn new(values: DVector<f64>, n_actions: usize, n_states: usize) -> Result<Self> {
        if n_actions < 2 {
            return Err(Error::InvalidParameter("need at least two actions".into()));
        }
        let expected = (n_actions - 1) * n_states;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "reduced CCP vector",
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            n_actions,
            n_states,
            values,
        })
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }
}

/// Smoothed value function `V(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector(DVector<f64>);

impl ValueVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("value vector"));
        }
        Ok(Self(values))
    }

    pub fn zeros(n_states: usize) -> Self {
        Self(DVector::zeros(n_states))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `v(x,a) = u_α(x,a) + extra(x,a) + β Σ_x' V(x') f(x'|x,a)`.
pub fn choice_values(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    v: &ValueVector,
) -> Result<DMatrix<f64>> {
    model.primitives(alpha, theta_f)?.choice_values(v)
}

/// Logit choice probabilities of a `|A| × |X|` choice-value array.
pub fn lambda_map(v: &DMatrix<f64>) -> Result<CcpMatrix> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("choice values"));
    }
    let mut p = v.clone();
    for mut col in p.column_iter_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.iter_mut().for_each(|e| *e = math::exp(*e - max));
        let s = col.sum();
        col /= s;
    }
    CcpMatrix::new(p)
}

pub fn varphi_map(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
) -> Result<ValueVector> {
    model.primitives(alpha, theta_f)?.varphi(p)
}

pub fn psi_map(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
) -> Result<CcpMatrix> {
    model.primitives(alpha, theta_f)?.psi(p)
}

/// Output of Ψ-iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub ccp: CcpMatrix,
    pub iterations: usize,
    pub residual: f64,
}

/// Iterates `P ← Ψ(P)` until the sup-norm change falls below `tol`.
pub fn solve_ccp_fixed_point(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p0: &CcpMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let prim = model.primitives(alpha, theta_f)?;
    let mut p = p0.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        let next = prim.psi(&p)?;
        residual = next.max_abs_diff(&p);
        p = next;
        if residual < tol {
            return Ok(FixedPoint {
                ccp: p,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        what: "policy iteration",
        iterations: max_iter,
        residual,
    })
}

/// `P_θ` from a uniform start with the default tolerance.
pub fn model_ccp(model: &ModelSpec, alpha: &[f64], theta_f: &[f64]) -> Result<CcpMatrix> {
    let p0 = CcpMatrix::uniform(model.n_actions(), model.n_states());
    Ok(solve_ccp_fixed_point(
        model,
        alpha,
        theta_f,
        &p0,
        FIXED_POINT_TOL,
        FIXED_POINT_MAX_ITER,
    )?
    .ccp)
}

/// Output of value iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSolution {
    pub values: ValueVector,
    pub iterations: usize,
    /// Span of the last Bellman increment.
    pub span: f64,
}

/// Value iteration on the smoothed Bellman operator, kept in relative form
/// (iterates are re-centred at state 0 each sweep, which leaves the
/// increments' span unchanged). Stops once
/// `span(TV - V) < tol (1 - β)/β` and returns the midpoint of the
/// MacQueen–Porteus bounds, which is within `tol/2` of the fixed point.
pub fn solve_value_function(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ValueSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance {tol} must be positive")));
    }
    let prim = model.primitives(alpha, theta_f)?;
    let beta = model.beta();
    let threshold = if beta > 0.0 {
        tol * (1.0 - beta) / beta
    } else {
        f64::INFINITY
    };
    let gain = beta / (1.0 - beta);
    let mut h = DVector::zeros(model.n_states());
    let mut span = f64::INFINITY;
    for it in 1..=max_iter {
        let t = prim.bellman(&h);
        let diff = &t - &h;
        let hi = diff.max();
        let lo = diff.min();
        span = hi - lo;
        if span < threshold {
            let shift = gain * 0.5 * (hi + lo);
            let values = t.map(|v| v + shift);
            return Ok(ValueSolution {
                values: ValueVector::new(values)?,
                iterations: it,
                span,
            });
        }
        let anchor = t[0];
        h = t.map(|v| v - anchor);
    }
    Err(Error::NoConvergence {
        what: "value iteration",
        iterations: max_iter,
        residual: span,
    })
}

/// Central-difference Jacobian of the reduced Ψ with respect to the reduced
/// CCP vector. Perturbing `P(a|x)` moves the implied last-action probability
/// by the opposite amount.
pub fn jacobian_psi_wrt_p(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
) -> Result<DMatrix<f64>> {
    jacobian_psi_wrt_p_step(model, alpha, theta_f, p, FD_STEP)
}

pub fn jacobian_psi_wrt_p_step(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
    h: f64,
) -> Result<DMatrix<f64>> {
    p.require_interior()?;
    let prim = model.primitives(alpha, theta_f)?;
    let k = model.n_actions() - 1;
    let last = k;
    let n = model.n_reduced();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let (a, x) = (j % k, j / k);
        let shifted = |s: f64| -> Result<CcpMatrix> {
            let mut m = p.as_matrix().clone();
            m[(a, x)] += s;
            m[(last, x)] -= s;
            let c = CcpMatrix::new(m)?;
            c.require_interior()?;
            Ok(c)
        };
        let up = prim.psi(&shifted(h)?)?.reduced();
        let down = prim.psi(&shifted(-h)?)?.reduced();
        let col = (up.values - down.values) / (2.0 * h);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// `P_θ` together with `∂P_θ/∂α'` and `∂P_θ/∂θ_f'` (reduced rows).
#[derive(Debug, Clone, PartialEq)]
pub struct CcpDerivatives {
    pub ccp: CcpMatrix,
    pub d_alpha: DMatrix<f64>,
    pub d_theta_f: DMatrix<f64>,
}

/// Derivatives of the fixed point through `∂Ψ_θ(P_θ)/∂θ` with `P_θ` held
/// fixed, which equals `∂P_θ/∂θ` because Ψ has a zero P-Jacobian at its
/// fixed point. Central differences with step `1e-6·max(1, |θ_j|)`.
pub fn dp_dtheta(model: &ModelSpec, alpha: &[f64], theta_f: &[f64]) -> Result<CcpDerivatives> {
    let ccp = model_ccp(model, alpha, theta_f)?;
    let (d_alpha, d_theta_f) = dpsi_dtheta_at(model, alpha, theta_f, &ccp, |prim, p| {
        Ok(prim.psi(p)?.reduced().values().clone())
    })?;
    Ok(CcpDerivatives {
        ccp,
        d_alpha,
        d_theta_f,
    })
}

/// Central differences in `(α, θ_f)` of `g(Primitives_θ, P)` at fixed `P`.
pub(crate) fn dpsi_dtheta_at(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
    g: impl Fn(&Primitives<'_>, &CcpMatrix) -> Result<DVector<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let da = alpha.len();
    let df = theta_f.len();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(da + df);
    for j in 0..da + df {
        let base = if j < da { alpha[j] } else { theta_f[j - da] };
        let h = FD_STEP * math::abs(base).max(1.0);
        let eval = |s: f64| -> Result<DVector<f64>> {
            let mut a = alpha.to_vec();
            let mut t = theta_f.to_vec();
            if j < da {
                a[j] += s;
            } else {
                t[j - da] += s;
            }
            g(&model.primitives(&a, &t)?, p)
        };
        let up = eval(h)?;
        let down = eval(-h)?;
        cols.push((up - down) / (2.0 * h));
    }
    let rows = cols.first().map_or(0, |c| c.len());
    let rows = if rows == 0 { model.n_reduced() } else { rows };
    let mut d_alpha = DMatrix::zeros(rows, da);
    let mut d_theta = DMatrix::zeros(rows, df);
    for (j, c) in cols.iter().enumerate() {
        if j < da {
            d_alpha.set_column(j, c);
        } else {
            d_theta.set_column(j - da, c);
        }
    }
    Ok((d_alpha, d_theta))
}
