//! True data generating processes: the drifting CCPs of each local
//! misspecification design, the joint distribution of `(a, x, x')`, its bias
//! direction, and i.i.d. sampling.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{
    choice_values, lambda_map, model_ccp, solve_value_function, CcpMatrix, ModelSpec,
    TransitionArray,
};
use crate::rng;

const JOINT_SUM_TOL: f64 = 1e-12;
/// Step of the central difference defining the bias direction.
pub const BIAS_FD_STEP: f64 = 1e-4;
/// Largest accepted relative gap between the `h` and `2h` differences.
pub const BIAS_RICHARDSON_TOL: f64 = 0.01;
/// Tolerance of the value iteration behind the quantal-response design.
pub const VALUE_TOL: f64 = 1e-9;

/// Probability vector over `(a, x, x')`, `a` innermost and `x'` outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDist {
    n_actions: usize,
    n_states: usize,
    pi: DVector<f64>,
}

impl JointDist {
    pub fn new(n_actions: usize, n_states: usize, pi: DVector<f64>) -> Result<Self> {
        let expected = n_actions * n_states * n_states;
        if pi.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "joint distribution",
                expected,
                found: pi.len(),
            });
        }
        if pi.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidParameter(
                "joint distribution has negative or non-finite mass".into(),
            ));
        }
        let s = pi.sum();
        if math::abs(s - 1.0) > JOINT_SUM_TOL {
            return Err(Error::InvalidParameter(format!("joint distribution sums to {s}")));
        }
        Ok(Self {
            n_actions,
            n_states,
            pi,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    #[inline]
    pub fn index(&self, a: usize, x: usize, x_next: usize) -> usize {
        joint_index(self.n_actions, self.n_states, a, x, x_next)
    }

    /// Inverse of [`JointDist::index`].
    #[inline]
    pub fn decode(&self, i: usize) -> (usize, usize, usize) {
        let a = i % self.n_actions;
        let rest = i / self.n_actions;
        (a, rest % self.n_states, rest / self.n_states)
    }

    #[inline]
    pub fn prob(&self, a: usize, x: usize, x_next: usize) -> f64 {
        self.pi[self.index(a, x, x_next)]
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.pi
    }

    /// `j(a,x) = Σ_x' Π(a,x,x')`, indexed `a + |A|·x`.
    pub fn j(&self) -> DVector<f64> {
        let block = self.n_actions * self.n_states;
        let mut j = DVector::zeros(block);
        for (i, p) in self.pi.iter().enumerate() {
            j[i % block] += p;
        }
        j
    }

    /// `m(x) = Σ_{a,x'} Π(a,x,x')`.
    pub fn marginal(&self) -> DVector<f64> {
        let j = self.j();
        DVector::from_fn(self.n_states, |x, _| {
            (0..self.n_actions).map(|a| j[a + self.n_actions * x]).sum()
        })
    }

    /// `P(a|x) = j(a,x)/m(x)`; states without mass get `None` columns.
    pub fn ccp(&self) -> Vec<Option<DVector<f64>>> {
        let j = self.j();
        (0..self.n_states)
            .map(|x| {
                let col = DVector::from_fn(self.n_actions, |a, _| j[a + self.n_actions * x]);
                let m = col.sum();
                (m > 0.0).then(|| col / m)
            })
            .collect()
    }

    /// `f(x'|x,a) = Π(a,x,x')/j(a,x)`, `None` where `j(a,x) = 0`.
    pub fn transition(&self, a: usize, x: usize) -> Option<DVector<f64>> {
        let row = DVector::from_fn(self.n_states, |xn, _| self.prob(a, x, xn));
        let s = row.sum();
        (s > 0.0).then(|| row / s)
    }
}

#[inline]
pub fn joint_index(n_actions: usize, n_states: usize, a: usize, x: usize, x_next: usize) -> usize {
    a + n_actions * (x + n_states * x_next)
}

/// `Π(a,x,x') = f(x'|x,a) P(a|x) m(x)`.
pub fn assemble_joint(f: &TransitionArray, p: &CcpMatrix, m: &DVector<f64>) -> Result<JointDist> {
    if m.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || math::abs(m.sum() - 1.0) > JOINT_SUM_TOL {
        return Err(Error::InvalidParameter("marginal is not a probability vector".into()));
    }
    let pi = joint_vector(f, p.as_matrix(), m)?;
    JointDist::new(p.n_actions(), p.n_states(), pi)
}

/// The product `f·P·m` for an arbitrary `|A| × |X|` array in place of `P`.
pub fn joint_vector(f: &TransitionArray, p: &DMatrix<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
    let (na, ns) = (p.nrows(), p.ncols());
    if f.n_actions() != na || f.n_states() != ns || m.len() != ns {
        return Err(Error::DimensionMismatch {
            what: "joint distribution inputs",
            expected: na * ns,
            found: f.n_actions() * f.n_states(),
        });
    }
    let mut pi = DVector::zeros(na * ns * ns);
    for xn in 0..ns {
        for x in 0..ns {
            for a in 0..na {
                pi[joint_index(na, ns, a, x, xn)] = f.prob(x, a, xn) * p[(a, x)] * m[x];
            }
        }
    }
    Ok(pi)
}

/// `m(x) ∝ 1 + ln x` over `x = 1..n_states`.
pub fn marginal_log_spec(n_states: usize) -> DVector<f64> {
    let raw = DVector::from_fn(n_states, |x, _| 1.0 + math::ln((x + 1) as f64));
    let s = raw.sum();
    raw / s
}

/// How the true CCPs drift away from the researcher's model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Misspecification {
    Correct,
    /// True utility of the first action gains `τ_n·s²`, `τ_n = quad_coeff·n^{-δ}`,
    /// where `s = first_label + x` for the 0-based state index `x`.
    QuadraticUtility {
        quad_coeff: f64,
        #[cfg_attr(feature = "serde", serde(default))]
        first_label: f64,
    },
    /// Share `τ_n = n^{-δ}` of agents behave according to `theta_b`.
    Mixture { theta_b: Vec<f64> },
    /// Choices follow a temperature-`τ_n` softmax of `v + ε`, `τ_n = scale·n^{-δ}`,
    /// with `v` the rational choice values and `ε` Gumbel; integrated by
    /// Monte Carlo over `mc_draws` draws from `mc_seed`.
    QuantalResponse {
        scale: f64,
        mc_draws: usize,
        mc_seed: u64,
    },
}

impl Misspecification {
    /// Quadratic utility drift measured from the first state, so that the
    /// term vanishes in state 0.
    pub fn quadratic(quad_coeff: f64) -> Self {
        Misspecification::QuadraticUtility {
            quad_coeff,
            first_label: 0.0,
        }
    }

    /// The constant `c` in `τ_n = c·n^{-δ}`.
    pub fn scale(&self) -> f64 {
        match self {
            Misspecification::Correct => 0.0,
            Misspecification::QuadraticUtility { quad_coeff, .. } => *quad_coeff,
            Misspecification::Mixture { .. } => 1.0,
            Misspecification::QuantalResponse { scale, .. } => *scale,
        }
    }
}

/// A data generating process for a given researcher model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DesignSpec {
    pub theta_u: Vec<f64>,
    pub theta_f: Vec<f64>,
    pub delta: f64,
    pub marginal: Vec<f64>,
    pub misspec: Misspecification,
}

impl DesignSpec {
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.theta_u.len() != model.n_alpha() {
            return Err(Error::InvalidDesign(format!(
                "theta_u has {} entries, model needs {}",
                self.theta_u.len(),
                model.n_alpha()
            )));
        }
        if self.theta_f.len() != model.n_theta_f() {
            return Err(Error::InvalidDesign(format!(
                "theta_f has {} entries, model needs {}",
                self.theta_f.len(),
                model.n_theta_f()
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidDesign(format!("delta = {} must be positive", self.delta)));
        }
        if self.marginal.len() != model.n_states()
            || self.marginal.iter().any(|m| !(*m >= 0.0))
            || math::abs(self.marginal.iter().sum::<f64>() - 1.0) > JOINT_SUM_TOL
        {
            return Err(Error::InvalidDesign("marginal is not a probability vector over states".into()));
        }
        match &self.misspec {
            Misspecification::Mixture { theta_b } if theta_b.len() != model.n_alpha() => Err(
                Error::InvalidDesign("type-B parameter has the wrong length".into()),
            ),
            Misspecification::QuantalResponse { scale, mc_draws, .. }
                if *mc_draws == 0 || *scale < 0.0 =>
            {
                Err(Error::InvalidDesign("quantal response needs draws and a nonnegative scale".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn marginal_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.marginal)
    }

    /// `τ_n = c·n^{-δ}`, zero in the limit.
    pub fn tau(&self, n: SampleSize) -> f64 {
        match n {
            SampleSize::Limit => 0.0,
            SampleSize::Finite(n) => self.misspec.scale() * math::powf(n as f64, -self.delta),
        }
    }
}

/// Sample size indexing the drifting DGP; `Limit` is `n = ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSize {
    Finite(u64),
    Limit,
}

/// `P*_n` of the design at sample size `n`.
pub fn true_ccp(model: &ModelSpec, design: &DesignSpec, n: SampleSize) -> Result<CcpMatrix> {
    if let SampleSize::Finite(0) = n {
        return Err(Error::InvalidParameter("sample size must be positive".into()));
    }
    design.validate(model)?;
    let tau = design.tau(n);
    if let Misspecification::Mixture { .. } = design.misspec {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidDesign(format!("mixture share {tau} outside [0, 1]")));
        }
    }
    let p = ccp_at_tau(model, design, tau)?;
    let c = CcpMatrix::new(p)?;
    c.require_interior()?;
    Ok(c)
}

/// `Π*_n`.
pub fn true_joint(model: &ModelSpec, design: &DesignSpec, n: SampleSize) -> Result<JointDist> {
    let p = true_ccp(model, design, n)?;
    let f = model.kernel(&design.theta_f)?;
    assemble_joint(&f, &p, &design.marginal_vector())
}

/// Design CCPs as a function of the drift parameter `τ`. The mixture is
/// extended linearly to negative shares so it can be differenced at zero.
fn ccp_at_tau(model: &ModelSpec, design: &DesignSpec, tau: f64) -> Result<DMatrix<f64>> {
    let researcher = model.researcher_model();
    let base = || model_ccp(&researcher, &design.theta_u, &design.theta_f);
    if tau == 0.0 {
        return Ok(base()?.into_matrix());
    }
    match &design.misspec {
        Misspecification::Correct => Ok(base()?.into_matrix()),
        Misspecification::QuadraticUtility { first_label, .. } => {
            let (ns, na) = (model.n_states(), model.n_actions());
            let mut extra = alloc::vec![0.0; ns * na];
            for x in 0..ns {
                let s = first_label + x as f64;
                extra[x * na] = tau * s * s;
            }
            let truth = researcher.with_extra_utility(extra)?;
            Ok(model_ccp(&truth, &design.theta_u, &design.theta_f)?.into_matrix())
        }
        Misspecification::Mixture { theta_b } => {
            let pa = base()?.into_matrix();
            let pb = model_ccp(&researcher, theta_b, &design.theta_f)?.into_matrix();
            Ok(pa * (1.0 - tau) + pb * tau)
        }
        Misspecification::QuantalResponse {
            mc_draws, mc_seed, ..
        } => {
            if tau < 0.0 {
                return Err(Error::InvalidDesign(format!("temperature {tau} is negative")));
            }
            let v = solve_value_function(
                &researcher,
                &design.theta_u,
                &design.theta_f,
                VALUE_TOL,
                10_000_000,
            )?;
            let cv = choice_values(&researcher, &design.theta_u, &design.theta_f, &v.values)?;
            Ok(quantal_ccp(&cv, tau, *mc_draws, *mc_seed))
        }
    }
}

/// Monte Carlo average over Gumbel draws `ε` of `softmax((v(x,·) + ε)/τ)`.
/// The same draws are used for every state.
pub fn quantal_ccp(values: &DMatrix<f64>, tau: f64, draws: usize, seed: u64) -> DMatrix<f64> {
    let (na, ns) = (values.nrows(), values.ncols());
    if tau == 0.0 {
        // Rational limit: the logit closed form.
        return lambda_map(values)
            .map(CcpMatrix::into_matrix)
            .unwrap_or_else(|_| DMatrix::from_element(na, ns, f64::NAN));
    }
    let mut rng = rng::rng_from_seed(seed);
    let mut acc = DMatrix::zeros(na, ns);
    let mut eps = alloc::vec![0.0; na];
    let mut w = alloc::vec![0.0; na];
    for _ in 0..draws {
        eps.iter_mut().for_each(|e| *e = rng::gumbel(&mut rng));
        for x in 0..ns {
            let mut max = f64::NEG_INFINITY;
            for a in 0..na {
                w[a] = (values[(a, x)] + eps[a]) / tau;
                max = max.max(w[a]);
            }
            let mut s = 0.0;
            for wa in w.iter_mut() {
                *wa = math::exp(*wa - max);
                s += *wa;
            }
            for a in 0..na {
                acc[(a, x)] += w[a] / s;
            }
        }
    }
    acc / draws as f64
}

/// `B_Π = lim n^δ (Π*_n − Π*) = c·dΠ*(τ)/dτ` at `τ = 0`, by central
/// differences with a Richardson check against the doubled step.
///
/// The quantal-response design returns zero: its CCPs depend on `τ` only
/// through an independent symmetric perturbation of the choice values, so
/// they are even in `τ` and have no first-order term.
pub fn bias_direction(model: &ModelSpec, design: &DesignSpec) -> Result<DVector<f64>> {
    design.validate(model)?;
    let len = model.n_actions() * model.n_states() * model.n_states();
    let c = design.misspec.scale();
    match design.misspec {
        Misspecification::Correct | Misspecification::QuantalResponse { .. } => {
            return Ok(DVector::zeros(len))
        }
        _ if c == 0.0 => return Ok(DVector::zeros(len)),
        _ => {}
    }
    let f = model.kernel(&design.theta_f)?;
    let m = design.marginal_vector();
    let joint = |tau: f64| -> Result<DVector<f64>> { joint_vector(&f, &ccp_at_tau(model, design, tau)?, &m) };
    let diff = |h: f64| -> Result<DVector<f64>> { Ok((joint(h)? - joint(-h)?) * (c / (2.0 * h))) };
    let fine = diff(BIAS_FD_STEP)?;
    let coarse = diff(2.0 * BIAS_FD_STEP)?;
    let norm = fine.norm();
    if norm > 0.0 {
        let discrepancy = (&fine - &coarse).norm() / norm;
        if discrepancy > BIAS_RICHARDSON_TOL {
            return Err(Error::Richardson { discrepancy });
        }
    }
    Ok(fine)
}

/// One draw of `(a, x, x')`, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Observation {
    pub a: usize,
    pub x: usize,
    pub x_next: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub n_actions: usize,
    pub n_states: usize,
    pub seed: u64,
    pub obs: Vec<Observation>,
}

impl Dataset {
    pub fn new(n_actions: usize, n_states: usize, seed: u64, obs: Vec<Observation>) -> Result<Self> {
        if let Some(o) = obs
            .iter()
            .find(|o| o.a >= n_actions || o.x >= n_states || o.x_next >= n_states)
        {
            return Err(Error::InvalidData(format!("observation {o:?} out of range")));
        }
        Ok(Self {
            n_actions,
            n_states,
            seed,
            obs,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// `n` i.i.d. draws from `dist` by inverse CDF.
pub fn sample_dataset(dist: &JointDist, n: usize, seed: u64) -> Dataset {
    let mut cum = Vec::with_capacity(dist.len());
    let mut total = 0.0;
    for p in dist.probs().iter() {
        total += p;
        cum.push(total);
    }
    let last_positive = dist
        .probs()
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(0);
    let mut rng = rng::rng_from_seed(seed);
    let obs = (0..n)
        .map(|_| {
            let u = rng::uniform(&mut rng) * total;
            let i = cum.partition_point(|c| *c <= u).min(last_positive);
            let (a, x, x_next) = dist.decode(i);
            Observation { a, x, x_next }
        })
        .collect();
    Dataset {
        n_actions: dist.n_actions(),
        n_states: dist.n_states(),
        seed,
        obs,
    }
}

/// The bus design: `θ_u = (1, 0.05)`, `θ_f = 0.25`, `m(x) ∝ 1 + ln x`.
pub fn bus_design(n_states: usize, misspec: Misspecification, delta: f64) -> DesignSpec {
    DesignSpec {
        theta_u: alloc::vec![1.0, 0.05],
        theta_f: alloc::vec![0.25],
        delta,
        marginal: marginal_log_spec(n_states).iter().copied().collect(),
        misspec,
    }
}
