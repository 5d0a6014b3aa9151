//! Sample analogues, first-step estimators and the K-stage policy-iteration
//! estimators (pseudo-ML and minimum distance).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dgp::{joint_index, Dataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::math;
use crate::model::{lambda_map, CcpMatrix, LinearIndex, ModelSpec, ReducedCcp, TransitionArray};

/// Empirical CCPs are kept at least this far from 0 and 1.
pub const CCP_CLAMP: f64 = 1e-8;
/// Gradient tolerance (sup norm of the projected gradient) of both stages.
pub const STAGE_GRAD_TOL: f64 = 1e-9;
/// Iteration cap of both stages.
pub const STAGE_MAX_ITER: usize = 500;
/// Below this gradient size full Newton steps are taken without a descent
/// check, since objective changes are lost to rounding.
const ROUNDOFF_GRAD: f64 = 1e-6;

/// Frequencies of a dataset and the ratio estimators derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnalogues {
    pub n: usize,
    pub pi_hat: DVector<f64>,
    pub p_hat: CcpMatrix,
    pub f_hat: TransitionArray,
    pub m_hat: DVector<f64>,
    /// `ĵ(a,x)`, indexed `a + |A|·x`.
    pub j_hat: DVector<f64>,
    /// `(a,x)` cells never observed; their `f̂` rows are uniform.
    pub empty_cells: Vec<bool>,
    /// States never observed; their `P̂` columns are uniform.
    pub empty_states: Vec<bool>,
    /// States whose `P̂` column hit 0 or 1 and was pulled to the interior.
    pub clamped_states: Vec<bool>,
}

impl SampleAnalogues {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let (na, ns) = (data.n_actions, data.n_states);
        let n = data.len();
        if n == 0 {
            return Err(Error::InvalidData("empty dataset".into()));
        }
        let mut counts = vec![0u64; na * ns * ns];
        for o in &data.obs {
            counts[joint_index(na, ns, o.a, o.x, o.x_next)] += 1;
        }
        let pi_hat = DVector::from_iterator(counts.len(), counts.iter().map(|c| *c as f64 / n as f64));
        let block = na * ns;
        let mut cell_counts = vec![0u64; block];
        for (i, c) in counts.iter().enumerate() {
            cell_counts[i % block] += c;
        }
        let j_hat = DVector::from_iterator(block, cell_counts.iter().map(|c| *c as f64 / n as f64));
        let m_hat = DVector::from_fn(ns, |x, _| (0..na).map(|a| j_hat[a + na * x]).sum());

        let mut empty_states = vec![false; ns];
        let mut clamped_states = vec![false; ns];
        let mut probs = DMatrix::from_element(na, ns, 1.0 / na as f64);
        for x in 0..ns {
            let total: u64 = (0..na).map(|a| cell_counts[a + na * x]).sum();
            if total == 0 {
                empty_states[x] = true;
                continue;
            }
            let mut col: Vec<f64> = (0..na)
                .map(|a| cell_counts[a + na * x] as f64 / total as f64)
                .collect();
            if col.iter().any(|p| *p < CCP_CLAMP || *p > 1.0 - CCP_CLAMP) {
                clamped_states[x] = true;
                col.iter_mut()
                    .for_each(|p| *p = p.clamp(CCP_CLAMP, 1.0 - CCP_CLAMP));
                let s: f64 = col.iter().sum();
                col.iter_mut().for_each(|p| *p /= s);
            }
            for (a, p) in col.into_iter().enumerate() {
                probs[(a, x)] = p;
            }
        }
        let p_hat = CcpMatrix::new(probs)?;

        let mut empty_cells = vec![false; block];
        let mut f = Vec::with_capacity(na * ns * ns);
        for x in 0..ns {
            for a in 0..na {
                let c = cell_counts[a + na * x];
                if c == 0 {
                    empty_cells[a + na * x] = true;
                    f.extend(core::iter::repeat(1.0 / ns as f64).take(ns));
                } else {
                    f.extend((0..ns).map(|xn| counts[joint_index(na, ns, a, x, xn)] as f64 / c as f64));
                }
            }
        }
        let f_hat = TransitionArray::new(ns, na, f)?;
        Ok(Self {
            n,
            pi_hat,
            p_hat,
            f_hat,
            m_hat,
            j_hat,
            empty_cells,
            empty_states,
            clamped_states,
        })
    }

    /// Whether any degenerate-cell fix-up was applied.
    pub fn flagged(&self) -> bool {
        self.empty_cells.iter().any(|f| *f)
            || self.empty_states.iter().any(|f| *f)
            || self.clamped_states.iter().any(|f| *f)
    }
}

/// Stay probability of the replacement chain, estimated by the share of
/// "keep" decisions below the top state that leave the state unchanged.
pub fn first_step_theta_f_bus(data: &Dataset) -> Result<f64> {
    let top = data.n_states - 1;
    let (mut stay, mut total) = (0u64, 0u64);
    for o in data.obs.iter().filter(|o| o.a == 0 && o.x != top) {
        total += 1;
        if o.x_next == o.x {
            stay += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidData(
            "no keep decisions below the top state; stay probability undefined".into(),
        ));
    }
    Ok(stay as f64 / total as f64)
}

/// The same ratio as a function of a joint distribution, with its gradient
/// in `Π` (used for the first-step block of Δ).
pub fn theta_f_bus_from_joint(
    pi: &DVector<f64>,
    n_actions: usize,
    n_states: usize,
) -> Result<(f64, DVector<f64>)> {
    let top = n_states - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for x in 0..top {
        num += pi[joint_index(n_actions, n_states, 0, x, x)];
        for xn in 0..n_states {
            den += pi[joint_index(n_actions, n_states, 0, x, xn)];
        }
    }
    if !(den > 0.0) {
        return Err(Error::InvalidData("stay probability undefined: no keep mass below the top".into()));
    }
    let mut grad = DVector::zeros(pi.len());
    for x in 0..top {
        for xn in 0..n_states {
            let i = joint_index(n_actions, n_states, 0, x, xn);
            grad[i] = if xn == x { (den - num) / (den * den) } else { -num / (den * den) };
        }
    }
    Ok((num / den, grad))
}

/// Where the transition parameters come from.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FirstStep {
    /// [`first_step_theta_f_bus`].
    BusStayShare,
    /// Treated as known.
    Known(Vec<f64>),
}

impl FirstStep {
    pub fn estimate(&self, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            FirstStep::BusStayShare => Ok(vec![first_step_theta_f_bus(data)?]),
            FirstStep::Known(t) => Ok(t.clone()),
        }
    }
}

/// Weight matrix of the minimum-distance criterion.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Identity,
    Fixed(DMatrix<f64>),
}

impl WeightSpec {
    /// Checks symmetry (within 1e-10) and positive definiteness.
    pub fn fixed(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::DimensionMismatch {
                what: "weight matrix",
                expected: w.nrows(),
                found: w.ncols(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        let asym = linalg::max_abs(&(&w - w.transpose()));
        if asym > 1e-10 {
            return Err(Error::InvalidParameter(format!("weight matrix asymmetric by {asym}")));
        }
        let min = linalg::min_eigenvalue(&w);
        if !(min > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "weight matrix not positive definite (smallest eigenvalue {min})"
            )));
        }
        Ok(WeightSpec::Fixed(w))
    }

    pub fn matrix(&self, dim: usize) -> Result<DMatrix<f64>> {
        match self {
            WeightSpec::Identity => Ok(DMatrix::identity(dim, dim)),
            WeightSpec::Fixed(w) if w.nrows() == dim => Ok(w.clone()),
            WeightSpec::Fixed(w) => Err(Error::DimensionMismatch {
                what: "weight matrix",
                expected: dim,
                found: w.nrows(),
            }),
        }
    }

    fn quad_form(&self, e: &DVector<f64>) -> f64 {
        match self {
            WeightSpec::Identity => e.norm_squared(),
            WeightSpec::Fixed(w) => e.dot(&(w * e)),
        }
    }

    fn apply(&self, e: &DVector<f64>) -> DVector<f64> {
        match self {
            WeightSpec::Identity => e.clone(),
            WeightSpec::Fixed(w) => w * e,
        }
    }
}

/// `Σ_{a,x} ĵ(a,x) ln Ψ(P)(a|x)`; `counts` indexed `a + |A|·x`.
pub fn pseudo_loglik(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
    counts: &DVector<f64>,
) -> Result<f64> {
    let na = model.n_actions();
    if counts.len() != na * model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "cell counts",
            expected: na * model.n_states(),
            found: counts.len(),
        });
    }
    let prim = model.primitives(alpha, theta_f)?;
    let v = prim.choice_values(&prim.varphi(p)?)?;
    let mut q = 0.0;
    for x in 0..model.n_states() {
        let lse = math::logsumexp(v.column(x).iter().copied());
        for a in 0..na {
            let c = counts[a + na * x];
            if c != 0.0 {
                q += c * (v[(a, x)] - lse);
            }
        }
    }
    if !q.is_finite() {
        return Err(Error::NonFinite("pseudo log-likelihood"));
    }
    Ok(q)
}

/// `-(P̂ - Ψ(P))' W (P̂ - Ψ(P))` on reduced vectors.
pub fn md_criterion(
    model: &ModelSpec,
    alpha: &[f64],
    theta_f: &[f64],
    p: &CcpMatrix,
    p_hat: &ReducedCcp,
    weight: &WeightSpec,
) -> Result<f64> {
    if p_hat.values().len() != model.n_reduced() {
        return Err(Error::DimensionMismatch {
            what: "reduced empirical CCPs",
            expected: model.n_reduced(),
            found: p_hat.values().len(),
        });
    }
    weight.matrix(model.n_reduced())?;
    let psi = model.primitives(alpha, theta_f)?.psi(p)?;
    let e = p_hat.values() - psi.reduced().values();
    Ok(-weight.quad_form(&e))
}

/// Objective of one stage.
#[derive(Debug, Clone, Copy)]
pub enum StageCriterion<'a> {
    /// Pseudo log-likelihood with cell frequencies indexed `a + |A|·x`.
    Ml { counts: &'a DVector<f64> },
    /// Minimum distance to `p_hat`; the search starts from the ML solution
    /// for `warm_start` counts when given.
    Md {
        p_hat: &'a ReducedCcp,
        weight: &'a WeightSpec,
        warm_start: Option<&'a DVector<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub alpha: Vec<f64>,
    /// Value of the maximized criterion.
    pub criterion: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some coordinate ended on the parameter box.
    pub at_boundary: bool,
    /// Sup norm of the projected gradient at the solution.
    pub gradient: f64,
    /// Largest Hessian eigenvalue met along the Newton path (ML only).
    pub max_hessian_eigenvalue: Option<f64>,
}

/// Choice-value index with every column shifted so the last action is zero;
/// softmax is unaffected and the slopes stay O(1) when β is near one.
struct Index {
    na: usize,
    ns: usize,
    constant: DMatrix<f64>,
    slopes: Vec<DMatrix<f64>>,
}

impl Index {
    fn new(li: &LinearIndex) -> Self {
        let normalize = |m: &DMatrix<f64>| {
            let last = m.nrows() - 1;
            DMatrix::from_fn(m.nrows(), m.ncols(), |a, x| m[(a, x)] - m[(last, x)])
        };
        Self {
            na: li.constant.nrows(),
            ns: li.constant.ncols(),
            constant: normalize(&li.constant),
            slopes: li.slopes.iter().map(normalize).collect(),
        }
    }

    fn dim(&self) -> usize {
        self.slopes.len()
    }

    fn probs(&self, alpha: &[f64]) -> DMatrix<f64> {
        let mut v = self.constant.clone();
        for (s, a) in self.slopes.iter().zip(alpha) {
            v += s * *a;
        }
        for mut col in v.column_iter_mut() {
            let max = col.max();
            col.iter_mut().for_each(|e| *e = math::exp(*e - max));
            let s = col.sum();
            col /= s;
        }
        v
    }

    /// Log-likelihood, gradient and Hessian.
    fn loglik(&self, alpha: &[f64], counts: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut q = 0.0;
        let mut g = DVector::zeros(d);
        let mut h = DMatrix::zeros(d, d);
        let mut mean = DVector::zeros(d);
        let mut second = DMatrix::zeros(d, d);
        let mut v = vec![0.0; self.na];
        for x in 0..self.ns {
            let m: f64 = (0..self.na).map(|a| counts[a + self.na * x]).sum();
            for (a, va) in v.iter_mut().enumerate() {
                *va = self.constant[(a, x)]
                    + self.slopes.iter().zip(alpha).map(|(s, al)| s[(a, x)] * al).sum::<f64>();
            }
            let lse = math::logsumexp(v.iter().copied());
            mean.fill(0.0);
            second.fill(0.0);
            for a in 0..self.na {
                let j = counts[a + self.na * x];
                let s = math::exp(v[a] - lse);
                if j > 0.0 {
                    q += j * (v[a] - lse);
                }
                for k in 0..d {
                    let ck = self.slopes[k][(a, x)];
                    g[k] += (j - m * s) * ck;
                    mean[k] += s * ck;
                    for l in 0..d {
                        second[(k, l)] += s * ck * self.slopes[l][(a, x)];
                    }
                }
            }
            h -= (&second - &mean * mean.transpose()) * m;
        }
        (q, g, h)
    }

    /// `e' W e` for `e = p̂ - s(α)` and its gradient.
    fn distance(&self, alpha: &[f64], p_hat: &DVector<f64>, weight: &WeightSpec) -> (f64, DVector<f64>) {
        let k = self.na - 1;
        let probs = self.probs(alpha);
        let e = DVector::from_fn(k * self.ns, |i, _| p_hat[i] - probs[(i % k, i / k)]);
        let we = weight.apply(&e);
        let d = self.dim();
        let mut g = DVector::zeros(d);
        for x in 0..self.ns {
            for l in 0..d {
                let mean: f64 = (0..self.na).map(|b| probs[(b, x)] * self.slopes[l][(b, x)]).sum();
                for a in 0..k {
                    let jac = probs[(a, x)] * (self.slopes[l][(a, x)] - mean);
                    g[l] -= 2.0 * we[x * k + a] * jac;
                }
            }
        }
        (e.dot(&we), g)
    }

    /// `∂s_red/∂α'`.
    fn jacobian(&self, alpha: &[f64]) -> DMatrix<f64> {
        let k = self.na - 1;
        let probs = self.probs(alpha);
        let d = self.dim();
        let mut jac = DMatrix::zeros(k * self.ns, d);
        for x in 0..self.ns {
            for l in 0..d {
                let mean: f64 = (0..self.na).map(|b| probs[(b, x)] * self.slopes[l][(b, x)]).sum();
                for a in 0..k {
                    jac[(x * k + a, l)] = probs[(a, x)] * (self.slopes[l][(a, x)] - mean);
                }
            }
        }
        jac
    }
}

struct Bounds {
    lo: f64,
    hi: f64,
}

impl Bounds {
    fn project(&self, a: &mut [f64]) {
        a.iter_mut().for_each(|v| *v = v.clamp(self.lo, self.hi));
    }

    /// Coordinates held at a bound because the ascent direction `g` points outward.
    fn active(&self, a: &[f64], g: &DVector<f64>) -> Vec<bool> {
        a.iter()
            .zip(g.iter())
            .map(|(v, g)| (*v <= self.lo && *g < 0.0) || (*v >= self.hi && *g > 0.0))
            .collect()
    }

    fn projected_grad(&self, a: &[f64], g: &DVector<f64>) -> f64 {
        self.active(a, g)
            .iter()
            .zip(g.iter())
            .filter(|(act, _)| !**act)
            .fold(0.0f64, |m, (_, g)| m.max(math::abs(*g)))
    }

    fn on_boundary(&self, a: &[f64]) -> bool {
        a.iter().any(|v| *v <= self.lo || *v >= self.hi)
    }
}

/// Solves `m_free · d = rhs_free` on the coordinates not flagged in `active`.
fn reduced_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, active: &[bool]) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..rhs.len()).filter(|i| !active[*i]).collect();
    let mut out = DVector::zeros(rhs.len());
    if free.is_empty() {
        return Some(out);
    }
    let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| m[(free[i], free[j])]);
    let r = DVector::from_fn(free.len(), |i, _| rhs[free[i]]);
    let sol = sub.lu().solve(&r)?;
    for (i, f) in free.iter().enumerate() {
        out[*f] = sol[i];
    }
    Some(out)
}

fn newton_ml(index: &Index, counts: &DVector<f64>, bounds: &Bounds, start: &[f64]) -> StageResult {
    let mut alpha = start.to_vec();
    bounds.project(&mut alpha);
    let (mut q, mut g, mut h) = index.loglik(&alpha, counts);
    let mut max_eig: f64 = f64::NEG_INFINITY;
    for it in 0..=STAGE_MAX_ITER {
        max_eig = max_eig.max(-linalg::min_eigenvalue(&(-&h)));
        let pg = bounds.projected_grad(&alpha, &g);
        if pg < STAGE_GRAD_TOL || it == STAGE_MAX_ITER {
            return StageResult {
                at_boundary: bounds.on_boundary(&alpha),
                alpha,
                criterion: q,
                iterations: it,
                converged: pg < STAGE_GRAD_TOL,
                gradient: pg,
                max_hessian_eigenvalue: Some(max_eig),
            };
        }
        let active = bounds.active(&alpha, &g);
        let neg_h = -&h;
        let dir = match reduced_solve(&neg_h, &g, &active) {
            Some(d) if d.dot(&g) > 0.0 => d,
            // Singular curvature: fall back to the gradient.
            _ => DVector::from_fn(g.len(), |i, _| if active[i] { 0.0 } else { g[i] }),
        };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = alpha.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            bounds.project(&mut trial);
            let (qt, gt, ht) = index.loglik(&trial, counts);
            if qt >= q || (pg < ROUNDOFF_GRAD && t == 1.0 && qt.is_finite()) {
                accepted = Some((trial, qt, gt, ht));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((a, qt, gt, ht)) => {
                alpha = a;
                q = qt;
                g = gt;
                h = ht;
            }
            None => {
                return StageResult {
                    at_boundary: bounds.on_boundary(&alpha),
                    alpha,
                    criterion: q,
                    iterations: it,
                    converged: false,
                    gradient: pg,
                    max_hessian_eigenvalue: Some(max_eig),
                }
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

/// Projected BFGS on `e'We`, started from the Gauss–Newton curvature.
fn bfgs_md(
    index: &Index,
    p_hat: &DVector<f64>,
    weight: &WeightSpec,
    bounds: &Bounds,
    start: &[f64],
) -> Result<StageResult> {
    let d = index.dim();
    let mut alpha = start.to_vec();
    bounds.project(&mut alpha);
    let (mut f, mut g) = index.distance(&alpha, p_hat, weight);
    let jac = index.jacobian(&alpha);
    let w = weight.matrix(p_hat.len())?;
    let gn = (jac.transpose() * &w * &jac) * 2.0;
    let mut inv_h = gn
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()) && linalg::min_eigenvalue(m) > 0.0)
        .unwrap_or_else(|| DMatrix::identity(d, d));
    let descent = |g: &DVector<f64>| -g;
    for it in 0..=STAGE_MAX_ITER {
        let pg = bounds.projected_grad(&alpha, &descent(&g));
        if pg < STAGE_GRAD_TOL || it == STAGE_MAX_ITER {
            return Ok(StageResult {
                at_boundary: bounds.on_boundary(&alpha),
                alpha,
                criterion: -f,
                iterations: it,
                converged: pg < STAGE_GRAD_TOL,
                gradient: pg,
                max_hessian_eigenvalue: None,
            });
        }
        let active = bounds.active(&alpha, &descent(&g));
        let mut dir = -(&inv_h * &g);
        for (i, act) in active.iter().enumerate() {
            if *act {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&g) >= 0.0 {
            inv_h = DMatrix::identity(d, d);
            dir = DVector::from_fn(d, |i, _| if active[i] { 0.0 } else { -g[i] });
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = alpha.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            bounds.project(&mut trial);
            let (ft, gt) = index.distance(&trial, p_hat, weight);
            let step_len = trial.iter().zip(&alpha).fold(0.0f64, |m, (a, b)| m.max(math::abs(a - b)));
            if ft <= f || (pg < ROUNDOFF_GRAD && t == 1.0 && ft.is_finite()) || step_len == 0.0 {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((trial, ft, gt)) = accepted else {
            return Ok(StageResult {
                at_boundary: bounds.on_boundary(&alpha),
                alpha,
                criterion: -f,
                iterations: it,
                converged: false,
                gradient: pg,
                max_hessian_eigenvalue: None,
            });
        };
        let s = DVector::from_fn(d, |i, _| trial[i] - alpha[i]);
        let y = &gt - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(d, d);
            let left = &eye - (&s * y.transpose()) * rho;
            let right = &eye - (&y * s.transpose()) * rho;
            inv_h = &left * &inv_h * &right + (&s * s.transpose()) * rho;
        }
        alpha = trial;
        f = ft;
        g = gt;
    }
    unreachable!("loop returns on its last iteration")
}

/// Maximizes one stage's criterion over the parameter box, holding the
/// transition parameters and the CCPs inside Ψ fixed.
pub fn maximize_stage(
    model: &ModelSpec,
    criterion: StageCriterion<'_>,
    theta_f: &[f64],
    p: &CcpMatrix,
    start: &[f64],
) -> Result<StageResult> {
    let li = model.linear_index(theta_f, p)?;
    maximize_on_index(model, &li, criterion, start)
}

fn maximize_on_index(
    model: &ModelSpec,
    li: &LinearIndex,
    criterion: StageCriterion<'_>,
    start: &[f64],
) -> Result<StageResult> {
    if start.len() != model.n_alpha() {
        return Err(Error::DimensionMismatch {
            what: "starting value",
            expected: model.n_alpha(),
            found: start.len(),
        });
    }
    let index = Index::new(li);
    let bound = model.utility().bound();
    let bounds = Bounds { lo: -bound, hi: bound };
    let cells = model.n_actions() * model.n_states();
    let check_counts = |c: &DVector<f64>| {
        if c.len() != cells {
            Err(Error::DimensionMismatch {
                what: "cell counts",
                expected: cells,
                found: c.len(),
            })
        } else {
            Ok(())
        }
    };
    match criterion {
        StageCriterion::Ml { counts } => {
            check_counts(counts)?;
            Ok(newton_ml(&index, counts, &bounds, start))
        }
        StageCriterion::Md {
            p_hat,
            weight,
            warm_start,
        } => {
            if p_hat.values().len() != model.n_reduced() {
                return Err(Error::DimensionMismatch {
                    what: "reduced empirical CCPs",
                    expected: model.n_reduced(),
                    found: p_hat.values().len(),
                });
            }
            let init = match warm_start {
                Some(c) => {
                    check_counts(c)?;
                    newton_ml(&index, c, &bounds, start).alpha
                }
                None => start.to_vec(),
            };
            bfgs_md(&index, p_hat.values(), weight, &bounds, &init)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorKind {
    Ml,
    Md(WeightSpec),
}

/// Per-stage output of the K-stage algorithm. Stage `k` (1-based) is entry
/// `k - 1`; the first `K` entries of a longer run are the K-stage estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateTrace {
    pub theta_f_hat: Vec<f64>,
    pub alpha_stages: Vec<Vec<f64>>,
    /// `P̂⁰ … P̂^{K-1}`, the CCPs each stage was solved at.
    pub p_stages: Vec<CcpMatrix>,
    pub converged: Vec<bool>,
    pub at_boundary: Vec<bool>,
    pub criterion_values: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl EstimateTrace {
    pub fn stages(&self) -> usize {
        self.alpha_stages.len()
    }
}

/// Runs `K` stages: maximize the criterion at `P̂^{k-1}`, then set
/// `P̂^k = Ψ_{(α̂^k, θ̂_f)}(P̂^{k-1})`. The MD target stays at the sample
/// frequencies while Ψ's argument is updated. `p0` defaults to `P̂`.
pub fn k_stage_estimate(
    model: &ModelSpec,
    data: &Dataset,
    analogues: &SampleAnalogues,
    stages: usize,
    kind: &EstimatorKind,
    first_step: &FirstStep,
    p0: Option<&CcpMatrix>,
) -> Result<EstimateTrace> {
    if stages == 0 {
        return Err(Error::InvalidParameter("need at least one stage".into()));
    }
    if data.n_actions != model.n_actions() || data.n_states != model.n_states() {
        return Err(Error::DimensionMismatch {
            what: "dataset shape",
            expected: model.n_actions() * model.n_states(),
            found: data.n_actions * data.n_states,
        });
    }
    let theta_f = first_step.estimate(data)?;
    let p_hat_red = analogues.p_hat.reduced();
    let mut p = p0.cloned().unwrap_or_else(|| analogues.p_hat.clone());
    let mut start = vec![0.0; model.n_alpha()];
    let mut trace = EstimateTrace {
        theta_f_hat: theta_f.clone(),
        alpha_stages: Vec::with_capacity(stages),
        p_stages: Vec::with_capacity(stages),
        converged: Vec::with_capacity(stages),
        at_boundary: Vec::with_capacity(stages),
        criterion_values: Vec::with_capacity(stages),
        iterations: Vec::with_capacity(stages),
    };
    for k in 0..stages {
        let li = model.linear_index(&theta_f, &p)?;
        let criterion = match kind {
            EstimatorKind::Ml => StageCriterion::Ml {
                counts: &analogues.j_hat,
            },
            EstimatorKind::Md(w) => StageCriterion::Md {
                p_hat: &p_hat_red,
                weight: w,
                warm_start: Some(&analogues.j_hat),
            },
        };
        let res = maximize_on_index(model, &li, criterion, &start)?;
        let next = if k + 1 < stages {
            Some(lambda_map(&li.values(&res.alpha))?)
        } else {
            None
        };
        trace.p_stages.push(p);
        trace.converged.push(res.converged);
        trace.at_boundary.push(res.at_boundary);
        trace.criterion_values.push(res.criterion);
        trace.iterations.push(res.iterations);
        start = res.alpha.clone();
        trace.alpha_stages.push(res.alpha);
        match next {
            Some(n) => p = n,
            None => break,
        }
    }
    Ok(trace)
}
