//! Limiting distribution of the K-stage estimators under local
//! misspecification: the matrices Φ, Σ, Δ and Υ, asymptotic bias, variance
//! and mean squared error, and the variance- and MSE-optimal weights.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dgp::{bias_direction, true_joint, DesignSpec, JointDist, SampleSize};
use crate::error::{Error, Result};
use crate::estimate::{theta_f_bus_from_joint, FirstStep};
use crate::linalg::{self, MAX_COND_SANDWICH, MAX_COND_WEIGHT};
use crate::math;
use crate::model::{dp_dtheta, dpsi_dtheta_at, CcpMatrix, ModelSpec};

const CONSISTENCY_TOL: f64 = 1e-10;
const REGIME_TOL: f64 = 1e-12;

/// Population objects the limit distribution depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitInputs {
    pub pi_star: JointDist,
    pub p_star: CcpMatrix,
    pub m_star: DVector<f64>,
    /// Indexed `a + |A|·x`.
    pub j_star: DVector<f64>,
    pub alpha_star: Vec<f64>,
    pub theta_f_star: Vec<f64>,
    /// `∂P/∂α'`, reduced rows.
    pub dp_dalpha: DMatrix<f64>,
    /// `∂P/∂θ_f'`, reduced rows.
    pub dp_dtheta_f: DMatrix<f64>,
    /// `B_Π`, same layout as `pi_star`.
    pub bias: DVector<f64>,
    pub delta: f64,
    /// Gradient of the first-step map `Π ↦ θ_f`, `d_θf × |A×X×X|`.
    pub dg1_dpi: DMatrix<f64>,
}

impl LimitInputs {
    /// Checks that `p_star`, `m_star` and `j_star` are the ones implied by
    /// `pi_star`, and that all shapes agree.
    pub fn validate(&self) -> Result<()> {
        let na = self.pi_star.n_actions();
        let ns = self.pi_star.n_states();
        let red = (na - 1) * ns;
        let cells = self.pi_star.len();
        let d_f = self.theta_f_star.len();
        let shape_ok = self.p_star.n_actions() == na
            && self.p_star.n_states() == ns
            && self.m_star.len() == ns
            && self.j_star.len() == na * ns
            && self.dp_dalpha.nrows() == red
            && self.dp_dalpha.ncols() == self.alpha_star.len()
            && self.dp_dtheta_f.nrows() == red
            && self.dp_dtheta_f.ncols() == d_f
            && self.bias.len() == cells
            && self.dg1_dpi.nrows() == d_f
            && self.dg1_dpi.ncols() == cells;
        if !shape_ok {
            return Err(Error::DimensionMismatch {
                what: "limit inputs",
                expected: cells,
                found: self.bias.len(),
            });
        }
        let j = self.pi_star.j();
        let m = self.pi_star.marginal();
        let p_ok = self
            .pi_star
            .ccp()
            .iter()
            .enumerate()
            .all(|(x, col)| match col {
                Some(c) => (0..na).all(|a| math::abs(c[a] - self.p_star.get(a, x)) <= CONSISTENCY_TOL),
                None => false,
            });
        if (j - &self.j_star).amax() > CONSISTENCY_TOL
            || (m - &self.m_star).amax() > CONSISTENCY_TOL
            || !p_ok
        {
            return Err(Error::InvalidParameter(
                "limit CCPs, marginal or cell probabilities disagree with the joint distribution".into(),
            ));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParameter("rate delta must be positive".into()));
        }
        Ok(())
    }

    /// Builds the inputs of a design from the truth: the limit DGP, the
    /// derivatives of the model CCPs at the true parameters, the bias
    /// direction and the first-step gradient.
    pub fn from_design(model: &ModelSpec, design: &DesignSpec, first_step: &FirstStep) -> Result<Self> {
        let pi_star = true_joint(model, design, SampleSize::Limit)?;
        let researcher = model.researcher_model();
        let derivs = dp_dtheta(&researcher, &design.theta_u, &design.theta_f)?;
        let (na, ns) = (model.n_actions(), model.n_states());
        let dg1_dpi = match first_step {
            FirstStep::BusStayShare => {
                let (_, g) = theta_f_bus_from_joint(pi_star.probs(), na, ns)?;
                DMatrix::from_row_slice(1, g.len(), g.as_slice())
            }
            FirstStep::Known(t) => DMatrix::zeros(t.len(), pi_star.len()),
        };
        let inputs = Self {
            p_star: derivs.ccp,
            m_star: pi_star.marginal(),
            j_star: pi_star.j(),
            alpha_star: design.theta_u.clone(),
            theta_f_star: design.theta_f.clone(),
            dp_dalpha: derivs.d_alpha,
            dp_dtheta_f: derivs.d_theta_f,
            bias: bias_direction(model, design)?,
            delta: design.delta,
            dg1_dpi,
            pi_star,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    /// `diag(Π) − ΠΠ'`.
    pub fn multinomial_covariance(&self) -> DMatrix<f64> {
        let p = self.pi_star.probs();
        DMatrix::from_diagonal(p) - p * p.transpose()
    }

    /// `[Σ, −∂P/∂θ_f']`.
    pub fn influence(&self) -> Result<DMatrix<f64>> {
        let sigma = sigma_matrix(&self.p_star, &self.m_star)?;
        let mut out = DMatrix::zeros(sigma.nrows(), sigma.ncols() + self.dp_dtheta_f.ncols());
        out.columns_mut(0, sigma.ncols()).copy_from(&sigma);
        out.columns_mut(sigma.ncols(), self.dp_dtheta_f.ncols())
            .copy_from(&(-&self.dp_dtheta_f));
        Ok(out)
    }

    pub fn delta_matrix(&self) -> Result<DMatrix<f64>> {
        delta_matrix(&self.dg1_dpi, self.pi_star.n_actions(), self.pi_star.n_states())
    }

    /// `[Σ, −∂P/∂θ_f'] Δ (diag(Π) − ΠΠ' [+ BB']) Δ' [Σ, −∂P/∂θ_f']'`.
    fn ccp_covariance(&self, with_bias: bool) -> Result<DMatrix<f64>> {
        let map = self.influence()? * self.delta_matrix()?;
        let mut cov = self.multinomial_covariance();
        if with_bias {
            cov += &self.bias * self.bias.transpose();
        }
        Ok(linalg::symmetrize(&(&map * cov * map.transpose())))
    }
}

/// Block-diagonal `Φ` with `Φ_x = m(x)[diag(1/P(a|x)) + 11'/P(|A| | x)]`.
pub fn phi_matrix(p: &CcpMatrix, m: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_marginal(p, m)?;
    p.require_interior()?;
    let k = p.n_actions() - 1;
    let ns = p.n_states();
    let mut phi = DMatrix::zeros(k * ns, k * ns);
    for x in 0..ns {
        let last = p.get(k, x);
        for a in 0..k {
            for b in 0..k {
                let diag = if a == b { 1.0 / p.get(a, x) } else { 0.0 };
                phi[(x * k + a, x * k + b)] = m[x] * (diag + 1.0 / last);
            }
        }
    }
    Ok(phi)
}

/// Block-diagonal `Σ` with `Σ_x = [I_{Ã×A} − P_Ã 1'] / m(x)`; maps
/// perturbations of `j(a,x)` (indexed `a + |A|·x`) to reduced CCPs.
pub fn sigma_matrix(p: &CcpMatrix, m: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_marginal(p, m)?;
    let na = p.n_actions();
    let k = na - 1;
    let ns = p.n_states();
    let mut sigma = DMatrix::zeros(k * ns, na * ns);
    for x in 0..ns {
        for a in 0..k {
            for b in 0..na {
                let eye = if a == b { 1.0 } else { 0.0 };
                sigma[(x * k + a, x * na + b)] = (eye - p.get(a, x)) / m[x];
            }
        }
    }
    Ok(sigma)
}

fn check_marginal(p: &CcpMatrix, m: &DVector<f64>) -> Result<()> {
    if m.len() != p.n_states() {
        return Err(Error::DimensionMismatch {
            what: "marginal",
            expected: p.n_states(),
            found: m.len(),
        });
    }
    if let Some(x) = m.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter(alloc::format!("zero marginal mass at state {x}")));
    }
    Ok(())
}

/// `[I … I ; ∂G₁/∂Π']`: sums `Π` over `x'` and appends the first-step gradient.
pub fn delta_matrix(dg1_dpi: &DMatrix<f64>, n_actions: usize, n_states: usize) -> Result<DMatrix<f64>> {
    let block = n_actions * n_states;
    let cells = block * n_states;
    if dg1_dpi.ncols() != cells {
        return Err(Error::DimensionMismatch {
            what: "first-step gradient",
            expected: cells,
            found: dg1_dpi.ncols(),
        });
    }
    let d_f = dg1_dpi.nrows();
    let mut out = DMatrix::zeros(block + d_f, cells);
    for i in 0..cells {
        out[(i % block, i)] = 1.0;
    }
    out.rows_mut(block, d_f).copy_from(dg1_dpi);
    Ok(out)
}

/// `(G'WG)^{-1} G'W [Σ, −∂P/∂θ_f']` with `G = ∂P/∂α'`.
fn sandwich(
    dp_dalpha: &DMatrix<f64>,
    dp_dtheta_f: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let r = dp_dalpha.nrows();
    if weight.nrows() != r || weight.ncols() != r || sigma.nrows() != r || dp_dtheta_f.nrows() != r {
        return Err(Error::DimensionMismatch {
            what: "sandwich inputs",
            expected: r,
            found: weight.nrows(),
        });
    }
    let gw = dp_dalpha.transpose() * weight;
    let inner = &gw * dp_dalpha;
    let (inv, _) = linalg::inverse_checked(&inner, MAX_COND_SANDWICH, "G'WG")?;
    let mut right = DMatrix::zeros(r, sigma.ncols() + dp_dtheta_f.ncols());
    right.columns_mut(0, sigma.ncols()).copy_from(sigma);
    right
        .columns_mut(sigma.ncols(), dp_dtheta_f.ncols())
        .copy_from(&(-dp_dtheta_f));
    Ok(inv * gw * right)
}

pub fn upsilon_ml(
    dp_dalpha: &DMatrix<f64>,
    dp_dtheta_f: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    sandwich(dp_dalpha, dp_dtheta_f, phi, sigma)
}

pub fn upsilon_md(
    dp_dalpha: &DMatrix<f64>,
    dp_dtheta_f: &DMatrix<f64>,
    weight: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    sandwich(dp_dalpha, dp_dtheta_f, weight, sigma)
}

/// Which term dominates at rate `n^{min(1/2, δ)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Regime {
    /// `δ < 1/2`: bias only.
    BiasDominated,
    /// `δ = 1/2`: bias and variance of the same order.
    Balanced,
    /// `δ > 1/2`: variance only.
    VarianceDominated,
}

impl Regime {
    pub fn of(delta: f64) -> Self {
        if math::abs(delta - 0.5) <= REGIME_TOL {
            Regime::Balanced
        } else if delta < 0.5 {
            Regime::BiasDominated
        } else {
            Regime::VarianceDominated
        }
    }

    fn has_bias(self) -> bool {
        self != Regime::VarianceDominated
    }

    fn has_variance(self) -> bool {
        self != Regime::BiasDominated
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticSummary {
    pub upsilon: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub variance: DMatrix<f64>,
    pub mse: DMatrix<f64>,
    pub regime: Regime,
}

/// Asymptotic bias, variance and MSE of `n^{min(1/2,δ)}(α̂ − α*)`.
pub fn asy_summary(inputs: &LimitInputs, upsilon: &DMatrix<f64>, delta: f64) -> Result<AsymptoticSummary> {
    let big_delta = inputs.delta_matrix()?;
    if upsilon.ncols() != big_delta.nrows() {
        return Err(Error::DimensionMismatch {
            what: "upsilon",
            expected: big_delta.nrows(),
            found: upsilon.ncols(),
        });
    }
    let regime = Regime::of(delta);
    let map = upsilon * &big_delta;
    let d = upsilon.nrows();
    let bias = if regime.has_bias() {
        &map * &inputs.bias
    } else {
        DVector::zeros(d)
    };
    let variance = if regime.has_variance() {
        linalg::symmetrize(&(&map * inputs.multinomial_covariance() * map.transpose()))
    } else {
        DMatrix::zeros(d, d)
    };
    let mse = &variance + &bias * bias.transpose();
    Ok(AsymptoticSummary {
        upsilon: upsilon.clone(),
        bias,
        variance,
        mse,
        regime,
    })
}

/// Summary of an estimator: `None` weight means ML.
pub fn estimator_summary(inputs: &LimitInputs, weight: Option<&DMatrix<f64>>) -> Result<AsymptoticSummary> {
    let sigma = sigma_matrix(&inputs.p_star, &inputs.m_star)?;
    let upsilon = match weight {
        None => {
            let phi = phi_matrix(&inputs.p_star, &inputs.m_star)?;
            upsilon_ml(&inputs.dp_dalpha, &inputs.dp_dtheta_f, &phi, &sigma)?
        }
        Some(w) => upsilon_md(&inputs.dp_dalpha, &inputs.dp_dtheta_f, w, &sigma)?,
    };
    asy_summary(inputs, &upsilon, inputs.delta)
}

/// Variance-minimizing limiting weight.
pub fn w_av(inputs: &LimitInputs) -> Result<DMatrix<f64>> {
    let (inv, _) = linalg::inverse_checked(&inputs.ccp_covariance(false)?, MAX_COND_WEIGHT, "W_AV bracket")?;
    Ok(linalg::symmetrize(&inv))
}

/// MSE-minimizing limiting weight (uses the bias direction).
pub fn w_amse(inputs: &LimitInputs) -> Result<DMatrix<f64>> {
    let (inv, _) = linalg::inverse_checked(&inputs.ccp_covariance(true)?, MAX_COND_WEIGHT, "W_AMSE bracket")?;
    Ok(linalg::symmetrize(&inv))
}

/// Residual of the optimality condition `G'W = C G' Ω^{-1}` with `C = I`,
/// where `Ω` is the MSE bracket: max-abs of `G'W − G'Ω^{-1}`.
pub fn w_amse_condition_residual(inputs: &LimitInputs, weight: &DMatrix<f64>) -> Result<f64> {
    let omega_inv = w_amse(inputs)?;
    let g = &inputs.dp_dalpha;
    Ok(linalg::max_abs(&(g.transpose() * weight - g.transpose() * omega_inv)))
}

/// Max-abs residuals of the two score identities linking log-CCP
/// derivatives to Φ and Σ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityResiduals {
    /// `∂lnP'/∂λ − ∂P'/∂λ Φ Σ`.
    pub score: f64,
    /// `Σ_{a,x} J (∂lnP/∂λ)(∂lnP/∂λ)' − ∂P'/∂λ Φ ∂P/∂λ'`.
    pub information: f64,
}

/// Evaluates both identities at the truth with `λ = (α, θ_f)`. Log-CCP
/// derivatives are differenced directly rather than derived from `∂P`.
pub fn information_identities(model: &ModelSpec, inputs: &LimitInputs) -> Result<IdentityResiduals> {
    let researcher = model.researcher_model();
    let na = model.n_actions();
    let (dl_da, dl_df) = dpsi_dtheta_at(
        &researcher,
        &inputs.alpha_star,
        &inputs.theta_f_star,
        &inputs.p_star,
        |prim, p| {
            let psi = prim.psi(p)?;
            Ok(DVector::from_fn(na * model.n_states(), |i, _| {
                math::ln(psi.get(i % na, i / na))
            }))
        },
    )?;
    let d_lnp = hstack(&dl_da, &dl_df);
    let d_p = hstack(&inputs.dp_dalpha, &inputs.dp_dtheta_f);
    let phi = phi_matrix(&inputs.p_star, &inputs.m_star)?;
    let sigma = sigma_matrix(&inputs.p_star, &inputs.m_star)?;
    let score = linalg::max_abs(&(d_lnp.transpose() - d_p.transpose() * &phi * &sigma));
    let weighted = DMatrix::from_fn(d_lnp.nrows(), d_lnp.ncols(), |i, k| inputs.j_star[i] * d_lnp[(i, k)]);
    let info_lhs = d_lnp.transpose() * weighted;
    let info_rhs = d_p.transpose() * &phi * &d_p;
    let information = linalg::max_abs(&(info_lhs - info_rhs));
    Ok(IdentityResiduals { score, information })
}

fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}
