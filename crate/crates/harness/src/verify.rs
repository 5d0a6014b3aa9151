//! Numerical self-checks run by `ddc verify`, on the bus model and the
//! quadratic-utility design at `δ = 1/2`.

use ddc_core::asymptotics::{
    estimator_summary, information_identities, phi_matrix, sigma_matrix, upsilon_md, upsilon_ml, w_amse, w_av,
    LimitInputs,
};
use ddc_core::dgp::{bus_design, sample_dataset, Misspecification};
use ddc_core::estimate::{FirstStep, SampleAnalogues};
use ddc_core::linalg::psd_leq;
use ddc_core::model::{
    choice_values, dp_dtheta, jacobian_psi_wrt_p, lambda_map, model_ccp, solve_ccp_fixed_point,
    solve_value_function, CcpMatrix, ModelSpec, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL,
};
use ddc_core::rng::{replication_seed, rng_from_seed, uniform};
use nalgebra::{DMatrix, DVector};

const ALPHA: [f64; 2] = [1.0, 0.05];
const THETA_F: [f64; 1] = [0.25];
const CLT_REPLICATIONS: u64 = 5_000;
const CLT_N: usize = 1_000;
const CLT_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Model,
    Asymptotics,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "model" => Some(Suite::Model),
            "asymptotics" => Some(Suite::Asymptotics),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

/// Deliberate errors for testing that the checks can fail.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Faults {
    /// Relative perturbation of the first state's block of `Φ` when it is
    /// used as an MD weight.
    pub phi_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub residual: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Why the check could not be evaluated.
    pub error: Option<String>,
}

impl Check {
    fn below(name: &'static str, residual: f64, threshold: f64) -> Self {
        Check {
            name,
            residual,
            threshold,
            passed: residual < threshold,
            error: None,
        }
    }

    fn failed(name: &'static str, threshold: f64, error: impl ToString) -> Self {
        Check {
            name,
            residual: f64::NAN,
            threshold,
            passed: false,
            error: Some(error.to_string()),
        }
    }
}

fn bus() -> ModelSpec {
    ModelSpec::bus(20, 0.9999).expect("bus model")
}

pub fn run(suite: Suite, faults: Faults) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Model | Suite::All) {
        out.extend(model_checks());
    }
    if matches!(suite, Suite::Asymptotics | Suite::All) {
        out.extend(asymptotic_checks(faults));
    }
    out
}

fn guard(name: &'static str, threshold: f64, f: impl FnOnce() -> ddc_core::Result<f64>) -> Check {
    match f() {
        Ok(r) => Check::below(name, r, threshold),
        Err(e) => Check::failed(name, threshold, e),
    }
}

fn random_ccp(seed: u64, na: usize, ns: usize) -> ddc_core::Result<CcpMatrix> {
    let mut rng = rng_from_seed(seed);
    let mut m = DMatrix::from_fn(na, ns, |_, _| 0.05 + uniform(&mut rng));
    for mut c in m.column_iter_mut() {
        let s = c.sum();
        c /= s;
    }
    CcpMatrix::new(m)
}

pub fn model_checks() -> Vec<Check> {
    let m = bus();
    let mut out = Vec::new();
    let p = model_ccp(&m, &ALPHA, &THETA_F);
    out.push(guard("zero Jacobian of Psi at its fixed point", 1e-5, || {
        let p = p.clone()?;
        Ok(jacobian_psi_wrt_p(&m, &ALPHA, &THETA_F, &p)?.amax())
    }));
    out.push(guard("fixed point from 10 starts", 1e-10, || {
        let p = p.clone()?;
        let mut worst: f64 = 0.0;
        for s in 0..10 {
            let start = random_ccp(replication_seed(11, s), 2, 20)?;
            let fp = solve_ccp_fixed_point(&m, &ALPHA, &THETA_F, &start, FIXED_POINT_TOL, FIXED_POINT_MAX_ITER)?;
            worst = worst.max(fp.ccp.max_abs_diff(&p));
        }
        Ok(worst)
    }));
    out.push(guard("value iteration vs policy iteration CCPs", 1e-8, || {
        let p = p.clone()?;
        let v = solve_value_function(&m, &ALPHA, &THETA_F, 1e-9, 10_000_000)?;
        let via = lambda_map(&choice_values(&m, &ALPHA, &THETA_F, &v.values)?)?;
        Ok(via.max_abs_diff(&p))
    }));
    out.push(guard("dP/dtheta vs re-solved differences", 1e-4, || {
        let d = dp_dtheta(&m, &ALPHA, &THETA_F)?;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..3 {
            let shift = |s: f64| -> ddc_core::Result<DVector<f64>> {
                let mut a = ALPHA.to_vec();
                let mut f = THETA_F.to_vec();
                if k < 2 {
                    a[k] += s;
                } else {
                    f[0] += s;
                }
                Ok(model_ccp(&m, &a, &f)?.reduced().values().clone())
            };
            let fd = (shift(h)? - shift(-h)?) / (2.0 * h);
            let col = if k < 2 {
                d.d_alpha.column(k).into_owned()
            } else {
                d.d_theta_f.column(0).into_owned()
            };
            worst = worst.max((fd - col).amax());
        }
        Ok(worst)
    }));
    out
}

pub fn asymptotic_checks(faults: Faults) -> Vec<Check> {
    let m = bus();
    let design = bus_design(20, Misspecification::quadratic(-0.025), 0.5);
    let inputs = match LimitInputs::from_design(&m, &design, &FirstStep::BusStayShare) {
        Ok(i) => i,
        Err(e) => {
            return vec![Check::failed("limit inputs of the quadratic design", 0.0, e)];
        }
    };
    let li = &inputs;
    let mut out = Vec::new();
    out.push(guard("score identity", 1e-6, || Ok(information_identities(&m, li)?.score)));
    out.push(guard("information identity", 1e-6, || {
        Ok(information_identities(&m, li)?.information)
    }));
    out.push(guard("Sigma annihilates J*", 1e-12, || {
        Ok((sigma_matrix(&li.p_star, &li.m_star)? * &li.j_star).amax())
    }));
    out.push(guard("Upsilon_ML equals Upsilon_MD(Phi)", 1e-10, || {
        let phi = phi_matrix(&li.p_star, &li.m_star)?;
        let sigma = sigma_matrix(&li.p_star, &li.m_star)?;
        let mut weight = phi.clone();
        let k = li.pi_star.n_actions() - 1;
        weight.view_mut((0, 0), (k, k)).scale_mut(1.0 + faults.phi_scale);
        let ml = upsilon_ml(&li.dp_dalpha, &li.dp_dtheta_f, &phi, &sigma)?;
        let md = upsilon_md(&li.dp_dalpha, &li.dp_dtheta_f, &weight, &sigma)?;
        Ok((ml - md).amax())
    }));
    out.push(psd_check("AV(W_AV) <= AV(I)", || {
        let wav = w_av(li)?;
        let eye = DMatrix::identity(wav.nrows(), wav.ncols());
        Ok((
            estimator_summary(li, Some(&wav))?.variance,
            estimator_summary(li, Some(&eye))?.variance,
        ))
    }));
    out.push(psd_check("AMSE(W_AMSE) <= AMSE(W_AV)", || {
        Ok((
            estimator_summary(li, Some(&w_amse(li)?))?.mse,
            estimator_summary(li, Some(&w_av(li)?))?.mse,
        ))
    }));
    out.push(clt_check(li));
    out
}

/// Residual is the most negative eigenvalue of `upper − lower` relative to
/// the larger entry; the order holds when it is above `-1e-8`.
fn psd_check(
    name: &'static str,
    pair: impl FnOnce() -> ddc_core::Result<(DMatrix<f64>, DMatrix<f64>)>,
) -> Check {
    const TOL: f64 = 1e-8;
    match pair() {
        Ok((lower, upper)) => {
            let (ok, min) = psd_leq(&lower, &upper, TOL);
            let scale = lower.amax().max(upper.amax());
            Check {
                name,
                residual: (-min / scale).max(0.0),
                threshold: TOL,
                passed: ok,
                error: None,
            }
        }
        Err(e) => Check::failed(name, TOL, e),
    }
}

/// Empirical covariance of `√n(Π̂ − Π*)` over independent samples against
/// `diag(Π*) − Π*Π*'`, entry by entry in units of its own standard error;
/// the residual is the largest z-score over a spread of entries.
pub fn clt_check(li: &LimitInputs) -> Check {
    const NAME: &str = "empirical CLT covariance (max z)";
    let pi = li.pi_star.probs();
    let mut devs = Vec::with_capacity(CLT_REPLICATIONS as usize);
    for r in 0..CLT_REPLICATIONS {
        let data = sample_dataset(&li.pi_star, CLT_N, replication_seed(CLT_SEED, r));
        match SampleAnalogues::from_dataset(&data) {
            Ok(s) => devs.push((&s.pi_hat - pi) * (CLT_N as f64).sqrt()),
            Err(e) => return Check::failed(NAME, 5.0, e),
        }
    }
    let cov = li.multinomial_covariance();
    let s = devs.len() as f64;
    let mut worst: f64 = 0.0;
    // Cells with positive mass, every 7th, paired with a stride of 53.
    let live: Vec<usize> = (0..pi.len()).filter(|&i| pi[i] > 0.0).collect();
    for a in (0..live.len()).step_by(7) {
        for b in (a..live.len()).step_by(53) {
            let (i, k) = (live[a], live[b]);
            let prods: Vec<f64> = devs.iter().map(|d| d[i] * d[k]).collect();
            let mean = prods.iter().sum::<f64>() / s;
            let sd = (prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (s - 1.0)).sqrt();
            let se = sd / s.sqrt();
            if se > 0.0 {
                worst = worst.max((mean - cov[(i, k)]).abs() / se);
            }
        }
    }
    Check::below(NAME, worst, 5.0)
}
