use ddc_core::asymptotics::*;
use ddc_core::dgp::*;
use ddc_core::estimate::*;
use ddc_core::linalg::psd_leq;
use ddc_core::model::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn bus() -> ModelSpec {
    ModelSpec::bus(20, 0.9999).unwrap()
}

fn inputs(misspec: Misspecification, delta: f64) -> LimitInputs {
    LimitInputs::from_design(&bus(), &bus_design(20, misspec, delta), &FirstStep::BusStayShare).unwrap()
}

fn design1(delta: f64) -> LimitInputs {
    inputs(Misspecification::quadratic(-0.025), delta)
}

#[test]
fn bus_phi_is_positive_definite_and_sigma_annihilates_j() {
    let li = design1(0.5);
    let phi = phi_matrix(&li.p_star, &li.m_star).unwrap();
    assert!((&phi - phi.transpose()).amax() == 0.0);
    assert!(phi.clone().symmetric_eigenvalues().min() > 0.0);
    let sigma = sigma_matrix(&li.p_star, &li.m_star).unwrap();
    assert!((&sigma * &li.j_star).amax() < 1e-12);
    // A pure shift of the state marginal moves J along m-weighted CCP columns.
    for x in 0..20 {
        let dir = DVector::from_fn(40, |i, _| if i / 2 == x { li.p_star.get(i % 2, x) } else { 0.0 });
        assert!((&sigma * dir).amax() < 1e-12);
    }
}

#[test]
fn delta_top_block_sums_out_next_state() {
    let li = design1(0.5);
    let d = li.delta_matrix().unwrap();
    let top = d.rows(0, 40) * li.pi_star.probs();
    assert!((top - &li.j_star).amax() < 1e-15);
    assert_eq!(d.nrows(), 41);
}

#[test]
fn first_step_gradient_matches_differences() {
    let li = design1(0.5);
    let pi = li.pi_star.probs();
    let h = 1e-7;
    for i in 0..pi.len() {
        let mut up = pi.clone();
        up[i] += h;
        let mut dn = pi.clone();
        dn[i] -= h;
        let fd = (theta_f_bus_from_joint(&up, 2, 20).unwrap().0 - theta_f_bus_from_joint(&dn, 2, 20).unwrap().0)
            / (2.0 * h);
        assert!((fd - li.dg1_dpi[(0, i)]).abs() < 1e-8);
    }
}

#[test]
fn sigma_is_the_ccp_gradient_in_j() {
    let li = design1(0.5);
    let sigma = sigma_matrix(&li.p_star, &li.m_star).unwrap();
    let ccp = |j: &DVector<f64>| {
        DVector::from_fn(20, |x, _| j[2 * x] / (j[2 * x] + j[2 * x + 1]))
    };
    let h = 1e-7;
    for c in 0..40 {
        let mut up = li.j_star.clone();
        up[c] += h;
        let mut dn = li.j_star.clone();
        dn[c] -= h;
        let fd = (ccp(&up) - ccp(&dn)) / (2.0 * h);
        assert!((fd - sigma.column(c)).amax() < 1e-6);
    }
}

#[test]
fn ml_is_md_with_information_weight() {
    let li = design1(0.5);
    let phi = phi_matrix(&li.p_star, &li.m_star).unwrap();
    let sigma = sigma_matrix(&li.p_star, &li.m_star).unwrap();
    let ml = upsilon_ml(&li.dp_dalpha, &li.dp_dtheta_f, &phi, &sigma).unwrap();
    let md = upsilon_md(&li.dp_dalpha, &li.dp_dtheta_f, &phi, &sigma).unwrap();
    assert!((&ml - &md).amax() < 1e-10);
    let eye = DMatrix::identity(20, 20);
    let i1 = upsilon_md(&li.dp_dalpha, &li.dp_dtheta_f, &eye, &sigma).unwrap();
    let i7 = upsilon_md(&li.dp_dalpha, &li.dp_dtheta_f, &(eye * 7.0), &sigma).unwrap();
    assert!((&i1 - &i7).amax() < 1e-10 * i1.amax());
}

#[test]
fn upsilon_left_inverts_the_model_derivative() {
    // Υ [Σ, −∂P/∂θ_f] restricted to a CCP-space direction G: Υ_Σ-part of a
    // J perturbation producing dP = G v returns v. Use Φ-weighted check:
    // (G'WG)^{-1} G'W G = I.
    let li = design1(0.5);
    let eye = DMatrix::<f64>::identity(20, 20);
    let g = &li.dp_dalpha;
    let lhs = (g.transpose() * &eye * g).try_inverse().unwrap() * g.transpose() * &eye * g;
    assert!((lhs - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    // And through Σ: a J perturbation whose CCP image is G v.
    let sigma = sigma_matrix(&li.p_star, &li.m_star).unwrap();
    let u = upsilon_md(g, &li.dp_dtheta_f, &eye, &sigma).unwrap();
    for k in 0..2 {
        // j-perturbation: dj(0,x) = m(x) dP(x), dj(1,x) = −m(x) dP(x).
        let dp = g.column(k);
        let mut dj = DVector::zeros(41);
        for x in 0..20 {
            dj[2 * x] = li.m_star[x] * dp[x];
            dj[2 * x + 1] = -li.m_star[x] * dp[x];
        }
        let v = &u * dj;
        for l in 0..2 {
            let expect = if k == l { 1.0 } else { 0.0 };
            assert!((v[l] - expect).abs() < 1e-8, "{v}");
        }
    }
}

#[test]
fn indicator_structure() {
    let li = design1(1.0);
    let s = estimator_summary(&li, None).unwrap();
    assert_eq!(s.bias.amax(), 0.0);
    assert_eq!(s.mse, s.variance);
    let li = design1(1.0 / 3.0);
    let s = estimator_summary(&li, None).unwrap();
    assert_eq!(s.variance.amax(), 0.0);
    assert!((&s.mse - &s.bias * s.bias.transpose()).amax() == 0.0);
    let li = design1(0.5);
    let s = estimator_summary(&li, None).unwrap();
    assert!(s.variance.clone().symmetric_eigenvalues().min() >= -1e-12);
    assert_eq!(s.variance, s.variance.transpose());
}

#[test]
fn design1_ml_mse_is_near_reported_value() {
    // Reported n·MSE of the mileage coefficient at n = 1000: 0.30–0.31.
    let li = design1(0.5);
    let s = estimator_summary(&li, None).unwrap();
    let amse = s.mse[(1, 1)];
    assert!(s.bias[1] > 0.0);
    assert!((0.28..0.32).contains(&amse), "AMSE {amse}, AB {}, AV {}", s.bias[1], s.variance[(1, 1)]);
}

#[test]
fn optimal_weights_order() {
    let li = design1(0.5);
    let wav = w_av(&li).unwrap();
    let wamse = w_amse(&li).unwrap();
    let eye = DMatrix::identity(20, 20);
    let s_i = estimator_summary(&li, Some(&eye)).unwrap();
    let s_av = estimator_summary(&li, Some(&wav)).unwrap();
    let s_amse = estimator_summary(&li, Some(&wamse)).unwrap();
    assert!(psd_leq(&s_av.variance, &s_i.variance, 1e-8).0);
    assert!(s_av.variance.trace() <= s_i.variance.trace());
    assert!(psd_leq(&s_amse.mse, &s_av.mse, 1e-8).0);
    assert!(w_amse_condition_residual(&li, &wamse).unwrap() < 1e-8 * wamse.amax());

    let li0 = inputs(Misspecification::Correct, 0.5);
    assert_eq!(w_av(&li0).unwrap(), w_amse(&li0).unwrap());
}

#[test]
fn identities_hold_on_bus() {
    let li = design1(0.5);
    let r = information_identities(&bus(), &li).unwrap();
    assert!(r.score < 1e-6, "{r:?}");
    assert!(r.information < 1e-6 * (1.0 + li.dp_dalpha.amax().powi(2)), "{r:?}");
}

#[test]
fn identities_hold_on_single_state_logit() {
    // One state: the choice is a plain binary logit in alpha, so every
    // derivative is available in closed form.
    let alpha = 0.4;
    let u = UtilitySpec::from_fn(1, 2, 1, 10.0, |_, a, _| if a == 0 { 1.0 } else { 0.0 }).unwrap();
    let t = TransitionArray::new(1, 2, vec![1.0, 1.0]).unwrap();
    let m = ModelSpec::new(1, 2, 0.5, u, TransitionSpec::Fixed(t.clone())).unwrap();
    let li = small_inputs(&m, &[alpha], &t, &DVector::from_element(1, 1.0));
    let p0 = 1.0 / (1.0 + (-alpha).exp());
    assert!((li.p_star.get(0, 0) - p0).abs() < 1e-15);
    let dp = DMatrix::from_element(1, 1, p0 * (1.0 - p0));
    assert!((li.dp_dalpha[(0, 0)] - dp[(0, 0)]).abs() < 1e-9);
    let d_lnp = DMatrix::from_column_slice(2, 1, &[1.0 - p0, -p0]);
    let phi = phi_matrix(&li.p_star, &li.m_star).unwrap();
    let sigma = sigma_matrix(&li.p_star, &li.m_star).unwrap();
    let score = (d_lnp.transpose() - dp.transpose() * &phi * &sigma).amax();
    let j = DMatrix::from_diagonal(&li.j_star);
    let info = (d_lnp.transpose() * j * &d_lnp - dp.transpose() * &phi * &dp).amax();
    assert!(score < 1e-10 && info < 1e-10, "{score} {info}");
    let r = information_identities(&m, &li).unwrap();
    assert!(r.score < 1e-6 && r.information < 1e-6, "{r:?}");
}

fn small_inputs(m: &ModelSpec, alpha: &[f64], t: &TransitionArray, marg: &DVector<f64>) -> LimitInputs {
    let d = dp_dtheta(m, alpha, &[]).unwrap();
    let pi = assemble_joint(t, &d.ccp, marg).unwrap();
    let cells = pi.len();
    LimitInputs {
        m_star: pi.marginal(),
        j_star: pi.j(),
        p_star: d.ccp,
        alpha_star: alpha.to_vec(),
        theta_f_star: vec![],
        dp_dalpha: d.d_alpha,
        dp_dtheta_f: d.d_theta_f,
        bias: DVector::zeros(cells),
        delta: 0.5,
        dg1_dpi: DMatrix::zeros(0, cells),
        pi_star: pi,
    }
}

#[test]
fn limit_inputs_reject_inconsistent_pieces() {
    let mut li = design1(0.5);
    li.m_star[0] += 1e-6;
    assert!(li.validate().is_err());
}

#[test]
fn empirical_clt_matches_multinomial_covariance() {
    let li = inputs(Misspecification::Correct, 0.5);
    let n = 1000;
    let reps = 5000u64;
    let pi = li.pi_star.probs();
    let cells = pi.len();
    let mut devs: Vec<DVector<f64>> = Vec::with_capacity(reps as usize);
    for r in 0..reps {
        let data = sample_dataset(&li.pi_star, n, ddc_core::rng::replication_seed(17, r));
        let s = SampleAnalogues::from_dataset(&data).unwrap();
        devs.push((&s.pi_hat - pi) * (n as f64).sqrt());
    }
    let cov = li.multinomial_covariance();
    // Check a spread of entries: diagonals, same-state and cross-state pairs.
    let mut checked = 0;
    for i in (0..cells).step_by(7) {
        for k in (i..cells).step_by(53) {
            let prods: Vec<f64> = devs.iter().map(|d| d[i] * d[k]).collect();
            let mean = prods.iter().sum::<f64>() / reps as f64;
            let sd = (prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            let se = sd / (reps as f64).sqrt();
            assert!((mean - cov[(i, k)]).abs() <= 5.0 * se + 1e-12, "({i},{k}) {mean} vs {}", cov[(i, k)]);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

fn random_small() -> impl Strategy<Value = (ModelSpec, TransitionArray, Vec<f64>, DVector<f64>)> {
    (1usize..=4, 2usize..=3, 0.1f64..0.95).prop_flat_map(|(ns, na, beta)| {
        (
            Just((ns, na, beta)),
            prop::collection::vec(-1.5f64..1.5, ns * na * 2),
            prop::collection::vec(0.05f64..1.0, ns * na * ns),
            prop::collection::vec(-1.0f64..1.0, 2),
            prop::collection::vec(0.2f64..1.0, ns),
        )
            .prop_map(|((ns, na, beta), feats, mut kern, alpha, marg)| {
                for row in kern.chunks_mut(ns) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                let u = UtilitySpec::new(ns, na, 2, feats, 10.0).unwrap();
                let t = TransitionArray::new(ns, na, kern).unwrap();
                let m = ModelSpec::new(ns, na, beta, u, TransitionSpec::Fixed(t.clone())).unwrap();
                let mut mv = DVector::from_vec(marg);
                mv /= mv.sum();
                (m, t, alpha, mv)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn identities_hold_on_random_models((m, t, alpha, marg) in random_small()) {
        let li = small_inputs(&m, &alpha, &t, &marg);
        let r = information_identities(&m, &li).unwrap();
        prop_assert!(r.score < 1e-6, "{:?}", r);
        prop_assert!(r.information < 1e-6, "{:?}", r);
    }

    #[test]
    fn ml_equals_md_phi_and_scale_invariance((m, t, alpha, marg) in random_small(), c in 0.1f64..50.0) {
        let li = small_inputs(&m, &alpha, &t, &marg);
        let phi = phi_matrix(&li.p_star, &li.m_star).unwrap();
        let sigma = sigma_matrix(&li.p_star, &li.m_star).unwrap();
        let ml = upsilon_ml(&li.dp_dalpha, &li.dp_dtheta_f, &phi, &sigma);
        // Models with one state and two actions cannot identify two parameters.
        if let Ok(ml) = ml {
            let md = upsilon_md(&li.dp_dalpha, &li.dp_dtheta_f, &phi, &sigma).unwrap();
            prop_assert!((&ml - &md).amax() < 1e-10);
            let scaled = upsilon_md(&li.dp_dalpha, &li.dp_dtheta_f, &(&phi * c), &sigma).unwrap();
            prop_assert!((&ml - &scaled).amax() < 1e-8 * ml.amax().max(1.0));
            prop_assert!((&sigma * &li.j_star).amax() < 1e-12);
        }
    }
}
