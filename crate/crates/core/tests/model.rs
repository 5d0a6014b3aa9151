use approx::assert_abs_diff_eq;
use ddc_core::model::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const BUS_ALPHA: [f64; 2] = [1.0, 0.05];
const BUS_THETA_F: [f64; 1] = [0.25];

fn bus() -> ModelSpec {
    ModelSpec::bus(20, 0.9999).unwrap()
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn bus_value() -> ValueVector {
    solve_value_function(&bus(), &BUS_ALPHA, &BUS_THETA_F, 1e-9, 10_000_000)
        .unwrap()
        .values
}

#[test]
fn choice_values_match_direct_summation() {
    let m = bus();
    let v = bus_value();
    let cv = choice_values(&m, &BUS_ALPHA, &BUS_THETA_F, &v).unwrap();
    let k = m.kernel(&BUS_THETA_F).unwrap();
    for x in 0..20 {
        for a in 0..2 {
            let u = if a == 0 { -0.05 * (x + 1) as f64 } else { -1.0 };
            let mut cont = 0.0;
            for xn in 0..20 {
                cont += v.values()[xn] * k.prob(x, a, xn);
            }
            assert_abs_diff_eq!(cv[(a, x)], u + 0.9999 * cont, epsilon = 1e-9);
        }
    }
}

#[test]
fn value_iteration_and_policy_iteration_agree() {
    let m = bus();
    let fp = model_ccp(&m, &BUS_ALPHA, &BUS_THETA_F).unwrap();
    let v = bus_value();
    let via_values = lambda_map(&choice_values(&m, &BUS_ALPHA, &BUS_THETA_F, &v).unwrap()).unwrap();
    assert!(via_values.max_abs_diff(&fp) < 1e-8, "{}", via_values.max_abs_diff(&fp));
}

#[test]
fn varphi_at_fixed_point_is_value_function() {
    let m = bus();
    let fp = model_ccp(&m, &BUS_ALPHA, &BUS_THETA_F).unwrap();
    let phi = varphi_map(&m, &BUS_ALPHA, &BUS_THETA_F, &fp).unwrap();
    let v = bus_value();
    let diff = (phi.values() - v.values()).amax();
    assert!(diff < 1e-8, "{diff}");
}

#[test]
fn psi_is_composition_of_components() {
    let m = bus();
    let p = CcpMatrix::uniform(2, 20);
    let v = varphi_map(&m, &BUS_ALPHA, &BUS_THETA_F, &p).unwrap();
    let step = lambda_map(&choice_values(&m, &BUS_ALPHA, &BUS_THETA_F, &v).unwrap()).unwrap();
    let direct = psi_map(&m, &BUS_ALPHA, &BUS_THETA_F, &p).unwrap();
    assert_eq!(step, direct);
    assert!(direct.is_interior());
}

#[test]
fn fixed_point_is_fixed_and_unique() {
    let m = bus();
    let fp = model_ccp(&m, &BUS_ALPHA, &BUS_THETA_F).unwrap();
    let again = psi_map(&m, &BUS_ALPHA, &BUS_THETA_F, &fp).unwrap();
    assert!(again.max_abs_diff(&fp) < 1e-10);

    let skewed = CcpMatrix::new(DMatrix::from_fn(2, 20, |a, x| {
        let p = 0.02 + 0.96 * (x as f64 / 19.0);
        if a == 0 { p } else { 1.0 - p }
    }))
    .unwrap();
    let other = solve_ccp_fixed_point(&m, &BUS_ALPHA, &BUS_THETA_F, &skewed, 1e-12, 10_000).unwrap();
    assert!(other.ccp.max_abs_diff(&fp) < 1e-11);
}

#[test]
fn jacobian_vanishes_at_fixed_point() {
    let m = bus();
    let fp = model_ccp(&m, &BUS_ALPHA, &BUS_THETA_F).unwrap();
    let j = jacobian_psi_wrt_p(&m, &BUS_ALPHA, &BUS_THETA_F, &fp).unwrap();
    assert!(max_abs(&j) < 1e-5, "{}", max_abs(&j));
}

#[test]
fn jacobian_away_from_fixed_point_is_step_consistent() {
    let m = ModelSpec::bus(20, 0.95).unwrap();
    let p = CcpMatrix::uniform(2, 20);
    let a = jacobian_psi_wrt_p_step(&m, &BUS_ALPHA, &BUS_THETA_F, &p, 1e-6).unwrap();
    let b = jacobian_psi_wrt_p_step(&m, &BUS_ALPHA, &BUS_THETA_F, &p, 1e-5).unwrap();
    assert!(max_abs(&a) > 1e-3);
    assert!(max_abs(&(&a - &b)) < 1e-6 * max_abs(&a).max(1.0) + 1e-7);
}

fn full_resolve_jacobian(m: &ModelSpec, alpha: &[f64], theta_f: &[f64]) -> DMatrix<f64> {
    let d = alpha.len() + theta_f.len();
    let mut out = DMatrix::zeros(m.n_reduced(), d);
    for j in 0..d {
        let h = 1e-5;
        let solve = |s: f64| {
            let mut a = alpha.to_vec();
            let mut t = theta_f.to_vec();
            if j < alpha.len() { a[j] += s } else { t[j - alpha.len()] += s }
            model_ccp(m, &a, &t).unwrap().reduced().values().clone()
        };
        out.set_column(j, &((solve(h) - solve(-h)) / (2.0 * h)));
    }
    out
}

#[test]
fn dp_dtheta_matches_full_resolve() {
    let m = bus();
    let d = dp_dtheta(&m, &BUS_ALPHA, &BUS_THETA_F).unwrap();
    let full = full_resolve_jacobian(&m, &BUS_ALPHA, &BUS_THETA_F);
    let mut analytic = DMatrix::zeros(m.n_reduced(), 3);
    analytic.columns_mut(0, 2).copy_from(&d.d_alpha);
    analytic.columns_mut(2, 1).copy_from(&d.d_theta_f);
    let err = max_abs(&(&analytic - &full));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn dp_dtheta_zero_columns() {
    // Feature 2 never enters utility.
    let u = UtilitySpec::from_fn(3, 2, 2, 10.0, |x, a, k| if k == 0 && a == 1 { -1.0 - x as f64 } else { 0.0 })
        .unwrap();
    let m = ModelSpec::new(3, 2, 0.9, u, TransitionSpec::Bus).unwrap();
    let d = dp_dtheta(&m, &[0.5, 0.3], &[0.4]).unwrap();
    assert!(d.d_alpha.column(1).amax() < 1e-12);
    assert!(d.d_alpha.column(0).amax() > 1e-3);

    // A single state: transitions are irrelevant.
    let u = UtilitySpec::from_fn(1, 2, 1, 10.0, |_, a, _| a as f64).unwrap();
    let base = TransitionArray::new(1, 2, vec![1.0, 1.0]).unwrap();
    let m = ModelSpec::new(1, 2, 0.9, u, TransitionSpec::Blend { base: base.clone(), alt: base }).unwrap();
    let d = dp_dtheta(&m, &[0.5], &[0.4]).unwrap();
    assert!(d.d_theta_f.amax() < 1e-12);
}

#[test]
fn linear_index_reproduces_psi() {
    let m = bus();
    let p = CcpMatrix::new(DMatrix::from_fn(2, 20, |a, x| {
        let q = 0.9 - 0.03 * x as f64;
        if a == 0 { q } else { 1.0 - q }
    }))
    .unwrap();
    let li = m.linear_index(&BUS_THETA_F, &p).unwrap();
    for alpha in [[1.0, 0.05], [0.3, -0.2], [-2.0, 0.5]] {
        let direct = psi_map(&m, &alpha, &BUS_THETA_F, &p).unwrap();
        let via = lambda_map(&li.values(&alpha)).unwrap();
        assert!(direct.max_abs_diff(&via) < 1e-9);
    }
}

/// Small random model: |X| ≤ 4, |A| ≤ 3, random features, kernel and α.
fn small_model() -> impl Strategy<Value = (ModelSpec, Vec<f64>)> {
    (1usize..=4, 2usize..=3, 0.0f64..0.98).prop_flat_map(|(ns, na, beta)| {
        let feats = prop::collection::vec(-2.0f64..2.0, ns * na * 2);
        let kern = prop::collection::vec(0.05f64..1.0, ns * na * ns);
        let alpha = prop::collection::vec(-1.5f64..1.5, 2);
        (Just((ns, na, beta)), feats, kern, alpha).prop_map(|((ns, na, beta), feats, mut kern, alpha)| {
            for row in kern.chunks_mut(ns) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let u = UtilitySpec::new(ns, na, 2, feats, 10.0).unwrap();
            let t = TransitionArray::new(ns, na, kern).unwrap();
            (ModelSpec::new(ns, na, beta, u, TransitionSpec::Fixed(t)).unwrap(), alpha)
        })
    })
}

fn random_interior(na: usize, ns: usize, raw: &[f64]) -> CcpMatrix {
    let mut m = DMatrix::from_fn(na, ns, |a, x| 0.05 + raw[(x * na + a) % raw.len()]);
    for mut c in m.column_iter_mut() {
        let s = c.sum();
        c /= s;
    }
    CcpMatrix::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fixed_point_unique_from_random_starts((m, alpha) in small_model(),
        starts in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 12), 10)) {
        let tol = 1e-12;
        let sols: Vec<CcpMatrix> = starts.iter().map(|raw| {
            let p0 = random_interior(m.n_actions(), m.n_states(), raw);
            solve_ccp_fixed_point(&m, &alpha, &[], &p0, tol, 10_000).unwrap().ccp
        }).collect();
        for s in &sols[1..] {
            prop_assert!(s.max_abs_diff(&sols[0]) < 10.0 * tol);
        }
        for s in &sols {
            prop_assert!(s.is_interior());
            for x in 0..m.n_states() {
                prop_assert!((s.as_matrix().column(x).sum() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn jacobian_zero_on_small_models((m, alpha) in small_model()) {
        let fp = model_ccp(&m, &alpha, &[]).unwrap();
        let j = jacobian_psi_wrt_p(&m, &alpha, &[], &fp).unwrap();
        prop_assert!(max_abs(&j) < 1e-5);
    }

    #[test]
    fn value_and_policy_iteration_agree((m, alpha) in small_model()) {
        let fp = model_ccp(&m, &alpha, &[]).unwrap();
        let v = solve_value_function(&m, &alpha, &[], 1e-11, 1_000_000).unwrap();
        let p = lambda_map(&choice_values(&m, &alpha, &[], &v.values).unwrap()).unwrap();
        prop_assert!(p.max_abs_diff(&fp) < 1e-8);
    }

    #[test]
    fn continuation_values_affine_in_alpha((m, _) in small_model(),
        a1 in prop::collection::vec(-1.0f64..1.0, 2),
        a2 in prop::collection::vec(-1.0f64..1.0, 2),
        raw in prop::collection::vec(0.0f64..1.0, 12)) {
        let p = random_interior(m.n_actions(), m.n_states(), &raw);
        let v = |a: &[f64]| {
            let val = varphi_map(&m, a, &[], &p).unwrap();
            choice_values(&m, a, &[], &val).unwrap()
        };
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let resid = v(&sum) - v(&a1) - v(&a2) + v(&[0.0, 0.0]);
        prop_assert!(max_abs(&resid) < 1e-10);
    }

    #[test]
    fn reduced_round_trip(raw in prop::collection::vec(0.0f64..1.0, 12), na in 2usize..4, ns in 1usize..4) {
        let p = random_interior(na, ns, &raw);
        let back = CcpMatrix::from_reduced(&p.reduced()).unwrap();
        prop_assert!(back.max_abs_diff(&p) < 1e-15);
    }
}

#[test]
fn varphi_simple_closed_form_with_states() {
    let m = ModelSpec::bus(3, 0.0).unwrap();
    let p = CcpMatrix::uniform(2, 3);
    let v = varphi_map(&m, &[0.0, 0.0], &[0.5], &p).unwrap();
    let expect = DVector::from_element(3, EULER_GAMMA + std::f64::consts::LN_2);
    assert!((v.values() - expect).amax() < 1e-14);
}
