use precond_core::analysis::{bound_curve, estimate_decay, out_of_span_bound, BoundCurveParams, OutOfSpanBoundInputs};
use precond_core::dynamics::{
    block_closed_form, closed_form_iterate, regularized_fixed_point, run, run_with, RegressionProblem, RunOptions,
};
use precond_core::experiments::{
    evaluate_classifier, gen_margin_classification, gen_margin_test_set, preconditioner_for, DecisionRule,
    MarginClassificationSpec,
};
use precond_core::linalg::{self, symmetric_eigen, Matrix};
use precond_core::precond::{Family, PreconditionerConfig, PreconditionerState, Window};
use precond_core::spectral::{decompose, min_norm_solution};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0..3.0f64, n * d).prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
    })
}

/// A wide data matrix together with a parameter and noise vector.
fn problem_parts() -> impl Strategy<Value = (Matrix, Vec<f64>, Vec<f64>)> {
    (2..=5usize, 3..=5usize).prop_flat_map(|(n, extra)| {
        let d = n + extra;
        (
            prop::collection::vec(-2.0..2.0f64, n * d),
            prop::collection::vec(-1.0..1.0f64, d),
            prop::collection::vec(-0.5..0.5f64, n),
        )
            .prop_map(move |(x, w, z)| (Matrix::from_vec(n, d, x).unwrap(), w, z))
    })
}

fn symmetric(dim: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0..2.0f64, dim * dim).prop_map(move |v| {
        let a = Matrix::from_vec(dim, dim, v).unwrap();
        a.add(&a.transpose()).unwrap()
    })
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn families() -> impl Strategy<Value = Family> {
    prop::sample::select(vec![
        Family::Identity,
        Family::DiagAdaGrad,
        Family::DiagAdaGradSquared,
        Family::DiagAdaGradUnrooted,
        Family::SpanProjectedDiagAdaGrad,
        Family::FullMatrixAdaGrad,
        Family::RidgeInverse,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_reconstructs(x in matrix(6, 8)) {
        prop_assume!(x.max_abs() > 1e-6);
        let dec = decompose(&x, None).unwrap();
        let tol = 1e-10 * x.max_abs().max(1.0);
        prop_assert!(dec.reconstruct().max_abs_diff(&x) <= tol);
        let (n, d) = x.shape();
        prop_assert!(dec.left_basis().gram().max_abs_diff(&Matrix::identity(n)) <= 1e-10);
        prop_assert!(dec.right_basis().gram().max_abs_diff(&Matrix::identity(d)) <= 1e-10);
        let sv = dec.singular_values();
        prop_assert!(sv.windows(2).all(|p| p[0] >= p[1]));
        for (r, s) in sv.iter().enumerate() {
            prop_assert_eq!(*s > dec.rank_tolerance(), r < dec.rank());
        }
    }

    #[test]
    fn spectral_transform_is_isometry(x in matrix(5, 8), seed in any::<u64>()) {
        prop_assume!(x.max_abs() > 1e-6);
        let dec = decompose(&x, None).unwrap();
        let w: Vec<f64> = (0..x.cols()).map(|i| ((seed >> (i % 60)) & 0xff) as f64 / 64.0 - 2.0).collect();
        let s = dec.to_spectral(&w).unwrap();
        prop_assert!((linalg::norm2(&s.full) - linalg::norm2(&w)).abs() <= 1e-10);
        let back = dec.from_spectral(&s).unwrap();
        prop_assert!(linalg::norm_inf(&linalg::sub(&back, &w)) <= 1e-12 * linalg::norm_inf(&w).max(1.0));
        let mut joined = s.in_span().to_vec();
        joined.extend_from_slice(s.out_span());
        prop_assert_eq!(joined, s.full);
    }

    #[test]
    fn spectral_preconditioner_keeps_eigenvalues(x in matrix(4, 6).prop_filter("wide", |m| m.cols() >= 2), seed in 0u64..1000) {
        prop_assume!(x.max_abs() > 1e-6);
        let d = x.cols();
        let dec = decompose(&x, None).unwrap();
        let m: Vec<f64> = (0..d * d).map(|k| (((seed + 7 * k as u64) * 2654435761) % 1000) as f64 / 250.0 - 2.0).collect();
        let a = Matrix::from_vec(d, d, m).unwrap();
        let sym = a.add(&a.transpose()).unwrap();
        let sp = dec.precond_to_spectral(&sym).unwrap();
        prop_assert!(sp.full.asymmetry().unwrap() <= 1e-10);
        let (before, _) = symmetric_eigen(&sym).unwrap();
        let (after, _) = symmetric_eigen(&sp.full).unwrap();
        for (b, a) in sorted(before).iter().zip(sorted(after)) {
            prop_assert!((b - a).abs() <= 1e-8);
        }
    }

    #[test]
    fn min_norm_has_no_null_component(x in matrix(5, 8), y_seed in 0u64..1000) {
        prop_assume!(x.max_abs() > 1e-3);
        let y: Vec<f64> = (0..x.rows()).map(|i| ((y_seed + i as u64 * 31) % 17) as f64 - 8.0).collect();
        let w = min_norm_solution(&x, &y).unwrap();
        let s = decompose(&x, None).unwrap().to_spectral(&w).unwrap();
        prop_assert!(linalg::norm2(s.out_span()) <= 1e-10 * linalg::norm2(&w).max(1.0));
    }

    #[test]
    fn projection_removes_coupling(x in matrix(3, 6), d in symmetric(6)) {
        prop_assume!(x.max_abs() > 1e-3 && x.cols() == 6);
        let dec = decompose(&x, None).unwrap();
        let projected = dec.project_onto_span(&d).unwrap();
        let sp = dec.precond_to_spectral(&projected).unwrap();
        prop_assert!(sp.block2().max_abs() <= 1e-14 * d.max_abs().max(1.0) * 10.0);
        let original = dec.precond_to_spectral(&d).unwrap();
        prop_assert!(sp.block1().max_abs_diff(&original.block1()) <= 1e-12 * d.max_abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn emitted_preconditioners_are_positive_definite(
        (x, w_star, zeta) in problem_parts(),
        family in families(),
        window in prop::sample::select(vec![Window::Bounded(1), Window::Bounded(3), Window::Unbounded]),
    ) {
        let p = RegressionProblem::new(x, w_star, zeta, 0.0).unwrap();
        let cfg = PreconditionerConfig::new(family).with_window(window).with_epsilon(1e-3);
        let mut state = preconditioner_for(&p, cfg).unwrap();
        let mut w = vec![0.3; p.dim()];
        for _ in 0..6 {
            let (_, g) = p.loss_and_gradient(&w).unwrap();
            let dmat = state.advance(&g).unwrap();
            let dense = dmat.to_dense();
            prop_assert!(dense.asymmetry().unwrap() <= 1e-10 * dense.max_abs().max(1.0));
            let (lo, _) = dmat.eigen_range().unwrap();
            prop_assert!(lo > 0.0);
            let sp = p.decomposition().precond_to_spectral(&dense).unwrap();
            if family.is_span_preserving() {
                let tol = if family == Family::SpanProjectedDiagAdaGrad { 1e-14 } else { 1e-12 };
                prop_assert!(sp.block2().max_abs() <= tol * dense.max_abs().max(1.0), "{:?}", family);
            }
            linalg::axpy(-1e-3, &dmat.apply(&g), &mut w);
        }
    }

    #[test]
    fn windowed_sum_matches_brute_force(
        grads in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 3), 1..30),
        j in 1usize..8,
    ) {
        let cfg = PreconditionerConfig::new(Family::DiagAdaGrad).with_window(Window::Bounded(j));
        let mut state = PreconditionerState::new(cfg, 3).unwrap();
        for (t, g) in grads.iter().enumerate() {
            state.advance(g).unwrap();
            prop_assert!(state.window_len() <= j);
            let lo = (t + 1).saturating_sub(j);
            for k in 0..3 {
                let brute: f64 = grads[lo..=t].iter().map(|g| g[k] * g[k]).sum();
                prop_assert!((state.square_sum()[k] - brute).abs() <= 1e-12 * brute.max(1.0));
                prop_assert!(state.square_sum()[k] >= 0.0);
            }
        }
    }

    #[test]
    fn moment_methods_emit_positive_scalings(
        grads in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 1..20),
        family in prop::sample::select(vec![Family::RmsProp, Family::Adam]),
    ) {
        let mut state = PreconditionerState::new(PreconditionerConfig::new(family), 4).unwrap();
        for g in &grads {
            let (dir, d) = state.direction(g).unwrap();
            prop_assert!(linalg::all_finite(&dir));
            let (lo, hi) = d.eigen_range().unwrap();
            prop_assert!(lo > 0.0 && hi.is_finite());
        }
    }

    #[test]
    fn closed_forms_agree_with_iteration(
        (x, w_star, zeta) in problem_parts(),
        family in prop::sample::select(vec![Family::Identity, Family::DiagAdaGrad, Family::DiagAdaGradSquared, Family::FullMatrixAdaGrad, Family::SpanProjectedDiagAdaGrad]),
        regularized in any::<bool>(),
    ) {
        let lambda = if regularized { 0.2 } else { 0.0 };
        let p = RegressionProblem::new(x, w_star, zeta, lambda).unwrap();
        let eps = 1e-2;
        let cfg = PreconditionerConfig::new(family).with_epsilon(eps);
        let d_max = if family == Family::FullMatrixAdaGrad { 1.0 / eps.sqrt() } else if family == Family::Identity { 1.0 } else { 1.0 / eps };
        let eta = 0.5 * precond_core::dynamics::max_stable_step(p.decomposition(), d_max, lambda);
        let w0: Vec<f64> = (0..p.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let opts = RunOptions::new(eta, 40).capturing_preconditioners();
        let traj = run_with(&p, preconditioner_for(&p, cfg).unwrap(), &opts, &w0).unwrap();
        let seq = traj.preconditioners.as_ref().unwrap();
        let s0 = p.decomposition().to_spectral(&w0).unwrap();
        let cf = closed_form_iterate(&p, seq, eta, &s0).unwrap();
        let w = p.decomposition().from_spectral(&cf).unwrap();
        prop_assert!(linalg::norm_inf(&linalg::sub(&w, traj.final_iterate())) <= 1e-9);
        if lambda == 0.0 {
            let (a, b) = block_closed_form(&p, seq, eta, &s0).unwrap();
            prop_assert!(linalg::norm_inf(&linalg::sub(&a, cf.in_span())) <= 1e-9);
            prop_assert!(linalg::norm_inf(&linalg::sub(&b, cf.out_span())) <= 1e-9);
        }
        prop_assert_eq!(traj.losses.len(), traj.iterates.len());
        prop_assert!(traj.losses.iter().all(|l| *l >= 0.0));
    }

    #[test]
    fn span_preserving_methods_keep_null_component(
        (x, w_star, zeta) in problem_parts(),
        family in prop::sample::select(vec![Family::Identity, Family::SpanProjectedDiagAdaGrad]),
    ) {
        let p = RegressionProblem::new(x, w_star, zeta, 0.0).unwrap();
        let s2 = p.decomposition().sigma_max().powi(2);
        let (cfg, eta) = match family {
            Family::Identity => (PreconditionerConfig::new(family), 1.0 / s2),
            _ => (PreconditionerConfig::new(family).with_window(Window::Unbounded).with_epsilon(1e-2), 0.5),
        };
        let w0: Vec<f64> = (0..p.dim()).map(|i| (i as f64).cos()).collect();
        let traj = run(&p, preconditioner_for(&p, cfg).unwrap(), eta, 300, &w0).unwrap();
        prop_assert!(traj.out_span_drift.iter().all(|d| *d <= 1e-10));
    }

    #[test]
    fn regularized_runs_contract(
        (x, w_star, zeta) in problem_parts(),
    ) {
        let lambda = 0.5;
        let p = RegressionProblem::new(x, w_star, zeta, lambda).unwrap();
        let fp = p.decomposition().from_spectral(&regularized_fixed_point(&p).unwrap()).unwrap();
        let eta = 1.0 / (p.decomposition().sigma_max().powi(2) + lambda);
        let w0 = vec![1.0; p.dim()];
        let traj = run(&p, PreconditionerState::new(PreconditionerConfig::new(Family::Identity), p.dim()).unwrap(), eta, 60, &w0).unwrap();
        let errs: Vec<f64> = traj.iterates.iter().map(|w| linalg::norm2(&linalg::sub(w, &fp))).collect();
        let q = errs.windows(2).filter(|p| p[0] > 1e-12).map(|p| p[1] / p[0]).fold(0.0, f64::max);
        prop_assert!(q < 1.0, "contraction factor {}", q);
    }

    #[test]
    fn exact_power_laws_are_recovered(alpha in 0.0..3.0f64, c in 0.1..10.0f64) {
        let series: Vec<f64> = (0..300).map(|t| c * (t.max(1) as f64).powf(-alpha)).collect();
        let est = estimate_decay(&series, None).unwrap();
        prop_assert!((est.exponent - alpha).abs() <= 1e-6);
        prop_assert!(est.log_log_r2 >= 1.0 - 1e-9);
    }

    #[test]
    fn bound_curve_stays_above_its_limit(
        a in 0.1..5.0f64, b in 0.1..5.0f64, alpha in 1.0..3.0f64, beta in 0.1..3.0f64, frac in 0.01..1.0f64,
    ) {
        let c = frac * (alpha + beta - 1.0);
        let p = BoundCurveParams::new(a, b, c, alpha, beta).unwrap();
        let samples: Vec<f64> = [0u64, 1, 10, 100, 1000, 100_000, 10_000_000].iter().map(|&t| bound_curve(&p, t)).collect();
        prop_assert!(samples.iter().all(|v| *v >= a));
        prop_assert!(samples.last().unwrap() - a <= samples[0] - a);
    }

    #[test]
    fn out_of_span_bound_shrinks_with_faster_decay(s1 in 1.01..3.0f64, gap in 0.01..2.0f64, c in 0.0..5.0f64) {
        let base = OutOfSpanBoundInputs {
            c_lambda: c, c_conv: 1.0, alpha: s1 / 2.0, beta: s1 / 2.0, eta: 0.1,
            d2_norm_at_0: 1.0, sigma_max_1: 2.0, w1_init_norm: 1.0,
        };
        let slower = out_of_span_bound(&base).unwrap();
        let faster = out_of_span_bound(&OutOfSpanBoundInputs { alpha: base.alpha + gap, ..base }).unwrap();
        prop_assert!(faster <= slower);
    }

    #[test]
    fn margin_rows_follow_the_construction(n in 3usize..20, seed in any::<u64>(), p in 0.1..0.9f64) {
        let spec = MarginClassificationSpec { n, level: 1.0 / 32.0, positive_prob: p, seed };
        let data = gen_margin_classification(&spec).unwrap();
        prop_assert_eq!(data.x.cols(), 6 * n);
        for i in 0..n {
            let row = data.x.row(i);
            let positive = data.y[i] > 0.0;
            prop_assert_eq!(row[0], data.y[i]);
            prop_assert!(row[1] == 1.0 && row[2] == 1.0);
            let start = 3 + 5 * i;
            let width = if positive { 1 } else { 5 };
            for (j, v) in row.iter().enumerate().skip(3) {
                let inside = (start..start + width).contains(&j);
                prop_assert_eq!(*v, if inside { 1.0 } else { 0.0 });
            }
        }
        prop_assert_eq!(gen_margin_classification(&spec).unwrap(), data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn small_level_gd_predicts_the_majority(seed in any::<u64>()) {
        let spec = MarginClassificationSpec { n: 30, level: 1.0 / 32.0, positive_prob: 7.0 / 8.0, seed };
        let data = gen_margin_classification(&spec).unwrap();
        let w = min_norm_solution(&data.x, &data.y).unwrap();
        let test = gen_margin_test_set(&spec, 2000).unwrap();
        let acc = evaluate_classifier(&w, &test, DecisionRule::FirstThreeFeatures, spec.level).unwrap();
        let positives = test.y.iter().filter(|y| **y > 0.0).count() as f64 / test.y.len() as f64;
        prop_assert!(acc <= positives.max(1.0 - positives) + 0.05);
    }
}
