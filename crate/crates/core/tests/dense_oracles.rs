//! Checks of the evaluator, composition, culling projections and
//! conditioning against straightforward dense linear algebra.

use nalgebra::{DMatrix, DVector};
use ndgauss::culling::{make_projection_set, project_components};
use ndgauss::gmm::{
    activate_cholesky, activate_color, compose_child, condition_gaussian, covariance_from_factor, packed_index, packed_len, sigmoid,
    AmpMode, ChildParams, Evaluator, GaussianParams, Mixture,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dense_factor(raw: &[f64], n: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let r = raw[packed_index(i, j)];
            l[(i, j)] = if i == j { r.exp() } else { 2.0 * sigmoid(r) - 1.0 };
        }
    }
    l
}

fn dense_density(l: &DMatrix<f64>, mean: &DVector<f64>, x: &[f64]) -> f64 {
    let cov = l * l.transpose();
    let inv = cov.try_inverse().expect("covariance is invertible");
    let d = DVector::from_column_slice(x) - mean;
    (-0.5 * (d.transpose() * inv * &d)[(0, 0)]).exp()
}

fn random_raw_factor(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut raw = vec![0.0; packed_len(n)];
    for i in 0..n {
        raw[packed_index(i, i)] = rng.random_range(-1.5..-0.3);
        for j in 0..i {
            raw[packed_index(i, j)] = rng.random_range(-0.6..0.6);
        }
    }
    raw
}

fn random_component(rng: &mut impl Rng, n: usize, with_child: bool) -> GaussianParams {
    GaussianParams {
        mean_raw: (0..n).map(|_| rng.random()).collect(),
        chol_raw: random_raw_factor(rng, n),
        color_raw: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        amp_raw: rng.random_range(-1.0..0.5),
        child: with_child.then(|| ChildParams {
            rel_mean_raw: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            rel_chol_raw: (0..packed_len(n)).map(|_| rng.random_range(-0.3..0.3)).collect(),
            color_raw: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            amp_raw: rng.random_range(-2.0..0.0),
        }),
        frozen: false,
    }
}

/// Independent mixture evaluator: explicit composition, explicit inverse.
fn dense_mixture(mix: &Mixture, x: &[f64]) -> [f64; 3] {
    let n = mix.n_dims;
    let amp = |raw: f64| match mix.amp_mode {
        AmpMode::Brightness => raw.exp(),
        AmpMode::Opacity => sigmoid(raw),
    };
    let mut out = [0.0; 3];
    let mut add = |l: &DMatrix<f64>, m: &DVector<f64>, a: f64, color: [f64; 3]| {
        let d = dense_density(l, m, x);
        for c in 0..3 {
            out[c] += a * color[c] * d;
        }
    };
    for g in &mix.components {
        let l = dense_factor(&g.chol_raw, n);
        let m = DVector::from_column_slice(&g.mean_raw);
        add(&l, &m, amp(g.amp_raw), g.color_raw.map(sigmoid));
        if let Some(ch) = &g.child {
            let u = dense_factor(&ch.rel_chol_raw, n);
            let mc = &l * DVector::from_column_slice(&ch.rel_mean_raw) + &m;
            add(&(&l * u), &mc, amp(ch.amp_raw), ch.color_raw.map(sigmoid));
        }
    }
    out
}

#[test]
fn mixture_matches_dense_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [AmpMode::Brightness, AmpMode::Opacity] {
        let comps = (0..5).map(|i| random_component(&mut rng, 4, i % 2 == 0)).collect();
        let mix = Mixture::with_components(4, mode, comps).unwrap();
        let ev = Evaluator::new(&mix).unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let got = ev.eval_all(&x);
            let want = dense_mixture(&mix, &x);
            for c in 0..3 {
                assert!((got[c] - want[c]).abs() <= 1e-12 * want[c].abs().max(1e-300), "{got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn colors_use_sigmoid() {
    assert_eq!(activate_color(&[0.0, 0.0, 0.0]), [0.5, 0.5, 0.5]);
}

#[test]
fn triangular_solve_matches_dense_inverse_up_to_twelve_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=12 {
        for _ in 0..20 {
            let g = random_component(&mut rng, n, false);
            let mix = Mixture::with_components(n, AmpMode::Brightness, vec![g.clone()]).unwrap();
            let ev = Evaluator::new(&mix).unwrap();
            let l = dense_factor(&g.chol_raw, n);
            let m = DVector::from_column_slice(&g.mean_raw);
            let x: Vec<f64> = g.mean_raw.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
            let got = ev.terms()[0].density(&x);
            let want = dense_density(&l, &m, &x);
            assert!((got - want).abs() <= 1e-10 * want, "N={n}: {got} vs {want}");
        }
    }
}

#[test]
fn composed_factor_is_a_valid_cholesky_factor() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let g = random_component(&mut rng, 3, true);
        let child = g.child.clone().unwrap();
        let (_, f) = compose_child(&g, &child).unwrap();
        let dense = dense_factor(&g.chol_raw, 3) * dense_factor(&child.rel_chol_raw, 3);
        for i in 0..3 {
            assert!(f.get(i, i) > 0.0);
            for j in 0..3 {
                let v = if j <= i { f.get(i, j) } else { 0.0 };
                assert!((v - dense[(i, j)]).abs() < 1e-14);
            }
        }
        let cov = &dense * dense.transpose();
        assert!((&cov - cov.transpose()).amax() < 1e-15);
        assert!(cov.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }
}

#[test]
fn covariance_is_symmetric_positive_definite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let raw = random_raw_factor(&mut rng, 8);
        let l = activate_cholesky(&raw, 8).unwrap();
        let v = DMatrix::from_row_slice(8, 8, &covariance_from_factor(&l));
        assert_eq!(v, v.transpose());
        assert!(v.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }
}

#[test]
fn projected_sigma_is_the_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let comps: Vec<GaussianParams> = (0..20).map(|_| random_component(&mut rng, 6, false)).collect();
    let mix = Mixture::with_components(6, AmpMode::Brightness, comps).unwrap();
    let ev = Evaluator::new(&mix).unwrap();
    let ps = make_projection_set(6, 8, 9).unwrap();
    let pb = project_components(&ev, &ps);
    for (t, g) in mix.components.iter().enumerate() {
        let l = dense_factor(&g.chol_raw, 6);
        let cov = &l * l.transpose();
        for p in 0..8 {
            let r = DVector::from_column_slice(ps.vector(p));
            let want = (r.transpose() * &cov * &r)[(0, 0)].sqrt();
            assert!((pb.sigma(t, p) - want).abs() < 1e-12 * want.max(1.0));
            let m = DVector::from_column_slice(&g.mean_raw);
            assert!((pb.mean(t, p) - r.dot(&m)).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_directions_look_uniform_on_the_sphere() {
    let mut dots = Vec::new();
    for seed in 0..323 {
        let ps = make_projection_set(10, 32, seed).unwrap();
        for i in 0..31 {
            let d: f64 = ps.vector(i).iter().zip(ps.vector(i + 1)).map(|(x, y)| x * y).sum();
            dots.push(d);
        }
    }
    assert!(dots.len() >= 10_000);
    let mean = dots.iter().sum::<f64>() / dots.len() as f64;
    let var = dots.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dots.len() as f64;
    assert!(mean.abs() < 0.02, "{mean}");
    // Independent uniform unit vectors in R^10 have dot-product variance 1/10.
    assert!((var - 0.1).abs() < 0.01, "{var}");
}

#[test]
fn two_dimensional_slice_matches_numerical_normalization() {
    // V = [[2,1],[1,1]]: L = [[√2, 0], [1/√2, 1/√2]].
    let s2 = 2f64.sqrt();
    let off = 1.0 / s2;
    let g = GaussianParams {
        mean_raw: vec![0.3, 0.6],
        chol_raw: vec![s2.ln(), ndgauss::gmm::logit((off + 1.0) / 2.0), off.ln()],
        color_raw: [0.0; 3],
        amp_raw: 0.0,
        child: None,
        frozen: false,
    };
    let cond = condition_gaussian(&g, &[1], &[1.6]).unwrap();
    assert!((cond.mean[0] - 1.3).abs() < 1e-12);
    assert!((cond.covariance[0] - 1.0).abs() < 1e-12);
    assert!((cond.weight - (-0.5f64).exp()).abs() < 1e-12);

    // Integrating the joint along the slice gives weight · √(2π σ²).
    let l = dense_factor(&g.chol_raw, 2);
    let m = DVector::from_column_slice(&g.mean_raw);
    let h = 1e-3;
    let integral: f64 = (-10_000..=10_000)
        .map(|i| dense_density(&l, &m, &[1.3 + i as f64 * h, 1.6]) * h)
        .sum();
    let expected = cond.weight * (2.0 * std::f64::consts::PI * cond.covariance[0]).sqrt();
    assert!((integral - expected).abs() < 1e-9, "{integral} vs {expected}");
}
