use fedsi::laplace::{
    assemble_ggn, assemble_ggn_diagonal, lambda_softmax, map_train, marginal_variances, predictive_classify,
    predictive_classify_batch, predictive_covariance, predictive_regress, select_subnetwork, subnet_posterior,
    subnet_posterior_diagonal, wasserstein_diag, GaussianPrior, SubnetworkMask, TrainOptions,
};
use fedsi::linalg::{sym_inverse, DenseMatrix};
use fedsi::model::{init_model, LayerLayout, Likelihood, LinearModel, RepresentationModel, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Minimum of `Σ_r v_r (1 - χ_S(r))` over all subsets of the given size,
/// returned as the lexicographically smallest minimizing index list.
fn exhaustive_best(v: &[f64], size: usize) -> Vec<usize> {
    let n = v.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != size {
            continue;
        }
        let chosen: Vec<usize> = (0..n).filter(|&i| bits >> i & 1 == 1).collect();
        let cost: f64 = (0..n).filter(|i| bits >> i & 1 == 0).map(|i| v[i]).sum();
        let better = match &best {
            None => true,
            Some((c, s)) => cost < *c || (cost == *c && chosen < *s),
        };
        if better {
            best = Some((cost, chosen));
        }
    }
    best.unwrap().1
}

proptest! {
    #[test]
    fn selection_is_the_exhaustive_minimizer(v in prop::collection::vec(0.0f64..1.0, 1..10), k in 0usize..10) {
        let size = k % (v.len() + 1);
        let mask = select_subnetwork(&v, size).unwrap();
        let best = exhaustive_best(&v, size);
        let cost = |s: &[usize]| (0..v.len()).filter(|i| !s.contains(i)).map(|i| v[i]).sum::<f64>();
        prop_assert_eq!(cost(mask.indices()), cost(&best));
        prop_assert_eq!(mask.indices(), &best[..]);
    }

    /// Squared 2-Wasserstein distance between N(μ, diag σ²) and the same
    /// Gaussian with the off-mask variances collapsed to zero, evaluated with
    /// the general trace formula tr(Σ₁ + Σ₂ - 2 (Σ₂^½ Σ₁ Σ₂^½)^½).
    #[test]
    fn w2_matches_trace_formula(v in prop::collection::vec(0.0f64..3.0, 1..12), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..v.len()).filter(|_| rng.random_bool(0.5)).collect();
        let mask = SubnetworkMask::new(idx, v.len()).unwrap();
        let collapsed: Vec<f64> = (0..v.len()).map(|r| if mask.contains(r) { v[r] } else { 0.0 }).collect();
        let trace: f64 = v.iter().zip(&collapsed).map(|(&a, &b)| a + b - 2.0 * (b.sqrt() * a * b.sqrt()).sqrt()).sum();
        prop_assert!((wasserstein_diag(&v, &mask) - trace).abs() < 1e-10);
    }
}

fn softmax_nll(f: &[f64], y: usize) -> f64 {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + f.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - f[y]
}

#[test]
fn lambda_is_the_logit_hessian() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let f: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l = lambda_softmax(&f);
        let h = 1e-4;
        for a in 0..4 {
            for b in 0..4 {
                let at = |da: f64, db: f64| {
                    let mut g = f.clone();
                    g[a] += da;
                    g[b] += db;
                    softmax_nll(&g, 1)
                };
                let fd = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
                assert!((fd - l[(a, b)]).abs() < 1e-6, "{fd} vs {}", l[(a, b)]);
            }
        }
    }
}

fn random_inputs(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn ggn_equals_explicit_sum() {
    let layout = LayerLayout::new(3, 5, 4).unwrap();
    let model = init_model::<f64>(layout, 8);
    let xs = random_inputs(7, 3, 1);
    let data: Vec<_> = xs.iter().enumerate().map(|(i, x)| Sample::class(x.as_slice(), i % 4)).collect();
    let total = layout.repr_len();
    let mask = SubnetworkMask::new(vec![0, 3, 4, 9, 11, 15, 17, 19], total).unwrap();
    let var: Vec<f64> = (0..total).map(|i| 0.1 + 0.01 * i as f64).collect();
    let prior = GaussianPrior::new(vec![0.0; total], var.clone()).unwrap();
    let lik = Likelihood::Categorical;
    let h = assemble_ggn(&model, &data, &mask, &prior, &lik).unwrap();

    let s = mask.len();
    let mut oracle = DenseMatrix::zeros(s, s);
    for x in &xs {
        let (f, j) = model.jacobian(x, &mask).unwrap();
        let jtl = j.transpose().matmul(&lambda_softmax(&f)).unwrap();
        oracle = oracle.add(&jtl.matmul(&j).unwrap()).unwrap();
    }
    for (k, &r) in mask.indices().iter().enumerate() {
        oracle[(k, k)] += 1.0 / var[r];
    }
    assert!(h.add(&oracle.scale(-1.0)).unwrap().max_abs() < 1e-12);
    assert_eq!(h.relative_asymmetry(), 0.0);
    let diag = assemble_ggn_diagonal(&model, &data, &mask, &prior, &lik).unwrap();
    for (a, b) in diag.iter().zip(h.diagonal()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ggn_of_linear_gaussian_is_ridge_hessian() {
    let d = 4;
    let xs = random_inputs(25, d, 3);
    let ys: Vec<[f64; 1]> = (0..xs.len()).map(|i| [i as f64 * 0.1]).collect();
    let data: Vec<_> = xs.iter().zip(&ys).map(|(x, y)| Sample::value(x.as_slice(), &y[..])).collect();
    let model = LinearModel::new(d, 1, vec![0.3; d]).unwrap();
    let g = [0.5, 1.0, 2.0, 4.0];
    let prior = GaussianPrior::new(vec![0.0; d], g.to_vec()).unwrap();
    let h = assemble_ggn(&model, &data, &SubnetworkMask::full(d), &prior, &Likelihood::Gaussian { variance: 1.0 }).unwrap();
    let mut ridge = DenseMatrix::from_diag(&g.map(|v| 1.0 / v));
    for x in &xs {
        for a in 0..d {
            for b in 0..d {
                ridge[(a, b)] += x[a] * x[b];
            }
        }
    }
    assert!(h.add(&ridge.scale(-1.0)).unwrap().max_abs() < 1e-10);
}

#[test]
fn map_training_reaches_the_ridge_solution() {
    let d = 3;
    let xs = random_inputs(40, d, 9);
    let w_true = [1.0, -2.0, 0.5];
    let ys: Vec<[f64; 1]> = xs.iter().map(|x| [x.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() + 0.1]).collect();
    let data: Vec<_> = xs.iter().zip(&ys).map(|(x, y)| Sample::value(x.as_slice(), &y[..])).collect();
    let mean = vec![0.2, 0.0, -0.1];
    let g = 0.05;
    let prior = GaussianPrior::isotropic(mean.clone(), g).unwrap();
    let noise = 0.5;
    let mut model = LinearModel::new(d, 1, mean.clone()).unwrap();
    map_train(&mut model, &data, &prior, &Likelihood::Gaussian { variance: noise }, &TrainOptions::new(4000, 40, 1e-2, 0)).unwrap();

    // (XᵀX/v + I/g) θ = Xᵀy/v + m/g
    let mut a = DenseMatrix::from_diag(&[1.0 / g; 3]);
    let mut rhs: Vec<f64> = mean.iter().map(|m| m / g).collect();
    for (x, y) in xs.iter().zip(&ys) {
        for i in 0..d {
            rhs[i] += x[i] * y[0] / noise;
            for j in 0..d {
                a[(i, j)] += x[i] * x[j] / noise;
            }
        }
    }
    let inv = sym_inverse(&a).unwrap();
    for i in 0..d {
        let expected: f64 = (0..d).map(|j| inv[(i, j)] * rhs[j]).sum();
        assert!((model.theta[i] - expected).abs() < 1e-4, "{} vs {expected}", model.theta[i]);
    }
}

fn toy_posterior(layout: LayerLayout, seed: u64) -> (fedsi::model::ClientModel<f64>, fedsi::laplace::SubnetPosterior<f64>, Vec<Vec<f64>>) {
    let model = init_model::<f64>(layout, seed);
    let xs = random_inputs(6, layout.input_dim, seed + 1);
    let data: Vec<_> = xs.iter().enumerate().map(|(i, x)| Sample::class(x.as_slice(), i % layout.output_dim)).collect();
    let total = layout.repr_len();
    let mask = select_subnetwork(&(0..total).map(|i| ((i * 37) % 11) as f64 + 1.0).collect::<Vec<_>>(), total / 2).unwrap();
    let prior = GaussianPrior::isotropic(model.theta.clone(), 0.5).unwrap();
    let h = assemble_ggn(&model, &data, &mask, &prior, &Likelihood::Categorical).unwrap();
    let post = subnet_posterior(&model.theta, &mask, &h).unwrap();
    (model, post, random_inputs(30, layout.input_dim, seed + 2))
}

#[test]
fn predictive_covariance_matches_dense_inverse() {
    let layout = LayerLayout::new(4, 6, 3).unwrap();
    let (model, post, xs) = toy_posterior(layout, 11);
    let cov = post.covariance();
    for x in &xs {
        let (_, sigma) = predictive_covariance(&model, x, &post).unwrap();
        let (_, j) = model.jacobian(x, &post.mask).unwrap();
        let oracle = j.matmul(&cov).unwrap().matmul(&j.transpose()).unwrap();
        assert!(sigma.add(&oracle.scale(-1.0)).unwrap().max_abs() < 1e-10);
    }
    let mv = marginal_variances(&post);
    for (k, &r) in post.mask.indices().iter().enumerate() {
        assert!((mv[r] - cov[(k, k)]).abs() < 1e-12);
    }
}

#[test]
fn batched_predictions_equal_single_predictions() {
    let layout = LayerLayout::new(4, 6, 3).unwrap();
    let (model, post, xs) = toy_posterior(layout, 12);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let batch = predictive_classify_batch(&model, &refs, &post).unwrap();
    for (x, b) in xs.iter().zip(&batch) {
        let single = predictive_classify(&model, x, &post).unwrap();
        for (p, q) in single.iter().zip(b) {
            assert!((p - q).abs() < 1e-14);
        }
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn diagonal_posterior_predictions() {
    let layout = LayerLayout::new(3, 4, 2).unwrap();
    let model = init_model::<f64>(layout, 2);
    let mask = SubnetworkMask::new(vec![1, 5, 13], layout.repr_len()).unwrap();
    let post = subnet_posterior_diagonal(&model.theta, &mask, vec![2.0, 4.0, 8.0]).unwrap();
    let full = subnet_posterior(&model.theta, &mask, &DenseMatrix::from_diag(&[2.0, 4.0, 8.0])).unwrap();
    let x = [0.3, -0.2, 0.9];
    let (_, a) = predictive_covariance(&model, &x, &post).unwrap();
    let (_, b) = predictive_covariance(&model, &x, &full).unwrap();
    assert!(a.add(&b.scale(-1.0)).unwrap().max_abs() < 1e-14);
}

/// Monte Carlo oracle: sample θ_S from the posterior and push it through the
/// linear model; the empirical output variance plus noise must match the
/// closed form.
#[test]
fn regression_variance_matches_monte_carlo() {
    let d = 3;
    let model = LinearModel::new(d, 1, vec![0.5, -0.3, 0.2]).unwrap();
    let cov_prec = DenseMatrix::from_rows(&[vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 0.5], vec![0.0, 0.5, 2.0]]);
    let mask = SubnetworkMask::full(d);
    let post = subnet_posterior(&model.theta, &mask, &cov_prec).unwrap();
    let x = [1.0, -2.0, 0.5];
    let noise = 0.3;
    let (mean, var) = predictive_regress(&model, &x, &post, noise).unwrap();

    let cov = post.covariance();
    let chol = fedsi::linalg::cholesky(&cov).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let theta: Vec<f64> = (0..d).map(|i| model.theta[i] + (0..=i).map(|j| chol.lower()[(i, j)] * z[j]).sum::<f64>()).collect();
        let f: f64 = theta.iter().zip(&x).map(|(a, b)| a * b).sum();
        s1 += f;
        s2 += f * f;
    }
    let m = s1 / n as f64;
    let v = s2 / n as f64 - m * m + noise;
    assert!((m - mean).abs() < 0.02);
    assert!((v - var).abs() / var < 0.02, "{v} vs {var}");
}
