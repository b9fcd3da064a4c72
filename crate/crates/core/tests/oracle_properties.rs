//! Independent-oracle checks: brute-force k-center, Monte-Carlo KL,
//! quadrature mutual information, threshold-sweep ROC.

use cleval_core::coreset::k_center_select;
use cleval_core::metrics::{mi_from_prob_draws, mutual_information, predictive_entropy, seen_unseen_auc};
use cleval_core::models::{kl_diag_gaussian, Activation, BayesMlp, GaussianPosterior, MlpConfig, PosteriorLayer};
use cleval_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn covering_radius(points: &[Vec<f64>], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| dist(p, &points[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Greedy farthest-first is a 2-approximation of the optimal k-center
    /// radius; verified against exhaustive enumeration of all center pairs.
    #[test]
    fn k_center_greedy_within_twice_optimal(
        points in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 2..=8),
        seed in 0u64..1000,
    ) {
        let n = points.len();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let t = Tensor::new(vec![n, 2], flat).unwrap();
        let greedy = k_center_select(&t, 2, seed).unwrap();
        let greedy_radius = covering_radius(&points, &greedy);

        let mut optimal = f64::INFINITY;
        for a in 0..n {
            for b in a..n {
                optimal = optimal.min(covering_radius(&points, &[a, b]));
            }
        }
        prop_assert!(greedy_radius <= 2.0 * optimal + 1e-9,
            "greedy {greedy_radius} vs optimal {optimal}");
    }

    /// Rank AUC equals the trapezoid area of the exhaustive threshold-sweep ROC.
    #[test]
    fn auc_matches_threshold_sweep_oracle(
        values in prop::collection::vec(0.0f64..1.0, 4..24),
        flags in prop::collection::vec(any::<bool>(), 4..24),
    ) {
        let n = values.len().min(flags.len());
        let values = &values[..n];
        let flags = &flags[..n];
        let n_pos = flags.iter().filter(|s| !**s).count();
        let n_neg = n - n_pos;
        prop_assume!(n_pos > 0 && n_neg > 0);

        let auc = seen_unseen_auc(values, flags).unwrap();

        // Oracle: sweep every distinct threshold, collect (FPR, TPR), trapezoid.
        let mut thresholds: Vec<f64> = values.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut curve = vec![(0.0f64, 0.0f64)];
        for th in thresholds {
            let tp = values.iter().zip(flags).filter(|(v, s)| !**s && **v >= th).count();
            let fp = values.iter().zip(flags).filter(|(v, s)| **s && **v >= th).count();
            curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
        curve.push((1.0, 1.0));
        let mut area = 0.0;
        for w in curve.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            area += (x1 - x0) * (y0 + y1) / 2.0;
        }
        prop_assert!((auc - area).abs() < 1e-12, "rank {auc} vs sweep {area}");
    }
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    // Single parameter, mu_q=1, mu_p=0, sigma_q=sigma_p=1: closed form gives
    // exactly 0.5; the independent oracle estimates E_q[ln q - ln p].
    let single = |mean: f64, var: f64, name: &str| GaussianPosterior {
        layers: vec![PosteriorLayer {
            name: name.into(),
            shape: vec![1],
            mean: vec![mean],
            log_var: vec![var.ln()],
        }],
    };
    let q = single(1.0, 1.0, "w");
    let p = single(0.0, 1.0, "w");
    let closed = kl_diag_gaussian(&q, &p).unwrap();
    assert!((closed - 0.5).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let samples = 1_000_000;
    let (mq, sq) = (1.0, 1.0);
    let (mp, sp) = (0.0, 1.0);
    let mut acc = 0.0;
    for _ in 0..samples {
        let w: f64 = mq + sq * rng.sample::<f64, _>(StandardNormal);
        let ln_q = -0.5 * ((w - mq) / sq).powi(2) - (sq as f64).ln();
        let ln_p = -0.5 * ((w - mp) / sp).powi(2) - (sp as f64).ln();
        acc += ln_q - ln_p;
    }
    let mc = acc / samples as f64;
    assert!((closed - mc).abs() < 5e-3, "closed {closed} vs mc {mc}");

    // A second, non-trivial pair.
    let q = single(-0.3, 0.4, "w");
    let p = single(0.9, 2.5, "w");
    let closed = kl_diag_gaussian(&q, &p).unwrap();
    let (mq, sq) = (-0.3, 0.4f64.sqrt());
    let (mp, sp) = (0.9, 2.5f64.sqrt());
    let mut acc = 0.0;
    for _ in 0..samples {
        let w: f64 = mq + sq * rng.sample::<f64, _>(StandardNormal);
        let ln_q = -0.5 * ((w - mq) / sq).powi(2) - sq.ln();
        let ln_p = -0.5 * ((w - mp) / sp).powi(2) - sp.ln();
        acc += ln_q - ln_p;
    }
    let mc = acc / samples as f64;
    assert!((closed - mc).abs() < 5e-3, "closed {closed} vs mc {mc}");
}

#[test]
fn mutual_information_matches_quadrature_oracle() {
    // One-parameter two-class model: p(y=1 | w) = sigmoid(w * x0) with
    // w ~ N(mu, sigma^2). The oracle integrates over the weight density.
    let x0 = 1.5;
    let (mu, sigma) = (0.4, 0.9);
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let binary_entropy = |p: f64| {
        let mut h = 0.0;
        if p > 0.0 {
            h -= p * p.ln();
        }
        if p < 1.0 {
            h -= (1.0 - p) * (1.0 - p).ln();
        }
        h
    };

    // Simpson quadrature over mu +/- 10 sigma.
    let nodes = 4001;
    let lo = mu - 10.0 * sigma;
    let hi = mu + 10.0 * sigma;
    let h = (hi - lo) / (nodes - 1) as f64;
    let (mut mean_p, mut mean_h, mut norm) = (0.0, 0.0, 0.0);
    for i in 0..nodes {
        let w = lo + i as f64 * h;
        let weight = if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let density = (-0.5 * ((w - mu) / sigma).powi(2)).exp();
        let p = sigmoid(w * x0);
        mean_p += weight * density * p;
        mean_h += weight * density * binary_entropy(p);
        norm += weight * density;
    }
    mean_p /= norm;
    mean_h /= norm;
    let mi_quadrature = binary_entropy(mean_p) - mean_h;

    // Monte-Carlo estimate through the library path.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let s = 40_000;
    let draws: Vec<Tensor> = (0..s)
        .map(|_| {
            let w: f64 = mu + sigma * rng.sample::<f64, _>(StandardNormal);
            let p = sigmoid(w * x0);
            Tensor::new(vec![1, 2], vec![p, 1.0 - p]).unwrap()
        })
        .collect();
    let mi_mc = mi_from_prob_draws(&draws).unwrap();
    assert!(
        (mi_mc - mi_quadrature).abs() < 0.01,
        "mc {mi_mc} vs quadrature {mi_quadrature}"
    );
}

#[test]
fn mi_of_collapsed_posterior_is_negligible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MlpConfig::single_head(vec![6, 8, 3], Activation::Relu).unwrap();
    let model = BayesMlp::init(cfg, 1e-14, &mut rng).unwrap();
    let x = Tensor::new(vec![4, 6], (0..24).map(|i| i as f64 / 24.0).collect()).unwrap();
    let mi = mutual_information(&model, &x, None, 30, 3).unwrap();
    assert!(mi < 1e-6, "collapsed-posterior MI {mi}");
}

#[test]
fn mi_bounded_by_entropy_of_mean_on_random_posteriors() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MlpConfig::single_head(vec![5, 7, 4], Activation::Relu).unwrap();
        let init_var = rng.random_range(0.01..1.5);
        let model = BayesMlp::init(cfg, init_var, &mut rng).unwrap();
        let x = Tensor::new(vec![3, 5], (0..15).map(|i| (i as f64 * 0.61) % 1.0).collect()).unwrap();
        let s = 25;
        let draws = model.prob_draws(&x, None, s, seed).unwrap();
        let mi = mi_from_prob_draws(&draws).unwrap();
        let mean = model.predict_probs(&x, None, s, seed).unwrap();
        let h = predictive_entropy(&mean).unwrap();
        assert!(mi >= 0.0);
        assert!(mi <= h + 1e-12, "seed {seed}: mi {mi} vs H(mean) {h}");
    }
}
