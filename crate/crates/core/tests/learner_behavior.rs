//! Cross-method behavioral contracts: forgetting patterns, the prior chain,
//! the coreset-only/VCL decomposition, Fisher estimation, determinism.

use cleval_core::data::{build_split_stream, default_split_pairs, synth_blobs_split, HeadMode, TaskStream};
use cleval_core::learners::{
    BatchRule, EvalView, EwcConfig, EwcLearner, Learner, NaiveConfig, NaiveLearner, PriorSource,
    VclConfig, VclLearner,
};
use cleval_core::metrics::accuracy_top1;
use cleval_core::models::{Activation, MlpConfig};
use cleval_core::tensor::OptimizerConfig;

const D: usize = 16;
const K: usize = 6;

fn stream(head_mode: HeadMode, seed: u64) -> TaskStream {
    let (train, test) = synth_blobs_split(K, D, 60, 25, 0.08, seed).unwrap();
    build_split_stream(&train, &test, &default_split_pairs(K), head_mode).unwrap()
}

fn arch(head_mode: HeadMode, heads: usize) -> MlpConfig {
    let out = if head_mode == HeadMode::Multi { 2 } else { K };
    MlpConfig::new(vec![D, 32, out], Activation::Relu, head_mode, heads).unwrap()
}

fn vcl_cfg(coreset: usize, prior_source: PriorSource) -> VclConfig {
    VclConfig {
        epochs: 10,
        batch: BatchRule::Fixed(32),
        optimizer: OptimizerConfig::adam(1e-3),
        prior_weight: 1.0,
        init_var: 1e-6,
        ml_init_epochs: 10,
        train_mc_samples: 1,
        eval_mc_samples: 20,
        coreset_size: coreset,
        coreset_epochs: 10,
        prior_source,
    }
}

fn task_accuracy(learner: &dyn Learner, stream: &TaskStream, task_idx: usize, seed: u64) -> f64 {
    let task = &stream.tasks[task_idx];
    let probs = learner.predict(task.test.inputs(), EvalView::Single, seed).unwrap();
    accuracy_top1(&probs, task.test.labels()).unwrap()
}

#[test]
fn naive_learns_one_task_then_forgets_single_head() {
    let stream = stream(HeadMode::Single, 41);
    let cfg = NaiveConfig { epochs: 12, batch: BatchRule::Fixed(32), optimizer: OptimizerConfig::adam(1e-3) };
    let mut learner = NaiveLearner::new(arch(HeadMode::Single, 1), cfg, None, K);
    learner.train_task(&stream.tasks[0], 7, None).unwrap();
    let first = task_accuracy(&learner, &stream, 0, 1);
    assert!(first > 0.9, "single supervised task accuracy {first}");

    for t in &stream.tasks[1..] {
        learner.train_task(t, 7, None).unwrap();
    }
    let old = task_accuracy(&learner, &stream, 0, 1);
    assert!(old < 0.05, "task-1 accuracy after the last task should collapse, got {old}");
}

#[test]
fn naive_training_is_deterministic() {
    let stream = stream(HeadMode::Single, 42);
    let cfg = NaiveConfig { epochs: 6, batch: BatchRule::Fixed(32), optimizer: OptimizerConfig::adam(1e-3) };
    let mut a = NaiveLearner::new(arch(HeadMode::Single, 1), cfg.clone(), None, K);
    let mut b = NaiveLearner::new(arch(HeadMode::Single, 1), cfg, None, K);
    for t in &stream.tasks[..2] {
        a.train_task(t, 13, None).unwrap();
        b.train_task(t, 13, None).unwrap();
    }
    let x = stream.tasks[0].test.inputs();
    let pa = a.predict(x, EvalView::Single, 0).unwrap();
    let pb = b.predict(x, EvalView::Single, 0).unwrap();
    assert!(pa.data().iter().zip(pb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn vcl_posterior_after_task_t_is_prior_of_task_t_plus_one() {
    let stream = stream(HeadMode::Single, 43);
    let mut learner = VclLearner::new(arch(HeadMode::Single, 1), vcl_cfg(0, PriorSource::PreviousPosterior), None, K);
    for t in &stream.tasks[..3] {
        learner.train_task(t, 5, None).unwrap();
        let posterior = learner.posterior().unwrap();
        let prior = learner.chained_prior();
        assert_eq!(posterior.layers.len(), prior.layers.len());
        for (a, b) in posterior.layers.iter().zip(&prior.layers) {
            assert_eq!(a.name, b.name);
            assert!(a.mean.iter().zip(&b.mean).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.log_var.iter().zip(&b.log_var).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn coreset_only_equals_vcl_coreset_on_first_task() {
    // Before any posterior exists the chain prior IS the initial prior, so
    // the two methods coincide bit-exactly after one task.
    let stream = stream(HeadMode::Single, 44);
    let mut hybrid = VclLearner::new(arch(HeadMode::Single, 1), vcl_cfg(20, PriorSource::PreviousPosterior), None, K);
    let mut ablation = VclLearner::new(arch(HeadMode::Single, 1), vcl_cfg(20, PriorSource::InitialPrior), None, K);
    hybrid.train_task(&stream.tasks[0], 9, None).unwrap();
    ablation.train_task(&stream.tasks[0], 9, None).unwrap();
    let (pa, pb) = (hybrid.posterior().unwrap(), ablation.posterior().unwrap());
    for (a, b) in pa.layers.iter().zip(&pb.layers) {
        assert!(a.mean.iter().zip(&b.mean).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let x = stream.tasks[0].test.inputs();
    let qa = hybrid.predict(x, EvalView::Single, 3).unwrap();
    let qb = ablation.predict(x, EvalView::Single, 3).unwrap();
    assert!(qa.data().iter().zip(qb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn zero_prior_weight_vcl_tracks_naive_accuracy() {
    // Both sides trained to saturation so the comparison reflects the
    // degenerate prior weight, not the budget split across init and training.
    let stream = stream(HeadMode::Single, 45);
    let mut cfg = vcl_cfg(0, PriorSource::PreviousPosterior);
    cfg.prior_weight = 0.0;
    cfg.epochs = 20;
    cfg.ml_init_epochs = 20;
    let mut vcl = VclLearner::new(arch(HeadMode::Single, 1), cfg, None, K);
    vcl.train_task(&stream.tasks[0], 11, None).unwrap();
    let bnn_acc = task_accuracy(&vcl, &stream, 0, 2);

    let naive_cfg = NaiveConfig { epochs: 40, batch: BatchRule::Fixed(32), optimizer: OptimizerConfig::adam(1e-3) };
    let mut naive = NaiveLearner::new(arch(HeadMode::Single, 1), naive_cfg, None, K);
    naive.train_task(&stream.tasks[0], 11, None).unwrap();
    let ml_acc = task_accuracy(&naive, &stream, 0, 2);

    assert!((bnn_acc - ml_acc).abs() <= 0.02, "bnn {bnn_acc} vs ml {ml_acc}");
}

#[test]
fn masked_single_training_equals_single_training_bitwise() {
    // Masking is evaluation-only; the trained posteriors must match bit for
    // bit between the two modes under equal seeds.
    let single = stream(HeadMode::Single, 46);
    let masked = stream(HeadMode::MaskedSingle, 46);
    let mut a = VclLearner::new(arch(HeadMode::Single, 1), vcl_cfg(0, PriorSource::PreviousPosterior), None, K);
    let mut b = VclLearner::new(arch(HeadMode::MaskedSingle, 1), vcl_cfg(0, PriorSource::PreviousPosterior), None, K);
    for (ta, tb) in single.tasks.iter().zip(&masked.tasks).take(2) {
        a.train_task(ta, 21, None).unwrap();
        b.train_task(tb, 21, None).unwrap();
    }
    let (pa, pb) = (a.posterior().unwrap(), b.posterior().unwrap());
    for (la, lb) in pa.layers.iter().zip(&pb.layers) {
        assert!(la.mean.iter().zip(&lb.mean).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(la.log_var.iter().zip(&lb.log_var).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // At evaluation they differ only in the argmax restriction.
    let t0 = &masked.tasks[0];
    let raw = a.predict(t0.test.inputs(), EvalView::Single, 5).unwrap();
    let m = b.predict(t0.test.inputs(), EvalView::Masked { class_set: &t0.class_set }, 5).unwrap();
    for i in 0..t0.test.len() {
        for c in 0..K {
            let masked_v = m.data()[i * K + c];
            if t0.class_set.contains(&c) {
                assert_eq!(masked_v.to_bits(), raw.data()[i * K + c].to_bits());
            } else {
                assert_eq!(masked_v, 0.0);
            }
        }
    }
}

#[test]
fn ewc_first_task_is_pure_nll_and_matches_naive_closely() {
    let stream = stream(HeadMode::Single, 47);
    let ewc_cfg = EwcConfig {
        epochs: 20,
        batch: BatchRule::Fixed(32),
        learning_rate: 1e-2,
        lambda: 10.0,
        fisher_samples: 40,
    };
    let mut ewc = EwcLearner::new(arch(HeadMode::Single, 1), ewc_cfg, None, K).unwrap();
    assert!(ewc.fisher().is_empty());
    ewc.train_task(&stream.tasks[0], 19, None).unwrap();
    let e = task_accuracy(&ewc, &stream, 0, 3);

    let naive_cfg = NaiveConfig { epochs: 20, batch: BatchRule::Fixed(32), optimizer: OptimizerConfig::sgd(1e-2) };
    let mut naive = NaiveLearner::new(arch(HeadMode::Single, 1), naive_cfg, None, K);
    naive.train_task(&stream.tasks[0], 19, None).unwrap();
    let n = task_accuracy(&naive, &stream, 0, 3);
    assert!((e - n).abs() <= 0.05, "ewc {e} vs naive {n}");
}

#[test]
fn ewc_fisher_matches_finite_difference_enumeration() {
    // With fisher_samples >= n every training point is enumerated, so the
    // estimate must equal the mean squared log-likelihood gradient computed
    // by central differences at the trained weights.
    let (train, test) = synth_blobs_split(2, 4, 12, 4, 0.1, 50).unwrap();
    let stream = build_split_stream(&train, &test, &[vec![0, 1]], HeadMode::Single).unwrap();
    let cfg = EwcConfig {
        epochs: 6,
        batch: BatchRule::Full,
        learning_rate: 1e-2,
        lambda: 10.0,
        fisher_samples: 1000,
    };
    let archi = MlpConfig::new(vec![4, 3, 2], Activation::Relu, HeadMode::Single, 1).unwrap();
    let mut ewc = EwcLearner::new(archi, cfg, None, 2).unwrap();
    ewc.train_task(&stream.tasks[0], 23, None).unwrap();

    let mlp = ewc.mlp().unwrap();
    let task = &stream.tasks[0];
    let h = 1e-5;
    let log_p = |m: &cleval_core::models::Mlp, row: usize| -> f64 {
        let x = task.train.inputs().select_rows(&[row]).unwrap();
        let logits = m.logits(&x, None).unwrap();
        let r = logits.row(0);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        r[task.train.labels()[row]] - lse
    };
    for (name, fisher, _) in ewc.fisher().entries() {
        let id = mlp.params.ids().find(|&i| mlp.params.name(i) == name).unwrap();
        for e in 0..fisher.len() {
            let mut acc = 0.0;
            for row in 0..task.train.len() {
                let mut plus = mlp.clone();
                plus.params.value_mut(id).data_mut()[e] += h;
                let mut minus = mlp.clone();
                minus.params.value_mut(id).data_mut()[e] -= h;
                let gfd = (log_p(&plus, row) - log_p(&minus, row)) / (2.0 * h);
                acc += gfd * gfd;
            }
            let fd = acc / task.train.len() as f64;
            let got = fisher.data()[e];
            assert!(
                (got - fd).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "{name}[{e}]: analytic {got} vs finite-difference {fd}"
            );
        }
    }
}

#[test]
fn ewc_fisher_sums_never_decrease_across_tasks() {
    let stream = stream(HeadMode::Single, 51);
    let cfg = EwcConfig {
        epochs: 5,
        batch: BatchRule::Fixed(32),
        learning_rate: 1e-2,
        lambda: 10.0,
        fisher_samples: 30,
    };
    let mut ewc = EwcLearner::new(arch(HeadMode::Single, 1), cfg, None, K).unwrap();
    let mut prev: Vec<(String, Vec<f64>)> = Vec::new();
    for t in &stream.tasks {
        ewc.train_task(t, 29, None).unwrap();
        for (name, fisher, _) in ewc.fisher().entries() {
            if let Some((_, old)) = prev.iter().find(|(n, _)| n == name) {
                for (new_v, old_v) in fisher.data().iter().zip(old) {
                    assert!(new_v >= old_v, "{name}: {new_v} < {old_v}");
                }
            }
        }
        prev = ewc
            .fisher()
            .entries()
            .iter()
            .map(|(n, f, _)| (n.clone(), f.data().to_vec()))
            .collect();
    }
}

#[test]
fn vcl_config_diff_between_hybrid_and_ablation_is_one_field() {
    let hybrid = vcl_cfg(20, PriorSource::PreviousPosterior);
    let ablation = vcl_cfg(20, PriorSource::InitialPrior);
    let a = serde_json::to_value(&hybrid).unwrap();
    let b = serde_json::to_value(&ablation).unwrap();
    let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
    let differing: Vec<&String> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k).collect();
    assert_eq!(differing, vec!["prior_source"]);
}
