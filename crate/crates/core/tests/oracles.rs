//! Library results checked against independent loop implementations and
//! closed-form expectations.

use xmadapter_core::adapter::{self, HyperParams, PhiOrder};
use xmadapter_core::cache::{build_cache, ProjectionNet};
use xmadapter_core::dataset::{generate_synthetic, sample_few_shot, EmbeddingBundle, SyntheticConfig};
use xmadapter_core::eval::{self, EvalSplit};
use xmadapter_core::training::{train, AdapterParams, TrainOptions};
use xmadapter_core::Matrix;

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn norm(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    dot(&norm(a), &norm(b)).clamp(-1.0, 1.0)
}

fn project(net: &ProjectionNet, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in net.layers().enumerate() {
        let w = &layer.weight;
        let mut out: Vec<f64> = (0..w.cols()).map(|j| layer.bias[j] + (0..w.rows()).map(|k| h[k] * w.get(k, j)).sum::<f64>()).collect();
        if net.hidden.is_some() && i == 0 {
            out.iter_mut().for_each(|v| *v = v.tanh());
        }
        h = out;
    }
    h
}

/// Blended logits by direct summation over cache entries.
fn scratch_logits(b: &EmbeddingBundle, labels: &[usize], p: &AdapterParams, h: &HyperParams, queries: &Matrix) -> Vec<Vec<f64>> {
    let keys = rows(&p.cache_keys);
    let gamma = p.gamma(h);
    let class_text: Vec<Vec<f64>> = rows(&b.text_features).iter().map(|t| project(&p.meta_net, t)).collect();
    rows(queries)
        .iter()
        .map(|q| {
            let q = norm(q);
            let qt = project(&p.img2txt, &q);
            let fused: Vec<f64> = keys
                .iter()
                .zip(labels)
                .map(|(k, &l)| gamma * cos(&q, k) + (1.0 - gamma) * cos(&qt, &class_text[l]))
                .collect();
            (0..b.num_classes)
                .map(|c| {
                    let cache = match h.phi_order {
                        PhiOrder::PostAggregate => {
                            let s: f64 = fused.iter().zip(labels).filter(|(_, &l)| l == c).map(|(a, _)| a).sum();
                            (-h.beta * (1.0 - s)).exp()
                        }
                        PhiOrder::PreAggregate => fused
                            .iter()
                            .zip(labels)
                            .filter(|(_, &l)| l == c)
                            .map(|(a, _)| (-h.beta * (1.0 - a)).exp())
                            .sum(),
                    };
                    let zs: f64 = (0..b.feature_dim).map(|i| q[i] * b.zeroshot_weights.get(i, c)).sum();
                    h.alpha * cache + zs
                })
                .collect()
        })
        .collect()
}

fn assert_close(lib: &Matrix, oracle: &[Vec<f64>], rel: f64) {
    for (i, row) in oracle.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let l = lib.get(i, j);
            assert!((l - o).abs() <= rel * o.abs().max(1.0), "({i},{j}): {l} vs {o}");
        }
    }
}

fn small() -> (EmbeddingBundle, xmadapter_core::FewShotSplit) {
    let b = generate_synthetic(&SyntheticConfig {
        num_classes: 5,
        shots: 6,
        feature_dim: 12,
        test_per_class: 8,
        class_separation: 1.2,
        modality_noise: 0.4,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let s = sample_few_shot(&b, 4, 5).unwrap();
    (b, s)
}

#[test]
fn forward_matches_scratch_pipeline_for_every_variant() {
    let (b, s) = small();
    for (order, gamma, learn, hidden) in [
        (PhiOrder::PostAggregate, 0.7, false, None),
        (PhiOrder::PreAggregate, 0.3, true, None),
        (PhiOrder::PostAggregate, 0.5, false, Some(6)),
        (PhiOrder::PostAggregate, 1.0, false, None),
        (PhiOrder::PreAggregate, 0.0, false, None),
    ] {
        let h = HyperParams {
            gamma,
            d: 5,
            learn_gamma: learn,
            phi_order: order,
            ..Default::default()
        };
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 8,
            hidden_dim: hidden,
            ..Default::default()
        };
        let out = train(&b, &s, &h, &opts).unwrap();
        let lib = adapter::logits(&b, &out.cache, &out.params, &h, &b.test_features).unwrap();
        let oracle = scratch_logits(&b, &out.cache.entry_labels, &out.params, &h, &b.test_features);
        assert_close(&lib.blended, &oracle, 1e-10);
    }
}

#[test]
fn small_beta_reduces_to_class_mass_plus_zeroshot() {
    let (b, s) = small();
    let cache = build_cache(&b, &s).unwrap();
    let zs = eval::zeroshot_accuracy(&b).unwrap();
    for order in [PhiOrder::PostAggregate, PhiOrder::PreAggregate] {
        let h = HyperParams {
            beta: 1e-12,
            d: 5,
            phi_order: order,
            ..Default::default()
        };
        let p = AdapterParams::init(&b, &cache, &h, None, 0.02, 3);
        // post: exp(0) = 1 per class; pre: one per entry, i.e. the class mass K
        let mass = match order {
            PhiOrder::PostAggregate => 1.0,
            PhiOrder::PreAggregate => s.shots as f64,
        };
        let lib = adapter::logits(&b, &cache, &p, &h, &b.test_features).unwrap();
        for i in 0..b.num_test() {
            for j in 0..b.num_classes {
                let expected = h.alpha * mass + lib.zeroshot_logits.get(i, j);
                assert!((lib.blended.get(i, j) - expected).abs() < 1e-9);
            }
        }
        // balanced cache: the constant cannot change the argmax
        assert_eq!(eval::evaluate(&b, &cache, &p, &h, EvalSplit::Test).unwrap(), zs);
    }
}

#[test]
fn zeroshot_matches_brute_force_nearest_centroid() {
    for sep in [0.5, 0.75, 1.0, 2.0] {
        for seed in 0..3 {
            let b = generate_synthetic(&SyntheticConfig {
                class_separation: sep,
                seed,
                ..Default::default()
            })
            .unwrap();
            let centroids: Vec<Vec<f64>> = (0..b.num_classes).map(|j| (0..b.feature_dim).map(|i| b.zeroshot_weights.get(i, j)).collect()).collect();
            let hits = rows(&b.test_features)
                .iter()
                .zip(&b.test_labels)
                .filter(|(q, &l)| {
                    let best = (0..b.num_classes)
                        .max_by(|&x, &y| cos(q, &centroids[x]).partial_cmp(&cos(q, &centroids[y])).unwrap().then(y.cmp(&x)))
                        .unwrap();
                    best == l
                })
                .count();
            let oracle = hits as f64 / b.num_test() as f64;
            assert_eq!(eval::zeroshot_accuracy(&b).unwrap(), oracle);
            // calibrated once: 0.5 is the smallest separation tried that clears 95%
            assert!(oracle >= 0.95, "sep {sep} seed {seed}: {oracle}");
        }
    }
}

#[test]
fn label_free_data_gives_chance_accuracy() {
    let b = generate_synthetic(&SyntheticConfig {
        class_separation: 0.0,
        test_per_class: 100,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let s = sample_few_shot(&b, 16, 8).unwrap();
    let cache = build_cache(&b, &s).unwrap();
    let h = HyperParams { d: 16, ..Default::default() };
    let p = AdapterParams::init(&b, &cache, &h, None, 0.02, 8);
    let acc = eval::evaluate(&b, &cache, &p, &h, EvalSplit::Test).unwrap();
    let n = b.num_test() as f64;
    let chance = 1.0 / b.num_classes as f64;
    let sigma = (chance * (1.0 - chance) / n).sqrt();
    assert!((acc - chance).abs() <= 3.0 * sigma, "{acc} vs {chance} ± {}", 3.0 * sigma);
}

#[test]
fn accuracy_falls_with_domain_rotation() {
    let b = generate_synthetic(&SyntheticConfig {
        class_separation: 1.0,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let s = sample_few_shot(&b, 8, 4).unwrap();
    let h = HyperParams { d: 16, ..Default::default() };
    let out = train(&b, &s, &h, &TrainOptions { epochs: 5, ..Default::default() }).unwrap();
    let targets: Vec<EmbeddingBundle> = [0.0, 0.4, 0.8, 1.2, 1.6].iter().map(|&a| b.with_rotated_test(a)).collect();
    let r = eval::cross_domain_eval(&b, &out.cache, &out.params, &h, &targets).unwrap();
    for w in r.per_target.windows(2) {
        assert!(w[1] <= w[0], "{:?}", r.per_target);
    }
    assert!(r.per_target[0] > r.per_target[4]);
}

#[test]
fn default_bundle_trains_to_high_train_accuracy() {
    let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let s = sample_few_shot(&b, 16, 1).unwrap();
    let out = train(&b, &s, &HyperParams::default(), &TrainOptions::default()).unwrap();
    let train_acc = eval::evaluate(&b, &out.cache, &out.params, &HyperParams::default(), EvalSplit::Train).unwrap();
    assert!(train_acc >= 0.95, "{train_acc}");
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let b = generate_synthetic(&SyntheticConfig {
        class_separation: 0.6,
        ..Default::default()
    })
    .unwrap();
    let s = sample_few_shot(&b, 16, 1).unwrap();
    let out = train(&b, &s, &HyperParams::default(), &TrainOptions::default()).unwrap();
    let e = &out.report.epochs;
    assert!(e[4].mean_weighted_loss < e[0].mean_weighted_loss, "{} vs {}", e[4].mean_weighted_loss, e[0].mean_weighted_loss);
}

/// With the sharpening applied after aggregation the true-class cache logit
/// grows like exp(beta * K); on well separated data softmax CE underflows to
/// exactly zero and training leaves the parameters untouched.
#[test]
fn separable_bundle_saturates_post_aggregate_loss() {
    let b = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let s = sample_few_shot(&b, 16, 1).unwrap();
    let h = HyperParams::default();
    let opts = TrainOptions::default();
    let out = train(&b, &s, &h, &opts).unwrap();
    assert!(out.report.epochs.iter().all(|e| e.mean_ce == 0.0));
    let init = AdapterParams::init(&b, &out.cache, &h, None, opts.init_std, opts.seed);
    assert_eq!(out.params, init);

    let pre = HyperParams {
        phi_order: PhiOrder::PreAggregate,
        ..h
    };
    let out = train(&b, &s, &pre, &opts).unwrap();
    assert!(out.report.epochs[0].mean_ce > 0.0);
}

#[test]
fn sweep_endpoints_equal_single_path_pipelines() {
    let (b, s) = small();
    let base = HyperParams { d: 5, ..Default::default() };
    let opts = TrainOptions { epochs: 2, batch_size: 8, ..Default::default() };
    let ctx = eval::SweepContext {
        bundle: &b,
        split: &s,
        base,
        options: opts,
        retrain_per_cell: true,
    };
    let table = eval::sweep_gamma(&ctx, &[0.0, 1.0]).unwrap();
    for (cell, gamma) in table.cells.iter().zip([0.0, 1.0]) {
        let h = HyperParams { gamma, ..base };
        let out = train(&b, &s, &h, &opts).unwrap();
        let oracle = scratch_logits(&b, &out.cache.entry_labels, &out.params, &h, &b.test_features);
        let hits = oracle
            .iter()
            .zip(&b.test_labels)
            .filter(|(row, &l)| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best == l
            })
            .count();
        assert_eq!(cell.accuracy, hits as f64 / b.num_test() as f64);
    }
}
