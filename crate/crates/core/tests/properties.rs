use marginforge_core::attack::{fgsm, ifgsm, AttackLoss};
use marginforge_core::data::{flip_labels, load_idx, split, subsample, write_idx};
use marginforge_core::margin::{hyperplane_distance, margin_loss_batch};
use marginforge_core::{
    Dataset, ExperimentConfig, Graph, LayerSet, MarginConfig, Model, NormExponent, Tensor,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.get2(i, t) * b.get2(t, j)).sum();
        }
    }
    out
}

fn dual_of(p: NormExponent) -> NormExponent {
    match p {
        NormExponent::One => NormExponent::Inf,
        NormExponent::Two => NormExponent::Two,
        NormExponent::Inf => NormExponent::One,
    }
}

fn norm_strategy() -> impl Strategy<Value = NormExponent> {
    prop::sample::select(NormExponent::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive((n, k, m) in (1usize..6, 1usize..6, 1usize..6), seed in any::<u64>()) {
        let mut rng = seed;
        let mut next = || { rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); ((rng >> 11) as f64 / (1u64 << 53) as f64) - 0.5 };
        let a = Tensor::new(vec![n, k], (0..n * k).map(|_| next()).collect()).unwrap();
        let b = Tensor::new(vec![k, m], (0..k * m).map(|_| next()).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    /// `sum(relu(A·W) ⊙ M) + logsumexp` through the graph, against central differences.
    #[test]
    fn graph_gradients_match_finite_differences(a in matrix(3, 4), w in matrix(4, 5), mask in matrix(3, 5)) {
        let f = |w: &Tensor| -> f64 {
            let h = a.matmul(w).unwrap().relu();
            let lse: f64 = h.logsumexp_rows().unwrap().data().iter().sum();
            h.mul(&mask).unwrap().data().iter().sum::<f64>() + lse
        };
        let mut g = Graph::new();
        let an = g.input(a.clone());
        let wn = g.param(w.clone());
        let mn = g.input(mask.clone());
        let z = g.matmul(an, wn).unwrap();
        let h = g.relu(z).unwrap();
        let masked = g.mul(h, mn).unwrap();
        let s1 = g.sum(masked).unwrap();
        let lse = g.logsumexp_rows(h).unwrap();
        let s2 = g.sum(lse).unwrap();
        let out = g.add(s1, s2).unwrap();
        prop_assert!((g.value(out).item() - f(&w)).abs() <= 1e-12);
        let grads = g.backward(out).unwrap();
        let gw = grads.get(wn).unwrap();
        let pre = a.matmul(&w).unwrap();
        let h_step = 1e-6;
        for j in 0..w.len() {
            // skip coordinates whose perturbation flips a ReLU
            let (r, c) = (j / 5, j % 5);
            if (0..3).any(|i| pre.get2(i, c).abs() <= 2.0 * h_step * a.get2(i, r).abs()) {
                continue;
            }
            let bump = |d: f64| {
                let mut v = w.data().to_vec();
                v[j] += d;
                Tensor::new(w.shape().to_vec(), v).unwrap()
            };
            let (wp, wm) = (bump(h_step), bump(-h_step));
            let num = (f(&wp) - f(&wm)) / (2.0 * h_step);
            prop_assert!((gw.data()[j] - num).abs() <= 1e-6 * num.abs().max(1.0), "coord {j}: {} vs {num}", gw.data()[j]);
        }
    }

    #[test]
    fn hyperplane_distance_is_holder_tight(
        a in prop::collection::vec(-3.0f64..3.0, 1..8),
        b in -3.0f64..3.0,
        p in norm_strategy(),
        probe in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
        let d = hyperplane_distance(&a, b, p).unwrap();
        prop_assert!((d - b.abs() / dual_of(p).norm(&a)).abs() <= 1e-12 * d.max(1.0));
        // any feasible point is at least as far
        let v: Vec<f64> = probe[..a.len()].to_vec();
        let av: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
        prop_assume!(av.abs() > 1e-6);
        let feasible: Vec<f64> = v.iter().map(|x| x * b / av).collect();
        prop_assert!(p.norm(&feasible) >= d * (1.0 - 1e-12));
    }

    #[test]
    fn attacks_stay_in_the_ball(seed in 0u64..1000, eps in 0.0f64..0.6, clamp in any::<bool>(), iterated in any::<bool>()) {
        let model = Model::mlp(6, &[5], 3, seed).unwrap();
        let x = Tensor::new(vec![4, 6], (0..24).map(|i| ((i as u64 * 37 + seed) % 101) as f64 / 100.0).collect()).unwrap();
        let labels = vec![0, 1, 2, (seed % 3) as usize];
        let bounds = clamp.then_some([0.0, 1.0]);
        let adv = if iterated {
            ifgsm(&model, AttackLoss::CrossEntropy, &x, &labels, eps, eps / 3.0 + 1e-3, 7, bounds).unwrap()
        } else {
            fgsm(&model, AttackLoss::CrossEntropy, &x, &labels, eps, bounds).unwrap()
        };
        for (a, b) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= eps);
            if clamp {
                prop_assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn margin_loss_is_nonnegative_without_xent(seed in 0u64..500, gamma in 0.01f64..3.0, p in norm_strategy()) {
        let model = Model::mlp(3, &[4, 4], 3, seed).unwrap();
        let x = Tensor::new(vec![5, 3], (0..15).map(|i| ((i as u64 * 13 + seed) % 17) as f64 / 8.0 - 1.0).collect()).unwrap();
        let labels = vec![0, 1, 2, 1, 0];
        let mut cfg = MarginConfig::new(p, LayerSet::ALL, gamma);
        cfg.xent_weight = 0.0;
        let mut trace = model.forward(&x).unwrap();
        let loss = margin_loss_batch(&mut trace, &labels, &cfg).unwrap();
        let v = trace.graph.value(loss.loss).item();
        prop_assert!(v >= 0.0 && v.is_finite());
        // every recorded pair distance is |num| / (eps + den)
        for d in &loss.diagnostics {
            prop_assert!((d.distance - d.numerator.abs() / (cfg.epsilon + d.denominator)).abs() <= 1e-12 * d.distance.max(1.0));
        }
    }

    #[test]
    fn checkpoints_roundtrip(seed in any::<u64>(), hidden in prop::collection::vec(1usize..6, 0..3)) {
        let model = Model::mlp(3, &hidden, 4, seed).unwrap();
        let bytes = model.to_checkpoint_bytes();
        let back = Model::from_checkpoint_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 1], std::path::Path::new("mem")).is_err());
    }

    #[test]
    fn label_flips_hit_the_exact_count(n in 1usize..80, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let ds = Dataset::new(Tensor::zeros(&[n, 1]), labels.clone(), 10, "t").unwrap();
        let noisy = flip_labels(&ds, fraction, seed).unwrap();
        let changed = noisy.labels.iter().zip(&labels).filter(|(a, b)| a != b).count();
        prop_assert_eq!(changed, (fraction * n as f64 + 0.5).floor() as usize);
        prop_assert_eq!(&noisy.features, &ds.features);
        prop_assert_eq!(&flip_labels(&ds, fraction, seed).unwrap().labels, &noisy.labels);
    }

    #[test]
    fn subsample_and_split_preserve_order(n in 2usize..60, fraction in 0.01f64..=1.0, seed in any::<u64>()) {
        let feats = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let ds = Dataset::new(feats, (0..n).map(|i| i % 3).collect(), 3, "t").unwrap();
        let sub = subsample(&ds, fraction, seed).unwrap();
        prop_assert_eq!(sub.len(), ((fraction * n as f64 + 0.5).floor() as usize).max(1));
        prop_assert!(sub.features.data().windows(2).all(|w| w[0] < w[1]));
        let hold = n / 3;
        let (train, held) = split(&ds, hold, seed).unwrap();
        prop_assert_eq!(held.len(), hold);
        prop_assert_eq!(train.len() + held.len(), n);
        let mut all: Vec<f64> = train.features.data().iter().chain(held.features.data()).cloned().collect();
        all.sort_by(f64::total_cmp);
        prop_assert_eq!(all, (0..n).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn idx_roundtrip(n in 1usize..20, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let dim = rows * cols;
        let pixels: Vec<f64> = (0..n * dim).map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 256) as f64 / 255.0).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize % 7) % 10).collect();
        let ds = Dataset::new(Tensor::new(vec![n, dim], pixels).unwrap(), labels, 10, "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ds, rows, cols, &img, &lab).unwrap();
        let back = load_idx(&img, &lab).unwrap();
        prop_assert_eq!(&back.labels, &ds.labels);
        for (a, b) in back.features.data().iter().zip(ds.features.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn experiment_config_json_roundtrip() {
    let text = r#"{"model":{"input_dim":2,"hidden":[8],"n_classes":2},
        "data":{"kind":"toy","pattern":"spiral","train_per_class":10},
        "loss":{"kind":"margin","p":2,"layers":[0,2],"gamma":0.5,"clip":null},
        "optimizer":{"kind":"rmsprop","learning_rate":0.001},
        "steps":10,"batch_size":4,"seed":3,"eval_every":5}"#;
    let cfg = ExperimentConfig::from_json(text).unwrap();
    let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(cfg, again);
    assert!(ExperimentConfig::from_json(&text.replace(r#""p":2"#, r#""p":3"#)).is_err());
}
