use std::collections::BTreeSet;

use hssn_core::datapipe::generate_synthetic;
use hssn_core::evaluator::{compute_map, evaluate_fold, rank_pairs};
use hssn_core::model::{BlockConfig, BnPosition, Param};
use hssn_core::trainer::{adam_step, train, Schedule};
use hssn_core::{AdamState, Dataset, EvalPairSet, FoldSplit, Manifest, ModelConfig, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn adam_matches_textbook_recursion_for_five_steps() {
    let grads = [1.0f64, -0.5, 0.25, 2.0, -1.0];
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let mut params = vec![Param {
        name: "w".into(),
        tensor: Tensor::new([1], vec![0.5]).unwrap(),
    }];
    let mut state = AdamState::new(&params, lr);
    let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let (mh, vh) = (m / (1.0 - b1.powi(t)), v / (1.0 - b2.powi(t)));
        x -= lr * mh / (vh.sqrt() + eps);

        params[0].tensor.zero_grad();
        params[0].tensor.accumulate_grad(&[g as f32]).unwrap();
        adam_step(&mut params, &mut state).unwrap();
        let got = params[0].tensor.data()[0] as f64;
        assert!((got - x).abs() < 1e-6, "step {t}: {got} vs {x}");
    }
    assert_eq!(state.t, 5);
}

fn tiny_setup(dir: &std::path::Path) -> (TrainConfig, Dataset, FoldSplit) {
    let manifest = generate_synthetic(dir, 6, 32, 2, 4).unwrap();
    let model = ModelConfig {
        blocks: vec![BlockConfig::new(4, 3, true), BlockConfig::new(4, 3, true)],
        tap_indices: vec![0, 1],
        embedding_dim: 6,
        style_out_dim: 4,
        input_shape: [3, 8, 8],
        bn_position: BnPosition::BeforeGram,
    };
    let data = Dataset::load(Manifest::load(manifest).unwrap(), model.input_shape).unwrap();
    let ids: BTreeSet<String> = data.outfits().into_keys().collect();
    let split = FoldSplit {
        fold_index: 0,
        train_outfits: ids.clone(),
        test_outfits: ids,
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 12,
        schedule: Schedule::step_decay(1e-3, 0.5, 1),
        model,
        ..TrainConfig::default()
    };
    (cfg, data, split)
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, split) = tiny_setup(dir.path());
    let a = train(&cfg, &data, &split).unwrap();
    let b = train(&cfg, &data, &split).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log.iter().map(|l| l.epoch).collect::<Vec<_>>(), [1, 2, 3]);
    assert_eq!(a.log[2].lr, 2.5e-4);
    assert_eq!(a.log[0].mean_style_terms.len(), 2);

    let other = TrainConfig { seed: 13, ..cfg.clone() };
    let c = train(&other, &data, &split).unwrap();
    assert_ne!(c.model.params(), a.model.params());

    let baseline = TrainConfig {
        loss: hssn_core::LossParams { w2: 0.0, ..cfg.loss },
        ..cfg
    };
    let d = train(&baseline, &data, &split).unwrap();
    assert!(d.log.iter().all(|l| l.mean_style_terms.is_empty() && l.mean_total == l.mean_triplet_term));

    let r = evaluate_fold(&a.model, &data, &split).unwrap();
    assert_eq!(r.n_pairs, 6);
    assert!(r.map_normalized > 0.0 && r.map_normalized <= 1.0);
    assert!((r.map_paper_formula - 6.0 * r.map_normalized).abs() < 1e-12);
}

#[test]
fn training_rejects_a_one_outfit_pool() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data, mut split) = tiny_setup(dir.path());
    let keep = split.train_outfits.iter().next().unwrap().clone();
    split.train_outfits = [keep].into_iter().collect();
    let err = train(&cfg, &data, &split).unwrap_err();
    assert_eq!(err.class(), hssn_core::ErrorClass::Data);
}

/// With embeddings that carry no information every rank is uniform on
/// `1..=n`, so the mean rank is `(n + 1) / 2`.
#[test]
fn random_embeddings_give_uniform_ranks() {
    let n = 30;
    let trials = 400;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut rank_sum, mut count) = (0.0f64, 0usize);
    let mut map_sum = 0.0;
    for _ in 0..trials {
        let mut set = EvalPairSet::default();
        for i in 0..n {
            let (a, b) = (format!("a{i:02}"), format!("b{i:02}"));
            for id in [&a, &b] {
                set.embeddings.insert(id.clone(), (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            }
            set.pairs.push((a, b));
        }
        let ranks = rank_pairs(&set).unwrap();
        for p in &ranks.per_pair {
            assert!((1..=n).contains(&p.rank_a) && (1..=n).contains(&p.rank_b));
            rank_sum += (p.rank_a + p.rank_b) as f64;
            count += 2;
        }
        map_sum += compute_map(&ranks, true);
    }
    let mean_rank = rank_sum / count as f64;
    // rank variance is (n^2 - 1) / 12; 24000 samples put 4 sigma near 0.23
    assert!((mean_rank - (n as f64 + 1.0) / 2.0).abs() < 0.25, "mean rank {mean_rank}");
    let harmonic: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let map = map_sum / trials as f64;
    assert!((map - harmonic / n as f64).abs() < 0.01, "mean MAP {map}");
}
