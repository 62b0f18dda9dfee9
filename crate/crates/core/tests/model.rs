use hssn_core::model::{BlockConfig, BnPosition, StyleHeads};
use hssn_core::{BnMode, Graph, Model, ModelConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(b: usize, shape: [usize; 3], scale: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([b, shape[0], shape[1], shape[2]], |_| scale * rng.gen_range(0.0..1.0))
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop::collection::vec((1usize..5, prop::sample::select(vec![1usize, 3, 5]), any::<bool>()), 1..4),
        1usize..4,
        1usize..6,
        1usize..6,
        any::<u8>(),
    )
        .prop_map(|(blocks, c_in, emb, style, tap_bits)| {
            let blocks: Vec<BlockConfig> =
                blocks.into_iter().map(|(c, k, p)| BlockConfig::new(c, k, p)).collect();
            let mut taps: Vec<usize> = (0..blocks.len()).filter(|i| tap_bits >> i & 1 == 1).collect();
            if taps.is_empty() {
                taps.push(0);
            }
            ModelConfig {
                blocks,
                tap_indices: taps,
                embedding_dim: emb,
                style_out_dim: style,
                input_shape: [c_in, 16, 16],
                bn_position: BnPosition::BeforeGram,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parameter_count_has_closed_form(cfg in config_strategy()) {
        let model = Model::new(cfg.clone(), 0).unwrap();
        let mut want = 0;
        let (mut c_prev, mut side) = (cfg.input_shape[0], cfg.input_shape[1]);
        let mut channels = Vec::new();
        for b in &cfg.blocks {
            want += b.out_channels * c_prev * b.kernel * b.kernel + b.out_channels;
            channels.push(b.out_channels);
            c_prev = b.out_channels;
            if b.pool_after {
                side /= 2;
            }
        }
        want += cfg.embedding_dim * (c_prev * side * side) + cfg.embedding_dim;
        for &t in &cfg.tap_indices {
            let c = channels[t];
            want += 2 * c + cfg.style_out_dim * c * c + cfg.style_out_dim;
        }
        prop_assert_eq!(model.num_parameters(), want);
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        blocks: vec![BlockConfig::new(4, 3, true), BlockConfig::new(6, 3, true)],
        tap_indices: vec![0, 1],
        embedding_dim: 8,
        style_out_dim: 5,
        input_shape: [3, 12, 12],
        bn_position: BnPosition::BeforeGram,
    }
}

/// With unit gamma and zero beta, train-mode normalization leaves every
/// channel with at most unit mean square over the batch, so the diagonal of
/// the unnormalized gram summed over the batch is bounded by the element
/// count, however large the input.
#[test]
fn normalized_gram_diagonal_is_bounded_for_huge_inputs() {
    for scale in [1.0f32, 1e3, 1e6] {
        let mut model = Model::new(small(), 4).unwrap();
        let batch = 3;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.leaf(random_images(batch, small().input_shape, scale, 8));
        let outs = model.forward(&mut g, &bound, x, BnMode::Train, StyleHeads::Compute).unwrap();
        for tap in 0..2 {
            let (c, m) = (outs[0].aux[tap].n_l, outs[0].aux[tap].m_l);
            let mut diag = vec![0.0f64; c];
            for o in &outs {
                let a = &o.aux[tap];
                let gram = g.value(a.raw_gram).data();
                for (i, d) in diag.iter_mut().enumerate() {
                    *d += gram[i * c + i] as f64;
                }
                assert!(g.value(a.style_vector).data().iter().all(|v| v.is_finite()));
            }
            let bound = (batch * m) as f64 * (1.0 + 1e-4);
            for d in diag {
                assert!((0.0..=bound).contains(&d), "scale {scale} tap {tap}: diagonal {d} > {bound}");
            }
        }
    }
}

#[test]
fn eval_embeddings_do_not_depend_on_batch_companions() {
    let model = Model::new(small(), 2).unwrap();
    let imgs = random_images(5, small().input_shape, 1.0, 3);
    let together = model.embed(&imgs).unwrap();
    let per = 3 * 12 * 12;
    let dim = small().embedding_dim;
    for b in 0..5 {
        let one = Tensor::new([1, 3, 12, 12], imgs.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let alone = model.embed(&one).unwrap();
        for (x, y) in alone.data().iter().zip(&together.data()[b * dim..(b + 1) * dim]) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "image {b}: {x} vs {y}");
        }
    }
    // reversing the batch permutes rows and changes nothing else
    let rev: Vec<f32> = (0..5).rev().flat_map(|b| imgs.data()[b * per..(b + 1) * per].to_vec()).collect();
    let reversed = model.embed(&Tensor::new([5, 3, 12, 12], rev).unwrap()).unwrap();
    for b in 0..5 {
        let r = &reversed.data()[(4 - b) * dim..(5 - b) * dim];
        for (x, y) in r.iter().zip(&together.data()[b * dim..(b + 1) * dim]) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}

#[test]
fn checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(small(), 5).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path, Some(&small())).unwrap();
    assert_eq!(back.params(), model.params());
    let other = ModelConfig {
        embedding_dim: 9,
        ..small()
    };
    let err = Model::load(&path, Some(&other)).unwrap_err().to_string();
    assert!(err.contains("embed"), "{err}");
}
