use centroid_attention::attention::NormAxis;
use centroid_attention::autodiff::finite_diff_check;
use centroid_attention::harness::{ablate, sandwich_spec, AblationAxis, TrainConfig};
use centroid_attention::model::{
    accuracy, nearest_centroid_accuracy, synth_dataset, train, ClassifierSpec, CombineSpec, InitSpec, KernelSpec,
    SynthConfig, TrainHyper, ValueSpec, LAYER_NORM_EPS,
};
use centroid_attention::tensor::matmul;
use centroid_attention::{
    build_model, centroid_update_step, self_attention, AttentionParams, BlockSpec, CentroidAttentionConfig,
    CentroidHead, Error, HeadParams, Initializer, Model, ModelSpec, Pooling, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data(samples_per_class: usize) -> centroid_attention::model::SynthDataset {
    synth_dataset(&SynthConfig {
        points: 16,
        samples_per_class,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn empty_block_list_is_pool_and_classifier() {
    let mut spec = sandwich_spec(8, 4, 1, 6, 3, 0);
    spec.blocks.clear();
    let mut model = build_model(&spec).unwrap();
    let x = Tensor::randn(8, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(model.forward(&x).unwrap().shape(), &[1, 3]);
    assert_eq!(model.live_token_counts().unwrap(), vec![8]);
}

#[test]
fn token_count_shrinks_only_at_centroid_blocks() {
    let mut spec = sandwich_spec(8, 4, 2, 6, 3, 0);
    spec.blocks.push(BlockSpec::Mlp { hidden: 5 });
    let mut model = build_model(&spec).unwrap();
    let x = Tensor::randn(8, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    model.forward(&x).unwrap();
    assert_eq!(model.live_token_counts().unwrap(), vec![8, 8, 4, 4, 4]);
    assert_eq!(model.live_token_counts().unwrap(), model.token_schedule());
    assert_eq!(model.tokens_after(2).unwrap().shape(), &[4, 6]);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let spec = sandwich_spec(8, 4, 1, 6, 3, 42);
    let a = build_model(&spec).unwrap();
    let b = build_model(&spec).unwrap();
    let pa: Vec<_> = a.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let pb: Vec<_> = b.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(pa, pb);
    let c = build_model(&sandwich_spec(8, 4, 1, 6, 3, 43)).unwrap();
    assert_ne!(a.param("embed.w"), c.param("embed.w"));
}

#[test]
fn dimension_chain_errors_name_the_block() {
    let mut spec = sandwich_spec(8, 4, 1, 6, 3, 0);
    spec.blocks.push(BlockSpec::centroid(6, 1, 6, InitSpec::Fps { start: 0 }));
    match build_model(&spec) {
        Err(Error::Config(msg)) => assert!(msg.contains("block 3"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    let mut spec = sandwich_spec(8, 4, 1, 6, 3, 0);
    spec.blocks[1] = BlockSpec::centroid(3, 1, 6, InitSpec::MeanPool);
    assert!(matches!(build_model(&spec), Err(Error::Config(m)) if m.contains("block 1")));
}

#[test]
fn too_few_tokens_at_runtime_is_an_error() {
    let mut model = build_model(&sandwich_spec(8, 4, 1, 6, 3, 0)).unwrap();
    let x = Tensor::randn(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(model.forward(&x).is_err());
    let wrong_dim = Tensor::randn(8, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(matches!(model.forward(&wrong_dim), Err(Error::Dimension { .. })));
}

#[test]
fn logits_are_invariant_to_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let n = 12;
        let x = Tensor::randn(n, 2, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let xp = x.select_rows(&perm).unwrap();
        let start = perm.iter().position(|&i| i == 0).unwrap();
        let spec = sandwich_spec(n, 4, 2, 6, 3, trial);
        let la = build_model(&spec).unwrap().forward(&x).unwrap();
        let lb = build_model(&spec.with_init(InitSpec::Fps { start }))
            .unwrap()
            .forward(&xp)
            .unwrap();
        assert!(la.max_abs_diff(&lb) <= 1e-9, "trial {trial}: {la:?} vs {lb:?}");
    }
}

#[test]
fn zero_parameters_give_equal_logits() {
    let mut model = build_model(&sandwich_spec(8, 4, 1, 6, 3, 0)).unwrap();
    let names: Vec<(String, Tensor)> = model
        .params()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.rows(), t.cols())))
        .collect();
    for (n, z) in names {
        model.set_param(&n, z).unwrap();
    }
    let x = Tensor::randn(8, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let logits = model.forward(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == logits.data()[0]));
}

fn layer_norm(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Tensor {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (row[k] - mean) * inv * gain.get(0, k) + shift.get(0, k);
        }
    }
    out
}

fn add_row(x: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for (o, v) in out.row_mut(i).iter_mut().zip(b.row(0)) {
            *o += v;
        }
    }
    out
}

fn p<'a>(m: &'a Model, name: &str) -> &'a Tensor {
    m.param(name).unwrap_or_else(|| panic!("no parameter {name}"))
}

fn ln(m: &Model, prefix: &str, x: &Tensor) -> Tensor {
    layer_norm(x, p(m, &format!("{prefix}.gain")), p(m, &format!("{prefix}.shift")))
}

#[test]
fn forward_matches_hand_composed_module_calls() {
    let (n, d, dh, m, t) = (10, 6, 3, 4, 2);
    let spec = ModelSpec {
        input_dim: 2,
        input_len: n,
        embed_dim: d,
        blocks: vec![
            BlockSpec::SelfAttention {
                heads: 2,
                head_dim: dh,
                epsilon: 1.0,
                combine: CombineSpec::Sum,
            },
            BlockSpec::CentroidAttention {
                m,
                t,
                epsilon: None,
                alpha: 1.5,
                heads: 1,
                head_dim: dh,
                init: InitSpec::Fps { start: 0 },
                knn_k: None,
                axis: NormAxis::Centroids,
                kernel: KernelSpec::DotProduct,
                values: ValueSpec::Decoupled,
                combine: CombineSpec::Sum,
            },
            BlockSpec::Mlp { hidden: 5 },
        ],
        pool: Pooling::Mean,
        classifier: ClassifierSpec {
            hidden: vec![],
            classes: 3,
        },
        seed: 5,
    };
    let mut model = build_model(&spec).unwrap();
    // make the norm affines non-trivial
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let norms: Vec<String> = model
        .params()
        .map(|(k, _)| k.to_string())
        .filter(|k| k.ends_with(".gain") || k.ends_with(".shift"))
        .collect();
    for k in norms {
        model.set_param(&k, Tensor::randn(1, d, 0.5, &mut rng)).unwrap();
    }
    let x = Tensor::randn(n, 2, 1.0, &mut rng);
    let logits = model.forward(&x).unwrap();

    let m_ = &model;
    let h = add_row(&matmul(&x, p(m_, "embed.w")).unwrap(), p(m_, "embed.b"));

    let a = ln(m_, "block0.ln", &h);
    let heads: Vec<HeadParams> = (0..2)
        .map(|l| {
            HeadParams::new(
                p(m_, &format!("block0.h{l}.wq")).clone(),
                p(m_, &format!("block0.h{l}.wk")).clone(),
                p(m_, &format!("block0.h{l}.wv")).clone(),
            )
            .unwrap()
        })
        .collect();
    let sa = self_attention(&a, &AttentionParams::summed(heads), 1.0).unwrap();
    let h = h.add(&sa.sub(&a).unwrap()).unwrap();

    let lnx = ln(m_, "block1.ln", &h);
    let mut u = Initializer::FarthestPoint { start: 0 }.init(&h, m).unwrap();
    let head = HeadParams::new(
        p(m_, "block1.h0.wq").clone(),
        p(m_, "block1.h0.wk").clone(),
        p(m_, "block1.h0.wv").clone(),
    )
    .unwrap();
    let mut cfg = CentroidAttentionConfig::new(m, vec![CentroidHead::from_attention(&head, 1.0 / (dh as f64).sqrt())]);
    cfg.alpha = 1.5;
    cfg.t = t;
    for _ in 0..t {
        let uq = ln(m_, "block1.lnq", &u);
        let stepped = centroid_update_step(&lnx, &uq, &cfg, None).unwrap();
        u = u.add(&stepped.sub(&uq).unwrap()).unwrap();
    }
    let h = u;

    let a = ln(m_, "block2.ln", &h);
    let z = add_row(&matmul(&a, p(m_, "block2.fc1.w")).unwrap(), p(m_, "block2.fc1.b")).map(|v| v.max(0.0));
    let o = add_row(&matmul(&z, p(m_, "block2.fc2.w")).unwrap(), p(m_, "block2.fc2.b"));
    let h = h.add(&o).unwrap();

    let pooled = ln(m_, "final.ln", &h).mean_rows();
    let expect = add_row(&matmul(&pooled, p(m_, "head.out.w")).unwrap(), p(m_, "head.out.b"));
    assert!(logits.max_abs_diff(&expect) <= 1e-12, "{logits:?} vs {expect:?}");
}

#[test]
fn synthetic_data_is_reproducible_and_balanced() {
    let cfg = SynthConfig::default();
    let a = synth_dataset(&cfg).unwrap();
    let b = synth_dataset(&cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.train.len(), 120);
    assert_eq!(a.test.len(), 30);
    for c in 0..3 {
        assert_eq!(a.train.iter().filter(|s| s.label == c).count(), 40);
        assert_eq!(a.test.iter().filter(|s| s.label == c).count(), 10);
    }
    assert!(a.train.iter().all(|s| s.points.shape() == [64, 2]));
}

#[test]
fn zero_spread_puts_points_on_blob_centres() {
    let data = synth_dataset(&SynthConfig {
        spread: 0.0,
        ..SynthConfig::default()
    })
    .unwrap();
    for s in data.train.iter().chain(&data.test) {
        for i in 0..s.points.rows() {
            let row = s.points.row(i);
            assert!(s.centres.iter().any(|c| c[0] == row[0] && c[1] == row[1]));
        }
    }
}

#[test]
fn infeasible_synthetic_configs_are_rejected() {
    for cfg in [
        SynthConfig { classes: 1, ..SynthConfig::default() },
        SynthConfig { classes: 9, ..SynthConfig::default() },
        SynthConfig { points: 2, ..SynthConfig::default() },
        SynthConfig { spread: -1.0, ..SynthConfig::default() },
    ] {
        assert!(matches!(synth_dataset(&cfg), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn nearest_centroid_oracle_solves_the_default_task() {
    let acc = nearest_centroid_accuracy(&synth_dataset(&SynthConfig::default()).unwrap()).unwrap();
    assert!(acc >= 0.99, "oracle accuracy {acc}");
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = small_data(10);
    let mut model = build_model(&sandwich_spec(16, 4, 1, 6, 3, 1)).unwrap();
    let before = accuracy(&mut model, &data.test).unwrap();
    let params: Vec<_> = model.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let report = train(
        &mut model,
        &data,
        &TrainHyper {
            lr: 0.0,
            epochs: 2,
            batch: 4,
            seed: 0,
        },
    )
    .unwrap();
    assert!(report.records.iter().all(|r| r.test_acc == before));
    let after: Vec<_> = model.params().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(params, after);
}

#[test]
fn one_short_epoch_is_finite_and_reproducible() {
    let data = small_data(5);
    assert_eq!(data.train.len() + data.test.len(), 15);
    let hyper = TrainHyper {
        lr: 0.05,
        epochs: 1,
        batch: 3,
        seed: 4,
    };
    let run = || {
        let mut model = build_model(&sandwich_spec(16, 4, 2, 6, 3, 1)).unwrap();
        train(&mut model, &data, &hyper).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.records[0].loss.is_finite());
    assert!((0.0..=1.0).contains(&a.records[0].train_acc));
    assert_eq!(a.records, b.records);
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}

#[test]
fn divergent_training_aborts_with_epoch_and_hash() {
    let data = small_data(5);
    let mut model = build_model(&sandwich_spec(16, 4, 1, 6, 3, 1)).unwrap();
    let hyper = TrainHyper {
        lr: 1e200,
        epochs: 3,
        batch: 1,
        seed: 0,
    };
    match train(&mut model, &data, &hyper) {
        Err(Error::NonFiniteLoss { epoch, config_hash }) => {
            assert!(epoch < 3);
            assert_eq!(config_hash.len(), 16);
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn gradients_flow_through_every_unrolled_step() {
    let data = small_data(5);
    let batch: Vec<_> = data.train.iter().take(4).collect();
    let mut spec = sandwich_spec(16, 4, 3, 6, 3, 2);
    spec.blocks[1] = BlockSpec::CentroidAttention {
        m: 4,
        t: 3,
        epsilon: None,
        alpha: 2.0,
        heads: 2,
        head_dim: 3,
        init: InitSpec::Fps { start: 0 },
        knn_k: None,
        axis: NormAxis::Centroids,
        kernel: KernelSpec::DotProduct,
        values: ValueSpec::GradientTied,
        combine: CombineSpec::Concat,
    };
    let mut model = build_model(&spec).unwrap();
    let mean_loss = |m: &mut Model| {
        batch.iter().map(|s| m.loss(&s.points, s.label).unwrap().0).sum::<f64>() / batch.len() as f64
    };
    let mut grads = centroid_attention::GradientMap::default();
    for s in &batch {
        grads.accumulate(&model.loss_and_grad(&s.points, s.label).unwrap().2).unwrap();
    }
    grads.scale(0.25);
    for name in ["block1.h0.wq", "block1.h0.wk", "block1.h1.wq", "block1.h1.wk", "block1.wo", "block1.lnq.gain"] {
        let at = model.param(name).unwrap().clone();
        let analytic = grads.param(name).unwrap().clone();
        let mut probe = model.clone();
        let f = |t: &Tensor| {
            probe.set_param(name, t.clone()).unwrap();
            mean_loss(&mut probe)
        };
        let report = finite_diff_check(f, &at, &analytic, 1e-5, 1e-5).unwrap();
        assert!(report.pass, "{name}: rel {:.3e} abs {:.3e}", report.max_rel_err, report.max_abs_err);
        assert!(analytic.max_abs() > 0.0, "{name} received no gradient");
    }
}

#[test]
fn knn_and_distance_kernels_build_and_train() {
    let data = small_data(5);
    let mut spec = sandwich_spec(16, 4, 2, 6, 3, 3);
    spec.blocks[1] = BlockSpec::CentroidAttention {
        m: 4,
        t: 2,
        epsilon: Some(0.3),
        alpha: 1.0,
        heads: 1,
        head_dim: 6,
        init: InitSpec::Learned,
        knn_k: Some(8),
        axis: NormAxis::Inputs,
        kernel: KernelSpec::NegHalfSquaredDistance,
        values: ValueSpec::GradientTied,
        combine: CombineSpec::Sum,
    };
    spec.pool = Pooling::MeanMax;
    let mut model = build_model(&spec).unwrap();
    let report = train(
        &mut model,
        &data,
        &TrainHyper {
            lr: 0.05,
            epochs: 2,
            batch: 4,
            seed: 0,
        },
    )
    .unwrap();
    assert!(report.records.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn ablation_rows_follow_settings() {
    let data = small_data(5);
    let base = sandwich_spec(16, 4, 1, 6, 3, 1);
    let hyper = TrainHyper {
        lr: 0.05,
        epochs: 1,
        batch: 4,
        seed: 0,
    };
    let rows = ablate(&data, &base, &hyper, &AblationAxis::iterations()).unwrap();
    assert_eq!(rows.iter().map(|r| r.setting.as_str()).collect::<Vec<_>>(), ["T=1", "T=2", "T=3"]);
    let rows = ablate(&data, &base, &hyper, &AblationAxis::inits()).unwrap();
    assert_eq!(rows.len(), 4);

    // a single setting is one training run
    let one = ablate(&data, &base, &hyper, &AblationAxis::Iterations(vec![1])).unwrap();
    let mut model = build_model(&base.with_iterations(1)).unwrap();
    let report = train(&mut model, &data, &hyper).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].test_acc, report.final_test_acc());
    assert_eq!(one[0].final_loss, report.records[0].loss);
}

#[test]
fn bundled_config_matches_the_documented_default() {
    let cfg = TrainConfig::default_config();
    let spec = cfg.model_spec();
    assert_eq!(spec.input_len, 64);
    assert_eq!(spec.classifier.classes, 3);
    assert_eq!(spec.token_schedule().unwrap(), vec![64, 64, 8, 8]);
    assert!(matches!(
        spec.blocks[1],
        BlockSpec::CentroidAttention {
            m: 8,
            t: 1,
            init: InitSpec::Fps { .. },
            ..
        }
    ));
}
