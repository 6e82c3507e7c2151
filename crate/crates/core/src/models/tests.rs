use super::*;
use crate::data::Record;
use crate::objectives::{elbo_v2_loss, SampledPass};
use crate::tensor::grad_check_leaves;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        text_dim: 4,
        image_dim: 3,
        hidden_width: 6,
        classifier_width: 5,
        maxout_pieces: 2,
        n_classes: 3,
        dropout: 0.0,
        variant,
        ..ModelConfig::default()
    }
}

fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed);
    let mut ds = Dataset::empty(4, 3, 3);
    for i in 0..n {
        let text: Vec<f32> = (0..4).map(|_| rng.normal(0.0, 1.0) as f32).collect();
        let image: Vec<f32> = (0..3).map(|_| rng.normal(0.0, 1.0) as f32).collect();
        let labels = vec![(text[0] > 0.0) as u8, (image[0] > 0.0) as u8, (text[1] + image[1] > 0.0) as u8];
        ds.records.push(Record {
            id: format!("r{i}"),
            text_emb: text,
            image_emb: image,
            labels,
        });
    }
    ds
}

fn full_batch<T: Scalar>(ds: &Dataset) -> Batch<T> {
    Batch::gather(ds, &(0..ds.len()).collect::<Vec<_>>()).unwrap()
}

fn set_gate_plain(model: &Model, bias: f32) {
    let Dense::Plain(g) = &model.a.gate else { panic!("expected a plain gate") };
    g.weight.set_data(&vec![0.0; g.weight.numel()]).unwrap();
    g.bias.set_data(&vec![bias; g.bias.numel()]).unwrap();
}

#[test]
fn open_gate_passes_image_branch() {
    let mut model = Model::<f32>::new(tiny(Variant::MMo), 1).unwrap();
    let b = full_batch::<f32>(&toy_dataset(5, 2));
    for (bias, image_side) in [(40.0, true), (-40.0, false)] {
        set_gate_plain(&model, bias);
        let out = model.a.forward(&b.text, &b.image, None, Mode::Eval).unwrap();
        let want = if image_side { &out.h_image } else { &out.h_text };
        for (z, h) in out.z.data().iter().zip(want.data().iter()) {
            assert!((z - h).abs() < 1e-6);
        }
    }
}

#[test]
fn equal_branches_make_gate_irrelevant() {
    let mut model = Model::<f64>::new(tiny(Variant::MMo), 3).unwrap();
    let b = full_batch::<f64>(&toy_dataset(4, 4));
    let out = model.a.forward(&b.text, &b.image, None, Mode::Eval).unwrap();
    let h = out.h_text.clone();
    let z = out.gate.mul(&h.sub(&h).unwrap()).unwrap().add(&h).unwrap();
    assert_eq!(z.to_vec(), h.to_vec());
}

#[test]
fn fused_value_lies_between_branches() {
    let mut model = Model::<f64>::new(tiny(Variant::PmMo), 5).unwrap();
    let b = full_batch::<f64>(&toy_dataset(16, 6));
    let out = model.a.forward(&b.text, &b.image, None, Mode::Eval).unwrap();
    let (z, t, i) = (out.z.to_vec(), out.h_text.to_vec(), out.h_image.to_vec());
    for k in 0..z.len() {
        let (lo, hi) = (t[k].min(i[k]), t[k].max(i[k]));
        assert!(z[k] >= lo - 1e-12 && z[k] <= hi + 1e-12);
    }
    assert!(out.gate.data().iter().all(|g| *g > 0.0 && *g < 1.0));
}

#[test]
fn zero_inputs_give_finite_logits() {
    let model = Model::<f32>::new(tiny(Variant::PmMo), 7).unwrap();
    let logits = model
        .forward_eval(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 3]))
        .unwrap();
    assert_eq!(logits.shape(), [2, 3]);
    assert!(logits.all_finite());
    let d = logits.to_vec();
    assert_eq!(d[..3], d[3..]);
}

#[test]
fn eval_is_deterministic_and_records_nothing() {
    let model = Model::<f32>::new(tiny(Variant::PmMo), 8).unwrap();
    let ds = toy_dataset(10, 9);
    let idx: Vec<usize> = (0..10).collect();
    let a = model.predict_logits(&ds, &idx, 3).unwrap();
    let b = model.predict_logits(&ds, &idx, 10).unwrap();
    assert_eq!(a, b);
    assert_eq!(model.evaluate(&ds, &idx, 0.5).unwrap(), model.evaluate(&ds, &idx, 0.5).unwrap());
    assert!(model.params().iter().all(|p| p.tensor.grad().is_none()));
}

#[test]
fn evaluate_rejects_empty_and_mismatched_sets() {
    let model = Model::<f32>::new(tiny(Variant::MMo), 1).unwrap();
    let ds = toy_dataset(4, 1);
    assert!(matches!(model.evaluate(&ds, &[], 0.5), Err(Error::Contract(_))));
    let other = Dataset::empty(5, 3, 3);
    assert!(matches!(model.predict_logits(&other, &[], 2), Err(Error::Schema(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { hidden_width: 0, ..tiny(Variant::PmMo) },
        ModelConfig { maxout_pieces: 1, ..tiny(Variant::PmMo) },
        ModelConfig { dropout: 1.0, ..tiny(Variant::PmMo) },
        ModelConfig { scale_init: 0.0, ..tiny(Variant::PmMo) },
        ModelConfig { prior_scale: -1.0, ..tiny(Variant::PmMo) },
    ];
    for cfg in bad {
        assert!(matches!(Model::<f32>::new(cfg, 0), Err(Error::Config(_))));
    }
}

#[test]
fn deterministic_variants_have_no_kl() {
    let m = Model::<f32>::new(tiny(Variant::MMo), 1).unwrap();
    assert_eq!(m.kl_total().unwrap(), 0.0);
    let g = build_gmu_baseline::<f32>(&tiny(Variant::PmMo), 1).unwrap();
    assert_eq!(g.kl_total().unwrap(), 0.0);
    assert_eq!(g.config.dropout, 0.7);
    assert!(Model::<f32>::new(tiny(Variant::PmMo), 1).unwrap().kl_total().unwrap() > 0.0);
}

#[test]
fn same_seed_same_model() {
    let a = Model::<f32>::new(tiny(Variant::MMo), 11).unwrap();
    let b = Model::<f32>::new(tiny(Variant::MMo), 11).unwrap();
    let c = Model::<f32>::new(tiny(Variant::MMo), 12).unwrap();
    assert_eq!(a.snapshot(), b.snapshot());
    assert_ne!(a.snapshot(), c.snapshot());
}

#[test]
fn parameter_names_are_unique_and_prefixed() {
    let m = Model::<f32>::new(tiny(Variant::PmMo), 1).unwrap();
    let names: Vec<String> = m.params().into_iter().map(|p| p.name).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert!(names.iter().all(|n| n.starts_with("a.") || n.starts_with("c.")));
    assert!(names.iter().any(|n| n.starts_with("a.gate")));
}

#[test]
fn modality_ablation_ignores_the_other_input() {
    let cfg = ModelConfig { modality: Modality::TextOnly, ..tiny(Variant::MMo) };
    let model = Model::<f32>::new(cfg, 2).unwrap();
    let text = Tensor::from_slice(&[0.3, -0.2, 0.5, 1.0], &[1, 4]).unwrap();
    let a = model.forward_eval(&text, &Tensor::zeros(&[1, 3])).unwrap();
    let b = model.forward_eval(&text, &Tensor::full(&[1, 3], 9.0)).unwrap();
    assert_eq!(a.to_vec(), b.to_vec());
}

#[test]
fn every_trainable_parameter_gets_a_gradient() {
    for variant in [Variant::PmMo, Variant::MMo, Variant::GmuBaseline] {
        let mut model = Model::<f32>::new(tiny(variant), 3).unwrap();
        let ds = toy_dataset(8, 3);
        let mut opts = build_optimizers(&model, &TrainConfig::default()).unwrap();
        let mut rngs = TrainRngs::new(3);
        let batch = full_batch::<f32>(&ds);
        let before = model.snapshot();
        train_step(&mut model, &batch, &mut opts, 0, &mut rngs, 8).unwrap();
        let after = model.snapshot();
        for ((p, b), a) in model.params().iter().zip(&before).zip(&after) {
            if p.role.trainable() {
                assert!(p.tensor.grad().is_some(), "{variant:?} {}", p.name);
                assert_ne!(b, a, "{variant:?} {} did not move", p.name);
            }
        }
    }
}

#[test]
fn training_drives_the_loss_down() {
    for variant in [Variant::PmMo, Variant::MMo, Variant::GmuBaseline] {
        let mut model = Model::<f32>::new(tiny(variant), 4).unwrap();
        let ds = toy_dataset(16, 5);
        let cfg = TrainConfig { lr: 0.01, ..TrainConfig::default() };
        let mut opts = build_optimizers(&model, &cfg).unwrap();
        let mut rngs = TrainRngs::new(4);
        let batch = full_batch::<f32>(&ds);
        let first = train_step(&mut model, &batch, &mut opts, 0, &mut rngs, 16).unwrap();
        let mut last = first.clone();
        for _ in 0..150 {
            last = train_step(&mut model, &batch, &mut opts, 0, &mut rngs, 16).unwrap();
        }
        assert!(last.likelihood_term < first.likelihood_term * 0.7, "{variant:?}: {first:?} -> {last:?}");
    }
}

#[test]
fn overfits_eight_records() {
    let cfg = ModelConfig {
        hidden_width: 16,
        classifier_width: 16,
        elbo: ElboVariant::v2(),
        ..tiny(Variant::PmMo)
    };
    let mut model = Model::<f32>::new(cfg, 21).unwrap();
    let ds = toy_dataset(8, 22);
    let train = TrainConfig { lr: 0.005, ..TrainConfig::default() };
    let mut opts = build_optimizers(&model, &train).unwrap();
    let mut rngs = TrainRngs::new(21);
    let batch = full_batch::<f32>(&ds);
    for epoch in 0..400 {
        train_step(&mut model, &batch, &mut opts, epoch, &mut rngs, 8).unwrap();
    }
    let idx: Vec<usize> = (0..8).collect();
    let r = model.evaluate(&ds, &idx, 0.5).unwrap();
    assert_eq!(r.samples, 1.0, "{r:?}");
}

#[test]
fn max_norm_holds_after_every_step() {
    let cfg = ModelConfig { maxnorm_c: 0.5, ..tiny(Variant::PmMo) };
    let mut model = Model::<f32>::new(cfg, 1).unwrap();
    let ds = toy_dataset(8, 1);
    let mut opts = build_optimizers(&model, &TrainConfig { lr: 0.1, ..TrainConfig::default() }).unwrap();
    let mut rngs = TrainRngs::new(1);
    let batch = full_batch::<f32>(&ds);
    for _ in 0..5 {
        train_step(&mut model, &batch, &mut opts, 0, &mut rngs, 8).unwrap();
        for p in model.params().iter().filter(|p| p.role.max_norm_applies()) {
            let cols = p.tensor.shape()[1];
            for row in p.tensor.data().chunks(cols) {
                assert!(row.iter().map(|v| v * v).sum::<f32>().sqrt() <= 0.5 + 1e-5);
            }
        }
    }
}

#[test]
fn fit_is_seed_deterministic_and_restores_the_best_epoch() {
    let ds = toy_dataset(40, 8);
    let split = crate::data::split_dataset(40, 8, 0.7, 0.1).unwrap();
    let cfg = TrainConfig { epochs: 6, batch_size: 8, patience: Some(2), ..TrainConfig::default() };
    let run = || {
        let mut m = Model::<f32>::new(tiny(Variant::PmMo), 8).unwrap();
        let out = fit(&mut m, &ds, &split, &cfg, 8, |_| {}).unwrap();
        (m.snapshot(), out.logs, out.best_epoch, out.best_val_weighted_f1)
    };
    let (s1, l1, b1, v1) = run();
    let (s2, l2, b2, v2) = run();
    assert_eq!((s1, &l1.iter().map(|l| l.train.total).collect::<Vec<_>>(), b1, v1),
               (s2, &l2.iter().map(|l| l.train.total).collect::<Vec<_>>(), b2, v2));
    assert!(l1.iter().all(|l| l.val_weighted_f1 <= v1));
    assert!(l1.len() <= cfg.epochs && l1.len() > b1);
}

#[test]
fn fit_rejects_mismatched_datasets() {
    let ds = Dataset::empty(5, 3, 3);
    let split = DatasetSplitFixture::three();
    let mut m = Model::<f32>::new(tiny(Variant::MMo), 1).unwrap();
    assert!(matches!(
        fit(&mut m, &ds, &split, &TrainConfig::default(), 1, |_| {}),
        Err(Error::Schema(_))
    ));
}

struct DatasetSplitFixture;

impl DatasetSplitFixture {
    fn three() -> crate::data::DatasetSplit {
        crate::data::DatasetSplit { train: vec![0], validation: vec![1], test: vec![2], seed: 0 }
    }
}

#[test]
fn divergence_names_the_term() {
    let mut model = Model::<f32>::new(tiny(Variant::MMo), 1).unwrap();
    let ds = toy_dataset(4, 1);
    let mut batch = full_batch::<f32>(&ds);
    batch.text = Tensor::full(&[4, 4], f32::NAN);
    let mut opts = build_optimizers(&model, &TrainConfig::default()).unwrap();
    let weights = |m: &Model| -> Vec<Vec<f32>> {
        m.params().iter().filter(|p| p.role.trainable()).map(|p| p.tensor.to_vec()).collect()
    };
    let before = weights(&model);
    let err = train_step(&mut model, &batch, &mut opts, 3, &mut TrainRngs::new(1), 4).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 3, .. }), "{err:?}");
    assert_eq!(before, weights(&model));
}

#[test]
fn composed_model_passes_gradcheck() {
    let cfg = ModelConfig { hidden_width: 4, classifier_width: 3, ..tiny(Variant::PmMo) };
    let mut model = Model::<f64>::new(cfg, 13).unwrap();
    let batch = full_batch::<f64>(&toy_dataset(5, 14));
    let leaves: Vec<Tensor<f64>> = model
        .params()
        .into_iter()
        .filter(|p| p.role.trainable())
        .map(|p| p.tensor)
        .collect();
    let rngs = TrainRngs::new(13);
    let err = grad_check_leaves(
        || {
            let mut r = rngs.clone();
            let f = model.forward(&batch.text, &batch.image, Some(&mut r), Mode::Train)?;
            let pass = SampledPass { sites: f.fusion.sites, nll: bernoulli_nll_sum(&f.logits, &batch.labels)? };
            Ok(elbo_v2_loss(&[pass], 0.5)?.loss)
        },
        &leaves,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn bernoulli_nll_sum(logits: &Tensor<f64>, labels: &Tensor<f64>) -> Result<Tensor<f64>> {
    crate::objectives::bernoulli_nll(logits, labels)
}

#[test]
fn checkpoint_round_trips_weights_rngs_and_moments() {
    let mut model = Model::<f32>::new(tiny(Variant::PmMo), 5).unwrap();
    let ds = toy_dataset(8, 5);
    let mut opts = build_optimizers(&model, &TrainConfig::default()).unwrap();
    let mut rngs = TrainRngs::new(5);
    let batch = full_batch::<f32>(&ds);
    train_step(&mut model, &batch, &mut opts, 0, &mut rngs, 8).unwrap();

    let ck = Checkpoint::capture(&model, 1, Some(&rngs), Some(&opts));
    let bytes = ck.encode().unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);

    let restored: Model<f32> = back.to_model().unwrap();
    assert_eq!(restored.snapshot(), model.snapshot());
    let mut opts2 = build_optimizers(&restored, &TrainConfig::default()).unwrap();
    back.restore_optimizers(&mut opts2).unwrap();
    let mut rngs2 = back.train_rngs().unwrap();
    let mut restored = restored;

    let x = train_step(&mut model, &batch, &mut opts, 1, &mut rngs, 8).unwrap();
    let y = train_step(&mut restored, &batch, &mut opts2, 1, &mut rngs2, 8).unwrap();
    assert_eq!(x, y);
    assert_eq!(model.snapshot(), restored.snapshot());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let model = Model::<f32>::new(tiny(Variant::MMo), 5).unwrap();
    let bytes = Checkpoint::capture(&model, 0, None, None).encode().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::decode(&long), Err(Error::Format { .. })));

    let other = Model::<f32>::new(ModelConfig { hidden_width: 7, ..tiny(Variant::MMo) }, 5).unwrap();
    let ck = Checkpoint::decode(&bytes).unwrap();
    assert!(matches!(ck.apply(&other), Err(Error::Schema(_))));
}

#[test]
fn vanishing_scales_match_the_deterministic_forward() {
    let cfg = ModelConfig { scale_init: 1e-7, use_batchnorm: false, ..tiny(Variant::PmMo) };
    let mut vi = Model::<f64>::new(cfg.clone(), 3).unwrap();
    let mean = |d: &Dense<f64>| match d {
        Dense::Bayes(l) => Dense::Plain(l.mean_layer()),
        Dense::Plain(_) => unreachable!(),
    };
    let mut det = Model::<f64>::new(ModelConfig { variant: Variant::MMo, ..cfg }, 3).unwrap();
    det.a.text = mean(&vi.a.text);
    det.a.image = mean(&vi.a.image);
    det.a.gate = mean(&vi.a.gate);
    det.c = vi.c.clone();
    let b = full_batch::<f64>(&toy_dataset(6, 1));
    let mut rngs = TrainRngs::new(3);
    let x = vi.forward(&b.text, &b.image, Some(&mut rngs), Mode::Train).unwrap().logits.to_vec();
    let y = det.forward(&b.text, &b.image, Some(&mut rngs), Mode::Train).unwrap().logits.to_vec();
    for (a, b) in x.iter().zip(&y) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn smoothed_loss_falls_over_fifty_steps() {
    let mut model = Model::<f32>::new(tiny(Variant::PmMo), 6).unwrap();
    let ds = toy_dataset(64, 6);
    let mut opts = build_optimizers(&model, &TrainConfig::default()).unwrap();
    let mut rngs = TrainRngs::new(6);
    let batch = full_batch::<f32>(&ds);
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut model, &batch, &mut opts, 0, &mut rngs, 64).unwrap().total)
        .collect();
    let smooth: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "{smooth:?}");
}
