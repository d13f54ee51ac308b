use super::*;
use crate::alignment::TslReduction;
use crate::datagen::{generate_dataset, DatasetSpec};
use crate::flism::{run_flism, AttributeEmbedder, FlismConfig, Strategy};

fn aligned(n: usize, seed: u64, strategy: Strategy) -> Vec<AlignedRecord> {
    let recs = generate_dataset(&DatasetSpec {
        n_records: n,
        seed,
        min_objects: 1,
        max_objects: 3,
        image_size: 32,
        verbosity: 0,
    })
    .unwrap();
    let cfg = FlismConfig {
        strategy,
        use_partitions: true,
    };
    run_flism(&recs, None, &cfg, &AttributeEmbedder::default()).unwrap()
}

fn tiny_config() -> TrainConfig {
    let model = ModelConfig::tiny();
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        keep_checkpoints: 0,
        model,
        ..TrainConfig::default()
    }
}

fn setup(n: usize, strategy: Strategy, cfg: &TrainConfig) -> (Model, Vec<PreparedRecord>) {
    let data = aligned(n, 21, strategy);
    let model = init_model(build_vocab(&data), cfg).unwrap();
    let prepared = prepare(&data, &model).unwrap();
    (model, prepared)
}

#[test]
fn batch_shapes() {
    let cfg = tiny_config();
    let (_, recs) = setup(4, Strategy::Top1, &cfg);
    let b = make_batch(&recs, &[0, 1]).unwrap();
    assert_eq!(b.images.len(), 2);
    assert_eq!(b.captions.len(), 2);
    for len in [b.crops.len(), b.sentences.len(), b.patch_sets.len(), b.token_sets.len(), b.weights.len()] {
        assert_eq!(len, 2);
    }
    assert_eq!(b.primary, vec![0, 1]);

    let (_, recs) = setup(4, Strategy::Top3Uniform, &cfg);
    let b = make_batch(&recs, &[2, 3]).unwrap();
    let k = recs[2].pairs.len() + recs[3].pairs.len();
    assert_eq!(b.crops.len(), k);
    assert_eq!(b.owner.len(), k);
    assert_eq!(b.primary, vec![0, recs[2].pairs.len()]);
    assert_eq!(make_batch(&recs, &[2, 3]).unwrap(), b);
}

#[test]
fn missing_pairs_is_an_error() {
    let cfg = tiny_config();
    let mut data = aligned(2, 1, Strategy::Top1);
    let model = init_model(build_vocab(&data), &cfg).unwrap();
    data[1].local_pairs.clear();
    assert!(matches!(prepare(&data, &model), Err(Error::MissingLocalPairs(_))));
}

#[test]
fn truncated_sentences_are_dropped() {
    let mut cfg = tiny_config();
    // room for the summary sentence and little else
    cfg.model.text.max_len = 24;
    cfg.model.text.pe_base_len = 8;
    let data = aligned(12, 4, Strategy::Top3Uniform);
    let model = init_model(build_vocab(&data), &cfg).unwrap();
    let recs = prepare(&data, &model).unwrap();
    let before: usize = data.iter().map(|a| a.local_pairs.len()).sum();
    let after: usize = recs.iter().map(|r| r.pairs.len()).sum();
    assert!(after < before);
    for r in &recs {
        let w: f64 = r.pairs.iter().map(|p| p.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);
        assert!(r.caption.len() <= 24);
    }
    // a record whose only pair is gone is excluded, not an error
    let top1 = aligned(12, 4, Strategy::Top1);
    let recs = prepare(&top1, &model).unwrap();
    assert!(recs.len() < top1.len());
}

#[test]
fn zero_learning_rate_and_zero_weights_leave_parameters() {
    let cfg = tiny_config();
    let (model, recs) = setup(4, Strategy::Top1, &cfg);
    let batch = make_batch(&recs, &[0, 1, 2, 3]).unwrap();

    let mut m = model.clone();
    let mut opt = AdamW::new(0.0, 0.0, m.num_params());
    let loss = train_step(&mut m, &mut opt, &batch, &cfg.objective_options()).unwrap();
    assert!(loss.total > 0.0);
    assert_eq!(m, model);

    let mut opts = cfg.objective_options();
    opts.weights.global = 0.0;
    opts.weights.local = 0.0;
    opts.weights.tsl = 0.0;
    let mut m = model.clone();
    let mut opt = AdamW::new(1e-2, 0.0, m.num_params());
    let loss = train_step(&mut m, &mut opt, &batch, &opts).unwrap();
    assert_eq!(loss.total, 0.0);
    assert_eq!(m, model);
}

#[test]
fn repeated_runs_match() {
    let cfg = tiny_config();
    let run = || {
        let (mut m, recs) = setup(8, Strategy::Top3Weighted, &cfg);
        let mut opt = AdamW::new(1e-3, 0.0, m.num_params());
        (0..5)
            .map(|s| {
                let b = make_batch(&recs, &[s % 8, (s + 3) % 8, (s + 5) % 8]).unwrap();
                train_step(&mut m, &mut opt, &b, &cfg.objective_options()).unwrap().total
            })
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|l| l.is_finite()));
}

#[test]
fn one_epoch_step_count() {
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let (model, recs) = setup(8, Strategy::Top1, &cfg);
    let state = fit(&recs, TrainState::new(model, &cfg), &cfg, None).unwrap();
    assert_eq!(state.step, 2);
    assert_eq!(state.history.len(), 2);
    assert_eq!(state.epoch, 1);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = tiny_config();
    let (model, recs) = setup(10, Strategy::Top1, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let full = fit(&recs, TrainState::new(model.clone(), &cfg), &cfg, Some(dir.path())).unwrap();
    assert_eq!(full.step, 6);

    let resumed_from = TrainState::load(&checkpoint_path(dir.path(), 1)).unwrap();
    assert_eq!(resumed_from.epoch, 1);
    assert_eq!(resumed_from.history, full.history[..3]);
    let other = tempfile::tempdir().unwrap();
    let resumed = fit(&recs, resumed_from, &cfg, Some(other.path())).unwrap();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.model, full.model);
    assert_eq!(
        fs::read(dir.path().join(LOSS_LOG)).unwrap(),
        fs::read(other.path().join(LOSS_LOG)).unwrap()
    );
    assert_eq!(Model::load(&dir.path().join(FINAL_CHECKPOINT)).unwrap(), full.model);
}

#[test]
fn gradient_check_and_fault_injection() {
    let cfg = tiny_config();
    let (model, recs) = setup(3, Strategy::Top3Weighted, &cfg);
    // nudge away from the identity-initialized heads and the default scale
    let mut model = model;
    model.heads.text.first.w.mapv_inplace(|v| v * 0.9 + 0.01);
    model.log_scale = 1.0;
    let batch = make_batch(&recs, &[0, 1, 2]).unwrap();
    let mut opts = cfg.objective_options();
    opts.reduction = TslReduction::Full;
    let report = grad_check(&model, &batch, &opts, 1e-4).unwrap();
    assert!(report.passed, "{:?}", report.failing);
    assert!(report.tensors.iter().any(|t| t.name == "log_scale"));

    let opts_nsg = ObjectiveOptions {
        stop_grad_targets: false,
        ..opts
    };
    let grads = batch_loss(&model, &batch, &opts_nsg, true).unwrap().1.unwrap();
    let mut bad = grads.clone();
    bad.encoder.vision.patch_embed.b[0] += 1e-2;
    let report = compare_gradients(
        &model,
        &bad,
        |m| Ok(batch_loss(m, &batch, &opts_nsg, false)?.0.total),
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
    assert_eq!(report.failing, vec!["vision.patch_embed.b".to_string()]);
}

#[test]
fn projection_gradients_vanish_without_tsl() {
    let cfg = tiny_config();
    let (model, recs) = setup(4, Strategy::Top1, &cfg);
    let batch = make_batch(&recs, &[0, 1, 2, 3]).unwrap();
    let mut opts = cfg.objective_options();
    opts.weights.tsl = 0.0;
    let g = batch_loss(&model, &batch, &opts, true).unwrap().1.unwrap();
    assert!(g.heads.flatten().iter().all(|&v| v == 0.0));
    assert!(g.encoder.vision.flatten().iter().any(|&v| v != 0.0));
}

#[test]
fn local_branch_shares_encoder_parameters() {
    let cfg = tiny_config();
    let (model, recs) = setup(4, Strategy::Top1, &cfg);
    let batch = make_batch(&recs, &[0, 1, 2, 3]).unwrap();
    let mut opts = cfg.objective_options();
    opts.weights.global = 0.0;
    opts.weights.tsl = 0.0;
    let g = batch_loss(&model, &batch, &opts, true).unwrap().1.unwrap();
    // only the local contrastive term is live, and it reaches the very
    // tensors the global branch uses
    assert!(g.encoder.vision.patch_embed.w.iter().any(|&v| v != 0.0));
    assert!(g.encoder.text.token_embed.iter().any(|&v| v != 0.0));
}

#[test]
fn zero_local_weights_equal_removed_terms() {
    let mut cfg = tiny_config();
    cfg.weights.local = 0.0;
    cfg.weights.tsl = 0.0;
    cfg.epochs = 1;
    let (model, recs) = setup(8, Strategy::Top1, &cfg);
    let a = fit(&recs, TrainState::new(model.clone(), &cfg), &cfg, None).unwrap();
    // with the local terms off, local data must not matter at all
    let mut stripped = recs.clone();
    for r in &mut stripped {
        for p in &mut r.pairs {
            p.crop.fill(0.5);
            p.sentence.ids = vec![1, 2];
        }
    }
    let b = fit(&stripped, TrainState::new(model, &cfg), &cfg, None).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
}


