//! Library-level pipeline and cross-module invariants.

use goalign::alignment::select_patch_indices;
use goalign::datagen::{generate_dataset, read_manifest, split_sentences, write_manifest, DatasetSpec};
use goalign::encoders::{interpolate_positional, tokenize};
use goalign::evalkit::{evaluate, recall_at_k};
use goalign::flism::{
    partition_boxes, read_flism_manifest, run_flism, write_flism_manifest, AttributeEmbedder, FlismConfig, Strategy,
};
use goalign::image_ops::BBox;
use goalign::trainer::{build_vocab, fit, init_model, prepare, ModelConfig, TrainConfig, TrainState};
use ndarray::Array2;
use proptest::prelude::*;

fn small_data(n: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_records: n,
        seed,
        min_objects: 1,
        max_objects: 3,
        image_size: 32,
        verbosity: 0,
    }
}

#[test]
fn manifests_survive_the_disk_between_stages() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_dataset(&small_data(6, 4)).unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&records, &manifest).unwrap();
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back, records);

    let aligned = run_flism(&back, None, &FlismConfig::default(), &AttributeEmbedder::default()).unwrap();
    let flism = dir.path().join("flism.jsonl");
    write_flism_manifest(&aligned, &flism).unwrap();
    assert_eq!(read_flism_manifest(&flism).unwrap(), aligned);
}

#[test]
fn every_sentence_span_maps_to_tokens() {
    for rec in generate_dataset(&small_data(10, 8)).unwrap() {
        let vocab = goalign::encoders::Vocab::from_texts([rec.caption.as_str()]);
        let tok = tokenize(&rec.caption, &vocab, 256).unwrap();
        assert!(!tok.truncated);
        let spans = split_sentences(&rec.caption);
        assert_eq!(spans, rec.sentences);
        for s in &spans {
            let set = goalign::alignment::select_token_indices(s.start, s.end, &tok).unwrap();
            assert!(!set.indices.is_empty());
            assert!(set.indices.iter().all(|&i| i > 0 && i < tok.ids.len() - 1));
        }
    }
}

#[test]
fn short_training_lowers_the_loss_and_evaluation_is_read_only() {
    let records = generate_dataset(&small_data(16, 12)).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        learning_rate: 3e-3,
        seed: 2,
        strategy: Strategy::Top3Weighted,
        model: ModelConfig::tiny(),
        ..TrainConfig::default()
    };
    let fcfg = FlismConfig {
        strategy: cfg.strategy,
        use_partitions: true,
    };
    let aligned = run_flism(&records, None, &fcfg, &AttributeEmbedder::default()).unwrap();
    let model = init_model(build_vocab(&aligned), &cfg).unwrap();
    let prepared = prepare(&aligned, &model).unwrap();
    let state = fit(&prepared, TrainState::new(model, &cfg), &cfg, None).unwrap();
    assert_eq!(state.history.len(), 8);
    let mean = |h: &[goalign::trainer::StepLog]| h.iter().map(|s| s.total).sum::<f64>() / h.len() as f64;
    assert!(mean(&state.history[6..]) < mean(&state.history[..2]));

    let before = state.model.checksum();
    let report = evaluate(&state.model, &records, &[1, 4, 16, 40]).unwrap();
    assert_eq!(state.model.checksum(), before);
    for dir in [&report.t2i, &report.i2t] {
        let v: Vec<f64> = dir.values().copied().collect();
        assert!(v.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(dir[&16], 1.0);
        assert_eq!(dir[&40], 1.0);
    }
}

proptest! {
    #[test]
    fn patch_sets_are_sorted_nonempty_and_in_grid(
        x1 in 0i64..60, y1 in 0i64..60, w in 1i64..64, h in 1i64..64, p in prop::sample::select(vec![4usize, 8, 16]),
    ) {
        let b = BBox::new(x1, y1, (x1 + w).min(64), (y1 + h).min(64));
        let set = select_patch_indices(&b, 64, p);
        let g = 64 / p;
        prop_assert!(!set.indices.is_empty());
        prop_assert!(set.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(set.indices.iter().all(|&i| i < g * g));
    }

    #[test]
    fn quadrants_cover_the_grid_once(half_cells in 1usize..6, p in prop::sample::select(vec![2usize, 4, 8])) {
        let size = 2 * half_cells * p;
        let g = size / p;
        let mut seen = vec![0; g * g];
        for b in &partition_boxes(size, size)[..4] {
            for i in select_patch_indices(b, size, p).indices {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn interpolation_keeps_prefix_and_endpoints(old in 2usize..30, extra in 0usize..60, keep_frac in 0.0f64..1.0) {
        let keep = ((old as f64 * keep_frac) as usize).min(old - 1);
        let pe = Array2::from_shape_fn((old, 3), |(i, j)| (i * 7 + j) as f64 * 0.37 - 1.0);
        let out = interpolate_positional(&pe, old + extra, keep).unwrap();
        prop_assert_eq!(out.nrows(), old + extra);
        for i in 0..keep {
            prop_assert_eq!(out.row(i), pe.row(i));
        }
        prop_assert_eq!(out.row(keep), pe.row(keep));
        prop_assert_eq!(out.row(old + extra - 1), pe.row(old - 1));
    }

    #[test]
    fn recall_is_a_fraction_and_monotone(
        q in 1usize..8, extra in 0usize..6, vals in prop::collection::vec(0u8..4, 8 * 14), seed in 0usize..1000,
    ) {
        let g = q + extra;
        let sim = Array2::from_shape_fn((q, g), |(i, j)| vals[i * 14 + j] as f64);
        let gt: Vec<usize> = (0..q).map(|i| (i * 31 + seed) % g).collect();
        let mut prev = 0.0;
        for k in 1..=g {
            let r = recall_at_k(&sim, &gt, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }
}
