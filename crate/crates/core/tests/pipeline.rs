use std::collections::BTreeSet;

use gradrep::eval::{few_shot, kfold, run_pipeline, PipelineConfig};
use gradrep::learner::Mapping;
use gradrep::manifest::{load_manifest, DatasetManifest, Label};
use gradrep::scorer::Scorer;
use gradrep::snapshot::{load_model, load_repository, save_model, save_repository};
use gradrep::synth::{write_dataset, SynthConfig};

fn small(seed: u64) -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        channels: 8,
        size: 14,
        image_scale: 2,
        train: 8,
        test_normal: 4,
        test_anomalous: 4,
        seed,
        ..SynthConfig::default()
    };
    let (path, _) = write_dataset(&config, dir.path()).unwrap();
    let manifest = load_manifest(path).unwrap();
    (dir, manifest)
}

fn config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        hidden: 32,
        out_dim: 16,
        ..PipelineConfig::default()
    }
}

#[test]
fn report_describes_the_run() {
    let (_dir, manifest) = small(1);
    let cfg = config(3);
    let run = run_pipeline(&manifest, &cfg).unwrap();
    let report = &run.report;
    assert_eq!(report.train_samples, 8);
    assert_eq!(report.test_samples, 8);
    assert_eq!(report.repository_size, run.repository.len());
    assert_eq!(report.fingerprint, cfg.fingerprint());
    assert_eq!(report.config, cfg);
    let test_ids: Vec<&str> = manifest.test().map(|r| r.id.as_str()).collect();
    let report_ids: Vec<&str> = report.scores.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(test_ids, report_ids);
    assert!((0.0..=1.0).contains(&report.image_auroc));
    assert!(report.pixel_auroc.is_some());
    let training = report.training.as_ref().unwrap();
    assert_eq!(training.epochs, run.history.as_ref().unwrap().losses.len());
    for (r, s) in run.results.iter().zip(&report.scores) {
        assert_eq!(r.image_score, s.image_score);
        assert_eq!((r.attention_map.height(), r.attention_map.width()), (28, 28));
        assert_eq!((r.pixel_map.height(), r.pixel_map.width()), (14, 14));
    }
}

#[test]
fn reports_are_reproducible_and_seed_sensitive() {
    let (_dir, manifest) = small(2);
    let a = run_pipeline(&manifest, &config(5)).unwrap().report.to_json();
    let b = run_pipeline(&manifest, &config(5)).unwrap().report.to_json();
    let c = run_pipeline(&manifest, &config(6)).unwrap().report.to_json();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn identity_mapping_skips_training() {
    let (_dir, manifest) = small(3);
    let run = run_pipeline(&manifest, &PipelineConfig { discriminative: false, ..config(0) }).unwrap();
    assert!(run.history.is_none());
    assert!(run.report.training.is_none());
    assert_eq!(run.mapping, Mapping::Identity);
}

#[test]
fn reloaded_snapshots_score_identically() {
    let (_dir, manifest) = small(4);
    let cfg = config(1);
    let run = run_pipeline(&manifest, &cfg).unwrap();
    let Mapping::Mlp(params) = &run.mapping else { panic!("trained mapping expected") };
    let store = tempfile::tempdir().unwrap();
    save_repository(store.path(), &run.repository).unwrap();
    save_model(store.path().join("model"), params, &cfg.train_config(), run.history.as_ref()).unwrap();

    let repository = load_repository(store.path()).unwrap();
    let (loaded, _) = load_model(store.path().join("model")).unwrap();
    let scorer = Scorer::new(Mapping::Mlp(loaded), &repository, cfg.score_config()).unwrap();
    let test: Vec<_> = manifest.test().collect();
    let rescored = scorer.score_all(&test, &manifest).unwrap();
    assert_eq!(rescored, run.results);
}

#[test]
fn kfold_holds_out_every_normal_once() {
    let (_dir, manifest) = small(5);
    let report = kfold(&manifest, &config(2), 4).unwrap();
    assert_eq!(report.runs.len(), 4);
    let normals: BTreeSet<&str> = manifest
        .samples
        .iter()
        .filter(|s| s.label == Label::Normal)
        .map(|s| s.id.as_str())
        .collect();
    let mut seen = BTreeSet::new();
    for (fold, run) in report.held_out.iter().zip(&report.runs) {
        for id in fold {
            assert!(seen.insert(id.as_str()), "{id} held out twice");
        }
        assert_eq!(run.train_samples, normals.len() - fold.len());
        assert_eq!(run.test_samples, fold.len() + 4);
        let tested: BTreeSet<&str> = run.scores.iter().map(|s| s.id.as_str()).collect();
        assert!(fold.iter().all(|id| tested.contains(id.as_str())));
    }
    assert_eq!(seen, normals);
    let mean = report.runs.iter().map(|r| r.image_auroc).sum::<f64>() / 4.0;
    assert!((mean - report.mean_image_auroc).abs() < 1e-12);
}

#[test]
fn few_shot_trains_on_k_images_per_seed() {
    let (_dir, manifest) = small(6);
    let report = few_shot(&manifest, &config(0), 2, &[10, 11, 12]).unwrap();
    assert_eq!(report.runs.len(), 3);
    for (run, seed) in report.runs.iter().zip([10, 11, 12]) {
        assert_eq!(run.train_samples, 2);
        assert_eq!(run.test_samples, 8);
        assert_eq!(run.seed, seed);
    }
    assert!(few_shot(&manifest, &config(0), 9, &[0]).is_err());
    assert!(few_shot(&manifest, &config(0), 0, &[0]).is_err());
}
