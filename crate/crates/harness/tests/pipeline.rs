mod common;

use alf_core::codec::Checkpoint;
use alf_harness::pipeline::{load_models, run_pipeline, run_stages, Layout, RunManifest, Stage};
use alf_harness::sweep::{read_rows, sweep_to_files};
use alf_harness::{report, HarnessError};

fn trained(manifest: &RunManifest) -> Vec<(Stage, f64)> {
    manifest.stages.iter().filter(|s| !s.cached).map(|s| (s.stage, s.beta)).collect()
}

#[test]
fn second_run_is_fully_cached() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny(dir.path());
    let first = run_pipeline(&config).unwrap();
    assert_eq!(first.stages.len(), 8);
    assert!(first.stages.iter().all(|s| !s.cached));
    let second = run_pipeline(&config).unwrap();
    assert!(second.all_cached());
    for (a, b) in first.stages.iter().zip(&second.stages) {
        assert_eq!(a.sha256, b.sha256);
    }
    let on_disk = RunManifest::load(&Layout::new(&config.run.out_dir).manifest()).unwrap();
    assert_eq!(on_disk.config_hash, config.hash());
    assert_eq!(on_disk.held_out.count, 2);
    assert_eq!(on_disk.held_out.first_index, 18);
}

#[test]
fn deleting_the_fusion_checkpoint_retrains_only_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny(dir.path());
    let layout = Layout::new(&config.run.out_dir);
    run_pipeline(&config).unwrap();
    let path = layout.checkpoint(Stage::Fusion, 0.5);
    let old = std::fs::read(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let again = run_pipeline(&config).unwrap();
    assert_eq!(trained(&again), vec![(Stage::Fusion, 0.5)]);
    assert_eq!(std::fs::read(&path).unwrap(), old, "retraining is deterministic");
}

#[test]
fn changing_a_stage_option_retrains_that_stage_and_its_dependents() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::tiny(dir.path());
    run_pipeline(&config).unwrap();
    config.fusion.lambda = 0.5;
    let m = run_pipeline(&config).unwrap();
    assert_eq!(trained(&m), vec![(Stage::Fusion, 0.1), (Stage::Fusion, 0.5)]);
    config.aux.steps += 1;
    let m = run_pipeline(&config).unwrap();
    let want = vec![(Stage::Aux, 0.1), (Stage::Fusion, 0.1), (Stage::Aux, 0.5), (Stage::Fusion, 0.5)];
    assert_eq!(trained(&m), want);
}

#[test]
fn stage_checkpoints_hold_only_their_own_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny(dir.path());
    run_pipeline(&config).unwrap();
    let layout = Layout::new(&config.run.out_dir);
    let names = |stage| -> Vec<String> {
        let c = Checkpoint::load(layout.checkpoint(stage, 0.1)).unwrap();
        c.params.iter().map(|(n, _)| n.to_string()).collect()
    };
    let fusion = names(Stage::Fusion);
    assert!(!fusion.is_empty());
    assert!(fusion.iter().all(|n| n.starts_with("denoiser.")), "{fusion:?}");
    let base = names(Stage::Base);
    assert!(base.iter().all(|n| ["g_a.", "g_s.", "entropy."].iter().any(|p| n.starts_with(p))));
    assert!(names(Stage::Aux).iter().all(|n| !n.starts_with("g_s.") && !n.starts_with("entropy.")));
}

#[test]
fn partial_runs_stop_at_the_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny(dir.path());
    let m = run_stages(&config, Stage::Aux).unwrap();
    assert_eq!(m.stages.len(), 4);
    let layout = Layout::new(&config.run.out_dir);
    assert!(!layout.checkpoint(Stage::Fusion, 0.1).exists());
    match load_models(&layout, 0.1) {
        Err(HarnessError::MissingCheckpoint { stage, beta, .. }) => {
            assert_eq!((stage, beta), ("fusion", 0.1));
        }
        other => panic!("expected a missing checkpoint, got {:?}", other.err()),
    }
}

#[test]
fn sweep_csv_is_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::tiny(dir.path());
    run_pipeline(&config).unwrap();
    let layout = Layout::new(&config.run.out_dir);
    let out = sweep_to_files(&config).unwrap();
    let first = std::fs::read(layout.sweep_csv()).unwrap();
    config.run.threads = 3;
    sweep_to_files(&config).unwrap();
    assert_eq!(std::fs::read(layout.sweep_csv()).unwrap(), first);

    // Per beta: fusion@2 at both taus, fusion@1 at tau 0, variant1 at both.
    assert_eq!(out.rows.len(), 2 * 5);
    assert_eq!(out.timings.len(), 2 * 2);
    assert_eq!(read_rows(&layout.sweep_csv()).unwrap(), out.rows);
    for r in &out.rows {
        assert!(r.bpp > 0.0 && r.psnr_db.is_finite() && (-1.0..=1.0).contains(&r.ssim) && r.pdist >= 0.0);
    }
    let manifest = RunManifest::load(&layout.manifest()).unwrap();
    assert!(manifest.outputs.iter().any(|o| o.path == layout.sweep_csv()));

    let figures = report(&[layout.sweep_csv()], &dir.path().join("fig")).unwrap();
    let names: Vec<_> = figures.files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["rd_psnr.svg", "rd_ssim.svg", "rd_pdist.svg", "tradeoff.svg", "bd_table.md"]);
}
