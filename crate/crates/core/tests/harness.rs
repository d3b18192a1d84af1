use std::path::Path;

use visionscale_core::corpus::{build_synthetic_corpus, save_manifest};
use visionscale_core::eval::ProtocolKind;
use visionscale_core::harness::*;
use visionscale_core::scaling::{predict, CanonicalScalingParams, FitOptions};
use visionscale_core::scenarios::builtin_table1;
use visionscale_core::{CorpusManifest, Error, MixtureSpec};

fn corpus(n: usize, classes: usize) -> CorpusManifest {
    build_synthetic_corpus(n, &MixtureSpec::standard(), classes, 16, 9).unwrap()
}

fn config(fractions: &[f64], resolutions: &[usize], protocols: &[ProtocolKind]) -> GridConfig {
    GridConfig {
        fractions: fractions.to_vec(),
        resolutions: resolutions.to_vec(),
        ladder: vec!["TOY-A".into()],
        protocols: protocols.to_vec(),
        master_seed: 2024,
        epochs: 1,
        batch_size: 8,
        learning_rate: 0.05,
        ridge: 1e-4,
        finetune: FinetuneSettings {
            epochs: 1,
            ..FinetuneSettings::default()
        },
    }
}

/// Ledger text with every `wall_seconds` value blanked.
fn without_wall_clock(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            if let Some(obj) = v.as_object_mut() {
                obj.remove("wall_seconds");
            }
            serde_json::to_string(&v).unwrap()
        })
        .collect()
}

#[test]
fn cell_records_actual_subset_size_and_is_deterministic() {
    let m = corpus(2000, 10);
    let c = config(&[0.05], &[16], &[ProtocolKind::NoFinetune]);
    let cell = &design_grid(&c).unwrap()[0];
    let a = run_cell(cell, &m, &c).unwrap();
    let b = run_cell(cell, &m, &c).unwrap();
    assert_eq!(a.n_images, 100);
    assert_eq!(a.i_thousands, 0.1);
    assert_eq!(a.status, CellStatus::Ok);
    assert_eq!(a.accuracy_pct, b.accuracy_pct);
    assert_eq!(a.final_train_loss, b.final_train_loss);
    let acc = a.accuracy_pct.unwrap();
    assert!((0.0..=100.0).contains(&acc));
}

#[test]
fn cell_renders_at_its_own_resolution() {
    let m = corpus(300, 5);
    let c = config(&[0.5], &[24], &[ProtocolKind::NoFinetune]);
    let cell = &design_grid(&c).unwrap()[0];
    let direct = run_cell(cell, &m, &c).unwrap();
    let pre = run_cell(cell, &m.render_at(24).unwrap(), &c).unwrap();
    assert_eq!(direct.accuracy_pct, pre.accuracy_pct);
}

#[test]
fn finetune_cell_runs() {
    let m = corpus(500, 5);
    let c = config(&[1.0], &[16], &[ProtocolKind::Finetune2Pct]);
    let cell = &design_grid(&c).unwrap()[0];
    let r = run_cell(cell, &m, &c).unwrap();
    assert_eq!(r.status, CellStatus::Ok, "{r:?}");
    assert_eq!(r.cell.protocol.label_fraction, 0.02);
}

#[test]
fn divergent_training_is_recorded_not_thrown() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(200, 4);
    let mut c = config(&[1.0], &[16], &[ProtocolKind::NoFinetune]);
    c.learning_rate = 1e6;
    let path = dir.path().join("ledger.jsonl");
    let s = run_grid(&c, &m, &path, &RunOptions::default()).unwrap();
    assert_eq!(s.ledger.results.len(), 1);
    assert_eq!(
        s.ledger.results[0].status,
        CellStatus::Failed("nan-loss".into())
    );
    assert!(std::fs::read_to_string(&path)
        .unwrap()
        .contains("\"failed:nan-loss\""));
}

#[test]
fn worker_count_does_not_change_the_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(200, 4);
    let c = config(&[1.0, 0.5], &[16, 24], &[ProtocolKind::NoFinetune]);
    let one = dir.path().join("w1.jsonl");
    let four = dir.path().join("w4.jsonl");
    let s1 = run_grid(
        &c,
        &m,
        &one,
        &RunOptions {
            workers: 1,
            stop_after: None,
        },
    )
    .unwrap();
    run_grid(
        &c,
        &m,
        &four,
        &RunOptions {
            workers: 4,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(s1.executed, 10);
    assert_eq!(without_wall_clock(&one), without_wall_clock(&four));
    // reload reproduces the in-memory ledger exactly
    assert_eq!(RunLedger::load(&one).unwrap(), s1.ledger);
}

#[test]
fn resume_runs_exactly_the_remaining_cells() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(200, 4);
    let c = config(&[1.0, 0.5], &[16, 24], &[ProtocolKind::NoFinetune]);
    let fresh = dir.path().join("fresh.jsonl");
    let resumed = dir.path().join("resumed.jsonl");
    run_grid(&c, &m, &fresh, &RunOptions::default()).unwrap();

    let first = run_grid(
        &c,
        &m,
        &resumed,
        &RunOptions {
            workers: 2,
            stop_after: Some(3),
        },
    )
    .unwrap();
    assert_eq!(first.executed, 3);
    let second = run_grid(
        &c,
        &m,
        &resumed,
        &RunOptions {
            workers: 2,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!((second.executed, second.skipped), (7, 3));
    assert_eq!(without_wall_clock(&fresh), without_wall_clock(&resumed));

    let before = std::fs::read(&resumed).unwrap();
    let third = run_grid(&c, &m, &resumed, &RunOptions::default()).unwrap();
    assert_eq!(third.executed, 0);
    assert_eq!(std::fs::read(&resumed).unwrap(), before);
}

#[test]
fn torn_final_line_is_dropped_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(200, 4);
    let c = config(&[1.0, 0.5], &[16], &[ProtocolKind::NoFinetune]);
    let path = dir.path().join("ledger.jsonl");
    run_grid(
        &c,
        &m,
        &path,
        &RunOptions {
            workers: 1,
            stop_after: Some(2),
        },
    )
    .unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(br#"{"cell":{"fraction":0.5,"repeat"#);
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(RunLedger::load(&path).unwrap().results.len(), 2);
    let s = run_grid(&c, &m, &path, &RunOptions::default()).unwrap();
    assert_eq!(s.executed, 3);
    assert_eq!(RunLedger::load(&path).unwrap().results.len(), 5);
}

#[test]
fn mismatched_corpus_or_config_refuses_to_resume() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(200, 4);
    let c = config(&[1.0], &[16], &[ProtocolKind::NoFinetune]);
    let path = dir.path().join("ledger.jsonl");
    run_grid(&c, &m, &path, &RunOptions::default()).unwrap();
    let other = build_synthetic_corpus(200, &MixtureSpec::standard(), 4, 16, 10).unwrap();
    assert!(matches!(
        run_grid(&c, &other, &path, &RunOptions::default()),
        Err(Error::LedgerMismatch(_))
    ));
    let mut c2 = c.clone();
    c2.epochs = 2;
    assert!(matches!(
        run_grid(&c2, &m, &path, &RunOptions::default()),
        Err(Error::LedgerMismatch(_))
    ));
}

#[test]
fn corpus_survives_a_disk_round_trip_for_fingerprinting() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(50, 4);
    save_manifest(&m, dir.path()).unwrap();
    let back = visionscale_core::corpus::load_manifest(dir.path()).unwrap();
    let c = config(&[1.0], &[16], &[ProtocolKind::NoFinetune]);
    assert_eq!(LedgerHeader::new(&m, &c), LedgerHeader::new(&back, &c));
}

/// A ledger whose accuracies come exactly from `law`.
fn synthetic_ledger(
    law: &CanonicalScalingParams,
    resolutions: &[usize],
    protocols: &[ProtocolKind],
) -> RunLedger {
    let m = corpus(20, 4);
    let mut c = config(&[1.0, 0.5, 0.25, 0.05], resolutions, protocols);
    c.ladder = vec!["TOY-A".into(), "TOY-B".into()];
    let n = 20_000usize;
    let results = design_grid(&c)
        .unwrap()
        .into_iter()
        .map(|cell| {
            let n_images = (cell.fraction * n as f64).round() as usize;
            let i = n_images as f64 / 1000.0;
            let acc = predict(law, i, cell.resolution as f64).unwrap();
            ExperimentResult {
                cell,
                i_thousands: i,
                n_images,
                accuracy_pct: Some(acc),
                final_train_loss: Some(0.01),
                wall_seconds: 0.0,
                status: CellStatus::Ok,
            }
        })
        .collect();
    RunLedger {
        header: LedgerHeader::new(&m, &c),
        results,
    }
}

#[test]
fn fit_from_ledger_recovers_a_known_law() {
    let law = CanonicalScalingParams::new(6.0, 2.5, -1.5);
    let ledger = synthetic_ledger(&law, &[16, 24, 32], &[ProtocolKind::NoFinetune]);
    let report = fit_from_ledger(&ledger, &FitOptions::default());
    assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    assert_eq!(report.fits.len(), 2);
    for f in &report.fits {
        let p = f.fit.params;
        assert!(
            (p.c - 6.0).abs() < 6e-6 && (p.a - 2.5).abs() < 2.5e-6 && (p.b + 1.5).abs() < 1.5e-6,
            "{f:?}"
        );
        assert_eq!(f.fit.n_points, 39);
    }
}

#[test]
fn one_resolution_warns_every_group() {
    let law = CanonicalScalingParams::new(6.0, 2.5, -1.5);
    let ledger = synthetic_ledger(&law, &[16], &ProtocolKind::ALL);
    let report = fit_from_ledger(&ledger, &FitOptions::default());
    assert!(report.fits.is_empty());
    assert_eq!(report.warnings.len(), 4);
    assert!(
        report
            .warnings
            .iter()
            .all(|w| w.ends_with("ppi not varied")),
        "{:?}",
        report.warnings
    );
}

#[test]
fn report_files_have_the_promised_structure() {
    let dir = tempfile::tempdir().unwrap();
    let law = CanonicalScalingParams::new(6.0, 2.5, -1.5);
    let mut ledger = synthetic_ledger(&law, &[16, 24], &ProtocolKind::ALL);
    ledger.results[3].status = CellStatus::Failed("nan-loss".into());
    ledger.results[3].accuracy_pct = None;
    let fits = fit_from_ledger(&ledger, &FitOptions::default()).fits;
    let files = emit_report(&ledger, &fits, &builtin_table1(), dir.path()).unwrap();

    assert_eq!(files.charts.len(), 2);
    for chart in &files.charts {
        let svg = std::fs::read_to_string(chart).unwrap();
        assert_eq!(svg.matches("<line").count(), 1);
        assert_eq!(svg.matches(r#"class="threshold""#).count(), 1);
        assert!(svg.contains("human level"));
        assert!(svg.contains(r#"data-model="TOY-A""#) && svg.contains(r#"data-model="TOY-B""#));
    }
    let points = std::fs::read_to_string(&files.points_csv).unwrap();
    assert_eq!(points.lines().count() - 1, ledger.ok_count());
    let reloaded = load_fits(&files.fits_json).unwrap();
    assert_eq!(reloaded.len(), fits.len());
    for (a, b) in reloaded.iter().zip(&fits) {
        assert_eq!(
            (&a.model, a.protocol, a.fit.params, a.fit.objective),
            (&b.model, b.protocol, b.fit.params, b.fit.objective)
        );
    }
    let scen = std::fs::read_to_string(&files.scenarios_csv).unwrap();
    assert_eq!(scen.lines().count() - 1, fits.len() * 3);
    assert!(matches!(
        emit_report(&ledger, &[], &builtin_table1(), dir.path()),
        Err(Error::Domain(_))
    ));
}
