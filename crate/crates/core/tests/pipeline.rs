use std::path::Path;

use reflow_core::config::ExperimentConfig;
use reflow_core::harness::{self, read_rows, sweep_cells};
use reflow_core::Error;

fn small_config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
[dataset]
sample_count = 1000
seed = 5

[velocity]
hidden_widths = [16]

[velocity.train]
epochs = 4

[oracle]
sample_count = 1500

[guidance]
eta = 100.0

[run]
num_seeds = 6
instructions = "all"
output_dir = "{}"

[sweep]
K = [0, 2]
window = [[0, 5], [10, 15]]
eta = [10.0]
"#,
        dir.display()
    );
    ExperimentConfig::from_str(&text).unwrap()
}

#[test]
fn make_data_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = harness::cmd_make_data(&small_config(a.path())).unwrap();
    let fb = harness::cmd_make_data(&small_config(b.path())).unwrap();
    assert_eq!(
        std::fs::read(fa.generator).unwrap(),
        std::fs::read(fb.generator).unwrap()
    );
    assert_eq!(
        std::fs::read(fa.oracle).unwrap(),
        std::fs::read(fb.oracle).unwrap()
    );
}

#[test]
fn full_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    harness::cmd_make_data(&cfg).unwrap();
    let trained = harness::cmd_train(&cfg).unwrap();
    assert!(trained.oracle.heldout_accuracy >= 0.98);
    assert!(trained.velocity.heldout_loss < trained.velocity.zero_field_loss);

    let unguided = harness::cmd_sample(&cfg, false).unwrap();
    assert_eq!(unguided.rows.len(), 4);
    assert!(unguided.rows.iter().all(|r| r.num_runs == 6 && !r.guided));
    let guided = harness::cmd_sample(&cfg, true).unwrap();
    assert!(guided
        .rows
        .iter()
        .all(|r| r.guided && r.mean_grad_norm.is_some()));
    assert_eq!(read_rows(&guided.metrics_csv).unwrap(), guided.rows);
    let runs = std::fs::read_to_string(guided.metrics_csv.with_file_name("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 24);
    assert!(guided
        .metrics_csv
        .with_file_name("trajectories")
        .join("o0a1_seed3.csv")
        .exists());

    // eta = 0 reproduces the unguided finals exactly
    cfg.guidance.eta = 0.0;
    let noop = harness::cmd_sample(&cfg, true).unwrap();
    for (a, b) in noop
        .outcomes
        .iter()
        .flatten()
        .zip(unguided.outcomes.iter().flatten())
    {
        assert_eq!(a.final_observation, b.final_observation);
        assert_eq!(a.success, b.success);
    }

    let sweep = harness::cmd_sweep(&cfg).unwrap();
    let cells = sweep_cells(&cfg);
    assert_eq!(cells.len(), 5);
    assert_eq!(sweep.rows.len(), cells.len() * 4);
    assert_eq!(read_rows(&sweep.sweep_csv).unwrap().len(), sweep.rows.len());
    assert!(sweep.successes.iter().flatten().all(|s| s.len() == 6));

    let plots = harness::cmd_plot(&[sweep.sweep_csv.clone()], &dir.path().join("plots")).unwrap();
    assert_eq!(plots.len(), 1);
    assert!(std::fs::read_to_string(&plots[0])
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let missing = harness::cmd_sample(&cfg, false).unwrap_err();
    assert_eq!(missing.exit_code(), 3, "{missing}");

    harness::cmd_make_data(&cfg).unwrap();
    let mut weak = cfg.clone();
    weak.oracle.train.epochs = 0;
    let e = harness::cmd_train(&weak).unwrap_err();
    assert!(matches!(e, Error::Threshold(_)), "{e}");
    assert_eq!(e.exit_code(), 2);

    let bad = ExperimentConfig::from_str("[guidance]\nwindow = [10, 5]\n").unwrap_err();
    assert_eq!(bad.exit_code(), 1);
}
