use std::path::Path;
use std::process::{Command, Output};

fn reflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reflow"))
        .args(args)
        .env("REFLOW_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(
        &p,
        format!(
            "[dataset]\nsample_count = 800\n\n[velocity]\nhidden_widths = [16]\n\n[velocity.train]\nepochs = 3\n\n\
             [oracle]\nsample_count = 1500\n\n[guidance]\neta = 50.0\n\n\
             [run]\nnum_seeds = 4\noutput_dir = \"{}\"\n",
            dir.join("out").display()
        ),
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&reflow(&["bogus"])), 1);
    assert_eq!(code(&reflow(&["sample", "--guided", "maybe"])), 1);
    assert_eq!(code(&reflow(&["plot"])), 1);
    assert_eq!(code(&reflow(&["--help"])), 0);
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[guidance]\nK = 3\nwindow = [9, 2]\n").unwrap();
    let o = reflow(&["make-data", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
}

#[test]
fn selfcheck_passes() {
    let o = reflow(&["selfcheck", "--jobs", "2"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("[PASS]")).count(),
        10,
        "{text}"
    );
}

#[test]
fn missing_checkpoints_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    assert_eq!(code(&reflow(&["sample", "--config", &cfg])), 3);
}

#[test]
fn malformed_csv_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "t,alignment_score\n0.5,\"unterminated\n").unwrap();
    let out = dir.path().join("plots");
    assert_eq!(
        code(&reflow(&[
            "plot",
            p.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])),
        3
    );
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    for args in [
        vec!["make-data", "--config", &cfg],
        vec!["train", "--config", &cfg, "--jobs", "2"],
        vec![
            "sample", "--config", &cfg, "--guided", "true", "--seed", "100",
        ],
    ] {
        let o = reflow(&args);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let metrics = dir.path().join("out/sample_guided/metrics.csv");
    let first = std::fs::read(&metrics).unwrap();
    assert_eq!(
        code(&reflow(&[
            "sample", "--config", &cfg, "--guided", "true", "--seed", "100"
        ])),
        0
    );
    assert_eq!(std::fs::read(&metrics).unwrap(), first);

    let runs = std::fs::read_to_string(dir.path().join("out/sample_guided/runs.jsonl")).unwrap();
    assert!(runs.lines().next().unwrap().contains("\"seed\":100"));

    let plots = dir.path().join("plots");
    let traj = dir
        .path()
        .join("out/sample_guided/trajectories/o0a1_seed100.csv");
    let o = reflow(&[
        "plot",
        metrics.to_str().unwrap(),
        traj.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&plots).unwrap().count(), 2);
}
