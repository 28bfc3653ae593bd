use std::path::Path;
use std::process::{Command, Output};

use trajmamba::config::RunConfig;
use trajmamba::pretrain::read_loss_curve;
use trajmamba::tasks::EvalReport;
use trajmamba::tensor::checkpoint::Checkpoint;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trajmamba")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// Small run rooted at `dir`, written as a config file.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = RunConfig::default()
        .with_overrides(&[
            "num_traj=400".into(),
            "city_width=12".into(),
            "city_height=12".into(),
            format!("data_dir=\"{}\"", dir.join("data").display()),
            format!("checkpoint_dir=\"{}\"", dir.join("ck").display()),
            format!("out_dir=\"{}\"", dir.join("out").display()),
            "embed_dim=8".into(),
            "model_dim=8".into(),
            "state_dim=4".into(),
            "heads=2".into(),
            "layers=1".into(),
            "fourier_freqs=2".into(),
            "view_heads=2".into(),
            "view_layers=1".into(),
            "batch_size=8".into(),
            "epochs=3".into(),
            "head_max_epochs=3".into(),
            "bench_lengths=[16,32]".into(),
            "bench_reps=1".into(),
        ])
        .unwrap();
    let path = dir.join("run.json");
    cfg.save(&path).unwrap();
    path
}

fn ok(args: &[&str]) -> String {
    let o = bin(args);
    assert!(o.status.success(), "{args:?} failed: {}", text(&o));
    text(&o)
}

#[test]
fn help_lists_every_subcommand() {
    let o = bin(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let out = text(&o);
    for sub in ["gen-data", "preprocess", "annotate", "pretrain", "embed", "eval", "bench"] {
        assert!(out.contains(sub), "missing {sub} in help:\n{out}");
    }
    let sub = bin(&["eval", "--help"]);
    assert_eq!(sub.status.code(), Some(0));
    assert!(text(&sub).contains("--set"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["pretrain", "--bogus"]).status.code(), Some(1));
    assert_eq!(bin(&[]).status.code(), Some(1));
    assert_eq!(bin(&["eval", "--task", "teleport"]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("nowhere");
    let o = bin(&["eval", "--task", "simsearch", "--set", &format!("checkpoint_dir=\"{}\"", ck.display())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains(&ck.display().to_string()), "{}", text(&o));
}

#[test]
fn config_errors_exit_2() {
    let o = bin(&["gen-data", "--set", "num_trajs=5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("num_trajs"));
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["gen-data", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin(&["preprocess", "--set", &format!("data_dir=\"{}\"", dir.path().display())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("raw_trajectories.csv"));
}

fn full_pipeline(root: &Path) -> (Vec<trajmamba::pretrain::EpochStats>, EvalReport) {
    let cfg = small_config(root);
    let c = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", c]);
    ok(&["preprocess", "--config", c]);
    ok(&["annotate", "--config", c]);
    ok(&["pretrain", "--config", c, "--set", "epochs=2"]);
    ok(&["embed", "--config", c]);
    ok(&["eval", "--config", c, "--task", "eta"]);
    ok(&["eval", "--config", c, "--task", "simsearch", "--set", "num_queries=10", "--set", "db_size=20"]);
    ok(&["eval", "--config", c, "--task", "destination", "--mode", "finetune"]);
    let curve = read_loss_curve(&root.join("out/loss_curve.csv")).unwrap();
    let report = EvalReport::load(&root.join("out/report_arrival_time_frozen.json")).unwrap();
    (curve, report)
}

#[test]
fn pipeline_round_trips_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (curve_a, report_a) = full_pipeline(a.path());
    let (curve_b, report_b) = full_pipeline(b.path());

    // --set epochs=2 wins over the file's epochs=3
    assert_eq!(curve_a.len(), 2);
    assert_eq!(curve_a, curve_b);
    assert!(report_a.same_result(&report_b), "{report_a:?} vs {report_b:?}");
    assert_eq!(report_a.task, "arrival_time");
    assert!(report_a.metric("mae").unwrap() > 0.0);

    let data = a.path().join("data");
    for f in ["raw_trajectories.csv", "roads.json", "pois.csv", "trajectories.csv", "splits.json", "annotations.csv"] {
        assert!(data.join(f).exists(), "{f}");
        assert_eq!(std::fs::read(data.join(f)).unwrap(), std::fs::read(b.path().join("data").join(f)).unwrap(), "{f}");
    }
    let splits = trajmamba::data::DatasetSplits::load(&data.join("splits.json")).unwrap();
    splits.validate().unwrap();
    let trajs = trajmamba::data::read_trajectories(&data.join("trajectories.csv")).unwrap();
    let emb = Checkpoint::load(&a.path().join("out/embeddings")).unwrap();
    assert_eq!(emb.len(), trajs.len());
    for t in &trajs {
        assert_eq!(emb.require(&t.id.to_string()).unwrap().shape(), &[8]);
    }
    assert_eq!(splits.train.len() + splits.val.len() + splits.test.len(), trajs.len());

    let csv = std::fs::read_to_string(a.path().join("out/reports.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let sim = EvalReport::load(&a.path().join("out/report_simsearch_frozen.json")).unwrap();
    let (acc1, acc5, rank) = (sim.metric("acc@1").unwrap(), sim.metric("acc@5").unwrap(), sim.metric("mean_rank").unwrap());
    assert!(acc1 <= acc5 && rank >= 1.0);
    assert!(a.path().join("out/report_destination_finetune.json").exists());
    assert!(csv.starts_with("task,mode,seed,config_hash,timestamp,"));
}

#[test]
fn bench_writes_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ok(&["bench", "--config", cfg.to_str().unwrap()]);
    assert!(out.starts_with("n,trajmamba_s,attention_s"));
    let rows = trajmamba::bench::read_bench_csv(&dir.path().join("out/bench.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![16, 32]);
}
