use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use compflow::envs::EnvPair;
use compflow::flow::ConditionalFlow;
use compflow::persist::{parse_dataset, read_metrics, RunConfig, KEYS};

const BIN: &str = env!("CARGO_BIN_EXE_compflow");

/// Small enough that a full run takes a second or two.
const TINY_RL: &[&str] = &[
    "env.horizon=50",
    "rl.width=16",
    "rl.batch=32",
    "rl.k=1",
    "rl.total_steps=600",
    "rl.warmup=100",
    "rl.eval_interval=200",
    "rl.eval_episodes=2",
    "data.offline_size=400",
    "flow.layers=1",
    "flow.width=16",
    "flow.batch=64",
    "flow.iterations=20",
    "flow.online_iterations=5",
    "flow.online_batch=64",
    "flow.train_freq=200",
    "gap.m=2",
];

fn compflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("COMPFLOW_RUNS_DIR", dir.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

fn seed_dirs(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for hash in fs::read_dir(root).unwrap() {
        for seed in fs::read_dir(hash.unwrap().path()).unwrap() {
            out.push(seed.unwrap().path());
        }
    }
    out.sort();
    out
}

#[test]
fn gen_dataset_writes_requested_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-dataset", "--env", "pointmass", "--n", "50000", "--seed", "1"];
    let a = compflow(dir.path(), &[&args[..], &["--out", "a.csv"]].concat());
    assert_ok(&a);
    let b = compflow(dir.path(), &[&args[..], &["--out", "b.csv"]].concat());
    assert_ok(&b);
    let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(parse_dataset(&text, "a.csv").unwrap().len(), 50000);
    assert_eq!(text.as_bytes(), fs::read(dir.path().join("b.csv")).unwrap());
    assert!(stderr(&a).contains("50000"));
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = compflow(dir.path(), &["gen-dataset", "--n", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--env"));
}

#[test]
fn invalid_override_is_a_usage_error_naming_the_range() {
    let dir = tempfile::tempdir().unwrap();
    let o = compflow(dir.path(), &["train", "--set", "rl.xi=1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("xi must lie in (0,1]"), "{}", stderr(&o));
    let o = compflow(dir.path(), &["train", "--set", "rl.nonsense=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = compflow(dir.path(), &["train-offline-flow", "--data", "nowhere.csv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere.csv"));
}

#[test]
fn every_subcommand_help_lists_all_keys_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "gen-dataset",
        "train-offline-flow",
        "train-online-flow",
        "estimate-gap",
        "train",
        "eval",
        "plot",
    ] {
        let o = compflow(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0));
        let text = String::from_utf8_lossy(&o.stdout);
        for k in KEYS {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(k.key))
                .unwrap_or_else(|| panic!("{sub}: {}", k.key));
            assert!(line.contains(k.default), "{sub}: {line}");
        }
    }
}

#[test]
fn offline_flow_override_reaches_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&compflow(
        dir.path(),
        &["gen-dataset", "--env", "pointmass", "--n", "2000", "--out", "d.csv"],
    ));
    let o = compflow(
        dir.path(),
        &with_sets(
            vec!["train-offline-flow", "--data", "d.csv", "--out", "f.ckpt"],
            &["flow.layers=2", "flow.width=16", "flow.iterations=30", "flow.batch=128"],
        ),
    );
    assert_ok(&o);
    let flow = ConditionalFlow::read_checkpoint(&fs::read(dir.path().join("f.ckpt")).unwrap()[..]).unwrap();
    assert_eq!(flow.field().layers().len(), 3);
    assert_eq!(flow.field().layers()[0].weights.nrows(), 16);
    let msg = stderr(&o);
    let loss: f64 = msg
        .split("held-out flow-matching loss ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| panic!("no loss in: {msg}"));
    assert!(loss.is_finite());
}

#[test]
fn offline_flow_on_twenty_thousand_rows_fits_the_desk_budget() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&compflow(
        dir.path(),
        &["gen-dataset", "--env", "pointmass", "--n", "20000", "--out", "d.csv"],
    ));
    let start = Instant::now();
    let o = compflow(
        dir.path(),
        &with_sets(
            vec!["train-offline-flow", "--data", "d.csv"],
            &["flow.layers=3", "flow.width=64", "flow.iterations=1500", "flow.lr=1e-3"],
        ),
    );
    assert_ok(&o);
    assert!(start.elapsed() < Duration::from_secs(300), "{:?}", start.elapsed());
}

#[test]
fn estimate_gap_matches_analytic_w2_and_reports_missing_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let env_sets = ["env.name=gaussian", "env.shift=1.4142135623730951,1.4142135623730951"];
    let flow_sets = ["flow.layers=3", "flow.width=64", "flow.lr=1e-3"];
    let gen = |member: &str, n: &str, seed: &str, out: &str| {
        assert_ok(&compflow(
            d,
            &with_sets(
                vec![
                    "gen-dataset",
                    "--env",
                    "gaussian",
                    "--member",
                    member,
                    "--n",
                    n,
                    "--seed",
                    seed,
                    "--out",
                    out,
                ],
                &env_sets,
            ),
        ));
    };
    gen("offline", "20000", "1", "off.csv");
    gen("online", "2000", "2", "on.csv");
    gen("online", "50", "3", "query.csv");
    let sets: Vec<&str> = env_sets.iter().chain(&flow_sets).copied().collect();
    let o = compflow(
        d,
        &with_sets(
            vec![
                "train-offline-flow",
                "--data",
                "off.csv",
                "--set",
                "flow.iterations=1500",
            ],
            &sets,
        ),
    );
    assert_ok(&o);
    let missing = compflow(
        d,
        &with_sets(
            vec![
                "estimate-gap",
                "--offline-flow",
                "offline_flow.ckpt",
                "--online-flow",
                "online_flow.ckpt",
                "--data",
                "query.csv",
            ],
            &sets,
        ),
    );
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("online_flow.ckpt"), "{}", stderr(&missing));
    assert!(stderr(&missing).contains("train-online-flow"));

    let o = compflow(
        d,
        &with_sets(
            vec![
                "train-online-flow",
                "--offline-flow",
                "offline_flow.ckpt",
                "--data",
                "on.csv",
                "--set",
                "flow.iterations=300",
            ],
            &sets,
        ),
    );
    assert_ok(&o);
    assert!(stderr(&o).contains(" 0 marginal violations"), "{}", stderr(&o));
    let gap_args = vec![
        "estimate-gap",
        "--offline-flow",
        "offline_flow.ckpt",
        "--online-flow",
        "online_flow.ckpt",
        "--data",
        "query.csv",
        "--m",
        "64",
    ];
    assert_ok(&compflow(d, &with_sets(gap_args.clone(), &sets)));

    let mut cfg = RunConfig::default();
    for s in &env_sets {
        cfg.apply_override(s).unwrap();
    }
    let EnvPair::GaussianLinear(pair) = cfg.env_pair().unwrap() else {
        unreachable!()
    };
    let report = fs::read_to_string(d.join("gap_report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), "s0,s1,a0,a1,gap,M,seed");
    let mut errs: Vec<f64> = lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            assert_eq!(f[5], 64.0);
            let w2 = pair.analytic_conditional_w2(&f[0..2], &f[2..4]).unwrap();
            ((f[4] - w2) / w2).abs()
        })
        .collect();
    assert_eq!(errs.len(), 50);
    errs.sort_by(f64::total_cmp);
    assert!(
        errs[25] <= 0.15 && errs[45] <= 0.25,
        "median {} p90 {}",
        errs[25],
        errs[45]
    );

    let mut single = gap_args;
    single[8] = "1";
    single.extend(["--out", "single.csv"]);
    assert_ok(&compflow(d, &with_sets(single, &sets)));
    let single = fs::read_to_string(d.join("single.csv")).unwrap();
    assert!(single.lines().skip(1).all(|l| l.split(',').nth(5) == Some("1")));
}

#[test]
fn sac_never_reads_the_offline_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&compflow(
        d,
        &[
            "gen-dataset",
            "--env",
            "pointmass",
            "--n",
            "400",
            "--out",
            "offline.csv",
        ],
    ));
    let audit = d.join("audit.txt");
    let args = vec![
        "train",
        "--method",
        "sac",
        "--seeds",
        "1",
        "--offline-data",
        "offline.csv",
        "--audit-file-access",
        audit.to_str().unwrap(),
    ];
    assert_ok(&compflow(d, &with_sets(args.clone(), TINY_RL)));
    let log = fs::read_to_string(&audit).unwrap_or_default();
    assert!(!log.contains("offline.csv"), "{log}");
    let seed = &seed_dirs(&d.join("runs"))[0];
    assert!(!seed.join("offline.csv").exists());

    // the same flag does record the read for a method that uses the data
    let mut bc = args;
    bc[2] = "bcsac";
    assert_ok(&compflow(d, &with_sets(bc, TINY_RL)));
    assert!(fs::read_to_string(&audit).unwrap().contains("offline.csv"));
}

#[test]
fn multiple_seeds_get_their_own_directories_and_plot_groups_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = compflow(
        d,
        &with_sets(
            vec!["train", "--method", "sac", "--seeds", "1,2,3", "--label", "plain"],
            TINY_RL,
        ),
    );
    assert_ok(&o);
    let seeds = seed_dirs(&d.join("runs"));
    assert_eq!(seeds.len(), 3);
    for s in &seeds {
        let m = read_metrics(&s.join("metrics.csv")).unwrap();
        assert_eq!(
            m.records.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![200, 400, 600]
        );
        assert!(s.join("manifest.json").exists());
        assert!(s.join("plots/learning_curve.svg").exists());
    }
    let mut plot = vec!["plot", "--out", "all.svg"];
    let paths: Vec<String> = seeds.iter().map(|p| p.display().to_string()).collect();
    plot.extend(paths.iter().map(String::as_str));
    assert_ok(&compflow(d, &plot));
    let svg = fs::read_to_string(d.join("all.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains(">plain<"));

    let eval = compflow(d, &["eval", "--run", &paths[0], "--episodes", "3"]);
    assert_ok(&eval);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(seeds[0].join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["step"], 600);
    assert!(report["return_mean"].as_f64().unwrap().is_finite());
}

#[test]
fn plot_rejects_runs_from_different_environments() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_ok(&compflow(
        d,
        &with_sets(vec!["train", "--method", "sac", "--seeds", "1"], TINY_RL),
    ));
    let mut shifted = TINY_RL.to_vec();
    shifted.push("env.friction_on=0.3");
    assert_ok(&compflow(
        d,
        &with_sets(vec!["train", "--method", "sac", "--seeds", "1"], &shifted),
    ));
    let seeds = seed_dirs(&d.join("runs"));
    assert_eq!(seeds.len(), 2);
    let o = compflow(d, &["plot", seeds[0].to_str().unwrap(), seeds[1].to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different environments"));
}

#[test]
fn interrupted_compflow_run_resumes_to_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut sets = TINY_RL.to_vec();
    sets.extend(["rl.total_steps=1600", "rl.eval_interval=100"]);
    let args = with_sets(vec!["train", "--method", "compflow", "--seeds", "7"], &sets);

    let reference = d.join("reference");
    fs::create_dir_all(&reference).unwrap();
    assert_ok(&compflow(&reference, &args));

    let interrupted = d.join("interrupted");
    fs::create_dir_all(&interrupted).unwrap();
    let mut child = Command::new(BIN)
        .args(&args)
        .current_dir(&interrupted)
        .env("COMPFLOW_RUNS_DIR", interrupted.join("runs"))
        .env("RUST_LOG", "warn")
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(120);
    let killed_at = loop {
        let latest = interrupted.join("runs").read_dir().ok().and_then(|mut hashes| {
            let hash = hashes.next()?.ok()?.path();
            fs::read_to_string(hash.join("7/checkpoints/LATEST")).ok()
        });
        if let Some(name) = latest {
            child.kill().unwrap();
            break name;
        }
        assert!(Instant::now() < deadline, "no checkpoint appeared");
        std::thread::sleep(Duration::from_millis(5));
    };
    let _ = child.wait();
    assert_ne!(
        killed_at.trim(),
        "step-1600",
        "run finished before it could be interrupted"
    );

    let o = compflow(&interrupted, &args);
    assert_ok(&o);
    let step = killed_at.trim().trim_start_matches("step-");
    assert!(
        stderr(&o).contains(&format!("resuming from step {step}")),
        "{}",
        stderr(&o)
    );
    let a = seed_dirs(&reference.join("runs"))[0].join("metrics.csv");
    let b = seed_dirs(&interrupted.join("runs"))[0].join("metrics.csv");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}
