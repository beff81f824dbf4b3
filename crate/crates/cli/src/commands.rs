use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use compflow::agent::{evaluate, Agent, Method, MetricsRecord, Trainer};
use compflow::envs::{generate_offline_dataset, EnvPair, Transition};
use compflow::flow::{heldout_fm_loss, train_offline_flow, train_online_flow, CompositeFlow, ConditionalFlow};
use compflow::gap::{estimate_gap_batch, state_action_matrices, write_gap_report};
use compflow::nnet::DenseNet;
use compflow::persist::{
    atomic_write, parse_dataset, parse_metrics, phase_seed, render_learning_curve, write_dataset, write_metrics,
    CurveGroup, RunConfig, RunLayout, RunManifest,
};
use compflow::Error;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audit;
use crate::{Command, ConfigArgs, Member};

pub enum Failure {
    /// Bad arguments or configuration; exit status 2.
    Usage(String),
    /// Anything that went wrong while doing the work; exit status 1.
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

const OFFLINE_FLOW_HINT: &str = "train it with `compflow train-offline-flow --out <path>`";
const ONLINE_FLOW_HINT: &str = "train it with `compflow train-online-flow --out <path>`";
const DATASET_HINT: &str = "generate it with `compflow gen-dataset --out <path>`";

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenDataset {
            env,
            n,
            seed,
            member,
            out,
            cfg,
        } => gen_dataset(&env, n, seed, member, out, &cfg),
        Command::TrainOfflineFlow {
            data,
            out,
            seed,
            holdout,
            cfg,
        } => cmd_train_offline_flow(&data, &out, seed, holdout, &cfg),
        Command::TrainOnlineFlow {
            offline_flow,
            data,
            init,
            out,
            seed,
            cfg,
        } => cmd_train_online_flow(&offline_flow, &data, init.as_deref(), &out, seed, &cfg),
        Command::EstimateGap {
            offline_flow,
            online_flow,
            data,
            out,
            m,
            seed,
            cfg,
        } => estimate_gap(&offline_flow, &online_flow, &data, &out, m, seed, &cfg),
        Command::Train {
            method,
            seeds,
            label,
            offline_data,
            offline_flow,
            parallel,
            cfg,
        } => train(
            method.as_deref(),
            seeds.as_deref(),
            label,
            offline_data.as_deref(),
            offline_flow.as_deref(),
            parallel,
            &cfg,
        ),
        Command::Eval { run, episodes, seed } => eval(&run, episodes, seed),
        Command::Plot { inputs, out } => plot(&inputs, &out),
    }
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::parse(
            &audit::read_string(path, "config file not found")?,
            &path.display().to_string(),
        )?,
        None => RunConfig::default(),
    };
    for assignment in &args.set {
        cfg.apply_override(assignment)?;
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> CliResult<Vec<Transition>> {
    let text = audit::read_string(path, DATASET_HINT)?;
    let data = parse_dataset(&text, &path.display().to_string())?;
    if data.is_empty() {
        return Err(Failure::Runtime(Error::InvalidArgument(format!(
            "{} has no rows",
            path.display()
        ))));
    }
    Ok(data)
}

fn load_flow(path: &Path, hint: &str) -> CliResult<ConditionalFlow> {
    Ok(ConditionalFlow::read_checkpoint(&audit::read(path, hint)?[..])?)
}

fn save_flow(flow: &ConditionalFlow, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    flow.write_checkpoint(&mut buf)?;
    atomic_write(path, &buf)?;
    Ok(())
}

fn gen_dataset(
    env: &str,
    n: Option<usize>,
    seed: u64,
    member: Member,
    out: Option<PathBuf>,
    args: &ConfigArgs,
) -> CliResult<()> {
    let mut cfg = load_config(args)?;
    cfg.apply_override(&format!("env.name={env}"))?;
    let pair = cfg.env_pair()?;
    let n = n.unwrap_or_else(|| cfg.count("data.offline_size"));
    let (member_env, member_name) = match member {
        Member::Offline => (pair.offline(), "offline"),
        Member::Online => (pair.online(), "online"),
    };
    let out = out.unwrap_or_else(|| PathBuf::from(format!("{env}-{member_name}-{n}-seed{seed}.csv")));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = generate_offline_dataset(&member_env, &cfg.behavior()?, n, &mut rng)?;
    write_dataset(&out, &data)?;
    eprintln!("wrote {} rows to {}", data.len(), out.display());
    Ok(())
}

fn cmd_train_offline_flow(data: &Path, out: &Path, seed: u64, holdout: f64, args: &ConfigArgs) -> CliResult<()> {
    let cfg = load_config(args)?;
    if !(holdout > 0.0 && holdout < 1.0) {
        return Err(Failure::Usage("--holdout must lie in (0,1)".into()));
    }
    let data = load_dataset(data)?;
    if data.len() < 2 {
        return Err(Failure::Runtime(Error::InvalidArgument(
            "need at least two rows to hold one out".into(),
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let held = ((data.len() as f64 * holdout).round() as usize).clamp(1, data.len() - 1);
    let heldout: Vec<Transition> = order[..held].iter().map(|&i| data[i].clone()).collect();
    let train: Vec<Transition> = order[held..].iter().map(|&i| data[i].clone()).collect();
    let (flow, report) = train_offline_flow(&train, &cfg.flow_config(), &mut rng)?;
    let loss = heldout_fm_loss(&flow, &heldout, &mut rng)?;
    if !loss.is_finite() {
        return Err(Failure::Runtime(Error::NonFinite("held-out flow-matching loss".into())));
    }
    save_flow(&flow, out)?;
    eprintln!(
        "trained on {} rows ({} iterations, final batch loss {:.6e}); held-out flow-matching loss {loss:.6e} on {held} rows",
        train.len(),
        report.losses.len(),
        report.final_loss().unwrap_or(f64::NAN)
    );
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn cmd_train_online_flow(
    offline_flow: &Path,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
    seed: u64,
    args: &ConfigArgs,
) -> CliResult<()> {
    let cfg = load_config(args)?;
    let offline = load_flow(offline_flow, OFFLINE_FLOW_HINT)?;
    let data = load_dataset(data)?;
    let init = init.map(|p| load_flow(p, ONLINE_FLOW_HINT)).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (flow, report) = train_online_flow(&offline, &data, init.as_ref(), &cfg.flow_config(), &mut rng)?;
    save_flow(&flow, out)?;
    eprintln!(
        "final batch loss {:.6e}; {} couplings checked, {} marginal violations",
        report.final_loss().unwrap_or(f64::NAN),
        report.coupling.checked,
        report.coupling.violations
    );
    eprintln!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn estimate_gap(
    offline_flow: &Path,
    online_flow: &Path,
    data: &Path,
    out: &Path,
    m: Option<usize>,
    seed: u64,
    args: &ConfigArgs,
) -> CliResult<()> {
    let cfg = load_config(args)?;
    let m = m.unwrap_or_else(|| cfg.count("gap.m"));
    if m == 0 {
        return Err(Failure::Usage("--m must be at least 1".into()));
    }
    let offline = load_flow(offline_flow, OFFLINE_FLOW_HINT)?;
    let online = load_flow(online_flow, ONLINE_FLOW_HINT)?;
    let composite = CompositeFlow::new(offline, online)?;
    let data = load_dataset(data)?;
    let (states, actions) = state_action_matrices(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaps = estimate_gap_batch(&composite, states.view(), actions.view(), m, &mut rng)?;
    let mut buf = Vec::new();
    write_gap_report(&mut buf, states.view(), actions.view(), &gaps, seed)?;
    atomic_write(out, &buf)?;
    eprintln!("wrote {} gap estimates (M = {m}) to {}", gaps.len(), out.display());
    Ok(())
}

fn train(
    method: Option<&str>,
    seeds: Option<&str>,
    label: Option<String>,
    offline_data: Option<&Path>,
    offline_flow: Option<&Path>,
    parallel: bool,
    args: &ConfigArgs,
) -> CliResult<()> {
    let mut cfg = load_config(args)?;
    if let Some(m) = method {
        cfg.apply_override(&format!("rl.method={m}"))?;
    }
    if let Some(s) = seeds {
        cfg.apply_override(&format!("run.seeds={s}"))?;
    }
    let label = label.unwrap_or_else(|| cfg.get("rl.method").to_string());
    let layout = RunLayout::for_config(&cfg);
    let job = |seed: u64| train_seed(&cfg, &layout, seed, &label, offline_data, offline_flow);
    if parallel {
        let results: Vec<CliResult<()>> = std::thread::scope(|scope| {
            let handles: Vec<_> = cfg.seeds().into_iter().map(|s| scope.spawn(move || job(s))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed worker panicked"))
                .collect()
        });
        results.into_iter().collect::<CliResult<Vec<()>>>()?;
    } else {
        for seed in cfg.seeds() {
            job(seed)?;
        }
    }
    Ok(())
}

fn offline_dataset(
    cfg: &RunConfig,
    pair: &EnvPair,
    seed: u64,
    dir: &Path,
    given: Option<&Path>,
) -> CliResult<Vec<Transition>> {
    if let Some(path) = given {
        return load_dataset(path);
    }
    let path = dir.join("offline.csv");
    if path.exists() {
        return load_dataset(&path);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(seed, "dataset"));
    let data = generate_offline_dataset(
        &pair.offline(),
        &cfg.behavior()?,
        cfg.count("data.offline_size"),
        &mut rng,
    )?;
    write_dataset(&path, &data)?;
    info!("seed {seed}: generated {} offline transitions", data.len());
    Ok(data)
}

fn offline_flow_for(
    cfg: &RunConfig,
    data: &[Transition],
    seed: u64,
    dir: &Path,
    given: Option<&Path>,
) -> CliResult<ConditionalFlow> {
    if let Some(path) = given {
        return load_flow(path, OFFLINE_FLOW_HINT);
    }
    let path = dir.join("offline_flow.ckpt");
    if path.exists() {
        return load_flow(&path, OFFLINE_FLOW_HINT);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(seed, "offline_flow"));
    let (flow, report) = train_offline_flow(data, &cfg.flow_config(), &mut rng)?;
    save_flow(&flow, &path)?;
    info!(
        "seed {seed}: trained offline flow (final batch loss {:.4e})",
        report.final_loss().unwrap_or(f64::NAN)
    );
    Ok(flow)
}

fn train_seed(
    cfg: &RunConfig,
    layout: &RunLayout,
    seed: u64,
    label: &str,
    offline_data: Option<&Path>,
    offline_flow: Option<&Path>,
) -> CliResult<()> {
    let dir = layout.seed_dir(seed);
    fs::create_dir_all(&dir).map_err(Error::from)?;
    RunManifest::new(cfg, seed, label).write_once(&layout.manifest(seed))?;
    let pair = cfg.env_pair()?;
    let config = cfg.trainer_config();
    let offline = if config.method.uses_offline_data() {
        offline_dataset(cfg, &pair, seed, &dir, offline_data)?
    } else {
        Vec::new()
    };
    let flow = match config.method {
        Method::CompFlow => Some(offline_flow_for(cfg, &offline, seed, &dir, offline_flow)?),
        _ => None,
    };
    let checkpoints = layout.checkpoints(seed);
    let metrics_path = layout.metrics(seed);
    let (mut trainer, mut records) = match Trainer::latest_checkpoint(&checkpoints)? {
        Some(ck) => {
            let trainer = Trainer::resume(&ck, &config, &pair, offline, flow)?;
            let mut records = if metrics_path.exists() {
                parse_metrics(
                    &fs::read_to_string(&metrics_path).map_err(Error::from)?,
                    &metrics_path.display().to_string(),
                )?
                .records
            } else {
                Vec::new()
            };
            records.retain(|r| r.step <= trainer.step_count());
            eprintln!("seed {seed}: resuming from step {}", trainer.step_count());
            (trainer, records)
        }
        None => (
            Trainer::new(config, &pair, offline, flow, phase_seed(seed, "train"))?,
            Vec::new(),
        ),
    };
    write_metrics(&metrics_path, &records)?;
    trainer.run(|tr, rec: &MetricsRecord| {
        records.push(rec.clone());
        write_metrics(&metrics_path, &records)?;
        tr.save_checkpoint(&checkpoints)?;
        info!(
            "seed {seed}: step {} return {:.3} ± {:.3}",
            rec.step, rec.eval_return_mean, rec.eval_return_std
        );
        Ok(())
    })?;
    if trainer.filter_log.size_violations + trainer.filter_log.order_violations > 0 || trainer.coupling.violations > 0 {
        warn!(
            "seed {seed}: {} filter size violations, {} filter order violations, {} coupling violations",
            trainer.filter_log.size_violations, trainer.filter_log.order_violations, trainer.coupling.violations
        );
    }
    let svg = render_learning_curve(&[CurveGroup {
        label: label.to_string(),
        runs: vec![records],
    }])?;
    atomic_write(&layout.plots(seed).join("learning_curve.svg"), svg.as_bytes())?;
    eprintln!("seed {seed}: finished, results in {}", dir.display());
    Ok(())
}

fn read_manifest(dir: &Path) -> CliResult<RunManifest> {
    let bytes = audit::read(
        &dir.join("manifest.json"),
        "expected a run directory written by `compflow train`",
    )?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Runtime(Error::from(e)))
}

fn read_net(dir: &Path, name: &str) -> CliResult<DenseNet> {
    Ok(DenseNet::read_checkpoint(&audit::read(&dir.join(name), "checkpoint is incomplete")?[..])?.0)
}

fn eval(run: &Path, episodes: Option<usize>, seed: u64) -> CliResult<()> {
    let manifest = read_manifest(run)?;
    let cfg = RunConfig::from_values(&manifest.config)?;
    let checkpoints = run.join("checkpoints");
    let ck = Trainer::latest_checkpoint(&checkpoints)?.ok_or_else(|| {
        Failure::Runtime(Error::MissingFile {
            path: checkpoints.join("LATEST"),
            hint: "this run has no checkpoint yet; run `compflow train` first".into(),
        })
    })?;
    let config = cfg.trainer_config();
    let agent = Agent::from_nets(
        config.effective_agent(),
        read_net(&ck, "actor.ckpt")?,
        [read_net(&ck, "critic0.ckpt")?, read_net(&ck, "critic1.ckpt")?],
    )?;
    let episodes = episodes.unwrap_or(config.eval_episodes);
    let env = cfg.env_pair()?.online();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mean, std) = evaluate(&agent, &env, episodes, &mut rng)?;
    let step = ck
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("step-"))
        .and_then(|n| n.parse::<usize>().ok())
        .unwrap_or(0);
    let report = serde_json::json!({
        "step": step,
        "episodes": episodes,
        "seed": seed,
        "return_mean": mean,
        "return_std": std,
    });
    let out = run.join("eval.json");
    atomic_write(&out, serde_json::to_string_pretty(&report).expect("json").as_bytes())?;
    eprintln!(
        "step {step}: return {mean:.4} ± {std:.4} over {episodes} episodes; wrote {}",
        out.display()
    );
    Ok(())
}

fn plot(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut groups: Vec<CurveGroup> = Vec::new();
    let mut env_of_first: Option<(PathBuf, BTreeMap<String, String>)> = None;
    for input in inputs {
        let (dir, metrics) = if input.is_dir() {
            (input.clone(), input.join("metrics.csv"))
        } else {
            (input.parent().map(Path::to_path_buf).unwrap_or_default(), input.clone())
        };
        let manifest = read_manifest(&dir)?;
        let env: BTreeMap<String, String> = manifest
            .config
            .iter()
            .filter(|(k, _)| k.starts_with("env."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        match &env_of_first {
            None => env_of_first = Some((dir.clone(), env)),
            Some((first, expected)) if *expected != env => {
                return Err(Failure::Runtime(Error::InvalidArgument(format!(
                    "{} and {} were run on different environments; plot them separately",
                    first.display(),
                    dir.display()
                ))));
            }
            Some(_) => {}
        }
        let text = audit::read_string(&metrics, "no metrics have been written for this run")?;
        let parsed = parse_metrics(&text, &metrics.display().to_string())?;
        if parsed.truncated {
            warn!("{}: ignoring a partial final line", metrics.display());
        }
        match groups.iter_mut().find(|g| g.label == manifest.label) {
            Some(g) => g.runs.push(parsed.records),
            None => groups.push(CurveGroup {
                label: manifest.label.clone(),
                runs: vec![parsed.records],
            }),
        }
    }
    let svg = render_learning_curve(&groups)?;
    atomic_write(out, svg.as_bytes())?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
