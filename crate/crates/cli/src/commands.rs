use std::path::{Path, PathBuf};

use drl_core::agents::{
    evaluate, train_ac, write_training_log, Actor, AgentError, EnvSource, EvalEnv, PolicyParams,
};
use drl_core::causal::{Better, DiscreteCpt, Outcome};
use drl_core::deconfound::OracleModel;
use drl_core::envs::{generate_dataset, read_dataset, write_dataset, Dataset, Split};
use drl_core::model::{load_checkpoint, save_checkpoint, train_model as fit, Batch, ElboBreakdown, Model};
use drl_core::numerics::Tensor;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{seed_override, RunConfig};
use crate::{pgm, Algo, Cli, CliError, QueryMode, Variant};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const POLICY_FILE: &str = "policy.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

pub struct Context {
    pub workdir: PathBuf,
    pub cfg: RunConfig,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let workdir = cli.workdir.clone();
        let config = cli.config.as_ref().map(|p| resolve(&workdir, p));
        let seed = seed_override(cli.seed)?;
        let cfg = RunConfig::load(config.as_deref(), cli.profile, seed)?;
        Ok(Context { workdir, cfg })
    }

    fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.workdir, p)
    }

    /// Output directory from the flag or the configured default, created
    /// if missing.
    fn out_dir(&self, flag: Option<PathBuf>, default: &Path) -> Result<PathBuf, CliError> {
        let dir = self.path(flag.as_deref().unwrap_or(default));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    /// A directory resolves to the split's file inside it.
    fn dataset_file(&self, flag: Option<&Path>, split: Split) -> PathBuf {
        let base = self.path(flag.unwrap_or(&self.cfg.io.data_dir));
        if base.is_dir() {
            base.join(split.file_name())
        } else {
            base
        }
    }

    fn read_data(&self, flag: Option<&Path>, split: Split) -> Result<Dataset, CliError> {
        let path = self.dataset_file(flag, split);
        existing(&path, "dataset")?;
        read_dataset(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    fn load_model(&self, p: &Path) -> Result<Model, CliError> {
        let path = self.path(p);
        let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path };
        existing(&path, "checkpoint")?;
        load_checkpoint(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    fn oracle(&self) -> OracleModel {
        OracleModel::new(self.cfg.env.env, self.cfg.env.spec.clone(), 2)
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn existing(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} not found", path.display())))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Sidecar for single-file outputs: `<file>.config.json`.
fn write_sidecar(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    let text = serde_json::to_string_pretty(cfg).map_err(CliError::runtime)? + "\n";
    std::fs::write(out.with_file_name(name), text).map_err(CliError::runtime)
}

fn emit(cfg: &RunConfig, out: Option<PathBuf>, value: &serde_json::Value) -> Result<(), CliError> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(CliError::runtime)?;
            }
            write_json(&path, value)?;
            write_sidecar(cfg, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            use std::io::Write;
            let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
            // A closed pipe (`drl ... | head`) is not an error worth reporting.
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::runtime(e)),
                _ => Ok(()),
            }
        }
    }
}

fn agent_error(e: AgentError) -> CliError {
    match e {
        AgentError::SourceMismatch(_) | AgentError::Config(_) => CliError::Usage(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn gen_data(ctx: &Context, out: Option<PathBuf>) -> Result<(), CliError> {
    ctx.cfg
        .env
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = ctx.out_dir(out, &ctx.cfg.io.data_dir)?;
    let splits = generate_dataset(&ctx.cfg.env).map_err(CliError::runtime)?;
    for ds in &splits {
        let path = dir.join(ds.header.split.file_name());
        write_dataset(&path, ds).map_err(CliError::runtime)?;
        let n = ds.len();
        let u1 = ds.trajectories.iter().filter(|t| t.u == 1).count();
        let frac = if n == 0 { 0.0 } else { u1 as f64 / n as f64 };
        println!(
            "{:<5} {n:>7} sequences, empirical P(u=1) = {frac:.4}  ({})",
            format!("{:?}", ds.header.split).to_lowercase(),
            path.display()
        );
    }
    ctx.cfg.write_resolved(&dir)?;
    Ok(())
}

pub fn train_model(
    ctx: &Context,
    data: Option<PathBuf>,
    variant: Variant,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = ctx.cfg.clone();
    cfg.model.net.include_u = variant == Variant::Decon;
    let ds = ctx.read_data(data.as_deref(), Split::Train)?;
    if ds.is_empty() {
        return Err(CliError::Usage("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.train.seed);
    let mut model = Model::for_dataset(cfg.model.net.clone(), &ds, &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let batch = Batch::from_dataset(&ds);
    let dir = ctx.out_dir(out, &cfg.io.model_dir)?;
    let logs = fit(&mut model, &batch, &cfg.model.train, |l| {
        eprintln!("epoch {:>4}  loss {:.4}", l.epoch, l.loss());
    })
    .map_err(CliError::runtime)?;

    let mut csv = ElboBreakdown::FIELDS.join(",");
    csv.push('\n');
    for l in &logs {
        let row: Vec<String> = l.terms.values().iter().map(f64::to_string).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    std::fs::write(dir.join(LOSS_FILE), csv).map_err(CliError::runtime)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &model).map_err(CliError::runtime)?;
    cfg.write_resolved(&dir)?;
    println!(
        "trained {} model for {} epochs; checkpoint {}",
        if model.uses_u() { "decon" } else { "alt" },
        logs.len(),
        dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn train_policy(
    ctx: &Context,
    model: Option<PathBuf>,
    oracle: bool,
    algo: Algo,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let table = ctx.oracle();
    let loaded;
    let ds;
    let source = if oracle {
        match algo {
            Algo::Vanilla => EnvSource::OracleAlt(&table),
            Algo::Decon => EnvSource::OracleDecon(&table),
            Algo::Direct => {
                return Err(CliError::Usage(
                    "direct AC replays logged data and needs --model, not --oracle".into(),
                ))
            }
        }
    } else {
        let Some(path) = model else {
            return Err(CliError::Usage("train-policy needs --model or --oracle".into()));
        };
        loaded = ctx.load_model(&path)?;
        match (algo, loaded.uses_u()) {
            (Algo::Decon, false) => {
                return Err(CliError::Usage(
                    "decon AC needs interventional rewards, but this checkpoint has no \
                     confounder; train it with --variant decon"
                        .into(),
                ))
            }
            (Algo::Vanilla | Algo::Direct, true) => {
                return Err(CliError::Usage(format!(
                    "{} AC uses the confounder-free model, but this checkpoint has a \
                     confounder; train it with --variant alt",
                    if algo == Algo::Vanilla { "vanilla" } else { "direct" }
                )))
            }
            _ => {}
        }
        ds = ctx.read_data(data.as_deref(), Split::Train)?;
        match algo {
            Algo::Vanilla => EnvSource::ModelAlt { model: &loaded, data: &ds },
            Algo::Decon => EnvSource::ModelDecon { model: &loaded, data: &ds },
            Algo::Direct => EnvSource::Dataset { model: &loaded, data: &ds },
        }
    };
    let dir = ctx.out_dir(out, &cfg.io.policy_dir)?;
    let outcome = train_ac(&source, cfg.policy.episodes, cfg.policy.steps, &cfg.policy.agent)
        .map_err(agent_error)?;
    outcome
        .policy
        .save(&dir.join(POLICY_FILE))
        .map_err(CliError::runtime)?;
    write_training_log(&dir.join(TRAINING_LOG_FILE), &outcome.log).map_err(CliError::runtime)?;
    cfg.write_resolved(&dir)?;
    let tail = &outcome.log[outcome.log.len().saturating_sub(50)..];
    let freq = if tail.is_empty() {
        0.0
    } else {
        tail.iter().map(|l| l.optimal_action_freq).sum::<f64>() / tail.len() as f64
    };
    println!(
        "{} on {}: {} episodes, final optimal-action frequency {freq:.3}; policy {}",
        format!("{algo:?}").to_lowercase(),
        source.name(),
        outcome.log.len(),
        dir.join(POLICY_FILE).display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub policy: Option<PathBuf>,
    pub constant_action: Option<f64>,
    pub model: Option<PathBuf>,
    pub oracle: bool,
    pub data: Option<PathBuf>,
    pub episodes: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

struct Constant(f64);

impl Actor for Constant {
    fn action(&self, _z: &[f64], _rng: &mut dyn RngCore) -> Result<f64, AgentError> {
        Ok(self.0)
    }
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let policy = match (&args.policy, args.constant_action) {
        (Some(p), None) => {
            let path = ctx.path(p);
            let path = if path.is_dir() { path.join(POLICY_FILE) } else { path };
            existing(&path, "policy")?;
            Some(PolicyParams::load(&path).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        (None, Some(_)) => None,
        _ => return Err(CliError::Usage("eval needs exactly one of --policy or --constant-action".into())),
    };
    let table = ctx.oracle();
    let loaded;
    let ds;
    let (env, env_name, state_dim) = if args.oracle {
        (EvalEnv::Oracle(&table), "oracle", table.state_dim)
    } else {
        let Some(path) = &args.model else {
            return Err(CliError::Usage("eval needs --model or --oracle".into()));
        };
        loaded = ctx.load_model(path)?;
        ds = ctx.read_data(args.data.as_deref(), Split::Test)?;
        let d = loaded.dims.d_z;
        (
            EvalEnv::Model {
                model: &loaded,
                data: &ds,
                u_source: cfg.policy.agent.u_source,
            },
            "model",
            d,
        )
    };
    if let Some(p) = &policy {
        if p.state_dim != state_dim {
            return Err(CliError::Usage(format!(
                "policy expects {}-dimensional states, the environment provides {state_dim}",
                p.state_dim
            )));
        }
    }
    let episodes = args.episodes.unwrap_or(cfg.policy.eval_episodes);
    let steps = args.steps.unwrap_or(cfg.policy.eval_steps);
    let seed = cfg.policy.eval_seed;
    let report = match (&policy, args.constant_action) {
        (Some(p), _) => evaluate(p, &env, episodes, steps, seed),
        (None, Some(a)) => evaluate(&Constant(a), &env, episodes, steps, seed),
        (None, None) => unreachable!("checked above"),
    }
    .map_err(agent_error)?;
    let actor = match (&args.policy, args.constant_action) {
        (Some(p), _) => json!({ "policy": p }),
        (_, a) => json!({ "constant_action": a }),
    };
    let value = json!({
        "format_version": REPORT_FORMAT_VERSION,
        "env": env_name,
        "actor": actor,
        "u_source": cfg.policy.agent.u_source,
        "seed": seed,
        "report": report,
    });
    emit(cfg, args.out.map(|p| ctx.path(&p)), &value)
}

fn frame_tensor(ds: &Dataset, seq: usize, t: usize) -> Tensor {
    let fl = ds.header.frame_len();
    Tensor::row(
        &ds.trajectories[seq]
            .frame(t, fl)
            .iter()
            .map(|&v| f64::from(v))
            .collect::<Vec<_>>(),
    )
}

pub fn counterfactual(
    ctx: &Context,
    model: PathBuf,
    data: Option<PathBuf>,
    frame_index: usize,
    horizon: usize,
    actions: Option<Vec<f64>>,
    out: PathBuf,
) -> Result<(), CliError> {
    if horizon == 0 {
        return Err(CliError::Usage("--horizon must be at least 1".into()));
    }
    let m = ctx.load_model(&model)?;
    let ds = ctx.read_data(data.as_deref(), Split::Test)?;
    check_frames(&m, &ds)?;
    let t_len = ds.header.t;
    let (seq, step) = (frame_index / t_len, frame_index % t_len);
    if seq >= ds.len() {
        return Err(CliError::Usage(format!(
            "frame index {frame_index} is past the {} frames of the test split",
            ds.len() * t_len
        )));
    }
    let dir = ctx.out_dir(Some(out), Path::new("."))?;
    let frame = frame_tensor(&ds, seq, step);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.policy.eval_seed);
    let roll = m
        .counterfactual_rollout(&frame, actions.as_deref(), horizon, &mut rng)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (h, w) = (m.dims.height, m.dims.width);
    let mut files = Vec::with_capacity(horizon + 1);
    for (k, f) in std::iter::once(&frame).chain(&roll.frames).enumerate() {
        let name = format!("frame_{k:03}.pgm");
        pgm::write_frame(&dir.join(&name), f.data(), h, w).map_err(CliError::runtime)?;
        files.push(name);
    }
    let decode = |a: f64| m.meta.env.map_or(a, |e| e.decode_action(a));
    let value = json!({
        "format_version": REPORT_FORMAT_VERSION,
        "sequence": seq,
        "step": step,
        "horizon": horizon,
        "inferred_action": decode(roll.inferred_action),
        "inferred_reward": roll.inferred_reward,
        "actions_model_scale": roll.actions,
        "actions": roll.actions.iter().map(|&a| decode(a)).collect::<Vec<_>>(),
        "rewards": roll.rewards,
        "frames": files,
    });
    write_json(&dir.join("rollout.json"), &value)?;
    ctx.cfg.write_resolved(&dir)?;
    println!("wrote {} frames to {}", files.len(), dir.display());
    Ok(())
}

fn check_frames(m: &Model, ds: &Dataset) -> Result<(), CliError> {
    if ds.header.frame_len() != m.dims.d_x {
        return Err(CliError::Usage(format!(
            "dataset frames are {}x{} but the model expects {}x{}",
            ds.header.height, ds.header.width, m.dims.height, m.dims.width
        )));
    }
    Ok(())
}

pub fn reconstruct(
    ctx: &Context,
    model: PathBuf,
    data: Option<PathBuf>,
    count: usize,
    out: PathBuf,
) -> Result<(), CliError> {
    let m = ctx.load_model(&model)?;
    let mut ds = ctx.read_data(data.as_deref(), Split::Test)?;
    check_frames(&m, &ds)?;
    if m.dims.t != ds.header.t {
        return Err(CliError::Usage(format!(
            "dataset sequences have {} steps, the model {}",
            ds.header.t, m.dims.t
        )));
    }
    ds.trajectories.truncate(count);
    if ds.is_empty() {
        return Err(CliError::Usage("nothing to reconstruct".into()));
    }
    let dir = ctx.out_dir(Some(out), Path::new("."))?;
    let batch = Batch::from_dataset(&ds);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.policy.eval_seed);
    let recon = m.reconstruct(&batch, &mut rng).map_err(CliError::runtime)?;
    let (h, w, t_len) = (m.dims.height, m.dims.width, ds.header.t);
    let mut files = Vec::with_capacity(ds.len());
    let mut mse = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let inputs: Vec<Vec<f64>> = (0..t_len).map(|t| batch.x[t].row_slice(i).to_vec()).collect();
        let outputs: Vec<Vec<f64>> = (0..t_len).map(|t| recon[t].row_slice(i).to_vec()).collect();
        let err = inputs
            .iter()
            .flatten()
            .zip(outputs.iter().flatten())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / (t_len * h * w) as f64;
        mse.push(err);
        let frames: Vec<Vec<f64>> = inputs.into_iter().chain(outputs).collect();
        let (img, gh, gw) = pgm::grid(&frames, h, w, t_len);
        let name = format!("seq_{i:04}.pgm");
        pgm::write(&dir.join(&name), &img, gh, gw).map_err(CliError::runtime)?;
        files.push(name);
    }
    let value = json!({
        "format_version": REPORT_FORMAT_VERSION,
        "sequences": ds.len(),
        "steps": t_len,
        "layout": "top row inputs, bottom row reconstructions",
        "files": files,
        "mse": mse,
        "mean_mse": mse.iter().sum::<f64>() / mse.len() as f64,
    });
    write_json(&dir.join("reconstruct.json"), &value)?;
    ctx.cfg.write_resolved(&dir)?;
    println!("reconstructed {} sequences into {}", files.len(), dir.display());
    Ok(())
}

fn parse_outcome(s: &str) -> Result<Outcome, CliError> {
    if s == "expectation" {
        return Ok(Outcome::Expectation);
    }
    s.strip_prefix("prob:")
        .and_then(|k| k.parse().ok())
        .map(Outcome::Prob)
        .ok_or_else(|| CliError::Usage(format!("--outcome must be `expectation` or `prob:<index>`, got {s:?}")))
}

pub fn causal_query(
    ctx: &Context,
    cpt: PathBuf,
    outcome: &str,
    mode: QueryMode,
    better: &str,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let outcome = parse_outcome(outcome)?;
    let better = match better {
        "higher" => Better::Higher,
        "lower" => Better::Lower,
        other => return Err(CliError::Usage(format!("--better must be higher or lower, got {other:?}"))),
    };
    let path = ctx.path(&cpt);
    existing(&path, "CPT")?;
    let table = DiscreteCpt::load(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut value = json!({
        "format_version": REPORT_FORMAT_VERSION,
        "mode": format!("{mode:?}").to_lowercase(),
        "outcome": outcome,
    });
    match mode {
        QueryMode::Cond | QueryMode::Do => {
            let values = (0..table.n_actions())
                .map(|a| match mode {
                    QueryMode::Cond => table.conditional_query(a, outcome),
                    _ => table.backdoor_adjust(a, outcome),
                })
                .collect::<Result<Vec<_>, _>>()
                .map_err(CliError::runtime)?;
            value["values"] = json!(values);
        }
        QueryMode::Simpson => {
            let r = table.simpson_check(outcome, better).map_err(CliError::runtime)?;
            let obj = value.as_object_mut().expect("object literal");
            if let serde_json::Value::Object(fields) = json!(r) {
                obj.extend(fields);
            }
        }
    }
    emit(&ctx.cfg, out.map(|p| ctx.path(&p)), &value)
}
