//! Actor-critic agents trained inside learned or tabulated environments.
//!
//! Three training regimes share one update rule:
//!
//! * vanilla: the confounder-free model (or table) with conditional rewards,
//! * direct: logged transitions replayed straight from the training data,
//! * deconfounding: the confounded model (or table) with interventional
//!   rewards averaged over confounder draws.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deconfound::{
    conditional_reward, do_reward_from_draws, DeconfoundError, Evidence, OracleModel, RewardModel,
    USource,
};
use crate::envs::{confounded_policy, Category, ConfoundingSpec, Dataset, EnvKind};
use crate::model::{Model, ModelError};
use crate::numerics::layers::{Linear, Mlp};
use crate::numerics::{
    gaussian_logpdf_rows, Adam, AdamConfig, DiagGaussian, NumericsError, ParamStore, Session, Tape,
    Tensor, Var,
};

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("source mismatch: {0}")]
    SourceMismatch(String),
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("evaluation needs at least one test sequence")]
    EmptyTestSet,
    #[error("policy file: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Deconfound(#[from] DeconfoundError),
    #[error("policy I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Action space of a policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActionSpace {
    /// `a = bound·tanh(ξ)`, `ξ ~ N(μ(z), σ²(z))`.
    Continuous { bound: f64 },
    /// `a ∈ {0, 1}` with `p(a = 1) = sigmoid(ℓ(z))`.
    Binary,
}

impl ActionSpace {
    pub fn for_env(kind: EnvKind) -> Self {
        if kind.is_discrete() {
            ActionSpace::Binary
        } else {
            ActionSpace::Continuous {
                bound: kind.action_bound(),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Hidden widths shared by the actor and the critic.
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub replay_capacity: usize,
    /// Confounder draws per interventional reward.
    pub n_u: usize,
    pub u_source: USource,
    pub entropy_coef: f64,
    /// Rewards are multiplied by this before entering the replay memory.
    pub reward_scale: f64,
    /// Subtract the running mean of all stored rewards before each update.
    /// A constant shift only moves the critic by `c / (1 − γ)`, so the
    /// policy gradient is unchanged in expectation, but the critic no
    /// longer has to climb to large values first.
    pub center_rewards: bool,
    pub min_std: f64,
    pub seed: u64,
    /// Write elapsed milliseconds into the log instead of zeros. Off by
    /// default so that logs are byte-reproducible.
    pub record_wall_clock: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![32, 32],
            gamma: 0.99,
            batch_size: 128,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            replay_capacity: 100_000,
            n_u: 200,
            u_source: USource::Prior,
            entropy_coef: 0.0,
            reward_scale: 0.01,
            center_rewards: true,
            min_std: 1e-3,
            seed: 0,
            record_wall_clock: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be positive");
        }
        if self.n_u == 0 {
            return bad("n_u must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.min_std > 0.0) {
            return bad("min_std must be positive");
        }
        Ok(())
    }
}

/// Actor `π(a | z; θ)` and critic `V(z; φ)` in one parameter store.
#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub state_dim: usize,
    pub action: ActionSpace,
    pub hidden: Vec<usize>,
    pub min_std: f64,
    pub store: ParamStore,
    actor: Mlp,
    mean: Linear,
    var: Option<Linear>,
    critic: Mlp,
    value: Linear,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action: ActionSpace,
        hidden: &[usize],
        min_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut store = ParamStore::new();
        let actor = Mlp::new(&mut store, "actor", state_dim, hidden, rng);
        let feat = actor.out_dim(state_dim);
        let mean = Linear::new(&mut store, "actor.mean", feat, 1, rng);
        let var = match action {
            ActionSpace::Continuous { .. } => Some(Linear::new(&mut store, "actor.var", feat, 1, rng)),
            ActionSpace::Binary => None,
        };
        // Start the actor near-uniform in z: small output weights, a
        // pre-squash mean of 0 and unit variance.
        store.get_mut(mean.w).scale_in_place(0.01);
        if let Some(v) = &var {
            store.get_mut(v.w).scale_in_place(0.01);
            store.get_mut(v.b).data_mut()[0] = (std::f64::consts::E - 1.0).ln();
        }
        let critic = Mlp::new(&mut store, "critic", state_dim, hidden, rng);
        let value = Linear::new(&mut store, "critic.value", critic.out_dim(state_dim), 1, rng);
        PolicyParams {
            state_dim,
            action,
            hidden: hidden.to_vec(),
            min_std,
            store,
            actor,
            mean,
            var,
            critic,
            value,
        }
    }

    /// Names of the critic's parameters start with this prefix.
    pub fn is_critic_param(name: &str) -> bool {
        name.starts_with("critic")
    }

    fn head<'t>(&self, s: &Session<'t, '_>, z: Var<'t>) -> Result<DiagGaussian<'t>, NumericsError> {
        let h = self.actor.forward(s, z)?;
        let mean = self.mean.forward(s, h)?;
        let var = match &self.var {
            Some(v) => v
                .forward(s, h)?
                .softplus()
                .clamp_min(self.min_std * self.min_std),
            None => mean,
        };
        Ok(DiagGaussian { mean, var })
    }

    fn value_var<'t>(&self, s: &Session<'t, '_>, z: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.value.forward(s, self.critic.forward(s, z)?)
    }

    /// `log π(a | z)` per row for environment-scale actions `a`, `[B, 1]`.
    fn log_prob_var<'t>(
        &self,
        s: &Session<'t, '_>,
        z: Var<'t>,
        a: &[f64],
    ) -> Result<Var<'t>, NumericsError> {
        let g = self.head(s, z)?;
        match self.action {
            ActionSpace::Continuous { bound } => {
                let mut pre = Vec::with_capacity(a.len());
                let mut jac = Vec::with_capacity(a.len());
                for &ai in a {
                    let y = (ai / bound).clamp(-1.0 + 1e-9, 1.0 - 1e-9);
                    pre.push(y.atanh());
                    jac.push(bound.ln() + (1.0 - y * y).ln());
                }
                let pre = s.constant(Tensor::matrix(a.len(), 1, pre));
                let jac = s.constant(Tensor::matrix(a.len(), 1, jac));
                gaussian_logpdf_rows(pre, &g)?.sub(jac)
            }
            ActionSpace::Binary => {
                // log σ(ℓ) for a = 1, log σ(−ℓ) for a = 0.
                let sign: Vec<f64> = a.iter().map(|&ai| if ai >= 0.5 { 1.0 } else { -1.0 }).collect();
                let sign = s.constant(Tensor::matrix(a.len(), 1, sign));
                Ok(g.mean.mul(sign)?.neg().softplus().neg())
            }
        }
    }

    fn entropy_var<'t>(&self, s: &Session<'t, '_>, z: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let g = self.head(s, z)?;
        match self.action {
            // Entropy of the pre-squash Gaussian.
            ActionSpace::Continuous { .. } => {
                Ok(g.var.ln().affine(0.5, 0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5))
            }
            ActionSpace::Binary => {
                let p = g.mean.sigmoid();
                let lp = g.mean.neg().softplus().neg();
                let lq = g.mean.softplus().neg();
                let q = p.neg().affine(1.0, 1.0);
                Ok(p.mul(lp)?.add(q.mul(lq)?)?.neg())
            }
        }
    }

    fn check_state(&self, z: &[f64]) -> Result<(), AgentError> {
        if z.len() != self.state_dim {
            return Err(AgentError::Shape(format!(
                "state has {} entries, policy expects {}",
                z.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    pub fn log_prob(&self, z: &[f64], a: f64) -> Result<f64, AgentError> {
        self.check_state(z)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        Ok(self.log_prob_var(&s, s.constant(Tensor::row(z)), &[a])?.scalar())
    }

    pub fn value(&self, z: &[f64]) -> Result<f64, AgentError> {
        self.check_state(z)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        Ok(self.value_var(&s, s.constant(Tensor::row(z)))?.scalar())
    }

    /// Environment-scale action; `greedy` takes the mode.
    pub fn act(&self, z: &[f64], greedy: bool, rng: &mut dyn RngCore) -> Result<f64, AgentError> {
        self.check_state(z)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let g = self.head(&s, s.constant(Tensor::row(z)))?;
        let mean = g.mean.scalar();
        Ok(match self.action {
            ActionSpace::Continuous { bound } => {
                let xi = if greedy {
                    mean
                } else {
                    let e: f64 = StandardNormal.sample(rng);
                    mean + g.var.scalar().sqrt() * e
                };
                bound * xi.tanh()
            }
            ActionSpace::Binary => {
                let p = crate::numerics::sigmoid(mean);
                let one = if greedy { p >= 0.5 } else { rng.gen_bool(p) };
                f64::from(u8::from(one))
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let file = PolicyFile {
            format_version: POLICY_FORMAT_VERSION,
            state_dim: self.state_dim,
            action: self.action,
            hidden: self.hidden.clone(),
            min_std: self.min_std,
            params: self
                .store
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let file: PolicyFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format_version != POLICY_FORMAT_VERSION {
            return Err(AgentError::Format(format!(
                "format version {} (expected {POLICY_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut p = PolicyParams::new(file.state_dim, file.action, &file.hidden, file.min_std, &mut rng);
        if file.params.len() != p.store.len() {
            return Err(AgentError::Format(format!(
                "{} parameters, expected {}",
                file.params.len(),
                p.store.len()
            )));
        }
        let ids: Vec<_> = p.store.ids().collect();
        for (id, sp) in ids.into_iter().zip(file.params) {
            let t = p.store.get_mut(id);
            if sp.rows != t.rows() || sp.cols != t.cols() || sp.data.len() != t.numel() {
                return Err(AgentError::Format(format!("parameter {} has the wrong shape", sp.name)));
            }
            t.data_mut().copy_from_slice(&sp.data);
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    format_version: u32,
    state_dim: usize,
    action: ActionSpace,
    hidden: Vec<usize>,
    min_std: f64,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredParam {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub z: Vec<f64>,
    pub a: f64,
    pub r: f64,
    pub z_next: Vec<f64>,
    /// `log π_β(a|z)` of the policy that chose `a`, when it is known. Logged
    /// dataset actions leave it empty and are treated as on-policy.
    pub behaviour_log_prob: Option<f64>,
}

/// Bounded FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayMemory {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        (0..n)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect()
    }
}

/// One-step advantage `r + γ·V(z') − V(z)`.
pub fn advantage(r: f64, v: f64, v_next: f64, gamma: f64) -> f64 {
    r + gamma * v_next - v
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct AcStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_advantage: f64,
}

/// Gradients of the batch-mean actor-critic loss.
///
/// The actor term is `−w·A·log π(a|z)` with `A` held constant and
/// `w = min(1, π(a|z)/π_β(a|z))` the truncated importance weight of a replayed
/// action (1 when no behaviour density was stored). Without it, stale samples
/// with negative advantage reward collapsing the variance away from them.
/// The critic term
/// is `A²` with the bootstrap target `r + γ·V(z')` held constant, so it only
/// moves the critic. One gradient per slot of `policy.store`.
pub fn ac_gradient(
    policy: &PolicyParams,
    batch: &[Transition],
    gamma: f64,
    entropy_coef: f64,
) -> Result<(Vec<Tensor>, AcStats), AgentError> {
    if batch.is_empty() {
        return Err(AgentError::Shape("empty batch".into()));
    }
    let d = policy.state_dim;
    if let Some(t) = batch.iter().find(|t| t.z.len() != d || t.z_next.len() != d) {
        return Err(AgentError::Shape(format!(
            "transition states have {} and {} entries, policy expects {d}",
            t.z.len(),
            t.z_next.len()
        )));
    }
    let b = batch.len();
    let tape = Tape::new();
    let s = Session::new(&tape, &policy.store);
    let z = s.constant(Tensor::matrix(b, d, batch.iter().flat_map(|t| t.z.clone()).collect()));
    let z_next = s.constant(Tensor::matrix(
        b,
        d,
        batch.iter().flat_map(|t| t.z_next.clone()).collect(),
    ));
    let r = s.constant(Tensor::matrix(b, 1, batch.iter().map(|t| t.r).collect()));
    let actions: Vec<f64> = batch.iter().map(|t| t.a).collect();

    let v = policy.value_var(&s, z)?;
    let target = r.add(policy.value_var(&s, z_next)?.detach().scale(gamma))?;
    let adv = target.sub(v)?;
    let critic_loss = adv.square().mean();
    let log_pi = policy.log_prob_var(&s, z, &actions)?;
    let weights: Vec<f64> = batch
        .iter()
        .zip(log_pi.value().data())
        .map(|(t, lp)| t.behaviour_log_prob.map_or(1.0, |lb| (lp - lb).exp().min(1.0)))
        .collect();
    let w = s.constant(Tensor::matrix(b, 1, weights));
    let actor_loss = adv.detach().mul(w)?.mul(log_pi)?.mean().neg();
    let mut loss = actor_loss.add(critic_loss)?;
    if entropy_coef != 0.0 {
        loss = loss.sub(policy.entropy_var(&s, z)?.mean().scale(entropy_coef))?;
    }
    let stats = AcStats {
        actor_loss: actor_loss.scalar(),
        critic_loss: critic_loss.scalar(),
        mean_advantage: adv.value().sum() / b as f64,
    };
    let g = tape.backward(loss)?;
    Ok((s.collect(&g), stats))
}

/// Where training transitions come from.
pub enum EnvSource<'a> {
    /// Confounder-free model, conditional rewards.
    ModelAlt { model: &'a Model, data: &'a Dataset },
    /// Confounded model, interventional rewards.
    ModelDecon { model: &'a Model, data: &'a Dataset },
    /// Reward table, conditional rewards.
    OracleAlt(&'a OracleModel),
    /// Reward table, interventional rewards.
    OracleDecon(&'a OracleModel),
    /// Logged transitions, embedded by a confounder-free model's inference
    /// network.
    Dataset { model: &'a Model, data: &'a Dataset },
}

impl EnvSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSource::ModelAlt { .. } => "model_alt",
            EnvSource::ModelDecon { .. } => "model_decon",
            EnvSource::OracleAlt(_) => "oracle_alt",
            EnvSource::OracleDecon(_) => "oracle_decon",
            EnvSource::Dataset { .. } => "dataset",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            EnvSource::ModelAlt { model, .. }
            | EnvSource::ModelDecon { model, .. }
            | EnvSource::Dataset { model, .. } => model.dims.d_z,
            EnvSource::OracleAlt(o) | EnvSource::OracleDecon(o) => o.state_dim,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self {
            EnvSource::ModelAlt { model, .. }
            | EnvSource::ModelDecon { model, .. }
            | EnvSource::Dataset { model, .. } => model
                .meta
                .env
                .map_or(ActionSpace::Continuous { bound: 1.0 }, ActionSpace::for_env),
            EnvSource::OracleAlt(o) | EnvSource::OracleDecon(o) => ActionSpace::for_env(o.kind),
        }
    }

    fn category_kind(&self) -> Option<(EnvKind, &ConfoundingSpec)> {
        match self {
            EnvSource::ModelAlt { data, .. }
            | EnvSource::ModelDecon { data, .. }
            | EnvSource::Dataset { data, .. } => Some((data.header.env, &data.header.spec)),
            EnvSource::OracleAlt(o) | EnvSource::OracleDecon(o) => Some((o.kind, &o.spec)),
        }
    }

    fn check(&self) -> Result<(), AgentError> {
        match self {
            EnvSource::ModelAlt { model, .. } | EnvSource::Dataset { model, .. } if model.uses_u() => {
                Err(AgentError::SourceMismatch(format!(
                    "{} needs a confounder-free model",
                    self.name()
                )))
            }
            EnvSource::ModelDecon { model, .. } if !model.uses_u() => Err(AgentError::SourceMismatch(
                "interventional rewards need a model with a confounder".into(),
            )),
            EnvSource::ModelAlt { data, .. }
            | EnvSource::ModelDecon { data, .. }
            | EnvSource::Dataset { data, .. }
                if data.is_empty() =>
            {
                Err(AgentError::EmptyTestSet)
            }
            _ => Ok(()),
        }
    }
}

fn is_t1(cat: Option<(EnvKind, &ConfoundingSpec)>, a: f64) -> bool {
    cat.is_some_and(|(k, spec)| spec.category(k, a) == Category::T1)
}

/// Oracle state: a stationary AR(1) walk that ignores actions.
fn oracle_next(z: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
    z.iter()
        .map(|&v| {
            let e: f64 = StandardNormal.sample(rng);
            0.9 * v + 0.19f64.sqrt() * e
        })
        .collect()
}

fn oracle_start(dim: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// A behaviour-policy sequence of length 5 under a hidden `u`, used as
/// posterior evidence for the table model.
fn oracle_evidence(o: &OracleModel, u: u8, rng: &mut dyn RngCore) -> Evidence {
    let mut ev = Evidence::default();
    for _ in 0..5 {
        let a = confounded_policy(o.kind, u, &o.spec, rng);
        let r = o.spec.sample_extra_reward(o.spec.category(o.kind, a), u, rng);
        ev.actions.push(a);
        ev.rewards.push(r);
    }
    ev
}

fn model_start(
    model: &Model,
    data: &Dataset,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Evidence), AgentError> {
    let tr = &data.trajectories[rng.gen_range(0..data.len())];
    let ev = Evidence::from_trajectory(tr, data.header.frame_len());
    let z = model.posterior_z_means(&model.evidence_batch(&ev)?)?;
    Ok((z[0].data().to_vec(), ev))
}

fn model_next(model: &Model, z: &[f64], a: f64, rng: &mut dyn RngCore) -> Result<Vec<f64>, AgentError> {
    let tape = Tape::new();
    let s = Session::new(&tape, &model.store);
    let g = model.gen_z_transition(
        &s,
        s.constant(Tensor::row(z)),
        s.constant(Tensor::scalar(model.encode_action(a))),
    )?;
    let (m, v) = (g.mean.value(), g.var.value());
    Ok(m.data()
        .iter()
        .zip(v.data())
        .map(|(&m, &v)| {
            let e: f64 = StandardNormal.sample(rng);
            m + v.sqrt() * e
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub total_reward: f64,
    pub moving_avg_reward: f64,
    pub optimal_action_freq: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub log: Vec<EpisodeLog>,
    pub replay: ReplayMemory,
}

pub fn write_training_log(path: &Path, log: &[EpisodeLog]) -> Result<(), AgentError> {
    std::fs::write(path, training_log_csv(log))?;
    Ok(())
}

pub fn training_log_csv(log: &[EpisodeLog]) -> String {
    let mut out = String::from("episode,total_reward,moving_avg_reward,optimal_action_freq,wall_ms\n");
    for row in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.episode, row.total_reward, row.moving_avg_reward, row.optimal_action_freq, row.wall_ms
        );
    }
    out
}

/// Train a fresh actor-critic in `source`. Deterministic given `cfg.seed`.
///
/// Each step samples an action, obtains the source's training reward and
/// next state, stores the transition, and applies one update on a uniform
/// replay batch once the memory holds a full batch. For the dataset source
/// the stored transitions are logged ones and the policy's own action only
/// enters the optimal-action frequency.
pub fn train_ac(
    source: &EnvSource,
    episodes: usize,
    steps: usize,
    cfg: &AgentConfig,
) -> Result<TrainOutcome, AgentError> {
    cfg.validate()?;
    source.check()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut replay_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    replay_rng.set_stream(2);
    let mut policy = PolicyParams::new(
        source.state_dim(),
        source.action_space(),
        &cfg.hidden,
        cfg.min_std,
        &mut init_rng,
    );
    let mut adam = Adam::new(cfg.adam, &policy.store);
    let mut replay = ReplayMemory::new(cfg.replay_capacity);
    let cat = source.category_kind();
    let logged = match source {
        EnvSource::Dataset { model, data } => Some(logged_transitions(model, data)?),
        _ => None,
    };
    let started = Instant::now();
    let mut baseline = RunningMean::default();
    let mut log: Vec<EpisodeLog> = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut total = 0.0;
        let mut t1 = 0usize;
        match (source, &logged) {
            (EnvSource::Dataset { .. }, Some(pool)) => {
                for _ in 0..steps {
                    let tr = pool.choose(&mut rng).expect("non-empty dataset").clone();
                    let a = policy.act(&tr.z, false, &mut rng)?;
                    t1 += usize::from(is_t1(cat, a));
                    total += tr.r;
                    baseline.push(tr.r * cfg.reward_scale);
                    replay.push(Transition {
                        r: tr.r * cfg.reward_scale,
                        ..tr
                    });
                    update(&mut policy, &mut adam, &replay, cfg, baseline.mean, &mut replay_rng)?;
                }
            }
            _ => {
                let mut ep = Episode::start(source, cfg, steps, &mut rng)?;
                for k in 0..steps {
                    let a = policy.act(&ep.z, false, &mut rng)?;
                    let behaviour_log_prob = Some(policy.log_prob(&ep.z, a)?);
                    let (r, z_next) = ep.step(source, cfg, k, a, &mut rng)?;
                    t1 += usize::from(is_t1(cat, a));
                    total += r;
                    baseline.push(r * cfg.reward_scale);
                    replay.push(Transition {
                        z: std::mem::replace(&mut ep.z, z_next.clone()),
                        a,
                        r: r * cfg.reward_scale,
                        z_next,
                        behaviour_log_prob,
                    });
                    update(&mut policy, &mut adam, &replay, cfg, baseline.mean, &mut replay_rng)?;
                }
            }
        }
        let window = &log[log.len().saturating_sub(99)..];
        let moving = (window.iter().map(|l| l.total_reward).sum::<f64>() + total) / (window.len() + 1) as f64;
        log.push(EpisodeLog {
            episode,
            total_reward: total,
            moving_avg_reward: moving,
            optimal_action_freq: if steps == 0 { 0.0 } else { t1 as f64 / steps as f64 },
            wall_ms: if cfg.record_wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    Ok(TrainOutcome { policy, log, replay })
}

fn update(
    policy: &mut PolicyParams,
    adam: &mut Adam,
    replay: &ReplayMemory,
    cfg: &AgentConfig,
    reward_mean: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(), AgentError> {
    if replay.len() < cfg.batch_size {
        return Ok(());
    }
    let mut batch = replay.sample(cfg.batch_size, rng);
    if cfg.center_rewards {
        batch.iter_mut().for_each(|t| t.r -= reward_mean);
    }
    let (grads, _) = ac_gradient(policy, &batch, cfg.gamma, cfg.entropy_coef)?;
    adam.step(&mut policy.store, &grads)?;
    Ok(())
}

#[derive(Default)]
struct RunningMean {
    mean: f64,
    n: u64,
}

impl RunningMean {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.mean += (x - self.mean) / self.n as f64;
    }
}

/// `(z_t, a_t, r_{t+1}, z_{t+1})` from every training sequence, with states
/// taken as posterior-mean latents.
fn logged_transitions(model: &Model, data: &Dataset) -> Result<Vec<Transition>, AgentError> {
    let batch = crate::model::Batch::from_dataset(data);
    let mut out = Vec::new();
    let idx: Vec<usize> = (0..batch.size()).collect();
    for chunk in idx.chunks(256) {
        let zs = model.posterior_z_means(&batch.select(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            let tr = &data.trajectories[i];
            for t in 0..tr.actions.len().saturating_sub(1) {
                out.push(Transition {
                    z: zs[t].row_slice(row).to_vec(),
                    a: tr.actions[t],
                    r: tr.rewards[t],
                    z_next: zs[t + 1].row_slice(row).to_vec(),
                    behaviour_log_prob: None,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(AgentError::EmptyTestSet);
    }
    Ok(out)
}

/// Per-episode simulation state for model and table sources.
struct Episode {
    z: Vec<f64>,
    /// Confounder draws for the whole episode, `n_u` rows per step.
    u_pool: Option<Tensor>,
    evidence: Option<Evidence>,
}

impl Episode {
    fn start(
        source: &EnvSource,
        cfg: &AgentConfig,
        steps: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self, AgentError> {
        let draws = cfg.n_u * steps.max(1);
        Ok(match source {
            EnvSource::ModelAlt { model, data } => {
                let (z, ev) = model_start(model, data, rng)?;
                Episode {
                    z,
                    u_pool: None,
                    evidence: Some(ev),
                }
            }
            EnvSource::ModelDecon { model, data } => {
                let (z, ev) = model_start(model, data, rng)?;
                let pool = model.sample_u(cfg.u_source, Some(&ev), draws, rng)?;
                Episode {
                    z,
                    u_pool: Some(pool),
                    evidence: Some(ev),
                }
            }
            EnvSource::OracleAlt(o) => Episode {
                z: oracle_start(o.state_dim, rng),
                u_pool: None,
                evidence: None,
            },
            EnvSource::OracleDecon(o) => {
                let ev = match cfg.u_source {
                    USource::Posterior => {
                        let u = o.spec.draw_u(rng);
                        Some(oracle_evidence(o, u, rng))
                    }
                    _ => None,
                };
                let pool = match cfg.u_source {
                    USource::Exact => None,
                    src => Some(o.sample_u(src, ev.as_ref(), draws, rng)?),
                };
                Episode {
                    z: oracle_start(o.state_dim, rng),
                    u_pool: pool,
                    evidence: ev,
                }
            }
            EnvSource::Dataset { .. } => unreachable!("dataset episodes replay logged data"),
        })
    }

    fn do_reward<M: RewardModel + ?Sized>(
        &self,
        model: &M,
        cfg: &AgentConfig,
        k: usize,
        a: f64,
    ) -> Result<f64, AgentError> {
        match &self.u_pool {
            Some(pool) => {
                let rows: Vec<usize> = (k * cfg.n_u..(k + 1) * cfg.n_u).collect();
                let u = pool.select_rows(&rows);
                Ok(do_reward_from_draws(model, &self.z, a, &u, cfg.u_source)?.mean)
            }
            None => Ok(crate::deconfound::do_reward_exact(model, &self.z, a)?),
        }
    }

    fn step(
        &mut self,
        source: &EnvSource,
        cfg: &AgentConfig,
        k: usize,
        a: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Vec<f64>), AgentError> {
        Ok(match source {
            EnvSource::ModelAlt { model, .. } => {
                let r = conditional_reward(*model, &self.z, a, self.evidence.as_ref(), rng)?;
                (r, model_next(model, &self.z, a, rng)?)
            }
            EnvSource::ModelDecon { model, .. } => {
                let r = self.do_reward(*model, cfg, k, a)?;
                (r, model_next(model, &self.z, a, rng)?)
            }
            EnvSource::OracleAlt(o) => {
                let r = conditional_reward(*o, &self.z, a, None, rng)?;
                (r, oracle_next(&self.z, rng))
            }
            EnvSource::OracleDecon(o) => {
                let r = self.do_reward(*o, cfg, k, a)?;
                (r, oracle_next(&self.z, rng))
            }
            EnvSource::Dataset { .. } => unreachable!("dataset episodes replay logged data"),
        })
    }
}

/// Where a trained policy is tested.
pub enum EvalEnv<'a> {
    /// The reward table acting as the true environment: `u` is drawn once
    /// per episode from its prior and extra rewards are sampled.
    Oracle(&'a OracleModel),
    /// A learned model started from test sequences. For a confounded model,
    /// `u` is drawn once per episode from `u_source`.
    Model {
        model: &'a Model,
        data: &'a Dataset,
        u_source: USource,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeEval {
    pub total_reward: f64,
    pub optimal_action_freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeEval>,
    pub steps_per_episode: usize,
    pub mean_total_reward: f64,
    pub std_total_reward: f64,
    pub mean_optimal_action_freq: f64,
    pub std_optimal_action_freq: f64,
    pub mean_reward_per_step: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Anything that maps a state to an environment-scale action.
pub trait Actor {
    fn action(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<f64, AgentError>;
}

/// Trained policies act greedily during evaluation.
impl Actor for PolicyParams {
    fn action(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<f64, AgentError> {
        self.act(z, true, rng)
    }
}

impl<F: Fn(&[f64], &mut dyn RngCore) -> f64> Actor for F {
    fn action(&self, z: &[f64], rng: &mut dyn RngCore) -> Result<f64, AgentError> {
        Ok(self(z, rng))
    }
}

pub fn evaluate<A: Actor + ?Sized>(
    policy: &A,
    env: &EvalEnv,
    n_episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<EvalReport, AgentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut total = 0.0;
        let mut t1 = 0usize;
        match env {
            EvalEnv::Oracle(o) => {
                let u = o.spec.draw_u(&mut rng);
                let mut z = oracle_start(o.state_dim, &mut rng);
                for _ in 0..steps {
                    let a = policy.action(&z, &mut rng)?;
                    let c = o.category(a);
                    t1 += usize::from(c == Category::T1);
                    total += o.spec.sample_extra_reward(c, u, &mut rng);
                    z = oracle_next(&z, &mut rng);
                }
            }
            EvalEnv::Model {
                model,
                data,
                u_source,
            } => {
                if data.is_empty() {
                    return Err(AgentError::EmptyTestSet);
                }
                let (mut z, ev) = model_start(model, data, &mut rng)?;
                let u = if model.uses_u() {
                    Some(model.sample_u(*u_source, Some(&ev), 1, &mut rng)?)
                } else {
                    None
                };
                let cat = (data.header.env, &data.header.spec);
                for _ in 0..steps {
                    let a = policy.action(&z, &mut rng)?;
                    t1 += usize::from(is_t1(Some(cat), a));
                    total += model.reward_means(&z, a, u.as_ref())?[0];
                    z = model_next(model, &z, a, &mut rng)?;
                }
            }
        }
        episodes.push(EpisodeEval {
            total_reward: total,
            optimal_action_freq: if steps == 0 { 0.0 } else { t1 as f64 / steps as f64 },
        });
    }
    let totals: Vec<f64> = episodes.iter().map(|e| e.total_reward).collect();
    let freqs: Vec<f64> = episodes.iter().map(|e| e.optimal_action_freq).collect();
    let (mean_total_reward, std_total_reward) = mean_std(&totals);
    let (mean_optimal_action_freq, std_optimal_action_freq) = mean_std(&freqs);
    Ok(EvalReport {
        steps_per_episode: steps,
        mean_reward_per_step: if steps == 0 { 0.0 } else { mean_total_reward / steps as f64 },
        episodes,
        mean_total_reward,
        std_total_reward,
        mean_optimal_action_freq,
        std_optimal_action_freq,
    })
}
