//! Sequential latent-variable model with a time-independent confounder.
//!
//! The generative side has an emission `p(x_t | z_t, u)`, an action head
//! `p(a_t | z_t, u)`, a reward head `p(r_{t+1} | z_t, a_t, u)`, and a
//! transition `p(z_t | z_{t−1}, a_{t−1})`. Inference runs two
//! bidirectional LSTMs, one for `q(u | x⃗, a⃗, r⃗)` and one for the chain
//! `q(z_t | z_{t−1}, x⃗, a⃗, r⃗)`. Two auxiliary heads `q(a_t | x_t)` and
//! `q(r_{t+1} | x_t, a_t)` are trained alongside so that a single unseen
//! frame can seed a rollout.
//!
//! With `include_u = false` (or `d_u = 0`) every `u` input, the `q(u)`
//! network and its KL term disappear. This is the confounder-free
//! ablation.

mod checkpoint;
mod elbo;
mod nets;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Dataset, EnvKind};
use crate::numerics::layers::Linear;
use crate::numerics::{NumericsError, ParamId, ParamStore, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use elbo::{ElboBreakdown, Rollout};
pub use nets::{FrameEncoder, MeanAct, PairedNet, SequenceEncoder};
pub use train::{train_model, EpochLog, TrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite value in ELBO term `{0}`")]
    NonFinite(&'static str),
    #[error("sequence length mismatch: {0}")]
    SequenceLength(String),
    #[error("horizon must be at least 1")]
    Horizon,
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

/// Prior over the confounder used when sampling `u` for interventions.
/// Training always uses a standard normal prior in the KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum UPrior {
    #[default]
    Normal,
    Bernoulli {
        p: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Channels of the stride-2 convolutions; empty means raw pixels feed
    /// the first fully connected layer.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    /// Width of each per-input branch layer.
    pub branch_width: usize,
    /// Hidden widths of the shared trunk after the branches are joined.
    pub trunk: Vec<usize>,
    /// Trunk of the frame decoder.
    pub decoder: Vec<usize>,
    pub lstm: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_channels: vec![8, 16],
            kernel: 5,
            branch_width: 64,
            trunk: vec![64, 64],
            decoder: vec![128, 128],
            lstm: 64,
        }
    }
}

impl ArchConfig {
    /// Widths from the published architecture table, for paper-scale runs.
    pub fn paper() -> Self {
        ArchConfig {
            conv_channels: vec![16, 32, 32],
            kernel: 5,
            branch_width: 100,
            trunk: vec![100, 100],
            decoder: vec![512, 512],
            lstm: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_z: usize,
    pub d_u: usize,
    pub include_u: bool,
    /// Whether `log p(a_t | z_t, u)` enters the bound.
    pub include_action_likelihood: bool,
    pub u_prior: UPrior,
    pub arch: ArchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_z: 50,
            d_u: 2,
            include_u: true,
            include_action_likelihood: true,
            u_prior: UPrior::Normal,
            arch: ArchConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn uses_u(&self) -> bool {
        self.include_u && self.d_u > 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_x: usize,
    pub d_a: usize,
    pub d_r: usize,
    pub d_z: usize,
    pub d_u: usize,
    pub t: usize,
    pub height: usize,
    pub width: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_x != self.height * self.width {
            return Err(ModelError::Config(format!(
                "d_x = {} but frames are {}x{}",
                self.d_x, self.height, self.width
            )));
        }
        if self.d_z == 0 || self.d_z >= self.d_x {
            return Err(ModelError::Config(format!(
                "need 0 < d_z < d_x, got d_z = {} and d_x = {}",
                self.d_z, self.d_x
            )));
        }
        if self.d_a == 0 || self.d_r == 0 || self.t == 0 {
            return Err(ModelError::Config("d_a, d_r and T must be positive".into()));
        }
        Ok(())
    }
}

/// Data-dependent constants stored with a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub env: Option<EnvKind>,
    pub reward_min: f64,
    pub reward_max: f64,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            env: None,
            reward_min: 0.0,
            reward_max: 1.0,
        }
    }
}

impl ModelMeta {
    pub fn normalize_reward(&self, r: f64) -> f64 {
        (r - self.reward_min) / (self.reward_max - self.reward_min)
    }

    pub fn denormalize_reward(&self, r: f64) -> f64 {
        r * (self.reward_max - self.reward_min) + self.reward_min
    }
}

#[derive(Clone, Debug)]
pub(crate) struct QuNet {
    enc: SequenceEncoder,
    mean: Linear,
    var: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct QzNet {
    enc: SequenceEncoder,
    w_z: Linear,
    w_a: Linear,
    z0: ParamId,
    a0: ParamId,
    mean: Linear,
    var: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Nets {
    gen_x: PairedNet,
    gen_a: PairedNet,
    gen_r: PairedNet,
    trans: PairedNet,
    q_u: Option<QuNet>,
    q_z: QzNet,
    aux_a_enc: FrameEncoder,
    aux_a: PairedNet,
    aux_r_enc: FrameEncoder,
    aux_r: PairedNet,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub meta: ModelMeta,
    pub store: ParamStore,
    nets: Nets,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        dims: ModelDims,
        meta: ModelMeta,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        dims.validate()?;
        if dims.d_z != config.d_z || dims.d_u != config.d_u {
            return Err(ModelError::Config("dims disagree with config".into()));
        }
        let arch = &config.arch;
        if !arch.conv_channels.is_empty() && arch.kernel == 0 {
            return Err(ModelError::Config("kernel must be positive".into()));
        }
        let uses_u = config.uses_u();
        let mut store = ParamStore::new();
        let s = &mut store;
        let (bw, trunk) = (arch.branch_width, arch.trunk.as_slice());
        let with_u = |base: Vec<usize>| {
            let mut v = base;
            if uses_u {
                v.push(dims.d_u);
            }
            v
        };
        let frame = (dims.height, dims.width);
        let gen_x = PairedNet::new(
            s,
            "gen_x",
            &with_u(vec![dims.d_z]),
            bw,
            &arch.decoder,
            dims.d_x,
            MeanAct::Sigmoid,
            rng,
        );
        let gen_a = PairedNet::new(
            s,
            "gen_a",
            &with_u(vec![dims.d_z]),
            bw,
            trunk,
            dims.d_a,
            MeanAct::Tanh,
            rng,
        );
        let gen_r = PairedNet::new(
            s,
            "gen_r",
            &with_u(vec![dims.d_z, dims.d_a]),
            bw,
            trunk,
            dims.d_r,
            MeanAct::Sigmoid,
            rng,
        );
        let trans = PairedNet::new(
            s,
            "trans",
            &[dims.d_z, dims.d_a],
            bw,
            trunk,
            dims.d_z,
            MeanAct::Identity,
            rng,
        );
        let q_u = if uses_u {
            let fe = FrameEncoder::new(s, "q_u.frame", frame, &arch.conv_channels, arch.kernel, rng);
            let enc = SequenceEncoder::new(
                s, "q_u", fe, dims.d_a, dims.d_r, bw, trunk, arch.lstm, rng,
            );
            Some(QuNet {
                mean: Linear::new(s, "q_u.mean", 2 * arch.lstm, dims.d_u, rng),
                var: Linear::new(s, "q_u.var", 2 * arch.lstm, dims.d_u, rng),
                enc,
            })
        } else {
            None
        };
        let fe = FrameEncoder::new(s, "q_z.frame", frame, &arch.conv_channels, arch.kernel, rng);
        let enc = SequenceEncoder::new(s, "q_z", fe, dims.d_a, dims.d_r, bw, trunk, arch.lstm, rng);
        let q_z = QzNet {
            enc,
            w_z: Linear::new(s, "q_z.w_z", dims.d_z, arch.lstm, rng),
            w_a: Linear::new(s, "q_z.w_a", dims.d_a, arch.lstm, rng),
            z0: s.add("q_z.z0", Tensor::zeros(1, dims.d_z)),
            a0: s.add("q_z.a0", Tensor::zeros(1, dims.d_a)),
            mean: Linear::new(s, "q_z.mean", arch.lstm, dims.d_z, rng),
            var: Linear::new(s, "q_z.var", arch.lstm, dims.d_z, rng),
        };
        let aux_a_enc =
            FrameEncoder::new(s, "aux_a.frame", frame, &arch.conv_channels, arch.kernel, rng);
        let aux_a = PairedNet::new(
            s,
            "aux_a",
            &[aux_a_enc.out_len()],
            bw,
            &[],
            dims.d_a,
            MeanAct::Tanh,
            rng,
        );
        let aux_r_enc =
            FrameEncoder::new(s, "aux_r.frame", frame, &arch.conv_channels, arch.kernel, rng);
        let aux_r = PairedNet::new(
            s,
            "aux_r",
            &[aux_r_enc.out_len(), dims.d_a],
            bw,
            &trunk[..trunk.len().min(1)],
            dims.d_r,
            MeanAct::Sigmoid,
            rng,
        );
        Ok(Model {
            config,
            dims,
            meta,
            store,
            nets: Nets {
                gen_x,
                gen_a,
                gen_r,
                trans,
                q_u,
                q_z,
                aux_a_enc,
                aux_a,
                aux_r_enc,
                aux_r,
            },
        })
    }

    /// Build a model sized for `ds` with rewards normalized to its range.
    pub fn for_dataset<R: Rng + ?Sized>(
        config: ModelConfig,
        ds: &Dataset,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let h = &ds.header;
        let dims = ModelDims {
            d_x: h.height * h.width,
            d_a: 1,
            d_r: 1,
            d_z: config.d_z,
            d_u: config.d_u,
            t: h.t,
            height: h.height,
            width: h.width,
        };
        let meta = ModelMeta {
            env: Some(h.env),
            reward_min: h.reward_min,
            reward_max: h.reward_max,
        };
        Model::new(config, dims, meta, rng)
    }

    pub fn uses_u(&self) -> bool {
        self.config.uses_u()
    }
}

/// Sequences laid out step-major: `x[t]` is `[B, d_x]`, `a[t]` is
/// `[B, d_a]` in the model's `[-1, 1]` action scale and `r[t]` is `[B, 1]`
/// normalized to the training reward range.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<Tensor>,
    pub a: Vec<Tensor>,
    pub r: Vec<Tensor>,
    /// Ground-truth confounder bits, when known.
    pub u: Vec<u8>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let h = &ds.header;
        let n = ds.len();
        let frame_len = h.frame_len();
        let mut x = vec![Vec::with_capacity(n * frame_len); h.t];
        let mut a = vec![Vec::with_capacity(n); h.t];
        let mut r = vec![Vec::with_capacity(n); h.t];
        for tr in &ds.trajectories {
            for t in 0..h.t {
                x[t].extend(tr.frame(t, frame_len).iter().map(|&v| f64::from(v)));
                a[t].push(h.env.encode_action(tr.actions[t]));
                r[t].push(h.normalize_reward(tr.rewards[t]));
            }
        }
        Batch {
            x: x.into_iter().map(|d| Tensor::matrix(n, frame_len, d)).collect(),
            a: a.into_iter().map(|d| Tensor::matrix(n, 1, d)).collect(),
            r: r.into_iter().map(|d| Tensor::matrix(n, 1, d)).collect(),
            u: ds.trajectories.iter().map(|t| t.u).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.x.first().map_or(0, Tensor::rows)
    }

    pub fn steps(&self) -> usize {
        self.x.len()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let pick = |v: &Vec<Tensor>| v.iter().map(|t| t.select_rows(idx)).collect();
        Batch {
            x: pick(&self.x),
            a: pick(&self.a),
            r: pick(&self.r),
            u: if self.u.is_empty() {
                Vec::new()
            } else {
                idx.iter().map(|&i| self.u[i]).collect()
            },
        }
    }

    pub(crate) fn check(&self, dims: &ModelDims) -> Result<(), ModelError> {
        let t = self.steps();
        if t == 0 || self.a.len() != t || self.r.len() != t {
            return Err(ModelError::SequenceLength(format!(
                "{} frames, {} actions, {} rewards",
                t,
                self.a.len(),
                self.r.len()
            )));
        }
        let b = self.size();
        for step in 0..t {
            if self.x[step].rows() != b
                || self.a[step].rows() != b
                || self.r[step].rows() != b
                || self.x[step].cols() != dims.d_x
                || self.a[step].cols() != dims.d_a
                || self.r[step].cols() != dims.d_r
            {
                return Err(ModelError::SequenceLength(format!(
                    "step {step} has inconsistent shapes"
                )));
            }
        }
        Ok(())
    }
}
