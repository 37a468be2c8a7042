//! Interventional rewards.
//!
//! `p(r | z, do(a))` is estimated by averaging the reward head's mean over
//! confounder draws, `(1/N) Σᵢ E[r | z, a, uᵢ]`. Draws come from the prior,
//! from the posterior given an evidence sequence, or (for discrete
//! confounders) from exact enumeration.
//!
//! Actions passed to a [`RewardModel`] are always on the environment's own
//! scale and rewards are returned on the raw (denormalized) scale.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::{CausalError, DiscreteCpt, Outcome};
use crate::envs::{Category, ConfoundingSpec, EnvKind, Trajectory};
use crate::model::{Batch, Model, ModelError, UPrior};
use crate::numerics::{Session, Tape, Tensor};

pub const DEFAULT_U_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum DeconfoundError {
    #[error("sample size must be at least 1")]
    NoSamples,
    #[error("posterior confounder sampling needs an evidence sequence")]
    MissingEvidence,
    #[error("exact enumeration needs a finite confounder space")]
    NotEnumerable,
    #[error("the model has no confounder to intervene over")]
    NoConfounder,
    #[error("state has {got} entries, expected {expected}")]
    StateDim { got: usize, expected: usize },
    #[error("evidence: {0}")]
    Evidence(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Causal(#[from] CausalError),
}

/// Where confounder values come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum USource {
    #[default]
    Prior,
    Posterior,
    Exact,
}

/// One observed sequence on the environment's scale.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evidence {
    /// Frames with pixels in `[0, 1]`; may be empty for table models.
    pub frames: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Evidence {
    /// Copy one logged trajectory.
    pub fn from_trajectory(tr: &Trajectory, frame_len: usize) -> Self {
        Evidence {
            frames: (0..tr.actions.len())
                .map(|t| tr.frame(t, frame_len).iter().map(|&p| f64::from(p)).collect())
                .collect(),
            actions: tr.actions.clone(),
            rewards: tr.rewards.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoRewardEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub u_source: USource,
}

/// Anything that can score `E[r | z, a, u]`.
pub trait RewardModel {
    fn state_dim(&self) -> usize;

    fn has_confounder(&self) -> bool;

    /// `n` confounder draws as rows of a `[n, d_u]` tensor.
    fn sample_u(
        &self,
        source: USource,
        evidence: Option<&Evidence>,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Tensor, DeconfoundError>;

    /// Prior support and weights, when the confounder is discrete.
    fn enumerate_u(&self) -> Option<Vec<(f64, Vec<f64>)>> {
        None
    }

    /// `E[r | z, a, uᵢ]` for every row of `u`, or the single u-free value
    /// when `u` is `None`.
    fn reward_means(&self, z: &[f64], a: f64, u: Option<&Tensor>) -> Result<Vec<f64>, DeconfoundError>;

    /// `E[r | z, a]` without adjustment.
    fn conditional_reward(
        &self,
        z: &[f64],
        a: f64,
        evidence: Option<&Evidence>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<f64, DeconfoundError>;
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte-Carlo estimate of `E[r | z, do(a)]`.
///
/// With [`USource::Exact`] the prior support is enumerated instead; the
/// reported standard error is then zero and `n_samples` is the support size.
pub fn do_reward_mc<M: RewardModel + ?Sized>(
    model: &M,
    z: &[f64],
    a: f64,
    n: usize,
    source: USource,
    evidence: Option<&Evidence>,
    rng: &mut dyn rand::RngCore,
) -> Result<DoRewardEstimate, DeconfoundError> {
    if n == 0 {
        return Err(DeconfoundError::NoSamples);
    }
    if !model.has_confounder() {
        let mean = model.reward_means(z, a, None)?[0];
        return Ok(DoRewardEstimate {
            mean,
            std_error: 0.0,
            n_samples: n,
            u_source: source,
        });
    }
    if source == USource::Exact {
        let support = model.enumerate_u().ok_or(DeconfoundError::NotEnumerable)?;
        return Ok(DoRewardEstimate {
            mean: do_reward_exact(model, z, a)?,
            std_error: 0.0,
            n_samples: support.len(),
            u_source: source,
        });
    }
    let u = model.sample_u(source, evidence, n, rng)?;
    do_reward_from_draws(model, z, a, &u, source)
}

/// The Monte-Carlo average over confounder draws already in hand, one per
/// row of `u`.
pub fn do_reward_from_draws<M: RewardModel + ?Sized>(
    model: &M,
    z: &[f64],
    a: f64,
    u: &Tensor,
    source: USource,
) -> Result<DoRewardEstimate, DeconfoundError> {
    if u.rows() == 0 {
        return Err(DeconfoundError::NoSamples);
    }
    let means = model.reward_means(z, a, Some(u))?;
    let (mean, std_error) = mean_and_se(&means);
    Ok(DoRewardEstimate {
        mean,
        std_error,
        n_samples: u.rows(),
        u_source: source,
    })
}

/// `Σᵤ p(u) E[r | z, a, u]` over a discrete confounder.
pub fn do_reward_exact<M: RewardModel + ?Sized>(model: &M, z: &[f64], a: f64) -> Result<f64, DeconfoundError> {
    let support = model.enumerate_u().ok_or(DeconfoundError::NotEnumerable)?;
    let d_u = support.first().map_or(0, |(_, u)| u.len());
    let weights: Vec<f64> = support.iter().map(|(w, _)| *w).collect();
    let u = Tensor::matrix(
        support.len(),
        d_u,
        support.into_iter().flat_map(|(_, u)| u).collect(),
    );
    let means = model.reward_means(z, a, Some(&u))?;
    Ok(weights.iter().zip(&means).map(|(w, m)| w * m).sum())
}

/// `E[r | z, a]` as consumed by the unadjusted baseline.
pub fn conditional_reward<M: RewardModel + ?Sized>(
    model: &M,
    z: &[f64],
    a: f64,
    evidence: Option<&Evidence>,
    rng: &mut dyn rand::RngCore,
) -> Result<f64, DeconfoundError> {
    model.conditional_reward(z, a, evidence, rng)
}

/// The confounding table itself, standing in for learned networks.
///
/// The state is ignored: rewards depend only on the action's category and
/// the binary confounder `u ~ Bernoulli(p_u)`.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub kind: EnvKind,
    pub spec: ConfoundingSpec,
    pub state_dim: usize,
    cpt: DiscreteCpt,
}

impl OracleModel {
    pub fn new(kind: EnvKind, spec: ConfoundingSpec, state_dim: usize) -> Self {
        let cpt = spec.to_cpt();
        OracleModel {
            kind,
            spec,
            state_dim,
            cpt,
        }
    }

    /// Pendulum-scaled actions over the default table.
    pub fn benchmark() -> Self {
        OracleModel::new(EnvKind::Pendulum, ConfoundingSpec::default(), 2)
    }

    pub fn category(&self, a: f64) -> Category {
        self.spec.category(self.kind, a)
    }

    /// `p(u | a⃗, r⃗)` for the extra-reward mixture. Frames are ignored.
    pub fn posterior_u1(&self, ev: &Evidence) -> Result<f64, DeconfoundError> {
        if ev.actions.len() != ev.rewards.len() {
            return Err(DeconfoundError::Evidence(format!(
                "{} actions but {} rewards",
                ev.actions.len(),
                ev.rewards.len()
            )));
        }
        let mut log_odds = (self.spec.p_u / (1.0 - self.spec.p_u)).ln();
        for (&a, &r) in ev.actions.iter().zip(&ev.rewards) {
            let c = self.category(a);
            let lik = |u: usize| {
                let p_t1 = self.spec.p_t1_given_u[u];
                let p_cat = if c == Category::T1 { p_t1 } else { 1.0 - p_t1 };
                let p1 = self.spec.mixture_probs[c.index()][u];
                p_cat * (p1 * self.component_density(r, self.spec.mu_r1)
                    + (1.0 - p1) * self.component_density(r, self.spec.mu_r2))
            };
            log_odds += lik(1).ln() - lik(0).ln();
        }
        Ok(1.0 / (1.0 + (-log_odds).exp()))
    }

    fn component_density(&self, r: f64, mu: f64) -> f64 {
        let s = self.spec.sigma;
        if s == 0.0 {
            return if r == mu { 1.0 } else { 0.0 };
        }
        let d = (r - mu) / s;
        (-0.5 * d * d).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    }
}

impl RewardModel for OracleModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn has_confounder(&self) -> bool {
        true
    }

    fn sample_u(
        &self,
        source: USource,
        evidence: Option<&Evidence>,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Tensor, DeconfoundError> {
        let p = match source {
            USource::Prior => self.spec.p_u,
            USource::Posterior => self.posterior_u1(evidence.ok_or(DeconfoundError::MissingEvidence)?)?,
            USource::Exact => return Err(DeconfoundError::NotEnumerable),
        };
        Ok(Tensor::matrix(
            n,
            1,
            (0..n).map(|_| f64::from(u8::from(rng.gen_bool(p)))).collect(),
        ))
    }

    fn enumerate_u(&self) -> Option<Vec<(f64, Vec<f64>)>> {
        Some(vec![
            (1.0 - self.spec.p_u, vec![0.0]),
            (self.spec.p_u, vec![1.0]),
        ])
    }

    fn reward_means(&self, _z: &[f64], a: f64, u: Option<&Tensor>) -> Result<Vec<f64>, DeconfoundError> {
        let u = u.ok_or(DeconfoundError::NoConfounder)?;
        let c = self.category(a);
        Ok(u.data()
            .iter()
            .map(|&v| self.spec.expected_extra_reward(c, u8::from(v >= 0.5)))
            .collect())
    }

    /// Conditions on the action's category only; the evidence is unused so
    /// that the baseline sees the observational `E[r | category]`.
    fn conditional_reward(
        &self,
        _z: &[f64],
        a: f64,
        _evidence: Option<&Evidence>,
        _rng: &mut dyn rand::RngCore,
    ) -> Result<f64, DeconfoundError> {
        Ok(self.cpt.conditional_query(self.category(a).index(), Outcome::Expectation)?)
    }
}

impl Model {
    /// A one-sequence batch on the model's scales.
    pub fn evidence_batch(&self, ev: &Evidence) -> Result<Batch, DeconfoundError> {
        let t = ev.len();
        if t == 0 || ev.frames.len() != t || ev.rewards.len() != t {
            return Err(DeconfoundError::Evidence(format!(
                "{} frames, {} actions, {} rewards",
                ev.frames.len(),
                t,
                ev.rewards.len()
            )));
        }
        if let Some(f) = ev.frames.iter().find(|f| f.len() != self.dims.d_x) {
            return Err(DeconfoundError::Evidence(format!(
                "frame has {} pixels, expected {}",
                f.len(),
                self.dims.d_x
            )));
        }
        Ok(Batch {
            x: ev.frames.iter().map(|f| Tensor::row(f)).collect(),
            a: ev.actions.iter().map(|&a| Tensor::scalar(self.encode_action(a))).collect(),
            r: ev
                .rewards
                .iter()
                .map(|&r| Tensor::scalar(self.meta.normalize_reward(r)))
                .collect(),
            u: vec![0],
        })
    }

    /// Environment-scale action to the model's `[-1, 1]` scale.
    pub fn encode_action(&self, a: f64) -> f64 {
        self.meta.env.map_or(a, |e| e.encode_action(a))
    }

    fn check_state(&self, z: &[f64]) -> Result<(), DeconfoundError> {
        if z.len() != self.dims.d_z {
            return Err(DeconfoundError::StateDim {
                got: z.len(),
                expected: self.dims.d_z,
            });
        }
        Ok(())
    }

    /// `q(u | evidence)` as `(mean, var)` rows of length `d_u`.
    fn posterior_u_of(&self, ev: &Evidence) -> Result<(Vec<f64>, Vec<f64>), DeconfoundError> {
        let batch = self.evidence_batch(ev)?;
        let (m, v) = self.posterior_u(&batch)?.ok_or(DeconfoundError::NoConfounder)?;
        Ok((m.into_data(), v.into_data()))
    }
}

impl RewardModel for Model {
    fn state_dim(&self) -> usize {
        self.dims.d_z
    }

    fn has_confounder(&self) -> bool {
        self.uses_u()
    }

    fn sample_u(
        &self,
        source: USource,
        evidence: Option<&Evidence>,
        n: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Tensor, DeconfoundError> {
        if !self.uses_u() {
            return Err(DeconfoundError::NoConfounder);
        }
        let d = self.dims.d_u;
        let data = match source {
            USource::Prior => match self.config.u_prior {
                UPrior::Normal => (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
                UPrior::Bernoulli { p } => (0..n * d)
                    .map(|_| f64::from(u8::from(rng.gen_bool(p))))
                    .collect(),
            },
            USource::Posterior => {
                let (m, v) = self.posterior_u_of(evidence.ok_or(DeconfoundError::MissingEvidence)?)?;
                (0..n * d)
                    .map(|k| {
                        let e: f64 = StandardNormal.sample(rng);
                        m[k % d] + v[k % d].sqrt() * e
                    })
                    .collect()
            }
            USource::Exact => return Err(DeconfoundError::NotEnumerable),
        };
        Ok(Tensor::matrix(n, d, data))
    }

    fn enumerate_u(&self) -> Option<Vec<(f64, Vec<f64>)>> {
        let UPrior::Bernoulli { p } = self.config.u_prior else {
            return None;
        };
        if !self.uses_u() || self.dims.d_u > 16 {
            return None;
        }
        let d = self.dims.d_u;
        Some(
            (0..1usize << d)
                .map(|bits| {
                    let u: Vec<f64> = (0..d).map(|j| ((bits >> j) & 1) as f64).collect();
                    let w = u.iter().map(|&b| if b == 1.0 { p } else { 1.0 - p }).product();
                    (w, u)
                })
                .collect(),
        )
    }

    fn reward_means(&self, z: &[f64], a: f64, u: Option<&Tensor>) -> Result<Vec<f64>, DeconfoundError> {
        self.check_state(z)?;
        let n = u.map_or(1, Tensor::rows);
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let zv = s.constant(Tensor::row(z).repeat_rows(n));
        let av = s.constant(Tensor::full(n, 1, self.encode_action(a)));
        let uv = match (self.uses_u(), u) {
            (true, Some(u)) => Some(s.constant(u.clone())),
            (true, None) => return Err(DeconfoundError::NoConfounder),
            (false, _) => None,
        };
        let mean = self.gen_r(&s, zv, av, uv)?.mean.value();
        Ok(mean.data().iter().map(|&r| self.meta.denormalize_reward(r)).collect())
    }

    /// The ablation scores `gen_r` directly. The confounded model averages
    /// over `N` draws from `q(u | evidence)`, so evidence is required.
    fn conditional_reward(
        &self,
        z: &[f64],
        a: f64,
        evidence: Option<&Evidence>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<f64, DeconfoundError> {
        if !self.uses_u() {
            return Ok(self.reward_means(z, a, None)?[0]);
        }
        let u = self.sample_u(USource::Posterior, evidence, DEFAULT_U_SAMPLES, rng)?;
        let m = self.reward_means(z, a, Some(&u))?;
        Ok(m.iter().sum::<f64>() / m.len() as f64)
    }
}
