use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, Model, ModelError};
use crate::numerics::{
    gaussian_logpdf_rows, kl_diag_gaussians_rows, reparam_sample, DiagGaussian, Session, Tape,
    Tensor, Var,
};

/// Batch-mean terms of the bound. `total` is the bound itself, plus the
/// auxiliary log-likelihoods when they were part of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_x: f64,
    pub recon_a: f64,
    pub recon_r: f64,
    pub kl_u: f64,
    pub kl_z1: f64,
    pub kl_z_transitions: f64,
    pub aux_a: f64,
    pub aux_r: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub const FIELDS: [&'static str; 9] = [
        "recon_x",
        "recon_a",
        "recon_r",
        "kl_u",
        "kl_z1",
        "kl_z_transitions",
        "aux_a",
        "aux_r",
        "total",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.recon_x,
            self.recon_a,
            self.recon_r,
            self.kl_u,
            self.kl_z1,
            self.kl_z_transitions,
            self.aux_a,
            self.aux_r,
            self.total,
        ]
    }

    pub(crate) fn accumulate(&mut self, other: &ElboBreakdown, w: f64) {
        self.recon_x += w * other.recon_x;
        self.recon_a += w * other.recon_a;
        self.recon_r += w * other.recon_r;
        self.kl_u += w * other.kl_u;
        self.kl_z1 += w * other.kl_z1;
        self.kl_z_transitions += w * other.kl_z_transitions;
        self.aux_a += w * other.aux_a;
        self.aux_r += w * other.aux_r;
        self.total += w * other.total;
    }
}

/// Constant tape inputs for one batch.
pub(crate) struct Inputs<'t> {
    pub x: Vec<Var<'t>>,
    pub a: Vec<Var<'t>>,
    pub r: Vec<Var<'t>>,
}

impl<'t> Inputs<'t> {
    pub fn new(s: &Session<'t, '_>, batch: &Batch) -> Self {
        let c = |v: &[Tensor]| v.iter().map(|t| s.constant(t.clone())).collect();
        Inputs {
            x: c(&batch.x),
            a: c(&batch.a),
            r: c(&batch.r),
        }
    }
}

/// Result of running the inference chain once.
pub(crate) struct PosteriorSample<'t> {
    pub q_u: Option<DiagGaussian<'t>>,
    pub u: Option<Var<'t>>,
    pub q_z: Vec<DiagGaussian<'t>>,
    pub z: Vec<Var<'t>>,
}

fn sum_batch_mean<'t>(v: Var<'t>, b: usize) -> Var<'t> {
    v.sum().scale(1.0 / b as f64)
}

fn finite(v: f64, term: &'static str) -> Result<f64, ModelError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ModelError::NonFinite(term))
    }
}

/// One-step-ahead prediction from a single frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rollout {
    /// Action and reward the auxiliary heads assign to the input frame.
    pub inferred_action: f64,
    pub inferred_reward: f64,
    /// Actions applied at each step, in the model's `[-1, 1]` scale.
    pub actions: Vec<f64>,
    /// Predicted rewards, denormalized.
    pub rewards: Vec<f64>,
    /// Decoded frame means, `[1, d_x]` each.
    #[serde(skip)]
    pub frames: Vec<Tensor>,
}

impl Model {
    fn with_u<'t>(base: &[Var<'t>], u: Option<Var<'t>>) -> Vec<Var<'t>> {
        let mut v = base.to_vec();
        v.extend(u);
        v
    }

    pub fn gen_x<'t>(
        &self,
        s: &Session<'t, '_>,
        z: Var<'t>,
        u: Option<Var<'t>>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        Ok(self.nets.gen_x.forward(s, &Self::with_u(&[z], u))?)
    }

    pub fn gen_a<'t>(
        &self,
        s: &Session<'t, '_>,
        z: Var<'t>,
        u: Option<Var<'t>>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        Ok(self.nets.gen_a.forward(s, &Self::with_u(&[z], u))?)
    }

    /// Reward head over the normalized reward scale.
    pub fn gen_r<'t>(
        &self,
        s: &Session<'t, '_>,
        z: Var<'t>,
        a: Var<'t>,
        u: Option<Var<'t>>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        Ok(self.nets.gen_r.forward(s, &Self::with_u(&[z, a], u))?)
    }

    pub fn gen_z_transition<'t>(
        &self,
        s: &Session<'t, '_>,
        z_prev: Var<'t>,
        a_prev: Var<'t>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        Ok(self.nets.trans.forward(s, &[z_prev, a_prev])?)
    }

    /// Standard normal `p(z₁)` for `rows` sequences.
    pub fn gen_prior_z<'t>(&self, tape: &'t Tape, rows: usize) -> DiagGaussian<'t> {
        DiagGaussian::standard(tape, rows, self.dims.d_z)
    }

    /// Standard normal `p(u)` used by the bound.
    pub fn gen_prior_u<'t>(&self, tape: &'t Tape, rows: usize) -> DiagGaussian<'t> {
        DiagGaussian::standard(tape, rows, self.dims.d_u)
    }

    pub fn aux_a<'t>(
        &self,
        s: &Session<'t, '_>,
        x: Var<'t>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        let f = self.nets.aux_a_enc.forward(s, x)?;
        Ok(self.nets.aux_a.forward(s, &[f])?)
    }

    pub fn aux_r<'t>(
        &self,
        s: &Session<'t, '_>,
        x: Var<'t>,
        a: Var<'t>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        let f = self.nets.aux_r_enc.forward(s, x)?;
        Ok(self.nets.aux_r.forward(s, &[f, a])?)
    }

    /// `q(u | x⃗, a⃗, r⃗)`, or `None` for the confounder-free model.
    pub fn infer_u<'t>(
        &self,
        s: &Session<'t, '_>,
        x: &[Var<'t>],
        a: &[Var<'t>],
        r: &[Var<'t>],
    ) -> Result<Option<DiagGaussian<'t>>, ModelError> {
        let Some(q) = &self.nets.q_u else {
            return Ok(None);
        };
        if x.is_empty() || x.len() != a.len() || x.len() != r.len() {
            return Err(ModelError::SequenceLength(format!(
                "{} frames, {} actions, {} rewards",
                x.len(),
                a.len(),
                r.len()
            )));
        }
        let enc = q.enc.forward(s, x, a, r)?;
        let summary = Var::concat(&[*enc.left.last().unwrap(), enc.right[0]])?;
        Ok(Some(DiagGaussian::from_raw(
            q.mean.forward(s, summary)?,
            q.var.forward(s, summary)?,
        )))
    }

    /// Bidirectional states for the `z` chain.
    pub(crate) fn encode_z<'t>(
        &self,
        s: &Session<'t, '_>,
        inp: &Inputs<'t>,
    ) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>), ModelError> {
        let enc = self.nets.q_z.enc.forward(s, &inp.x, &inp.a, &inp.r)?;
        Ok((enc.left, enc.right))
    }

    /// One step of the `z` posterior from the averaged combiner
    /// `¼(tanh(W_z z_{t−1} + b_z) + tanh(W_a a_{t−1} + b_a) + h_left + h_right)`.
    /// `None` for the previous latent or action selects the learned
    /// initial embeddings.
    pub fn infer_z_step<'t>(
        &self,
        s: &Session<'t, '_>,
        z_prev: Option<Var<'t>>,
        a_prev: Option<Var<'t>>,
        left: Var<'t>,
        right: Var<'t>,
    ) -> Result<DiagGaussian<'t>, ModelError> {
        let q = &self.nets.q_z;
        let z_prev = z_prev.unwrap_or_else(|| s.param(q.z0));
        let a_prev = a_prev.unwrap_or_else(|| s.param(q.a0));
        let hz = q.w_z.forward(s, z_prev)?.tanh();
        let ha = q.w_a.forward(s, a_prev)?.tanh();
        // Summing the [B, H] terms first lets the [1, H] initial terms broadcast.
        let h = left.add(right)?.add(hz)?.add(ha)?.scale(0.25);
        Ok(DiagGaussian::from_raw(
            q.mean.forward(s, h)?,
            q.var.forward(s, h)?,
        ))
    }

    /// Sample `u` and the `z` chain ancestrally from the posterior.
    pub(crate) fn sample_posterior<'t, R: Rng + ?Sized>(
        &self,
        s: &Session<'t, '_>,
        inp: &Inputs<'t>,
        rng: &mut R,
        use_means: bool,
    ) -> Result<PosteriorSample<'t>, ModelError> {
        let q_u = self.infer_u(s, &inp.x, &inp.a, &inp.r)?;
        let draw = |g: &DiagGaussian<'t>, rng: &mut R| -> Result<Var<'t>, ModelError> {
            if use_means {
                Ok(g.mean)
            } else {
                Ok(reparam_sample(g, rng)?)
            }
        };
        let u = match &q_u {
            Some(g) => Some(draw(g, rng)?),
            None => None,
        };
        let (left, right) = self.encode_z(s, inp)?;
        let mut q_z = Vec::with_capacity(inp.x.len());
        let mut z = Vec::with_capacity(inp.x.len());
        for t in 0..inp.x.len() {
            let (zp, ap) = if t == 0 {
                (None, None)
            } else {
                (Some(z[t - 1]), Some(inp.a[t - 1]))
            };
            let g = self.infer_z_step(s, zp, ap, left[t], right[t])?;
            z.push(draw(&g, rng)?);
            q_z.push(g);
        }
        Ok(PosteriorSample { q_u, u, q_z, z })
    }

    /// Single-sample estimate of the bound; KL terms in closed form.
    pub(crate) fn elbo_terms<'t, R: Rng + ?Sized>(
        &self,
        s: &Session<'t, '_>,
        batch: &Batch,
        rng: &mut R,
        with_aux: bool,
        kl_weight: f64,
    ) -> Result<(Var<'t>, ElboBreakdown), ModelError> {
        batch.check(&self.dims)?;
        let b = batch.size();
        let tape = s.tape();
        let inp = Inputs::new(s, batch);
        let post = self.sample_posterior(s, &inp, rng, false)?;

        let mut recon_x = tape.scalar(0.0);
        let mut recon_a = tape.scalar(0.0);
        let mut recon_r = tape.scalar(0.0);
        let mut kl_z = tape.scalar(0.0);
        for t in 0..batch.steps() {
            let z = post.z[t];
            recon_x = recon_x.add(gaussian_logpdf_rows(inp.x[t], &self.gen_x(s, z, post.u)?)?.sum())?;
            if self.config.include_action_likelihood {
                recon_a =
                    recon_a.add(gaussian_logpdf_rows(inp.a[t], &self.gen_a(s, z, post.u)?)?.sum())?;
            }
            let pr = self.gen_r(s, z, inp.a[t], post.u)?;
            recon_r = recon_r.add(gaussian_logpdf_rows(inp.r[t], &pr)?.sum())?;
            if t > 0 {
                let prior = self.gen_z_transition(s, post.z[t - 1], inp.a[t - 1])?;
                kl_z = kl_z.add(kl_diag_gaussians_rows(&post.q_z[t], &prior)?.sum())?;
            }
        }
        let kl_z1 = kl_diag_gaussians_rows(&post.q_z[0], &self.gen_prior_z(tape, b))?.sum();
        let kl_u = match &post.q_u {
            Some(q) => kl_diag_gaussians_rows(q, &self.gen_prior_u(tape, b))?.sum(),
            None => tape.scalar(0.0),
        };

        let mut aux_a = tape.scalar(0.0);
        let mut aux_r = tape.scalar(0.0);
        if with_aux {
            for t in 0..batch.steps() {
                let qa = self.aux_a(s, inp.x[t])?;
                aux_a = aux_a.add(gaussian_logpdf_rows(inp.a[t], &qa)?.sum())?;
                let qr = self.aux_r(s, inp.x[t], inp.a[t])?;
                aux_r = aux_r.add(gaussian_logpdf_rows(inp.r[t], &qr)?.sum())?;
            }
        }

        let terms = [recon_x, recon_a, recon_r, kl_u, kl_z1, kl_z, aux_a, aux_r]
            .map(|v| sum_batch_mean(v, b));
        let [recon_x, recon_a, recon_r, kl_u, kl_z1, kl_z, aux_a, aux_r] = terms;
        let kl = kl_u.add(kl_z1)?.add(kl_z)?;
        let recon = recon_x.add(recon_a)?.add(recon_r)?;
        let aux = aux_a.add(aux_r)?;
        let total = recon.sub(kl)?.add(aux)?;
        let objective = if kl_weight == 1.0 {
            total
        } else {
            recon.sub(kl.scale(kl_weight))?.add(aux)?
        };
        let bd = ElboBreakdown {
            recon_x: finite(recon_x.scalar(), "recon_x")?,
            recon_a: finite(recon_a.scalar(), "recon_a")?,
            recon_r: finite(recon_r.scalar(), "recon_r")?,
            kl_u: finite(kl_u.scalar(), "kl_u")?,
            kl_z1: finite(kl_z1.scalar(), "kl_z1")?,
            kl_z_transitions: finite(kl_z.scalar(), "kl_z_transitions")?,
            aux_a: finite(aux_a.scalar(), "aux_a")?,
            aux_r: finite(aux_r.scalar(), "aux_r")?,
            total: finite(total.scalar(), "total")?,
        };
        Ok((objective, bd))
    }

    /// Bound of the confounded model. Also valid when `d_u = 0`, where it
    /// coincides with [`Model::elbo_alt`].
    pub fn elbo_decon<'t, R: Rng + ?Sized>(
        &self,
        s: &Session<'t, '_>,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<(Var<'t>, ElboBreakdown), ModelError> {
        if !self.config.include_u {
            return Err(ModelError::Config(
                "elbo_decon needs a model built with include_u".into(),
            ));
        }
        self.elbo_terms(s, batch, rng, false, 1.0)
    }

    /// Bound of the confounder-free ablation.
    pub fn elbo_alt<'t, R: Rng + ?Sized>(
        &self,
        s: &Session<'t, '_>,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<(Var<'t>, ElboBreakdown), ModelError> {
        if self.uses_u() {
            return Err(ModelError::Config(
                "elbo_alt needs a model without a confounder".into(),
            ));
        }
        self.elbo_terms(s, batch, rng, false, 1.0)
    }

    /// Bound of whichever variant this model is.
    pub fn elbo<'t, R: Rng + ?Sized>(
        &self,
        s: &Session<'t, '_>,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<(Var<'t>, ElboBreakdown), ModelError> {
        self.elbo_terms(s, batch, rng, false, 1.0)
    }

    /// Training loss: minus the bound plus auxiliary log-likelihoods,
    /// averaged over the batch. `kl_weight` scales the KL terms (1 = none).
    pub fn loss_drl<'t, R: Rng + ?Sized>(
        &self,
        s: &Session<'t, '_>,
        batch: &Batch,
        rng: &mut R,
        kl_weight: f64,
    ) -> Result<(Var<'t>, ElboBreakdown), ModelError> {
        let (objective, bd) = self.elbo_terms(s, batch, rng, true, kl_weight)?;
        Ok((objective.neg(), bd))
    }

    /// Per-sequence importance log-weights
    /// `log p(x⃗, a⃗, r⃗, z⃗, u) − log q(z⃗, u | x⃗, a⃗, r⃗)` for one posterior draw,
    /// as a `[B, 1]` tensor.
    pub fn log_weights<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<Tensor, ModelError> {
        batch.check(&self.dims)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let b = batch.size();
        let inp = Inputs::new(&s, batch);
        let post = self.sample_posterior(&s, &inp, rng, false)?;
        let mut lw = gaussian_logpdf_rows(post.z[0], &self.gen_prior_z(&tape, b))?
            .sub(gaussian_logpdf_rows(post.z[0], &post.q_z[0])?)?;
        if let (Some(q), Some(u)) = (&post.q_u, post.u) {
            lw = lw
                .add(gaussian_logpdf_rows(u, &self.gen_prior_u(&tape, b))?)?
                .sub(gaussian_logpdf_rows(u, q)?)?;
        }
        for t in 0..batch.steps() {
            let z = post.z[t];
            lw = lw.add(gaussian_logpdf_rows(inp.x[t], &self.gen_x(&s, z, post.u)?)?)?;
            if self.config.include_action_likelihood {
                lw = lw.add(gaussian_logpdf_rows(inp.a[t], &self.gen_a(&s, z, post.u)?)?)?;
            }
            lw = lw.add(gaussian_logpdf_rows(inp.r[t], &self.gen_r(&s, z, inp.a[t], post.u)?)?)?;
            if t > 0 {
                let prior = self.gen_z_transition(&s, post.z[t - 1], inp.a[t - 1])?;
                lw = lw
                    .add(gaussian_logpdf_rows(z, &prior)?)?
                    .sub(gaussian_logpdf_rows(z, &post.q_z[t])?)?;
            }
        }
        Ok(lw.value())
    }

    /// Posterior means of `u`, `[B, d_u]`; `None` without a confounder.
    pub fn posterior_u_mean(&self, batch: &Batch) -> Result<Option<Tensor>, ModelError> {
        batch.check(&self.dims)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let inp = Inputs::new(&s, batch);
        Ok(self.infer_u(&s, &inp.x, &inp.a, &inp.r)?.map(|g| g.mean.value()))
    }

    /// Posterior of `u` as `(mean, var)` tensors.
    pub fn posterior_u(&self, batch: &Batch) -> Result<Option<(Tensor, Tensor)>, ModelError> {
        batch.check(&self.dims)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let inp = Inputs::new(&s, batch);
        Ok(self
            .infer_u(&s, &inp.x, &inp.a, &inp.r)?
            .map(|g| (g.mean.value(), g.var.value())))
    }

    /// Posterior-mean latent path `z₁..z_T`, each `[B, d_z]`.
    pub fn posterior_z_means(&self, batch: &Batch) -> Result<Vec<Tensor>, ModelError> {
        batch.check(&self.dims)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let inp = Inputs::new(&s, batch);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let post = self.sample_posterior(&s, &inp, &mut rng, true)?;
        Ok(post.z.iter().map(Var::value).collect())
    }

    /// Decode the emission means along one posterior draw of `z⃗` and `u`.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<Vec<Tensor>, ModelError> {
        batch.check(&self.dims)?;
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let inp = Inputs::new(&s, batch);
        let post = self.sample_posterior(&s, &inp, rng, false)?;
        post.z
            .iter()
            .map(|&z| Ok(self.gen_x(&s, z, post.u)?.mean.value()))
            .collect()
    }

    /// Predict `horizon` future frames from one unseen frame `[1, d_x]`.
    ///
    /// The auxiliary heads supply the frame's action and reward, the
    /// inference network maps that length-1 evidence to `z_t` (and `u`),
    /// and the transition mean is then iterated open-loop under `actions`
    /// (model scale), or uniformly random actions when none are given.
    pub fn counterfactual_rollout<R: Rng + ?Sized>(
        &self,
        frame: &Tensor,
        actions: Option<&[f64]>,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Rollout, ModelError> {
        if horizon < 1 {
            return Err(ModelError::Horizon);
        }
        if frame.rows() != 1 || frame.cols() != self.dims.d_x {
            return Err(ModelError::SequenceLength(format!(
                "rollout frame must be [1, {}], got {:?}",
                self.dims.d_x,
                frame.shape()
            )));
        }
        if let Some(acts) = actions {
            if acts.len() < horizon {
                return Err(ModelError::SequenceLength(format!(
                    "{} actions for horizon {horizon}",
                    acts.len()
                )));
            }
        }
        let tape = Tape::new();
        let s = Session::new(&tape, &self.store);
        let x = s.constant(frame.clone());
        let a_hat = self.aux_a(&s, x)?.mean;
        let r_hat = self.aux_r(&s, x, a_hat)?.mean;
        let inp = Inputs {
            x: vec![x],
            a: vec![a_hat],
            r: vec![r_hat],
        };
        let u = self.infer_u(&s, &inp.x, &inp.a, &inp.r)?.map(|g| g.mean);
        let (left, right) = self.encode_z(&s, &inp)?;
        let mut z = self.infer_z_step(&s, None, None, left[0], right[0])?.mean;
        let discrete = self.meta.env.is_some_and(|e| e.is_discrete());
        let mut out = Rollout {
            inferred_action: a_hat.scalar(),
            inferred_reward: self.meta.denormalize_reward(r_hat.scalar()),
            actions: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            frames: Vec::with_capacity(horizon),
        };
        for k in 0..horizon {
            let a = match actions {
                Some(acts) => acts[k],
                None if discrete => {
                    if rng.gen_bool(0.5) {
                        1.0
                    } else {
                        -1.0
                    }
                }
                None => rng.gen_range(-1.0..=1.0),
            };
            let av = s.constant(Tensor::scalar(a));
            let r = self.gen_r(&s, z, av, u)?.mean.scalar();
            z = self.gen_z_transition(&s, z, av)?.mean;
            out.frames.push(self.gen_x(&s, z, u)?.mean.value());
            out.actions.push(a);
            out.rewards.push(self.meta.denormalize_reward(r));
        }
        Ok(out)
    }
}
