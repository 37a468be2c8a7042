//! Trajectory generation and the binary dataset format.
//!
//! File layout (little-endian): `u64` header length, JSON header, then
//! `count` fixed-size records of
//! `frames: f32[T·H·W] | actions: f64[T] | rewards: f64[T] | u: u8 |
//! block_start: u16 | block_row: u16 | block_col: u16`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    confounded_policy, corrupt, paint_block, render, ConfoundingSpec, EnvError, EnvKind, EnvState,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub env: EnvKind,
    pub spec: ConfoundingSpec,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub noise_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            env: EnvKind::Glyph,
            spec: ConfoundingSpec::default(),
            t: 5,
            height: 16,
            width: 16,
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            seed: 0,
            noise_prob: 0.2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.spec.validate()?;
        if self.t < 3 {
            return Err(EnvError::InvalidDims(format!("T = {} but the block needs T >= 3", self.t)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(EnvError::InvalidDims(format!(
                "frames must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(EnvError::InvalidDims(format!("noise_prob {}", self.noise_prob)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.drl",
            Split::Val => "val.drl",
            Split::Test => "test.drl",
        }
    }
}

/// One logged episode: `x₁..x_T`, `a₁..a_T`, `r₂..r_{T+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T` frames, row-major.
    pub frames: Vec<f32>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub u: u8,
    pub block_start: u16,
    pub block_row: u16,
    pub block_col: u16,
}

impl Trajectory {
    pub fn frame(&self, t: usize, frame_len: usize) -> &[f32] {
        &self.frames[t * frame_len..(t + 1) * frame_len]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub env: EnvKind,
    pub spec: ConfoundingSpec,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    pub split: Split,
    pub noise_prob: f64,
    /// Reward range of the training split, used for normalization.
    pub reward_min: f64,
    pub reward_max: f64,
}

impl DatasetHeader {
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn normalize_reward(&self, r: f64) -> f64 {
        (r - self.reward_min) / (self.reward_max - self.reward_min)
    }

    pub fn denormalize_reward(&self, r: f64) -> f64 {
        r * (self.reward_max - self.reward_min) + self.reward_min
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Roll one confounded episode, render and corrupt its frames, and
/// superimpose a 2×2 block on three consecutive frames.
pub fn generate_trajectory<R: Rng + ?Sized>(
    cfg: &GenConfig,
    rng: &mut R,
) -> Result<Trajectory, EnvError> {
    let (t_len, h, w) = (cfg.t, cfg.height, cfg.width);
    let frame_len = h * w;
    let u = cfg.spec.draw_u(rng);
    let mut state = EnvState::random(cfg.env, rng);
    let mut frames = Vec::with_capacity(t_len * frame_len);
    let mut actions = Vec::with_capacity(t_len);
    let mut rewards = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut frame = render(&state, h, w);
        corrupt(&mut frame, cfg.noise_prob, rng);
        frames.extend_from_slice(&frame);
        let a = confounded_policy(cfg.env, u, &cfg.spec, rng);
        let r_o = state.step(a, rng)?;
        let r_c = cfg
            .spec
            .sample_extra_reward(cfg.spec.category(cfg.env, a), u, rng);
        actions.push(a);
        rewards.push(r_o + r_c);
    }
    // The block lives in the top-left quadrant, drawn after the noise.
    let block_start = rng.gen_range(0..=t_len - 3);
    let block_row = rng.gen_range(0..=h / 2 - 2);
    let block_col = rng.gen_range(0..=w / 2 - 2);
    for t in block_start..block_start + 3 {
        paint_block(&mut frames[t * frame_len..(t + 1) * frame_len], w, block_row, block_col);
    }
    Ok(Trajectory {
        frames,
        actions,
        rewards,
        u,
        block_start: block_start as u16,
        block_row: block_row as u16,
        block_col: block_col as u16,
    })
}

/// Child generator for sequence `index` of `split`.
pub fn child_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((split as u64) << 48) | index as u64);
    rng
}

/// Generate `n` trajectories in parallel; order follows the index.
pub fn generate_split(cfg: &GenConfig, split: Split, n: usize) -> Result<Vec<Trajectory>, EnvError> {
    cfg.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| generate_trajectory(cfg, &mut child_rng(cfg.seed, split, i)))
        .collect()
}

/// Generate train/val/test splits. Every header carries the training
/// split's reward range.
pub fn generate_dataset(cfg: &GenConfig) -> Result<[Dataset; 3], EnvError> {
    let counts = [cfg.n_train, cfg.n_val, cfg.n_test];
    let mut splits = Vec::with_capacity(3);
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        splits.push(generate_split(cfg, split, n)?);
    }
    let (mut lo, mut hi) = splits[0]
        .iter()
        .flat_map(|t| &t.rewards)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let mut out = splits.into_iter().zip(Split::ALL).map(|(trajectories, split)| Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            env: cfg.env,
            spec: cfg.spec.clone(),
            t: cfg.t,
            height: cfg.height,
            width: cfg.width,
            count: trajectories.len(),
            seed: cfg.seed,
            split,
            noise_prob: cfg.noise_prob,
            reward_min: lo,
            reward_max: hi,
        },
        trajectories,
    });
    Ok([out.next().unwrap(), out.next().unwrap(), out.next().unwrap()])
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), EnvError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = serde_json::to_vec(&ds.header)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let frame_len = ds.header.frame_len();
    for tr in &ds.trajectories {
        if tr.frames.len() != ds.header.t * frame_len
            || tr.actions.len() != ds.header.t
            || tr.rewards.len() != ds.header.t
        {
            return Err(EnvError::Format("trajectory does not match header dims".into()));
        }
        for v in &tr.frames {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in tr.actions.iter().chain(&tr.rewards) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[tr.u])?;
        for v in [tr.block_start, tr.block_row, tr.block_col] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(buf: &[u8], pos: &mut usize) -> [u8; N] {
    let out = buf[*pos..*pos + N].try_into().unwrap();
    *pos += N;
    out
}

pub fn read_dataset(path: &Path) -> Result<Dataset, EnvError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(EnvError::Format(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: DatasetHeader = serde_json::from_slice(&header)?;
    if header.format_version != FORMAT_VERSION {
        return Err(EnvError::Format(format!(
            "format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let (t, frame_len) = (header.t, header.frame_len());
    let record = t * frame_len * 4 + 2 * t * 8 + 1 + 6;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != record * header.count {
        return Err(EnvError::Format(format!(
            "body has {} bytes, expected {} records of {record}",
            body.len(),
            header.count
        )));
    }
    let trajectories = body
        .chunks_exact(record)
        .map(|rec| {
            let mut p = 0;
            let frames = (0..t * frame_len)
                .map(|_| f32::from_le_bytes(take(rec, &mut p)))
                .collect();
            let actions = (0..t).map(|_| f64::from_le_bytes(take(rec, &mut p))).collect();
            let rewards = (0..t).map(|_| f64::from_le_bytes(take(rec, &mut p))).collect();
            let u = take::<1>(rec, &mut p)[0];
            let block_start = u16::from_le_bytes(take(rec, &mut p));
            let block_row = u16::from_le_bytes(take(rec, &mut p));
            let block_col = u16::from_le_bytes(take(rec, &mut p));
            Trajectory {
                frames,
                actions,
                rewards,
                u,
                block_start,
                block_row,
                block_col,
            }
        })
        .collect();
    Ok(Dataset {
        header,
        trajectories,
    })
}
