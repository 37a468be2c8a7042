//! Confounded benchmark generators.
//!
//! A binary confounder `u` is drawn once per trajectory. It shifts both the
//! behaviour policy's treatment category and an extra two-component mixture
//! reward, so the logged data carry a spurious action–reward correlation.

mod dataset;
mod kernels;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal::DiscreteCpt;

pub use dataset::{
    generate_dataset, generate_split, generate_trajectory, read_dataset, write_dataset, Dataset,
    DatasetHeader, GenConfig, Split, Trajectory, FORMAT_VERSION,
};
pub use kernels::{
    render, step_cartpole, step_glyph, step_pendulum, wrap_angle, CartpoleState, EnvState,
    GlyphState, PendulumState, GLYPH_COUNT,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action {action} outside [-{bound}, {bound}]")]
    ActionOutOfRange { action: f64, bound: f64 },
    #[error("invalid confounding spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset header: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Pendulum,
    Cartpole,
    Glyph,
}

impl EnvKind {
    /// Largest admissible `|a|`; cartpole actions are `{0, 1}`.
    pub fn action_bound(self) -> f64 {
        match self {
            EnvKind::Pendulum => 2.0,
            EnvKind::Cartpole => 1.0,
            EnvKind::Glyph => std::f64::consts::FRAC_PI_4,
        }
    }

    pub fn is_discrete(self) -> bool {
        self == EnvKind::Cartpole
    }

    /// Default `|a|` threshold separating `T₂` (below) from `T₁` (at or above).
    pub fn default_boundary(self) -> f64 {
        match self {
            EnvKind::Pendulum => 1.0,
            EnvKind::Cartpole => 0.5,
            EnvKind::Glyph => std::f64::consts::FRAC_PI_8,
        }
    }

    /// Map an environment action to the model's `[-1, 1]` scale.
    pub fn encode_action(self, a: f64) -> f64 {
        match self {
            EnvKind::Cartpole => 2.0 * a - 1.0,
            _ => a / self.action_bound(),
        }
    }

    pub fn decode_action(self, a: f64) -> f64 {
        match self {
            EnvKind::Cartpole => {
                if a >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => a.clamp(-1.0, 1.0) * self.action_bound(),
        }
    }
}

/// Treatment category of an action. `T1` is the better treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    T1 = 0,
    T2 = 1,
}

impl Category {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Parameters of the confounding mechanism.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfoundingSpec {
    /// `p(u = 1)`.
    pub p_u: f64,
    /// `p(T₁ | u)` for `u = 0, 1`.
    pub p_t1_given_u: [f64; 2],
    /// `p(R₁ | category, u)`, indexed `[category][u]`.
    pub mixture_probs: [[f64; 2]; 2],
    pub mu_r1: f64,
    pub mu_r2: f64,
    pub sigma: f64,
    /// Overrides the environment's default category threshold.
    pub action_category_boundary: Option<f64>,
}

impl Default for ConfoundingSpec {
    fn default() -> Self {
        ConfoundingSpec {
            p_u: 0.2,
            p_t1_given_u: [0.24, 0.77],
            mixture_probs: [[0.93, 0.73], [0.87, 0.69]],
            mu_r1: -1.0,
            mu_r2: -200.0,
            sigma: 2.0,
            action_category_boundary: None,
        }
    }
}

impl ConfoundingSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let probs = [self.p_u]
            .into_iter()
            .chain(self.p_t1_given_u)
            .chain(self.mixture_probs.into_iter().flatten());
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(EnvError::InvalidSpec(format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(EnvError::InvalidSpec(format!("sigma {} must be >= 0", self.sigma)));
        }
        if let Some(b) = self.action_category_boundary {
            if !(b > 0.0 && b.is_finite()) {
                return Err(EnvError::InvalidSpec(format!("boundary {b} must be positive")));
            }
        }
        Ok(())
    }

    pub fn boundary(&self, kind: EnvKind) -> f64 {
        self.action_category_boundary
            .unwrap_or_else(|| kind.default_boundary())
    }

    pub fn category(&self, kind: EnvKind, action: f64) -> Category {
        if action.abs() >= self.boundary(kind) {
            Category::T1
        } else {
            Category::T2
        }
    }

    pub fn draw_u<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        u8::from(rng.gen_bool(self.p_u))
    }

    /// `E[r_c | category, u]`.
    pub fn expected_extra_reward(&self, category: Category, u: u8) -> f64 {
        let p = self.mixture_probs[category.index()][usize::from(u)];
        p * self.mu_r1 + (1.0 - p) * self.mu_r2
    }

    /// Sample the mixture reward `r_c`.
    pub fn sample_extra_reward<R: Rng + ?Sized>(&self, category: Category, u: u8, rng: &mut R) -> f64 {
        let p = self.mixture_probs[category.index()][usize::from(u)];
        let mu = if rng.gen_bool(p) { self.mu_r1 } else { self.mu_r2 };
        if self.sigma == 0.0 {
            mu
        } else {
            Normal::new(mu, self.sigma).expect("validated sigma").sample(rng)
        }
    }

    /// The confounder/treatment/component table as a [`DiscreteCpt`] with
    /// actions `[T₁, T₂]` and outcomes `[R₁, R₂]` valued at their means.
    pub fn to_cpt(&self) -> DiscreteCpt {
        let pa = |u: usize| vec![self.p_t1_given_u[u], 1.0 - self.p_t1_given_u[u]];
        let py = |c: usize, u: usize| {
            let p = self.mixture_probs[c][u];
            vec![p, 1.0 - p]
        };
        DiscreteCpt::new(
            vec![1.0 - self.p_u, self.p_u],
            vec![pa(0), pa(1)],
            vec![vec![py(0, 0), py(0, 1)], vec![py(1, 0), py(1, 1)]],
            Some(vec![self.mu_r1, self.mu_r2]),
        )
        .expect("spec probabilities form valid rows")
    }
}

/// Behaviour policy confounded by `u`: choose the category, then a
/// magnitude uniformly within its band and a uniform sign.
pub fn confounded_policy<R: Rng + ?Sized>(
    kind: EnvKind,
    u: u8,
    spec: &ConfoundingSpec,
    rng: &mut R,
) -> f64 {
    let t1 = rng.gen_bool(spec.p_t1_given_u[usize::from(u)]);
    if kind.is_discrete() {
        return if t1 { 1.0 } else { 0.0 };
    }
    let b = spec.boundary(kind);
    let bound = kind.action_bound();
    let magnitude = if t1 {
        rng.gen_range(b..=bound)
    } else {
        rng.gen_range(0.0..b)
    };
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// `r = r_o + r_c` with `r_c` drawn from the mixture for `(category(a), u)`.
pub fn confounded_reward<R: Rng + ?Sized>(
    kind: EnvKind,
    r_o: f64,
    action: f64,
    u: u8,
    spec: &ConfoundingSpec,
    rng: &mut R,
) -> f64 {
    r_o + spec.sample_extra_reward(spec.category(kind, action), u, rng)
}

/// Binarize at 0.5, then flip each pixel independently with probability `p`.
///
/// Every pixel consumes one draw even when `p = 0`, so datasets that differ
/// only in noise level share all other random choices.
pub fn corrupt<R: Rng + ?Sized>(frame: &mut [f32], p: f64, rng: &mut R) {
    for px in frame {
        let bit = *px >= 0.5;
        let flip = rng.gen_bool(p);
        *px = if bit != flip { 1.0 } else { 0.0 };
    }
}

/// Paint a 2×2 square of ones with top-left corner `(row, col)`.
pub fn paint_block(frame: &mut [f32], width: usize, row: usize, col: usize) {
    for r in row..row + 2 {
        for c in col..col + 2 {
            frame[r * width + c] = 1.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_matches_benchmark_cpt() {
        let (a, b) = (ConfoundingSpec::default().to_cpt(), DiscreteCpt::benchmark());
        assert_eq!(a.confounder_probs(), b.confounder_probs());
        for act in 0..2 {
            for u in 0..2 {
                assert!((a.action_prob(u, act) - b.action_prob(u, act)).abs() < 1e-12);
                for y in 0..2 {
                    assert!((a.outcome_prob(act, u, y) - b.outcome_prob(act, u, y)).abs() < 1e-12);
                }
            }
        }
        assert_eq!(a.outcome_values(), b.outcome_values());
    }

    #[test]
    fn degenerate_mixture_is_exact() {
        let spec = ConfoundingSpec {
            mixture_probs: [[1.0; 2]; 2],
            sigma: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = confounded_reward(EnvKind::Pendulum, -0.25, 1.5, 1, &spec, &mut rng);
        assert_eq!(r, -1.25);
    }

    #[test]
    fn forced_category_stays_in_band() {
        let spec = ConfoundingSpec {
            p_t1_given_u: [1.0, 1.0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [EnvKind::Pendulum, EnvKind::Glyph, EnvKind::Cartpole] {
            for _ in 0..1000 {
                let a = confounded_policy(kind, 0, &spec, &mut rng);
                assert_eq!(spec.category(kind, a), Category::T1);
                assert!(a.abs() <= kind.action_bound());
            }
        }
    }

    #[test]
    fn zero_noise_only_binarizes() {
        let mut f = vec![0.1, 0.5, 0.7, 0.0];
        corrupt(&mut f, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(f, vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn action_codec_round_trips() {
        for kind in [EnvKind::Pendulum, EnvKind::Glyph] {
            let a = 0.3 * kind.action_bound();
            assert!((kind.decode_action(kind.encode_action(a)) - a).abs() < 1e-12);
        }
        assert_eq!(EnvKind::Cartpole.encode_action(1.0), 1.0);
        assert_eq!(EnvKind::Cartpole.decode_action(-1.0), 0.0);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = ConfoundingSpec {
            p_u: 1.5,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
