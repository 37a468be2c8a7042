//! Exact queries on a three-node confounded model `u → a`, `u → y`, `a → y`.
//!
//! Observational queries weight strata by `p(u | a)`; interventional
//! queries use the backdoor form `p(y | do(a)) = Σᵤ p(y | a, u) p(u)`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CausalError {
    #[error("{table} row {row} sums to {sum}, expected 1")]
    RowSum {
        table: &'static str,
        row: String,
        sum: f64,
    },
    #[error("{table}: probability {value} at {row} is outside [0, 1]")]
    OutOfRange {
        table: &'static str,
        row: String,
        value: f64,
    },
    #[error("{0}")]
    Shape(String),
    #[error("action {0} never observed")]
    ActionNeverObserved(usize),
    #[error("action index {0} out of range")]
    UnknownAction(usize),
    #[error("outcome index {0} out of range")]
    UnknownOutcome(usize),
    #[error("expectation query needs outcome_values")]
    NoOutcomeValues,
    #[error("simpson check needs exactly two actions, got {0}")]
    NotBinary(usize),
    #[error("reading CPT: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing CPT: {0}")]
    Json(#[from] serde_json::Error),
}

/// What a query returns: the probability of one outcome, or the expected
/// outcome value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Prob(usize),
    Expectation,
}

/// Which direction of the outcome is preferable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Better {
    #[default]
    Higher,
    Lower,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCpt {
    confounder_probs: Vec<f64>,
    action_probs: Vec<Vec<f64>>,
    outcome_probs: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    outcome_values: Option<Vec<f64>>,
}

/// Finite table model. Indexing: `action_probs[u][a]`,
/// `outcome_probs[a][u][y]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCpt")]
pub struct DiscreteCpt {
    confounder_probs: Vec<f64>,
    action_probs: Vec<Vec<f64>>,
    outcome_probs: Vec<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outcome_values: Option<Vec<f64>>,
}

impl TryFrom<RawCpt> for DiscreteCpt {
    type Error = CausalError;
    fn try_from(r: RawCpt) -> Result<Self, CausalError> {
        DiscreteCpt::new(
            r.confounder_probs,
            r.action_probs,
            r.outcome_probs,
            r.outcome_values,
        )
    }
}

fn check_row(table: &'static str, row: String, p: &[f64]) -> Result<(), CausalError> {
    for &v in p {
        if !(0.0..=1.0).contains(&v) {
            return Err(CausalError::OutOfRange {
                table,
                row,
                value: v,
            });
        }
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(CausalError::RowSum { table, row, sum });
    }
    Ok(())
}

impl DiscreteCpt {
    pub fn new(
        confounder_probs: Vec<f64>,
        action_probs: Vec<Vec<f64>>,
        outcome_probs: Vec<Vec<Vec<f64>>>,
        outcome_values: Option<Vec<f64>>,
    ) -> Result<Self, CausalError> {
        let nu = confounder_probs.len();
        if nu == 0 {
            return Err(CausalError::Shape("confounder_probs is empty".into()));
        }
        check_row("confounder_probs", "p(u)".into(), &confounder_probs)?;
        if action_probs.len() != nu {
            return Err(CausalError::Shape(format!(
                "action_probs has {} rows, expected one per confounder value ({nu})",
                action_probs.len()
            )));
        }
        let na = action_probs[0].len();
        for (u, row) in action_probs.iter().enumerate() {
            if row.len() != na {
                return Err(CausalError::Shape(format!("action_probs[{u}] has ragged length")));
            }
            check_row("action_probs", format!("p(a | u={u})"), row)?;
        }
        if outcome_probs.len() != na {
            return Err(CausalError::Shape(format!(
                "outcome_probs has {} action blocks, expected {na}",
                outcome_probs.len()
            )));
        }
        let ny = outcome_probs
            .first()
            .and_then(|b| b.first())
            .map_or(0, Vec::len);
        for (a, block) in outcome_probs.iter().enumerate() {
            if block.len() != nu {
                return Err(CausalError::Shape(format!(
                    "outcome_probs[{a}] has {} rows, expected {nu}",
                    block.len()
                )));
            }
            for (u, row) in block.iter().enumerate() {
                if row.len() != ny {
                    return Err(CausalError::Shape(format!(
                        "outcome_probs[{a}][{u}] has ragged length"
                    )));
                }
                check_row("outcome_probs", format!("p(y | a={a}, u={u})"), row)?;
            }
        }
        if let Some(v) = &outcome_values {
            if v.len() != ny {
                return Err(CausalError::Shape(format!(
                    "outcome_values has {} entries, expected {ny}",
                    v.len()
                )));
            }
        }
        Ok(DiscreteCpt {
            confounder_probs,
            action_probs,
            outcome_probs,
            outcome_values,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self, CausalError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, CausalError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// The bundled two-action benchmark table: `p(u=1)=0.2`, treatments
    /// `T₁`/`T₂`, reward components `R₁ = −1`, `R₂ = −200`.
    pub fn benchmark() -> Self {
        Self::from_json_str(include_str!("../fixtures/confounded_treatment.json"))
            .expect("bundled fixture is valid")
    }

    pub fn n_confounders(&self) -> usize {
        self.confounder_probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.outcome_probs.len()
    }

    pub fn n_outcomes(&self) -> usize {
        self.outcome_probs[0][0].len()
    }

    pub fn confounder_probs(&self) -> &[f64] {
        &self.confounder_probs
    }

    pub fn action_prob(&self, u: usize, a: usize) -> f64 {
        self.action_probs[u][a]
    }

    pub fn outcome_prob(&self, a: usize, u: usize, y: usize) -> f64 {
        self.outcome_probs[a][u][y]
    }

    pub fn outcome_values(&self) -> Option<&[f64]> {
        self.outcome_values.as_deref()
    }

    /// `E[y | a, u]` or `p(y | a, u)` within one stratum.
    pub fn stratum_value(&self, a: usize, u: usize, outcome: Outcome) -> Result<f64, CausalError> {
        let row = &self.outcome_probs[a][u];
        match outcome {
            Outcome::Prob(y) => row.get(y).copied().ok_or(CausalError::UnknownOutcome(y)),
            Outcome::Expectation => {
                let vals = self.outcome_values.as_ref().ok_or(CausalError::NoOutcomeValues)?;
                Ok(row.iter().zip(vals).map(|(p, v)| p * v).sum())
            }
        }
    }

    /// `p(u | a)` by Bayes' rule.
    pub fn posterior_u(&self, a: usize) -> Result<Vec<f64>, CausalError> {
        self.check_action(a)?;
        let joint: Vec<f64> = (0..self.n_confounders())
            .map(|u| self.confounder_probs[u] * self.action_probs[u][a])
            .collect();
        let pa: f64 = joint.iter().sum();
        if pa <= 0.0 {
            return Err(CausalError::ActionNeverObserved(a));
        }
        Ok(joint.into_iter().map(|j| j / pa).collect())
    }

    fn check_action(&self, a: usize) -> Result<(), CausalError> {
        if a >= self.n_actions() {
            return Err(CausalError::UnknownAction(a));
        }
        Ok(())
    }

    /// Observational query `p(y | a)` or `E[y | a]`.
    pub fn conditional_query(&self, a: usize, outcome: Outcome) -> Result<f64, CausalError> {
        let post = self.posterior_u(a)?;
        let mut acc = 0.0;
        for (u, w) in post.iter().enumerate() {
            acc += w * self.stratum_value(a, u, outcome)?;
        }
        Ok(acc)
    }

    /// Interventional query `p(y | do(a))` or `E[y | do(a)]`.
    pub fn backdoor_adjust(&self, a: usize, outcome: Outcome) -> Result<f64, CausalError> {
        self.check_action(a)?;
        let mut acc = 0.0;
        for (u, w) in self.confounder_probs.iter().enumerate() {
            acc += w * self.stratum_value(a, u, outcome)?;
        }
        Ok(acc)
    }

    pub fn simpson_check(
        &self,
        outcome: Outcome,
        better: Better,
    ) -> Result<CausalQueryResult, CausalError> {
        if self.n_actions() != 2 {
            return Err(CausalError::NotBinary(self.n_actions()));
        }
        let observational = (0..2)
            .map(|a| self.conditional_query(a, outcome))
            .collect::<Result<Vec<_>, _>>()?;
        let interventional = (0..2)
            .map(|a| self.backdoor_adjust(a, outcome))
            .collect::<Result<Vec<_>, _>>()?;
        let preferred_observational = preferred(&observational, better);
        let preferred_interventional = preferred(&interventional, better);

        // Aggregate ordering reversed in every stratum.
        let strata = (0..self.n_confounders())
            .map(|u| {
                Ok(preferred(
                    &[
                        self.stratum_value(0, u, outcome)?,
                        self.stratum_value(1, u, outcome)?,
                    ],
                    better,
                ))
            })
            .collect::<Result<Vec<_>, CausalError>>()?;
        let strict_obs = observational[0] != observational[1];
        let stratum_reversal = strict_obs
            && (0..self.n_confounders()).all(|u| {
                let d = self.stratum_value(0, u, outcome).unwrap()
                    - self.stratum_value(1, u, outcome).unwrap();
                d != 0.0 && strata[u] != preferred_observational
            });
        Ok(CausalQueryResult {
            observational,
            interventional,
            preferred_action_observational: preferred_observational,
            preferred_action_interventional: preferred_interventional,
            stratum_reversal,
            paradox_flag: preferred_observational != preferred_interventional || stratum_reversal,
        })
    }
}

/// Argmax (or argmin) with ties going to the lowest index.
fn preferred(values: &[f64], better: Better) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let wins = match better {
            Better::Higher => v > values[best],
            Better::Lower => v < values[best],
        };
        if wins {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalQueryResult {
    pub observational: Vec<f64>,
    pub interventional: Vec<f64>,
    pub preferred_action_observational: usize,
    pub preferred_action_interventional: usize,
    /// Every stratum prefers the action the aggregate rejects.
    pub stratum_reversal: bool,
    pub paradox_flag: bool,
}
