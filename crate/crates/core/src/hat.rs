//! Hybrid autoregressive transducer head.
//!
//! The blank slot of the joint logit vector drives a Bernoulli blank
//! probability `b = σ(z_∅)`; the remaining `|V|` slots feed a softmax over
//! labels only, `P̃(k)`. The combined distribution over `V̄` is
//! `P(∅) = b`, `P(k) = (1 − b)·P̃(k)`.
//!
//! Because `P̃` never sees blank, evaluating it on prediction-network outputs
//! alone gives an internal language-model estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, StepDistribution, Vocab, BLANK};
use crate::numerics::{log_sigmoid, log_softmax};

/// Where the temperature is applied in the HAT head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HatTemperature {
    /// Divide both the blank logit and the label logits by `Z`.
    #[default]
    Both,
    /// Divide only the label logits; the blank sigmoid sees the raw logit.
    LabelsOnly,
}

impl HatTemperature {
    fn blank_temperature(self, temperature: f64) -> f64 {
        match self {
            HatTemperature::Both => temperature,
            HatTemperature::LabelsOnly => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HatStepDistribution {
    /// `ln b`.
    pub log_blank: f64,
    /// `ln(1 − b)`.
    pub log_not_blank: f64,
    /// `ln P̃(k)` for labels `1..=|V|`, stored at index `k − 1`.
    pub log_labels: Vec<f64>,
}

impl HatStepDistribution {
    pub fn blank(&self) -> f64 {
        self.log_blank.exp()
    }

    pub fn to_step_distribution(&self) -> StepDistribution {
        let mut log_probs = Vec::with_capacity(self.log_labels.len() + 1);
        log_probs.push(self.log_blank);
        log_probs.extend(self.log_labels.iter().map(|l| self.log_not_blank + l));
        StepDistribution { log_probs }
    }
}

pub fn hat_step_distribution(
    cell: &[f64],
    vocab: &Vocab,
    temperature: f64,
    mode: HatTemperature,
) -> Result<HatStepDistribution> {
    if cell.len() != vocab.extended_size() {
        return Err(Error::VocabMismatch {
            expected: vocab.extended_size(),
            actual: cell.len(),
        });
    }
    let log_labels = log_softmax(&cell[1..], temperature)?;
    let blank_arg = cell[BLANK] / mode.blank_temperature(temperature);
    Ok(HatStepDistribution {
        log_blank: log_sigmoid(blank_arg),
        log_not_blank: log_sigmoid(-blank_arg),
        log_labels,
    })
}

/// Local Jacobian of the HAT head: maps `∂L/∂ ln P(k)` to `∂L/∂z_k`.
pub(crate) fn hat_logit_grad(
    dist: &HatStepDistribution,
    temperature: f64,
    mode: HatTemperature,
    dlogp: &[f64],
) -> Vec<f64> {
    let b = dist.blank();
    let label_total: f64 = dlogp[1..].iter().sum();
    let mut out = Vec::with_capacity(dlogp.len());
    // d ln b / da = 1 − b,  d ln(1 − b) / da = −b
    out.push((dlogp[BLANK] * (1.0 - b) - b * label_total) / mode.blank_temperature(temperature));
    for (g, lp) in dlogp[1..].iter().zip(&dist.log_labels) {
        out.push((g - lp.exp() * label_total) / temperature);
    }
    out
}

/// Internal-LM log-probability of a label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalLmScore {
    pub log_prob: f64,
    pub per_token: Vec<f64>,
}

/// Label-softmax log-probability of `label` from one prediction-only logit vector.
pub fn ilm_token_log_prob(cell: &[f64], vocab: &Vocab, label: usize) -> Result<f64> {
    vocab.check_label(label)?;
    if cell.len() != vocab.extended_size() {
        return Err(Error::VocabMismatch {
            expected: vocab.extended_size(),
            actual: cell.len(),
        });
    }
    Ok(log_softmax(&cell[1..], 1.0)?[label - 1])
}

/// Scores `labels` under the internal LM.
///
/// `predictor_logits[u]` is the joint output computed from the prediction
/// network state after `y_1..y_u` with the acoustic input zeroed; the blank
/// slot is ignored.
pub fn internal_lm_score(
    predictor_logits: &[Vec<f64>],
    labels: &LabelSequence,
    vocab: &Vocab,
) -> Result<InternalLmScore> {
    if predictor_logits.len() < labels.len() {
        return Err(Error::Mismatch(format!(
            "{} predictor outputs for {} labels",
            predictor_logits.len(),
            labels.len()
        )));
    }
    let per_token = labels
        .tokens()
        .iter()
        .zip(predictor_logits)
        .map(|(&y, cell)| ilm_token_log_prob(cell, vocab, y))
        .collect::<Result<Vec<_>>>()?;
    Ok(InternalLmScore {
        log_prob: per_token.iter().sum(),
        per_token,
    })
}
