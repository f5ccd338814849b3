//! Minimum word error rate training over N-best lists.
//!
//! The posterior of each hypothesis is its sequence probability renormalized
//! over the list, the loss is the expected risk `R̄ = Σ P̂ᵢ·Rᵢ`, and
//! `∂R̄/∂ ln P(yᵢ|x) = P̂ᵢ·(Rᵢ − R̄)`. The sequence probabilities are full
//! alignment marginals, so the gradient reaches the joint logits through the
//! ordinary forward-backward occupancies.

mod exchange;

pub use exchange::{read_nbest_records, write_nbest_records, HypothesisRecord, NBestRecord};

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{nll_loss, HeadConfig, JointLattice, LabelSequence};
use crate::numerics::{log_add, log_sum_exp};

/// Levenshtein distance with unit substitution, insertion, and deletion costs.
pub fn word_edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=reference.len()).collect();
    let mut curr = vec![0; reference.len() + 1];
    for (i, h) in hyp.iter().enumerate() {
        curr[0] = i + 1;
        for (j, r) in reference.iter().enumerate() {
            let sub = prev[j] + usize::from(h != r);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[reference.len()]
}

/// How label tokens group into words for the risk function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordSegmentation {
    /// Every token is a word.
    #[default]
    Identity,
    /// Words are runs of tokens separated by this token id.
    Boundary(usize),
}

impl WordSegmentation {
    pub fn words(&self, tokens: &[usize]) -> Vec<Vec<usize>> {
        match *self {
            WordSegmentation::Identity => tokens.iter().map(|&t| vec![t]).collect(),
            WordSegmentation::Boundary(sep) => tokens
                .split(|&t| t == sep)
                .filter(|w| !w.is_empty())
                .map(<[usize]>::to_vec)
                .collect(),
        }
    }
}

/// Word-level risk `R(y, y^r)`.
pub fn word_risk(hyp: &[usize], reference: &[usize], seg: WordSegmentation) -> usize {
    match seg {
        WordSegmentation::Identity => word_edit_distance(hyp, reference),
        _ => word_edit_distance(&seg.words(hyp), &seg.words(reference)),
    }
}

/// `P̂ᵢ = exp(ln Pᵢ − ln Σⱼ Pⱼ)`.
pub fn nbest_posterior(log_probs: &[f64]) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::EmptyNBest);
    }
    let norm = log_sum_exp(log_probs)?;
    Ok(log_probs.iter().map(|l| (l - norm).exp()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: LabelSequence,
    /// `ln P(y|x)`, marginalized over alignments.
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn new(tokens: LabelSequence, log_prob: f64) -> Self {
        Self { tokens, log_prob }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NBestOptions {
    /// Compute posteriors from `ln P(y|x) / max(|y|, 1)` instead of `ln P(y|x)`.
    #[serde(default)]
    pub length_normalized_posterior: bool,
    #[serde(default)]
    pub segmentation: WordSegmentation,
}

/// Orders by descending log-probability, then shorter, then lexicographic.
pub(crate) fn rank_order(a: (&[usize], f64), b: (&[usize], f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.len().cmp(&b.0.len()))
        .then_with(|| a.0.cmp(b.0))
}

/// An N-best list with its posteriors and risks against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    hypotheses: Vec<Hypothesis>,
    reference: LabelSequence,
    posteriors: Vec<f64>,
    risks: Vec<f64>,
    expected_risk: f64,
    options: NBestOptions,
}

impl NBestList {
    /// Builds the list. Duplicate token sequences are merged by adding their
    /// probabilities; the result is sorted by descending log-probability.
    pub fn new(
        hypotheses: Vec<Hypothesis>,
        reference: LabelSequence,
        options: NBestOptions,
    ) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::EmptyNBest);
        }
        let mut merged: Vec<Hypothesis> = Vec::with_capacity(hypotheses.len());
        let mut seen: HashMap<LabelSequence, usize> = HashMap::new();
        for h in hypotheses {
            if !h.log_prob.is_finite() {
                return Err(Error::Mismatch(format!(
                    "hypothesis {:?} has log-probability {}",
                    h.tokens.tokens(),
                    h.log_prob
                )));
            }
            match seen.get(&h.tokens) {
                Some(&i) => merged[i].log_prob = log_add(merged[i].log_prob, h.log_prob),
                None => {
                    seen.insert(h.tokens.clone(), merged.len());
                    merged.push(h);
                }
            }
        }
        merged.sort_by(|a, b| {
            rank_order(
                (a.tokens.tokens(), a.log_prob),
                (b.tokens.tokens(), b.log_prob),
            )
        });

        let scores: Vec<f64> = merged
            .iter()
            .map(|h| {
                if options.length_normalized_posterior {
                    h.log_prob / h.tokens.len().max(1) as f64
                } else {
                    h.log_prob
                }
            })
            .collect();
        let posteriors = nbest_posterior(&scores)?;
        let risks: Vec<f64> = merged
            .iter()
            .map(|h| word_risk(h.tokens.tokens(), reference.tokens(), options.segmentation) as f64)
            .collect();
        let expected_risk = posteriors.iter().zip(&risks).map(|(p, r)| p * r).sum();
        Ok(Self {
            hypotheses: merged,
            reference,
            posteriors,
            risks,
            expected_risk,
            options,
        })
    }

    pub fn hypotheses(&self) -> &[Hypothesis] {
        &self.hypotheses
    }

    pub fn reference(&self) -> &LabelSequence {
        &self.reference
    }

    pub fn posteriors(&self) -> &[f64] {
        &self.posteriors
    }

    pub fn risks(&self) -> &[f64] {
        &self.risks
    }

    pub fn expected_risk(&self) -> f64 {
        self.expected_risk
    }

    pub fn options(&self) -> NBestOptions {
        self.options
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Number of words in hypothesis `i` under the list's segmentation.
    pub fn word_count(&self, i: usize) -> usize {
        self.options
            .segmentation
            .words(self.hypotheses[i].tokens.tokens())
            .len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MwerOutput {
    /// `R̄`.
    pub loss: f64,
    /// `∂R̄/∂ ln P(yᵢ|x)`, in list order.
    pub dloss_dlogp: Vec<f64>,
}

pub fn mwer_loss(nbest: &NBestList) -> MwerOutput {
    let r_bar = nbest.expected_risk;
    let dloss_dlogp = nbest
        .hypotheses
        .iter()
        .zip(nbest.posteriors.iter().zip(&nbest.risks))
        .map(|(h, (p, r))| {
            let g = p * (r - r_bar);
            if nbest.options.length_normalized_posterior {
                g / h.tokens.len().max(1) as f64
            } else {
                g
            }
        })
        .collect();
    MwerOutput {
        loss: r_bar,
        dloss_dlogp,
    }
}

/// Chains `∂R̄/∂ ln P(yᵢ|x)` through each hypothesis's lattice.
///
/// `lattices[i]` must be built for `nbest.hypotheses()[i]`. The returned
/// tensors are `∂R̄/∂z` for each lattice, using the full forward-backward
/// gradient of `ln P(yᵢ|x)` (all alignments).
pub fn mwer_backprop_to_lattice(
    nbest: &NBestList,
    lattices: &[JointLattice],
    head: &HeadConfig,
) -> Result<Vec<Array3<f64>>> {
    if lattices.len() != nbest.len() {
        return Err(Error::Mismatch(format!(
            "{} lattices for {} hypotheses",
            lattices.len(),
            nbest.len()
        )));
    }
    let MwerOutput { dloss_dlogp, .. } = mwer_loss(nbest);
    nbest
        .hypotheses
        .iter()
        .zip(lattices)
        .zip(dloss_dlogp)
        .map(|((hyp, lattice), scale)| {
            if lattice.label_len() != hyp.tokens.len() {
                return Err(Error::Mismatch(format!(
                    "lattice has U={} but hypothesis has {} tokens",
                    lattice.label_len(),
                    hyp.tokens.len()
                )));
            }
            if scale == 0.0 {
                return Ok(Array3::zeros(lattice.logits().raw_dim()));
            }
            // nll grad is ∂(−ln P)/∂z
            let out = nll_loss(lattice, &hyp.tokens, head)?;
            Ok(out.grad * -scale)
        })
        .collect()
}
