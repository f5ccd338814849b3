//! Beam search for RNN-T and HAT models with temperature, final-score length
//! normalization, and internal/external LM fusion.
//!
//! The search is frame-synchronous with prefix merging. Each hypothesis is a
//! distinct label prefix carrying `ln P(prefix | x)` summed over every
//! alignment retained in the beam. Within a frame a prefix may emit up to
//! `max_symbols_per_step` labels before taking the blank that advances time;
//! when two paths reach the same prefix their probabilities are added. With
//! a beam large enough to hold every reachable prefix the log-probabilities
//! are exact alignment marginals.
//!
//! Pruning ranks hypotheses by the unnormalized fused score
//! `ln P(y|x) − λ₁·ln P̃_ILM(y) + λ₂·ln P_LM(y)`. Length normalization is
//! applied once, to the final ranking.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hat::{HatTemperature, InternalLmScore};
use crate::lattice::{Head, HeadConfig, LabelSequence, Vocab, BLANK};
use crate::lm::{LanguageModel, LmState};
use crate::numerics::{log_add, log_softmax, LOG_ZERO};

/// Interpolation weights: `λ₁` scales the internal-LM subtraction and `λ₂`
/// the external-LM addition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl FusionWeights {
    pub const NONE: FusionWeights = FusionWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) || !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::Config(format!(
                "fusion weights must be finite and non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn is_none(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub head: Head,
    /// `Z`.
    pub temperature: f64,
    #[serde(default)]
    pub hat_temperature: HatTemperature,
    pub length_norm: bool,
    #[serde(default)]
    pub fusion: FusionWeights,
    pub max_symbols_per_step: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 8,
            head: Head::Hat,
            temperature: 1.0,
            hat_temperature: HatTemperature::Both,
            length_norm: true,
            fusion: FusionWeights::NONE,
            max_symbols_per_step: 5,
        }
    }
}

impl DecodeConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            head: self.head,
            temperature: self.temperature,
            hat_temperature: self.hat_temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        if self.max_symbols_per_step == 0 {
            return Err(Error::Config(
                "max_symbols_per_step must be at least 1".into(),
            ));
        }
        FusionWeights::new(self.fusion.lambda1, self.fusion.lambda2)?;
        Ok(())
    }
}

/// Anything the decoder can query for joint logits along a label prefix.
pub trait TransducerScorer {
    type State: Clone;

    fn vocab(&self) -> Vocab;

    /// `T`.
    fn frames(&self) -> usize;

    /// Prediction-network state before any label.
    fn initial_state(&self) -> Self::State;

    fn advance(&self, state: &Self::State, token: usize) -> Self::State;

    /// Joint logits over `V̄` at frame `t` for the prefix summarized by `state`.
    fn joint_logits(&self, t: usize, state: &Self::State) -> Vec<f64>;

    /// Joint logits with the acoustic contribution removed.
    fn ilm_logits(&self, state: &Self::State) -> Vec<f64>;
}

type LogitFn = Box<dyn Fn(usize, &[usize]) -> Vec<f64> + Send + Sync>;
type IlmFn = Box<dyn Fn(&[usize]) -> Vec<f64> + Send + Sync>;

/// A scorer defined directly by functions of `(t, prefix)`; its state is the
/// prefix itself. Used for hand-built lattices and exhaustive oracles.
pub struct PrefixScorer {
    vocab: Vocab,
    frames: usize,
    joint: LogitFn,
    ilm: IlmFn,
}

impl PrefixScorer {
    pub fn new(
        vocab: Vocab,
        frames: usize,
        joint: impl Fn(usize, &[usize]) -> Vec<f64> + Send + Sync + 'static,
        ilm: impl Fn(&[usize]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            vocab,
            frames,
            joint: Box::new(joint),
            ilm: Box::new(ilm),
        }
    }
}

impl TransducerScorer for PrefixScorer {
    type State = Vec<usize>;

    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn frames(&self) -> usize {
        self.frames
    }

    fn initial_state(&self) -> Vec<usize> {
        Vec::new()
    }

    fn advance(&self, state: &Vec<usize>, token: usize) -> Vec<usize> {
        let mut next = state.clone();
        next.push(token);
        next
    }

    fn joint_logits(&self, t: usize, state: &Vec<usize>) -> Vec<f64> {
        (self.joint)(t, state)
    }

    fn ilm_logits(&self, state: &Vec<usize>) -> Vec<f64> {
        (self.ilm)(state)
    }
}

/// `(ln P(y|x) − λ₁·ln P̃_ILM(y) + λ₂·ln P_LM(y))`, divided by `y_len` when
/// `length_norm` is set.
pub fn fusion_score(
    log_p: f64,
    ilm: &InternalLmScore,
    lm: f64,
    y_len: usize,
    weights: FusionWeights,
    length_norm: bool,
) -> Result<f64> {
    fused_score(log_p, ilm.log_prob, lm, y_len, weights, length_norm)
}

fn fused_score(
    log_p: f64,
    ilm: f64,
    lm: f64,
    y_len: usize,
    weights: FusionWeights,
    length_norm: bool,
) -> Result<f64> {
    let raw = unnormalized(log_p, ilm, lm, weights);
    if length_norm {
        if y_len == 0 {
            return Err(Error::Internal(
                "length-normalized score with |y| = 0".into(),
            ));
        }
        Ok(raw / y_len as f64)
    } else {
        Ok(raw)
    }
}

#[inline]
fn unnormalized(log_p: f64, ilm: f64, lm: f64, weights: FusionWeights) -> f64 {
    log_p - weights.lambda1 * ilm + weights.lambda2 * lm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedHypothesis {
    pub tokens: LabelSequence,
    /// `ln P(y|x)` over the alignments retained by the search.
    pub log_prob: f64,
    pub ilm_log_prob: f64,
    pub lm_log_prob: f64,
    /// Unnormalized fused score.
    pub fused: f64,
    /// Ranking score: `fused`, divided by `max(|y|, 1)` under length normalization.
    pub score: f64,
}

/// Deterministic ranking: higher score first, then shorter, then lexicographic.
fn by_rank(a: &DecodedHypothesis, b: &DecodedHypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Recomputes the ranking score from `fused` and re-sorts. An empty
/// hypothesis counts as length one.
pub fn length_norm_rerank(
    mut hyps: Vec<DecodedHypothesis>,
    enabled: bool,
) -> Vec<DecodedHypothesis> {
    for h in &mut hyps {
        h.score = if enabled {
            h.fused / h.tokens.len().max(1) as f64
        } else {
            h.fused
        };
    }
    hyps.sort_by(by_rank);
    hyps
}

struct Entry<S> {
    tokens: Vec<usize>,
    /// Within a frame: `ln` mass split by the number of labels already
    /// emitted in this frame. Between frames only slot 0 is used.
    by_depth: Vec<f64>,
    log_prob: f64,
    ilm: f64,
    lm: f64,
    lm_state: Option<LmState>,
    state: Option<S>,
    /// Parent index and label, for entries whose predictor state is not computed yet.
    pending: Option<(usize, usize)>,
    alive: bool,
    blank: f64,
}

impl<S> Entry<S> {
    fn fused(&self, w: FusionWeights) -> f64 {
        unnormalized(self.log_prob, self.ilm, self.lm, w)
    }

    fn refresh_total(&mut self) {
        self.log_prob = self.by_depth.iter().copied().fold(LOG_ZERO, log_add);
    }
}

fn prune_order<S>(w: FusionWeights) -> impl Fn(&Entry<S>, &Entry<S>) -> Ordering {
    move |a, b| {
        b.fused(w)
            .total_cmp(&a.fused(w))
            .then(a.tokens.len().cmp(&b.tokens.len()))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

fn depth_slots(cap: usize, first: f64) -> Vec<f64> {
    let mut slots = vec![LOG_ZERO; cap + 1];
    slots[0] = first;
    slots
}

pub fn beam_search<M: TransducerScorer>(
    model: &M,
    config: &DecodeConfig,
    external_lm: Option<&dyn LanguageModel>,
) -> Result<Vec<DecodedHypothesis>> {
    config.validate()?;
    let frames = model.frames();
    if frames == 0 {
        return Err(Error::EmptyInput);
    }
    let vocab = model.vocab();
    if let Some(lm) = external_lm {
        if lm.vocab() != vocab {
            return Err(Error::Config(
                "external LM vocabulary differs from the model's".into(),
            ));
        }
    }
    let head = config.head_config();
    let weights = config.fusion;
    let cap = config.max_symbols_per_step;
    let beam_size = config.beam_size;

    let mut beam: Vec<Entry<M::State>> = vec![Entry {
        tokens: Vec::new(),
        by_depth: depth_slots(cap, 0.0),
        log_prob: 0.0,
        ilm: 0.0,
        lm: 0.0,
        lm_state: external_lm.map(|lm| lm.start()),
        state: Some(model.initial_state()),
        pending: None,
        alive: true,
        blank: 0.0,
    }];

    for t in 0..frames {
        let mut pool = std::mem::take(&mut beam);
        let mut index: HashMap<Vec<usize>, usize> = pool
            .iter()
            .enumerate()
            .map(|(i, e)| (e.tokens.clone(), i))
            .collect();
        let mut len = pool.iter().map(|e| e.tokens.len()).min().unwrap_or(0);
        loop {
            let group: Vec<usize> = (0..pool.len())
                .filter(|&i| pool[i].alive && pool[i].tokens.len() == len)
                .collect();
            if group.is_empty() && !pool.iter().any(|e| e.alive && e.tokens.len() > len) {
                break;
            }
            let mut fresh = Vec::new();
            for idx in group {
                let state = pool[idx]
                    .state
                    .clone()
                    .expect("state resolved before expansion");
                let log_probs = head.step_log_probs(&model.joint_logits(t, &state), &vocab)?;
                pool[idx].blank = log_probs[BLANK];
                if pool[idx].by_depth[..cap].iter().all(|&m| m == LOG_ZERO) {
                    continue;
                }
                let ilm_lp = log_softmax(&model.ilm_logits(&state)[1..], 1.0)?;
                let lm_lp = match (&pool[idx].lm_state, external_lm) {
                    (Some(s), Some(lm)) => Some(lm.log_probs(s)),
                    _ => None,
                };
                for k in vocab.labels() {
                    let mut child = pool[idx].tokens.clone();
                    child.push(k);
                    let j = match index.get(&child) {
                        Some(&j) => j,
                        None => {
                            let entry = Entry {
                                tokens: child.clone(),
                                by_depth: depth_slots(cap, LOG_ZERO),
                                log_prob: LOG_ZERO,
                                ilm: pool[idx].ilm + ilm_lp[k - 1],
                                lm: pool[idx].lm + lm_lp.as_ref().map_or(0.0, |row| row[k - 1]),
                                lm_state: None,
                                state: None,
                                pending: Some((idx, k)),
                                alive: true,
                                blank: 0.0,
                            };
                            index.insert(child, pool.len());
                            fresh.push(pool.len());
                            pool.push(entry);
                            pool.len() - 1
                        }
                    };
                    for d in 0..cap {
                        let mass = pool[idx].by_depth[d] + log_probs[k];
                        pool[j].by_depth[d + 1] = log_add(pool[j].by_depth[d + 1], mass);
                    }
                    pool[j].refresh_total();
                }
            }
            if fresh.len() > beam_size {
                let order = prune_order(weights);
                fresh.sort_by(|&a, &b| order(&pool[a], &pool[b]));
                for &i in &fresh[beam_size..] {
                    pool[i].alive = false;
                }
                fresh.truncate(beam_size);
            }
            for i in fresh {
                let (parent, k) = pool[i].pending.take().expect("fresh entry has a parent");
                let parent_state = pool[parent].state.as_ref().expect("parent expanded");
                pool[i].state = Some(model.advance(parent_state, k));
                if let (Some(lm), Some(s)) = (external_lm, pool[parent].lm_state.as_ref()) {
                    pool[i].lm_state = Some(lm.score_token(s, k)?.1);
                }
            }
            len += 1;
        }

        let mut next: Vec<Entry<M::State>> = pool
            .into_iter()
            .filter(|e| e.alive)
            .map(|mut e| {
                e.log_prob += e.blank;
                e.by_depth = depth_slots(cap, e.log_prob);
                e
            })
            .collect();
        next.sort_by(prune_order(weights));
        next.truncate(beam_size);
        beam = next;
    }

    if beam.is_empty() {
        return Err(Error::SearchFailure);
    }
    let hyps = beam
        .into_iter()
        .map(|e| {
            let fused = e.fused(weights);
            Ok(DecodedHypothesis {
                tokens: LabelSequence::from_tokens(e.tokens)?,
                log_prob: e.log_prob,
                ilm_log_prob: e.ilm,
                lm_log_prob: e.lm,
                fused,
                score: fused,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(length_norm_rerank(hyps, config.length_norm))
}

#[cfg(test)]
mod tests;
