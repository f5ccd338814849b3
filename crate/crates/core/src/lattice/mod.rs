//! Transducer lattices: per-cell output distributions, the forward-backward
//! recursion over the `T × (U+1)` grid, and the negative log-likelihood with
//! its gradient with respect to the joint logits.
//!
//! Axis convention everywhere is `[t][u][k]`: acoustic frame, number of labels
//! already emitted, extended-vocabulary index (blank is index 0).

mod file;

pub use file::{read_lattice, write_lattice, LATTICE_MAGIC, LATTICE_VERSION};

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hat::{hat_logit_grad, hat_step_distribution, HatTemperature};
use crate::numerics::{log_add, log_softmax, log_sum_exp_nonempty, LOG_ZERO};

/// Index of the blank symbol in the extended vocabulary.
pub const BLANK: usize = 0;

/// Label vocabulary. Labels are `1..=size`; blank is [`BLANK`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config(
                "vocabulary must hold at least one label".into(),
            ));
        }
        Ok(Self { size })
    }

    /// Number of non-blank labels, `|V|`.
    pub fn size(&self) -> usize {
        self.size
    }

    /// `|V| + 1`.
    pub fn extended_size(&self) -> usize {
        self.size + 1
    }

    pub fn blank_id(&self) -> usize {
        BLANK
    }

    pub fn is_label(&self, id: usize) -> bool {
        (1..=self.size).contains(&id)
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> {
        1..=self.size
    }

    pub fn check_label(&self, id: usize) -> Result<()> {
        if self.is_label(id) {
            Ok(())
        } else {
            Err(Error::InvalidLabel {
                label: id,
                vocab_size: self.size,
            })
        }
    }
}

/// A blank-free target sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSequence(Vec<usize>);

impl LabelSequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        for &k in &tokens {
            vocab.check_label(k)?;
        }
        Ok(Self(tokens))
    }

    /// Builds a sequence without a vocabulary check. Blank is still rejected.
    pub fn from_tokens(tokens: Vec<usize>) -> Result<Self> {
        if let Some(&b) = tokens.iter().find(|&&k| k == BLANK) {
            return Err(Error::InvalidLabel {
                label: b,
                vocab_size: 0,
            });
        }
        Ok(Self(tokens))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<usize> {
        self.0
    }
}

impl AsRef<[usize]> for LabelSequence {
    fn as_ref(&self) -> &[usize] {
        &self.0
    }
}

/// Joint-network outputs `z[t][u][k]` for one utterance and one label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct JointLattice {
    logits: Array3<f64>,
}

impl JointLattice {
    pub fn new(logits: Array3<f64>) -> Self {
        Self { logits }
    }

    pub fn zeros(frames: usize, label_len: usize, classes: usize) -> Self {
        Self::new(Array3::zeros((frames, label_len + 1, classes)))
    }

    /// `T`.
    pub fn frames(&self) -> usize {
        self.logits.dim().0
    }

    /// `U` (the second axis has `U + 1` entries).
    pub fn label_len(&self) -> usize {
        self.logits.dim().1 - 1
    }

    /// `|V̄|`.
    pub fn classes(&self) -> usize {
        self.logits.dim().2
    }

    pub fn cell(&self, t: usize, u: usize) -> ArrayView1<'_, f64> {
        self.logits.slice(ndarray::s![t, u, ..])
    }

    pub fn logits(&self) -> &Array3<f64> {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut Array3<f64> {
        &mut self.logits
    }

    pub fn into_logits(self) -> Array3<f64> {
        self.logits
    }

    fn check_finite(&self) -> Result<()> {
        match self.logits.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::InvalidLattice(format!(
                "non-finite logit at flat index {i}"
            ))),
        }
    }
}

/// Log-probabilities over `V̄` for a single lattice cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub log_probs: Vec<f64>,
}

impl StepDistribution {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

/// Standard RNN-T head: softmax over the extended vocabulary at temperature `Z`.
pub fn rnnt_step_distribution(
    cell: &[f64],
    vocab: &Vocab,
    temperature: f64,
) -> Result<StepDistribution> {
    if cell.len() != vocab.extended_size() {
        return Err(Error::VocabMismatch {
            expected: vocab.extended_size(),
            actual: cell.len(),
        });
    }
    Ok(StepDistribution {
        log_probs: log_softmax(cell, temperature)?,
    })
}

/// Which output head turns a joint logit vector into a distribution over `V̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    #[default]
    Rnnt,
    Hat,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnnt" => Ok(Head::Rnnt),
            "hat" => Ok(Head::Hat),
            other => Err(Error::Config(format!("unknown head {other:?}"))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Head::Rnnt => "rnnt",
            Head::Hat => "hat",
        })
    }
}

/// A head together with the temperature it is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub head: Head,
    pub temperature: f64,
    /// Only consulted by the HAT head.
    #[serde(default)]
    pub hat_temperature: HatTemperature,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            head: Head::Rnnt,
            temperature: 1.0,
            hat_temperature: HatTemperature::Both,
        }
    }
}

impl HeadConfig {
    pub fn new(head: Head, temperature: f64) -> Self {
        Self {
            head,
            temperature,
            ..Self::default()
        }
    }

    pub fn rnnt() -> Self {
        Self::new(Head::Rnnt, 1.0)
    }

    pub fn hat() -> Self {
        Self::new(Head::Hat, 1.0)
    }

    pub fn with_temperature(self, temperature: f64) -> Self {
        Self {
            temperature,
            ..self
        }
    }

    /// Log-probabilities over `V̄` for one cell of joint logits.
    pub fn step_log_probs(&self, cell: &[f64], vocab: &Vocab) -> Result<Vec<f64>> {
        match self.head {
            Head::Rnnt => Ok(rnnt_step_distribution(cell, vocab, self.temperature)?.log_probs),
            Head::Hat => {
                Ok(
                    hat_step_distribution(cell, vocab, self.temperature, self.hat_temperature)?
                        .to_step_distribution()
                        .log_probs,
                )
            }
        }
    }

    /// Pulls `∂L/∂ log P(k)` for one cell back to `∂L/∂z_k`.
    pub fn logit_grad(&self, cell: &[f64], vocab: &Vocab, dlogp: &[f64]) -> Result<Vec<f64>> {
        match self.head {
            Head::Rnnt => {
                let dist = rnnt_step_distribution(cell, vocab, self.temperature)?;
                let total: f64 = dlogp.iter().sum();
                Ok(dist
                    .log_probs
                    .iter()
                    .zip(dlogp)
                    .map(|(lp, g)| (g - lp.exp() * total) / self.temperature)
                    .collect())
            }
            Head::Hat => {
                let dist =
                    hat_step_distribution(cell, vocab, self.temperature, self.hat_temperature)?;
                Ok(hat_logit_grad(
                    &dist,
                    self.temperature,
                    self.hat_temperature,
                    dlogp,
                ))
            }
        }
    }

    /// Evaluates the head on every cell of a lattice.
    pub fn grid(&self, lattice: &JointLattice) -> Result<StepGrid> {
        let (frames, states, classes) = lattice.logits.dim();
        let vocab = Vocab::new(classes.saturating_sub(1))?;
        let mut out = Array3::zeros((frames, states, classes));
        for t in 0..frames {
            for u in 0..states {
                let cell = lattice.cell(t, u).to_vec();
                let lp = self.step_log_probs(&cell, &vocab)?;
                out.slice_mut(ndarray::s![t, u, ..])
                    .assign(&ArrayView1::from(&lp));
            }
        }
        Ok(StepGrid { log_probs: out })
    }
}

/// Per-cell log-probabilities for a whole lattice, `[t][u][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGrid {
    log_probs: Array3<f64>,
}

impl StepGrid {
    pub fn new(log_probs: Array3<f64>) -> Self {
        Self { log_probs }
    }

    /// Builds a grid from explicit per-cell distributions, indexed `[t][u]`.
    pub fn from_cells(cells: &[Vec<StepDistribution>]) -> Result<Self> {
        let frames = cells.len();
        let states = cells.first().map_or(0, Vec::len);
        let classes = cells
            .first()
            .and_then(|row| row.first())
            .map_or(0, |d| d.log_probs.len());
        let mut log_probs = Array3::zeros((frames, states, classes));
        for (t, row) in cells.iter().enumerate() {
            if row.len() != states {
                return Err(Error::LatticeLabelMismatch("ragged grid".into()));
            }
            for (u, dist) in row.iter().enumerate() {
                if dist.log_probs.len() != classes {
                    return Err(Error::VocabMismatch {
                        expected: classes,
                        actual: dist.log_probs.len(),
                    });
                }
                for (k, &lp) in dist.log_probs.iter().enumerate() {
                    log_probs[[t, u, k]] = lp;
                }
            }
        }
        Ok(Self { log_probs })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.dim().0
    }

    pub fn states(&self) -> usize {
        self.log_probs.dim().1
    }

    pub fn classes(&self) -> usize {
        self.log_probs.dim().2
    }

    #[inline]
    pub fn log_prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[[t, u, k]]
    }

    pub fn cell(&self, t: usize, u: usize) -> StepDistribution {
        StepDistribution {
            log_probs: self.log_probs.slice(ndarray::s![t, u, ..]).to_vec(),
        }
    }

    pub fn log_probs(&self) -> &Array3<f64> {
        &self.log_probs
    }

    fn check_labels(&self, labels: &LabelSequence) -> Result<()> {
        if self.frames() == 0 {
            return Err(Error::LatticeLabelMismatch("lattice has no frames".into()));
        }
        if self.states() != labels.len() + 1 {
            return Err(Error::LatticeLabelMismatch(format!(
                "grid has {} label states, labels need {}",
                self.states(),
                labels.len() + 1
            )));
        }
        if let Some(&k) = labels
            .tokens()
            .iter()
            .find(|&&k| k == BLANK || k >= self.classes())
        {
            return Err(Error::LatticeLabelMismatch(format!(
                "label {k} outside 1..{}",
                self.classes()
            )));
        }
        Ok(())
    }
}

/// Forward variables `ln α(t,u)` and the sequence log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub log_alpha: Array2<f64>,
    pub log_likelihood: f64,
}

/// Forward and backward variables for one lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBetaTableau {
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_likelihood: f64,
}

impl AlphaBetaTableau {
    /// `γ(t,u) = α(t,u)·β(t,u) / P(y|x)`, the expected number of visits to a cell.
    pub fn occupancy(&self) -> Array2<f64> {
        let ll = self.log_likelihood;
        (&self.log_alpha + &self.log_beta).mapv(|v| (v - ll).exp())
    }
}

/// `α(t,u) = α(t−1,u)·P(∅|t−1,u) + α(t,u−1)·P(y_u|t,u−1)`, with
/// `ln P(y|x) = ln α(T−1,U) + ln P(∅|T−1,U)`.
pub fn forward(grid: &StepGrid, labels: &LabelSequence) -> Result<ForwardPass> {
    grid.check_labels(labels)?;
    let frames = grid.frames();
    let u_max = labels.len();
    let y = labels.tokens();
    let mut log_alpha = Array2::from_elem((frames, u_max + 1), LOG_ZERO);
    log_alpha[[0, 0]] = 0.0;
    for t in 0..frames {
        for u in 0..=u_max {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = LOG_ZERO;
            if t > 0 {
                acc = log_alpha[[t - 1, u]] + grid.log_prob(t - 1, u, BLANK);
            }
            if u > 0 {
                acc = log_add(
                    acc,
                    log_alpha[[t, u - 1]] + grid.log_prob(t, u - 1, y[u - 1]),
                );
            }
            log_alpha[[t, u]] = acc;
        }
    }
    let log_likelihood = log_alpha[[frames - 1, u_max]] + grid.log_prob(frames - 1, u_max, BLANK);
    Ok(ForwardPass {
        log_alpha,
        log_likelihood,
    })
}

/// `ln β(t,u)`: log-probability of finishing the lattice from cell `(t,u)`,
/// i.e. emitting `y_{u+1..U}` and every remaining blank including the final one.
pub fn backward(grid: &StepGrid, labels: &LabelSequence) -> Result<Array2<f64>> {
    grid.check_labels(labels)?;
    let frames = grid.frames();
    let u_max = labels.len();
    let y = labels.tokens();
    let mut log_beta = Array2::from_elem((frames, u_max + 1), LOG_ZERO);
    for t in (0..frames).rev() {
        for u in (0..=u_max).rev() {
            let blank = grid.log_prob(t, u, BLANK);
            let mut acc = if t + 1 < frames {
                log_beta[[t + 1, u]] + blank
            } else if u == u_max {
                blank
            } else {
                LOG_ZERO
            };
            if u < u_max {
                acc = log_add(acc, log_beta[[t, u + 1]] + grid.log_prob(t, u, y[u]));
            }
            log_beta[[t, u]] = acc;
        }
    }
    Ok(log_beta)
}

pub fn forward_backward(grid: &StepGrid, labels: &LabelSequence) -> Result<AlphaBetaTableau> {
    let ForwardPass {
        log_alpha,
        log_likelihood,
    } = forward(grid, labels)?;
    let log_beta = backward(grid, labels)?;
    Ok(AlphaBetaTableau {
        log_alpha,
        log_beta,
        log_likelihood,
    })
}

/// `∂ ln P(y|x) / ∂ ln P(k|t,u)` for every cell. Only blank and the next
/// label carry mass; every other entry is zero.
pub fn log_prob_grad(
    grid: &StepGrid,
    labels: &LabelSequence,
    tableau: &AlphaBetaTableau,
) -> Array3<f64> {
    let (frames, states, classes) = grid.log_probs.dim();
    let u_max = states - 1;
    let y = labels.tokens();
    let ll = tableau.log_likelihood;
    let alpha = tableau.log_alpha.view();
    let beta = tableau.log_beta.view();
    let mut out = Array3::zeros((frames, states, classes));
    for t in 0..frames {
        for u in 0..states {
            let a = alpha[[t, u]];
            if a == LOG_ZERO {
                continue;
            }
            let after_blank = if t + 1 < frames {
                beta[[t + 1, u]]
            } else if u == u_max {
                0.0
            } else {
                LOG_ZERO
            };
            out[[t, u, BLANK]] = (a + grid.log_prob(t, u, BLANK) + after_blank - ll).exp();
            if u < u_max {
                let k = y[u];
                out[[t, u, k]] = (a + grid.log_prob(t, u, k) + beta[[t, u + 1]] - ll).exp();
            }
        }
    }
    out
}

/// Loss value and `∂L/∂z` for one lattice.
#[derive(Debug, Clone)]
pub struct NllOutput {
    pub loss: f64,
    pub grad: Array3<f64>,
    pub tableau: AlphaBetaTableau,
}

/// `L = −ln P(y|x)` and its gradient with respect to the joint logits.
pub fn nll_loss(
    lattice: &JointLattice,
    labels: &LabelSequence,
    head: &HeadConfig,
) -> Result<NllOutput> {
    lattice.check_finite()?;
    let vocab = Vocab::new(lattice.classes().saturating_sub(1))?;
    let grid = head.grid(lattice)?;
    let tableau = forward_backward(&grid, labels)?;
    if !tableau.log_likelihood.is_finite() {
        return Err(Error::InvalidLattice(format!(
            "log-likelihood is {}",
            tableau.log_likelihood
        )));
    }
    let dlogp = log_prob_grad(&grid, labels, &tableau);
    let (frames, states, classes) = lattice.logits.dim();
    let mut grad = Array3::zeros((frames, states, classes));
    let mut neg = vec![0.0; classes];
    for t in 0..frames {
        for u in 0..states {
            for (k, g) in neg.iter_mut().enumerate() {
                *g = -dlogp[[t, u, k]];
            }
            let cell = lattice.cell(t, u).to_vec();
            let dz = head.logit_grad(&cell, &vocab, &neg)?;
            grad.slice_mut(ndarray::s![t, u, ..])
                .assign(&ArrayView1::from(&dz));
        }
    }
    Ok(NllOutput {
        loss: -tableau.log_likelihood,
        grad,
        tableau,
    })
}

/// Largest `T + U` the enumeration oracle accepts.
pub const ORACLE_LIMIT: usize = 20;

/// Sums the probability of every alignment path explicitly.
///
/// A path is a sequence of `T` blanks and the `U` labels in order, ending in
/// a blank; there are `C(T−1+U, U)` of them. Each path's log-probability is
/// accumulated independently and the totals are combined at the end, so
/// this shares nothing with the recursion in [`forward`].
pub fn alignment_oracle(grid: &StepGrid, labels: &LabelSequence) -> Result<f64> {
    grid.check_labels(labels)?;
    let frames = grid.frames();
    let u_max = labels.len();
    if frames + u_max > ORACLE_LIMIT {
        return Err(Error::OracleLimitExceeded(frames + u_max));
    }
    let mut path_scores = Vec::new();
    enumerate_paths(grid, labels.tokens(), 0, 0, 0.0, &mut path_scores);
    Ok(log_sum_exp_nonempty(&path_scores))
}

/// Number of alignment paths the oracle enumerates.
pub fn alignment_count(frames: usize, label_len: usize) -> u64 {
    // C(T−1+U, U)
    let n = (frames - 1 + label_len) as u64;
    let k = label_len as u64;
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

fn enumerate_paths(
    grid: &StepGrid,
    y: &[usize],
    t: usize,
    u: usize,
    score: f64,
    out: &mut Vec<f64>,
) {
    let frames = grid.frames();
    if t == frames - 1 && u == y.len() {
        out.push(score + grid.log_prob(t, u, BLANK));
        return;
    }
    if u < y.len() {
        enumerate_paths(grid, y, t, u + 1, score + grid.log_prob(t, u, y[u]), out);
    }
    if t + 1 < frames {
        enumerate_paths(grid, y, t + 1, u, score + grid.log_prob(t, u, BLANK), out);
    }
}

/// Log-sum-exp of `α(t,u) + β(t,u)` over the anti-diagonal `t + u = n`.
///
/// Every path crosses each anti-diagonal exactly once, so this equals the
/// log-likelihood for every `n` in `0..T+U`.
pub fn diagonal_marginal(tableau: &AlphaBetaTableau, n: usize) -> f64 {
    let (frames, states) = tableau.log_alpha.dim();
    let terms: Vec<f64> = (0..states)
        .filter(|&u| u <= n && n - u < frames)
        .map(|u| tableau.log_alpha[[n - u, u]] + tableau.log_beta[[n - u, u]])
        .collect();
    if terms.is_empty() {
        return LOG_ZERO;
    }
    log_sum_exp_nonempty(&terms)
}

/// Log of the total probability flowing through the blank transitions that
/// leave frame `t`. Every path takes exactly one of them per frame, so this
/// also equals the log-likelihood for every `t`.
pub fn frame_blank_flow(grid: &StepGrid, tableau: &AlphaBetaTableau) -> Vec<f64> {
    let (frames, states) = tableau.log_alpha.dim();
    let u_max = states - 1;
    (0..frames)
        .map(|t| {
            let terms: Vec<f64> = (0..states)
                .map(|u| {
                    let after = if t + 1 < frames {
                        tableau.log_beta[[t + 1, u]]
                    } else if u == u_max {
                        0.0
                    } else {
                        LOG_ZERO
                    };
                    tableau.log_alpha[[t, u]] + grid.log_prob(t, u, BLANK) + after
                })
                .collect();
            log_sum_exp_nonempty(&terms)
        })
        .collect()
}
