//! External language models for shallow and density-ratio fusion.
//!
//! A model maps a context state to a normalized distribution over the label
//! vocabulary (no end-of-sequence event). Two implementations: an explicit
//! table, and an add-α smoothed n-gram estimated from token sequences. Both
//! are immutable once built and safe to share across decoding threads.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, Vocab};
use crate::numerics::log_softmax;

/// Padding symbol for contexts that reach before the start of a sequence.
/// Shares the blank id, which never occurs inside a label sequence.
pub const BOS: usize = 0;

/// The last `order − 1` tokens seen, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LmState(Vec<usize>);

impl LmState {
    pub fn start(order: usize) -> Self {
        Self(vec![BOS; order.saturating_sub(1)])
    }

    pub fn context(&self) -> &[usize] {
        &self.0
    }

    fn advance(&self, token: usize) -> Self {
        if self.0.is_empty() {
            return self.clone();
        }
        let mut next = self.0[1..].to_vec();
        next.push(token);
        Self(next)
    }
}

pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> Vocab;

    fn order(&self) -> usize;

    /// Natural-log probabilities of labels `1..=|V|` (index `k − 1`) given `state`.
    fn log_probs(&self, state: &LmState) -> Vec<f64>;

    fn start(&self) -> LmState {
        LmState::start(self.order())
    }

    fn score_token(&self, state: &LmState, token: usize) -> Result<(f64, LmState)> {
        self.vocab().check_label(token)?;
        Ok((self.log_probs(state)[token - 1], state.advance(token)))
    }

    /// Scores `tokens` starting from `state`; returns the total and the final state.
    fn score_from(&self, state: &LmState, tokens: &[usize]) -> Result<(f64, LmState)> {
        let mut total = 0.0;
        let mut state = state.clone();
        for &k in tokens {
            let (lp, next) = self.score_token(&state, k)?;
            total += lp;
            state = next;
        }
        Ok((total, state))
    }

    fn score_sequence(&self, tokens: &LabelSequence) -> Result<f64> {
        Ok(self.score_from(&self.start(), tokens.tokens())?.0)
    }
}

/// Draws a sequence of `len` labels from `lm`.
pub fn sample_sequence<R: Rng + ?Sized>(
    lm: &dyn LanguageModel,
    rng: &mut R,
    len: usize,
) -> LabelSequence {
    let mut state = lm.start();
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let probs: Vec<f64> = lm.log_probs(&state).iter().map(|l| l.exp()).collect();
        let mut draw: f64 = rng.random();
        let mut pick = probs.len();
        for (i, p) in probs.iter().enumerate() {
            if draw < *p {
                pick = i + 1;
                break;
            }
            draw -= p;
        }
        tokens.push(pick);
        state = state.advance(pick);
    }
    LabelSequence::from_tokens(tokens).expect("sampled labels are non-blank")
}

/// Explicit per-context distributions; contexts without a row are uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLm {
    order: usize,
    vocab: Vocab,
    rows: BTreeMap<Vec<usize>, Vec<f64>>,
    /// Carried through to the file header; not used for scoring.
    alpha: f64,
}

impl TableLm {
    pub fn uniform(vocab: Vocab) -> Self {
        Self {
            order: 1,
            vocab,
            rows: BTreeMap::new(),
            alpha: 0.0,
        }
    }

    /// `rows` maps a context of `order − 1` tokens to natural-log probabilities
    /// over labels; each row must be normalized.
    pub fn new(order: usize, vocab: Vocab, rows: BTreeMap<Vec<usize>, Vec<f64>>) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("LM order must be at least 1".into()));
        }
        for (ctx, row) in &rows {
            if ctx.len() != order - 1 || row.len() != vocab.size() {
                return Err(Error::Config(format!(
                    "malformed LM row for context {ctx:?}"
                )));
            }
            let mass: f64 = row.iter().map(|l| l.exp()).sum();
            if (mass - 1.0).abs() > 1e-8 {
                return Err(Error::Config(format!(
                    "LM row for context {ctx:?} sums to {mass}"
                )));
            }
        }
        Ok(Self {
            order,
            vocab,
            rows,
            alpha: 0.0,
        })
    }

    /// Random rows with logits drawn from `N(0, sharpness²)`; larger
    /// `sharpness` gives peakier conditionals.
    pub fn random<R: Rng + ?Sized>(
        order: usize,
        vocab: Vocab,
        sharpness: f64,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, sharpness).expect("finite sharpness");
        let mut rows = BTreeMap::new();
        for ctx in all_contexts(order, &vocab) {
            let logits: Vec<f64> = (0..vocab.size()).map(|_| normal.sample(rng)).collect();
            rows.insert(ctx, log_softmax(&logits, 1.0).expect("non-empty"));
        }
        Self {
            order,
            vocab,
            rows,
            alpha: 0.0,
        }
    }

    pub fn rows(&self) -> &BTreeMap<Vec<usize>, Vec<f64>> {
        &self.rows
    }

    /// Writes the JSON header line followed by one `context<TAB>token<TAB>log10 p`
    /// line per stored entry. Contexts are space-separated token ids.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = LmHeader {
            order: self.order,
            alpha: self.alpha,
            vocab_size: self.vocab.size(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (ctx, row) in &self.rows {
            let ctx_text = ctx
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            for (i, lp) in row.iter().enumerate() {
                writeln!(w, "{ctx_text}\t{}\t{}", i + 1, lp / std::f64::consts::LN_10)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format("empty LM file".into()))??;
        let header: LmHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Format(format!("LM header: {e}")))?;
        let vocab = Vocab::new(header.vocab_size)?;
        let mut rows: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("LM entry line {}: {line:?}", n + 2));
            let mut fields = line.split('\t');
            let (ctx, tok, lp) = match (fields.next(), fields.next(), fields.next(), fields.next())
            {
                (Some(c), Some(t), Some(p), None) => (c, t, p),
                _ => return Err(bad()),
            };
            let ctx: Vec<usize> = ctx
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let tok: usize = tok.parse().map_err(|_| bad())?;
            let lp: f64 = lp.parse().map_err(|_| bad())?;
            vocab.check_label(tok)?;
            let row = rows
                .entry(ctx)
                .or_insert_with(|| vec![f64::NEG_INFINITY; vocab.size()]);
            row[tok - 1] = lp * std::f64::consts::LN_10;
        }
        let mut lm = Self::new(header.order, vocab, rows)?;
        lm.alpha = header.alpha;
        Ok(lm)
    }
}

fn all_contexts(order: usize, vocab: &Vocab) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 1..order {
        out = out
            .into_iter()
            .flat_map(|ctx| {
                (0..=vocab.size()).map(move |k| {
                    let mut c = ctx.clone();
                    c.push(k);
                    c
                })
            })
            .collect();
    }
    out
}

impl LanguageModel for TableLm {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn log_probs(&self, state: &LmState) -> Vec<f64> {
        match self.rows.get(state.context()) {
            Some(row) => row.clone(),
            None => vec![-(self.vocab.size() as f64).ln(); self.vocab.size()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmHeader {
    pub order: usize,
    pub alpha: f64,
    pub vocab_size: usize,
}

/// Count-based n-gram with add-α smoothing:
/// `P(k | h) = (c(h, k) + α) / (c(h) + α·|V|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramLm {
    order: usize,
    alpha: f64,
    vocab: Vocab,
    counts: HashMap<Vec<usize>, Vec<f64>>,
}

impl NgramLm {
    pub const DEFAULT_ORDER: usize = 2;
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn train<'a, I>(corpus: I, order: usize, alpha: f64, vocab: Vocab) -> Result<Self>
    where
        I: IntoIterator<Item = &'a LabelSequence>,
    {
        if order == 0 {
            return Err(Error::Config("LM order must be at least 1".into()));
        }
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::Config(format!(
                "add-α smoothing needs α > 0, got {alpha}"
            )));
        }
        let mut counts: HashMap<Vec<usize>, Vec<f64>> = HashMap::new();
        for sentence in corpus {
            let mut state = LmState::start(order);
            for &k in sentence.tokens() {
                vocab.check_label(k)?;
                counts
                    .entry(state.context().to_vec())
                    .or_insert_with(|| vec![0.0; vocab.size()])[k - 1] += 1.0;
                state = state.advance(k);
            }
        }
        Ok(Self {
            order,
            alpha,
            vocab,
            counts,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Freezes the model into an explicit table (one row per observed context).
    pub fn to_table(&self) -> TableLm {
        let rows = self
            .counts
            .keys()
            .map(|ctx| (ctx.clone(), self.log_probs(&LmState(ctx.clone()))))
            .collect();
        TableLm {
            order: self.order,
            vocab: self.vocab,
            rows,
            alpha: self.alpha,
        }
    }
}

impl LanguageModel for NgramLm {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn log_probs(&self, state: &LmState) -> Vec<f64> {
        let v = self.vocab.size() as f64;
        match self.counts.get(state.context()) {
            Some(row) => {
                let denom = (row.iter().sum::<f64>() + self.alpha * v).ln();
                row.iter().map(|c| (c + self.alpha).ln() - denom).collect()
            }
            None => vec![-v.ln(); self.vocab.size()],
        }
    }
}
