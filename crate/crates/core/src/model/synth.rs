//! Synthetic acoustic task.
//!
//! A hidden token stream is laid out over `T` frames: each token occupies a
//! contiguous run of frames, separated by optional silence. Frame features
//! are the one-hot class of the frame (silence is class 0) and an onset flag
//! on the first frame of every token. Gaussian noise is added to both, with
//! separate levels for the class dimensions and the onset flag.

use std::io::{BufRead, Write};
use std::ops::RangeInclusive;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureSequence;
use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, Vocab};
use crate::lm::{sample_sequence, LanguageModel, TableLm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_utts: usize,
    pub frames: RangeInclusive<usize>,
    pub labels: RangeInclusive<usize>,
    pub vocab_size: usize,
    /// Standard deviation of the noise on the class dimensions.
    pub noise_level: f64,
    /// Standard deviation of the noise on the onset flag.
    #[serde(default)]
    pub onset_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_utts: 2000,
            frames: 10..=16,
            labels: 2..=5,
            vocab_size: 6,
            noise_level: 0.15,
            onset_noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<Vocab> {
        let vocab = Vocab::new(self.vocab_size)?;
        if self.frames.is_empty() || self.labels.is_empty() {
            return Err(Error::InvalidRange(
                "frame and label ranges must be non-empty".into(),
            ));
        }
        if *self.frames.start() == 0 {
            return Err(Error::InvalidRange(
                "utterances need at least one frame".into(),
            ));
        }
        if self.labels.end() >= self.frames.start() {
            return Err(Error::InvalidRange(format!(
                "longest label sequence ({}) must be shorter than the shortest utterance ({} frames)",
                self.labels.end(),
                self.frames.start()
            )));
        }
        for (name, v) in [
            ("noise level", self.noise_level),
            ("onset noise", self.onset_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidRange(format!(
                    "{name} {v} is not a finite non-negative number"
                )));
            }
        }
        Ok(vocab)
    }

    /// Feature width: one-hot over `V̄` plus the onset flag.
    pub fn feature_dim(&self) -> usize {
        feature_dim(self.vocab_size)
    }
}

pub fn feature_dim(vocab_size: usize) -> usize {
    vocab_size + 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub labels: LabelSequence,
    /// Hidden class of each frame, `0` for silence.
    pub frame_classes: Vec<usize>,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub utterances: Vec<Utterance>,
}

/// Written alongside a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub feature_dim: usize,
    pub num_utts: usize,
}

/// Uniformly random label sequences.
pub fn synth_task(seed: u64, config: &SynthConfig) -> Result<Dataset> {
    let vocab = config.validate()?;
    synth_task_with(seed, config, &TableLm::uniform(vocab))
}

/// Label sequences are drawn from `source`.
pub fn synth_task_with(
    seed: u64,
    config: &SynthConfig,
    source: &dyn LanguageModel,
) -> Result<Dataset> {
    let vocab = config.validate()?;
    if source.vocab() != vocab {
        return Err(Error::VocabMismatch {
            expected: vocab.size(),
            actual: source.vocab().size(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class_noise =
        Normal::new(0.0, config.noise_level).map_err(|e| Error::InvalidRange(e.to_string()))?;
    let onset_noise =
        Normal::new(0.0, config.onset_noise).map_err(|e| Error::InvalidRange(e.to_string()))?;
    let dim = config.feature_dim();
    let mut utterances = Vec::with_capacity(config.num_utts);
    for i in 0..config.num_utts {
        let u_len = rng.random_range(config.labels.clone());
        let t_len = rng.random_range(config.frames.clone());
        let labels = sample_sequence(source, &mut rng, u_len);
        let (classes, onsets) = layout(&mut rng, labels.tokens(), t_len);
        let mut x = Array2::zeros((t_len, dim));
        for t in 0..t_len {
            x[[t, classes[t]]] = 1.0;
            if onsets[t] {
                x[[t, dim - 1]] = 1.0;
            }
        }
        for mut row in x.rows_mut() {
            let (class, onset) = row.as_slice_mut().expect("row-major").split_at_mut(dim - 1);
            if config.noise_level > 0.0 {
                class
                    .iter_mut()
                    .for_each(|v| *v += class_noise.sample(&mut rng));
            }
            if config.onset_noise > 0.0 {
                onset[0] += onset_noise.sample(&mut rng);
            }
        }
        utterances.push(Utterance {
            id: format!("utt{i:05}"),
            labels,
            frame_classes: classes,
            features: FeatureSequence::new(x)?,
        });
    }
    Ok(Dataset { vocab, utterances })
}

/// Assigns every frame to a token run or a silence gap. Each token gets one
/// frame; the remaining frames land uniformly on the `2U + 1` slots.
fn layout<R: Rng>(rng: &mut R, tokens: &[usize], frames: usize) -> (Vec<usize>, Vec<bool>) {
    let slots = 2 * tokens.len() + 1;
    let mut width = vec![0usize; slots];
    for u in 0..tokens.len() {
        width[2 * u + 1] = 1;
    }
    for _ in tokens.len()..frames {
        width[rng.random_range(0..slots)] += 1;
    }
    let mut classes = Vec::with_capacity(frames);
    let mut onsets = Vec::with_capacity(frames);
    for (slot, &w) in width.iter().enumerate() {
        let class = if slot % 2 == 1 { tokens[slot / 2] } else { 0 };
        for j in 0..w {
            classes.push(class);
            onsets.push(class != 0 && j == 0);
        }
    }
    (classes, onsets)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.dim())
    }

    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for u in &self.utterances {
            serde_json::to_writer(&mut w, u)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, vocab: Vocab) -> Result<Self> {
        let mut utterances = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let u: Utterance = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("dataset line {}: {e}", n + 1)))?;
            for &k in u.labels.tokens() {
                vocab.check_label(k)?;
            }
            utterances.push(u);
        }
        Ok(Self { vocab, utterances })
    }
}
