use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind};
use super::synth::{Dataset, Utterance};
use super::{ModelScorer, ToyModelParams};
use crate::decoder::{beam_search, DecodeConfig, FusionWeights};
use crate::error::{Error, Result};
use crate::hat::HatTemperature;
use crate::lattice::{nll_loss, Head, HeadConfig, LabelSequence, NllOutput};
use crate::mwer::{mwer_loss, word_edit_distance, Hypothesis, NBestList, NBestOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Nll,
    Mwer,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(Self::Nll),
            "mwer" => Ok(Self::Mwer),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Beam used to build N-best lists, both for MWER updates and for the
    /// validation metrics.
    pub mwer_beam: usize,
    pub temperature: f64,
    pub head: Head,
    pub hat_temperature: HatTemperature,
    pub length_normalized_posterior: bool,
    /// Add the reference to every N-best list before computing posteriors.
    pub include_reference: bool,
    pub max_symbols_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_loss(LossKind::Nll)
    }
}

impl TrainConfig {
    /// Defaults for `loss`: Adam at 1e-3 for NLL and 1e-4 for MWER.
    pub fn for_loss(loss: LossKind) -> Self {
        Self {
            seed: 0,
            learning_rate: match loss {
                LossKind::Nll => 1e-3,
                LossKind::Mwer => 1e-4,
            },
            optimizer: OptimizerKind::Adam,
            epochs: match loss {
                LossKind::Nll => 15,
                LossKind::Mwer => 4,
            },
            batch_size: match loss {
                LossKind::Nll => 4,
                LossKind::Mwer => 8,
            },
            loss,
            mwer_beam: 4,
            temperature: 1.0,
            head: Head::Hat,
            hat_temperature: HatTemperature::Both,
            length_normalized_posterior: false,
            include_reference: false,
            max_symbols_per_step: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.decode_config().validate()
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            head: self.head,
            temperature: self.temperature,
            hat_temperature: self.hat_temperature,
        }
    }

    /// Search settings for N-best generation.
    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.mwer_beam,
            head: self.head,
            temperature: self.temperature,
            hat_temperature: self.hat_temperature,
            length_norm: false,
            fusion: FusionWeights::NONE,
            max_symbols_per_step: self.max_symbols_per_step,
        }
    }

    fn nbest_options(&self) -> NBestOptions {
        NBestOptions {
            length_normalized_posterior: self.length_normalized_posterior,
            ..NBestOptions::default()
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean validation value of the training criterion: NLL per utterance,
    /// or expected risk for MWER.
    pub loss: f64,
    /// Pooled token error rate of the top hypothesis on validation data.
    pub token_error: f64,
    /// Mean expected risk over validation N-best lists.
    pub expected_risk: f64,
}

pub const METRICS_HEADER: &str = "epoch,loss,token_error,expected_risk";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.loss, self.token_error, self.expected_risk
        )
    }
}

pub fn write_metrics_csv<W: std::io::Write>(mut w: W, rows: &[EpochMetrics]) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Validation summary for a parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mean_nll: f64,
    pub token_error: f64,
    pub expected_risk: f64,
}

struct UttEval {
    nll: f64,
    edits: usize,
    ref_len: usize,
    risk: f64,
}

/// Decodes one utterance; returns the distinct hypotheses (plus the
/// reference when configured) and the top-ranked token sequence.
pub fn nbest_sequences(
    params: &ToyModelParams,
    utt: &Utterance,
    config: &TrainConfig,
) -> Result<(Vec<LabelSequence>, Vec<usize>)> {
    let scorer = ModelScorer::new(params, &utt.features)?;
    let decoded = beam_search(&scorer, &config.decode_config(), None)?;
    let top1 = decoded[0].tokens.tokens().to_vec();
    let mut seqs: Vec<LabelSequence> = decoded.into_iter().map(|h| h.tokens).collect();
    if config.include_reference && !seqs.contains(&utt.labels) {
        seqs.push(utt.labels.clone());
    }
    Ok((seqs, top1))
}

/// The N-best list over a fixed hypothesis set, scored with full-lattice
/// `ln P(y|x)`, and each hypothesis's lattice loss in list order.
pub fn score_nbest(
    params: &ToyModelParams,
    utt: &Utterance,
    seqs: &[LabelSequence],
    config: &TrainConfig,
) -> Result<(NBestList, Vec<NllOutput>)> {
    let f = params.encode(&utt.features)?;
    let head = config.head_config();
    let mut outputs = Vec::with_capacity(seqs.len());
    for y in seqs {
        let lattice = params.lattice_from_parts(&f, &params.predict(y)?);
        outputs.push((y.clone(), nll_loss(&lattice, y, &head)?));
    }
    let hyps = outputs
        .iter()
        .map(|(y, o)| Hypothesis::new(y.clone(), -o.loss))
        .collect();
    let nbest = NBestList::new(hyps, utt.labels.clone(), config.nbest_options())?;
    // the list is sorted (and merged), so pair outputs up by sequence
    let ordered = nbest
        .hypotheses()
        .iter()
        .map(|h| {
            let i = outputs
                .iter()
                .position(|(y, _)| *y == h.tokens)
                .expect("hypothesis came from seqs");
            outputs[i].1.clone()
        })
        .collect();
    Ok((nbest, ordered))
}

/// Loss and parameter gradient for one utterance.
pub fn utterance_gradient(
    params: &ToyModelParams,
    utt: &Utterance,
    config: &TrainConfig,
) -> Result<(f64, ToyModelParams)> {
    match config.loss {
        LossKind::Nll => {
            let lattice = params.forward(&utt.features, &utt.labels)?;
            let out = nll_loss(&lattice, &utt.labels, &config.head_config())?;
            let grad = params.backward(&utt.features, &utt.labels, &out.grad)?;
            Ok((out.loss, grad))
        }
        LossKind::Mwer => {
            let (seqs, _) = nbest_sequences(params, utt, config)?;
            let (nbest, outputs) = score_nbest(params, utt, &seqs, config)?;
            let mwer = mwer_loss(&nbest);
            let dz: Vec<_> = outputs
                .iter()
                .zip(&mwer.dloss_dlogp)
                .map(|(o, &d)| &o.grad * -d)
                .collect();
            let items: Vec<_> = nbest
                .hypotheses()
                .iter()
                .map(|h| &h.tokens)
                .zip(&dz)
                .collect();
            let grad = params.backward_many(&utt.features, &items)?;
            Ok((mwer.loss, grad))
        }
    }
}

pub fn evaluate(
    params: &ToyModelParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let head = config.head_config();
    let rows = data
        .utterances
        .par_iter()
        .map(|utt| {
            let lattice = params.forward(&utt.features, &utt.labels)?;
            let nll = nll_loss(&lattice, &utt.labels, &head)?.loss;
            let (seqs, top1) = nbest_sequences(params, utt, config)?;
            let (nbest, _) = score_nbest(params, utt, &seqs, config)?;
            Ok(UttEval {
                nll,
                edits: word_edit_distance(&top1, utt.labels.tokens()),
                ref_len: utt.labels.len(),
                risk: nbest.expected_risk(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    let (mut nll, mut edits, mut words, mut risk) = (0.0, 0usize, 0usize, 0.0);
    for r in &rows {
        nll += r.nll;
        edits += r.edits;
        words += r.ref_len;
        risk += r.risk;
    }
    Ok(Evaluation {
        mean_nll: nll / n,
        token_error: edits as f64 / words.max(1) as f64,
        expected_risk: risk / n,
    })
}

/// Stateful trainer; one call to [`run_epoch`](Trainer::run_epoch) per epoch.
#[derive(Debug, Clone)]
pub struct Trainer {
    params: ToyModelParams,
    optimizer: Optimizer,
    config: TrainConfig,
    epoch: usize,
}

impl Trainer {
    pub fn new(params: ToyModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, &params);
        Ok(Self {
            params,
            optimizer,
            config,
            epoch: 0,
        })
    }

    /// Continues from a saved state after `epoch` completed epochs.
    pub fn resume(
        params: ToyModelParams,
        optimizer: Optimizer,
        config: TrainConfig,
        epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        if optimizer.kind() != config.optimizer {
            return Err(Error::Config(
                "saved optimizer state does not match the configured optimizer".into(),
            ));
        }
        Ok(Self {
            params,
            optimizer,
            config,
            epoch,
        })
    }

    pub fn params(&self) -> &ToyModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn into_params(self) -> ToyModelParams {
        self.params
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let stream = self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ self.epoch as u64;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
        order
    }

    /// One pass over `train` followed by validation on `valid`.
    pub fn run_epoch(&mut self, train: &Dataset, valid: &Dataset) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::EmptyInput);
        }
        let epoch = self.epoch + 1;
        let order = self.epoch_order(train.len());
        for batch in order.chunks(self.config.batch_size) {
            let params = &self.params;
            let config = &self.config;
            let results = batch
                .par_iter()
                .map(|&i| utterance_gradient(params, &train.utterances[i], config))
                .collect::<Result<Vec<_>>>()?;
            let mut total = self.params.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                total.add_scaled(g, 1.0);
            }
            if !loss.is_finite() || !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("batch loss {loss} or gradient is not finite"),
                });
            }
            self.optimizer
                .step(&mut self.params, &total, self.config.learning_rate);
            if !self.params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        self.epoch = epoch;
        let eval = evaluate(&self.params, valid, &self.config)?;
        let loss = match self.config.loss {
            LossKind::Nll => eval.mean_nll,
            LossKind::Mwer => eval.expected_risk,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation loss is {loss}"),
            });
        }
        Ok(EpochMetrics {
            epoch,
            loss,
            token_error: eval.token_error,
            expected_risk: eval.expected_risk,
        })
    }
}

/// Runs `config.epochs` epochs from scratch.
pub fn train(
    params: ToyModelParams,
    train: &Dataset,
    valid: &Dataset,
    config: &TrainConfig,
) -> Result<(ToyModelParams, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(params, config.clone())?;
    let mut metrics = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        metrics.push(trainer.run_epoch(train, valid)?);
    }
    Ok((trainer.into_params(), metrics))
}
