//! Named oracle checks runnable from a release binary.
//!
//! Every check draws its own seeded instances, compares an implementation
//! against an independent oracle and reports the worst deviation next to
//! its tolerance.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{beam_search, DecodeConfig, FusionWeights, TransducerScorer};
use crate::error::Result;
use crate::fixtures::{random_labels, random_lattice};
use crate::gradcheck::{central_difference, max_relative_error, DEFAULT_EPSILON};
use crate::hat::{hat_step_distribution, HatTemperature};
use crate::lattice::{alignment_oracle, forward_backward, nll_loss, Head, HeadConfig, Vocab};
use crate::lm::TableLm;
use crate::model::synth::{feature_dim, Utterance};
use crate::model::train::{nbest_sequences, score_nbest, LossKind, TrainConfig};
use crate::model::{numeric_gradient, FeatureSequence, ModelDims, ModelScorer, ToyModelParams};
use crate::mwer::{mwer_loss, nbest_posterior, Hypothesis, NBestList, NBestOptions};
use crate::numerics::log_softmax;

/// Faults a test can inject to prove the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Perturbs every analytic gradient before it is compared.
    CorruptGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Random instances per check, before each check's `scale`.
    pub instances: usize,
    pub fault: Option<Fault>,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 500,
            fault: None,
        }
    }
}

pub struct Check {
    pub name: &'static str,
    pub description: &'static str,
    pub tolerance: f64,
    /// Expensive checks run one instance per `scale` requested.
    pub scale: usize,
    run: fn(&SelfcheckOptions) -> Result<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub description: &'static str,
    pub tolerance: f64,
    /// Worst deviation observed, or the error that stopped the check.
    pub measured: std::result::Result<f64, String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        matches!(self.measured, Ok(v) if v <= self.tolerance)
    }
}

pub const CHECKS: &[Check] = &[
    Check {
        name: "forward_matches_alignment_enumeration",
        description: "forward log-likelihood equals brute-force path sum",
        tolerance: 1e-10,
        scale: 1,
        run: forward_vs_enumeration,
    },
    Check {
        name: "alpha_beta_agree",
        description: "backward recursion reaches the forward log-likelihood",
        tolerance: 1e-10,
        scale: 1,
        run: alpha_beta_agree,
    },
    Check {
        name: "nll_logit_gradient_rnnt",
        description: "rnnt NLL gradient w.r.t. joint logits vs finite differences",
        tolerance: 1e-4,
        scale: 5,
        run: |o| nll_logit_gradient(o, HeadConfig::rnnt()),
    },
    Check {
        name: "nll_logit_gradient_hat",
        description: "hat NLL gradient w.r.t. joint logits vs finite differences",
        tolerance: 1e-4,
        scale: 5,
        run: |o| nll_logit_gradient(o, HeadConfig::hat().with_temperature(1.5)),
    },
    Check {
        name: "nll_parameter_gradient_rnnt",
        description: "rnnt NLL gradient w.r.t. model parameters vs finite differences",
        tolerance: 1e-4,
        scale: 20,
        run: |o| parameter_gradient(o, Head::Rnnt, LossKind::Nll),
    },
    Check {
        name: "nll_parameter_gradient_hat",
        description: "hat NLL gradient w.r.t. model parameters vs finite differences",
        tolerance: 1e-4,
        scale: 20,
        run: |o| parameter_gradient(o, Head::Hat, LossKind::Nll),
    },
    Check {
        name: "mwer_parameter_gradient_rnnt",
        description: "rnnt MWER gradient through lattices to parameters vs finite differences",
        tolerance: 1e-4,
        scale: 20,
        run: |o| parameter_gradient(o, Head::Rnnt, LossKind::Mwer),
    },
    Check {
        name: "mwer_parameter_gradient_hat",
        description: "hat MWER gradient through lattices to parameters vs finite differences",
        tolerance: 1e-4,
        scale: 20,
        run: |o| parameter_gradient(o, Head::Hat, LossKind::Mwer),
    },
    Check {
        name: "hat_distribution_normalized",
        description: "hat per-cell distribution sums to one",
        tolerance: 1e-12,
        scale: 1,
        run: hat_normalized,
    },
    Check {
        name: "internal_lm_normalized",
        description: "internal LM per-step distribution sums to one",
        tolerance: 1e-10,
        scale: 10,
        run: internal_lm_normalized,
    },
    Check {
        name: "nbest_posteriors_normalized",
        description: "N-best posteriors sum to one",
        tolerance: 1e-10,
        scale: 1,
        run: nbest_normalized,
    },
    Check {
        name: "mwer_gradient_zero_sum",
        description: "per-hypothesis MWER gradients sum to zero",
        tolerance: 1e-10,
        scale: 1,
        run: mwer_zero_sum,
    },
    Check {
        name: "internal_lm_ignores_acoustics",
        description: "internal LM logits identical for two acoustic inputs",
        tolerance: 0.0,
        scale: 10,
        run: ilm_acoustic_invariance,
    },
    Check {
        name: "zero_fusion_weights_reduce_to_plain_decoding",
        description: "decoding with an LM at weights (0, 0) equals decoding without one",
        tolerance: 0.0,
        scale: 10,
        run: zero_fusion_reduces,
    },
];

impl Check {
    /// Instances actually drawn when `requested` are asked for.
    pub fn instances(&self, requested: usize) -> usize {
        (requested / self.scale).max(1)
    }
}

pub fn run_check(check: &Check, options: &SelfcheckOptions) -> CheckOutcome {
    let options = &SelfcheckOptions {
        instances: check.instances(options.instances),
        ..*options
    };
    CheckOutcome {
        name: check.name,
        description: check.description,
        tolerance: check.tolerance,
        measured: (check.run)(options).map_err(|e| e.to_string()),
    }
}

pub fn run_all(options: &SelfcheckOptions) -> Vec<CheckOutcome> {
    CHECKS.iter().map(|c| run_check(c, options)).collect()
}

/// Fixed-width table, one row per check.
pub fn render_report(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for o in outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        let measured = match &o.measured {
            Ok(v) => format!("{v:.3e}"),
            Err(e) => format!("error: {e}"),
        };
        out += &format!(
            "{status}  {:<width$}  max_dev={measured:<10}  tol={:.0e}  {}\n",
            o.name, o.tolerance, o.description
        );
    }
    out
}

fn rng(options: &SelfcheckOptions, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt)
}

fn corrupt(options: &SelfcheckOptions, grad: &mut [f64]) {
    if options.fault == Some(Fault::CorruptGradient) {
        grad.iter_mut().for_each(|g| *g *= 1.01);
        if let Some(g) = grad.first_mut() {
            *g += 1e-3;
        }
    }
}

/// A random lattice shape with `T + U ≤ 12` and `|V| ≤ 5`.
fn random_shape(rng: &mut ChaCha8Rng) -> (usize, usize, Vocab) {
    let frames = rng.random_range(1..=8);
    let label_len = rng.random_range(0..=(12 - frames).min(4));
    let vocab = Vocab::new(rng.random_range(1..=5)).expect("non-empty vocabulary");
    (frames, label_len, vocab)
}

fn heads(i: usize) -> HeadConfig {
    match i % 3 {
        0 => HeadConfig::rnnt(),
        1 => HeadConfig::hat(),
        _ => HeadConfig::new(Head::Hat, 0.7),
    }
}

fn forward_vs_enumeration(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 1);
    let mut worst: f64 = 0.0;
    for i in 0..o.instances {
        let (frames, u, vocab) = random_shape(&mut rng);
        let lattice = random_lattice(&mut rng, frames, u, vocab.extended_size(), 2.0);
        let labels = random_labels(&mut rng, u, &vocab);
        let grid = heads(i).grid(&lattice)?;
        let ll = forward_backward(&grid, &labels)?.log_likelihood;
        worst = worst.max((ll - alignment_oracle(&grid, &labels)?).abs());
    }
    Ok(worst)
}

fn alpha_beta_agree(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 2);
    let mut worst: f64 = 0.0;
    for i in 0..o.instances {
        let (frames, u, vocab) = random_shape(&mut rng);
        let lattice = random_lattice(&mut rng, frames, u, vocab.extended_size(), 2.0);
        let labels = random_labels(&mut rng, u, &vocab);
        let tableau = forward_backward(&heads(i).grid(&lattice)?, &labels)?;
        worst = worst.max((tableau.log_beta[[0, 0]] - tableau.log_likelihood).abs());
    }
    Ok(worst)
}

fn nll_logit_gradient(o: &SelfcheckOptions, head: HeadConfig) -> Result<f64> {
    let mut rng = rng(o, 3);
    let mut worst: f64 = 0.0;
    for _ in 0..o.instances {
        let (frames, u, vocab) = random_shape(&mut rng);
        let lattice = random_lattice(&mut rng, frames, u, vocab.extended_size(), 1.5);
        let labels = random_labels(&mut rng, u, &vocab);
        let mut analytic = nll_loss(&lattice, &labels, &head)?
            .grad
            .into_raw_vec_and_offset()
            .0;
        corrupt(o, &mut analytic);
        let shape = lattice.logits().raw_dim();
        let flat = lattice.logits().iter().copied().collect::<Vec<_>>();
        let numeric = central_difference(&flat, DEFAULT_EPSILON, |z| {
            let probe = crate::lattice::JointLattice::new(
                ndarray::Array3::from_shape_vec(shape, z.to_vec()).expect("same shape"),
            );
            nll_loss(&probe, &labels, &head)
                .map(|out| out.loss)
                .unwrap_or(f64::NAN)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn small_model(rng: &mut ChaCha8Rng, vocab_size: usize) -> Result<ToyModelParams> {
    let dims = ModelDims {
        input: feature_dim(vocab_size),
        encoder_hidden: 4,
        predictor_hidden: 4,
        embedding: 3,
        vocab_size,
    };
    let mut p = ToyModelParams::init(dims, rng.random())?;
    for (_, mut t) in p.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    Ok(p)
}

fn random_features(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Result<FeatureSequence> {
    FeatureSequence::new(Array2::from_shape_simple_fn((frames, dim), || {
        rng.random_range(-1.0..1.0)
    }))
}

fn parameter_gradient(o: &SelfcheckOptions, head: Head, loss: LossKind) -> Result<f64> {
    let mut rng = rng(o, 4 + head as u64 * 2 + loss as u64);
    let mut worst: f64 = 0.0;
    for i in 0..o.instances {
        let vocab_size = 3;
        let p = small_model(&mut rng, vocab_size)?;
        let frames = rng.random_range(3..=5);
        let vocab = p.vocab();
        let len = rng.random_range(1..=2);
        let labels = random_labels(&mut rng, len, &vocab);
        let utt = Utterance {
            id: String::new(),
            labels,
            frame_classes: vec![0; frames],
            features: random_features(&mut rng, frames, p.dims().input)?,
        };
        let config = TrainConfig {
            loss,
            head,
            length_normalized_posterior: i % 2 == 1,
            ..TrainConfig::for_loss(loss)
        };
        let (analytic, numeric) = match loss {
            LossKind::Nll => {
                let hc = config.head_config();
                let out = nll_loss(&p.forward(&utt.features, &utt.labels)?, &utt.labels, &hc)?;
                let analytic = p.backward(&utt.features, &utt.labels, &out.grad)?;
                let numeric = numeric_gradient(&p, DEFAULT_EPSILON, |q| {
                    q.forward(&utt.features, &utt.labels)
                        .and_then(|l| nll_loss(&l, &utt.labels, &hc))
                        .map(|out| out.loss)
                        .unwrap_or(f64::NAN)
                });
                (analytic, numeric)
            }
            LossKind::Mwer => {
                // The N-best list is held fixed; only its scores move.
                let (seqs, _) = nbest_sequences(&p, &utt, &config)?;
                let (nbest, _) = score_nbest(&p, &utt, &seqs, &config)?;
                let hc = config.head_config();
                let lattices = nbest
                    .hypotheses()
                    .iter()
                    .map(|h| p.forward(&utt.features, &h.tokens))
                    .collect::<Result<Vec<_>>>()?;
                let dz = crate::mwer::mwer_backprop_to_lattice(&nbest, &lattices, &hc)?;
                let pairs: Vec<_> = nbest
                    .hypotheses()
                    .iter()
                    .map(|h| &h.tokens)
                    .zip(dz.iter())
                    .collect();
                let analytic = p.backward_many(&utt.features, &pairs)?;
                let numeric = numeric_gradient(&p, DEFAULT_EPSILON, |q| {
                    score_nbest(q, &utt, &seqs, &config)
                        .map(|(list, _)| mwer_loss(&list).loss)
                        .unwrap_or(f64::NAN)
                });
                (analytic, numeric)
            }
        };
        let mut analytic = analytic.flatten();
        corrupt(o, &mut analytic);
        worst = worst.max(max_relative_error(&analytic, &numeric.flatten()));
    }
    Ok(worst)
}

fn hat_normalized(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 10);
    let mut worst: f64 = 0.0;
    for i in 0..o.instances {
        let vocab = Vocab::new(rng.random_range(1..=8))?;
        let cell: Vec<f64> = (0..vocab.extended_size())
            .map(|_| rng.random_range(-20.0..20.0))
            .collect();
        let temperature = rng.random_range(0.3..3.0);
        let mode = if i % 2 == 0 {
            HatTemperature::Both
        } else {
            HatTemperature::LabelsOnly
        };
        let dist = hat_step_distribution(&cell, &vocab, temperature, mode)?;
        let total: f64 = dist.to_step_distribution().probs().iter().sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok(worst)
}

fn internal_lm_normalized(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..o.instances {
        let vocab_size = rng.random_range(1..=5);
        let p = small_model(&mut rng, vocab_size)?;
        let labels = random_labels(&mut rng, 4, &p.vocab());
        let g = p.predict(&labels)?;
        for row in g.outer_iter() {
            let logits = p.ilm_logits(row);
            let total: f64 = log_softmax(&logits[1..], 1.0)?
                .iter()
                .map(|lp| lp.exp())
                .sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    Ok(worst)
}

fn random_nbest(rng: &mut ChaCha8Rng, lnp: bool) -> Result<NBestList> {
    let vocab = Vocab::new(4)?;
    let n = rng.random_range(1..=6);
    let hyps = (0..n)
        .map(|_| {
            let len = rng.random_range(0..=5);
            Hypothesis::new(
                random_labels(rng, len, &vocab),
                rng.random_range(-30.0..0.0),
            )
        })
        .collect();
    let len = rng.random_range(1..=5);
    let reference = random_labels(rng, len, &vocab);
    NBestList::new(
        hyps,
        reference,
        NBestOptions {
            length_normalized_posterior: lnp,
            ..NBestOptions::default()
        },
    )
}

fn nbest_normalized(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 12);
    let mut worst: f64 = 0.0;
    for i in 0..o.instances {
        let list = random_nbest(&mut rng, i % 2 == 1)?;
        worst = worst.max((list.posteriors().iter().sum::<f64>() - 1.0).abs());
        let raw: Vec<f64> = (0..rng.random_range(1..=8))
            .map(|_| rng.random_range(-800.0..0.0))
            .collect();
        worst = worst.max((nbest_posterior(&raw)?.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}

fn mwer_zero_sum(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 13);
    let mut worst: f64 = 0.0;
    for _ in 0..o.instances {
        let list = random_nbest(&mut rng, false)?;
        let mut grad = mwer_loss(&list).dloss_dlogp;
        corrupt(o, &mut grad);
        worst = worst.max(grad.iter().sum::<f64>().abs());
    }
    Ok(worst)
}

fn ilm_acoustic_invariance(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 14);
    let mut worst: f64 = 0.0;
    for _ in 0..o.instances {
        let p = small_model(&mut rng, 4)?;
        let xa = random_features(&mut rng, 5, p.dims().input)?;
        let xb = random_features(&mut rng, 7, p.dims().input)?;
        let (a, b) = (ModelScorer::new(&p, &xa)?, ModelScorer::new(&p, &xb)?);
        let (mut sa, mut sb) = (a.initial_state(), b.initial_state());
        for k in random_labels(&mut rng, 5, &p.vocab()).into_tokens() {
            let (la, lb) = (a.ilm_logits(&sa), b.ilm_logits(&sb));
            for (x, y) in la.iter().zip(&lb) {
                if x.to_bits() != y.to_bits() {
                    worst = worst.max((x - y).abs().max(f64::MIN_POSITIVE));
                }
            }
            sa = a.advance(&sa, k);
            sb = b.advance(&sb, k);
        }
    }
    Ok(worst)
}

fn zero_fusion_reduces(o: &SelfcheckOptions) -> Result<f64> {
    let mut rng = rng(o, 15);
    let mut mismatches = 0usize;
    for _ in 0..o.instances {
        let p = small_model(&mut rng, 3)?;
        let lm = TableLm::random(2, p.vocab(), 1.0, &mut rng);
        let frames = rng.random_range(3..=8);
        let x = random_features(&mut rng, frames, p.dims().input)?;
        let scorer = ModelScorer::new(&p, &x)?;
        let config = DecodeConfig {
            beam_size: 4,
            fusion: FusionWeights::NONE,
            ..DecodeConfig::default()
        };
        let plain = beam_search(&scorer, &config, None)?;
        let fused = beam_search(&scorer, &config, Some(&lm))?;
        let same = plain.len() == fused.len()
            && plain.iter().zip(&fused).all(|(a, b)| {
                a.tokens == b.tokens
                    && a.score.to_bits() == b.score.to_bits()
                    && a.log_prob.to_bits() == b.log_prob.to_bits()
            });
        mismatches += usize::from(!same);
    }
    Ok(mismatches as f64)
}
