use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use transducer::decoder::DecodeConfig;
use transducer::evalkit::{align, decode_dataset, write_decode_csv, DecodeRow, WerReport};
use transducer::lattice::{Head, Vocab};
use transducer::lm::{LanguageModel, TableLm};
use transducer::model::checkpoint::Checkpoint;
use transducer::model::synth::Dataset;
use transducer::mwer::{write_nbest_records, HypothesisRecord, NBestRecord};

use crate::config;
use crate::gen_data::{read_dataset, read_lm, DataManifest};
use crate::{Common, UsageError};

pub const DECODE_FILE: &str = "decode.csv";
pub const NBEST_FILE: &str = "nbest.jsonl";

pub fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off, got `{s}`")),
    }
}

/// Where to read utterances from.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// A dataset JSONL file, or a `gen-data` directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to use when `--data` is a directory.
    #[arg(long, default_value = "eval")]
    pub split: String,
}

impl DataArgs {
    pub fn load(&self, vocab: Vocab) -> anyhow::Result<Dataset> {
        if self.data.is_dir() {
            let manifest = DataManifest::load(&self.data)?;
            if manifest.vocab()? != vocab {
                return Err(
                    UsageError("dataset vocabulary does not match the model".into()).into(),
                );
            }
            manifest.load_split(&self.data, &self.split)
        } else {
            read_dataset(&self.data, vocab)
        }
    }
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    /// Output-head temperature Z.
    #[arg(long)]
    temperature: Option<f64>,
    /// Rank final hypotheses by score per token (on/off).
    #[arg(long, value_parser = parse_switch)]
    length_norm: Option<bool>,
    /// Internal-LM weight.
    #[arg(long)]
    lambda1: Option<f64>,
    /// External-LM weight.
    #[arg(long)]
    lambda2: Option<f64>,
    /// External LM file.
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    head: Option<Head>,
    #[arg(long)]
    max_symbols_per_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
    pub decode: DecodeConfig,
}

/// Decoding defaults that follow the checkpoint's output head.
pub fn checkpoint_defaults(ckpt: &Checkpoint) -> DecodeConfig {
    DecodeConfig {
        head: ckpt.head.head,
        hat_temperature: ckpt.head.hat_temperature,
        ..DecodeConfig::default()
    }
}

/// Loads the external LM and checks it can be used with `vocab`.
pub fn load_lm(
    path: Option<&Path>,
    vocab: Vocab,
    needs_lm: bool,
) -> anyhow::Result<Option<TableLm>> {
    let lm = path.map(read_lm).transpose()?;
    match &lm {
        Some(lm) if lm.vocab() != vocab => Err(UsageError(format!(
            "LM vocabulary ({}) does not match the model ({})",
            lm.vocab().size(),
            vocab.size()
        ))
        .into()),
        None if needs_lm => Err(UsageError("a non-zero LM weight needs --lm".into()).into()),
        _ => Ok(lm),
    }
}

fn resolve(args: &DecodeArgs, ckpt: &Checkpoint) -> anyhow::Result<DecodeRunConfig> {
    let file = args
        .common
        .config
        .as_deref()
        .map(config::read_file)
        .transpose()?;
    let defaults = DecodeRunConfig {
        lm: None,
        decode: checkpoint_defaults(ckpt),
    };
    let mut c = config::resolve(&defaults, file)?;
    let d = &mut c.decode;
    if let Some(v) = args.beam {
        d.beam_size = v;
    }
    if let Some(v) = args.temperature {
        d.temperature = v;
    }
    if let Some(v) = args.length_norm {
        d.length_norm = v;
    }
    if let Some(v) = args.lambda1 {
        d.fusion.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        d.fusion.lambda2 = v;
    }
    if let Some(v) = args.head {
        d.head = v;
    }
    if let Some(v) = args.max_symbols_per_step {
        d.max_symbols_per_step = v;
    }
    if args.lm.is_some() {
        c.lm = args.lm.clone();
    }
    c.decode.validate()?;
    Ok(c)
}

pub fn run(args: DecodeArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let c = resolve(&args, &ckpt)?;
    let vocab = ckpt.params.vocab();
    let lm = load_lm(c.lm.as_deref(), vocab, c.decode.fusion.lambda2 > 0.0)?;
    let data = args.data.load(vocab)?;

    let decoded = decode_dataset(
        &ckpt.params,
        &data,
        &c.decode,
        lm.as_ref().map(|l| l as &dyn LanguageModel),
    )?;
    let mut rows = Vec::with_capacity(data.len());
    let mut records = Vec::with_capacity(data.len());
    for (utt, hyps) in data.utterances.iter().zip(&decoded) {
        let top1 = hyps[0].tokens.tokens().to_vec();
        rows.push(DecodeRow {
            utt_id: utt.id.clone(),
            config: c.decode,
            report: align(&top1, utt.labels.tokens()),
            top1,
        });
        records.push(NBestRecord {
            utt_id: utt.id.clone(),
            reference: utt.labels.tokens().to_vec(),
            hypotheses: hyps
                .iter()
                .map(|h| HypothesisRecord {
                    tokens: h.tokens.tokens().to_vec(),
                    log_prob: h.log_prob,
                })
                .collect(),
        });
    }

    fs::create_dir_all(&args.out)?;
    config::echo(&args.out, &c)?;
    let mut w = BufWriter::new(File::create(args.out.join(DECODE_FILE))?);
    write_decode_csv(&mut w, &rows)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(args.out.join(NBEST_FILE))?);
    write_nbest_records(&mut w, &records)?;
    w.flush()?;

    let total = rows
        .iter()
        .fold(WerReport::default(), |acc, r| acc + r.report);
    println!(
        "WER {:.4} (S={} I={} D={} N={}) over {} utterances",
        total.wer(),
        total.substitutions,
        total.insertions,
        total.deletions,
        total.reference_words,
        rows.len()
    );
    Ok(())
}
