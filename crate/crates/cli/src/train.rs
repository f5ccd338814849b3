use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use transducer::lattice::Head;
use transducer::model::checkpoint::Checkpoint;
use transducer::model::optim::OptimizerKind;
use transducer::model::train::{EpochMetrics, LossKind, TrainConfig, Trainer, METRICS_HEADER};
use transducer::model::{ModelDims, ToyModelParams};
use transducer::Error as CoreError;

use crate::config;
use crate::gen_data::DataManifest;
use crate::{Common, UsageError};

pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `gen-data`; trains on `train`, validates on `dev`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory; also receives metrics.csv and config.toml.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    head: Option<Head>,
    /// Output-head temperature used in the training loss.
    #[arg(long)]
    temperature: Option<f64>,
    /// Beam for the N-best lists used by MWER and validation.
    #[arg(long)]
    mwer_beam: Option<usize>,
    /// Add the reference to every MWER N-best list.
    #[arg(long)]
    include_ref: bool,
    /// Compute N-best posteriors from length-normalized scores.
    #[arg(long)]
    length_normalized_posterior: bool,
    /// Recurrent layer width for a fresh model.
    #[arg(long)]
    hidden: Option<usize>,
    /// Label embedding width for a fresh model.
    #[arg(long)]
    embedding: Option<usize>,
    /// Start from this checkpoint's parameters with a fresh optimizer.
    #[arg(long, conflicts_with = "resume")]
    seed_checkpoint: Option<PathBuf>,
    /// Continue an interrupted run, including its optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: usize,
    pub embedding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub model: ModelShape,
    pub train: TrainConfig,
}

fn resolve(args: &TrainArgs, resumed: Option<&Checkpoint>) -> anyhow::Result<TrainRunConfig> {
    let file = args
        .common
        .config
        .as_deref()
        .map(config::read_file)
        .transpose()?;
    let file_loss = config::lookup(file.as_ref(), &["train", "loss"])
        .and_then(|v| v.as_str())
        .map(str::parse::<LossKind>)
        .transpose()
        .map_err(|e| UsageError(e.to_string()))?;
    let saved = resumed.and_then(|c| c.train_config.clone());
    let loss = args
        .loss
        .or(file_loss)
        .or(saved.as_ref().map(|t| t.loss))
        .unwrap_or_default();
    let synth_shape = ModelDims::for_synth(1);
    let defaults = TrainRunConfig {
        seed_checkpoint: None,
        resume: None,
        model: ModelShape {
            hidden: synth_shape.encoder_hidden,
            embedding: synth_shape.embedding,
        },
        train: saved.unwrap_or_else(|| TrainConfig::for_loss(loss)),
    };
    let mut c = config::resolve(&defaults, file)?;
    let t = &mut c.train;
    t.loss = loss;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.optimizer {
        t.optimizer = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.head {
        t.head = v;
    }
    if let Some(v) = args.temperature {
        t.temperature = v;
    }
    if let Some(v) = args.mwer_beam {
        t.mwer_beam = v;
    }
    t.include_reference |= args.include_ref;
    t.length_normalized_posterior |= args.length_normalized_posterior;
    if let Some(v) = args.hidden {
        c.model.hidden = v;
    }
    if let Some(v) = args.embedding {
        c.model.embedding = v;
    }
    if args.seed_checkpoint.is_some() {
        c.seed_checkpoint = args.seed_checkpoint.clone();
    }
    if args.resume.is_some() {
        c.resume = args.resume.clone();
    }
    c.train.validate()?;
    Ok(c)
}

/// Rows of an earlier metrics file up to and including `epoch`, verbatim.
fn earlier_rows(dir: &Path, epoch: usize) -> anyhow::Result<Vec<String>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|line| {
            line.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch)
        })
        .map(str::to_owned)
        .collect())
}

fn write_metrics(dir: &Path, rows: &[String]) -> anyhow::Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text += r;
        text.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), text)?;
    Ok(())
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let resumed = args
        .resume
        .as_deref()
        .map(|dir| {
            Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
        })
        .transpose()?;
    let c = resolve(&args, resumed.as_ref())?;
    let manifest = DataManifest::load(&args.data)?;
    let train_set = manifest.load_split(&args.data, "train")?;
    let dev = manifest.load_split(&args.data, "dev")?;

    let (mut trainer, mut rows) = match (resumed, &c.seed_checkpoint) {
        (Some(ckpt), _) => {
            let optimizer = ckpt.optimizer.ok_or_else(|| {
                UsageError("checkpoint has no optimizer state to resume from".into())
            })?;
            let rows = earlier_rows(args.resume.as_deref().expect("resume set"), ckpt.epoch)?;
            (
                Trainer::resume(ckpt.params, optimizer, c.train.clone(), ckpt.epoch)?,
                rows,
            )
        }
        (None, Some(dir)) => {
            let seed = Checkpoint::load(dir)
                .with_context(|| format!("loading seed model {}", dir.display()))?;
            (Trainer::new(seed.params, c.train.clone())?, Vec::new())
        }
        (None, None) => {
            if c.train.loss == LossKind::Mwer {
                return Err(CoreError::MissingSeedModel.into());
            }
            let dims = ModelDims {
                input: manifest.feature_dim,
                encoder_hidden: c.model.hidden,
                predictor_hidden: c.model.hidden,
                embedding: c.model.embedding,
                vocab_size: manifest.vocab_size,
            };
            (
                Trainer::new(ToyModelParams::init(dims, c.train.seed)?, c.train.clone())?,
                Vec::new(),
            )
        }
    };
    if trainer.params().dims().input != manifest.feature_dim
        || trainer.params().vocab() != manifest.vocab()?
    {
        return Err(
            UsageError("model and dataset disagree on feature or vocabulary size".into()).into(),
        );
    }

    fs::create_dir_all(&args.out)?;
    config::echo(&args.out, &c)?;
    // The checkpoint and metrics are rewritten after every epoch so an
    // interrupted run can be resumed from the output directory.
    let save = |trainer: &Trainer, rows: &[String]| -> anyhow::Result<()> {
        Checkpoint {
            params: trainer.params().clone(),
            head: c.train.head_config(),
            seed: c.train.seed,
            epoch: trainer.epoch(),
            optimizer: Some(trainer.optimizer().clone()),
            train_config: Some(c.train.clone()),
        }
        .save(&args.out)?;
        write_metrics(&args.out, rows)
    };
    if trainer.epoch() >= c.train.epochs {
        save(&trainer, &rows)?;
    }
    while trainer.epoch() < c.train.epochs {
        let m: EpochMetrics = trainer.run_epoch(&train_set, &dev)?;
        println!("{}", m.csv_row());
        rows.push(m.csv_row());
        save(&trainer, &rows)?;
    }
    Ok(())
}
