use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use transducer::lattice::Vocab;
use transducer::lm::{LanguageModel, TableLm};
use transducer::model::synth::{synth_task_with, Dataset, DatasetManifest, SynthConfig};

use crate::config;
use crate::{Common, UsageError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATED_LM_FILE: &str = "lm.txt";
pub const SPLITS: [&str; 3] = ["train", "dev", "eval"];

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Training utterances.
    #[arg(long)]
    num_utts: Option<usize>,
    #[arg(long)]
    dev_utts: Option<usize>,
    #[arg(long)]
    eval_utts: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    min_labels: Option<usize>,
    #[arg(long)]
    max_labels: Option<usize>,
    /// Noise standard deviation on the class dimensions.
    #[arg(long)]
    noise_level: Option<f64>,
    /// Noise standard deviation on the onset flag.
    #[arg(long)]
    onset_noise: Option<f64>,
    /// Sample label sequences from this LM file instead of uniformly.
    #[arg(long, conflicts_with = "random_lm_sharpness")]
    label_lm: Option<PathBuf>,
    /// Draw a random bigram LM with this sharpness, write it next to the
    /// data and sample label sequences from it.
    #[arg(long)]
    random_lm_sharpness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub dev_utts: usize,
    pub eval_utts: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_lm: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_lm_sharpness: Option<f64>,
    pub synth: SynthConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dev_utts: 300,
            eval_utts: 300,
            label_lm: None,
            random_lm_sharpness: None,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub file: String,
    #[serde(flatten)]
    pub dataset: DatasetManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// `uniform`, or the file the labels were sampled from.
    pub label_source: String,
    pub splits: BTreeMap<String, SplitEntry>,
}

impl DataManifest {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text =
            fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn vocab(&self) -> anyhow::Result<Vocab> {
        Ok(Vocab::new(self.vocab_size)?)
    }

    pub fn load_split(&self, dir: &Path, name: &str) -> anyhow::Result<Dataset> {
        let entry = self
            .splits
            .get(name)
            .ok_or_else(|| UsageError(format!("dataset has no `{name}` split")))?;
        read_dataset(&dir.join(&entry.file), self.vocab()?)
    }
}

pub fn read_dataset(path: &Path, vocab: Vocab) -> anyhow::Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_jsonl(BufReader::new(file), vocab)
        .with_context(|| format!("reading {}", path.display()))
}

pub fn read_lm(path: &Path) -> anyhow::Result<TableLm> {
    let file = File::open(path).with_context(|| format!("opening LM {}", path.display()))?;
    TableLm::read(BufReader::new(file)).with_context(|| format!("reading LM {}", path.display()))
}

fn split_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index)
}

fn resolve(args: &GenDataArgs) -> anyhow::Result<GenDataConfig> {
    let file = args
        .common
        .config
        .as_deref()
        .map(config::read_file)
        .transpose()?;
    let mut c = config::resolve(&GenDataConfig::default(), file)?;
    let s = &mut c.synth;
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.num_utts {
        s.num_utts = v;
    }
    if let Some(v) = args.dev_utts {
        c.dev_utts = v;
    }
    if let Some(v) = args.eval_utts {
        c.eval_utts = v;
    }
    if let Some(v) = args.vocab_size {
        s.vocab_size = v;
    }
    s.frames =
        args.min_frames.unwrap_or(*s.frames.start())..=args.max_frames.unwrap_or(*s.frames.end());
    s.labels =
        args.min_labels.unwrap_or(*s.labels.start())..=args.max_labels.unwrap_or(*s.labels.end());
    if let Some(v) = args.noise_level {
        s.noise_level = v;
    }
    if let Some(v) = args.onset_noise {
        s.onset_noise = v;
    }
    if args.label_lm.is_some() {
        c.label_lm = args.label_lm.clone();
    }
    if args.random_lm_sharpness.is_some() {
        c.random_lm_sharpness = args.random_lm_sharpness;
    }
    if c.label_lm.is_some() && c.random_lm_sharpness.is_some() {
        return Err(
            UsageError("label_lm and random_lm_sharpness are mutually exclusive".into()).into(),
        );
    }
    Ok(c)
}

pub fn run(args: GenDataArgs) -> anyhow::Result<()> {
    let c = resolve(&args)?;
    let vocab = c.synth.validate()?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let (source, label_source) = if let Some(path) = &c.label_lm {
        let lm = read_lm(path)?;
        if lm.vocab() != vocab {
            return Err(UsageError(format!(
                "label LM has {} labels but the task has {}",
                lm.vocab().size(),
                vocab.size()
            ))
            .into());
        }
        (lm, path.display().to_string())
    } else if let Some(sharpness) = c.random_lm_sharpness {
        if !(sharpness >= 0.0 && sharpness.is_finite()) {
            return Err(UsageError(format!(
                "LM sharpness {sharpness} must be finite and non-negative"
            ))
            .into());
        }
        let lm = TableLm::random(
            2,
            vocab,
            sharpness,
            &mut ChaCha8Rng::seed_from_u64(split_seed(c.seed, 99)),
        );
        let mut w = BufWriter::new(File::create(args.out.join(GENERATED_LM_FILE))?);
        lm.write(&mut w)?;
        w.flush()?;
        (lm, GENERATED_LM_FILE.to_string())
    } else {
        (TableLm::uniform(vocab), "uniform".to_string())
    };

    let mut splits = BTreeMap::new();
    for (i, (name, n)) in SPLITS
        .iter()
        .zip([c.synth.num_utts, c.dev_utts, c.eval_utts])
        .enumerate()
    {
        let seed = split_seed(c.seed, i as u64);
        let cfg = SynthConfig {
            num_utts: n,
            ..c.synth.clone()
        };
        let data = synth_task_with(seed, &cfg, &source)?;
        let file = format!("{name}.jsonl");
        let mut w = BufWriter::new(File::create(args.out.join(&file))?);
        data.write_jsonl(&mut w)?;
        w.flush()?;
        splits.insert(
            name.to_string(),
            SplitEntry {
                file,
                dataset: DatasetManifest {
                    seed,
                    feature_dim: cfg.feature_dim(),
                    num_utts: n,
                    config: cfg,
                },
            },
        );
    }
    let manifest = DataManifest {
        vocab_size: vocab.size(),
        feature_dim: c.synth.feature_dim(),
        label_source,
        splits,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(args.out.join(MANIFEST_FILE), text)?;
    config::echo(&args.out, &c)?;
    println!(
        "wrote {} train / {} dev / {} eval utterances to {}",
        c.synth.num_utts,
        c.dev_utts,
        c.eval_utts,
        args.out.display()
    );
    Ok(())
}
