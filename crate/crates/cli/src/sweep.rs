use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use transducer::decoder::DecodeConfig;
use transducer::evalkit::{
    beam_curves, pick_lambda, render_wer_vs_beam_svg, run_sweep, write_sweep_csv, SweepGrid,
};
use transducer::lattice::Head;
use transducer::lm::LanguageModel;
use transducer::model::checkpoint::Checkpoint;

use crate::config;
use crate::decode::{checkpoint_defaults, load_lm, parse_switch, DataArgs};
use crate::{Common, UsageError};

pub const PLOT_FILE: &str = "wer_vs_beam.svg";

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint directory; repeat to put several models on one plot.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    beams: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    temperatures: Option<Vec<f64>>,
    /// Length-normalization settings, e.g. `on,off`.
    #[arg(long, value_delimiter = ',', value_parser = parse_switch)]
    length_norm: Option<Vec<bool>>,
    #[arg(long, value_delimiter = ',')]
    lambda1: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    lambda2: Option<Vec<f64>>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long)]
    head: Option<Head>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm: Option<PathBuf>,
    /// Settings shared by every grid point.
    pub base: DecodeConfig,
    pub grid: SweepGrid,
}

fn resolve(args: &SweepArgs, first: &Checkpoint) -> anyhow::Result<SweepRunConfig> {
    let file = args
        .common
        .config
        .as_deref()
        .map(config::read_file)
        .transpose()?;
    let defaults = SweepRunConfig {
        lm: None,
        base: checkpoint_defaults(first),
        grid: SweepGrid::default(),
    };
    let mut c = config::resolve(&defaults, file)?;
    let g = &mut c.grid;
    if let Some(v) = &args.beams {
        g.beams = v.clone();
    }
    if let Some(v) = &args.temperatures {
        g.temperatures = v.clone();
    }
    if let Some(v) = &args.length_norm {
        g.length_norm = v.clone();
    }
    if let Some(v) = &args.lambda1 {
        g.lambda1s = v.clone();
    }
    if let Some(v) = &args.lambda2 {
        g.lambda2s = v.clone();
    }
    if let Some(v) = args.head {
        c.base.head = v;
    }
    if args.lm.is_some() {
        c.lm = args.lm.clone();
    }
    c.grid.validate()?;
    for point in c.grid.points(&c.base) {
        point.validate()?;
    }
    Ok(c)
}

/// File-name-safe, unique model names derived from checkpoint directories.
fn model_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base: String = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
                .chars()
                .map(|ch| {
                    if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' {
                        ch
                    } else {
                        '_'
                    }
                })
                .collect();
            let base = if base.is_empty() {
                format!("model{i}")
            } else {
                base
            };
            let mut name = base.clone();
            let mut n = 1;
            while !seen.insert(name.clone()) {
                n += 1;
                name = format!("{base}_{n}");
            }
            name
        })
        .collect()
}

pub fn run(args: SweepArgs) -> anyhow::Result<()> {
    let checkpoints = args
        .checkpoint
        .iter()
        .map(|dir| {
            Checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let c = resolve(&args, &checkpoints[0])?;
    let vocab = checkpoints[0].params.vocab();
    if checkpoints.iter().any(|ck| ck.params.vocab() != vocab) {
        return Err(UsageError("all checkpoints must share one vocabulary".into()).into());
    }
    let needs_lm = c.grid.lambda2s.iter().any(|&l| l > 0.0);
    let lm = load_lm(c.lm.as_deref(), vocab, needs_lm)?;
    let lm_ref = lm.as_ref().map(|l| l as &dyn LanguageModel);
    let data = args.data.load(vocab)?;

    fs::create_dir_all(&args.out)?;
    config::echo(&args.out, &c)?;
    let mut curves = Vec::new();
    let names = model_names(&args.checkpoint);
    for (name, ckpt) in names.iter().zip(&checkpoints) {
        let rows = run_sweep(&ckpt.params, &data, &c.grid, &c.base, lm_ref)?;
        let path = args.out.join(format!("sweep_{name}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        write_sweep_csv(&mut w, &rows)?;
        w.flush()?;
        let failed = rows.iter().filter(|r| r.result.is_err()).count();
        println!("{name}: {} grid points -> {}", rows.len(), path.display());
        if failed > 0 {
            eprintln!("{name}: {failed} grid point(s) failed; see NaN rows");
        }
        if c.grid.lambda1s.len() * c.grid.lambda2s.len() > 1 {
            let beam = c.grid.beams.iter().copied().max();
            if let Ok(best) = pick_lambda(&rows, beam) {
                println!(
                    "{name}: best (lambda1, lambda2) = ({}, {})",
                    best.lambda1, best.lambda2
                );
            }
        }
        curves.extend(beam_curves(name, &rows));
    }
    fs::write(
        args.out.join(PLOT_FILE),
        render_wer_vs_beam_svg("WER vs beam size", &curves),
    )?;
    Ok(())
}
