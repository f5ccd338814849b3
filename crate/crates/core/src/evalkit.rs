//! Corpus WER scoring, dataset decoding, and hyperparameter sweeps.

use std::fmt::Write as _;
use std::io::Write;
use std::ops::Add;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{beam_search, DecodeConfig, DecodedHypothesis, FusionWeights};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::model::synth::Dataset;
use crate::model::{ModelScorer, ToyModelParams};

/// Edit counts pooled over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_words: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// `(S + I + D) / N`; zero when there are no reference words and no errors.
    pub fn wer(&self) -> f64 {
        match (self.errors(), self.reference_words) {
            (0, _) => 0.0,
            (e, 0) => e as f64,
            (e, n) => e as f64 / n as f64,
        }
    }
}

impl Add for WerReport {
    type Output = WerReport;

    fn add(self, o: WerReport) -> WerReport {
        WerReport {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            reference_words: self.reference_words + o.reference_words,
        }
    }
}

/// Minimum-edit alignment of one pair. Among equal-cost alignments the
/// backtrace prefers a match or substitution, then a deletion, then an
/// insertion.
pub fn align<T: PartialEq>(hyp: &[T], reference: &[T]) -> WerReport {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut report = WerReport {
        reference_words: n,
        ..WerReport::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0
            && j > 0
            && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1])
        {
            if reference[i - 1] != hyp[j - 1] {
                report.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            report.deletions += 1;
            i -= 1;
        } else {
            report.insertions += 1;
            j -= 1;
        }
    }
    report
}

/// Pooled corpus WER: total edits over total reference words.
pub fn score_wer<H, R>(hyps: &[H], refs: &[R]) -> Result<WerReport>
where
    H: AsRef<[usize]>,
    R: AsRef<[usize]>,
{
    if hyps.len() != refs.len() {
        return Err(Error::PairedListMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    Ok(hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| align(h.as_ref(), r.as_ref()))
        .fold(WerReport::default(), Add::add))
}

/// Decodes every utterance; results are in dataset order.
pub fn decode_dataset(
    params: &ToyModelParams,
    data: &Dataset,
    config: &DecodeConfig,
    lm: Option<&dyn LanguageModel>,
) -> Result<Vec<Vec<DecodedHypothesis>>> {
    data.utterances
        .par_iter()
        .map(|utt| {
            let scorer = ModelScorer::new(params, &utt.features)?;
            beam_search(&scorer, config, lm)
        })
        .collect()
}

/// Per-utterance top hypothesis with its edit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRow {
    pub utt_id: String,
    pub config: DecodeConfig,
    pub report: WerReport,
    pub top1: Vec<usize>,
}

pub const DECODE_HEADER: &str =
    "utt_id,beam,temperature,length_norm,lambda1,lambda2,wer_numerator,wer_denominator,top1_tokens";

pub fn decode_rows(
    params: &ToyModelParams,
    data: &Dataset,
    config: &DecodeConfig,
    lm: Option<&dyn LanguageModel>,
) -> Result<Vec<DecodeRow>> {
    let decoded = decode_dataset(params, data, config, lm)?;
    Ok(data
        .utterances
        .iter()
        .zip(decoded)
        .map(|(utt, hyps)| {
            let top1 = hyps[0].tokens.tokens().to_vec();
            DecodeRow {
                utt_id: utt.id.clone(),
                config: *config,
                report: align(&top1, utt.labels.tokens()),
                top1,
            }
        })
        .collect())
}

pub fn write_decode_csv<W: Write>(mut w: W, rows: &[DecodeRow]) -> Result<()> {
    writeln!(w, "{DECODE_HEADER}")?;
    for r in rows {
        let tokens: Vec<String> = r.top1.iter().map(usize::to_string).collect();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.utt_id,
            r.config.beam_size,
            r.config.temperature,
            r.config.length_norm,
            r.config.fusion.lambda1,
            r.config.fusion.lambda2,
            r.report.errors(),
            r.report.reference_words,
            tokens.join(" ")
        )?;
    }
    Ok(())
}

/// Top-1 WER of a dataset under one decoding configuration.
pub fn decode_and_score(
    params: &ToyModelParams,
    data: &Dataset,
    config: &DecodeConfig,
    lm: Option<&dyn LanguageModel>,
) -> Result<WerReport> {
    Ok(decode_rows(params, data, config, lm)?
        .into_iter()
        .fold(WerReport::default(), |acc, r| acc + r.report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub beams: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub length_norm: Vec<bool>,
    pub lambda1s: Vec<f64>,
    pub lambda2s: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            beams: vec![1, 2, 4, 8],
            temperatures: vec![1.0],
            length_norm: vec![true, false],
            lambda1s: vec![0.0],
            lambda2s: vec![0.0],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.beams.is_empty()
            || self.temperatures.is_empty()
            || self.length_norm.is_empty()
            || self.lambda1s.is_empty()
            || self.lambda2s.is_empty()
        {
            return Err(Error::Config(
                "every sweep axis needs at least one value".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.beams.len()
            * self.temperatures.len()
            * self.length_norm.len()
            * self.lambda1s.len()
            * self.lambda2s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product with beams outermost and `λ₂` innermost.
    pub fn points(&self, base: &DecodeConfig) -> Vec<DecodeConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &beam_size in &self.beams {
            for &temperature in &self.temperatures {
                for &length_norm in &self.length_norm {
                    for &lambda1 in &self.lambda1s {
                        for &lambda2 in &self.lambda2s {
                            out.push(DecodeConfig {
                                beam_size,
                                temperature,
                                length_norm,
                                fusion: FusionWeights { lambda1, lambda2 },
                                ..*base
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub config: DecodeConfig,
    /// The decode error message when this grid point failed.
    pub result: std::result::Result<WerReport, String>,
}

pub const SWEEP_HEADER: &str = "beam,temperature,length_norm,lambda1,lambda2,S,I,D,ref_words,wer";

/// Decodes `data` at every grid point. A failing point is reported in its
/// row and does not stop the sweep.
pub fn run_sweep(
    params: &ToyModelParams,
    data: &Dataset,
    grid: &SweepGrid,
    base: &DecodeConfig,
    lm: Option<&dyn LanguageModel>,
) -> Result<Vec<SweepRow>> {
    grid.validate()?;
    Ok(grid
        .points(base)
        .into_par_iter()
        .map(|config| SweepRow {
            result: decode_and_score(params, data, &config, lm).map_err(|e| e.to_string()),
            config,
        })
        .collect())
}

pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        let c = &r.config;
        let tail = match &r.result {
            Ok(rep) => format!(
                "{},{},{},{},{}",
                rep.substitutions,
                rep.insertions,
                rep.deletions,
                rep.reference_words,
                rep.wer()
            ),
            Err(_) => ",,,,NaN".to_string(),
        };
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c.beam_size, c.temperature, c.length_norm, c.fusion.lambda1, c.fusion.lambda2, tail
        )?;
    }
    Ok(())
}

/// Lowest-WER fusion weights among successful rows, restricted to
/// `reference_beam` when given. Ties go to the smaller `λ₁`, then the
/// smaller `λ₂`.
pub fn pick_lambda(rows: &[SweepRow], reference_beam: Option<usize>) -> Result<FusionWeights> {
    rows.iter()
        .filter(|r| reference_beam.is_none_or(|b| r.config.beam_size == b))
        .filter_map(|r| {
            r.result
                .as_ref()
                .ok()
                .map(|rep| (rep.wer(), r.config.fusion))
        })
        .min_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.lambda1.total_cmp(&b.1.lambda1))
                .then(a.1.lambda2.total_cmp(&b.1.lambda2))
        })
        .map(|(_, w)| w)
        .ok_or(Error::EmptyInput)
}

/// One named WER-vs-beam curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub length_norm: bool,
    pub points: Vec<(usize, f64)>,
}

/// Groups successful sweep rows into curves, one per
/// `(temperature, length_norm, λ₁, λ₂)` setting, each sorted by beam.
pub fn beam_curves(name: &str, rows: &[SweepRow]) -> Vec<Curve> {
    let mut curves: Vec<(DecodeConfig, Curve)> = Vec::new();
    for r in rows {
        let Ok(rep) = &r.result else { continue };
        let c = r.config;
        let key = DecodeConfig { beam_size: 0, ..c };
        let point = (c.beam_size, rep.wer());
        match curves.iter_mut().find(|(k, _)| *k == key) {
            Some((_, curve)) => curve.points.push(point),
            None => {
                let mut label = format!("{name} Z={}", c.temperature);
                if !c.fusion.is_none() {
                    let _ = write!(label, " λ=({}, {})", c.fusion.lambda1, c.fusion.lambda2);
                }
                label.push_str(if c.length_norm { " LN" } else { " no LN" });
                curves.push((
                    key,
                    Curve {
                        label,
                        length_norm: c.length_norm,
                        points: vec![point],
                    },
                ));
            }
        }
    }
    curves
        .into_iter()
        .map(|(_, mut c)| {
            c.points.sort_by_key(|p| p.0);
            c
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// WER-vs-beam line plot. Curves with length normalization are solid,
/// curves without are dashed. The beam axis is logarithmic.
pub fn render_wer_vs_beam_svg(title: &str, curves: &[Curve]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 190.0, 40.0, 50.0);
    let beams: Vec<usize> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .collect();
    let wers: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.1))
        .collect();
    let bmin = beams.iter().copied().min().unwrap_or(1).max(1) as f64;
    let bmax = (beams.iter().copied().max().unwrap_or(1) as f64).max(bmin * 2.0);
    let ymax = wers.iter().copied().fold(0.0, f64::max).max(1e-3) * 1.1;
    let px = |b: usize| {
        left + (w - left - right) * ((b as f64).ln() - bmin.ln()) / (bmax.ln() - bmin.ln())
    };
    let py = |v: f64| h - bottom - (h - top - bottom) * v / ymax;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (w - right + left) / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (left, w - right, h - bottom, top);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    let mut ticks: Vec<usize> = beams.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for b in ticks {
        let x = px(b);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{y0}" x2="{x:.1}" y2="{}" stroke="black"/>"#,
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{b}</text>"#,
            y0 + 18.0
        );
    }
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#,
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.1}</text>"#,
            x0 - 7.0,
            y + 4.0,
            v * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">beam</text>"#,
        (x0 + x1) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">WER (%)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if c.length_norm {
            ""
        } else {
            r#" stroke-dasharray="6,4""#
        };
        let path: Vec<String> = c
            .points
            .iter()
            .enumerate()
            .map(|(j, &(b, v))| {
                format!(
                    "{}{:.1},{:.1}",
                    if j == 0 { "M" } else { "L" },
                    px(b),
                    py(v)
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            path.join(" ")
        );
        for &(b, v) in &c.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(b),
                py(v)
            );
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#,
            lx + 24.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 30.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
