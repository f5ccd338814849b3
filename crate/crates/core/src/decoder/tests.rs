use std::collections::HashMap;

use approx::assert_abs_diff_eq;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::lattice::{alignment_oracle, StepGrid};
use crate::lm::{NgramLm, TableLm};
use crate::numerics::log_sum_exp;

/// FNV-1a over the seed, frame, and prefix.
fn key(seed: u64, t: usize, prefix: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for v in std::iter::once(t).chain(prefix.iter().copied()) {
        h ^= (v as u64).wrapping_add(1);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Random logits that are a deterministic function of `(t, prefix)`.
fn hashed_scorer(seed: u64, frames: usize, vocab: Vocab, scale: f64) -> PrefixScorer {
    let k = vocab.extended_size();
    PrefixScorer::new(
        vocab,
        frames,
        move |t, prefix| {
            let mut rng = ChaCha8Rng::seed_from_u64(key(seed, t, prefix));
            (0..k).map(|_| rng.random_range(-scale..scale)).collect()
        },
        move |prefix| {
            let mut rng = ChaCha8Rng::seed_from_u64(key(seed ^ 0xabcd, usize::MAX, prefix));
            (0..k).map(|_| rng.random_range(-scale..scale)).collect()
        },
    )
}

/// Like [`hashed_scorer`] but the predictor only sees the last label.
fn bigram_scorer(seed: u64, frames: usize, vocab: Vocab, scale: f64) -> PrefixScorer {
    let k = vocab.extended_size();
    let last = |p: &[usize]| p.last().map_or(0, |&v| v);
    PrefixScorer::new(
        vocab,
        frames,
        move |t, prefix| {
            let mut rng = ChaCha8Rng::seed_from_u64(key(seed, t, &[last(prefix)]));
            (0..k).map(|_| rng.random_range(-scale..scale)).collect()
        },
        move |prefix| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(key(seed ^ 0xabcd, usize::MAX, &[last(prefix)]));
            (0..k).map(|_| rng.random_range(-scale..scale)).collect()
        },
    )
}

/// Every alignment path with at most `cap` labels per frame, summed per label sequence.
fn capped_path_oracle(
    scorer: &PrefixScorer,
    head: &HeadConfig,
    cap: usize,
) -> HashMap<Vec<usize>, f64> {
    #[allow(clippy::too_many_arguments)]
    fn walk(
        s: &PrefixScorer,
        head: &HeadConfig,
        cap: usize,
        t: usize,
        prefix: &mut Vec<usize>,
        emitted: usize,
        score: f64,
        out: &mut HashMap<Vec<usize>, Vec<f64>>,
    ) {
        let lp = head
            .step_log_probs(&s.joint_logits(t, prefix), &s.vocab())
            .unwrap();
        if t + 1 == s.frames() {
            out.entry(prefix.clone())
                .or_default()
                .push(score + lp[BLANK]);
        } else {
            walk(s, head, cap, t + 1, prefix, 0, score + lp[BLANK], out);
        }
        if emitted < cap {
            for k in s.vocab().labels() {
                prefix.push(k);
                walk(s, head, cap, t, prefix, emitted + 1, score + lp[k], out);
                prefix.pop();
            }
        }
    }
    let mut paths = HashMap::new();
    walk(scorer, head, cap, 0, &mut Vec::new(), 0, 0.0, &mut paths);
    paths
        .into_iter()
        .map(|(y, scores)| (y, log_sum_exp(&scores).unwrap()))
        .collect()
}

fn grid_for(scorer: &PrefixScorer, head: &HeadConfig, y: &[usize]) -> StepGrid {
    let k = scorer.vocab().extended_size();
    let mut lp = Array3::zeros((scorer.frames(), y.len() + 1, k));
    for t in 0..scorer.frames() {
        for u in 0..=y.len() {
            let row = head
                .step_log_probs(&scorer.joint_logits(t, &y[..u].to_vec()), &scorer.vocab())
                .unwrap();
            for (j, v) in row.into_iter().enumerate() {
                lp[[t, u, j]] = v;
            }
        }
    }
    StepGrid::new(lp)
}

fn config(beam: usize, head: Head) -> DecodeConfig {
    DecodeConfig {
        beam_size: beam,
        head,
        length_norm: false,
        max_symbols_per_step: 2,
        ..DecodeConfig::default()
    }
}

#[test]
fn saturating_beam_matches_exhaustive_enumeration() {
    let vocab = Vocab::new(2).unwrap();
    for seed in 0..6 {
        for head in [Head::Rnnt, Head::Hat] {
            let scorer = hashed_scorer(seed, 2, vocab, 2.0);
            let cfg = config(64, head);
            let hyps = beam_search(&scorer, &cfg, None).unwrap();
            let oracle = capped_path_oracle(&scorer, &cfg.head_config(), cfg.max_symbols_per_step);
            // T = 2, cap 2: 1 + 2 + 4 + 8 + 16 = 31 reachable prefixes
            assert_eq!(oracle.len(), 31);
            assert_eq!(hyps.len(), 31);
            for h in &hyps {
                let exact = oracle[h.tokens.tokens()];
                assert!(
                    (h.log_prob - exact).abs() < 1e-10,
                    "seed {seed} {:?}",
                    h.tokens
                );
            }
            let best = oracle
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.len().cmp(&a.0.len())))
                .unwrap();
            assert_eq!(hyps[0].tokens.tokens(), best.0.as_slice());

            // When the cap cannot bind, decoded mass is the full lattice mass.
            for h in hyps
                .iter()
                .filter(|h| h.tokens.len() <= cfg.max_symbols_per_step)
            {
                let grid = grid_for(&scorer, &cfg.head_config(), h.tokens.tokens());
                let full = alignment_oracle(&grid, &h.tokens).unwrap();
                assert!(
                    (h.log_prob - full).abs() < 1e-10,
                    "seed {seed} {head:?} {:?}",
                    h.tokens
                );
            }
        }
    }
}

#[test]
fn top_hypothesis_is_the_lattice_argmax() {
    let vocab = Vocab::new(2).unwrap();
    for seed in 0..6 {
        for head in [Head::Rnnt, Head::Hat] {
            let scorer = hashed_scorer(seed, 2, vocab, 2.0);
            let cfg = DecodeConfig {
                max_symbols_per_step: 4,
                ..config(512, head)
            };
            let hyps = beam_search(&scorer, &cfg, None).unwrap();
            assert_eq!(hyps.len(), 511);
            let mut best = (Vec::new(), f64::NEG_INFINITY);
            for h in &hyps {
                let grid = grid_for(&scorer, &cfg.head_config(), h.tokens.tokens());
                let lp = alignment_oracle(&grid, &h.tokens).unwrap();
                if lp > best.1 {
                    best = (h.tokens.tokens().to_vec(), lp);
                }
            }
            // the winner is short enough that the cap never touched its paths
            assert!(best.0.len() <= cfg.max_symbols_per_step);
            assert_eq!(
                hyps[0].tokens.tokens(),
                best.0.as_slice(),
                "seed {seed} {head:?}"
            );
            assert!((hyps[0].log_prob - best.1).abs() < 1e-10);
        }
    }
}

#[test]
fn forced_blank_lattice_decodes_empty() {
    let vocab = Vocab::new(3).unwrap();
    let scorer = PrefixScorer::new(
        vocab,
        5,
        |_, _| vec![1000.0, 0.0, 0.0, 0.0],
        |_| vec![0.0; 4],
    );
    let hyps = beam_search(
        &scorer,
        &DecodeConfig {
            head: Head::Rnnt,
            ..DecodeConfig::default()
        },
        None,
    )
    .unwrap();
    assert!(hyps[0].tokens.is_empty());
    assert_eq!(hyps[0].log_prob, 0.0);
}

#[test]
fn unweighted_fusion_is_log_prob_over_length() {
    let vocab = Vocab::new(3).unwrap();
    let scorer = hashed_scorer(3, 6, vocab, 2.0);
    let cfg = DecodeConfig {
        length_norm: true,
        ..DecodeConfig::default()
    };
    let hyps = beam_search(&scorer, &cfg, None).unwrap();
    for h in &hyps {
        assert_eq!(h.score, h.log_prob / h.tokens.len().max(1) as f64);
    }
    for w in hyps.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
}

#[test]
fn zero_weights_with_lm_are_bit_identical() {
    let vocab = Vocab::new(3).unwrap();
    let lm = TableLm::random(2, vocab, 2.0, &mut ChaCha8Rng::seed_from_u64(1));
    for seed in 0..5 {
        let scorer = hashed_scorer(seed, 6, vocab, 2.0);
        for length_norm in [false, true] {
            let cfg = DecodeConfig {
                length_norm,
                ..DecodeConfig::default()
            };
            let plain = beam_search(&scorer, &cfg, None).unwrap();
            let fused = beam_search(&scorer, &cfg, Some(&lm)).unwrap();
            assert_eq!(plain.len(), fused.len());
            for (a, b) in plain.iter().zip(&fused) {
                assert_eq!(a.tokens, b.tokens);
                assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
                assert_eq!(a.score.to_bits(), b.score.to_bits());
            }
        }
    }
}

#[test]
fn fusion_scores_accumulate_per_token() {
    let vocab = Vocab::new(3).unwrap();
    let corpus = [
        LabelSequence::from_tokens(vec![1, 2, 3]).unwrap(),
        LabelSequence::from_tokens(vec![2, 2]).unwrap(),
    ];
    let lm = NgramLm::train(&corpus, 2, 0.1, vocab).unwrap();
    let scorer = hashed_scorer(8, 5, vocab, 2.0);
    let cfg = DecodeConfig {
        fusion: FusionWeights::new(0.3, 0.7).unwrap(),
        ..DecodeConfig::default()
    };
    let hyps = beam_search(&scorer, &cfg, Some(&lm)).unwrap();
    for h in &hyps {
        let lm_total = lm.score_sequence(&h.tokens).unwrap();
        assert_abs_diff_eq!(h.lm_log_prob, lm_total, epsilon = 1e-12);
        let ilm_rows: Vec<Vec<f64>> = (0..h.tokens.len())
            .map(|u| scorer.ilm_logits(&h.tokens.tokens()[..u].to_vec()))
            .collect();
        let ilm = crate::hat::internal_lm_score(&ilm_rows, &h.tokens, &vocab).unwrap();
        assert_abs_diff_eq!(h.ilm_log_prob, ilm.log_prob, epsilon = 1e-12);
        let expect = fusion_score(
            h.log_prob,
            &ilm,
            lm_total,
            h.tokens.len().max(1),
            cfg.fusion,
            true,
        )
        .unwrap();
        assert_abs_diff_eq!(h.score, expect, epsilon = 1e-12);
    }
}

#[test]
fn fusion_score_examples() {
    let ilm = |v: f64| InternalLmScore {
        log_prob: v,
        per_token: vec![v],
    };
    assert_eq!(
        fusion_score(-6.0, &ilm(-2.0), -3.0, 2, FusionWeights::NONE, false).unwrap(),
        -6.0
    );
    let w = FusionWeights::new(0.5, 1.0).unwrap();
    assert_eq!(
        fusion_score(-6.0, &ilm(-2.0), -3.0, 2, w, true).unwrap(),
        -4.0
    );
    let base = fusion_score(-5.3, &ilm(-1.7), -2.9, 3, w, false).unwrap();
    let doubled = fusion_score(-10.6, &ilm(-3.4), -5.8, 3, w, false).unwrap();
    assert_abs_diff_eq!(doubled, 2.0 * base, epsilon = 1e-12);
    assert!(matches!(
        fusion_score(-1.0, &ilm(0.0), 0.0, 0, w, true),
        Err(Error::Internal(_))
    ));
    assert!(FusionWeights::new(-0.1, 0.0).is_err());
}

fn hyp(tokens: &[usize], fused: f64) -> DecodedHypothesis {
    DecodedHypothesis {
        tokens: LabelSequence::from_tokens(tokens.to_vec()).unwrap(),
        log_prob: fused,
        ilm_log_prob: 0.0,
        lm_log_prob: 0.0,
        fused,
        score: fused,
    }
}

#[test]
fn rerank_examples() {
    let ranked = length_norm_rerank(vec![hyp(&[1, 2, 3], -6.0), hyp(&[1], -4.0)], false);
    assert_eq!(ranked[0].tokens.tokens(), &[1]);
    let ranked = length_norm_rerank(ranked, true);
    assert_eq!(ranked[0].tokens.tokens(), &[1, 2, 3]);
    assert_eq!(ranked[0].score, -2.0);

    let same_len = vec![hyp(&[1, 2], -3.0), hyp(&[2, 1], -1.0), hyp(&[2, 2], -2.0)];
    let a: Vec<_> = length_norm_rerank(same_len.clone(), false)
        .into_iter()
        .map(|h| h.tokens)
        .collect();
    let b: Vec<_> = length_norm_rerank(same_len, true)
        .into_iter()
        .map(|h| h.tokens)
        .collect();
    assert_eq!(a, b);

    let empty = length_norm_rerank(vec![hyp(&[], -0.5)], true);
    assert_eq!(empty[0].score, -0.5);
}

#[test]
fn rerank_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let hyps: Vec<DecodedHypothesis> = (0..8)
            .map(|_| {
                let len = rng.random_range(0..5);
                let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..4)).collect();
                hyp(&tokens, rng.random_range(-20.0..0.0))
            })
            .collect();
        let mut expect: Vec<(f64, usize, Vec<usize>)> = hyps
            .iter()
            .map(|h| {
                (
                    h.fused / h.tokens.len().max(1) as f64,
                    h.tokens.len(),
                    h.tokens.tokens().to_vec(),
                )
            })
            .collect();
        expect.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let got: Vec<Vec<usize>> = length_norm_rerank(hyps, true)
            .into_iter()
            .map(|h| h.tokens.into_tokens())
            .collect();
        let expect: Vec<Vec<usize>> = expect.into_iter().map(|e| e.2).collect();
        assert_eq!(got, expect);
    }
}

#[test]
fn wider_beams_do_not_lose_probability() {
    let vocab = Vocab::new(4).unwrap();
    for seed in 0..200 {
        let scorer = bigram_scorer(100 + seed, 8, vocab, 0.5);
        let mut last = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8] {
            let cfg = DecodeConfig {
                beam_size: beam,
                length_norm: false,
                ..DecodeConfig::default()
            };
            let top = beam_search(&scorer, &cfg, None).unwrap()[0].log_prob;
            assert!(
                top >= last - 1e-12,
                "seed {seed} beam {beam}: {top} < {last}"
            );
            last = top;
        }
    }
}

#[test]
fn error_paths() {
    let vocab = Vocab::new(2).unwrap();
    let empty = hashed_scorer(0, 0, vocab, 1.0);
    assert!(matches!(
        beam_search(&empty, &DecodeConfig::default(), None),
        Err(Error::EmptyInput)
    ));
    let scorer = hashed_scorer(0, 3, vocab, 1.0);
    let bad = DecodeConfig {
        beam_size: 0,
        ..DecodeConfig::default()
    };
    assert!(matches!(
        beam_search(&scorer, &bad, None),
        Err(Error::Config(_))
    ));
    let bad = DecodeConfig {
        temperature: 0.0,
        ..DecodeConfig::default()
    };
    assert!(matches!(
        beam_search(&scorer, &bad, None),
        Err(Error::InvalidTemperature(_))
    ));
    let other = TableLm::uniform(Vocab::new(3).unwrap());
    assert!(matches!(
        beam_search(&scorer, &DecodeConfig::default(), Some(&other)),
        Err(Error::Config(_))
    ));
}

#[test]
fn output_is_capped_at_beam_size() {
    let vocab = Vocab::new(3).unwrap();
    let scorer = hashed_scorer(5, 6, vocab, 2.0);
    for beam in [1, 3, 5] {
        let hyps = beam_search(
            &scorer,
            &DecodeConfig {
                beam_size: beam,
                ..DecodeConfig::default()
            },
            None,
        )
        .unwrap();
        assert!(hyps.len() <= beam && !hyps.is_empty());
        let mut seen = std::collections::HashSet::new();
        assert!(hyps.iter().all(|h| seen.insert(h.tokens.clone())));
    }
}
