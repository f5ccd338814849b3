//! Line-delimited JSON exchange format for N-best lists: one utterance per
//! line, `{"utt_id", "reference", "hypotheses": [{"tokens", "log_prob"}]}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NBestRecord {
    pub utt_id: String,
    pub reference: Vec<usize>,
    pub hypotheses: Vec<HypothesisRecord>,
}

pub fn write_nbest_records<W: Write>(mut w: W, records: &[NBestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_nbest_records<R: BufRead>(r: R) -> Result<Vec<NBestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("N-best line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record_per_line() {
        let recs = vec![
            NBestRecord {
                utt_id: "u0".into(),
                reference: vec![1, 2],
                hypotheses: vec![
                    HypothesisRecord {
                        tokens: vec![1, 2],
                        log_prob: -0.5,
                    },
                    HypothesisRecord {
                        tokens: vec![],
                        log_prob: -3.25,
                    },
                ],
            },
            NBestRecord {
                utt_id: "u1".into(),
                reference: vec![],
                hypotheses: vec![],
            },
        ];
        let mut buf = Vec::new();
        write_nbest_records(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(
            r#"{"utt_id":"u0","reference":[1,2],"hypotheses":[{"tokens":[1,2],"log_prob":-0.5}"#
        ));
        assert_eq!(read_nbest_records(buf.as_slice()).unwrap(), recs);
        assert!(matches!(
            read_nbest_records(&b"{bad"[..]),
            Err(Error::Format(_))
        ));
    }
}
