//! WER via Levenshtein alignment and duration-bucketed score reports.
//!
//! Bucket and overall WERs are pooled: error counts are summed over
//! utterances before dividing by the pooled reference length. That
//! matches "average error rate" table semantics, not a mean of
//! per-utterance WERs.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{bucket_index, bucket_names, Manifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// 100 * (S + D + I) / N_ref. May exceed 100.
    pub fn wer_percent(&self) -> f64 {
        100.0 * self.errors() as f64 / self.ref_len as f64
    }

    pub fn add(&mut self, other: &WerCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_len += other.ref_len;
    }
}

/// Levenshtein alignment with unit costs. Backtrace prefers
/// match/substitution, then deletion, then insertion, which fixes the
/// (S, D, I) split deterministically; the total S+D+I is optimal either
/// way.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<WerCounts> {
    if reference.is_empty() {
        return Err(Error::Msg("WER needs a non-empty reference".into()));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }
    let mut counts = WerCounts {
        ref_len: n,
        ..WerCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + cost {
                if cost == 1 {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
            continue;
        }
        counts.insertions += 1;
        j -= 1;
    }
    Ok(counts)
}

/// Word-level WER over whitespace-tokenized text.
pub fn wer_text(reference: &str, hypothesis: &str) -> Result<WerCounts> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

/// One scored utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UttScore {
    pub utt_id: String,
    pub duration_s: f64,
    pub counts: WerCounts,
}

/// Score a hypothesis set against manifest transcripts (word level).
/// Every manifest utterance must have a hypothesis.
pub fn score_hypotheses(
    manifest: &Manifest,
    hyps: &HashMap<String, (f64, String)>,
) -> Result<Vec<UttScore>> {
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let (_, text) = hyps
            .get(&r.utt_id)
            .ok_or_else(|| Error::NotFound(format!("hypothesis for {}", r.utt_id)))?;
        out.push(UttScore {
            utt_id: r.utt_id.clone(),
            duration_s: r.duration_s,
            counts: wer_text(&r.transcript, text)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketCell {
    pub wer: f64,
    pub counts: WerCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemRow {
    pub system: String,
    pub overall: BucketCell,
    pub buckets: Vec<BucketCell>,
}

/// Per-system rows of overall plus per-duration-bucket pooled WER.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub edges: Vec<f64>,
    pub bucket_names: Vec<String>,
    pub rows: Vec<SystemRow>,
}

/// Assemble the report. Buckets follow the half-open edge convention of
/// `split_by_duration`; pooled WER divides summed errors by summed
/// reference lengths.
pub fn bucket_report(systems: &[(String, Vec<UttScore>)], edges: &[f64]) -> Result<ScoreReport> {
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpec(format!(
            "bucket edges must be strictly increasing, got {edges:?}"
        )));
    }
    let names = bucket_names(edges);
    let mut rows = Vec::new();
    for (system, scores) in systems {
        let mut overall = WerCounts::default();
        let mut per_bucket = vec![WerCounts::default(); edges.len() + 1];
        for s in scores {
            overall.add(&s.counts);
            per_bucket[bucket_index(s.duration_s, edges)].add(&s.counts);
        }
        rows.push(SystemRow {
            system: system.clone(),
            overall: BucketCell {
                wer: overall.wer_percent(),
                counts: overall,
            },
            buckets: per_bucket
                .into_iter()
                .map(|c| BucketCell {
                    wer: if c.ref_len == 0 {
                        f64::NAN
                    } else {
                        c.wer_percent()
                    },
                    counts: c,
                })
                .collect(),
        });
    }
    Ok(ScoreReport {
        edges: edges.to_vec(),
        bucket_names: names,
        rows,
    })
}

impl ScoreReport {
    /// Aligned plain-text table. Deterministic byte-for-byte for a given
    /// report.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# pooled %WER: errors summed within each bucket before dividing by reference length"
        )
        .expect("string write");
        let name_w = self
            .rows
            .iter()
            .map(|r| r.system.len())
            .chain(["system".len()])
            .max()
            .unwrap_or(6);
        let mut header = format!("{:<name_w$}  {:>8}", "system", "overall");
        for b in &self.bucket_names {
            header.push_str(&format!("  {b:>8}"));
        }
        writeln!(out, "{header}").expect("string write");
        for row in &self.rows {
            let mut line = format!("{:<name_w$}  {:>8.2}", row.system, row.overall.wer);
            for b in &row.buckets {
                if b.wer.is_nan() {
                    line.push_str(&format!("  {:>8}", "-"));
                } else {
                    line.push_str(&format!("  {:>8.2}", b.wer));
                }
            }
            writeln!(out, "{line}").expect("string write");
        }
        out
    }

    /// CSV rows: `system,bucket,wer,S,D,I,Nref`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,bucket,wer,S,D,I,Nref\n");
        for row in &self.rows {
            let mut cells: Vec<(&str, &BucketCell)> = vec![("overall", &row.overall)];
            for (name, cell) in self.bucket_names.iter().zip(&row.buckets) {
                cells.push((name, cell));
            }
            for (name, cell) in cells {
                let wer = if cell.wer.is_nan() {
                    String::new()
                } else {
                    format!("{:.4}", cell.wer)
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    row.system,
                    name,
                    wer,
                    cell.counts.substitutions,
                    cell.counts.deletions,
                    cell.counts.insertions,
                    cell.counts.ref_len
                )
                .expect("string write");
            }
        }
        out
    }
}
