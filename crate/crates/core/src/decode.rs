//! Beam-search decoding with hybrid attention + CTC prefix scoring.
//!
//! Combined score of a prefix g:
//! `(1 - w) * sum of attention log-probs + w * log p_ctc(g... | X)`,
//! where the CTC term is the standard prefix probability computed by the
//! prefix forward algorithm. Both terms are non-increasing along a path,
//! so the search stops once the best finished hypothesis outscores every
//! live prefix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::vocab::{BLANK, EOS, SOS, UNK};
use crate::model::AsrModel;
use crate::util::log_add;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    pub ctc_weight: f64,
    /// Length bound as a fraction of the encoder frame count.
    pub max_len_ratio: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 8,
            ctc_weight: 0.3,
            max_len_ratio: 0.8,
        }
    }
}

/// One decoded utterance.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub utt_id: String,
    pub ids: Vec<usize>,
    pub text: String,
    pub score: f64,
    pub duration_s: f64,
}

/// CTC prefix scorer over fixed per-frame log-probs.
pub struct CtcPrefixScorer<'a> {
    lp: &'a Array2<f64>,
    blank: usize,
}

/// Per-prefix forward variables: probability that the prefix is decoded
/// from frames ..=t with an alignment ending in a non-blank / blank.
#[derive(Debug, Clone)]
pub struct CtcPrefixState {
    r_nb: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(lp: &'a Array2<f64>, blank: usize) -> Self {
        CtcPrefixScorer { lp, blank }
    }

    /// State for the empty prefix: all-blank alignments.
    pub fn initial(&self) -> CtcPrefixState {
        let t = self.lp.nrows();
        let mut r_b = vec![f64::NEG_INFINITY; t];
        let mut acc = 0.0;
        for ti in 0..t {
            acc += self.lp[[ti, self.blank]];
            r_b[ti] = acc;
        }
        CtcPrefixState {
            r_nb: vec![f64::NEG_INFINITY; t],
            r_b,
            last: None,
        }
    }

    /// Extend a prefix with token c; returns the new state and the
    /// prefix log-probability log psi(g . c).
    pub fn extend(&self, state: &CtcPrefixState, c: usize) -> (CtcPrefixState, f64) {
        let t = self.lp.nrows();
        let mut r_nb = vec![f64::NEG_INFINITY; t];
        let mut r_b = vec![f64::NEG_INFINITY; t];
        let mut psi = f64::NEG_INFINITY;
        let mut prev_nb = f64::NEG_INFINITY; // r_nb(gc) at t-1
        let mut prev_b = f64::NEG_INFINITY; // r_b(gc) at t-1
        for ti in 0..t {
            // Paths that first reach prefix g at ti-1 and emit c at ti.
            let g_b_prev = if ti == 0 {
                if state.last.is_none() {
                    0.0 // empty prefix "ends in blank" before any frame
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                state.r_b[ti - 1]
            };
            let g_nb_prev = if ti == 0 {
                f64::NEG_INFINITY
            } else {
                state.r_nb[ti - 1]
            };
            let phi = if state.last == Some(c) {
                g_b_prev // repeated label needs a separating blank
            } else {
                log_add(g_b_prev, g_nb_prev)
            };
            let p_c = self.lp[[ti, c]];
            r_nb[ti] = log_add(prev_nb, phi) + p_c;
            r_b[ti] = log_add(prev_b, prev_nb) + self.lp[[ti, self.blank]];
            psi = log_add(psi, phi + p_c);
            prev_nb = r_nb[ti];
            prev_b = r_b[ti];
        }
        (
            CtcPrefixState {
                r_nb,
                r_b,
                last: Some(c),
            },
            psi,
        )
    }

    /// Log-probability that the prefix is the complete label sequence.
    pub fn final_score(&self, state: &CtcPrefixState) -> f64 {
        let t = self.lp.nrows();
        log_add(state.r_b[t - 1], state.r_nb[t - 1])
    }
}

#[derive(Debug, Clone)]
struct BeamEntry {
    ids: Vec<usize>,
    att_score: f64,
    combined: f64,
    ctc: Option<CtcPrefixState>,
    ended: bool,
}

/// Search outcome; `finished` is false when the length bound cut the
/// search off before any eos was selected.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub ids: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

/// Beam search over an adapted model input.
pub fn beam_search(
    model: &AsrModel,
    input: &Array2<f64>,
    cfg: &BeamConfig,
) -> Result<BeamResult> {
    if input.nrows() == 0 {
        return Err(Error::Msg("empty input to beam search".into()));
    }
    let (h, ctc_lp) = model.encode_eval(input)?;
    beam_search_over(model, &h, &ctc_lp, cfg)
}

/// Beam search over precomputed encoder output and CTC log-probs.
pub fn beam_search_over(
    model: &AsrModel,
    h: &Array2<f64>,
    ctc_lp: &Array2<f64>,
    cfg: &BeamConfig,
) -> Result<BeamResult> {
    if cfg.beam == 0 {
        return Err(Error::InvalidConfig("beam must be >= 1".into()));
    }
    let scorer = CtcPrefixScorer::new(ctc_lp, BLANK);
    let vocab_size = model.vocab.size();
    let max_len = ((h.nrows() as f64 * cfg.max_len_ratio).floor() as usize).max(1);
    let w = cfg.ctc_weight;

    let mut beam = vec![BeamEntry {
        ids: Vec::new(),
        att_score: 0.0,
        combined: 0.0,
        ctc: Some(scorer.initial()),
        ended: false,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut fallback: Option<(Vec<usize>, f64)> = None;

    for _ in 0..max_len {
        // Every extension, eos included, competes for the beam slots;
        // with beam = 1 this reduces exactly to the greedy loop.
        let mut candidates: Vec<BeamEntry> = Vec::new();
        for entry in &beam {
            let logp = model.next_token_logprobs(h, &entry.ids)?;
            let state = entry.ctc.as_ref().expect("live entries carry a state");
            for c in 0..vocab_size {
                if c == BLANK || c == SOS || c == UNK {
                    continue;
                }
                let att = entry.att_score + logp[c];
                if c == EOS {
                    let combined = (1.0 - w) * att + w * scorer.final_score(state);
                    candidates.push(BeamEntry {
                        ids: entry.ids.clone(),
                        att_score: att,
                        combined,
                        ctc: None,
                        ended: true,
                    });
                    continue;
                }
                let (new_state, psi) = scorer.extend(state, c);
                let combined = (1.0 - w) * att + w * psi;
                let mut ids = entry.ids.clone();
                ids.push(c);
                candidates.push(BeamEntry {
                    ids,
                    att_score: att,
                    combined,
                    ctc: Some(new_state),
                    ended: false,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.combined
                .partial_cmp(&a.combined)
                .unwrap()
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(cfg.beam);
        beam = Vec::new();
        for cand in candidates {
            if cand.ended {
                finished.push((cand.ids, cand.combined));
            } else {
                beam.push(cand);
            }
        }
        // Truncation fallback: the current beam's best live prefix.
        if let Some(best) = beam.first() {
            fallback = Some((best.ids.clone(), best.combined));
        }
        if beam.is_empty() {
            break;
        }
        // Scores only decrease along a path, so once the best finished
        // hypothesis beats every live prefix nothing can improve.
        if let Some(best_done) = finished
            .iter()
            .map(|(_, s)| *s)
            .max_by(|a, b| a.partial_cmp(b).unwrap())
        {
            if best_done >= beam[0].combined {
                break;
            }
        }
    }

    if finished.is_empty() {
        // No eos emitted within the length bound; fall back to the best
        // live prefix of the final step.
        let (ids, score) =
            fallback.ok_or_else(|| Error::Msg("beam search found no hypothesis".into()))?;
        return Ok(BeamResult {
            ids,
            score,
            finished: false,
        });
    }
    finished.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let (ids, score) = finished[0].clone();
    Ok(BeamResult {
        ids,
        score,
        finished: true,
    })
}

/// Independent greedy loop: argmax combined extension per step, stop at
/// eos. Used as the beam=1 oracle.
pub fn greedy_decode(
    model: &AsrModel,
    h: &Array2<f64>,
    ctc_lp: &Array2<f64>,
    ctc_weight: f64,
    max_len_ratio: f64,
) -> Result<(Vec<usize>, f64)> {
    let scorer = CtcPrefixScorer::new(ctc_lp, BLANK);
    let vocab_size = model.vocab.size();
    let max_len = ((h.nrows() as f64 * max_len_ratio).floor() as usize).max(1);
    let w = ctc_weight;
    let mut ids = Vec::new();
    let mut att = 0.0;
    let mut state = scorer.initial();
    let mut score = 0.0;
    for _ in 0..max_len {
        let logp = model.next_token_logprobs(h, &ids)?;
        let mut best: Option<(usize, f64, Option<(CtcPrefixState, f64)>)> = None;
        for c in 0..vocab_size {
            if c == BLANK || c == SOS || c == UNK {
                continue;
            }
            let (combined, aux) = if c == EOS {
                (
                    (1.0 - w) * (att + logp[c]) + w * scorer.final_score(&state),
                    None,
                )
            } else {
                let (st, psi) = scorer.extend(&state, c);
                ((1.0 - w) * (att + logp[c]) + w * psi, Some((st, att + logp[c])))
            };
            let better = match &best {
                None => true,
                Some((bc, bs, _)) => {
                    combined > *bs || (combined == *bs && c < *bc)
                }
            };
            if better {
                best = Some((c, combined, aux));
            }
        }
        let (c, s, aux) = best.expect("nonempty vocab");
        score = s;
        if c == EOS {
            return Ok((ids, score));
        }
        let (st, new_att) = aux.expect("non-eos has state");
        state = st;
        att = new_att;
        ids.push(c);
    }
    Ok((ids, score))
}

/// Hypothesis file lines: `utt_id \t score \t text`.
pub fn save_hypotheses(hyps: &[Hypothesis], path: &Path) -> Result<()> {
    let mut out = String::new();
    for h in hyps {
        writeln!(out, "{}\t{:.6}\t{}", h.utt_id, h.score, h.text).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_hypotheses(path: &Path) -> Result<HashMap<String, (f64, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: "expected utt_id, score, text".into(),
            });
        }
        let score: f64 = fields[1].parse().map_err(|_| Error::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg: format!("bad score {:?}", fields[1]),
        })?;
        let text = fields.get(2).unwrap_or(&"").to_string();
        out.insert(fields[0].to_string(), (score, text));
    }
    Ok(out)
}
