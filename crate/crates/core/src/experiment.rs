//! End-to-end experiment orchestration: corpus, features, embedders,
//! per-system training, decoding, scoring, and the combined comparison
//! table over the system matrix (baseline / x_add / s_add / x_cat /
//! s_cat). Stages are resumable: each stage directory carries a stamp
//! with the hash of the configuration slice that produced it, and a
//! matching stamp skips the stage.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_frontend_graph, AdaptConfig, AdaptMode};
use crate::corpus::{generate_corpus, save_manifest, CorpusSpec, Manifest};
use crate::decode::{save_hypotheses, BeamConfig, Hypothesis};
use crate::embed::{
    extract_utterance_embedding, speaker_embedding, train_embedder, EmbedderConfig,
    EmbedderFlavor, EmbeddingScope, EmbeddingStore, SpeakerEmbedding,
};
use crate::error::{Error, Result};
use crate::frontend::{
    cmvn_apply, compute_cmvn, extract_manifest_features, CmvnStats, FeatureArchive,
    FrontendConfig,
};
use crate::model::vocab::Vocab;
use crate::model::{AsrModel, ModelConfig};
use crate::nn::Graph;
use crate::score::{bucket_report, score_hypotheses, ScoreReport, UttScore};
use crate::trainer::{average_checkpoints, train, Checkpoint, TrainConfig, TrainItem};
use crate::util::fnv1a;

/// Everything a full run needs. The `model.input_dim` and `train.adapt`
/// fields act as templates; each system overrides the injection mode and
/// the matching input width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub frontend: FrontendConfig,
    pub embedder: EmbedderConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub beam: BeamConfig,
    pub edges: Vec<f64>,
    /// Subset of {baseline, x_add, s_add, x_cat, s_cat}.
    pub systems: Vec<String>,
    pub dev_per_speaker: usize,
    pub test_per_speaker: usize,
}

/// (injection mode, embedder flavor) of one named system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemSpec {
    pub mode: AdaptMode,
    pub flavor: EmbedderFlavor,
}

pub fn parse_system(name: &str) -> Result<SystemSpec> {
    let spec = match name {
        "baseline" => SystemSpec {
            mode: AdaptMode::None,
            flavor: EmbedderFlavor::Ff,
        },
        "x_add" | "add" => SystemSpec {
            mode: AdaptMode::Add,
            flavor: EmbedderFlavor::Ff,
        },
        "s_add" => SystemSpec {
            mode: AdaptMode::Add,
            flavor: EmbedderFlavor::Attn,
        },
        "x_cat" | "cat" => SystemSpec {
            mode: AdaptMode::Cat,
            flavor: EmbedderFlavor::Ff,
        },
        "s_cat" => SystemSpec {
            mode: AdaptMode::Cat,
            flavor: EmbedderFlavor::Attn,
        },
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown system {other:?} (valid: baseline, x_add, s_add, x_cat, s_cat)"
            )))
        }
    };
    Ok(spec)
}

/// Per-speaker split by utterance order: the last `test_n` utterances go
/// to test, the `dev_n` before them to dev, the rest to train.
pub fn split_manifest(
    manifest: &Manifest,
    dev_n: usize,
    test_n: usize,
) -> (Manifest, Manifest, Manifest) {
    let mut by_speaker: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_speaker.entry(r.speaker_id.as_str()).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut dev_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut speakers: Vec<&&str> = by_speaker.keys().collect();
    speakers.sort();
    for s in speakers {
        let idxs = &by_speaker[*s];
        let n = idxs.len();
        let test_start = n.saturating_sub(test_n);
        let dev_start = test_start.saturating_sub(dev_n);
        train_idx.extend(&idxs[..dev_start]);
        dev_idx.extend(&idxs[dev_start..test_start]);
        test_idx.extend(&idxs[test_start..]);
    }
    train_idx.sort();
    dev_idx.sort();
    test_idx.sort();
    let pick = |idxs: &[usize]| Manifest {
        records: idxs.iter().map(|&i| manifest.records[i].clone()).collect(),
        sample_rate: manifest.sample_rate,
        root: manifest.root.clone(),
    };
    (pick(&train_idx), pick(&dev_idx), pick(&test_idx))
}

fn config_hash<T: Serialize>(value: &T) -> u64 {
    fnv1a(serde_json::to_string(value).expect("serializable config").as_bytes())
}

fn stage_is_done(dir: &Path, hash: u64) -> bool {
    fs::read_to_string(dir.join(".stamp"))
        .map(|s| s.trim() == hash.to_string())
        .unwrap_or(false)
}

fn stamp_stage(dir: &Path, hash: u64) -> Result<()> {
    fs::write(dir.join(".stamp"), hash.to_string()).map_err(|e| Error::io(dir, e))
}

/// Build training items for a manifest slice: CMVN'd features, encoded
/// targets, and (for adapted systems) the speaker-scope embedding.
pub fn build_items(
    manifest: &Manifest,
    archive: &FeatureArchive,
    cmvn: &CmvnStats,
    vocab: &Vocab,
    store: Option<(&EmbeddingStore, EmbeddingScope)>,
) -> Result<Vec<TrainItem>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let feats = cmvn_apply(&archive.get(&r.utt_id)?, cmvn)?;
            let embedding = match store {
                None => None,
                Some((s, EmbeddingScope::Speaker)) => {
                    Some(s.get(&r.speaker_id, EmbeddingScope::Speaker)?)
                }
                Some((s, EmbeddingScope::Utterance)) => {
                    Some(s.get(&r.utt_id, EmbeddingScope::Utterance)?)
                }
            };
            Ok(TrainItem {
                utt_id: r.utt_id.clone(),
                features: feats,
                target: vocab.encode(&r.transcript),
                embedding,
                duration_s: r.duration_s,
            })
        })
        .collect()
}

/// Decode a manifest with utterance-scope embeddings (when adapted).
pub fn decode_manifest(
    model: &AsrModel,
    adapt_cfg: &AdaptConfig,
    manifest: &Manifest,
    archive: &FeatureArchive,
    cmvn: &CmvnStats,
    store: Option<&EmbeddingStore>,
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    manifest
        .records
        .par_iter()
        .map(|r| -> Result<Hypothesis> {
            let feats = cmvn_apply(&archive.get(&r.utt_id)?, cmvn)?;
            let emb: Option<SpeakerEmbedding> = match (adapt_cfg.mode, store) {
                (AdaptMode::None, _) => None,
                (_, Some(s)) => Some(s.get(&r.utt_id, EmbeddingScope::Utterance)?),
                (_, None) => {
                    return Err(Error::InvalidConfig(
                        "adapted decoding needs an embedding store".into(),
                    ))
                }
            };
            let mut g = Graph::new();
            let mut dummy_rng = crate::util::stream_rng(0, &["decode"]);
            let adapted = adapt_frontend_graph(
                &mut g,
                &model.params,
                &feats,
                emb.as_ref(),
                adapt_cfg,
                false,
                false,
                &mut dummy_rng,
            )?;
            let input = g.value2(adapted.input);
            let result = crate::decode::beam_search(model, &input, beam)?;
            Ok(Hypothesis {
                utt_id: r.utt_id.clone(),
                text: model.vocab.decode(&result.ids),
                ids: result.ids,
                score: result.score,
                duration_s: r.duration_s,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SystemOutcome {
    pub name: String,
    pub dev_scores: Vec<UttScore>,
    pub test_scores: Vec<UttScore>,
    pub final_checkpoint: PathBuf,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub systems: Vec<SystemOutcome>,
    pub dev_report: ScoreReport,
    pub test_report: ScoreReport,
    pub report_dir: PathBuf,
}

/// Run the full pipeline under `out_dir`. Stages already stamped with a
/// matching config hash are reused.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg).map_err(|e| Error::Msg(format!("config: {e}")))?,
    )
    .map_err(|e| Error::io(out_dir, e))?;

    // Stage 1: corpus.
    let corpus_dir = out_dir.join("corpus");
    let corpus_hash = config_hash(&(&cfg.corpus, cfg.dev_per_speaker, cfg.test_per_speaker));
    let manifest = if stage_is_done(&corpus_dir, corpus_hash) {
        crate::corpus::load_manifest(&corpus_dir.join("manifest.tsv"))?
    } else {
        let m = generate_corpus(&cfg.corpus, &corpus_dir)?;
        stamp_stage(&corpus_dir, corpus_hash)?;
        m
    };
    let (train_m, dev_m, test_m) = split_manifest(&manifest, cfg.dev_per_speaker, cfg.test_per_speaker);
    save_manifest(&train_m, &corpus_dir.join("train.tsv"))?;
    save_manifest(&dev_m, &corpus_dir.join("dev.tsv"))?;
    save_manifest(&test_m, &corpus_dir.join("test.tsv"))?;

    // Stage 2: features + CMVN over the training split.
    let feat_dir = out_dir.join("feats");
    let feat_hash = config_hash(&(&cfg.corpus, &cfg.frontend));
    if !stage_is_done(&feat_dir, feat_hash) {
        extract_manifest_features(&manifest, &cfg.frontend, &feat_dir)?;
        stamp_stage(&feat_dir, feat_hash)?;
    }
    let archive = FeatureArchive::open(&feat_dir)?;
    let train_ids: Vec<String> = train_m.records.iter().map(|r| r.utt_id.clone()).collect();
    let cmvn = compute_cmvn(&archive, &train_ids)?;
    cmvn.save(&feat_dir.join("cmvn.json"))?;

    // Vocabulary over the whole corpus.
    let vocab = Vocab::char_vocab(manifest.records.iter().map(|r| r.transcript.as_str()))?;
    vocab.save(&out_dir.join("vocab.txt"))?;

    // Stage 3: one embedding store per flavor any system needs.
    let specs: Vec<(String, SystemSpec)> = cfg
        .systems
        .iter()
        .map(|name| parse_system(name).map(|s| (name.clone(), s)))
        .collect::<Result<_>>()?;
    let mut flavors: Vec<EmbedderFlavor> = specs
        .iter()
        .filter(|(_, s)| s.mode != AdaptMode::None)
        .map(|(_, s)| s.flavor)
        .collect();
    flavors.sort_by_key(|f| format!("{f:?}"));
    flavors.dedup();
    let mut stores: HashMap<String, PathBuf> = HashMap::new();
    for flavor in flavors {
        let tag = match flavor {
            EmbedderFlavor::Ff => "ff",
            EmbedderFlavor::Attn => "attn",
        };
        let dir = out_dir.join(format!("embed_{tag}"));
        let ecfg = EmbedderConfig {
            flavor,
            seed: cfg.seed,
            ..cfg.embedder.clone()
        };
        let hash = config_hash(&(&cfg.corpus, &cfg.frontend, &ecfg));
        if !stage_is_done(&dir, hash) {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (embedder, acc) = train_embedder(&train_m, &archive, Some(&cmvn), &ecfg)?;
            log::info!("embedder {tag}: train accuracy {acc:.3}");
            let store_dir = dir.join("store");
            let mut store = EmbeddingStore::open_or_create(&store_dir)?;
            // Utterance embeddings for every utterance; speaker means
            // over the training split only.
            let utt_embs: Vec<SpeakerEmbedding> = manifest
                .records
                .par_iter()
                .map(|r| {
                    let feats = cmvn_apply(&archive.get(&r.utt_id)?, &cmvn)?;
                    extract_utterance_embedding(&embedder, &feats, &r.utt_id, &r.speaker_id)
                })
                .collect::<Result<_>>()?;
            for e in &utt_embs {
                store.put(e)?;
            }
            let train_set: std::collections::HashSet<&str> =
                train_m.records.iter().map(|r| r.utt_id.as_str()).collect();
            let mut by_speaker: HashMap<&str, Vec<&SpeakerEmbedding>> = HashMap::new();
            for e in &utt_embs {
                if train_set.contains(e.id.as_str()) {
                    by_speaker.entry(e.speaker_id.as_str()).or_default().push(e);
                }
            }
            let mut speakers: Vec<&&str> = by_speaker.keys().collect();
            speakers.sort();
            for s in speakers {
                let embs: Vec<SpeakerEmbedding> =
                    by_speaker[*s].iter().map(|e| (*e).clone()).collect();
                store.put(&speaker_embedding(&embs)?)?;
            }
            stamp_stage(&dir, hash)?;
        }
        stores.insert(tag.to_string(), dir.join("store"));
    }

    // Stage 4: per-system training, decoding, scoring.
    let mut outcomes = Vec::new();
    for (name, spec) in &specs {
        let sys_dir = out_dir.join("systems").join(name);
        fs::create_dir_all(&sys_dir).map_err(|e| Error::io(&sys_dir, e))?;
        let adapt_cfg = AdaptConfig {
            mode: spec.mode,
            ..cfg.train.adapt.clone()
        };
        let model_cfg = ModelConfig {
            input_dim: adapt_cfg.input_dim(),
            ..cfg.model.clone()
        };
        let train_cfg = TrainConfig {
            adapt: adapt_cfg.clone(),
            seed: cfg.seed,
            ..cfg.train.clone()
        };
        let store = if spec.mode == AdaptMode::None {
            None
        } else {
            let tag = match spec.flavor {
                EmbedderFlavor::Ff => "ff",
                EmbedderFlavor::Attn => "attn",
            };
            Some(EmbeddingStore::open_or_create(&stores[tag])?)
        };

        let sys_hash = config_hash(&(
            &cfg.corpus,
            &cfg.frontend,
            &cfg.embedder,
            &model_cfg,
            &train_cfg,
            &cfg.beam,
            &cfg.edges,
            name,
        ));
        let final_ckpt = sys_dir.join("final.ckpt");
        if !stage_is_done(&sys_dir, sys_hash) {
            let train_items = build_items(
                &train_m,
                &archive,
                &cmvn,
                &vocab,
                store.as_ref().map(|s| (s, EmbeddingScope::Speaker)),
            )?;
            let dev_items = build_items(
                &dev_m,
                &archive,
                &cmvn,
                &vocab,
                store.as_ref().map(|s| (s, EmbeddingScope::Speaker)),
            )?;
            let mut model = AsrModel::new(model_cfg.clone(), vocab.clone(), &adapt_cfg, cfg.seed)?;
            let report = train(&mut model, &train_items, &dev_items, &train_cfg, &sys_dir)?;
            for w in &report.warnings {
                log::warn!("{name}: {w}");
            }
            let averaged = average_checkpoints(&report.checkpoint_paths, cfg.train.average_k)?;
            crate::trainer::save_checkpoint(
                &final_ckpt,
                &averaged.model,
                &adapt_cfg,
                averaged.epoch,
                averaged.dev_loss,
            )?;
            let decode_and_save = |m: &Manifest, path: &Path| -> Result<Vec<Hypothesis>> {
                let hyps = decode_manifest(
                    &averaged.model,
                    &adapt_cfg,
                    m,
                    &archive,
                    &cmvn,
                    store.as_ref(),
                    &cfg.beam,
                )?;
                save_hypotheses(&hyps, path)?;
                Ok(hyps)
            };
            decode_and_save(&dev_m, &sys_dir.join("hyps_dev.tsv"))?;
            decode_and_save(&test_m, &sys_dir.join("hyps_test.tsv"))?;
            stamp_stage(&sys_dir, sys_hash)?;
        }

        let dev_hyps = crate::decode::load_hypotheses(&sys_dir.join("hyps_dev.tsv"))?;
        let test_hyps = crate::decode::load_hypotheses(&sys_dir.join("hyps_test.tsv"))?;
        outcomes.push(SystemOutcome {
            name: name.clone(),
            dev_scores: score_hypotheses(&dev_m, &dev_hyps)?,
            test_scores: score_hypotheses(&test_m, &test_hyps)?,
            final_checkpoint: final_ckpt,
        });
    }

    // Stage 5: combined comparison reports.
    let report_dir = out_dir.join("report");
    fs::create_dir_all(&report_dir).map_err(|e| Error::io(&report_dir, e))?;
    let dev_rows: Vec<(String, Vec<UttScore>)> = outcomes
        .iter()
        .map(|o| (o.name.clone(), o.dev_scores.clone()))
        .collect();
    let test_rows: Vec<(String, Vec<UttScore>)> = outcomes
        .iter()
        .map(|o| (o.name.clone(), o.test_scores.clone()))
        .collect();
    let dev_report = bucket_report(&dev_rows, &cfg.edges)?;
    let test_report = bucket_report(&test_rows, &cfg.edges)?;
    for (name, report) in [("dev", &dev_report), ("test", &test_report)] {
        fs::write(report_dir.join(format!("comparison_{name}.txt")), report.to_table())
            .map_err(|e| Error::io(&report_dir, e))?;
        fs::write(report_dir.join(format!("comparison_{name}.csv")), report.to_csv())
            .map_err(|e| Error::io(&report_dir, e))?;
    }

    Ok(ExperimentOutput {
        systems: outcomes,
        dev_report,
        test_report,
        report_dir,
    })
}

/// Load a checkpoint and decode one manifest; the building block behind
/// the standalone decode subcommand.
pub fn decode_with_checkpoint(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    archive: &FeatureArchive,
    cmvn: &CmvnStats,
    store: Option<&EmbeddingStore>,
    beam: &BeamConfig,
) -> Result<Vec<Hypothesis>> {
    decode_manifest(&ckpt.model, &ckpt.adapt, manifest, archive, cmvn, store, beam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DurationBucket, Grammar};

    #[test]
    fn system_names_parse() {
        assert_eq!(parse_system("baseline").unwrap().mode, AdaptMode::None);
        assert_eq!(parse_system("x_add").unwrap().mode, AdaptMode::Add);
        assert_eq!(parse_system("s_cat").unwrap().flavor, EmbedderFlavor::Attn);
        assert!(parse_system("bogus").is_err());
    }

    #[test]
    fn split_is_per_speaker_and_disjoint() {
        let spec = CorpusSpec {
            n_speakers: 3,
            utterances_per_speaker: 5,
            duration_distribution: vec![(DurationBucket::Less5, 1.0)],
            grammar: Grammar::default(),
            speaker_colors: None,
            speaker_template_shift_hz: 0.0,
            sample_rate: 16000,
            seed: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&spec, dir.path()).unwrap();
        let (train, dev, test) = split_manifest(&m, 1, 1);
        assert_eq!(train.records.len(), 9);
        assert_eq!(dev.records.len(), 3);
        assert_eq!(test.records.len(), 3);
        for split in [&train, &dev, &test] {
            assert_eq!(split.speakers().len(), 3);
        }
        let mut all: Vec<String> = train
            .records
            .iter()
            .chain(&dev.records)
            .chain(&test.records)
            .map(|r| r.utt_id.clone())
            .collect();
        all.sort();
        let mut want: Vec<String> = m.records.iter().map(|r| r.utt_id.clone()).collect();
        want.sort();
        assert_eq!(all, want);
    }
}
