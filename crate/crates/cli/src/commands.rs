//! Subcommand implementations. Thin argument plumbing around the core
//! library; every flag mirrors a config key and wins over config-file
//! and environment values (`SATR_` prefix, `__` for nesting).

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};

use satr_core::adapt::{AdaptMode, NormAxis};
use satr_core::corpus::{
    bucket_names, generate_corpus, load_manifest, split_by_duration, CorpusSpec,
};
use satr_core::decode::{load_hypotheses, save_hypotheses, BeamConfig};
use satr_core::embed::{
    extract_utterance_embedding, load_embedder, save_embedder, speaker_embedding, train_embedder,
    EmbedderConfig, EmbedderFlavor, EmbeddingScope, EmbeddingStore,
};
use satr_core::experiment::{build_items, decode_with_checkpoint, run_experiment, RunConfig};
use satr_core::frontend::{
    cmvn_apply, compute_cmvn, extract_manifest_features, CmvnStats, FeatureArchive,
    FrontendConfig, PitchMode,
};
use satr_core::model::vocab::Vocab;
use satr_core::model::{AsrModel, ModelConfig};
use satr_core::score::{bucket_report, score_hypotheses, UttScore};
use satr_core::trainer::{average_checkpoints, save_checkpoint, train as train_loop, TrainConfig};

#[derive(Subcommand)]
pub enum CorpusCmd {
    /// Generate a synthetic corpus from a spec file.
    Generate {
        /// JSON corpus spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split a manifest into duration buckets and print the sizes.
    Bucket {
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated edges in seconds, e.g. 5,15.
        #[arg(long, default_value = "5,15", value_parser = parse_edges)]
        edges: Edges,
        /// Write each bucket as a manifest under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Comma-separated bucket edges, e.g. "5,15".
#[derive(Debug, Clone)]
pub struct Edges(pub Vec<f64>);

fn parse_edges(s: &str) -> std::result::Result<Edges, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad edge {p:?}: {e}")))
        .collect::<std::result::Result<Vec<f64>, String>>()
        .map(Edges)
}

pub fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Generate { spec, out, seed } => {
            let text = fs::read_to_string(&spec)
                .with_context(|| format!("reading {}", spec.display()))?;
            let mut parsed: CorpusSpec = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", spec.display()))?;
            if let Some(s) = seed {
                parsed.seed = s;
            }
            let manifest = generate_corpus(&parsed, &out)?;
            println!(
                "generated {} utterances / {} speakers ({:.1} s audio) under {}",
                manifest.records.len(),
                manifest.speakers().len(),
                manifest.total_duration_s(),
                out.display()
            );
            Ok(())
        }
        CorpusCmd::Bucket {
            manifest,
            edges,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let buckets = split_by_duration(&m, &edges.0)?;
            let names = bucket_names(&edges.0);
            for (name, b) in names.iter().zip(&buckets) {
                println!("{name}\t{} utterances\t{:.1} s", b.records.len(), b.total_duration_s());
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                for (name, b) in names.iter().zip(&buckets) {
                    satr_core::corpus::save_manifest(b, &dir.join(format!("{name}.tsv")))?;
                }
            }
            Ok(())
        }
    }
}

#[derive(Subcommand)]
pub enum FeaturesCmd {
    /// Extract fbank+pitch features for every utterance in a manifest.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        n_mels: usize,
        /// `auto` or `zeros` (three zero pitch dims).
        #[arg(long, default_value = "auto")]
        pitch: String,
    },
    /// Compute global CMVN statistics over a training manifest.
    Cmvn {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn features(cmd: FeaturesCmd) -> Result<()> {
    match cmd {
        FeaturesCmd::Extract {
            manifest,
            out,
            n_mels,
            pitch,
        } => {
            let m = load_manifest(&manifest)?;
            let cfg = FrontendConfig {
                n_mels,
                pitch: match pitch.as_str() {
                    "auto" => PitchMode::Auto,
                    "zeros" => PitchMode::Zeros,
                    other => bail!("unknown pitch mode {other:?} (valid: auto, zeros)"),
                },
            };
            extract_manifest_features(&m, &cfg, &out)?;
            println!("extracted features for {} utterances into {}", m.records.len(), out.display());
            Ok(())
        }
        FeaturesCmd::Cmvn {
            train_manifest,
            feats,
            out,
        } => {
            let m = load_manifest(&train_manifest)?;
            let archive = FeatureArchive::open(&feats)?;
            let ids: Vec<String> = m.records.iter().map(|r| r.utt_id.clone()).collect();
            let stats = compute_cmvn(&archive, &ids)?;
            stats.save(&out)?;
            println!("CMVN over {} frames -> {}", stats.frame_count, out.display());
            Ok(())
        }
    }
}

#[derive(Subcommand)]
pub enum EmbedCmd {
    /// Train the speaker classifier and save the extractor.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        cmvn: Option<PathBuf>,
        /// `ff` (x-vector-like) or `attn` (s-vector-like).
        #[arg(long, default_value = "ff")]
        flavor: String,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 48)]
        hidden: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract embeddings into a store.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        feats: PathBuf,
        #[arg(long)]
        cmvn: Option<PathBuf>,
        /// `utterance` (one per utt) or `speaker` (mean per speaker).
        #[arg(long)]
        scope: String,
        #[arg(long)]
        store: PathBuf,
    },
    /// Copy a store directory (append-only artifacts).
    Export {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn embed(cmd: EmbedCmd) -> Result<()> {
    match cmd {
        EmbedCmd::Train {
            manifest,
            feats,
            cmvn,
            flavor,
            epochs,
            hidden,
            lr,
            seed,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let archive = FeatureArchive::open(&feats)?;
            let stats = cmvn.map(|p| CmvnStats::load(&p)).transpose()?;
            let cfg = EmbedderConfig {
                flavor: flavor.parse::<EmbedderFlavor>()?,
                hidden,
                epochs,
                lr,
                seed,
                ..EmbedderConfig::default()
            };
            let (model, acc) = train_embedder(&m, &archive, stats.as_ref(), &cfg)?;
            save_embedder(&model, &out)?;
            println!(
                "trained {flavor} embedder over {} speakers, train accuracy {acc:.3} -> {}",
                model.speakers.len(),
                out.display()
            );
            Ok(())
        }
        EmbedCmd::Extract {
            model,
            manifest,
            feats,
            cmvn,
            scope,
            store,
        } => {
            let embedder = load_embedder(&model)?;
            let m = load_manifest(&manifest)?;
            let archive = FeatureArchive::open(&feats)?;
            let stats = cmvn.map(|p| CmvnStats::load(&p)).transpose()?;
            let scope: EmbeddingScope = scope.parse()?;
            let mut out_store = EmbeddingStore::open_or_create(&store)?;
            let utt_embs: Vec<_> = m
                .records
                .iter()
                .map(|r| -> Result<_> {
                    let raw = archive.get(&r.utt_id)?;
                    let f = match &stats {
                        Some(s) => cmvn_apply(&raw, s)?,
                        None => raw,
                    };
                    Ok(extract_utterance_embedding(&embedder, &f, &r.utt_id, &r.speaker_id)?)
                })
                .collect::<Result<_>>()?;
            match scope {
                EmbeddingScope::Utterance => {
                    let n = utt_embs.len();
                    for e in utt_embs {
                        out_store.put(&e)?;
                    }
                    println!("stored {n} utterance embeddings in {}", store.display());
                }
                EmbeddingScope::Speaker => {
                    let mut by_speaker: HashMap<String, Vec<_>> = HashMap::new();
                    for e in utt_embs {
                        by_speaker.entry(e.speaker_id.clone()).or_default().push(e);
                    }
                    let mut speakers: Vec<_> = by_speaker.keys().cloned().collect();
                    speakers.sort();
                    for s in &speakers {
                        out_store.put(&speaker_embedding(&by_speaker[s])?)?;
                    }
                    println!("stored {} speaker embeddings in {}", speakers.len(), store.display());
                }
            }
            Ok(())
        }
        EmbedCmd::Export { store, out } => {
            fs::create_dir_all(&out)?;
            for name in ["vectors.bin", "index.txt"] {
                let src = store.join(name);
                if src.exists() {
                    fs::copy(&src, out.join(name))
                        .with_context(|| format!("copying {}", src.display()))?;
                }
            }
            println!("exported store {} -> {}", store.display(), out.display());
            Ok(())
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON file with {"model": ModelConfig, "train": TrainConfig};
    /// both sections optional, flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    dev_manifest: Option<PathBuf>,
    #[arg(long)]
    feats: PathBuf,
    #[arg(long)]
    cmvn: PathBuf,
    /// Token inventory file; derived from the training transcripts when
    /// absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Embedding store (speaker scope) for adapted systems.
    #[arg(long)]
    embed_store: Option<PathBuf>,
    /// none | add | cat.
    #[arg(long)]
    adapt: Option<String>,
    /// none | B | T | F.
    #[arg(long)]
    norm: Option<String>,
    /// on | off: SpecAugment over the joint 595-dim matrix.
    #[arg(long)]
    specaug_joint: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct TrainFileConfig {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let file_cfg: TrainFileConfig = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainFileConfig::default(),
    };
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    if let Some(mode) = &args.adapt {
        train_cfg.adapt.mode = mode.parse::<AdaptMode>()?;
    }
    if let Some(norm) = &args.norm {
        train_cfg.adapt.norm_axis = norm.parse::<NormAxis>()?;
    }
    if let Some(sj) = &args.specaug_joint {
        train_cfg.adapt.specaug_joint = match sj.as_str() {
            "on" => true,
            "off" => false,
            other => bail!("--specaug-joint takes on|off, got {other:?}"),
        };
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    let mut model_cfg = file_cfg
        .model
        .unwrap_or_else(|| ModelConfig::desk(train_cfg.adapt.input_dim()));
    model_cfg.input_dim = train_cfg.adapt.input_dim();

    let train_m = load_manifest(&args.train_manifest)?;
    let dev_m = args.dev_manifest.as_ref().map(|p| load_manifest(p)).transpose()?;
    let archive = FeatureArchive::open(&args.feats)?;
    let cmvn = CmvnStats::load(&args.cmvn)?;
    let vocab = match &args.vocab {
        Some(p) => Vocab::load(p)?,
        None => Vocab::char_vocab(train_m.records.iter().map(|r| r.transcript.as_str()))?,
    };
    let store = args
        .embed_store
        .as_ref()
        .map(|p| EmbeddingStore::open_or_create(p))
        .transpose()?;
    if train_cfg.adapt.mode != AdaptMode::None && store.is_none() {
        bail!("--adapt {:?} needs --embed-store", train_cfg.adapt.mode);
    }
    let store_ref = store.as_ref().map(|s| (s, EmbeddingScope::Speaker));
    let train_items = build_items(&train_m, &archive, &cmvn, &vocab, store_ref)?;
    let dev_items = match &dev_m {
        Some(m) => build_items(m, &archive, &cmvn, &vocab, store_ref)?,
        None => Vec::new(),
    };

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("train_config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "model": &model_cfg,
            "train": &train_cfg,
        }))?,
    )?;
    let mut model = AsrModel::new(model_cfg, vocab, &train_cfg.adapt, train_cfg.seed)?;
    let report = train_loop(&mut model, &train_items, &dev_items, &train_cfg, &args.out)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let averaged = average_checkpoints(&report.checkpoint_paths, train_cfg.average_k)?;
    let final_path = args.out.join("final.ckpt");
    save_checkpoint(
        &final_path,
        &averaged.model,
        &train_cfg.adapt,
        averaged.epoch,
        averaged.dev_loss,
    )?;
    let last = report.log.last().expect("at least one epoch");
    println!(
        "trained {} epochs (final train loss {:.4}, dev loss {:.4}); averaged best {} -> {}",
        last.epoch,
        last.train_loss,
        last.dev_loss,
        train_cfg.average_k,
        final_path.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    feats: PathBuf,
    #[arg(long)]
    cmvn: PathBuf,
    /// Embedding store with utterance-scope vectors (adapted systems).
    #[arg(long)]
    embed_store: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, default_value_t = 0.3)]
    ctc_weight: f64,
    #[arg(long, default_value_t = 0.8)]
    max_len_ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn decode(args: DecodeArgs) -> Result<()> {
    let ckpt = satr_core::trainer::load_checkpoint(&args.ckpt)?;
    let m = load_manifest(&args.manifest)?;
    let archive = FeatureArchive::open(&args.feats)?;
    let cmvn = CmvnStats::load(&args.cmvn)?;
    let store = args
        .embed_store
        .as_ref()
        .map(|p| EmbeddingStore::open_or_create(p))
        .transpose()?;
    let beam_cfg = BeamConfig {
        beam: args.beam,
        ctc_weight: args.ctc_weight,
        max_len_ratio: args.max_len_ratio,
    };
    let hyps = decode_with_checkpoint(&ckpt, &m, &archive, &cmvn, store.as_ref(), &beam_cfg)?;
    save_hypotheses(&hyps, &args.out)?;
    println!("decoded {} utterances -> {}", hyps.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    hyps: PathBuf,
    #[arg(long, default_value = "system")]
    system: String,
    #[arg(long, default_value = "5,15", value_parser = parse_edges)]
    edges: Edges,
    /// Output directory for `<system>.scores.json` and the report pair.
    #[arg(long)]
    out: PathBuf,
}

pub fn score(args: ScoreArgs) -> Result<()> {
    let m = load_manifest(&args.manifest)?;
    let hyps = load_hypotheses(&args.hyps)?;
    let scores = score_hypotheses(&m, &hyps)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join(format!("{}.scores.json", args.system)),
        serde_json::to_string_pretty(&scores)?,
    )?;
    let report = bucket_report(&[(args.system.clone(), scores)], &args.edges.0)?;
    fs::write(args.out.join(format!("{}.report.txt", args.system)), report.to_table())?;
    fs::write(args.out.join(format!("{}.report.csv", args.system)), report.to_csv())?;
    print!("{}", report.to_table());
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Per-system `.scores.json` files from `satr score`.
    #[arg(long, required = true)]
    scores: Vec<PathBuf>,
    /// Comma-separated subset/order of systems to include.
    #[arg(long)]
    systems: Option<String>,
    #[arg(long, default_value = "5,15", value_parser = parse_edges)]
    edges: Edges,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn report(args: ReportArgs) -> Result<()> {
    let mut rows: Vec<(String, Vec<UttScore>)> = Vec::new();
    for path in &args.scores {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".scores.json"))
            .unwrap_or("system")
            .to_string();
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let scores: Vec<UttScore> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        rows.push((name, scores));
    }
    if let Some(filter) = &args.systems {
        let wanted: Vec<&str> = filter.split(',').map(|s| s.trim()).collect();
        let mut picked = Vec::new();
        for name in &wanted {
            match rows.iter().find(|(n, _)| n == name) {
                Some(row) => picked.push(row.clone()),
                None => bail!("system {name:?} not among provided score files"),
            }
        }
        rows = picked;
    }
    let report = bucket_report(&rows, &args.edges.0)?;
    print!("{}", report.to_table());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.txt"), report.to_table())?;
        fs::write(dir.join("comparison.csv"), report.to_csv())?;
    }
    Ok(())
}

#[derive(Args)]
pub struct RunArgs {
    /// JSON RunConfig. Environment variables with the `SATR_` prefix
    /// override config keys (`__` separates nesting levels, e.g.
    /// `SATR_TRAIN__EPOCHS=5`); flags override both.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated system subset, e.g. baseline,s_cat.
    #[arg(long)]
    systems: Option<String>,
    #[arg(long, value_parser = parse_edges)]
    edges: Option<Edges>,
}

/// Apply `SATR_*` environment overrides onto the raw config JSON.
fn apply_env_overrides(value: &mut serde_json::Value) {
    for (key, val) in std::env::vars() {
        let Some(path) = key.strip_prefix("SATR_") else { continue };
        let segments: Vec<String> = path.split("__").map(|s| s.to_lowercase()).collect();
        let mut cursor: Option<&mut serde_json::Value> = Some(value);
        for seg in &segments[..segments.len() - 1] {
            cursor = cursor.and_then(|c| c.get_mut(seg));
        }
        let Some(parent) = cursor else { continue };
        let leaf = &segments[segments.len() - 1];
        let parsed: serde_json::Value = serde_json::from_str(&val)
            .unwrap_or_else(|_| serde_json::Value::String(val.clone()));
        if let Some(obj) = parent.as_object_mut() {
            obj.insert(leaf.clone(), parsed);
        }
    }
}

pub fn run(args: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut raw: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    apply_env_overrides(&mut raw);
    let mut cfg: RunConfig = serde_json::from_value(raw)
        .with_context(|| format!("interpreting {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.corpus.seed = seed;
    }
    if let Some(systems) = &args.systems {
        cfg.systems = systems.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(edges) = &args.edges {
        cfg.edges = edges.0.clone();
    }
    let out = run_experiment(&cfg, &args.out)?;
    println!("== dev ==");
    print!("{}", out.dev_report.to_table());
    println!("== test ==");
    print!("{}", out.test_report.to_table());
    println!("reports under {}", out.report_dir.display());
    Ok(())
}
