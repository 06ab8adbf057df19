//! Toy speaker-embedding extractor: a small frame encoder (feed-forward
//! or single self-attention block), mean+stddev statistics pooling, a
//! projection to 512 dims, and a speaker-classification head. The two
//! encoder flavors stand in for the x-vector (TDNN) and s-vector
//! (transformer) extractors; the ASR-side injection mechanism is
//! identical for any 512-dim vector.
//!
//! The attention flavor uses no positional encoding, so both flavors are
//! exactly permutation-invariant through the pooling layer.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::frontend::{cmvn_apply, CmvnStats, FeatureArchive};
use crate::model::{add_linear_params, add_ln_params, add_mha_params, layer_norm_p, linear_p, multi_head_attention};
use crate::nn::optim::Adam;
use crate::nn::{Graph, ParamSet, Tensor};
use crate::util::stream_rng;

pub const EMBED_DIM: usize = 512;
const POOL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingScope {
    /// One vector per speaker (training side).
    Speaker,
    /// One vector per utterance (decoding side).
    Utterance,
}

impl std::fmt::Display for EmbeddingScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EmbeddingScope::Speaker => write!(f, "speaker"),
            EmbeddingScope::Utterance => write!(f, "utterance"),
        }
    }
}

impl std::str::FromStr for EmbeddingScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(EmbeddingScope::Speaker),
            "utterance" => Ok(EmbeddingScope::Utterance),
            other => Err(Error::InvalidConfig(format!(
                "unknown scope {other:?} (valid: speaker, utterance)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpeakerEmbedding {
    pub vector: Array1<f64>,
    pub scope: EmbeddingScope,
    /// speaker_id for speaker scope, utt_id for utterance scope.
    pub id: String,
    pub speaker_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderFlavor {
    /// Feed-forward frame encoder (x-vector-like).
    Ff,
    /// Single self-attention block (s-vector-like).
    Attn,
}

impl std::str::FromStr for EmbedderFlavor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ff" | "x" => Ok(EmbedderFlavor::Ff),
            "attn" | "s" => Ok(EmbedderFlavor::Attn),
            other => Err(Error::InvalidConfig(format!(
                "unknown embedder flavor {other:?} (valid: ff, attn)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub flavor: EmbedderFlavor,
    pub hidden: usize,
    pub heads: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Training crops are capped at this many frames.
    pub crop_frames: usize,
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            flavor: EmbedderFlavor::Ff,
            hidden: 48,
            heads: 2,
            epochs: 20,
            lr: 1e-3,
            crop_frames: 200,
            input_dim: 83,
            seed: 0,
        }
    }
}

/// Trained extractor plus the speaker inventory it classifies over.
#[derive(Debug, Clone)]
pub struct EmbedderModel {
    pub cfg: EmbedderConfig,
    pub params: ParamSet,
    pub speakers: Vec<String>,
}

impl EmbedderModel {
    fn new(cfg: EmbedderConfig, speakers: Vec<String>) -> Self {
        let mut rng = stream_rng(cfg.seed, &["embedder-init"]);
        let mut p = ParamSet::new();
        let h = cfg.hidden;
        match cfg.flavor {
            EmbedderFlavor::Ff => {
                add_linear_params(&mut p, "f1", cfg.input_dim, h, &mut rng);
                add_linear_params(&mut p, "f2", h, h, &mut rng);
            }
            EmbedderFlavor::Attn => {
                add_linear_params(&mut p, "pre", cfg.input_dim, h, &mut rng);
                add_mha_params(&mut p, "attn", h, &mut rng);
                add_ln_params(&mut p, "ln1", h);
                add_linear_params(&mut p, "ffn.1", h, 2 * h, &mut rng);
                add_linear_params(&mut p, "ffn.2", 2 * h, h, &mut rng);
                add_ln_params(&mut p, "ln2", h);
            }
        }
        add_linear_params(&mut p, "proj", 2 * h, EMBED_DIM, &mut rng);
        add_linear_params(&mut p, "cls", EMBED_DIM, speakers.len(), &mut rng);
        EmbedderModel {
            cfg,
            params: p,
            speakers,
        }
    }

    /// Frame encoder + stats pooling + projection: [T, in] -> [1, 512].
    fn embedding_graph(&self, g: &mut Graph, x: Tensor) -> Tensor {
        let p = &self.params;
        let encoded = match self.cfg.flavor {
            EmbedderFlavor::Ff => {
                let h1 = linear_p(g, p, "f1", x);
                let r1 = g.relu(h1);
                let h2 = linear_p(g, p, "f2", r1);
                g.relu(h2)
            }
            EmbedderFlavor::Attn => {
                let pre = linear_p(g, p, "pre", x);
                let h = g.relu(pre);
                let mut sink = Vec::new();
                let mut rng = stream_rng(0, &["unused"]);
                let a = multi_head_attention(
                    g, p, "attn", h, h, self.cfg.heads, None, 0.0, false, &mut rng, &mut sink,
                );
                let res = g.add(h, a);
                let n1 = layer_norm_p(g, p, "ln1", res);
                let f1 = linear_p(g, p, "ffn.1", n1);
                let fr = g.relu(f1);
                let f2 = linear_p(g, p, "ffn.2", fr);
                let res2 = g.add(n1, f2);
                layer_norm_p(g, p, "ln2", res2)
            }
        };
        let mean = g.mean_rows(encoded);
        let std = g.std_rows(encoded, POOL_EPS);
        let pooled = g.concat_cols(&[mean, std]);
        linear_p(g, p, "proj", pooled)
    }

    fn logits_graph(&self, g: &mut Graph, x: Tensor) -> Tensor {
        let emb = self.embedding_graph(g, x);
        let r = g.relu(emb);
        linear_p(g, &self.params, "cls", r)
    }

    pub fn classify(&self, features: &Array2<f64>) -> Result<usize> {
        if features.nrows() == 0 {
            return Err(Error::Msg("empty feature matrix".into()));
        }
        let mut g = Graph::new();
        let x = g.input2(features);
        let logits = self.logits_graph(&mut g, x);
        let v = g.value2(logits);
        Ok(v.row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0)
    }
}

/// Deterministic utterance embedding: pooling over all frames.
pub fn extract_utterance_embedding(
    model: &EmbedderModel,
    features: &Array2<f64>,
    utt_id: &str,
    speaker_id: &str,
) -> Result<SpeakerEmbedding> {
    if features.nrows() == 0 {
        return Err(Error::Msg(format!("empty feature matrix for {utt_id}")));
    }
    let mut g = Graph::new();
    let x = g.input2(features);
    let emb = model.embedding_graph(&mut g, x);
    Ok(SpeakerEmbedding {
        vector: g.value2(emb).row(0).to_owned(),
        scope: EmbeddingScope::Utterance,
        id: utt_id.to_string(),
        speaker_id: speaker_id.to_string(),
    })
}

/// Speaker embedding: arithmetic mean of one speaker's utterance
/// embeddings.
pub fn speaker_embedding(utterance_embeddings: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let first = utterance_embeddings
        .first()
        .ok_or_else(|| Error::Msg("no utterance embeddings".into()))?;
    let speaker = first.speaker_id.clone();
    let mut acc = Array1::zeros(EMBED_DIM);
    for e in utterance_embeddings {
        if e.speaker_id != speaker {
            return Err(Error::Msg(format!(
                "mixed speakers in speaker_embedding: {speaker} vs {}",
                e.speaker_id
            )));
        }
        if e.scope != EmbeddingScope::Utterance {
            return Err(Error::ScopeViolation {
                context: "speaker_embedding".into(),
                expected: "Utterance".into(),
                got: format!("{:?}", e.scope),
            });
        }
        acc += &e.vector;
    }
    acc.mapv_inplace(|v| v / utterance_embeddings.len() as f64);
    Ok(SpeakerEmbedding {
        vector: acc,
        scope: EmbeddingScope::Speaker,
        id: speaker.clone(),
        speaker_id: speaker,
    })
}

/// Cross-entropy speaker-classification training over (cropped)
/// utterance features. Deterministic under the config seed.
pub fn train_embedder(
    manifest: &Manifest,
    archive: &FeatureArchive,
    cmvn: Option<&CmvnStats>,
    cfg: &EmbedderConfig,
) -> Result<(EmbedderModel, f64)> {
    let speakers = manifest.speakers();
    if speakers.len() < 2 {
        return Err(Error::SingleSpeaker);
    }
    let label_of: HashMap<&str, usize> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let mut feats: Vec<(String, usize, Array2<f64>)> = Vec::new();
    for r in &manifest.records {
        let raw = archive.get(&r.utt_id)?;
        let f = match cmvn {
            Some(stats) => cmvn_apply(&raw, stats)?,
            None => raw,
        };
        feats.push((r.utt_id.clone(), label_of[r.speaker_id.as_str()], f));
    }

    let model = EmbedderModel::new(cfg.clone(), speakers.clone());
    let mut params = model.params.clone();
    let mut adam = Adam::new(params.len());

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..feats.len()).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, &["embed-shuffle", &epoch.to_string()]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &idx in &order {
            let (utt_id, label, f) = &feats[idx];
            let mut crop_rng = stream_rng(cfg.seed, &["embed-crop", &epoch.to_string(), utt_id]);
            let view = if f.nrows() > cfg.crop_frames {
                let start = crop_rng.random_range(0..f.nrows() - cfg.crop_frames);
                f.slice(ndarray::s![start..start + cfg.crop_frames, ..])
                    .to_owned()
            } else {
                f.clone()
            };
            let probe = EmbedderModel {
                cfg: cfg.clone(),
                params: params.clone(),
                speakers: speakers.clone(),
            };
            let mut g = Graph::new();
            let x = g.input2(&view);
            let logits = probe.logits_graph(&mut g, x);
            let loss = g.cross_entropy_ls(logits, &[*label], 0.0);
            let mut grads = g.backward(loss, params.len());
            grads.clip_global_norm(5.0);
            adam.step(&mut params, &grads, cfg.lr);
        }
    }

    let trained = EmbedderModel {
        cfg: cfg.clone(),
        params,
        speakers,
    };
    let mut correct = 0usize;
    for (_, label, f) in &feats {
        if trained.classify(f)? == *label {
            correct += 1;
        }
    }
    let acc = correct as f64 / feats.len() as f64;
    Ok((trained, acc))
}

const EMBEDDER_MAGIC: &[u8; 8] = b"SATREMBD";

#[derive(Debug, Serialize, Deserialize)]
struct EmbedderHeader {
    cfg: EmbedderConfig,
    speakers: Vec<String>,
    arrays: Vec<(String, Vec<usize>)>,
}

pub fn save_embedder(model: &EmbedderModel, path: &Path) -> Result<()> {
    let header = EmbedderHeader {
        cfg: model.cfg.clone(),
        speakers: model.speakers.clone(),
        arrays: model
            .params
            .iter()
            .map(|(n, a)| (n.to_string(), a.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Msg(format!("embedder header: {e}")))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(EMBEDDER_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&1u32.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&json).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for (_, a) in model.params.iter() {
        let std_a = a.as_standard_layout();
        for v in std_a.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_embedder(path: &Path) -> Result<EmbedderModel> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != EMBEDDER_MAGIC {
        return Err(Error::Msg(format!("{}: not an embedder file", path.display())));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    if u32::from_le_bytes(word) != 1 {
        return Err(Error::Msg(format!("{}: unsupported embedder version", path.display())));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
    let mut json = vec![0u8; u64::from_le_bytes(len8) as usize];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: EmbedderHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Msg(format!("embedder header: {e}")))?;
    let mut params = ParamSet::new();
    for (name, shape) in &header.arrays {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        f.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(
            name,
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), vals)
                .map_err(|e| Error::Msg(format!("embedder array {name}: {e}")))?,
        );
    }
    Ok(EmbedderModel {
        cfg: header.cfg,
        params,
        speakers: header.speakers,
    })
}

/// Append-only embedding store: raw f64 vectors plus a text index.
pub struct EmbeddingStore {
    dir: PathBuf,
    index: HashMap<(String, EmbeddingScope), (u64, String)>,
}

impl EmbeddingStore {
    pub fn open_or_create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = HashMap::new();
        let idx_path = dir.join("index.txt");
        if idx_path.exists() {
            let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 4 {
                    return Err(Error::Parse {
                        file: idx_path.clone(),
                        line: i + 1,
                        msg: "expected 4 fields".into(),
                    });
                }
                let scope: EmbeddingScope = f[1].parse()?;
                let rec: u64 = f[3].parse().map_err(|_| Error::Parse {
                    file: idx_path.clone(),
                    line: i + 1,
                    msg: format!("bad record index {:?}", f[3]),
                })?;
                index.insert((f[0].to_string(), scope), (rec, f[2].to_string()));
            }
        }
        Ok(EmbeddingStore {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn put(&mut self, emb: &SpeakerEmbedding) -> Result<()> {
        if emb.vector.len() != EMBED_DIM {
            return Err(Error::DimensionMismatch {
                what: "embedding store put".into(),
                expected: EMBED_DIM,
                got: emb.vector.len(),
            });
        }
        let key = (emb.id.clone(), emb.scope);
        if self.index.contains_key(&key) {
            return Err(Error::InvalidConfig(format!(
                "embedding {} ({}) already stored",
                emb.id, emb.scope
            )));
        }
        let rec = self.index.len() as u64;
        let bin_path = self.dir.join("vectors.bin");
        let mut bin = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&bin_path)
            .map_err(|e| Error::io(&bin_path, e))?;
        let mut bytes = Vec::with_capacity(EMBED_DIM * 8);
        for v in emb.vector.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&bytes).map_err(|e| Error::io(&bin_path, e))?;
        let idx_path = self.dir.join("index.txt");
        let mut idx = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&idx_path)
            .map_err(|e| Error::io(&idx_path, e))?;
        writeln!(idx, "{}\t{}\t{}\t{rec}", emb.id, emb.scope, emb.speaker_id)
            .map_err(|e| Error::io(&idx_path, e))?;
        self.index.insert(key, (rec, emb.speaker_id.clone()));
        Ok(())
    }

    pub fn get(&self, id: &str, scope: EmbeddingScope) -> Result<SpeakerEmbedding> {
        let (rec, speaker_id) = self
            .index
            .get(&(id.to_string(), scope))
            .ok_or_else(|| Error::NotFound(format!("embedding {id} ({scope})")))?;
        let bin_path = self.dir.join("vectors.bin");
        let mut f = fs::File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        f.seek(SeekFrom::Start(rec * (EMBED_DIM as u64) * 8))
            .map_err(|e| Error::io(&bin_path, e))?;
        let mut bytes = vec![0u8; EMBED_DIM * 8];
        f.read_exact(&mut bytes).map_err(|e| Error::io(&bin_path, e))?;
        let vector = Array1::from_iter(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
        );
        Ok(SpeakerEmbedding {
            vector,
            scope,
            id: id.to_string(),
            speaker_id: speaker_id.clone(),
        })
    }

    pub fn ids(&self, scope: EmbeddingScope) -> Vec<String> {
        let mut out: Vec<String> = self
            .index
            .keys()
            .filter(|(_, s)| *s == scope)
            .map(|(id, _)| id.clone())
            .collect();
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, DurationBucket, Grammar};
    use crate::frontend::{extract_manifest_features, FrontendConfig};

    fn rand_embedding(seed: u64, scope: EmbeddingScope, id: &str, spk: &str) -> SpeakerEmbedding {
        let mut rng = stream_rng(seed, &["emb"]);
        SpeakerEmbedding {
            vector: Array1::from_shape_fn(EMBED_DIM, |_| rng.random_range(-1.0..1.0)),
            scope,
            id: id.into(),
            speaker_id: spk.into(),
        }
    }

    fn untrained_model(flavor: EmbedderFlavor) -> EmbedderModel {
        EmbedderModel::new(
            EmbedderConfig {
                flavor,
                hidden: 16,
                seed: 5,
                ..EmbedderConfig::default()
            },
            vec!["a".into(), "b".into()],
        )
    }

    fn rand_feats(t: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, &["feats"]);
        Array2::from_shape_fn((t, 83), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        for flavor in [EmbedderFlavor::Ff, EmbedderFlavor::Attn] {
            let m = untrained_model(flavor);
            let f = rand_feats(20, 1);
            let mut shuffled = f.clone();
            let mut rng = stream_rng(2, &["perm"]);
            for i in (1..20).rev() {
                let j = rng.random_range(0..=i);
                if i != j {
                    let a = shuffled.row(i).to_owned();
                    let b = shuffled.row(j).to_owned();
                    shuffled.row_mut(i).assign(&b);
                    shuffled.row_mut(j).assign(&a);
                }
            }
            let e1 = extract_utterance_embedding(&m, &f, "u", "s").unwrap();
            let e2 = extract_utterance_embedding(&m, &shuffled, "u", "s").unwrap();
            for (a, b) in e1.vector.iter().zip(e2.vector.iter()) {
                assert!((a - b).abs() < 1e-9, "{flavor:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn duplicated_frames_give_identical_embedding() {
        let m = untrained_model(EmbedderFlavor::Ff);
        let f = rand_feats(15, 3);
        let mut dup = Array2::zeros((30, 83));
        dup.slice_mut(ndarray::s![..15, ..]).assign(&f);
        dup.slice_mut(ndarray::s![15.., ..]).assign(&f);
        let e1 = extract_utterance_embedding(&m, &f, "u", "s").unwrap();
        let e2 = extract_utterance_embedding(&m, &dup, "u", "s").unwrap();
        for (a, b) in e1.vector.iter().zip(e2.vector.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_features_are_rejected() {
        let m = untrained_model(EmbedderFlavor::Ff);
        assert!(extract_utterance_embedding(&m, &Array2::zeros((0, 83)), "u", "s").is_err());
    }

    #[test]
    fn speaker_embedding_is_the_mean() {
        let single = rand_embedding(1, EmbeddingScope::Utterance, "u1", "spk");
        let s = speaker_embedding(std::slice::from_ref(&single)).unwrap();
        assert_eq!(s.vector, single.vector);
        assert_eq!(s.scope, EmbeddingScope::Speaker);
        assert_eq!(s.id, "spk");

        let v = rand_embedding(2, EmbeddingScope::Utterance, "u1", "spk");
        let neg = SpeakerEmbedding {
            vector: v.vector.mapv(|x| -x),
            id: "u2".into(),
            ..v.clone()
        };
        let s = speaker_embedding(&[v, neg]).unwrap();
        assert!(s.vector.iter().all(|&x| x.abs() < 1e-15));

        let embs: Vec<SpeakerEmbedding> = (0..10)
            .map(|i| rand_embedding(10 + i, EmbeddingScope::Utterance, &format!("u{i}"), "spk"))
            .collect();
        let s = speaker_embedding(&embs).unwrap();
        for d in 0..EMBED_DIM {
            let oracle: f64 = embs.iter().map(|e| e.vector[d]).sum::<f64>() / 10.0;
            assert!((s.vector[d] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn speaker_embedding_rejects_mixed_speakers() {
        let a = rand_embedding(1, EmbeddingScope::Utterance, "u1", "spkA");
        let b = rand_embedding(2, EmbeddingScope::Utterance, "u2", "spkB");
        assert!(speaker_embedding(&[a, b]).is_err());
    }

    #[test]
    fn store_round_trip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::open_or_create(dir.path()).unwrap();
        let e = rand_embedding(4, EmbeddingScope::Speaker, "spk00", "spk00");
        store.put(&e).unwrap();
        let back = store.get("spk00", EmbeddingScope::Speaker).unwrap();
        for (a, b) in e.vector.iter().zip(back.vector.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(matches!(
            store.get("spk01", EmbeddingScope::Speaker),
            Err(Error::NotFound(_))
        ));
        // Same id under a different scope is a distinct key.
        assert!(store.get("spk00", EmbeddingScope::Utterance).is_err());
    }

    #[test]
    fn store_holds_hundreds_of_speakers_across_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EmbeddingStore::open_or_create(dir.path()).unwrap();
        for i in 0..273 {
            let id = format!("spk{i:03}");
            store
                .put(&rand_embedding(i as u64, EmbeddingScope::Speaker, &id, &id))
                .unwrap();
        }
        drop(store);
        let store = EmbeddingStore::open_or_create(dir.path()).unwrap();
        assert_eq!(store.ids(EmbeddingScope::Speaker).len(), 273);
        for i in 0..273 {
            let id = format!("spk{i:03}");
            let e = store.get(&id, EmbeddingScope::Speaker).unwrap();
            let want = rand_embedding(i as u64, EmbeddingScope::Speaker, &id, &id);
            assert_eq!(e.vector, want.vector);
        }
    }

    /// Shared corpus+features fixture for the training-dependent tests.
    fn trained_fixture() -> (
        tempfile::TempDir,
        Manifest,
        FeatureArchive,
        EmbedderModel,
        f64,
    ) {
        let spec = CorpusSpec {
            n_speakers: 4,
            utterances_per_speaker: 6,
            duration_distribution: vec![(DurationBucket::Less5, 1.0)],
            grammar: Grammar::default(),
            speaker_colors: None,
            speaker_template_shift_hz: 0.0,
            sample_rate: 16000,
            seed: 31,
        };
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&spec, dir.path()).unwrap();
        let feat_dir = dir.path().join("feats");
        extract_manifest_features(&manifest, &FrontendConfig::default(), &feat_dir).unwrap();
        let archive = FeatureArchive::open(&feat_dir).unwrap();
        let ids: Vec<String> = manifest.records.iter().map(|r| r.utt_id.clone()).collect();
        let cmvn = crate::frontend::compute_cmvn(&archive, &ids).unwrap();
        let cfg = EmbedderConfig {
            epochs: 15,
            hidden: 32,
            lr: 2e-3,
            crop_frames: 150,
            seed: 7,
            ..EmbedderConfig::default()
        };
        let (model, acc) = train_embedder(&manifest, &archive, Some(&cmvn), &cfg).unwrap();
        (dir, manifest, archive, model, acc)
    }

    #[test]
    fn training_separates_speakers_and_is_deterministic() {
        let (_dir, manifest, archive, model, acc) = trained_fixture();
        assert!(acc >= 0.9, "train accuracy {acc}");

        // Determinism: a second run reproduces identical parameters.
        let ids: Vec<String> = manifest.records.iter().map(|r| r.utt_id.clone()).collect();
        let cmvn = crate::frontend::compute_cmvn(&archive, &ids).unwrap();
        let cfg = model.cfg.clone();
        let (model2, acc2) = train_embedder(&manifest, &archive, Some(&cmvn), &cfg).unwrap();
        assert_eq!(acc, acc2);
        for (name, arr) in model.params.iter() {
            let other = model2.params.get(name).unwrap();
            assert_eq!(arr, other, "parameter {name} differs between runs");
        }

        // Same-utterance halves are closer than cross-speaker pairs.
        let mut same_sims = Vec::new();
        let mut embs_by_speaker: HashMap<String, Vec<Array1<f64>>> = HashMap::new();
        for r in &manifest.records {
            let f = cmvn_apply(&archive.get(&r.utt_id).unwrap(), &cmvn).unwrap();
            let half = f.nrows() / 2;
            if half < 10 {
                continue;
            }
            let a = extract_utterance_embedding(
                &model,
                &f.slice(ndarray::s![..half, ..]).to_owned(),
                &r.utt_id,
                &r.speaker_id,
            )
            .unwrap();
            let b = extract_utterance_embedding(
                &model,
                &f.slice(ndarray::s![half.., ..]).to_owned(),
                &r.utt_id,
                &r.speaker_id,
            )
            .unwrap();
            same_sims.push(cosine(&a.vector, &b.vector));
            let full = extract_utterance_embedding(&model, &f, &r.utt_id, &r.speaker_id).unwrap();
            embs_by_speaker
                .entry(r.speaker_id.clone())
                .or_default()
                .push(full.vector);
        }
        let same_avg: f64 = same_sims.iter().sum::<f64>() / same_sims.len() as f64;
        let speakers: Vec<&String> = embs_by_speaker.keys().collect();
        let mut cross = Vec::new();
        for i in 0..speakers.len() {
            for j in i + 1..speakers.len() {
                for a in &embs_by_speaker[speakers[i]] {
                    for b in &embs_by_speaker[speakers[j]] {
                        cross.push(cosine(a, b));
                    }
                }
            }
        }
        let cross_avg: f64 = cross.iter().sum::<f64>() / cross.len() as f64;
        assert!(
            same_avg > cross_avg,
            "same-utterance sim {same_avg} <= cross-speaker sim {cross_avg}"
        );
    }

    #[test]
    fn single_speaker_corpus_is_rejected() {
        let (_dir, mut manifest, archive, model, _) = trained_fixture();
        manifest.records.retain(|r| r.speaker_id == "spk00");
        let err = train_embedder(&manifest, &archive, None, &model.cfg).unwrap_err();
        assert!(matches!(err, Error::SingleSpeaker));
    }

    #[test]
    fn embedding_variance_shrinks_with_crop_length() {
        // Longer crops average more frames in stats pooling, so the
        // embedding varies less across draws.
        let (_dir, manifest, archive, model, _) = trained_fixture();
        let spk = "spk00";
        let ids: Vec<String> = manifest.records.iter().map(|r| r.utt_id.clone()).collect();
        let cmvn = crate::frontend::compute_cmvn(&archive, &ids).unwrap();
        let mut all: Option<Array2<f64>> = None;
        for r in manifest.records.iter().filter(|r| r.speaker_id == spk) {
            let f = cmvn_apply(&archive.get(&r.utt_id).unwrap(), &cmvn).unwrap();
            all = Some(match all {
                None => f,
                Some(a) => {
                    let mut cat = Array2::zeros((a.nrows() + f.nrows(), a.ncols()));
                    cat.slice_mut(ndarray::s![..a.nrows(), ..]).assign(&a);
                    cat.slice_mut(ndarray::s![a.nrows().., ..]).assign(&f);
                    cat
                }
            });
        }
        let all = all.unwrap();
        let mut spread = Vec::new();
        for (li, len) in [100usize, 300, 1000].iter().enumerate() {
            let len = (*len).min(all.nrows() - 1);
            let mut rng = stream_rng(17, &["crops", &li.to_string()]);
            let mut vecs = Vec::new();
            for _ in 0..20 {
                let start = rng.random_range(0..all.nrows() - len);
                let crop = all.slice(ndarray::s![start..start + len, ..]).to_owned();
                let e = extract_utterance_embedding(&model, &crop, "crop", spk).unwrap();
                vecs.push(e.vector);
            }
            let mean = {
                let mut m = Array1::<f64>::zeros(EMBED_DIM);
                for v in &vecs {
                    m += v;
                }
                m / vecs.len() as f64
            };
            let var: f64 = vecs
                .iter()
                .map(|v| (v - &mean).mapv(|x| x * x).sum())
                .sum::<f64>()
                / vecs.len() as f64;
            spread.push(var);
        }
        assert!(
            spread[0] > spread[1] && spread[1] > spread[2],
            "variance not monotone: {spread:?}"
        );
    }

    fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let na = a.dot(a).sqrt();
        let nb = b.dot(b).sqrt();
        a.dot(b) / (na * nb + 1e-12)
    }
}
