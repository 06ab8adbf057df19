//! Speaker-embedding injection at the encoder input.
//!
//! Pipeline for add/cat modes: L2-normalize the 512-dim embedding along
//! the chosen axis, broadcast it next to the 83-dim CMVN features to form
//! the T x 595 joint matrix, SpecAugment the joint matrix (training
//! only), split, down-project each frame's embedding slice to 83 through
//! a learned affine map, then add it to or concatenate it with the
//! feature frames. The down-projection lives in the model's parameter
//! set and trains jointly with it; embeddings themselves stay frozen.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingScope, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::nn::{params, Graph, ParamSet, Tensor};
use crate::specaug::{spec_augment, SpecAugPolicy};

pub const FEAT_DIM: usize = 83;
pub const EMBED_DIM: usize = 512;
pub const JOINT_DIM: usize = FEAT_DIM + EMBED_DIM;
pub const CAT_DIM: usize = 2 * FEAT_DIM;

pub const DOWNPROJ_W: &str = "adapt.downproj.w";
pub const DOWNPROJ_B: &str = "adapt.downproj.b";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    None,
    Add,
    Cat,
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptMode::None),
            "add" => Ok(AdaptMode::Add),
            "cat" => Ok(AdaptMode::Cat),
            other => Err(Error::InvalidConfig(format!(
                "unknown adapt mode {other:?} (valid: none, add, cat)"
            ))),
        }
    }
}

/// Axis of the B x T x 512 embedding block that L2 normalization runs
/// over. T is the paper's choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormAxis {
    #[serde(rename = "none")]
    None,
    B,
    T,
    F,
}

impl std::str::FromStr for NormAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormAxis::None),
            "B" | "b" => Ok(NormAxis::B),
            "T" | "t" => Ok(NormAxis::T),
            "F" | "f" => Ok(NormAxis::F),
            other => Err(Error::InvalidConfig(format!(
                "unknown norm axis {other:?} (valid: none, B, T, F)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub norm_axis: NormAxis,
    /// SpecAugment spans the joint 595-dim matrix when true; with false,
    /// masking applies to the 83 feature dims only.
    pub specaug_joint: bool,
    pub epsilon: f64,
    pub specaug: SpecAugPolicy,
    /// Alternative pipeline order: SpecAugment the raw joint matrix and
    /// normalize the (masked) embedding block afterwards.
    #[serde(default)]
    pub normalize_after_specaug: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::None,
            norm_axis: NormAxis::T,
            specaug_joint: true,
            epsilon: 1e-8,
            specaug: SpecAugPolicy::default(),
            normalize_after_specaug: false,
        }
    }
}

impl AdaptConfig {
    pub fn baseline() -> Self {
        AdaptConfig::default()
    }

    pub fn with_mode(mode: AdaptMode) -> Self {
        AdaptConfig {
            mode,
            ..AdaptConfig::default()
        }
    }

    /// Model input width this config produces.
    pub fn input_dim(&self) -> usize {
        match self.mode {
            AdaptMode::Cat => CAT_DIM,
            _ => FEAT_DIM,
        }
    }
}

pub fn add_downproj_params(params: &mut ParamSet, rng: &mut impl Rng) {
    params.insert(
        DOWNPROJ_W,
        params::xavier(&[FEAT_DIM, EMBED_DIM], EMBED_DIM, FEAT_DIM, rng),
    );
    params.insert(DOWNPROJ_B, params::zeros(&[FEAT_DIM]));
}

/// Broadcast-join: output[:, 0..83] = features, output[:, 83..595] = emb
/// in every row.
pub fn join(features: &Array2<f64>, emb: &Array1<f64>) -> Result<Array2<f64>> {
    if features.ncols() != FEAT_DIM {
        return Err(Error::DimensionMismatch {
            what: "join features".into(),
            expected: FEAT_DIM,
            got: features.ncols(),
        });
    }
    if emb.len() != EMBED_DIM {
        return Err(Error::DimensionMismatch {
            what: "join embedding".into(),
            expected: EMBED_DIM,
            got: emb.len(),
        });
    }
    let t = features.nrows();
    let mut out = Array2::zeros((t, JOINT_DIM));
    out.slice_mut(ndarray::s![.., ..FEAT_DIM]).assign(features);
    for mut row in out.slice_mut(ndarray::s![.., FEAT_DIM..]).rows_mut() {
        row.assign(emb);
    }
    Ok(out)
}

/// L2 normalization result; `warning` is set for degenerate cases
/// (currently B-axis normalization at batch size 1).
pub struct Normalized {
    pub data: Array3<f64>,
    pub warning: Option<String>,
}

/// Divide each element by the L2 norm of its slice along `axis`, plus
/// epsilon. Axes follow the B x T x D layout: F runs over the 512 dims
/// of each (b, t); T over frames of each (b, d); B over the batch of
/// each (t, d).
pub fn l2_normalize(e: &Array3<f64>, axis: NormAxis, eps: f64) -> Normalized {
    let (b, t, d) = e.dim();
    let mut out = e.clone();
    let mut warning = None;
    match axis {
        NormAxis::None => {}
        NormAxis::F => {
            for bi in 0..b {
                for ti in 0..t {
                    let norm = e
                        .slice(ndarray::s![bi, ti, ..])
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    out.slice_mut(ndarray::s![bi, ti, ..])
                        .mapv_inplace(|v| v / (norm + eps));
                }
            }
        }
        NormAxis::T => {
            for bi in 0..b {
                for di in 0..d {
                    let norm = e
                        .slice(ndarray::s![bi, .., di])
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    out.slice_mut(ndarray::s![bi, .., di])
                        .mapv_inplace(|v| v / (norm + eps));
                }
            }
        }
        NormAxis::B => {
            if b == 1 {
                warning = Some(
                    "B-axis L2 normalization with batch size 1 degenerates to elementwise sign"
                        .to_string(),
                );
                log::warn!("B-axis L2 normalization with batch size 1 degenerates to elementwise sign");
            }
            for ti in 0..t {
                for di in 0..d {
                    let norm = e
                        .slice(ndarray::s![.., ti, di])
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt();
                    out.slice_mut(ndarray::s![.., ti, di])
                        .mapv_inplace(|v| v / (norm + eps));
                }
            }
        }
    }
    Normalized { data: out, warning }
}

/// Graph-side down-projection of per-frame embeddings:
/// `[T, 512] -> [T, 83]` through the learned affine map.
pub fn down_project_graph(g: &mut Graph, params: &ParamSet, emb_rows: Tensor) -> Tensor {
    let w = g.param(params, DOWNPROJ_W); // [83, 512]
    let wt = g.transpose(w); // [512, 83]
    let mm = g.matmul(emb_rows, wt);
    let b = g.param(params, DOWNPROJ_B);
    g.add_bias(mm, b)
}

/// Numeric down-projection of a single 512-dim vector.
pub fn down_project(params: &ParamSet, emb: &Array1<f64>) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let rows = emb.clone().insert_axis(Axis(0));
    let e = g.input2(&rows);
    let out = down_project_graph(&mut g, params, e);
    Ok(g.value2(out).row(0).to_owned())
}

/// Numeric injection used by tests: add or concatenate a projected
/// 83-dim embedding to every feature row.
pub fn inject(features: &Array2<f64>, e83: &Array1<f64>, mode: AdaptMode) -> Result<Array2<f64>> {
    if e83.len() != FEAT_DIM || features.ncols() != FEAT_DIM {
        return Err(Error::DimensionMismatch {
            what: "inject".into(),
            expected: FEAT_DIM,
            got: e83.len().max(features.ncols()),
        });
    }
    match mode {
        AdaptMode::None => Ok(features.clone()),
        AdaptMode::Add => Ok(features + &e83.view().insert_axis(Axis(0))),
        AdaptMode::Cat => {
            let t = features.nrows();
            let mut out = Array2::zeros((t, CAT_DIM));
            out.slice_mut(ndarray::s![.., ..FEAT_DIM]).assign(features);
            for mut row in out.slice_mut(ndarray::s![.., FEAT_DIM..]).rows_mut() {
                row.assign(e83);
            }
            Ok(out)
        }
    }
}

/// Result of the adapted front-end: the model-input tensor plus any
/// normalization warning to surface.
#[derive(Debug)]
pub struct AdaptedInput {
    pub input: Tensor,
    pub warning: Option<String>,
}

/// Build the adapted model input on the graph.
///
/// `training` selects the embedding-scope rule (training consumes
/// speaker-scope embeddings, inference consumes utterance-scope ones);
/// `augment` additionally gates SpecAugment, so dev-loss evaluation can
/// run on the training side without masking.
pub fn adapt_frontend_graph(
    g: &mut Graph,
    params: &ParamSet,
    features: &Array2<f64>,
    emb: Option<&SpeakerEmbedding>,
    cfg: &AdaptConfig,
    training: bool,
    augment: bool,
    sa_rng: &mut impl Rng,
) -> Result<AdaptedInput> {
    let augment = training && augment;
    if cfg.mode == AdaptMode::None {
        let x = if augment && cfg.specaug.enabled {
            spec_augment(features, &cfg.specaug, sa_rng)
        } else {
            features.clone()
        };
        return Ok(AdaptedInput {
            input: g.input2(&x),
            warning: None,
        });
    }

    let emb = emb.ok_or_else(|| {
        Error::InvalidConfig(format!("adapt mode {:?} needs a speaker embedding", cfg.mode))
    })?;
    let expected_scope = if training {
        EmbeddingScope::Speaker
    } else {
        EmbeddingScope::Utterance
    };
    if emb.scope != expected_scope {
        return Err(Error::ScopeViolation {
            context: if training { "training" } else { "decoding" }.into(),
            expected: format!("{expected_scope:?}"),
            got: format!("{:?}", emb.scope),
        });
    }
    if features.ncols() != FEAT_DIM {
        return Err(Error::DimensionMismatch {
            what: "adapt_frontend features".into(),
            expected: FEAT_DIM,
            got: features.ncols(),
        });
    }

    let t = features.nrows();
    let mut warning = None;

    // Embedding block broadcast over frames, normalized before joining
    // unless the alternative order is selected.
    let broadcast = |v: &Array1<f64>| -> Array3<f64> {
        let mut block = Array3::zeros((1, t, EMBED_DIM));
        for ti in 0..t {
            block.slice_mut(ndarray::s![0, ti, ..]).assign(v);
        }
        block
    };
    let mut block = broadcast(&emb.vector);
    if !cfg.normalize_after_specaug {
        let n = l2_normalize(&block, cfg.norm_axis, cfg.epsilon);
        block = n.data;
        warning = n.warning;
    }
    let emb_rows: Array2<f64> = block.index_axis(Axis(0), 0).to_owned();

    // SpecAugment: joint matrix, or features alone when not joint.
    let (feat_part, mut emb_part) = if augment && cfg.specaug.enabled {
        if cfg.specaug_joint {
            let joint = {
                let mut j = Array2::zeros((t, JOINT_DIM));
                j.slice_mut(ndarray::s![.., ..FEAT_DIM]).assign(features);
                j.slice_mut(ndarray::s![.., FEAT_DIM..]).assign(&emb_rows);
                j
            };
            let masked = spec_augment(&joint, &cfg.specaug, sa_rng);
            (
                masked.slice(ndarray::s![.., ..FEAT_DIM]).to_owned(),
                masked.slice(ndarray::s![.., FEAT_DIM..]).to_owned(),
            )
        } else {
            (spec_augment(features, &cfg.specaug, sa_rng), emb_rows)
        }
    } else {
        (features.clone(), emb_rows)
    };

    if cfg.normalize_after_specaug {
        let block = emb_part.clone().insert_axis(Axis(0));
        let n = l2_normalize(&block, cfg.norm_axis, cfg.epsilon);
        emb_part = n.data.index_axis(Axis(0), 0).to_owned();
        warning = n.warning;
    }

    let feat_t = g.input2(&feat_part);
    let emb_t = g.input2(&emb_part);
    let proj = down_project_graph(g, params, emb_t);
    let input = match cfg.mode {
        AdaptMode::Add => g.add(feat_t, proj),
        AdaptMode::Cat => g.concat_cols(&[feat_t, proj]),
        AdaptMode::None => unreachable!(),
    };
    Ok(AdaptedInput { input, warning })
}
