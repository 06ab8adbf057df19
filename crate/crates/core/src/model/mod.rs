//! Conv2d subsampler, transformer encoder-decoder, CTC head, and the
//! hybrid CTC/attention loss.
//!
//! The paper-scale configuration (12 encoder layers, 6 decoder layers,
//! d=256, 4 heads, FFN 2048) is kept as the `paper-nptel` preset; the
//! desk preset trains in minutes on CPU.

pub mod vocab;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, AdaptConfig, AdaptMode};
use crate::error::{Error, Result};
use crate::nn::{params, Gradients, Graph, ParamSet, Tensor};
use crate::util::stream_rng;
use vocab::{Vocab, EOS, SOS};

pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// 83 (baseline/add) or 166 (cat).
    pub input_dim: usize,
    pub conv_channels: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on CPU.
    pub fn desk(input_dim: usize) -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 1,
            d_model: 64,
            heads: 2,
            ffn_dim: 256,
            input_dim,
            conv_channels: 16,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }

    /// The NPTEL-scale configuration, kept for shape tests.
    pub fn paper_nptel(input_dim: usize) -> Self {
        ModelConfig {
            enc_layers: 12,
            dec_layers: 6,
            d_model: 256,
            heads: 4,
            ffn_dim: 2048,
            input_dim,
            conv_channels: 64,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.input_dim != 83 && self.input_dim != 166 {
            return Err(Error::InvalidConfig(format!(
                "input_dim must be 83 or 166, got {}",
                self.input_dim
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::InvalidConfig("need at least one layer each".into()));
        }
        Ok(())
    }
}

/// Output length of one valid kernel-3 stride-2 convolution.
pub fn conv_reduced(n: usize) -> usize {
    (n - 3) / 2 + 1
}

/// Frame count after the two-stage subsampler (asymptotically T/4).
pub fn subsampled_len(t: usize) -> Result<usize> {
    if t < 7 {
        return Err(Error::Msg(format!(
            "subsampler needs at least 7 frames, got {t}"
        )));
    }
    Ok(conv_reduced(conv_reduced(t)))
}

/// Sinusoidal positional encodings, [len, d].
pub fn positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            if 2 * i + 1 < d {
                pe[[pos, 2 * i + 1]] = angle.cos();
            }
        }
    }
    pe
}

/// Additive causal mask: position i may attend to j <= i.
pub fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { MASK_NEG } else { 0.0 })
}

// ---- parameter registration helpers ----

pub fn add_linear_params(
    params: &mut ParamSet,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) {
    params.insert(&format!("{prefix}.w"), params::xavier(&[d_in, d_out], d_in, d_out, rng));
    params.insert(&format!("{prefix}.b"), params::zeros(&[d_out]));
}

pub fn add_ln_params(params: &mut ParamSet, prefix: &str, d: usize) {
    params.insert(&format!("{prefix}.g"), params::ones(&[d]));
    params.insert(&format!("{prefix}.b"), params::zeros(&[d]));
}

pub fn add_mha_params(params: &mut ParamSet, prefix: &str, d: usize, rng: &mut impl Rng) {
    for name in ["wq", "wk", "wv", "wo"] {
        params.insert(&format!("{prefix}.{name}"), params::xavier(&[d, d], d, d, rng));
    }
    for name in ["bq", "bk", "bv", "bo"] {
        params.insert(&format!("{prefix}.{name}"), params::zeros(&[d]));
    }
}

pub fn linear_p(g: &mut Graph, params: &ParamSet, prefix: &str, x: Tensor) -> Tensor {
    let w = g.param(params, &format!("{prefix}.w"));
    let b = g.param(params, &format!("{prefix}.b"));
    g.linear(x, w, b)
}

pub fn layer_norm_p(g: &mut Graph, params: &ParamSet, prefix: &str, x: Tensor) -> Tensor {
    let gamma = g.param(params, &format!("{prefix}.g"));
    let beta = g.param(params, &format!("{prefix}.b"));
    g.layer_norm(x, gamma, beta, 1e-12)
}

/// Multi-head attention. Returns the block output; softmax nodes are
/// appended to `attn_sink` so tests and tools can inspect the weights.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    x_q: Tensor,
    x_kv: Tensor,
    heads: usize,
    mask: Option<&Array2<f64>>,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
    attn_sink: &mut Vec<Tensor>,
) -> Tensor {
    let d = g.shape(x_q)[1];
    let dk = d / heads;
    let wq = g.param(params, &format!("{prefix}.wq"));
    let bq = g.param(params, &format!("{prefix}.bq"));
    let wk = g.param(params, &format!("{prefix}.wk"));
    let bk = g.param(params, &format!("{prefix}.bk"));
    let wv = g.param(params, &format!("{prefix}.wv"));
    let bv = g.param(params, &format!("{prefix}.bv"));
    let q = g.linear(x_q, wq, bq);
    let k = g.linear(x_kv, wk, bk);
    let v = g.linear(x_kv, wv, bv);
    let mask_dyn = mask.map(|m| m.clone().into_dyn());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, (h + 1) * dk);
        let kh = g.slice_cols(k, h * dk, (h + 1) * dk);
        let vh = g.slice_cols(v, h * dk, (h + 1) * dk);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let mut scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(m) = &mask_dyn {
            scaled = g.add_const(scaled, m);
        }
        let probs = g.softmax(scaled);
        attn_sink.push(probs);
        let dropped = g.dropout(probs, dropout, training, rng);
        head_outs.push(g.matmul(dropped, vh));
    }
    let cat = g.concat_cols(&head_outs);
    let wo = g.param(params, &format!("{prefix}.wo"));
    let bo = g.param(params, &format!("{prefix}.bo"));
    g.linear(cat, wo, bo)
}

fn ffn(
    g: &mut Graph,
    params: &ParamSet,
    prefix: &str,
    x: Tensor,
) -> Tensor {
    let h = linear_p(g, params, &format!("{prefix}.1"), x);
    let r = g.relu(h);
    linear_p(g, params, &format!("{prefix}.2"), r)
}

/// Encoder output plus attention nodes for inspection.
pub struct Encoded {
    pub h: Tensor,
    pub attn: Vec<Tensor>,
}

pub struct Decoded {
    pub logits: Tensor,
    pub self_attn: Vec<Tensor>,
    pub cross_attn: Vec<Tensor>,
}

pub struct LossParts {
    pub hybrid: Tensor,
    pub ctc: Tensor,
    pub ce: Tensor,
}

/// The transformer ASR model: configuration, vocabulary, parameters.
#[derive(Debug, Clone)]
pub struct AsrModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

impl AsrModel {
    /// Create with fresh parameters. Down-projection parameters are
    /// created when `adapt.mode` needs them.
    pub fn new(cfg: ModelConfig, vocab: Vocab, adapt_cfg: &AdaptConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let expected_dim = match adapt_cfg.mode {
            AdaptMode::Cat => 166,
            _ => 83,
        };
        if cfg.input_dim != expected_dim {
            return Err(Error::InvalidConfig(format!(
                "input_dim {} inconsistent with adapt mode {:?} (want {expected_dim})",
                cfg.input_dim, adapt_cfg.mode
            )));
        }
        let mut rng = stream_rng(seed, &["model-init"]);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let c = cfg.conv_channels;
        let v = vocab.size();

        if adapt_cfg.mode != AdaptMode::None {
            adapt::add_downproj_params(&mut params, &mut rng);
        }

        params.insert("sub.conv1.w", params::xavier(&[c, 1, 3, 3], 9, 9 * c, &mut rng));
        params.insert("sub.conv1.b", params::zeros(&[c]));
        params.insert("sub.conv2.w", params::xavier(&[c, c, 3, 3], 9 * c, 9 * c, &mut rng));
        params.insert("sub.conv2.b", params::zeros(&[c]));
        let d_reduced = conv_reduced(conv_reduced(cfg.input_dim));
        add_linear_params(&mut params, "sub.out", c * d_reduced, d, &mut rng);

        for l in 0..cfg.enc_layers {
            add_mha_params(&mut params, &format!("enc.{l}.attn"), d, &mut rng);
            add_ln_params(&mut params, &format!("enc.{l}.ln1"), d);
            add_linear_params(&mut params, &format!("enc.{l}.ffn.1"), d, cfg.ffn_dim, &mut rng);
            add_linear_params(&mut params, &format!("enc.{l}.ffn.2"), cfg.ffn_dim, d, &mut rng);
            add_ln_params(&mut params, &format!("enc.{l}.ln2"), d);
        }

        params.insert("dec.embed", params::xavier(&[v, d], v, d, &mut rng));
        for l in 0..cfg.dec_layers {
            add_mha_params(&mut params, &format!("dec.{l}.self"), d, &mut rng);
            add_ln_params(&mut params, &format!("dec.{l}.ln1"), d);
            add_mha_params(&mut params, &format!("dec.{l}.cross"), d, &mut rng);
            add_ln_params(&mut params, &format!("dec.{l}.ln2"), d);
            add_linear_params(&mut params, &format!("dec.{l}.ffn.1"), d, cfg.ffn_dim, &mut rng);
            add_linear_params(&mut params, &format!("dec.{l}.ffn.2"), cfg.ffn_dim, d, &mut rng);
            add_ln_params(&mut params, &format!("dec.{l}.ln3"), d);
        }
        add_linear_params(&mut params, "dec.out", d, v, &mut rng);
        add_linear_params(&mut params, "ctc", d, v, &mut rng);

        Ok(AsrModel { cfg, vocab, params })
    }

    /// Conv2d subsampler: [T, input_dim] -> [T'', d_model], with scaled
    /// positional encodings added.
    pub fn subsample_graph(
        &self,
        g: &mut Graph,
        x: Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Tensor {
        let p = &self.params;
        let t = g.shape(x)[0];
        let dim = g.shape(x)[1];
        let img = g.reshape(x, &[1, t, dim]);
        let w1 = g.param(p, "sub.conv1.w");
        let b1 = g.param(p, "sub.conv1.b");
        let c1 = g.conv2d(img, w1, b1, 2);
        let r1 = g.relu(c1);
        let w2 = g.param(p, "sub.conv2.w");
        let b2 = g.param(p, "sub.conv2.b");
        let c2 = g.conv2d(r1, w2, b2, 2);
        let r2 = g.relu(c2);
        let shape = g.shape(r2).to_vec(); // [C, T'', D'']
        let perm = g.permute3(r2, [1, 0, 2]);
        let flat = g.reshape(perm, &[shape[1], shape[0] * shape[2]]);
        let out = linear_p(g, p, "sub.out", flat);
        let scaled = g.scale(out, (self.cfg.d_model as f64).sqrt());
        let pe = positional_encoding(shape[1], self.cfg.d_model).into_dyn();
        let with_pe = g.add_const(scaled, &pe);
        g.dropout(with_pe, self.cfg.dropout, training, rng)
    }

    /// Encoder stack over a subsampled input.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        x: Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Encoded {
        let p = &self.params;
        let mut attn = Vec::new();
        let mut h = self.subsample_graph(g, x, training, rng);
        for l in 0..self.cfg.enc_layers {
            let prefix = format!("enc.{l}");
            let a = multi_head_attention(
                g,
                p,
                &format!("{prefix}.attn"),
                h,
                h,
                self.cfg.heads,
                None,
                self.cfg.dropout,
                training,
                rng,
                &mut attn,
            );
            let a = g.dropout(a, self.cfg.dropout, training, rng);
            let res = g.add(h, a);
            h = layer_norm_p(g, p, &format!("{prefix}.ln1"), res);
            let f = ffn(g, p, &format!("{prefix}.ffn"), h);
            let f = g.dropout(f, self.cfg.dropout, training, rng);
            let res = g.add(h, f);
            h = layer_norm_p(g, p, &format!("{prefix}.ln2"), res);
        }
        Encoded { h, attn }
    }

    /// Teacher-forced decoder: `input_ids` must start with `<sos>`.
    pub fn decode_graph(
        &self,
        g: &mut Graph,
        h: Tensor,
        input_ids: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decoded> {
        if input_ids.is_empty() {
            return Err(Error::Msg("decoder input is empty".into()));
        }
        let p = &self.params;
        let d = self.cfg.d_model;
        let l = input_ids.len();
        let emb_w = g.param(p, "dec.embed");
        let emb = g.embedding(emb_w, input_ids);
        let scaled = g.scale(emb, (d as f64).sqrt());
        let pe = positional_encoding(l, d).into_dyn();
        let with_pe = g.add_const(scaled, &pe);
        let mut x = g.dropout(with_pe, self.cfg.dropout, training, rng);
        let mask = causal_mask(l);
        let mut self_attn = Vec::new();
        let mut cross_attn = Vec::new();
        for layer in 0..self.cfg.dec_layers {
            let prefix = format!("dec.{layer}");
            let a = multi_head_attention(
                g,
                p,
                &format!("{prefix}.self"),
                x,
                x,
                self.cfg.heads,
                Some(&mask),
                self.cfg.dropout,
                training,
                rng,
                &mut self_attn,
            );
            let a = g.dropout(a, self.cfg.dropout, training, rng);
            let res = g.add(x, a);
            x = layer_norm_p(g, p, &format!("{prefix}.ln1"), res);
            let c = multi_head_attention(
                g,
                p,
                &format!("{prefix}.cross"),
                x,
                h,
                self.cfg.heads,
                None,
                self.cfg.dropout,
                training,
                rng,
                &mut cross_attn,
            );
            let c = g.dropout(c, self.cfg.dropout, training, rng);
            let res = g.add(x, c);
            x = layer_norm_p(g, p, &format!("{prefix}.ln2"), res);
            let f = ffn(g, p, &format!("{prefix}.ffn"), x);
            let f = g.dropout(f, self.cfg.dropout, training, rng);
            let res = g.add(x, f);
            x = layer_norm_p(g, p, &format!("{prefix}.ln3"), res);
        }
        let logits = linear_p(g, p, "dec.out", x);
        Ok(Decoded {
            logits,
            self_attn,
            cross_attn,
        })
    }

    /// CTC head over encoder output: log-softmax of a linear projection.
    pub fn ctc_logprobs_graph(&self, g: &mut Graph, h: Tensor) -> Tensor {
        let logits = linear_p(g, &self.params, "ctc", h);
        g.log_softmax(logits)
    }

    /// Hybrid loss for one utterance: ctc_weight * CTC + (1 - w) * CE.
    /// `target`: token ids, no specials.
    pub fn losses_graph(
        &self,
        g: &mut Graph,
        h: Tensor,
        target: &[usize],
        ctc_weight: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossParts> {
        if target.is_empty() {
            return Err(Error::Msg("empty target".into()));
        }
        let lp = self.ctc_logprobs_graph(g, h);
        let ctc = g.ctc(lp, target, vocab::BLANK)?;
        let mut dec_input = Vec::with_capacity(target.len() + 1);
        dec_input.push(SOS);
        dec_input.extend_from_slice(target);
        let decoded = self.decode_graph(g, h, &dec_input, training, rng)?;
        let mut ce_targets = target.to_vec();
        ce_targets.push(EOS);
        let ce = g.cross_entropy_ls(decoded.logits, &ce_targets, self.cfg.label_smoothing);
        let hybrid = g.weighted_sum(ctc, ctc_weight, ce, 1.0 - ctc_weight);
        Ok(LossParts { hybrid, ctc, ce })
    }

    /// Full forward + backward for one utterance's adapted input.
    /// Returns (hybrid, ctc, ce) losses and parameter gradients.
    pub fn loss_and_grads(
        &self,
        input: &Array2<f64>,
        target: &[usize],
        ctc_weight: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64, f64, Gradients)> {
        let mut g = Graph::new();
        let x = g.input2(input);
        let enc = self.encode_graph(&mut g, x, training, rng);
        let parts = self.losses_graph(&mut g, enc.h, target, ctc_weight, training, rng)?;
        let grads = g.backward(parts.hybrid, self.params.len());
        Ok((
            g.scalar(parts.hybrid),
            g.scalar(parts.ctc),
            g.scalar(parts.ce),
            grads,
        ))
    }

    /// Evaluation-mode loss (no dropout, no gradients).
    pub fn eval_loss(&self, input: &Array2<f64>, target: &[usize], ctc_weight: f64) -> Result<f64> {
        let mut rng = stream_rng(0, &["eval"]);
        let mut g = Graph::new();
        let x = g.input2(input);
        let enc = self.encode_graph(&mut g, x, false, &mut rng);
        let parts = self.losses_graph(&mut g, enc.h, target, ctc_weight, false, &mut rng)?;
        Ok(g.scalar(parts.hybrid))
    }

    /// Evaluation-mode encoder: returns (H, CTC log-probs) as matrices.
    pub fn encode_eval(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut rng = stream_rng(0, &["eval"]);
        let mut g = Graph::new();
        let x = g.input2(input);
        let enc = self.encode_graph(&mut g, x, false, &mut rng);
        let lp = self.ctc_logprobs_graph(&mut g, enc.h);
        Ok((g.value2(enc.h), g.value2(lp)))
    }

    /// Log-probabilities of the next token given a prefix (no `<sos>`).
    pub fn next_token_logprobs(&self, h: &Array2<f64>, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut rng = stream_rng(0, &["eval"]);
        let mut g = Graph::new();
        let hi = g.input2(h);
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(SOS);
        input.extend_from_slice(prefix);
        let decoded = self.decode_graph(&mut g, hi, &input, false, &mut rng)?;
        let lp = g.log_softmax(decoded.logits);
        let v = g.value2(lp);
        Ok(v.row(v.nrows() - 1).to_vec())
    }
}

/// Weighted hybrid combination, exposed for direct checks.
pub fn hybrid_loss(ctc: f64, ce: f64, ctc_weight: f64) -> f64 {
    ctc_weight * ctc + (1.0 - ctc_weight) * ce
}

/// Build an `ArrayD` input image for tests.
pub fn rand_input(t: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, &["rand-input"]);
    Array2::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
}

#[allow(unused)]
fn arrd(shape: &[usize], v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), v)
}
