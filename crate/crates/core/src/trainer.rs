//! Training loop: Noam learning-rate schedule, per-utterance gradient
//! accumulation into frame-bin batches, per-epoch dev loss, epoch
//! checkpoints, and best-k checkpoint averaging.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_frontend_graph, AdaptConfig};
use crate::embed::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::model::{vocab::Vocab, AsrModel, ModelConfig};
use crate::nn::optim::Adam;
use crate::nn::{Gradients, Graph, ParamSet};
use crate::util::stream_rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_steps: usize,
    pub lr_factor: f64,
    /// Utterances per micro-batch (ignored when batch_bins is set).
    pub batch_size: usize,
    /// Frame budget per micro-batch.
    pub batch_bins: Option<usize>,
    pub accum_grad: usize,
    pub ctc_weight: f64,
    pub grad_clip: f64,
    pub average_k: usize,
    pub seed: u64,
    pub adapt: AdaptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_steps: 800,
            lr_factor: 1.0,
            batch_size: 4,
            batch_bins: None,
            accum_grad: 1,
            ctc_weight: 0.3,
            grad_clip: 5.0,
            average_k: 3,
            seed: 0,
            adapt: AdaptConfig::baseline(),
        }
    }
}

impl TrainConfig {
    /// The NPTEL-scale schedule from the training recipe.
    pub fn paper_nptel() -> Self {
        TrainConfig {
            epochs: 40,
            warmup_steps: 25000,
            lr_factor: 5.0,
            batch_size: 32,
            accum_grad: 1,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::InvalidConfig("warmup_steps must be >= 1".into()));
        }
        if self.average_k == 0 {
            return Err(Error::InvalidConfig("average_k must be >= 1".into()));
        }
        if self.accum_grad == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::InvalidConfig("ctc_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Noam schedule:
/// `factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
/// Strictly increasing below warmup, strictly decreasing above it.
pub fn noam_lr(step: u64, d_model: usize, warmup: usize, factor: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidConfig("noam_lr is defined for step >= 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// One utterance ready for training or decoding.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub utt_id: String,
    /// CMVN-normalized 83-dim features.
    pub features: Array2<f64>,
    pub target: Vec<usize>,
    pub embedding: Option<SpeakerEmbedding>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub lr: f64,
    pub wall_s: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub checkpoint_paths: Vec<PathBuf>,
    /// Normalization warnings seen during the run (deduplicated).
    pub warnings: Vec<String>,
}

/// Forward/backward for one utterance through the adapted front-end and
/// the model. `augment` gates SpecAugment and dropout.
#[allow(clippy::too_many_arguments)]
fn utterance_pass(
    model: &AsrModel,
    adapt_cfg: &AdaptConfig,
    item: &TrainItem,
    ctc_weight: f64,
    seed: u64,
    epoch: usize,
    training: bool,
    augment: bool,
    want_grads: bool,
) -> Result<(f64, Gradients, Option<String>)> {
    let ep = epoch.to_string();
    let mut sa_rng = stream_rng(seed, &["specaug", &ep, &item.utt_id]);
    let mut drop_rng = stream_rng(seed, &["dropout", &ep, &item.utt_id]);
    let mut g = Graph::new();
    let adapted = adapt_frontend_graph(
        &mut g,
        &model.params,
        &item.features,
        item.embedding.as_ref(),
        adapt_cfg,
        training,
        augment,
        &mut sa_rng,
    )?;
    let dropout_on = training && augment;
    let enc = model.encode_graph(&mut g, adapted.input, dropout_on, &mut drop_rng);
    let parts = model.losses_graph(&mut g, enc.h, &item.target, ctc_weight, dropout_on, &mut drop_rng)?;
    let loss = g.scalar(parts.hybrid);
    if !loss.is_finite() {
        return Err(Error::NanLoss {
            context: format!("epoch {epoch}, utterance {}", item.utt_id),
        });
    }
    let grads = if want_grads {
        g.backward(parts.hybrid, model.params.len())
    } else {
        Gradients::zeros(model.params.len())
    };
    Ok((loss, grads, adapted.warning))
}

/// Group utterance indices into optimizer batches. Each batch gathers
/// `accum_grad` micro-batches of `batch_size` utterances (or of a
/// `batch_bins` frame budget), so micro-batching never changes the
/// effective update.
fn make_batches(order: &[usize], items: &[TrainItem], cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    match cfg.batch_bins {
        Some(bins) => {
            let budget = bins * cfg.accum_grad;
            let mut cur = Vec::new();
            let mut frames = 0usize;
            for &i in order {
                let t = items[i].features.nrows();
                if !cur.is_empty() && frames + t > budget {
                    batches.push(std::mem::take(&mut cur));
                    frames = 0;
                }
                frames += t;
                cur.push(i);
            }
            if !cur.is_empty() {
                batches.push(cur);
            }
        }
        None => {
            for chunk in order.chunks(cfg.batch_size * cfg.accum_grad) {
                batches.push(chunk.to_vec());
            }
        }
    }
    batches
}

/// Train in place. Dev loss (eval mode: no SpecAugment, no dropout) is
/// the per-epoch selection metric; checkpoints are written every epoch.
pub fn train(
    model: &mut AsrModel,
    train_items: &[TrainItem],
    dev_items: &[TrainItem],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(Error::InvalidConfig("no training utterances".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut adam = Adam::new(model.params.len());
    let mut log = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        let mut shuffle_rng = stream_rng(cfg.seed, &["shuffle", &epoch.to_string()]);
        for i in (1..order.len()).rev() {
            use rand::Rng;
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for batch in make_batches(&order, train_items, cfg) {
            let mut acc = Gradients::zeros(model.params.len());
            for &i in &batch {
                let item = &train_items[i];
                let (loss, grads, warning) = utterance_pass(
                    model,
                    &cfg.adapt,
                    item,
                    cfg.ctc_weight,
                    cfg.seed,
                    epoch,
                    true,
                    true,
                    true,
                )?;
                epoch_loss += loss;
                acc.add(&grads);
                if let Some(w) = warning {
                    if !warnings.contains(&w) {
                        warnings.push(w);
                    }
                }
            }
            acc.scale(1.0 / batch.len() as f64);
            if !acc.all_finite() {
                return Err(Error::NanLoss {
                    context: format!("epoch {epoch}, gradient over batch of {}", batch.len()),
                });
            }
            acc.clip_global_norm(cfg.grad_clip);
            step += 1;
            lr = noam_lr(step, model.cfg.d_model, cfg.warmup_steps, cfg.lr_factor)?;
            adam.step(&mut model.params, &acc, lr);
        }
        let train_loss = epoch_loss / train_items.len() as f64;

        let mut dev_loss = 0.0;
        for item in dev_items {
            let (loss, _, _) = utterance_pass(
                model,
                &cfg.adapt,
                item,
                cfg.ctc_weight,
                cfg.seed,
                epoch,
                true,
                false,
                false,
            )?;
            dev_loss += loss;
        }
        let dev_loss = if dev_items.is_empty() {
            train_loss
        } else {
            dev_loss / dev_items.len() as f64
        };

        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss,
            dev_loss,
            lr,
            wall_s: start.elapsed().as_secs_f64(),
        };
        let ckpt = out_dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
        save_checkpoint(&ckpt, model, &cfg.adapt, epoch + 1, dev_loss)?;
        checkpoint_paths.push(ckpt);
        log.push(entry);
    }

    write_train_log(&log, cfg, &out_dir.join("train_log.csv"))?;
    Ok(TrainReport {
        log,
        checkpoint_paths,
        warnings,
    })
}

/// CSV log, one line per epoch. The header records the selection metric.
fn write_train_log(log: &[EpochLog], cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(
        out,
        "# best-checkpoint metric: dev hybrid loss (ctc_weight {})",
        cfg.ctc_weight
    )
    .expect("string write");
    writeln!(out, "epoch,train_loss,dev_loss,lr,wall_s").expect("string write");
    for e in log {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.8},{:.3}",
            e.epoch, e.train_loss, e.dev_loss, e.lr, e.wall_s
        )
        .expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---- checkpoints ----

const CKPT_MAGIC: &[u8; 8] = b"SATRCKPT";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    model_cfg: ModelConfig,
    adapt: AdaptConfig,
    vocab_tokens: Vec<String>,
    epoch: usize,
    dev_loss: f64,
    arrays: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: AsrModel,
    pub adapt: AdaptConfig,
    pub epoch: usize,
    pub dev_loss: f64,
}

pub fn save_checkpoint(
    path: &Path,
    model: &AsrModel,
    adapt: &AdaptConfig,
    epoch: usize,
    dev_loss: f64,
) -> Result<()> {
    let header = CkptHeader {
        model_cfg: model.cfg.clone(),
        adapt: adapt.clone(),
        vocab_tokens: (0..model.vocab.size())
            .map(|i| model.vocab.token(i).to_string())
            .collect(),
        epoch,
        dev_loss,
        arrays: model
            .params
            .iter()
            .map(|(n, a)| (n.to_string(), a.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Msg(format!("checkpoint header: {e}")))?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&CKPT_VERSION.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(&(json.len() as u64).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&json).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for (_, a) in model.params.iter() {
        let std = a.as_standard_layout();
        for v in std.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Msg(format!("{}: not a checkpoint file", path.display())));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(Error::Msg(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
    let json_len = u64::from_le_bytes(len8) as usize;
    let mut json = vec![0u8; json_len];
    f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: CkptHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Msg(format!("checkpoint header: {e}")))?;
    let mut params = ParamSet::new();
    for (name, shape) in &header.arrays {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        f.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(shape), vals)
            .map_err(|e| Error::Msg(format!("checkpoint array {name}: {e}")))?;
        params.insert(name, arr);
    }
    let vocab = Vocab::from_tokens(header.vocab_tokens)?;
    Ok(Checkpoint {
        model: AsrModel {
            cfg: header.model_cfg,
            vocab,
            params,
        },
        adapt: header.adapt,
        epoch: header.epoch,
        dev_loss: header.dev_loss,
    })
}

/// Average the k checkpoints with the lowest dev loss (keywise mean).
/// Ties break toward the earlier epoch.
pub fn average_checkpoints(paths: &[PathBuf], k: usize) -> Result<Checkpoint> {
    if paths.len() < k || k == 0 {
        return Err(Error::InvalidConfig(format!(
            "need at least k={k} checkpoints, have {}",
            paths.len()
        )));
    }
    let mut loaded: Vec<Checkpoint> = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<_>>()?;
    loaded.sort_by(|a, b| {
        a.dev_loss
            .partial_cmp(&b.dev_loss)
            .unwrap()
            .then(a.epoch.cmp(&b.epoch))
    });
    let best = &loaded[..k];
    let sets: Vec<ParamSet> = best.iter().map(|c| c.model.params.clone()).collect();
    let averaged = ParamSet::average(&sets)?;
    let mut out = best[0].clone();
    out.model.params = averaged;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::vocab::Vocab;
    use crate::model::rand_input;

    fn desk_items(n: usize, t: usize, vocab: &Vocab, seed: u64) -> Vec<TrainItem> {
        use rand::Rng;
        let mut rng = stream_rng(seed, &["items"]);
        (0..n)
            .map(|i| {
                let len = rng.random_range(2..5);
                let target: Vec<usize> = (0..len).map(|_| rng.random_range(4..vocab.size())).collect();
                TrainItem {
                    utt_id: format!("u{i:03}"),
                    features: rand_input(t, 83, seed * 1000 + i as u64),
                    target,
                    embedding: None,
                    duration_s: t as f64 * 0.01,
                }
            })
            .collect()
    }

    fn tiny_model(seed: u64) -> AsrModel {
        let vocab = Vocab::char_vocab(["tan bol"]).unwrap();
        let cfg = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            d_model: 16,
            heads: 2,
            ffn_dim: 32,
            input_dim: 83,
            conv_channels: 4,
            dropout: 0.1,
            label_smoothing: 0.1,
        };
        AsrModel::new(cfg, vocab, &AdaptConfig::baseline(), seed).unwrap()
    }

    #[test]
    fn noam_closed_forms() {
        // Peak at warmup for the NPTEL schedule:
        // 5 * 256^-0.5 * 25000^-0.5 = 5 / (16 sqrt(25000)) ~ 1.9764e-3.
        let peak = noam_lr(25000, 256, 25000, 5.0).unwrap();
        let expect = 5.0 / (16.0 * (25000f64).sqrt());
        assert!((peak - expect).abs() < 1e-15);
        assert!((peak - 1.9764e-3).abs() < 1e-7);

        // Linear warmup identities: s * w^-1.5 gives s/w of the peak,
        // so warmup/2 is half the peak and warmup/4 is a quarter.
        let half = noam_lr(12500, 256, 25000, 5.0).unwrap();
        assert!((half - peak / 2.0).abs() < 1e-12);
        let quarter = noam_lr(6250, 256, 25000, 5.0).unwrap();
        assert!((quarter - peak / 4.0).abs() < 1e-12);

        // Decay: lr(2w)/lr(w) = 1/sqrt(2).
        let at2w = noam_lr(50000, 256, 25000, 5.0).unwrap();
        assert!((at2w / peak - 0.5f64.sqrt()).abs() < 1e-12);

        // Monotone up then down, maximum at warmup.
        let mut prev = noam_lr(1, 256, 25000, 5.0).unwrap();
        for s in 2..=25000u64 {
            let lr = noam_lr(s, 256, 25000, 5.0).unwrap();
            assert!(lr > prev, "not increasing at {s}");
            prev = lr;
        }
        for s in (25001..=250000u64).step_by(997) {
            let lr = noam_lr(s, 256, 25000, 5.0).unwrap();
            assert!(lr < prev, "not decreasing at {s}");
            prev = lr;
        }
        assert!(noam_lr(0, 256, 25000, 5.0).is_err());
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        // Median-of-3-seeds smoke property over the first 10 steps.
        let mut successes = 0;
        for seed in 0..3u64 {
            let mut model = tiny_model(seed);
            let items = desk_items(4, 30, &model.vocab, seed);
            let mut adam = Adam::new(model.params.len());
            let mut losses = Vec::new();
            for step in 1..=10u64 {
                let mut acc = Gradients::zeros(model.params.len());
                let mut total = 0.0;
                for item in &items {
                    let (loss, grads, _) = utterance_pass(
                        &model,
                        &AdaptConfig::baseline(),
                        item,
                        0.3,
                        seed,
                        0,
                        true,
                        false,
                        true,
                    )
                    .unwrap();
                    total += loss;
                    acc.add(&grads);
                }
                losses.push(total / items.len() as f64);
                acc.scale(1.0 / items.len() as f64);
                acc.clip_global_norm(5.0);
                let lr = noam_lr(step, 16, 100, 1.0).unwrap();
                adam.step(&mut model.params, &acc, lr);
            }
            let strictly_decreasing = losses.windows(2).all(|w| w[1] < w[0]);
            if strictly_decreasing {
                successes += 1;
            }
        }
        assert!(successes >= 2, "only {successes}/3 seeds decreased monotonically");
    }

    #[test]
    fn accumulation_equals_one_large_batch() {
        let items = {
            let m = tiny_model(1);
            desk_items(8, 25, &m.vocab, 3)
        };
        let run = |batch_size: usize, accum: usize| -> ParamSet {
            let mut model = tiny_model(1);
            let cfg = TrainConfig {
                epochs: 1,
                warmup_steps: 10,
                lr_factor: 1.0,
                batch_size,
                accum_grad: accum,
                seed: 5,
                adapt: AdaptConfig {
                    specaug: crate::specaug::SpecAugPolicy::disabled(),
                    ..AdaptConfig::baseline()
                },
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            train(&mut model, &items, &[], &cfg, dir.path()).unwrap();
            model.params
        };
        let a = run(2, 4);
        let b = run(8, 1);
        for (name, arr) in a.iter() {
            let other = b.get(name).unwrap();
            for (x, y) in arr.iter().zip(other.iter()) {
                assert!(
                    (x - y).abs() < 1e-8,
                    "{name}: {x} vs {y} differ beyond 1e-8"
                );
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_the_loss_curve() {
        let run = || {
            let mut model = tiny_model(2);
            let items = desk_items(6, 30, &model.vocab, 4);
            let dev = desk_items(2, 30, &model.vocab, 9);
            let cfg = TrainConfig {
                epochs: 2,
                warmup_steps: 20,
                batch_size: 3,
                seed: 11,
                ..TrainConfig::default()
            };
            let dir = tempfile::tempdir().unwrap();
            let report = train(&mut model, &items, &dev, &cfg, dir.path()).unwrap();
            report
                .log
                .iter()
                .map(|e| (e.train_loss, e.dev_loss))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &AdaptConfig::baseline(), 7, 1.25).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 7);
        assert_eq!(back.dev_loss, 1.25);
        assert_eq!(back.model.vocab.size(), model.vocab.size());
        for (name, arr) in model.params.iter() {
            assert_eq!(back.model.params.get(name).unwrap(), arr, "{name}");
        }
    }

    #[test]
    fn averaging_identities_and_selection() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(4);

        // k identical checkpoints average to themselves.
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &model, &AdaptConfig::baseline(), 1, 2.0).unwrap();
        save_checkpoint(&p2, &model, &AdaptConfig::baseline(), 2, 1.0).unwrap();
        let avg = average_checkpoints(&[p1.clone(), p2.clone()], 2).unwrap();
        for (name, arr) in model.params.iter() {
            assert_eq!(avg.model.params.get(name).unwrap(), arr, "{name}");
        }

        // {W, -W} averages to zero.
        let mut neg = model.clone();
        for slot in 0..neg.params.len() {
            neg.params.by_slot_mut(slot).mapv_inplace(|v| -v);
        }
        let p3 = dir.path().join("c.ckpt");
        save_checkpoint(&p3, &neg, &AdaptConfig::baseline(), 3, 3.0).unwrap();
        let avg = average_checkpoints(&[p1.clone(), p3.clone()], 2).unwrap();
        for (name, arr) in avg.model.params.iter() {
            assert!(arr.iter().all(|&v| v == 0.0), "{name} not zeroed");
        }

        // Best-3 of 5 by dev loss {5,4,3,2,1} picks the last three.
        let mut paths = Vec::new();
        let mut scaled_models = Vec::new();
        for (i, loss) in [5.0, 4.0, 3.0, 2.0, 1.0].iter().enumerate() {
            let mut m = tiny_model(4);
            for slot in 0..m.params.len() {
                m.params.by_slot_mut(slot).mapv_inplace(|v| v * (i + 1) as f64);
            }
            let p = dir.path().join(format!("s{i}.ckpt"));
            save_checkpoint(&p, &m, &AdaptConfig::baseline(), i + 1, *loss).unwrap();
            paths.push(p);
            scaled_models.push(m);
        }
        let avg = average_checkpoints(&paths, 3).unwrap();
        // Expect mean of multipliers {3, 4, 5} = 4 x base.
        for (name, arr) in model.params.iter() {
            let got = avg.model.params.get(name).unwrap();
            for (b, g) in arr.iter().zip(got.iter()) {
                assert!((g - 4.0 * b).abs() < 1e-12, "{name}");
            }
        }
        assert!(average_checkpoints(&paths[..2], 3).is_err());
    }

    #[test]
    fn nan_loss_aborts_with_context() {
        let mut model = tiny_model(5);
        // Poison one parameter so the forward pass goes non-finite.
        let slot = model.params.slot("enc.0.attn.wq").unwrap();
        model.params.by_slot_mut(slot).fill(f64::NAN);
        let items = desk_items(2, 25, &model.vocab, 6);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut model, &items, &[], &cfg, dir.path()).unwrap_err();
        match err {
            Error::NanLoss { context } => {
                assert!(context.contains("u0"), "context: {context}")
            }
            other => panic!("expected NanLoss, got {other}"),
        }
    }
}
