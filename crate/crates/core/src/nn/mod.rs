//! Minimal reverse-mode autodiff over `ndarray`, 64-bit throughout.
//!
//! A [`Graph`] is a per-forward-pass tape: op builders compute values
//! eagerly and record enough to run the reverse sweep. CTC and the
//! smoothed cross-entropy are single ops with hand-derived gradients;
//! everything else composes from primitives. Gradient correctness is
//! enforced by finite-difference checks in [`gradcheck`].

pub mod gradcheck;
pub mod optim;
pub mod params;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, IxDyn};

use crate::error::{Error, Result};
use crate::util::{log_add, log_sum_exp};
pub use params::{Arr, Gradients, ParamSet};

/// Handle to a node in one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

enum Op {
    Leaf,
    Param { slot: usize },
    Add { a: Tensor, b: Tensor },
    AddBias { x: Tensor, b: Tensor },
    AddConst { x: Tensor },
    Mul { a: Tensor, b: Tensor },
    MulConst { x: Tensor, c: Arr },
    Scale { x: Tensor, c: f64 },
    MatMul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Relu { x: Tensor },
    Softmax { x: Tensor },
    LogSoftmax { x: Tensor },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    Embedding { weight: Tensor, ids: Vec<usize> },
    ConcatCols { parts: Vec<Tensor> },
    SliceCols { x: Tensor, start: usize, end: usize },
    MeanRows { x: Tensor },
    StdRows { x: Tensor },
    Conv2d {
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
    },
    Permute3 { x: Tensor, axes: [usize; 3] },
    Reshape { x: Tensor },
    SumAll { x: Tensor },
    MeanAll { x: Tensor },
    CrossEntropyLs {
        logits: Tensor,
        targets: Vec<usize>,
        smoothing: f64,
    },
    Ctc {
        logprobs: Tensor,
        target: Vec<usize>,
        blank: usize,
    },
}

struct Node {
    value: Arr,
    op: Op,
}

/// One forward pass's tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D value")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Arr, op: Op) -> Tensor {
        self.nodes.push(Node { value, op });
        Tensor(self.nodes.len() - 1)
    }

    pub fn value(&self, t: Tensor) -> &Arr {
        &self.nodes[t.0].value
    }

    pub fn value2(&self, t: Tensor) -> Array2<f64> {
        as2(self.value(t)).to_owned()
    }

    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        self.value(t).shape()
    }

    // ---- leaves ----

    pub fn input(&mut self, value: Arr) -> Tensor {
        self.push(value, Op::Leaf)
    }

    pub fn input2(&mut self, value: &Array2<f64>) -> Tensor {
        self.push(value.clone().into_dyn(), Op::Leaf)
    }

    /// Register a parameter leaf; gradients flow back to its slot.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Tensor {
        let slot = params
            .slot(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.push(params.by_slot(slot).clone(), Op::Param { slot })
    }

    // ---- elementwise / linear ----

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add { a, b })
    }

    /// `[T, D] + [D]` broadcast along rows.
    pub fn add_bias(&mut self, x: Tensor, b: Tensor) -> Tensor {
        let xv = as2(self.value(x)).to_owned();
        let bv = self.value(b).clone();
        assert_eq!(xv.ncols(), bv.len(), "bias dim mismatch");
        let bv1 = bv.into_dimensionality::<ndarray::Ix1>().expect("1-D bias");
        let v = (&xv + &bv1).into_dyn();
        self.push(v, Op::AddBias { x, b })
    }

    /// Add a constant array (positional encodings, additive masks).
    pub fn add_const(&mut self, x: Tensor, c: &Arr) -> Tensor {
        let v = &self.nodes[x.0].value + c;
        self.push(v, Op::AddConst { x })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul { a, b })
    }

    /// Multiply by a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Tensor, c: Arr) -> Tensor {
        let v = &self.nodes[x.0].value * &c;
        self.push(v, Op::MulConst { x, c })
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let v = self.nodes[x.0].value.mapv(|v| v * c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Tensor) -> Tensor {
        let v = as2(self.value(x))
            .t()
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(v, Op::Transpose { x })
    }

    /// `x @ w + b` with `x: [T, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Tensor, w: Tensor, b: Tensor) -> Tensor {
        let m = self.matmul(x, w);
        self.add_bias(m, b)
    }

    pub fn relu(&mut self, x: Tensor) -> Tensor {
        let v = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        self.push(v, Op::Relu { x })
    }

    // ---- normalizations ----

    pub fn softmax(&mut self, x: Tensor) -> Tensor {
        let xv = as2(self.value(x));
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(v.into_dyn(), Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Tensor) -> Tensor {
        let xv = as2(self.value(x));
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(v.into_dyn(), Op::LogSoftmax { x })
    }

    /// Row-wise layer norm over the last axis of a 2-D input.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Tensor {
        let xv = as2(self.value(x));
        let g = self.value(gamma).clone();
        let b = self.value(beta).clone();
        let mut v = xv.to_owned();
        for mut row in v.rows_mut() {
            let d = row.len() as f64;
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, r) in row.iter_mut().enumerate() {
                *r = (*r - mu) * inv * g[[j]] + b[[j]];
            }
        }
        self.push(v.into_dyn(), Op::LayerNorm { x, gamma, beta, eps })
    }

    // ---- gather / reshape ----

    /// Row-gather: `out[l, :] = weight[ids[l], :]`.
    pub fn embedding(&mut self, weight: Tensor, ids: &[usize]) -> Tensor {
        let w = as2(self.value(weight));
        let mut v = Array2::zeros((ids.len(), w.ncols()));
        for (l, &id) in ids.iter().enumerate() {
            v.row_mut(l).assign(&w.row(id));
        }
        self.push(
            v.into_dyn(),
            Op::Embedding {
                weight,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        let rows = as2(self.value(parts[0])).nrows();
        let total: usize = parts.iter().map(|p| as2(self.value(*p)).ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut col = 0;
        for p in parts {
            let pv = as2(self.value(*p));
            assert_eq!(pv.nrows(), rows, "concat_cols row mismatch");
            v.slice_mut(ndarray::s![.., col..col + pv.ncols()]).assign(&pv);
            col += pv.ncols();
        }
        self.push(
            v.into_dyn(),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: Tensor, start: usize, end: usize) -> Tensor {
        let xv = as2(self.value(x));
        let v = xv.slice(ndarray::s![.., start..end]).to_owned().into_dyn();
        self.push(v, Op::SliceCols { x, start, end })
    }

    /// Column means over rows: `[T, D] -> [1, D]`.
    pub fn mean_rows(&mut self, x: Tensor) -> Tensor {
        let xv = as2(self.value(x));
        let m = xv.mean_axis(Axis(0)).expect("nonempty");
        let v = m.insert_axis(Axis(0)).into_dyn();
        self.push(v, Op::MeanRows { x })
    }

    /// Column population standard deviations: `[T, D] -> [1, D]`,
    /// with eps inside the square root.
    pub fn std_rows(&mut self, x: Tensor, eps: f64) -> Tensor {
        let xv = as2(self.value(x));
        let t = xv.nrows() as f64;
        let mu = xv.mean_axis(Axis(0)).expect("nonempty");
        let mut var: Array1<f64> = Array1::zeros(xv.ncols());
        for row in xv.rows() {
            for (d, v) in row.iter().enumerate() {
                let c = v - mu[d];
                var[d] += c * c;
            }
        }
        var.mapv_inplace(|v| (v / t + eps).sqrt());
        let v = var.insert_axis(Axis(0)).into_dyn();
        self.push(v, Op::StdRows { x })
    }

    /// Valid 2-D convolution: `x: [Cin, H, W]`, `w: [Cout, Cin, kh, kw]`,
    /// `b: [Cout]`, shared stride on both spatial axes. Implemented as
    /// im2col + matmul.
    pub fn conv2d(&mut self, x: Tensor, w: Tensor, b: Tensor, stride: usize) -> Tensor {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.value(w);
        let bv = self.value(b);
        let (cin, h, wd) = xv.dim();
        let wsh = wv.shape().to_vec();
        let (cout, kcin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        assert_eq!(cin, kcin, "conv2d channel mismatch");
        assert!(h >= kh && wd >= kw, "conv2d input smaller than kernel");
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let patches = im2col(&xv, kh, kw, stride, oh, ow);
        let wmat = wv
            .view()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap()
            .to_owned();
        let mut out_rows = patches.dot(&wmat.t()); // [oh*ow, cout]
        for mut row in out_rows.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += bv[[o]];
            }
        }
        // [oh*ow, cout] -> [cout, oh, ow]
        let v = out_rows
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[cout, oh, ow]))
            .unwrap();
        self.push(v, Op::Conv2d { x, w, b, stride })
    }

    pub fn permute3(&mut self, x: Tensor, axes: [usize; 3]) -> Tensor {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().unwrap();
        let v = xv
            .permuted_axes(axes)
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        self.push(v, Op::Permute3 { x, axes })
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Tensor {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        self.push(v, Op::Reshape { x })
    }

    // ---- reductions / losses ----

    pub fn sum_all(&mut self, x: Tensor) -> Tensor {
        let s = self.value(x).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Tensor) -> Tensor {
        let s = self.value(x).mean().expect("nonempty");
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::MeanAll { x })
    }

    /// `a*ca + b*cb` for scalar nodes (hybrid loss combination).
    pub fn weighted_sum(&mut self, a: Tensor, ca: f64, b: Tensor, cb: f64) -> Tensor {
        let sa = self.scale(a, ca);
        let sb = self.scale(b, cb);
        self.add(sa, sb)
    }

    /// Label-smoothed cross entropy averaged over rows.
    /// Target distribution: `(1 - smoothing) * onehot + smoothing / V`.
    pub fn cross_entropy_ls(&mut self, logits: Tensor, targets: &[usize], smoothing: f64) -> Tensor {
        let lv = as2(self.value(logits));
        let (l, vsz) = lv.dim();
        assert_eq!(l, targets.len(), "cross entropy target length");
        let mut total = 0.0;
        for (row, &t) in lv.rows().into_iter().zip(targets) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let mut loss = 0.0;
            for (k, &logit) in row.iter().enumerate() {
                let q = if k == t { 1.0 - smoothing } else { 0.0 } + smoothing / vsz as f64;
                loss -= q * (logit - lse);
            }
            total += loss;
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total / l as f64),
            Op::CrossEntropyLs {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
        )
    }

    /// CTC negative log likelihood. `logprobs: [T, V]` are per-frame
    /// log-scores (normalized or not; the loss is -log of the summed
    /// score of all valid alignments). `target` must not contain blanks.
    pub fn ctc(&mut self, logprobs: Tensor, target: &[usize], blank: usize) -> Result<Tensor> {
        let lp = as2(self.value(logprobs));
        let frames = lp.nrows();
        let min_frames = ctc_min_frames(target);
        if frames < min_frames {
            return Err(Error::CtcInfeasible {
                frames,
                target_len: target.len(),
                min_frames,
            });
        }
        assert!(
            target.iter().all(|&t| t != blank && t < lp.ncols()),
            "CTC target contains blank or out-of-range id"
        );
        let alpha = ctc_alpha(&lp.to_owned(), target, blank);
        let s = 2 * target.len() + 1;
        let log_p = if s == 1 {
            alpha[[frames - 1, 0]]
        } else {
            log_add(alpha[[frames - 1, s - 1]], alpha[[frames - 1, s - 2]])
        };
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), -log_p),
            Op::Ctc {
                logprobs,
                target: target.to_vec(),
                blank,
            },
        ))
    }

    // ---- dropout ----

    /// Inverted dropout; identity when not training or rate is 0.
    pub fn dropout(&mut self, x: Tensor, rate: f64, training: bool, rng: &mut impl rand::Rng) -> Tensor {
        if !training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = self
            .value(x)
            .mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        self.mul_const(x, mask)
    }

    // ---- reverse sweep ----

    /// Backpropagate from a scalar loss; returns per-slot parameter
    /// gradients sized for `n_slots`.
    pub fn backward(&self, loss: Tensor, n_slots: usize) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Arr>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        let mut out = Gradients::zeros(n_slots);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param { slot } => out.set(*slot, g),
                Op::Add { a, b } => {
                    acc(&mut grads, a.0, g.clone());
                    acc(&mut grads, b.0, g);
                }
                Op::AddBias { x, b } => {
                    let gb = as2(&g).sum_axis(Axis(0)).into_dyn();
                    acc(&mut grads, b.0, gb);
                    acc(&mut grads, x.0, g);
                }
                Op::AddConst { x } => acc(&mut grads, x.0, g),
                Op::Mul { a, b } => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    acc(&mut grads, a.0, ga);
                    acc(&mut grads, b.0, gb);
                }
                Op::MulConst { x, c } => acc(&mut grads, x.0, &g * c),
                Op::Scale { x, c } => acc(&mut grads, x.0, g.mapv(|v| v * c)),
                Op::MatMul { a, b } => {
                    let gv = as2(&g);
                    let av = as2(&self.nodes[a.0].value);
                    let bv = as2(&self.nodes[b.0].value);
                    acc(&mut grads, a.0, gv.dot(&bv.t()).into_dyn());
                    acc(&mut grads, b.0, av.t().dot(&gv).into_dyn());
                }
                Op::Transpose { x } => {
                    let gt = as2(&g).t().as_standard_layout().to_owned().into_dyn();
                    acc(&mut grads, x.0, gt);
                }
                Op::Relu { x } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = ndarray::Zip::from(&g)
                        .and(xv)
                        .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, x.0, gx);
                }
                Op::Softmax { x } => {
                    let y = as2(&self.nodes[id].value);
                    let gv = as2(&g);
                    let mut gx = Array2::zeros(y.raw_dim());
                    for ((yr, gr), mut o) in
                        y.rows().into_iter().zip(gv.rows()).zip(gx.rows_mut())
                    {
                        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, x.0, gx.into_dyn());
                }
                Op::LogSoftmax { x } => {
                    let y = as2(&self.nodes[id].value);
                    let gv = as2(&g);
                    let mut gx = Array2::zeros(y.raw_dim());
                    for ((yr, gr), mut o) in
                        y.rows().into_iter().zip(gv.rows()).zip(gx.rows_mut())
                    {
                        let gsum: f64 = gr.sum();
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov = gv - yv.exp() * gsum;
                        }
                    }
                    acc(&mut grads, x.0, gx.into_dyn());
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let gm = &self.nodes[gamma.0].value;
                    let gv = as2(&g);
                    let d = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggamma = Array1::zeros(xv.ncols());
                    let mut gbeta = Array1::zeros(xv.ncols());
                    for ((xr, gr), mut o) in
                        xv.rows().into_iter().zip(gv.rows()).zip(gx.rows_mut())
                    {
                        let mu = xr.sum() / d;
                        let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * inv).collect();
                        let gy: Vec<f64> =
                            gr.iter().enumerate().map(|(j, v)| v * gm[[j]]).collect();
                        let mean_gy: f64 = gy.iter().sum::<f64>() / d;
                        let mean_gy_xhat: f64 =
                            gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                        for j in 0..xr.len() {
                            o[j] = inv * (gy[j] - mean_gy - xhat[j] * mean_gy_xhat);
                            ggamma[j] += gr[j] * xhat[j];
                            gbeta[j] += gr[j];
                        }
                    }
                    acc(&mut grads, x.0, gx.into_dyn());
                    acc(&mut grads, gamma.0, ggamma.into_dyn());
                    acc(&mut grads, beta.0, gbeta.into_dyn());
                }
                Op::Embedding { weight, ids } => {
                    let wv = as2(&self.nodes[weight.0].value);
                    let gv = as2(&g);
                    let mut gw = Array2::zeros(wv.raw_dim());
                    for (l, &idx) in ids.iter().enumerate() {
                        let mut row = gw.row_mut(idx);
                        row += &gv.row(l);
                    }
                    acc(&mut grads, weight.0, gw.into_dyn());
                }
                Op::ConcatCols { parts } => {
                    let gv = as2(&g);
                    let mut col = 0;
                    for p in parts {
                        let w = as2(&self.nodes[p.0].value).ncols();
                        let gp = gv.slice(ndarray::s![.., col..col + w]).to_owned();
                        acc(&mut grads, p.0, gp.into_dyn());
                        col += w;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    gx.slice_mut(ndarray::s![.., *start..*end]).assign(&as2(&g));
                    acc(&mut grads, x.0, gx.into_dyn());
                }
                Op::MeanRows { x } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let t = xv.nrows() as f64;
                    let gv = as2(&g);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for mut row in gx.rows_mut() {
                        for (d, v) in row.iter_mut().enumerate() {
                            *v = gv[[0, d]] / t;
                        }
                    }
                    acc(&mut grads, x.0, gx.into_dyn());
                }
                Op::StdRows { x } => {
                    let xv = as2(&self.nodes[x.0].value);
                    let s = as2(&self.nodes[id].value);
                    let t = xv.nrows() as f64;
                    let mu = xv.mean_axis(Axis(0)).expect("nonempty");
                    let gv = as2(&g);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for (i, row) in xv.rows().into_iter().enumerate() {
                        for (d, v) in row.iter().enumerate() {
                            gx[[i, d]] = gv[[0, d]] * (v - mu[d]) / (t * s[[0, d]]);
                        }
                    }
                    acc(&mut grads, x.0, gx.into_dyn());
                }
                Op::Conv2d { x, w, b, stride } => {
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let wv = &self.nodes[w.0].value;
                    let wsh = wv.shape().to_vec();
                    let (cout, cin, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (_, oh, ow) = gv.dim();
                    let s = *stride;
                    // G: [oh*ow, cout]
                    let gmat = gv
                        .view()
                        .into_shape_with_order((cout, oh * ow))
                        .unwrap()
                        .t()
                        .as_standard_layout()
                        .to_owned();
                    let patches = im2col(&xv, kh, kw, s, oh, ow);
                    let wmat = wv
                        .view()
                        .into_shape_with_order((cout, cin * kh * kw))
                        .unwrap()
                        .to_owned();
                    let gw = gmat
                        .t()
                        .dot(&patches)
                        .into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
                        .unwrap();
                    let gb = gmat.sum_axis(Axis(0));
                    let gpatches = gmat.dot(&wmat); // [oh*ow, cin*kh*kw]
                    let (xh, xw) = (xv.dim().1, xv.dim().2);
                    let mut gx3 = ndarray::Array3::<f64>::zeros((cin, xh, xw));
                    for i in 0..oh {
                        for j in 0..ow {
                            let row = gpatches.row(i * ow + j);
                            let mut idx = 0;
                            for c in 0..cin {
                                for u in 0..kh {
                                    for t in 0..kw {
                                        gx3[[c, i * s + u, j * s + t]] += row[idx];
                                        idx += 1;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, x.0, gx3.into_dyn());
                    acc(&mut grads, w.0, gw);
                    acc(&mut grads, b.0, gb.into_dyn());
                }
                Op::Permute3 { x, axes } => {
                    let mut inv = [0usize; 3];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let gx = gv
                        .permuted_axes(inv)
                        .as_standard_layout()
                        .to_owned()
                        .into_dyn();
                    acc(&mut grads, x.0, gx);
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    acc(&mut grads, x.0, g.into_shape_with_order(shape).unwrap());
                }
                Op::SumAll { x } => {
                    let gs = *g.iter().next().unwrap();
                    acc(
                        &mut grads,
                        x.0,
                        ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs),
                    );
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.len() as f64;
                    let gs = *g.iter().next().unwrap() / n;
                    acc(
                        &mut grads,
                        x.0,
                        ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs),
                    );
                }
                Op::CrossEntropyLs {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let lv = as2(&self.nodes[logits.0].value);
                    let (l, vsz) = lv.dim();
                    let gs = *g.iter().next().unwrap();
                    let mut gx = Array2::zeros(lv.raw_dim());
                    for (i, row) in lv.rows().into_iter().enumerate() {
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for (k, &logit) in row.iter().enumerate() {
                            let p = (logit - m).exp() / denom;
                            let q = if k == targets[i] { 1.0 - smoothing } else { 0.0 }
                                + smoothing / vsz as f64;
                            gx[[i, k]] = gs * (p - q) / l as f64;
                        }
                    }
                    acc(&mut grads, logits.0, gx.into_dyn());
                }
                Op::Ctc {
                    logprobs,
                    target,
                    blank,
                } => {
                    let lp = as2(&self.nodes[logprobs.0].value).to_owned();
                    let gs = *g.iter().next().unwrap();
                    let gx = ctc_grad(&lp, target, *blank).mapv(|v| v * gs);
                    acc(&mut grads, logprobs.0, gx.into_dyn());
                }
            }
        }
        out
    }
}

/// Patch matrix for conv2d: rows are output positions (row-major over
/// (oh, ow)), columns the flattened (cin, kh, kw) receptive field.
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let cin = x.dim().0;
    let mut patches = Array2::zeros((oh * ow, cin * kh * kw));
    for i in 0..oh {
        for j in 0..ow {
            let mut row = patches.row_mut(i * ow + j);
            let mut idx = 0;
            for c in 0..cin {
                for u in 0..kh {
                    for t in 0..kw {
                        row[idx] = x[[c, i * stride + u, j * stride + t]];
                        idx += 1;
                    }
                }
            }
        }
    }
    patches
}

fn acc(grads: &mut [Option<Arr>], id: usize, g: Arr) {
    match &mut grads[id] {
        Some(e) => *e += &g,
        e @ None => *e = Some(g),
    }
}

/// Minimum frame count for a CTC target: length plus one per adjacent repeat.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Extended label at position s of the blank-interleaved sequence.
fn ctc_label(target: &[usize], blank: usize, s: usize) -> usize {
    if s % 2 == 0 {
        blank
    } else {
        target[(s - 1) / 2]
    }
}

/// Log-space forward variables, alpha[t][s] with emissions included.
fn ctc_alpha(lp: &Array2<f64>, target: &[usize], blank: usize) -> Array2<f64> {
    let t_len = lp.nrows();
    let s_len = 2 * target.len() + 1;
    let mut alpha = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    alpha[[0, 0]] = lp[[0, blank]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ctc_label(target, blank, 1)]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let lab = ctc_label(target, blank, s);
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add(a, alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && lab != blank && lab != ctc_label(target, blank, s - 2) {
                a = log_add(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + lp[[t, lab]];
        }
    }
    alpha
}

/// Log-space backward variables, beta[t][s] with emissions included.
fn ctc_beta(lp: &Array2<f64>, target: &[usize], blank: usize) -> Array2<f64> {
    let t_len = lp.nrows();
    let s_len = 2 * target.len() + 1;
    let mut beta = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    beta[[t_len - 1, s_len - 1]] = lp[[t_len - 1, ctc_label(target, blank, s_len - 1)]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = lp[[t_len - 1, ctc_label(target, blank, s_len - 2)]];
    }
    for t in (0..t_len - 1).rev() {
        for s in (0..s_len).rev() {
            let lab = ctc_label(target, blank, s);
            let mut b = beta[[t + 1, s]];
            if s + 1 < s_len {
                b = log_add(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len {
                let nxt = ctc_label(target, blank, s + 2);
                if lab != blank && lab != nxt {
                    b = log_add(b, beta[[t + 1, s + 2]]);
                }
            }
            beta[[t, s]] = b + lp[[t, lab]];
        }
    }
    beta
}

/// d(-log P)/d(logprobs): -Q(t,k)/P where Q(t,k) is the summed score of
/// alignments passing through label k at frame t. alpha and beta both
/// include the frame-t emission, so their product divides by it once.
fn ctc_grad(lp: &Array2<f64>, target: &[usize], blank: usize) -> Array2<f64> {
    let t_len = lp.nrows();
    let s_len = 2 * target.len() + 1;
    let alpha = ctc_alpha(lp, target, blank);
    let beta = ctc_beta(lp, target, blank);
    let log_p = if s_len == 1 {
        alpha[[t_len - 1, 0]]
    } else {
        log_add(alpha[[t_len - 1, s_len - 1]], alpha[[t_len - 1, s_len - 2]])
    };
    let mut grad = Array2::zeros(lp.raw_dim());
    let mut buf: Vec<f64> = Vec::with_capacity(s_len);
    for t in 0..t_len {
        for k in 0..lp.ncols() {
            buf.clear();
            for s in 0..s_len {
                if ctc_label(target, blank, s) == k {
                    buf.push(alpha[[t, s]] + beta[[t, s]] - lp[[t, k]]);
                }
            }
            if !buf.is_empty() {
                let log_q = log_sum_exp(&buf);
                grad[[t, k]] = -((log_q - log_p).exp());
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand::Rng;

    fn rand2(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Finite-difference check of d(loss)/d(param named `p`) for a loss
    /// built by `f`. Checks every coordinate of the parameter.
    fn check_param_grad(
        params: &ParamSet,
        p: &str,
        f: impl Fn(&ParamSet, &mut Graph) -> Tensor,
    ) {
        let mut g = Graph::new();
        let loss = f(params, &mut g);
        let grads = g.backward(loss, params.len());
        let slot = params.slot(p).unwrap();
        let analytic = grads.get(slot).expect("gradient reached param").clone();
        let h = 1e-6;
        let base = params.clone();
        for idx in 0..base.by_slot(slot).len() {
            let mut plus = base.clone();
            plus.by_slot_mut(slot).as_slice_mut().unwrap()[idx] += h;
            let mut minus = base.clone();
            minus.by_slot_mut(slot).as_slice_mut().unwrap()[idx] -= h;
            let mut gp = Graph::new();
            let lp = f(&plus, &mut gp);
            let mut gm = Graph::new();
            let lm = f(&minus, &mut gm);
            let numeric = (gp.scalar(lp) - gm.scalar(lm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "{p}[{idx}]: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_bias_relu_grads() {
        let mut rng = stream_rng(1, &["nn-mm"]);
        let mut ps = ParamSet::new();
        ps.insert("w", rand2(4, 3, &mut rng).into_dyn());
        ps.insert("b", Array1::from_shape_fn(3, |_| rng.random_range(-1.0f64..1.0)).into_dyn());
        let x = rand2(5, 4, &mut rng);
        for p in ["w", "b"] {
            check_param_grad(&ps, p, |ps, g| {
                let xi = g.input2(&x);
                let w = g.param(ps, "w");
                let b = g.param(ps, "b");
                let y = g.linear(xi, w, b);
                let r = g.relu(y);
                g.sum_all(r)
            });
        }
    }

    #[test]
    fn softmax_and_logsoftmax_grads() {
        let mut rng = stream_rng(2, &["nn-sm"]);
        let mut ps = ParamSet::new();
        ps.insert("x", rand2(3, 5, &mut rng).into_dyn());
        let wsum = rand2(3, 5, &mut rng);
        check_param_grad(&ps, "x", |ps, g| {
            let x = g.param(ps, "x");
            let s = g.softmax(x);
            let w = g.mul_const(s, wsum.clone().into_dyn());
            g.sum_all(w)
        });
        check_param_grad(&ps, "x", |ps, g| {
            let x = g.param(ps, "x");
            let s = g.log_softmax(x);
            let w = g.mul_const(s, wsum.clone().into_dyn());
            g.sum_all(w)
        });
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = stream_rng(3, &["nn-ln"]);
        let mut ps = ParamSet::new();
        ps.insert("x", rand2(4, 6, &mut rng).into_dyn());
        ps.insert("gamma", Array1::from_shape_fn(6, |_| rng.random_range(0.5f64..1.5)).into_dyn());
        ps.insert("beta", Array1::from_shape_fn(6, |_| rng.random_range(-0.5f64..0.5)).into_dyn());
        let wsum = rand2(4, 6, &mut rng);
        for p in ["x", "gamma", "beta"] {
            check_param_grad(&ps, p, |ps, g| {
                let x = g.param(ps, "x");
                let gm = g.param(ps, "gamma");
                let bt = g.param(ps, "beta");
                let y = g.layer_norm(x, gm, bt, 1e-12);
                let w = g.mul_const(y, wsum.clone().into_dyn());
                g.sum_all(w)
            });
        }
    }

    #[test]
    fn pooling_grads() {
        let mut rng = stream_rng(4, &["nn-pool"]);
        let mut ps = ParamSet::new();
        ps.insert("x", rand2(7, 3, &mut rng).into_dyn());
        let w1 = rand2(1, 3, &mut rng);
        let w2 = rand2(1, 6, &mut rng);
        check_param_grad(&ps, "x", |ps, g| {
            let x = g.param(ps, "x");
            let m = g.mean_rows(x);
            let w = g.mul_const(m, w1.clone().into_dyn());
            g.sum_all(w)
        });
        check_param_grad(&ps, "x", |ps, g| {
            let x = g.param(ps, "x");
            let m = g.mean_rows(x);
            let s = g.std_rows(x, 1e-8);
            let cat = g.concat_cols(&[m, s]);
            let w = g.mul_const(cat, w2.clone().into_dyn());
            g.sum_all(w)
        });
    }

    #[test]
    fn conv2d_grads_and_shape() {
        let mut rng = stream_rng(5, &["nn-conv"]);
        let mut ps = ParamSet::new();
        ps.insert(
            "w",
            ArrayD::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |_| rng.random_range(-0.5..0.5)),
        );
        ps.insert("b", Array1::from_shape_fn(2, |_| rng.random_range(-0.5f64..0.5)).into_dyn());
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 9, 7]), |_| rng.random_range(-1.0..1.0));
        {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let w = g.param(&ps, "w");
            let b = g.param(&ps, "b");
            let y = g.conv2d(xi, w, b, 2);
            // (9-3)/2+1 = 4, (7-3)/2+1 = 3
            assert_eq!(g.shape(y), &[2, 4, 3]);
        }
        for p in ["w", "b"] {
            check_param_grad(&ps, p, |ps, g| {
                let xi = g.input(x.clone());
                let w = g.param(ps, "w");
                let b = g.param(ps, "b");
                let y = g.conv2d(xi, w, b, 2);
                let r = g.relu(y);
                g.sum_all(r)
            });
        }
    }

    #[test]
    fn embedding_slice_concat_grads() {
        let mut rng = stream_rng(6, &["nn-emb"]);
        let mut ps = ParamSet::new();
        ps.insert("emb", rand2(5, 4, &mut rng).into_dyn());
        let ids = vec![1usize, 3, 1, 0];
        check_param_grad(&ps, "emb", |ps, g| {
            let w = g.param(ps, "emb");
            let e = g.embedding(w, &ids);
            let left = g.slice_cols(e, 0, 2);
            let right = g.slice_cols(e, 2, 4);
            let cat = g.concat_cols(&[right, left]);
            g.sum_all(cat)
        });
    }

    #[test]
    fn cross_entropy_values_and_grads() {
        // Uniform logits, no smoothing: loss = ln(V).
        let mut g = Graph::new();
        let logits = g.input2(&Array2::zeros((2, 7)));
        let l = g.cross_entropy_ls(logits, &[3, 0], 0.0);
        assert!((g.scalar(l) - (7f64).ln()).abs() < 1e-12);

        // Hand-computed smoothed CE on a 3-class case.
        // logits [1,2,3]... wait keep literal: row [0.1, -0.4, 0.7], target 2, alpha 0.1
        let row = [0.1, -0.4, 0.7];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let q = [0.1 / 3.0, 0.1 / 3.0, 0.9 + 0.1 / 3.0];
        let expect: f64 = -(q[0] * (row[0] - lse) + q[1] * (row[1] - lse) + q[2] * (row[2] - lse));
        let mut g = Graph::new();
        let logits = g.input2(&Array2::from_shape_vec((1, 3), row.to_vec()).unwrap());
        let l = g.cross_entropy_ls(logits, &[2], 0.1);
        assert!((g.scalar(l) - expect).abs() < 1e-9);

        // One-hot-correct logits with a large margin: loss -> 0.
        let mut big = Array2::from_elem((1, 4), -50.0);
        big[[0, 1]] = 50.0;
        let mut g = Graph::new();
        let logits = g.input2(&big);
        let l = g.cross_entropy_ls(logits, &[1], 0.0);
        assert!(g.scalar(l) < 1e-9);

        // Gradient check.
        let mut rng = stream_rng(7, &["nn-ce"]);
        let mut ps = ParamSet::new();
        ps.insert("logits", rand2(3, 4, &mut rng).into_dyn());
        check_param_grad(&ps, "logits", |ps, g| {
            let x = g.param(ps, "logits");
            g.cross_entropy_ls(x, &[1, 3, 0], 0.1)
        });
    }

    /// Brute-force CTC: sum exp(path score) over all |V|^T paths whose
    /// collapse (dedup then strip blanks) equals the target.
    fn ctc_brute_force(lp: &Array2<f64>, target: &[usize], blank: usize) -> f64 {
        let t = lp.nrows();
        let v = lp.ncols();
        let mut total = f64::NEG_INFINITY;
        let n_paths = (v as u64).pow(t as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            for _ in 0..t {
                path.push((c % v as u64) as usize);
                c /= v as u64;
            }
            let mut collapsed = Vec::new();
            let mut prev = usize::MAX;
            for &p in &path {
                if p != prev && p != blank {
                    collapsed.push(p);
                }
                prev = p;
            }
            if collapsed == target {
                let score: f64 = path.iter().enumerate().map(|(i, &k)| lp[[i, k]]).sum();
                total = log_add(total, score);
            }
        }
        -total
    }

    #[test]
    fn ctc_single_frame_uniform() {
        // T=1, target=[a], uniform log-probs over {blank, a, b}: one
        // alignment, NLL = -log(1/3).
        let lp = Array2::from_elem((1, 3), (1.0f64 / 3.0).ln());
        let mut g = Graph::new();
        let x = g.input2(&lp);
        let l = g.ctc(x, &[1], 0).unwrap();
        assert!((g.scalar(l) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_matches_brute_force_enumeration() {
        let blank = 0;
        let mut rng = stream_rng(8, &["nn-ctc"]);
        for t in 1..=6 {
            for v in 2..=3usize {
                for target_len in 0..=3usize {
                    // Random targets of this length without blanks.
                    for _ in 0..4 {
                        let target: Vec<usize> =
                            (0..target_len).map(|_| rng.random_range(1..v)).collect();
                        if ctc_min_frames(&target) > t {
                            continue;
                        }
                        let lp = Array2::from_shape_fn((t, v), |_| rng.random_range(-3.0..0.0));
                        let mut g = Graph::new();
                        let x = g.input2(&lp);
                        let l = g.ctc(x, &target, blank).unwrap();
                        let brute = ctc_brute_force(&lp, &target, blank);
                        assert!(
                            (g.scalar(l) - brute).abs() < 1e-6,
                            "T={t} V={v} target={target:?}: {} vs {brute}",
                            g.scalar(l)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ctc_infeasible_target_is_an_error() {
        let lp = Array2::zeros((2, 3));
        let mut g = Graph::new();
        let x = g.input2(&lp);
        assert!(matches!(
            g.ctc(x, &[1, 1], 0),
            Err(Error::CtcInfeasible { .. })
        ));
        // Repeats need a separating blank: [1,1] needs 3 frames.
        assert_eq!(ctc_min_frames(&[1, 1]), 3);
        assert_eq!(ctc_min_frames(&[1, 2]), 2);
    }

    #[test]
    fn ctc_grads_match_finite_differences() {
        let mut rng = stream_rng(9, &["nn-ctc-grad"]);
        let mut ps = ParamSet::new();
        ps.insert("lp", rand2(5, 3, &mut rng).mapv(|v| v - 1.0).into_dyn());
        check_param_grad(&ps, "lp", |ps, g| {
            let x = g.param(ps, "lp");
            g.ctc(x, &[1, 2], 0).unwrap()
        });
    }

    #[test]
    fn ctc_is_stable_at_extreme_log_probs() {
        let mut lp = Array2::from_elem((6, 3), -30.0);
        for t in 0..6 {
            lp[[t, t % 3]] = 30.0;
        }
        let mut g = Graph::new();
        let x = g.input2(&lp);
        let l = g.ctc(x, &[1, 2], 0).unwrap();
        assert!(g.scalar(l).is_finite());
        let grads = {
            let mut ps = ParamSet::new();
            ps.insert("lp", lp.into_dyn());
            let mut g = Graph::new();
            let x = g.param(&ps, "lp");
            let l = g.ctc(x, &[1, 2], 0).unwrap();
            g.backward(l, 1)
        };
        assert!(grads.get(0).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_deterministic() {
        let mut rng = stream_rng(10, &["nn-drop"]);
        let x = rand2(6, 4, &mut rng);
        let mut g = Graph::new();
        let xi = g.input2(&x);
        let y = g.dropout(xi, 0.5, false, &mut rng);
        assert_eq!(g.value2(y), x);
        let a = {
            let mut g = Graph::new();
            let xi = g.input2(&x);
            let mut r = stream_rng(3, &["mask"]);
            let y = g.dropout(xi, 0.5, true, &mut r);
            g.value2(y)
        };
        let b = {
            let mut g = Graph::new();
            let xi = g.input2(&x);
            let mut r = stream_rng(3, &["mask"]);
            let y = g.dropout(xi, 0.5, true, &mut r);
            g.value2(y)
        };
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // x used twice: d(sum(x + x))/dx = 2.
        let mut ps = ParamSet::new();
        ps.insert("x", Array2::from_elem((2, 2), 1.5).into_dyn());
        let mut g = Graph::new();
        let x = g.param(&ps, "x");
        let y = g.add(x, x);
        let l = g.sum_all(y);
        let grads = g.backward(l, 1);
        assert!(grads.get(0).unwrap().iter().all(|&v| v == 2.0));
    }
}
