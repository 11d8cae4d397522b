//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into every node that depends on a
//! trainable leaf.

use crate::stats::differentiable::{self, LagCache};

use super::tensor::{axpy, dot, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad_l: usize,
    },
    FlipTranspose {
        w: NodeId,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        inv_std: Vec<T>,
        running: bool,
    },
    AvgPool2 {
        x: NodeId,
    },
    Upsample2 {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: T,
    },
    Sigmoid {
        x: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    ConcatBatch {
        a: NodeId,
        b: NodeId,
    },
    SliceRows {
        x: NodeId,
        offset: usize,
    },
    Reshape {
        x: NodeId,
    },
    SelectLast {
        x: NodeId,
        k: usize,
        width: usize,
    },
    StatCurves {
        x: NodeId,
        lags: Vec<usize>,
        cache: Vec<Vec<LagCache>>,
    },
    BceGroups {
        p: NodeId,
        labels: Vec<T>,
        groups: usize,
    },
    Linear {
        terms: Vec<(NodeId, T)>,
    },
    Mean {
        x: NodeId,
    },
    MeanRows {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Clamp applied to probabilities before taking logs in the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Batch-normalization behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Batch,
    /// Normalize with the given running statistics.
    Running,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad_l: usize, pad_r: usize) -> usize {
    assert!(
        len + pad_l + pad_r >= kernel,
        "conv1d: padded length {} shorter than kernel {kernel}",
        len + pad_l + pad_r
    );
    (len + pad_l + pad_r - kernel) / stride + 1
}

/// Output positions `t` in `[lo, hi)` for which `t*stride + k - pad_l` lands in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad_l: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad_l as isize;
    let s = stride as isize;
    // t*s >= pad - k
    let lo = if pad - k <= 0 { 0 } else { (pad - k + s - 1) / s };
    // t*s <= len - 1 + pad - k
    let top = len as isize - 1 + pad - k;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(out_len as isize) };
    (lo as usize, hi.max(lo) as usize)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    /// Constant input: no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data[0]
    }

    /// Gradient of the last `backward` target with respect to `id`, zeros if unreached.
    pub fn grad(&self, id: NodeId) -> Tensor<T> {
        let shape = self.nodes[id.0].value.shape.clone();
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Strided 1D convolution. `x: [B, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad_l: usize,
        pad_r: usize,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv1d: input must be [B, C, L], got {xs:?}");
        assert_eq!(ws.len(), 3, "conv1d: weight must be [Cout, Cin, K], got {ws:?}");
        let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(cin, wcin, "conv1d: input has {cin} channels, weight expects {wcin}");
        assert!(stride >= 1);
        let out_len = conv_out_len(len, k, stride, pad_l, pad_r);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let mut y = vec![T::zero(); bsz * cout * out_len];
        for bi in 0..bsz {
            for o in 0..cout {
                let yrow = &mut y[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value.data[o];
                    yrow.iter_mut().for_each(|v| *v = bias);
                }
                for i in 0..cin {
                    let xrow = &xv[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                    let wrow = &wv[(o * cin + i) * k..(o * cin + i + 1) * k];
                    for (kk, &wk) in wrow.iter().enumerate() {
                        let (lo, hi) = valid_range(kk, pad_l, stride, len, out_len);
                        if lo >= hi {
                            continue;
                        }
                        let start = lo * stride + kk - pad_l;
                        if stride == 1 {
                            axpy(wk, &xrow[start..start + (hi - lo)], &mut yrow[lo..hi]);
                        } else {
                            for (j, t) in (lo..hi).enumerate() {
                                yrow[t] += wk * xrow[start + j * stride];
                            }
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        self.push(
            Tensor::new(vec![bsz, cout, out_len], y),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_l,
            },
            ng,
        )
    }

    /// `[Cin, Cout, K]` to `[Cout, Cin, K]` with the kernel axis reversed.
    pub fn flip_transpose(&mut self, w: NodeId) -> NodeId {
        let s = self.shape(w).to_vec();
        let (ci, co, k) = (s[0], s[1], s[2]);
        let wv = &self.nodes[w.0].value.data;
        let mut out = vec![T::zero(); wv.len()];
        for i in 0..ci {
            for o in 0..co {
                for kk in 0..k {
                    out[(o * ci + i) * k + kk] = wv[(i * co + o) * k + (k - 1 - kk)];
                }
            }
        }
        let ng = self.ng(&[w]);
        self.push(Tensor::new(vec![co, ci, k], out), Op::FlipTranspose { w }, ng)
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "dense: input must be [B, F], got {xs:?}");
        assert_eq!(xs[1], ws[1], "dense: input has {} features, weight expects {}", xs[1], ws[1]);
        let (bsz, nin, nout) = (xs[0], xs[1], ws[0]);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = b.map(|b| &self.nodes[b.0].value.data);
        let mut y = vec![T::zero(); bsz * nout];
        for bi in 0..bsz {
            let xr = &xv[bi * nin..(bi + 1) * nin];
            for o in 0..nout {
                let mut v = dot(&wv[o * nin..(o + 1) * nin], xr);
                if let Some(bv) = bv {
                    v += bv[o];
                }
                y[bi * nout + o] = v;
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        self.push(Tensor::new(vec![bsz, nout], y), Op::Dense { x, w, b }, ng)
    }

    /// Per-channel normalization of `[B, C, L]` or `[B, C]`.
    ///
    /// Returns the output and, in [`BnMode::Batch`], the batch mean and unbiased
    /// variance for updating running statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        running: (&[T], &[T]),
        eps: f64,
    ) -> (NodeId, Option<(Vec<T>, Vec<T>)>) {
        let s = self.shape(x).to_vec();
        let (bsz, c) = (s[0], s[1]);
        let len = if s.len() == 3 { s[2] } else { 1 };
        let m = bsz * len;
        let xv = &self.nodes[x.0].value.data;
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = None;
        match mode {
            BnMode::Batch => {
                let mut var_unbiased = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s1 = 0.0f64;
                    for bi in 0..bsz {
                        let off = (bi * c + ch) * len;
                        s1 += xv[off..off + len].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s1 / m as f64;
                    let mut s2 = 0.0f64;
                    for bi in 0..bsz {
                        let off = (bi * c + ch) * len;
                        s2 += xv[off..off + len]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    let var = s2 / m as f64;
                    mean[ch] = T::of(mu);
                    inv_std[ch] = T::of(1.0 / (var + eps).sqrt());
                    var_unbiased[ch] = T::of(if m > 1 { s2 / (m - 1) as f64 } else { var });
                }
                stats = Some((mean.clone(), var_unbiased));
            }
            BnMode::Running => {
                for ch in 0..c {
                    mean[ch] = running.0[ch];
                    inv_std[ch] = T::of(1.0 / (running.1[ch].as_f64() + eps).sqrt());
                }
            }
        }
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut y = vec![T::zero(); xv.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let off = (bi * c + ch) * len;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for t in off..off + len {
                    y[t] = g * (xv[t] - mu) * is + b;
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(s, y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                running: mode == BnMode::Running,
            },
            ng,
        );
        (id, stats)
    }

    /// Averages non-overlapping pairs along the last axis of `[B, C, L]`.
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let (rows, len) = (s[0] * s[1], s[2]);
        let out_len = len / 2;
        let xv = &self.nodes[x.0].value.data;
        let half = T::of(0.5);
        let mut y = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let xr = &xv[r * len..(r + 1) * len];
            y.extend((0..out_len).map(|t| (xr[2 * t] + xr[2 * t + 1]) * half));
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![s[0], s[1], out_len], y), Op::AvgPool2 { x }, ng)
    }

    /// Nearest-neighbor doubling along the last axis.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let xv = &self.nodes[x.0].value.data;
        let mut y = Vec::with_capacity(xv.len() * 2);
        for &v in xv {
            y.push(v);
            y.push(v);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![s[0], s[1], s[2] * 2], y), Op::Upsample2 { x }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let y = Tensor::new(
            v.shape.clone(),
            v.data.iter().map(|&a| a.max(T::zero())).collect(),
        );
        let ng = self.ng(&[x]);
        self.push(y, Op::Relu { x }, ng)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let slope = T::of(slope);
        let v = &self.nodes[x.0].value;
        let y = Tensor::new(
            v.shape.clone(),
            v.data
                .iter()
                .map(|&a| if a > T::zero() { a } else { a * slope })
                .collect(),
        );
        let ng = self.ng(&[x]);
        self.push(y, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let y = Tensor::new(
            v.shape.clone(),
            v.data
                .iter()
                .map(|&a| T::one() / (T::one() + (-a).exp()))
                .collect(),
        );
        let ng = self.ng(&[x]);
        self.push(y, Op::Sigmoid { x }, ng)
    }

    /// Joins `[B, Ca, L]` and `[B, Cb, L]` into `[B, Ca + Cb, L]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2],
            "concat: incompatible shapes {sa:?} and {sb:?}"
        );
        let (bsz, ca, cb, len) = (sa[0], sa[1], sb[1], sa[2]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut y = Vec::with_capacity(av.len() + bv.len());
        for bi in 0..bsz {
            y.extend_from_slice(&av[bi * ca * len..(bi + 1) * ca * len]);
            y.extend_from_slice(&bv[bi * cb * len..(bi + 1) * cb * len]);
        }
        let ng = self.ng(&[a, b]);
        self.push(
            Tensor::new(vec![bsz, ca + cb, len], y),
            Op::ConcatChannels { a, b },
            ng,
        )
    }

    /// Stacks two tensors along the leading axis.
    pub fn concat_batch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa[1..], sb[1..], "concat_batch: trailing shapes differ");
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut y = self.nodes[a.0].value.data.clone();
        y.extend_from_slice(&self.nodes[b.0].value.data);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(shape, y), Op::ConcatBatch { a, b }, ng)
    }

    /// Rows `start..start + rows` of the leading axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, rows: usize) -> NodeId {
        let mut shape = self.shape(x).to_vec();
        assert!(start + rows <= shape[0], "slice_rows: {start}+{rows} exceeds {}", shape[0]);
        let inner: usize = shape[1..].iter().product();
        shape[0] = rows;
        let y = self.nodes[x.0].value.data[start * inner..(start + rows) * inner].to_vec();
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(shape, y),
            Op::SliceRows {
                x,
                offset: start * inner,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.nodes[x.0].value.data.clone();
        assert_eq!(
            shape.iter().product::<usize>(),
            v.len(),
            "reshape: {shape:?} incompatible with {} elements",
            v.len()
        );
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, v), Op::Reshape { x }, ng)
    }

    /// Picks index `k` of the last axis.
    pub fn select_last(&mut self, x: NodeId, k: usize) -> NodeId {
        let s = self.shape(x).to_vec();
        let width = *s.last().expect("non-scalar");
        assert!(k < width);
        let v = &self.nodes[x.0].value.data;
        let y: Vec<T> = v.chunks_exact(width).map(|c| c[k]).collect();
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(s[..s.len() - 1].to_vec(), y),
            Op::SelectLast { x, k, width },
            ng,
        )
    }

    /// `[B, N]` signals to `[B, |lags|, 3]` curves `[log S_2, S, log(F/3)]`.
    pub fn stat_curves(&mut self, x: NodeId, lags: &[usize]) -> NodeId {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "stat_curves: input must be [B, N]");
        let (bsz, n) = (s[0], s[1]);
        assert!(lags.iter().all(|&l| l >= 1 && l < n), "stat_curves: lag out of range");
        let xv = &self.nodes[x.0].value.data;
        let nl = lags.len();
        let mut y = vec![T::zero(); bsz * nl * 3];
        let mut cache = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            cache.push(differentiable::row_forward(
                &xv[bi * n..(bi + 1) * n],
                lags,
                &mut y[bi * nl * 3..(bi + 1) * nl * 3],
            ));
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![bsz, nl, 3], y),
            Op::StatCurves {
                x,
                lags: lags.to_vec(),
                cache,
            },
            ng,
        )
    }

    /// Binary cross-entropy averaged per group: element `m` of `p` belongs to
    /// group `m % groups`. Output has shape `[groups]`.
    pub fn bce_groups(&mut self, p: NodeId, labels: Vec<T>, groups: usize) -> NodeId {
        let pv = &self.nodes[p.0].value.data;
        assert_eq!(pv.len(), labels.len(), "bce: {} predictions, {} labels", pv.len(), labels.len());
        assert!(groups >= 1 && pv.len() % groups == 0);
        let per = (pv.len() / groups) as f64;
        let mut out = vec![0.0f64; groups];
        for (m, (&pi, &yi)) in pv.iter().zip(&labels).enumerate() {
            let pc = pi.as_f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = yi.as_f64();
            out[m % groups] -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let out = out.into_iter().map(|v| T::of(v / per)).collect();
        let ng = self.ng(&[p]);
        self.push(
            Tensor::new(vec![groups], out),
            Op::BceGroups { p, labels, groups },
            ng,
        )
    }

    /// Mean binary cross-entropy against a constant label.
    pub fn bce(&mut self, p: NodeId, label: f64) -> NodeId {
        let n = self.nodes[p.0].value.len();
        let id = self.bce_groups(p, vec![T::of(label); n], 1);
        self.reshape(id, vec![1])
    }

    /// `sum_i c_i * x_i` over same-shaped tensors.
    pub fn linear(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        assert!(!terms.is_empty());
        let shape = self.shape(terms[0].0).to_vec();
        let mut y = vec![T::zero(); shape.iter().product()];
        let terms: Vec<(NodeId, T)> = terms.iter().map(|&(id, c)| (id, T::of(c))).collect();
        for &(id, c) in &terms {
            assert_eq!(self.shape(id), &shape[..], "linear: shape mismatch");
            axpy(c, &self.nodes[id.0].value.data, &mut y);
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&ids);
        self.push(Tensor::new(shape, y), Op::Linear { terms }, ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value.data;
        let m = v.iter().map(|a| a.as_f64()).sum::<f64>() / v.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(vec![1], vec![T::of(m)]), Op::Mean { x }, ng)
    }

    /// Mean over the leading axis: `[B, ...]` to `[1, ...]`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        let b = s[0];
        let width = self.nodes[x.0].value.len() / b;
        let v = &self.nodes[x.0].value.data;
        let y: Vec<T> = (0..width)
            .map(|j| T::of((0..b).map(|i| v[i * width + j].as_f64()).sum::<f64>() / b as f64))
            .collect();
        let mut shape = s;
        shape[0] = 1;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, y), Op::MeanRows { x }, ng)
    }

    /// `sum_i w_i x_i` to a scalar.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<T>) -> NodeId {
        let v = &self.nodes[x.0].value.data;
        assert_eq!(v.len(), weights.len());
        let s = v
            .iter()
            .zip(&weights)
            .map(|(a, w)| a.as_f64() * w.as_f64())
            .sum::<f64>();
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(vec![1], vec![T::of(s)]),
            Op::WeightedSum { x, weights },
            ng,
        )
    }

    fn acc<'a>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId) -> &'a mut Vec<T> {
        let n = nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Reverse pass from a scalar node, seeding `d(out)/d(out) = 1`.
    pub fn backward(&mut self, out: NodeId) {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward needs a scalar output");
        self.grads = vec![None; self.nodes.len()];
        self.grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy);
            self.grads[idx] = Some(gy);
        }
    }

    fn backprop_node(&mut self, idx: usize, gy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        let needs = |id: NodeId| nodes[id.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_l,
            } => {
                let (x, w, stride, pad_l) = (*x, *w, *stride, *pad_l);
                let xs = &nodes[x.0].value.shape;
                let ws = &nodes[w.0].value.shape;
                let (bsz, cin, len) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let out_len = node.value.shape[2];
                if let Some(b) = *b {
                    if needs(b) {
                        let gb = Self::acc(grads, nodes, b);
                        for bi in 0..bsz {
                            for o in 0..cout {
                                let off = (bi * cout + o) * out_len;
                                gb[o] += gy[off..off + out_len].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if needs(w) {
                    let xv = &nodes[x.0].value.data;
                    let gw = Self::acc(grads, nodes, w);
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let gyr = &gy[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                            for i in 0..cin {
                                let xr = &xv[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                                let gwr = &mut gw[(o * cin + i) * k..(o * cin + i + 1) * k];
                                for (kk, g) in gwr.iter_mut().enumerate() {
                                    let (lo, hi) = valid_range(kk, pad_l, stride, len, out_len);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let start = lo * stride + kk - pad_l;
                                    if stride == 1 {
                                        *g += dot(&gyr[lo..hi], &xr[start..start + (hi - lo)]);
                                    } else {
                                        let mut s = T::zero();
                                        for (j, t) in (lo..hi).enumerate() {
                                            s += gyr[t] * xr[start + j * stride];
                                        }
                                        *g += s;
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(x) {
                    let wv = &nodes[w.0].value.data;
                    let gx = Self::acc(grads, nodes, x);
                    for bi in 0..bsz {
                        for o in 0..cout {
                            let gyr = &gy[(bi * cout + o) * out_len..(bi * cout + o + 1) * out_len];
                            for i in 0..cin {
                                let gxr = &mut gx[(bi * cin + i) * len..(bi * cin + i + 1) * len];
                                let wr = &wv[(o * cin + i) * k..(o * cin + i + 1) * k];
                                for (kk, &wk) in wr.iter().enumerate() {
                                    let (lo, hi) = valid_range(kk, pad_l, stride, len, out_len);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let start = lo * stride + kk - pad_l;
                                    if stride == 1 {
                                        axpy(wk, &gyr[lo..hi], &mut gxr[start..start + (hi - lo)]);
                                    } else {
                                        for (j, t) in (lo..hi).enumerate() {
                                            gxr[start + j * stride] += wk * gyr[t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::FlipTranspose { w } => {
                let w = *w;
                if needs(w) {
                    let s = &nodes[w.0].value.shape;
                    let (ci, co, k) = (s[0], s[1], s[2]);
                    let gw = Self::acc(grads, nodes, w);
                    for i in 0..ci {
                        for o in 0..co {
                            for kk in 0..k {
                                gw[(i * co + o) * k + (k - 1 - kk)] += gy[(o * ci + i) * k + kk];
                            }
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (x, w) = (*x, *w);
                let xs = &nodes[x.0].value.shape;
                let (bsz, nin) = (xs[0], xs[1]);
                let nout = nodes[w.0].value.shape[0];
                if let Some(b) = *b {
                    if needs(b) {
                        let gb = Self::acc(grads, nodes, b);
                        for bi in 0..bsz {
                            for o in 0..nout {
                                gb[o] += gy[bi * nout + o];
                            }
                        }
                    }
                }
                if needs(w) {
                    let xv = &nodes[x.0].value.data;
                    let gw = Self::acc(grads, nodes, w);
                    for bi in 0..bsz {
                        let xr = &xv[bi * nin..(bi + 1) * nin];
                        for o in 0..nout {
                            axpy(gy[bi * nout + o], xr, &mut gw[o * nin..(o + 1) * nin]);
                        }
                    }
                }
                if needs(x) {
                    let wv = &nodes[w.0].value.data;
                    let gx = Self::acc(grads, nodes, x);
                    for bi in 0..bsz {
                        let gxr = &mut gx[bi * nin..(bi + 1) * nin];
                        for o in 0..nout {
                            axpy(gy[bi * nout + o], &wv[o * nin..(o + 1) * nin], gxr);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                running,
            } => {
                let (x, gamma, beta, running) = (*x, *gamma, *beta, *running);
                let s = &nodes[x.0].value.shape;
                let (bsz, c) = (s[0], s[1]);
                let len = if s.len() == 3 { s[2] } else { 1 };
                let m = (bsz * len) as f64;
                let xv = &nodes[x.0].value.data;
                let gv = &nodes[gamma.0].value.data;
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let off = (bi * c + ch) * len;
                        for t in off..off + len {
                            let xh = ((xv[t] - mean[ch]) * inv_std[ch]).as_f64();
                            let d = gy[t].as_f64();
                            sum_dy[ch] += d;
                            sum_dy_xhat[ch] += d * xh;
                        }
                    }
                }
                if needs(gamma) {
                    let gg = Self::acc(grads, nodes, gamma);
                    for ch in 0..c {
                        gg[ch] += T::of(sum_dy_xhat[ch]);
                    }
                }
                if needs(beta) {
                    let gb = Self::acc(grads, nodes, beta);
                    for ch in 0..c {
                        gb[ch] += T::of(sum_dy[ch]);
                    }
                }
                if needs(x) {
                    let gx = Self::acc(grads, nodes, x);
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let off = (bi * c + ch) * len;
                            let g = gv[ch].as_f64();
                            let is = inv_std[ch].as_f64();
                            let mu = mean[ch].as_f64();
                            for t in off..off + len {
                                let d = gy[t].as_f64();
                                let v = if running {
                                    g * is * d
                                } else {
                                    let xh = (xv[t].as_f64() - mu) * is;
                                    g * is / m * (m * d - sum_dy[ch] - xh * sum_dy_xhat[ch])
                                };
                                gx[t] += T::of(v);
                            }
                        }
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let x = *x;
                if needs(x) {
                    let s = &nodes[x.0].value.shape;
                    let (rows, len) = (s[0] * s[1], s[2]);
                    let out_len = len / 2;
                    let half = T::of(0.5);
                    let gx = Self::acc(grads, nodes, x);
                    for r in 0..rows {
                        for t in 0..out_len {
                            let g = gy[r * out_len + t] * half;
                            gx[r * len + 2 * t] += g;
                            gx[r * len + 2 * t + 1] += g;
                        }
                    }
                }
            }
            Op::Upsample2 { x } => {
                let x = *x;
                if needs(x) {
                    let gx = Self::acc(grads, nodes, x);
                    for (i, g) in gx.iter_mut().enumerate() {
                        *g += gy[2 * i] + gy[2 * i + 1];
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if needs(x) {
                    let xv = &nodes[x.0].value.data;
                    let gx = Self::acc(grads, nodes, x);
                    for i in 0..gx.len() {
                        if xv[i] > T::zero() {
                            gx[i] += gy[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                if needs(x) {
                    let xv = &nodes[x.0].value.data;
                    let gx = Self::acc(grads, nodes, x);
                    for i in 0..gx.len() {
                        gx[i] += if xv[i] > T::zero() { gy[i] } else { gy[i] * slope };
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if needs(x) {
                    let yv = &node.value.data;
                    let gx = Self::acc(grads, nodes, x);
                    for i in 0..gx.len() {
                        gx[i] += gy[i] * yv[i] * (T::one() - yv[i]);
                    }
                }
            }
            Op::ConcatChannels { a, b } => {
                let (a, b) = (*a, *b);
                let sa = &nodes[a.0].value.shape;
                let sb = &nodes[b.0].value.shape;
                let (bsz, ca, cb, len) = (sa[0], sa[1], sb[1], sa[2]);
                let ctot = ca + cb;
                if needs(a) {
                    let ga = Self::acc(grads, nodes, a);
                    for bi in 0..bsz {
                        let src = &gy[bi * ctot * len..bi * ctot * len + ca * len];
                        axpy(T::one(), src, &mut ga[bi * ca * len..(bi + 1) * ca * len]);
                    }
                }
                if needs(b) {
                    let gb = Self::acc(grads, nodes, b);
                    for bi in 0..bsz {
                        let src = &gy[bi * ctot * len + ca * len..(bi + 1) * ctot * len];
                        axpy(T::one(), src, &mut gb[bi * cb * len..(bi + 1) * cb * len]);
                    }
                }
            }
            Op::ConcatBatch { a, b } => {
                let (a, b) = (*a, *b);
                let na = nodes[a.0].value.len();
                if needs(a) {
                    axpy(T::one(), &gy[..na], Self::acc(grads, nodes, a));
                }
                if needs(b) {
                    axpy(T::one(), &gy[na..], Self::acc(grads, nodes, b));
                }
            }
            Op::SliceRows { x, offset } => {
                let (x, offset) = (*x, *offset);
                if needs(x) {
                    let gx = Self::acc(grads, nodes, x);
                    axpy(T::one(), gy, &mut gx[offset..offset + gy.len()]);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if needs(x) {
                    axpy(T::one(), gy, Self::acc(grads, nodes, x));
                }
            }
            Op::SelectLast { x, k, width } => {
                let (x, k, width) = (*x, *k, *width);
                if needs(x) {
                    let gx = Self::acc(grads, nodes, x);
                    for (i, &g) in gy.iter().enumerate() {
                        gx[i * width + k] += g;
                    }
                }
            }
            Op::StatCurves { x, lags, cache } => {
                let x = *x;
                if needs(x) {
                    let s = &nodes[x.0].value.shape;
                    let (bsz, n) = (s[0], s[1]);
                    let nl = lags.len();
                    let xv = &nodes[x.0].value.data;
                    let gx = Self::acc(grads, nodes, x);
                    for bi in 0..bsz {
                        differentiable::row_backward(
                            &xv[bi * n..(bi + 1) * n],
                            lags,
                            &cache[bi],
                            &gy[bi * nl * 3..(bi + 1) * nl * 3],
                            &mut gx[bi * n..(bi + 1) * n],
                        );
                    }
                }
            }
            Op::BceGroups { p, labels, groups } => {
                let (p, groups) = (*p, *groups);
                if needs(p) {
                    let pv = &nodes[p.0].value.data;
                    let per = (pv.len() / groups) as f64;
                    let gp = Self::acc(grads, nodes, p);
                    for (m, (&pi, &yi)) in pv.iter().zip(labels).enumerate() {
                        let pf = pi.as_f64();
                        if pf <= BCE_EPS || pf >= 1.0 - BCE_EPS {
                            continue;
                        }
                        let y = yi.as_f64();
                        let d = (-y / pf + (1.0 - y) / (1.0 - pf)) / per;
                        gp[m] += T::of(d * gy[m % groups].as_f64());
                    }
                }
            }
            Op::Linear { terms } => {
                for &(id, c) in terms {
                    if needs(id) {
                        axpy(c, gy, Self::acc(grads, nodes, id));
                    }
                }
            }
            Op::Mean { x } => {
                let x = *x;
                if needs(x) {
                    let gx = Self::acc(grads, nodes, x);
                    let g = gy[0] / T::of(gx.len() as f64);
                    gx.iter_mut().for_each(|v| *v += g);
                }
            }
            Op::MeanRows { x } => {
                let x = *x;
                if needs(x) {
                    let gx = Self::acc(grads, nodes, x);
                    let b = T::of((gx.len() / gy.len()) as f64);
                    for row in gx.chunks_exact_mut(gy.len()) {
                        for (v, &g) in row.iter_mut().zip(gy) {
                            *v += g / b;
                        }
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let x = *x;
                if needs(x) {
                    axpy(gy[0], weights, Self::acc(grads, nodes, x));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1, 6], vec![1., -2., 3., 0.5, 4., 7.]));
        let w = g.input(Tensor::new(vec![1, 1, 5], vec![0., 0., 1., 0., 0.]));
        let y = g.conv1d(x, w, None, 1, 2, 2);
        assert_eq!(g.value(y).data, g.value(x).data);
    }

    #[test]
    fn conv_hand_values_with_stride_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1, 5], vec![1., 2., 3., 4., 5.]));
        let w = g.input(Tensor::new(vec![1, 1, 2], vec![1., -1.]));
        let b = g.input(Tensor::new(vec![1], vec![0.5]));
        let y = g.conv1d(x, w, Some(b), 2, 0, 0);
        // windows [1,2], [3,4]
        assert_eq!(g.value(y).data, vec![-0.5, -0.5]);
    }

    #[test]
    fn even_kernel_same_padding_extra_on_right() {
        // kernel 2, pad_l 0, pad_r 1: y[t] = w0 x[t] + w1 x[t+1]
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, 1, 3], vec![1., 2., 3.]));
        let w = g.input(Tensor::new(vec![1, 1, 2], vec![10., 1.]));
        let y = g.conv1d(x, w, None, 1, 0, 1);
        assert_eq!(g.value(y).data, vec![12., 23., 30.]);
    }

    #[test]
    fn bce_at_half_is_log2() {
        let mut g = Graph::<f64>::new();
        let p = g.input(Tensor::new(vec![4], vec![0.5; 4]));
        let l = g.bce_groups(p, vec![1., 0., 1., 1.], 1);
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let q = g.input(Tensor::new(vec![2], vec![1.0, 0.0]));
        let l = g.bce_groups(q, vec![1., 0.], 1);
        assert!(g.scalar(l) < 1e-6);
    }

    #[test]
    fn bce_groups_split_by_modulo() {
        let mut g = Graph::<f64>::new();
        // rows b*m + i with m = 2 groups
        let p = g.input(Tensor::new(vec![4], vec![0.5, 0.9, 0.5, 0.9]));
        let l = g.bce_groups(p, vec![1.0; 4], 2);
        let v = &g.value(l).data;
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v[1] + 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![2], vec![-1.0, 2.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data, vec![-0.2, 2.0]);
    }

    #[test]
    fn gradients_only_reach_variables() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]));
        let c = g.input(Tensor::new(vec![2], vec![3.0, 4.0]));
        let s = g.linear(&[(a, 2.0), (c, 1.0)]);
        let m = g.mean(s);
        g.backward(m);
        assert_eq!(g.grad(a).data, vec![1.0, 1.0]);
        assert_eq!(g.grad(c).data, vec![0.0, 0.0]);
    }
}
