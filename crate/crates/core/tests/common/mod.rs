//! Checks shared by the focused integration tests and the acceptance target.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use turbogan::generator::{noise_rows, Generator};
use turbogan::nn::gradcheck::check_gradients;
use turbogan::nn::{Ctx, Graph, Layer, LayerSpec, Mode, NodeId, Padding, ParamLayout, ParamStore, Tensor};

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

/// Values bounded away from zero so ReLU kinks stay out of the difference stencil.
pub fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Fixed random projection to a scalar, so every output entry matters.
pub fn project(g: &mut Graph<f64>, y: NodeId) -> NodeId {
    let n = g.value(y).len();
    let w = random(vec![n], 999).data;
    g.weighted_sum(y, w)
}

/// Worst relative gradient error of one layer, parameters included as probed inputs.
pub fn layer_error(spec: &LayerSpec, x_shape: Vec<usize>, mode: Mode) -> f64 {
    let mut layout = ParamLayout::default();
    let layer = Layer::new(&mut layout, "probe", spec.clone());
    let store = layout.init::<f64>(3);
    let mut inputs = vec![random(x_shape, 1)];
    for (k, p) in store.params.iter().enumerate() {
        inputs.push(random(p.shape.clone(), 10 + k as u64));
    }
    let buffers = store.buffers.clone();
    check_gradients(&inputs, H, 64, |g, ids| {
        let mut bufs = buffers.clone();
        let mut cx = Ctx {
            g,
            params: &ids[1..],
            buffers: &mut bufs,
            mode,
        };
        let y = layer.forward(&mut cx, ids[0]).unwrap();
        project(cx.g, y)
    })
    .max_error()
}

pub type Case = (String, f64);

pub fn layer_cases() -> Vec<Case> {
    let mut out = vec![];
    let mut push = |spec: LayerSpec, shape: Vec<usize>, mode: Mode| {
        let e = layer_error(&spec, shape, mode);
        out.push((format!("{spec:?} {mode:?}"), e));
    };
    for (kernel, stride, padding) in [
        (3, 1, Padding::Same),
        (4, 1, Padding::Same),
        (5, 2, Padding::None),
        (8, 2, Padding::None),
    ] {
        let spec = LayerSpec::Conv1d {
            in_ch: 2,
            out_ch: 3,
            kernel,
            stride,
            padding,
        };
        push(spec, vec![2, 2, 20], Mode::Train);
    }
    for kernel in [3, 4] {
        let spec = LayerSpec::TransposeConv1d {
            in_ch: 3,
            out_ch: 2,
            kernel,
            padding: Padding::Same,
        };
        push(spec, vec![2, 3, 12], Mode::Train);
    }
    push(LayerSpec::Dense { inputs: 7, outputs: 4 }, vec![3, 7], Mode::Train);
    for mode in [Mode::Train, Mode::TrainFrozenStats, Mode::Eval] {
        push(LayerSpec::BatchNorm { channels: 3 }, vec![2, 3, 10], mode);
        push(LayerSpec::BatchNorm { channels: 4 }, vec![5, 4], mode);
    }
    for spec in [
        LayerSpec::AvgPool2,
        LayerSpec::Upsample2,
        LayerSpec::Relu,
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Sigmoid,
        LayerSpec::Flatten,
    ] {
        push(spec, vec![2, 3, 8], Mode::Train);
    }
    out
}

pub fn graph_op_cases() -> Vec<Case> {
    let a = random(vec![2, 3, 6], 21);
    let b = random(vec![2, 1, 6], 22);
    let c = random(vec![1, 3, 6], 23);
    let d = random(vec![4, 2, 5], 24);
    let concat_channels = check_gradients(&[a.clone(), b], H, 64, |g, ids| {
        let y = g.concat_channels(ids[0], ids[1]);
        project(g, y)
    });
    let concat_batch = check_gradients(&[a.clone(), c], H, 64, |g, ids| {
        let y = g.concat_batch(ids[0], ids[1]);
        let m = g.mean_rows(y);
        project(g, m)
    });
    let slice_rows = check_gradients(&[d], H, 64, |g, ids| {
        let y = g.slice_rows(ids[0], 1, 2);
        project(g, y)
    });
    let reshaping = check_gradients(&[a], H, 64, |g, ids| {
        let y = g.reshape(ids[0], vec![2, 6, 3]);
        let s = g.select_last(y, 1);
        let t = g.linear(&[(s, 0.7), (s, -2.0)]);
        let m = g.mean(t);
        let sq = g.linear(&[(m, 3.0)]);
        project(g, sq)
    });
    vec![
        ("concat_channels".into(), concat_channels.max_error()),
        ("concat_batch/mean_rows".into(), concat_batch.max_error()),
        ("slice_rows".into(), slice_rows.max_error()),
        ("reshape/select_last/linear/mean".into(), reshaping.max_error()),
    ]
}

pub fn loss_cases() -> Vec<Case> {
    let logits = random(vec![6, 1], 31);
    let bce = check_gradients(&[logits.clone()], H, 64, |g, ids| {
        let p = g.sigmoid(ids[0]);
        g.bce(p, 1.0)
    });
    let labels = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let groups = check_gradients(&[logits], H, 64, |g, ids| {
        let p = g.sigmoid(ids[0]);
        let l = g.bce_groups(p, labels.clone(), 3);
        project(g, l)
    });
    vec![
        ("bce".into(), bce.max_error()),
        ("bce_groups".into(), groups.max_error()),
    ]
}

pub fn stat_curve_cases() -> Vec<Case> {
    let x = random(vec![2, 64], 41);
    let lags = [1, 2, 5, 11];
    let r = check_gradients(&[x], H, 128, |g, ids| {
        let c = g.stat_curves(ids[0], &lags);
        project(g, c)
    });
    vec![("stat_curves".into(), r.max_error())]
}

pub fn all_gradient_cases() -> Vec<Case> {
    let mut v = layer_cases();
    v.extend(graph_op_cases());
    v.extend(loss_cases());
    v.extend(stat_curve_cases());
    v
}

/// Failing cases as a readable message, or `None` when all are within `TOL`.
pub fn gradient_failures(cases: &[Case]) -> Option<String> {
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, e)| !(*e < TOL))
        .map(|(n, e)| format!("{n}: {e:.3e}"))
        .collect();
    (!bad.is_empty()).then(|| bad.join("; "))
}

fn eval_rows(g: &Generator, store: &ParamStore<f64>, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows[0].len();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let out = g.apply(store, Tensor::from_f64(vec![rows.len(), n], &flat)).unwrap();
    out.data.chunks(n).map(|c| c.to_vec()).collect()
}

pub struct Locality {
    /// `(input index, output index)` pairs changed outside the receptive field.
    pub violations: Vec<(usize, usize)>,
    /// Outputs inside the receptive field that did change, over all probes.
    pub changed_inside: usize,
}

/// Perturbs single input samples and compares every output with the unperturbed run.
pub fn locality(g: &Generator, store: &ParamStore<f64>, n: usize, probes: &[usize]) -> Locality {
    let (left, right) = g.receptive_radius();
    let base = noise_rows(1, n, 17, 0);
    let mut rows = vec![base.clone()];
    for &p in probes {
        let mut r = base.clone();
        r[p] += 1.0;
        rows.push(r);
    }
    let out = eval_rows(g, store, &rows);
    let mut res = Locality {
        violations: vec![],
        changed_inside: 0,
    };
    for (k, &p) in probes.iter().enumerate() {
        // output t reads inputs t - left ..= t + right
        let lo = p.saturating_sub(right);
        let hi = (p + left).min(n - 1);
        for t in 0..n {
            if out[k + 1][t] != out[0][t] {
                if (lo..=hi).contains(&t) {
                    res.changed_inside += 1;
                } else {
                    res.violations.push((p, t));
                }
            }
        }
    }
    res
}

/// Largest interior mismatch between `G(x)` shifted by `shift` and `G(shift(x))`.
pub fn shift_mismatch(g: &Generator, store: &ParamStore<f64>, n: usize, shift: usize) -> f64 {
    let (left, right) = g.receptive_radius();
    let long = noise_rows(1, n + shift, 23, 0);
    let a = long[..n].to_vec();
    let b = long[shift..].to_vec();
    let out = eval_rows(g, store, &[a, b]);
    (left..n.saturating_sub(shift + right))
        .map(|t| (out[1][t] - out[0][t + shift]).abs())
        .fold(0.0, f64::max)
}
