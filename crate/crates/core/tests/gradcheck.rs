mod common;

use common::{gradient_failures, graph_op_cases, layer_cases, loss_cases, random, stat_curve_cases};
use turbogan::nn::{Ctx, Graph, Layer, LayerSpec, Mode, ParamLayout};

fn assert_ok(cases: Vec<common::Case>) {
    assert!(!cases.is_empty());
    if let Some(msg) = gradient_failures(&cases) {
        panic!("{msg}");
    }
}

#[test]
fn every_layer_kind() {
    assert_ok(layer_cases());
}

#[test]
fn graph_ops() {
    assert_ok(graph_op_cases());
}

#[test]
fn bce_losses() {
    assert_ok(loss_cases());
}

#[test]
fn stat_curves_gradients() {
    assert_ok(stat_curve_cases());
}

#[test]
fn stat_curves_match_reference_statistics() {
    let x = random(vec![1, 64], 42);
    let lags = [1, 3, 9];
    let mut g = Graph::new();
    let id = g.input(x.clone());
    let c = g.stat_curves(id, &lags);
    let got = g.value(c).to_vec_f64();
    let want = turbogan::stats::realization_curves(&x.data, &lags).unwrap();
    for (j, w) in want.iter().enumerate() {
        for k in 0..3 {
            assert!((got[j * 3 + k] - w[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_train_normalizes_and_tracks_statistics() {
    let mut layout = ParamLayout::default();
    let layer = Layer::new(&mut layout, "bn", LayerSpec::BatchNorm { channels: 2 });
    let store = layout.init::<f64>(0);
    let x = random(vec![4, 2, 16], 51);
    let mut g = Graph::new();
    let ids = store.bind(&mut g, false);
    let xi = g.input(x.clone());
    let mut bufs = store.buffers.clone();
    let mut cx = Ctx {
        g: &mut g,
        params: &ids,
        buffers: &mut bufs,
        mode: Mode::Train,
    };
    let y = layer.forward(&mut cx, xi).unwrap();
    let yv = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|b| yv.data[(b * 2 + c) * 16..(b * 2 + c + 1) * 16].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3, "variance {v}");
    }
    assert_ne!(bufs, store.buffers);
}
