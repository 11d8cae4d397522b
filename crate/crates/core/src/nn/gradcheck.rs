//! Central-difference gradient checks for graph-built scalar functions.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Norm-wise relative error per input tensor, over the probed entries.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of `f` with central differences of step `h`.
/// At most `max_probes` evenly spaced entries are probed per tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_probes: usize, f: F) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<_> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &ids);
    g.backward(out);
    let analytic: Vec<_> = ids.iter().map(|&id| g.grad(id)).collect();

    let mut rel_errors = vec![];
    let mut vals = inputs.to_vec();
    for k in 0..inputs.len() {
        let n = inputs[k].len();
        let stride = n.div_ceil(max_probes.max(1)).max(1);
        let (mut diff2, mut a2, mut b2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = vals[k].data[i];
            vals[k].data[i] = orig + h;
            let up = eval(&vals);
            vals[k].data[i] = orig - h;
            let down = eval(&vals);
            vals[k].data[i] = orig;
            let num = (up - down) / (2.0 * h);
            let ana = analytic[k].data[i];
            diff2 += (num - ana) * (num - ana);
            a2 += ana * ana;
            b2 += num * num;
        }
        let denom = a2.sqrt() + b2.sqrt();
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    GradCheck { rel_errors }
}
