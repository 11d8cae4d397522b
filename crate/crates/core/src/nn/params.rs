use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::tensor::{Real, Tensor};

/// Standard deviation of the centered normal used for conv, transpose-conv and dense weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Shapes and initializers of a model's trainable arrays and non-trainable buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    pub params: Vec<ParamSpec>,
    pub buffers: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn add_param(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> usize {
        self.buffers.push(ParamSpec {
            name: name.into(),
            shape,
            init,
        });
        self.buffers.len() - 1
    }

    /// Total trainable scalars.
    pub fn count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Allocates and initializes every array from `seed`.
    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fill = |spec: &ParamSpec, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("valid std");
                    (0..n).map(|_| T::of(d.sample(rng))).collect()
                }
            };
            Tensor::new(spec.shape.clone(), data)
        };
        let params = self.params.iter().map(|s| fill(s, &mut rng)).collect();
        let buffers = self.buffers.iter().map(|s| fill(s, &mut rng)).collect();
        ParamStore {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            params,
            buffer_names: self.buffers.iter().map(|p| p.name.clone()).collect(),
            buffers,
        }
    }
}

/// Values of a model's trainable arrays plus running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub buffer_names: Vec<String>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on the graph. Frozen parameters get no gradient.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.variable(p.clone())
                } else {
                    g.input(p.clone())
                }
            })
            .collect()
    }

    /// Gradients of the bound parameters after `g.backward`.
    pub fn grads(&self, g: &Graph<T>, bound: &[NodeId]) -> Vec<Tensor<T>> {
        bound.iter().map(|&id| g.grad(id)).collect()
    }

    /// Order-sensitive FNV-1a hash of the parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in &p.data {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    /// Clamps every parameter into `[-bound, bound]`.
    pub fn clip(&mut self, bound: f64) {
        let (lo, hi) = (T::of(-bound), T::of(bound));
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let mut l = ParamLayout::default();
        l.add_param("w", vec![3, 4], Init::Normal(INIT_STD));
        l.add_param("b", vec![4], Init::Zeros);
        l.add_buffer("rv", vec![4], Init::Ones);
        let a = l.init::<f32>(5);
        let b = l.init::<f32>(5);
        let c = l.init::<f32>(6);
        assert_eq!(a, b);
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.count(), 16);
        assert_eq!(l.count(), 16);
        assert!(a.params[1].data.iter().all(|&v| v == 0.0));
        assert!(a.buffers[0].data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn clip_bounds_values() {
        let mut l = ParamLayout::default();
        l.add_param("w", vec![100], Init::Normal(1.0));
        let mut s = l.init::<f64>(1);
        s.clip(0.01);
        assert!(s.params[0].data.iter().all(|v| v.abs() <= 0.01));
    }
}
