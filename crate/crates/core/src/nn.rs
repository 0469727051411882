//! Small fully connected networks with hand-written backpropagation.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer `y = W x + b`, `W` stored row-major (`out × in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

/// Multi-layer perceptron with all parameters in one flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Forward intermediates for [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct MlpTrace {
    /// Layer inputs, one per layer, followed by the network output.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty network")
    }
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use ReLU, the last is linear.
    /// Weights are Gaussian with std `1/√fan_in`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Parameter("network sizes need at least two positive entries".into()));
        }
        let mut layers = Vec::new();
        let mut params = Vec::new();
        for (k, w) in sizes.windows(2).enumerate() {
            let activation = if k + 2 == sizes.len() { Activation::Identity } else { Activation::Relu };
            let normal = Normal::new(0.0, 1.0 / (w[0] as f64).sqrt()).expect("positive std");
            params.extend((0..w[0] * w[1]).map(|_| normal.sample(rng)));
            params.extend(core::iter::repeat_n(0.0, w[1]));
            layers.push(Layer { inputs: w[0], outputs: w[1], activation });
        }
        Ok(Self { layers, params })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension { what: "network parameters", expected: self.params.len(), found: params.len() });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn forward_trace(&self, x: &[f64]) -> MlpTrace {
        assert_eq!(x.len(), self.input_dim(), "network input length");
        let mut acts = vec![x.to_vec()];
        let mut pre_all = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            let input = acts.last().expect("non-empty");
            let w = &self.params[off..off + layer.inputs * layer.outputs];
            let b = &self.params[off + layer.inputs * layer.outputs..off + (layer.inputs + 1) * layer.outputs];
            let pre: Vec<f64> = (0..layer.outputs)
                .map(|o| b[o] + math::dot(&w[o * layer.inputs..(o + 1) * layer.inputs], input))
                .collect();
            let out = pre.iter().map(|&z| layer.activation.apply(z)).collect();
            pre_all.push(pre);
            acts.push(out);
            off += (layer.inputs + 1) * layer.outputs;
        }
        MlpTrace { acts, pre: pre_all }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut t = self.forward_trace(x);
        t.acts.pop().expect("non-empty")
    }

    /// Accumulates `dL/dparams` given `dL/doutput` into `grad`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        let mut delta = d_out.to_vec();
        let mut off = self.params.len();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            off -= (layer.inputs + 1) * layer.outputs;
            for (d, &z) in delta.iter_mut().zip(&trace.pre[k]) {
                *d *= layer.activation.grad(z);
            }
            let input = &trace.acts[k];
            let (gw, gb) = grad[off..off + (layer.inputs + 1) * layer.outputs].split_at_mut(layer.inputs * layer.outputs);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &x) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if k > 0 {
                let w = &self.params[off..off + layer.inputs * layer.outputs];
                let mut next = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (n, &wv) in next.iter_mut().zip(&w[o * layer.inputs..(o + 1) * layer.inputs]) {
                        *n += d * wv;
                    }
                }
                delta = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        assert_eq!(net.n_params(), 4 * 6 + 6 + 6 * 3 + 3);
        assert_eq!(net.forward(&[0.0; 4]).len(), 3);
        assert!(Mlp::new(&[4], &mut rng).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[5, 7, 4, 2], &mut rng).unwrap();
        for p in net.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = [0.7, -1.3];
        let loss = |n: &Mlp| -> f64 { n.forward(&x).iter().zip(&c).map(|(a, b)| a * b).sum() };
        let mut grad = vec![0.0; net.n_params()];
        net.backward(&net.forward_trace(&x), &c, &mut grad);
        for k in 0..net.n_params() {
            let h = 1e-6;
            let mut a = net.clone();
            a.params_mut()[k] += h;
            let mut b = net.clone();
            b.params_mut()[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }
}
