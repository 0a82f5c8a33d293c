//! Small dense networks and optimizer plumbing shared by the auxiliary models.

use fcl_tensor::{kernels, Grads, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

/// Stack of affine layers with rectified hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    output: Activation,
}

/// Tape handles of an [`Mlp`], one `(weight, bias)` pair per layer.
#[derive(Debug, Clone)]
pub struct MlpVars(Vec<(Var, Var)>);

impl MlpVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.0.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Mlp {
    /// `dims` lists the input width followed by every layer's output width.
    /// Hidden layers use He-uniform init; the last layer's bound is further
    /// multiplied by `out_scale`.
    pub fn new(dims: &[usize], output: Activation, out_scale: f64, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d > 0), "bad layer widths {dims:?}");
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if l + 1 == layers {
                bound *= out_scale;
            }
            let mut w = Tensor::zeros(&[fan_out, fan_in]);
            if bound > 0.0 {
                for v in w.data_mut() {
                    *v = rng.random_range(-bound..=bound);
                }
            }
            weights.push(w);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Mlp { weights, biases, output }
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.biases.last().expect("at least one layer").len()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Replaces every parameter, in [`Mlp::tensors`] order.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != 2 * self.layer_count() {
            return Err(Error::contract("perceptron tensor count mismatch"));
        }
        for (slot, t) in self.tensors_mut().into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::contract(format!("perceptron tensor {:?} replaced by {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Zeroes the output layer so the network emits a constant activation of zero input.
    pub fn zero_output_layer(&mut self) {
        let last = self.layer_count() - 1;
        self.weights[last].data_mut().fill(0.0);
        self.biases[last].data_mut().fill(0.0);
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<MlpVars> {
        let mut pairs = Vec::with_capacity(self.layer_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            pairs.push((tape.leaf(w.clone(), trainable)?, tape.leaf(b.clone(), trainable)?));
        }
        Ok(MlpVars(pairs))
    }

    pub fn record(&self, tape: &mut Tape, vars: &MlpVars, input: Var) -> Result<Var> {
        let mut h = input;
        let last = vars.0.len() - 1;
        for (l, &(w, b)) in vars.0.iter().enumerate() {
            h = tape.affine(h, w, b)?;
            let act = if l == last { self.output } else { Activation::Relu };
            h = match act {
                Activation::Identity => h,
                Activation::Relu => tape.relu(h)?,
                Activation::Tanh => tape.tanh(h)?,
            };
        }
        Ok(h)
    }

    /// Tape-free evaluation.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let last = self.layer_count() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = kernels::affine(&h, w.data(), b.data());
            let act = if l == last { self.output } else { Activation::Relu };
            match act {
                Activation::Identity => {}
                Activation::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Tanh => h.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
        h
    }
}

/// In-place `param -= lr * grad` for every `(param, var)` pair that received a gradient.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, vars: impl IntoIterator<Item = Var>, grads: &Grads, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (p, v) in params.into_iter().zip(vars) {
        if let Some(g) = grads.get(v) {
            for (a, b) in p.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * b;
            }
        }
    }
}

/// Euclidean norm over every gradient the listed variables received.
pub fn grad_norm(vars: impl IntoIterator<Item = Var>, grads: &Grads) -> f64 {
    vars.into_iter().filter_map(|v| grads.get(v)).flat_map(|g| g.data().iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Stable hash of parameter bytes, used to prove that values did not change.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for &d in t.shape() {
            h = (h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in t.data() {
            for byte in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(byte)).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_direct_evaluation_agree() {
        let mlp = Mlp::new(&[5, 7, 3], Activation::Tanh, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let x = vec![0.3, -0.1, 0.8, 0.0, -0.5];
        let mut tape = Tape::new();
        let vars = mlp.register(&mut tape, true).unwrap();
        let xv = tape.constant(Tensor::vector(x.clone())).unwrap();
        let y = mlp.record(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(y).data(), mlp.eval(&x).as_slice());
        assert!(mlp.eval(&x).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zeroed_output_layer_emits_zero() {
        let mut mlp = Mlp::new(&[4, 6, 2], Activation::Tanh, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        mlp.zero_output_layer();
        assert_eq!(mlp.eval(&[1.0, 2.0, 3.0, 4.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn fingerprint_detects_single_bit() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[1] = f64::from_bits(2.0f64.to_bits() + 1);
        assert_eq!(fingerprint([&a]), fingerprint([&a.clone()]));
        assert_ne!(fingerprint([&a]), fingerprint([&b]));
    }
}
