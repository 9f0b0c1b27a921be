use rand::Rng;
use sha2::{Digest, Sha256};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Multilayer perceptron: ReLU on hidden layers, identity on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape handles for one binding of a parameter set.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    vars: Vec<Var>,
}

impl ParamGrads {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive dims")
}

/// `x·W + b` with the same kernels on and off the tape, so both paths give
/// bit-identical activations.
fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = super::matmul(x, w)?;
    let m = out.cols();
    for row in out.data_mut().chunks_mut(m) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(out)
}

fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

impl MlpBackbone {
    /// He-uniform weights, zero biases.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Model(format!(
                "backbone needs at least input and output widths, got {widths:?}"
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let bound = (6.0 / pair[0] as f64).sqrt();
            weights.push(uniform(rng, vec![pair[0], pair[1]], bound));
            biases.push(Tensor::zeros(vec![pair[1]]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    /// Rebuilds a backbone from stored parameters, checking shapes chain.
    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Model("weights and biases must pair up".into()));
        }
        let mut widths = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            let (fan_in, fan_out) = w.require_matrix("backbone weight")?;
            if fan_in != *widths.last().unwrap() || b.len() != fan_out {
                return Err(Error::Model(format!(
                    "layer shapes do not chain: {:?} after width {}",
                    w.shape(),
                    widths.last().unwrap()
                )));
            }
            widths.push(fan_out);
        }
        Ok(Self {
            widths,
            weights,
            biases,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn last_tap(&self) -> usize {
        self.num_layers() - 1
    }

    /// Width of the activation produced by layer `tap`.
    pub fn tap_width(&self, tap: usize) -> Result<usize> {
        self.check_tap(tap)?;
        Ok(self.widths[tap + 1])
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn check_tap(&self, tap: usize) -> Result<()> {
        if tap >= self.num_layers() {
            return Err(Error::Model(format!(
                "layer tap {tap} out of range for {} layers",
                self.num_layers()
            )));
        }
        Ok(())
    }

    /// Untracked forward pass returning the activation of layer `tap`.
    pub fn forward_tap(&self, x: &Tensor, tap: usize) -> Result<Tensor> {
        self.check_tap(tap)?;
        let mut h = x.detach();
        for layer in 0..=tap {
            h = affine(&h, &self.weights[layer], &self.biases[layer])?;
            if layer + 1 < self.num_layers() {
                relu_in_place(&mut h);
            }
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_tap(x, self.last_tap())
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamGrads {
        let vars = self
            .weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        ParamGrads { vars }
    }

    /// Taped forward pass. Returns the activation of every layer up to and
    /// including the last.
    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &ParamGrads, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.num_layers());
        for layer in 0..self.num_layers() {
            let z = tape.matmul(h, bound.vars[2 * layer])?;
            h = tape.add_bias(z, bound.vars[2 * layer + 1])?;
            if layer + 1 < self.num_layers() {
                h = tape.relu(h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Copies gradients from a backward pass into each parameter's `grad`.
    pub fn absorb(&mut self, bound: &ParamGrads, grads: &Gradients) -> Result<()> {
        for (t, v) in self.params_mut().into_iter().zip(&bound.vars) {
            grads.write_into(*v, t)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.{i}.weight"), w));
            out.push((format!("{prefix}.{i}.bias"), b));
        }
        out
    }
}

/// Single affine projection from backbone features to task outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    weight: Tensor,
    bias: Tensor,
}

impl Head {
    pub fn new(in_width: usize, out_width: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_width == 0 || out_width == 0 {
            return Err(Error::Model("head widths must be positive".into()));
        }
        let bound = 1.0 / (in_width as f64).sqrt();
        Ok(Self {
            weight: uniform(rng, vec![in_width, out_width], bound),
            bias: uniform(rng, vec![out_width], bound),
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (_, out) = weight.require_matrix("head weight")?;
        if bias.len() != out {
            return Err(Error::Model("head bias width mismatch".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        affine(features, &self.weight, &self.bias)
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamGrads {
        ParamGrads {
            vars: vec![
                tape.leaf(&self.weight.clone().with_requires_grad(true)),
                tape.leaf(&self.bias.clone().with_requires_grad(true)),
            ],
        }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &ParamGrads, x: Var) -> Result<Var> {
        let z = tape.matmul(x, bound.vars[0])?;
        tape.add_bias(z, bound.vars[1])
    }

    pub fn absorb(&mut self, bound: &ParamGrads, grads: &Gradients) -> Result<()> {
        grads.write_into(bound.vars[0], &mut self.weight)?;
        grads.write_into(bound.vars[1], &mut self.bias)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }
}

/// SHA-256 over parameter names, shapes and value bits, as lowercase hex.
pub(crate) fn hash_params<'a>(params: impl IntoIterator<Item = (String, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
