use serde::{Deserialize, Serialize};

use super::{check_cotangent, check_input, DifferentiableMap};
use crate::error::{check_dim, Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidConfig(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// `sum_i (w_i * w_{i+1} + w_{i+1})`
    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.layer_widths)
    }
}

fn parameter_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Fully connected network with hidden activations and a linear output layer.
///
/// Parameters are one flat buffer in layer order: the row-major
/// `(out x in)` weight matrix of each layer followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Per-layer values kept from a forward pass for backpropagation.
struct Tape {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation values of each layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights from the spec's seed, zero biases.
    pub fn new(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::seeded(spec.seed);
        let mut params = Vec::with_capacity(spec.parameter_count());
        for w in spec.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng::uniform_range(&mut rng, -bound, bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            widths: spec.layer_widths.clone(),
            activation: spec.activation,
            params,
        })
    }

    pub fn from_parameters(
        layer_widths: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let spec = MlpSpec::new(layer_widths, activation, 0);
        spec.validate()?;
        check_dim("mlp parameters", spec.parameter_count(), params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("mlp parameters"));
        }
        Ok(Self {
            widths: spec.layer_widths,
            activation,
            params,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, &[f64], &[f64])> + '_ {
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            offset += n_in * n_out;
            let bias = &self.params[offset..offset + n_out];
            offset += n_out;
            (n_in, n_out, weights, bias)
        })
    }

    fn run(&self, x: &[f64]) -> (Vec<f64>, Tape) {
        let n_layers = self.widths.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers),
        };
        let mut h = x.to_vec();
        for (li, (n_in, n_out, weights, bias)) in self.layers().enumerate() {
            let mut z = bias.to_vec();
            for (zo, row) in z.iter_mut().zip(weights.chunks_exact(n_in)) {
                *zo += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            debug_assert_eq!(z.len(), n_out);
            let out = if li + 1 < n_layers {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            tape.inputs.push(std::mem::replace(&mut h, out));
            tape.pre.push(z);
        }
        (h, tape)
    }

    /// Backpropagates `w` through the recorded pass. Parameter gradients are
    /// added into `param_grad` when given; returns the input gradient.
    fn backprop(&self, tape: &Tape, w: &[f64], mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let n_layers = self.widths.len() - 1;
        let layers: Vec<_> = self.layers().collect();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for &(n_in, n_out, _, _) in &layers {
            offsets.push(off);
            off += n_in * n_out + n_out;
        }

        let mut delta = w.to_vec();
        for li in (0..n_layers).rev() {
            let (n_in, n_out, weights, _) = layers[li];
            if li + 1 < n_layers {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[li]) {
                    *d *= self.activation.derivative(z);
                }
            }
            if let Some(grad) = param_grad.as_deref_mut() {
                let input = &tape.inputs[li];
                let base = offsets[li];
                let (gw, gb) = grad[base..base + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for (o, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        for (g, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                            *g += d * xi;
                        }
                    }
                    gb[o] += d;
                }
            }
            let mut next = vec![0.0; n_in];
            for (row, &d) in weights.chunks_exact(n_in).zip(&delta) {
                for (nx, &wij) in next.iter_mut().zip(row) {
                    *nx += wij * d;
                }
            }
            debug_assert_eq!(delta.len(), n_out);
            delta = next;
        }
        delta
    }

    /// Forward pass plus backprop of `w`, accumulating parameter gradients.
    /// Returns `(output, input_gradient)`.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        param_grad: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_cotangent(self, x, w)?;
        check_dim("mlp gradient buffer", self.params.len(), param_grad.len())?;
        let (y, tape) = self.run(x);
        let gx = self.backprop(&tape, w, Some(param_grad));
        Ok((y, gx))
    }

    /// Forward pass followed by a caller-computed cotangent: `loss_grad`
    /// receives the output and returns `dL/dy`. Returns `(output, input_gradient)`.
    pub fn forward_backward<F>(
        &self,
        x: &[f64],
        param_grad: &mut [f64],
        loss_grad: F,
    ) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        check_input(self, x)?;
        check_dim("mlp gradient buffer", self.params.len(), param_grad.len())?;
        let (y, tape) = self.run(x);
        let w = loss_grad(&y);
        check_dim("vjp cotangent", self.output_dim(), w.len())?;
        let gx = self.backprop(&tape, &w, Some(param_grad));
        Ok((y, gx))
    }
}

impl DifferentiableMap for Mlp {
    fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_input(self, x)?;
        let (y, _) = self.run(x);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp output"));
        }
        Ok(y)
    }

    fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        check_cotangent(self, x, w)?;
        let (_, tape) = self.run(x);
        Ok(self.backprop(&tape, w, None))
    }
}
