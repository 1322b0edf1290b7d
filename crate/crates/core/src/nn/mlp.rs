//! Fully connected layers and multi-layer perceptrons on a [`Tape`].

use rand::Rng;

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    KaimingUniform,
    Zero,
}

/// `y = x W + b` with `W` stored as `fan_in × fan_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
            Init::KaimingUniform => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Tensor::matrix(fan_in, fan_out, data).expect("sized buffer")
            }
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Layer widths and wiring of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Index of the linear layer whose input is `concat(h, x)`.
    pub skip_at: Option<usize>,
    pub output_activation: Activation,
    pub zero_last: bool,
}

/// Stacked linear layers with ReLU between them and an optional input skip.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    skip_at: Option<usize>,
    output_activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, rng: &mut R) -> Self {
        let mut widths = vec![spec.input];
        widths.extend(&spec.hidden);
        widths.push(spec.output);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let mut fan_in = widths[i];
                if spec.skip_at == Some(i) && i > 0 {
                    fan_in += spec.input;
                }
                let init = if spec.zero_last && i == n - 1 {
                    Init::Zero
                } else {
                    Init::KaimingUniform
                };
                Linear::new(store, &format!("{prefix}.{i}"), fan_in, widths[i + 1], init, rng)
            })
            .collect();
        Self {
            layers,
            skip_at: spec.skip_at.filter(|&s| s > 0),
            output_activation: spec.output_activation,
        }
    }

    /// Assemble from existing layers (used by tests and checkpoint loading).
    pub fn from_layers(layers: Vec<Linear>, skip_at: Option<usize>, output_activation: Activation) -> Self {
        Self {
            layers,
            skip_at,
            output_activation,
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            if self.skip_at == Some(i) {
                h = tape.concat_cols(&[h, input])?;
            }
            let width = tape.value(h).shape().get(1).copied().unwrap_or(0);
            if width != layer.fan_in {
                return Err(Error::dim(format!("mlp layer {i} input"), layer.fan_in, width));
            }
            h = layer.forward(tape, store, h)?;
            h = if i == last {
                self.output_activation.apply(tape, h)
            } else {
                Activation::Relu.apply(tape, h)
            };
        }
        Ok(h)
    }
}

/// Evaluate an MLP on a value without keeping the tape.
pub fn forward_mlp(store: &ParamStore, mlp: &Mlp, input: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = mlp.forward(&mut tape, store, x)?;
    Ok(tape.value(y).clone())
}
