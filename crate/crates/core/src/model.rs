//! Small configurable convolutional classifier with named layers.
//!
//! Blocks of 3x3 conv (stride 1, pad 1) + bias + ReLU, 2x2 max-pool after
//! every block past the first, then global average pooling and a linear
//! head. No normalization layers, so the forward pass is a pure function of
//! the parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            in_channels: 3,
            num_classes: 10,
            widths: vec![32, 64, 128],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::Config("widths must be nonempty".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count: conv weights + biases per block plus the
    /// linear head.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut cin = self.in_channels;
        for &cout in &self.widths {
            total += cout * cin * 9 + cout;
            cin = cout;
        }
        total + self.num_classes * cin + self.num_classes
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
}

/// He fan-in scaled normal init for weights, zero biases.
pub fn build_model(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Model> {
    spec.validate()?;
    let mut params = Vec::new();
    let mut cin = spec.in_channels;
    for (b, &cout) in spec.widths.iter().enumerate() {
        let fan_in = cin * 9;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std finite");
        let w: Vec<f64> = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
        params.push(Param {
            name: format!("conv{}.weight", b + 1),
            value: Tensor::new(vec![cout, cin, 3, 3], w)?,
        });
        params.push(Param {
            name: format!("conv{}.bias", b + 1),
            value: Tensor::zeros(&[cout]),
        });
        cin = cout;
    }
    let std = (2.0 / cin as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std finite");
    let w: Vec<f64> = (0..spec.num_classes * cin).map(|_| normal.sample(rng)).collect();
    params.push(Param {
        name: "fc.weight".into(),
        value: Tensor::new(vec![cin, spec.num_classes], w)?,
    });
    params.push(Param {
        name: "fc.bias".into(),
        value: Tensor::zeros(&[spec.num_classes]),
    });
    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

pub fn build_model_seeded(spec: &ModelSpec, seed: u64) -> Result<Model> {
    build_model(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl Model {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Register every parameter as a leaf on the tape, in declaration order.
    /// Both branches of a pair forward must share the same leaves so their
    /// gradients accumulate.
    pub fn bind<'a>(&self, tape: &'a Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Forward pass over parameter leaves previously produced by [`bind`].
    pub fn forward(&self, tape: &Tape, pvars: &[Var], x: &Tensor) -> Result<Var> {
        if x.shape().len() != 4 || x.shape()[1] != self.spec.in_channels {
            return Err(Error::Dim(format!(
                "expected input [n x {} x h x w], got {:?}",
                self.spec.in_channels,
                x.shape()
            )));
        }
        let pools = self.spec.widths.len();
        let min_side = 1usize << pools;
        if x.shape()[2] < min_side || x.shape()[3] < min_side {
            return Err(Error::Dim(format!(
                "input {}x{} too small for {} pooling stages",
                x.shape()[2],
                x.shape()[3],
                pools
            )));
        }
        let xv = tape.leaf(x.clone());
        self.forward_var(tape, pvars, &xv)
    }

    /// Forward pass from an existing input leaf, so callers can take
    /// gradients with respect to the input (adversarial attacks).
    pub fn forward_var(&self, tape: &Tape, pvars: &[Var], x: &Var) -> Result<Var> {
        // center [0,1] pixels so the first conv sees zero-mean inputs
        let half = tape.leaf(Tensor::full(x.value.shape(), 0.5));
        let mut h = tape.scale(&tape.sub(x, &half)?, 2.0);
        for b in 0..self.spec.widths.len() {
            let w = &pvars[2 * b];
            let bias = &pvars[2 * b + 1];
            h = tape.conv2d(&h, w, 1, 1)?;
            h = tape.bias_add_chan(&h, bias)?;
            h = tape.relu(&h);
            h = tape.maxpool2(&h)?;
        }
        let pooled = tape.global_avg_pool(&h)?;
        let fc_w = &pvars[pvars.len() - 2];
        let fc_b = &pvars[pvars.len() - 1];
        let logits = tape.matmul(&pooled, fc_w)?;
        tape.bias_add_row(&logits, fc_b)
    }

    /// Inference-only logits (fresh throwaway tape).
    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let pvars = self.bind(&tape);
        Ok(self.forward(&tape, &pvars, x)?.value)
    }

    /// T=1 class probabilities.
    pub fn predict_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_logits(x)?.softmax_rows(1.0)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
