use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::rng;

use super::params::{ParamSet, ParamTensor, PARAM_FORMAT_VERSION};
use super::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Layer widths plus activations. `layer_widths[0]` is the input width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Self {
        MlpSpec {
            layer_widths,
            activation,
            output_activation: OutputActivation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(NnError::InvalidSpec(format!(
                "need at least 2 widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(NnError::InvalidSpec(format!(
                "widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().expect("non-empty widths")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// An MLP: spec plus a parameter snapshot (`w0, b0, w1, b1, ...`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub seed: u64,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format_version: u32,
    spec: MlpSpec,
    seed: u64,
    params: ParamSet,
}

impl Mlp {
    /// Scaled uniform fan-in initialization: weights from
    /// `U(-sqrt(1/fan_in), sqrt(1/fan_in))`, biases zero. Deterministic per
    /// seed and name.
    pub fn init(spec: MlpSpec, seed: u64, name: &str) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, &format!("init/{name}"), 0);
        let mut tensors = Vec::with_capacity(spec.n_layers() * 2);
        for l in 0..spec.n_layers() {
            let fan_in = spec.layer_widths[l];
            let fan_out = spec.layer_widths[l + 1];
            let bound = (1.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| r.random_range(-bound..bound))
                .collect();
            tensors.push(ParamTensor::new(format!("w{l}"), vec![fan_in, fan_out], w));
            tensors.push(ParamTensor::new(format!("b{l}"), vec![fan_out], vec![0.0; fan_out]));
        }
        Ok(Mlp {
            spec,
            seed,
            params: ParamSet::new(tensors),
        })
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let bound: Vec<(Tensor, NodeId)> = self
            .params
            .tensors
            .iter()
            .map(|p| {
                let t = tape.leaf(
                    &Tensor::new(p.shape.clone(), p.values.clone()).expect("param shapes valid"),
                );
                let id = t.node().expect("leaf has node");
                (t, id)
            })
            .collect();
        BoundMlp {
            spec: self.spec.clone(),
            bound,
        }
    }

    /// Tape-free forward pass for inference. `input` is `[batch, in]` flat.
    pub fn forward_nograd(&self, input: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), batch * self.spec.input_width());
        self.forward_nograd_with_feature(input, batch).0
    }

    /// Like [`Mlp::forward_nograd`] but also returns the activation of the
    /// last hidden layer (the penultimate feature used by the probe). For a
    /// single-layer net the feature is the input itself.
    pub fn forward_nograd_with_feature(&self, input: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>) {
        let spec = &self.spec;
        let mut x = input.to_vec();
        let mut width = spec.input_width();
        let mut feature = input.to_vec();
        for l in 0..spec.n_layers() {
            let w = &self.params.tensors[2 * l];
            let b = &self.params.tensors[2 * l + 1];
            let out_w = w.shape[1];
            let mut y = vec![0.0; batch * out_w];
            for i in 0..batch {
                for p in 0..width {
                    let xv = x[i * width + p];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w.values[p * out_w..(p + 1) * out_w];
                    let yrow = &mut y[i * out_w..(i + 1) * out_w];
                    for j in 0..out_w {
                        yrow[j] += xv * wrow[j];
                    }
                }
                for j in 0..out_w {
                    y[i * out_w + j] += b.values[j];
                }
            }
            let last = l + 1 == spec.n_layers();
            apply_activation(&mut y, spec, last);
            if !last {
                feature = y.clone();
            }
            x = y;
            width = out_w;
        }
        (x, feature)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ParamFile {
            format_version: PARAM_FORMAT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&file).map_err(|e| NnError::Parse(e.to_string()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let file: ParamFile =
            serde_json::from_slice(&bytes).map_err(|e| NnError::Parse(e.to_string()))?;
        if file.format_version != PARAM_FORMAT_VERSION {
            return Err(NnError::VersionMismatch {
                got: file.format_version,
                expected: PARAM_FORMAT_VERSION,
            });
        }
        let mlp = Mlp {
            spec: file.spec,
            seed: file.seed,
            params: file.params,
        };
        mlp.check_shapes()?;
        Ok(mlp)
    }

    /// Verify parameter shapes against the spec, naming the offending layer.
    pub fn check_shapes(&self) -> Result<()> {
        self.spec.validate()?;
        for l in 0..self.spec.n_layers() {
            let expect_w = vec![self.spec.layer_widths[l], self.spec.layer_widths[l + 1]];
            let expect_b = vec![self.spec.layer_widths[l + 1]];
            let w = self
                .params
                .tensors
                .get(2 * l)
                .ok_or_else(|| NnError::Parse(format!("missing tensor w{l}")))?;
            if w.shape != expect_w {
                return Err(NnError::ParamShapeMismatch {
                    name: format!("w{l}"),
                    got: w.shape.clone(),
                    expected: expect_w,
                });
            }
            let b = self
                .params
                .tensors
                .get(2 * l + 1)
                .ok_or_else(|| NnError::Parse(format!("missing tensor b{l}")))?;
            if b.shape != expect_b {
                return Err(NnError::ParamShapeMismatch {
                    name: format!("b{l}"),
                    got: b.shape.clone(),
                    expected: expect_b,
                });
            }
        }
        Ok(())
    }
}

/// Tape-bound view of an MLP: the parameters as leaves on one tape.
pub struct BoundMlp {
    spec: MlpSpec,
    bound: Vec<(Tensor, NodeId)>,
}

/// Output of a bound forward pass.
pub struct MlpForward {
    pub output: Tensor,
    /// Activation of the last hidden layer (equal to the input for a
    /// single-layer net).
    pub feature: Tensor,
}

impl BoundMlp {
    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.bound.iter().map(|(_, id)| *id).collect()
    }

    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<MlpForward> {
        let mut x = input.clone();
        let mut feature = input.clone();
        for l in 0..self.spec.n_layers() {
            let (w, _) = &self.bound[2 * l];
            let (b, _) = &self.bound[2 * l + 1];
            let wx = tape.matmul(&x, w)?;
            let mut y = tape.add(&wx, b)?;
            let last = l + 1 == self.spec.n_layers();
            y = if last {
                match self.spec.output_activation {
                    OutputActivation::Identity => y,
                    OutputActivation::Tanh => tape.tanh(&y)?,
                }
            } else {
                match self.spec.activation {
                    Activation::Relu => tape.relu(&y)?,
                    Activation::Tanh => tape.tanh(&y)?,
                }
            };
            if !last {
                feature = y.clone();
            }
            x = y;
        }
        Ok(MlpForward { output: x, feature })
    }
}

fn apply_activation(y: &mut [f64], spec: &MlpSpec, last: bool) {
    if last {
        match spec.output_activation {
            OutputActivation::Identity => {}
            OutputActivation::Tanh => {
                for v in y.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
    } else {
        match spec.activation {
            Activation::Relu => {
                for v in y.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            Activation::Tanh => {
                for v in y.iter_mut() {
                    *v = v.tanh();
                }
            }
        }
    }
}
