use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{conv_out_dim, Padding};

/// One layer of a sequential model. Shapes exclude the batch dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        units: usize,
    },
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Sigmoid,
    Dropout {
        rate: f64,
    },
    Flatten,
    Softmax,
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv { .. })
    }
}

/// Declarative sequential architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

fn spec_err(layer: usize, reason: String) -> Error {
    Error::Spec { layer, reason }
}

impl ModelSpec {
    pub fn new(name: &str, input_shape: &[usize], layers: Vec<Layer>) -> Self {
        ModelSpec {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            layers,
        }
    }

    /// Output shape of every layer, checking that consecutive layers chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(spec_err(0, format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Dense { units } => {
                    if cur.len() != 1 {
                        return Err(spec_err(
                            i,
                            format!("dense layer needs a flat input but receives {cur:?}; insert a flatten layer"),
                        ));
                    }
                    if *units == 0 {
                        return Err(spec_err(i, "dense layer with zero units".into()));
                    }
                    vec![*units]
                }
                Layer::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if cur.len() != 3 {
                        return Err(spec_err(i, format!("conv layer needs an HxWxC input but receives {cur:?}")));
                    }
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(spec_err(i, "conv layer with a zero-sized parameter".into()));
                    }
                    let ho = conv_out_dim(cur[0], *kernel, *stride, *padding);
                    let wo = conv_out_dim(cur[1], *kernel, *stride, *padding);
                    match (ho, wo) {
                        (Some((h, _)), Some((w, _))) => vec![h, w, *filters],
                        _ => return Err(spec_err(i, format!("kernel {kernel} larger than input {cur:?}"))),
                    }
                }
                Layer::MaxPool { window, stride } => {
                    if cur.len() != 3 {
                        return Err(spec_err(i, format!("max-pool needs an HxWxC input but receives {cur:?}")));
                    }
                    if *window == 0 || *stride == 0 || *window > cur[0] || *window > cur[1] {
                        return Err(spec_err(i, format!("pool window {window} does not fit {cur:?}")));
                    }
                    vec![(cur[0] - window) / stride + 1, (cur[1] - window) / stride + 1, cur[2]]
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(spec_err(i, format!("dropout rate {rate} outside [0, 1)")));
                    }
                    cur
                }
                Layer::Relu | Layer::Sigmoid | Layer::Softmax => cur,
                Layer::Flatten => vec![cur.iter().product()],
                Layer::Reshape { shape } => {
                    let n: usize = shape.iter().product();
                    if shape.is_empty() || shape.contains(&0) || n != cur.iter().product::<usize>() {
                        return Err(spec_err(i, format!("cannot reshape {cur:?} into {shape:?}")));
                    }
                    shape.clone()
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    fn input_of(&self, shapes: &[Vec<usize>], layer: usize) -> Vec<usize> {
        if layer == 0 {
            self.input_shape.clone()
        } else {
            shapes[layer - 1].clone()
        }
    }

    /// `(weight shape, bias shape)` for each parameterised layer.
    pub fn param_shapes(&self) -> Result<Vec<Option<(Vec<usize>, Vec<usize>)>>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let inp = self.input_of(&shapes, i);
                match layer {
                    Layer::Dense { units } => Some((vec![inp[0], *units], vec![*units])),
                    Layer::Conv { filters, kernel, .. } => {
                        Some((vec![*kernel, *kernel, inp[2], *filters], vec![*filters]))
                    }
                    _ => None,
                }
            })
            .collect())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .flatten()
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum())
    }

    /// Checks classifier structure (final layer is the only softmax, flat
    /// output with at least two classes) and returns the class count.
    pub fn validate_classifier(&self) -> Result<usize> {
        let shapes = self.shapes()?;
        let last = self.layers.len().checked_sub(1).ok_or_else(|| spec_err(0, "empty classifier".into()))?;
        if self.layers[last] != Layer::Softmax {
            return Err(spec_err(last, "classifier must end with a softmax layer".into()));
        }
        if let Some(i) = self.layers[..last].iter().position(|l| *l == Layer::Softmax) {
            return Err(spec_err(i, "softmax is only allowed as the final classifier layer".into()));
        }
        let out = &shapes[last];
        if out.len() != 1 || out[0] < 2 {
            return Err(spec_err(last, format!("classifier output {out:?} is not a flat vector of >= 2 classes")));
        }
        Ok(out[0])
    }

    /// Classifier used for MNIST: two 2x2 conv blocks (64 and 32 filters) with
    /// max-pooling and dropout, a 256-unit dense layer and a 10-way softmax.
    pub fn mnist_classifier() -> Self {
        use Layer::*;
        let conv = |filters| Conv {
            filters,
            kernel: 2,
            stride: 1,
            padding: Padding::Same,
        };
        ModelSpec::new(
            "mnist-cnn",
            &[28, 28, 1],
            vec![
                conv(64),
                Relu,
                MaxPool { window: 2, stride: 2 },
                Dropout { rate: 0.3 },
                conv(32),
                Relu,
                MaxPool { window: 2, stride: 2 },
                Dropout { rate: 0.3 },
                Flatten,
                Dense { units: 256 },
                Relu,
                Dropout { rate: 0.5 },
                Dense { units: 10 },
                Softmax,
            ],
        )
    }

    /// Fully connected classifier with ReLU hidden layers.
    pub fn mlp_classifier(name: &str, input_shape: &[usize], hidden: &[usize], classes: usize) -> Self {
        let mut layers = vec![Layer::Flatten];
        for &h in hidden {
            layers.push(Layer::Dense { units: h });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Dense { units: classes });
        layers.push(Layer::Softmax);
        ModelSpec::new(name, input_shape, layers)
    }

    /// Dense autoencoder: `flatten -> hidden(relu) -> latent -> hidden(relu) ->
    /// output -> reshape`. With `sigmoid_output` the output layer is squashed
    /// into (0, 1); otherwise it is linear (and clamped on reconstruction).
    pub fn dense_autoencoder(name: &str, input_shape: &[usize], hidden: usize, latent: usize, sigmoid_output: bool) -> Self {
        let n: usize = input_shape.iter().product();
        let mut layers = vec![
            Layer::Flatten,
            Layer::Dense { units: hidden },
            Layer::Relu,
            Layer::Dense { units: latent },
            Layer::Dense { units: hidden },
            Layer::Relu,
            Layer::Dense { units: n },
        ];
        if sigmoid_output {
            layers.push(Layer::Sigmoid);
        }
        layers.push(Layer::Reshape {
            shape: input_shape.to_vec(),
        });
        ModelSpec::new(name, input_shape, layers)
    }

    /// Convolutional encoder with a dense decoder: one `conv 3x3 (same) ->
    /// relu -> max-pool 2x2` block per entry of `filters`, then `flatten ->
    /// latent -> hidden(relu) -> output -> reshape`.
    pub fn conv_autoencoder(
        name: &str,
        input_shape: &[usize],
        filters: &[usize],
        latent: usize,
        hidden: usize,
        sigmoid_output: bool,
    ) -> Self {
        let n: usize = input_shape.iter().product();
        let mut layers = Vec::new();
        for &f in filters {
            layers.push(Layer::Conv {
                filters: f,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { window: 2, stride: 2 });
        }
        layers.extend([
            Layer::Flatten,
            Layer::Dense { units: latent },
            Layer::Dense { units: hidden },
            Layer::Relu,
            Layer::Dense { units: n },
        ]);
        if sigmoid_output {
            layers.push(Layer::Sigmoid);
        }
        layers.push(Layer::Reshape {
            shape: input_shape.to_vec(),
        });
        ModelSpec::new(name, input_shape, layers)
    }

    /// The dense CIFAR-10 autoencoder variant: 512-unit hidden layers around a
    /// 40-dimensional latent space with a linear output.
    pub fn cifar_dense_autoencoder() -> Self {
        Self::dense_autoencoder("cifar-dense-ae", &[32, 32, 3], 512, 40, false)
    }
}
