//! Minimal deterministic CNN forward pass.
//!
//! A [`ModelSpec`] is a flat list of layers ending in a softmax. Running it
//! on an image yields a [`ForwardTrace`] holding every convolutional layer's
//! post-activation output (the feature maps that get tagged) plus the class
//! probabilities.

mod model_file;
pub mod ops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::LayerSchema;
use crate::tensor::{Shape3, Tensor3};

pub use model_file::{
    decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION,
};
pub use ops::{conv2d, dense, maxpool2d, relu, softmax, Activation, Padding};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// One `in_channels x kernel_h x kernel_w` tensor per output filter.
    pub filters: Vec<Tensor3>,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.filters.len()
    }

    pub fn kernel_shape(&self) -> Option<Shape3> {
        self.filters.first().map(Tensor3::shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    MaxPool { size: usize, stride: usize },
    Flatten,
    Dense(DenseLayer),
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
        }
    }
}

/// What flows between layers: a feature volume before `Flatten`, a vector after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerShape {
    Volume(Shape3),
    Vector(usize),
}

impl std::fmt::Display for LayerShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerShape::Volume(s) => write!(f, "{s}"),
            LayerShape::Vector(n) => write!(f, "[{n}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Shape3,
    pub class_names: Vec<String>,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Checks layer consistency and returns each layer's output shape.
    pub fn validate(&self) -> Result<Vec<LayerShape>> {
        let err =
            |i: usize, kind: &str, msg: String| Error::Shape(format!("layer {i} ({kind}): {msg}"));
        if !self.layers.iter().any(|l| matches!(l, Layer::Conv(_))) {
            return Err(Error::Shape("model has no convolutional layer".into()));
        }
        let softmaxes = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Softmax))
            .count();
        if softmaxes != 1 || !matches!(self.layers.last(), Some(Layer::Softmax)) {
            return Err(Error::Shape(
                "model must end in exactly one softmax layer".into(),
            ));
        }
        if self.class_names.is_empty() {
            return Err(Error::Shape("model declares no classes".into()));
        }

        let mut shape = LayerShape::Volume(self.input_shape);
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let kind = layer.kind();
            shape = match (layer, shape) {
                (Layer::Conv(conv), LayerShape::Volume(input)) => {
                    let kernel = conv
                        .kernel_shape()
                        .ok_or_else(|| err(i, kind, "no filters".into()))?;
                    if let Some(f) = conv.filters.iter().find(|f| f.shape() != kernel) {
                        return Err(err(
                            i,
                            kind,
                            format!("filter shape {} differs from {kernel}", f.shape()),
                        ));
                    }
                    if conv.bias.len() != conv.filters.len() {
                        return Err(err(
                            i,
                            kind,
                            format!(
                                "{} biases for {} filters",
                                conv.bias.len(),
                                conv.filters.len()
                            ),
                        ));
                    }
                    let out = ops::conv2d_output_shape(
                        input,
                        kernel,
                        conv.out_channels(),
                        conv.stride,
                        conv.padding,
                    )
                    .map_err(|e| err(i, kind, e.to_string()))?;
                    LayerShape::Volume(out)
                }
                (Layer::MaxPool { size, stride }, LayerShape::Volume(input)) => LayerShape::Volume(
                    ops::maxpool2d_output_shape(input, *size, *stride)
                        .map_err(|e| err(i, kind, e.to_string()))?,
                ),
                (Layer::Flatten, LayerShape::Volume(input)) => LayerShape::Vector(input.len()),
                (Layer::Dense(d), LayerShape::Vector(n)) => {
                    if d.in_dim != n {
                        return Err(err(
                            i,
                            kind,
                            format!("declared input {} but receives {n}", d.in_dim),
                        ));
                    }
                    if d.weights.len() != d.in_dim * d.out_dim || d.bias.len() != d.out_dim {
                        return Err(err(
                            i,
                            kind,
                            format!(
                                "expects {}x{} weights and {} biases, has {} and {}",
                                d.out_dim,
                                d.in_dim,
                                d.out_dim,
                                d.weights.len(),
                                d.bias.len()
                            ),
                        ));
                    }
                    if let Some(v) = d.weights.iter().chain(&d.bias).find(|v| !v.is_finite()) {
                        return Err(err(i, kind, format!("non-finite parameter {v}")));
                    }
                    LayerShape::Vector(d.out_dim)
                }
                (Layer::Softmax, LayerShape::Vector(n)) => {
                    if n != self.class_names.len() {
                        return Err(err(
                            i,
                            kind,
                            format!("{n} logits for {} classes", self.class_names.len()),
                        ));
                    }
                    LayerShape::Vector(n)
                }
                (_, other) => {
                    return Err(err(
                        i,
                        kind,
                        format!("cannot accept input of shape {other}"),
                    ))
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv(_)))
            .count()
    }

    /// Per convolutional layer, the filter count and feature-map extent.
    pub fn conv_schema(&self) -> Result<Vec<LayerSchema>> {
        let shapes = self.validate()?;
        let mut out = Vec::new();
        for (layer, shape) in self.layers.iter().zip(shapes) {
            if let (Layer::Conv(_), LayerShape::Volume(s)) = (layer, shape) {
                out.push(LayerSchema {
                    layer_id: out.len() as u16,
                    filter_count: s.channels,
                    height: s.height,
                    width: s.width,
                });
            }
        }
        Ok(out)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Output of each conv layer after its nonlinearity, in model order.
    pub conv_outputs: Vec<Tensor3>,
    pub probabilities: Vec<f32>,
    /// Argmax of `probabilities`; the lowest index wins ties.
    pub predicted_class: usize,
}

/// Runs `image` through `model`.
pub fn forward(model: &ModelSpec, image: &Tensor3) -> Result<ForwardTrace> {
    model.validate()?;
    if image.shape() != model.input_shape {
        return Err(Error::Shape(format!(
            "image shape {} does not match model input {}",
            image.shape(),
            model.input_shape
        )));
    }

    enum Flow {
        Volume(Tensor3),
        Vector(Vec<f32>),
    }

    let mut conv_outputs = Vec::new();
    let mut flow = Flow::Volume(image.clone());
    let mut probabilities = None;
    for layer in &model.layers {
        flow = match (layer, flow) {
            (Layer::Conv(c), Flow::Volume(t)) => {
                let out = conv2d(&t, &c.filters, &c.bias, c.stride, c.padding)?;
                let out = match c.activation {
                    Activation::Relu => relu(&out),
                    Activation::None => out,
                };
                conv_outputs.push(out.clone());
                Flow::Volume(out)
            }
            (Layer::MaxPool { size, stride }, Flow::Volume(t)) => {
                Flow::Volume(maxpool2d(&t, *size, *stride)?)
            }
            (Layer::Flatten, Flow::Volume(t)) => Flow::Vector(t.into_values()),
            (Layer::Dense(d), Flow::Vector(v)) => {
                Flow::Vector(dense(&v, &d.weights, &d.bias, d.activation)?)
            }
            (Layer::Softmax, Flow::Vector(v)) => {
                let p = softmax(&v);
                probabilities = Some(p.clone());
                Flow::Vector(p)
            }
            // validate() rules out every other pairing
            (layer, _) => {
                return Err(Error::Shape(format!(
                    "unexpected {} layer input",
                    layer.kind()
                )))
            }
        };
    }
    let probabilities = probabilities.expect("validated model ends in softmax");
    let predicted_class = argmax(&probabilities);
    Ok(ForwardTrace {
        conv_outputs,
        probabilities,
        predicted_class,
    })
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
