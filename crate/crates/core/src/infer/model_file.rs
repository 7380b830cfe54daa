//! Model file: a JSON manifest followed by one blob of tensor blocks.
//!
//! ```text
//! magic b"FTM\0" | u8 version | u32 LE manifest length | manifest JSON | blob
//! ```
//!
//! The manifest records the architecture, class names, every layer's input
//! and output shape, and for each parameter tensor its byte offset into the
//! blob plus its declared value count. Blocks appear in declaration order:
//! for a conv layer one block per filter followed by a `1x1xN` bias block,
//! for a dense layer a `1 x out x in` weight block followed by its bias.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Activation, ConvLayer, DenseLayer, Layer, LayerShape, ModelSpec, Padding};
use crate::error::{Error, Result};
use crate::tensor::{decode_tensor, encode_tensor_into, Shape3, Tensor3};

pub const MODEL_MAGIC: [u8; 4] = *b"FTM\0";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    input: Shape3,
    class_names: Vec<String>,
    blob_len: usize,
    layers: Vec<Value>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct BlobRef {
    offset: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConvEntry {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: Padding,
    activation: Activation,
    input_shape: LayerShape,
    output_shape: LayerShape,
    /// One reference per filter.
    weights: Vec<BlobRef>,
    bias: BlobRef,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolEntry {
    size: usize,
    stride: usize,
    input_shape: LayerShape,
    output_shape: LayerShape,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeOnlyEntry {
    input_shape: LayerShape,
    output_shape: LayerShape,
}

#[derive(Debug, Serialize, Deserialize)]
struct DenseEntry {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    input_shape: LayerShape,
    output_shape: LayerShape,
    weights: BlobRef,
    bias: BlobRef,
}

const KNOWN_KINDS: [&str; 5] = ["conv", "max_pool", "flatten", "dense", "softmax"];

fn tagged(kind: &str, body: impl Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    v.as_object_mut()
        .expect("layer entries serialize as objects")
        .insert("kind".into(), Value::String(kind.into()));
    Ok(v)
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor3) -> Result<BlobRef> {
        let offset = self.bytes.len();
        encode_tensor_into(&mut self.bytes, t)?;
        Ok(BlobRef {
            offset,
            count: t.shape().len(),
        })
    }

    fn push_vec(&mut self, v: &[f32], shape: Shape3) -> Result<BlobRef> {
        self.push(&Tensor3::new(shape, v.to_vec())?)
    }
}

/// Serializes a validated model into the container format.
pub fn encode_model(model: &ModelSpec) -> Result<Vec<u8>> {
    let shapes = model.validate()?;
    let mut blob = BlobWriter { bytes: Vec::new() };
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut input_shape = LayerShape::Volume(model.input_shape);
    for (layer, &output_shape) in model.layers.iter().zip(&shapes) {
        let entry = match layer {
            Layer::Conv(c) => {
                let k = c.kernel_shape().expect("validated conv has filters");
                let weights = c
                    .filters
                    .iter()
                    .map(|f| blob.push(f))
                    .collect::<Result<Vec<_>>>()?;
                let bias = blob.push_vec(&c.bias, Shape3::new(1, 1, c.bias.len()))?;
                tagged(
                    "conv",
                    ConvEntry {
                        out_channels: c.out_channels(),
                        in_channels: k.channels,
                        kernel_h: k.height,
                        kernel_w: k.width,
                        stride: c.stride,
                        padding: c.padding,
                        activation: c.activation,
                        input_shape,
                        output_shape,
                        weights,
                        bias,
                    },
                )?
            }
            Layer::MaxPool { size, stride } => tagged(
                "max_pool",
                PoolEntry {
                    size: *size,
                    stride: *stride,
                    input_shape,
                    output_shape,
                },
            )?,
            Layer::Flatten => tagged(
                "flatten",
                ShapeOnlyEntry {
                    input_shape,
                    output_shape,
                },
            )?,
            Layer::Softmax => tagged(
                "softmax",
                ShapeOnlyEntry {
                    input_shape,
                    output_shape,
                },
            )?,
            Layer::Dense(d) => {
                let weights = blob.push_vec(&d.weights, Shape3::new(1, d.out_dim, d.in_dim))?;
                let bias = blob.push_vec(&d.bias, Shape3::new(1, 1, d.out_dim))?;
                tagged(
                    "dense",
                    DenseEntry {
                        in_dim: d.in_dim,
                        out_dim: d.out_dim,
                        activation: d.activation,
                        input_shape,
                        output_shape,
                        weights,
                        bias,
                    },
                )?
            }
        };
        layers.push(entry);
        input_shape = output_shape;
    }

    let manifest = Manifest {
        format_version: u32::from(MODEL_VERSION),
        name: model.name.clone(),
        input: model.input_shape,
        class_names: model.class_names.clone(),
        blob_len: blob.bytes.len(),
        layers,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(9 + json.len() + blob.bytes.len());
    out.extend_from_slice(&MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob.bytes);
    Ok(out)
}

fn read_block(blob: &[u8], r: BlobRef, ctx: &str) -> Result<Tensor3> {
    let bytes = blob
        .get(r.offset..)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| {
            Error::parse(
                ctx,
                format!("offset {} is past the end of the weight blob", r.offset),
            )
        })?;
    let (t, _) = decode_tensor(bytes, ctx)?;
    if t.shape().len() != r.count {
        return Err(Error::parse(
            ctx,
            format!(
                "declares {} weights but its block holds {}",
                r.count,
                t.shape().len()
            ),
        ));
    }
    Ok(t)
}

fn entry<T: for<'de> Deserialize<'de>>(v: Value, ctx: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::parse(ctx, e.to_string()))
}

fn check_shapes(
    ctx: &str,
    declared: (LayerShape, LayerShape),
    actual: (LayerShape, LayerShape),
) -> Result<()> {
    if declared != actual {
        return Err(Error::parse(
            ctx,
            format!(
                "declared shapes {} -> {} but architecture gives {} -> {}",
                declared.0, declared.1, actual.0, actual.1
            ),
        ));
    }
    Ok(())
}

/// Parses the container format produced by [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<ModelSpec> {
    const CTX: &str = "model header";
    if bytes.len() < 9 {
        return Err(Error::parse(CTX, "file too short"));
    }
    if bytes[..4] != MODEL_MAGIC {
        return Err(Error::parse(CTX, format!("bad magic {:02x?}", &bytes[..4])));
    }
    if bytes[4] != MODEL_VERSION {
        return Err(Error::parse(
            CTX,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let json_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let json = bytes
        .get(9..9 + json_len)
        .ok_or_else(|| Error::parse(CTX, "manifest truncated"))?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::parse("model manifest", e.to_string()))?;
    if manifest.format_version != u32::from(MODEL_VERSION) {
        return Err(Error::parse(
            "model manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let blob = &bytes[9 + json_len..];
    if blob.len() != manifest.blob_len {
        return Err(Error::parse(
            "weight blob",
            format!(
                "manifest declares {} bytes, file holds {}",
                manifest.blob_len,
                blob.len()
            ),
        ));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut declared = Vec::with_capacity(manifest.layers.len());
    for (i, raw) in manifest.layers.into_iter().enumerate() {
        let kind = raw
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse(format!("layer {i}"), "missing layer kind"))?
            .to_owned();
        let ctx = format!("layer {i} ({kind})");
        let (layer, shapes) = match kind.as_str() {
            "conv" => {
                let e: ConvEntry = entry(raw, &ctx)?;
                if e.weights.len() != e.out_channels {
                    return Err(Error::parse(
                        &ctx,
                        format!(
                            "{} weight blocks for {} output channels",
                            e.weights.len(),
                            e.out_channels
                        ),
                    ));
                }
                let kernel = Shape3::new(e.in_channels, e.kernel_h, e.kernel_w);
                let mut filters = Vec::with_capacity(e.out_channels);
                for (f, r) in e.weights.iter().enumerate() {
                    let t = read_block(blob, *r, &format!("{ctx} filter {f}"))?;
                    if t.shape() != kernel {
                        return Err(Error::parse(
                            &ctx,
                            format!("filter {f} has shape {}, declared {kernel}", t.shape()),
                        ));
                    }
                    filters.push(t);
                }
                let bias = read_block(blob, e.bias, &format!("{ctx} bias"))?.into_values();
                (
                    Layer::Conv(ConvLayer {
                        filters,
                        bias,
                        stride: e.stride,
                        padding: e.padding,
                        activation: e.activation,
                    }),
                    (e.input_shape, e.output_shape),
                )
            }
            "max_pool" => {
                let e: PoolEntry = entry(raw, &ctx)?;
                (
                    Layer::MaxPool {
                        size: e.size,
                        stride: e.stride,
                    },
                    (e.input_shape, e.output_shape),
                )
            }
            "flatten" => {
                let e: ShapeOnlyEntry = entry(raw, &ctx)?;
                (Layer::Flatten, (e.input_shape, e.output_shape))
            }
            "softmax" => {
                let e: ShapeOnlyEntry = entry(raw, &ctx)?;
                (Layer::Softmax, (e.input_shape, e.output_shape))
            }
            "dense" => {
                let e: DenseEntry = entry(raw, &ctx)?;
                let w = read_block(blob, e.weights, &format!("{ctx} weights"))?;
                if w.shape() != Shape3::new(1, e.out_dim, e.in_dim) {
                    return Err(Error::parse(
                        &ctx,
                        format!(
                            "weight block {} does not match {}x{}",
                            w.shape(),
                            e.out_dim,
                            e.in_dim
                        ),
                    ));
                }
                let bias = read_block(blob, e.bias, &format!("{ctx} bias"))?.into_values();
                (
                    Layer::Dense(DenseLayer {
                        in_dim: e.in_dim,
                        out_dim: e.out_dim,
                        weights: w.into_values(),
                        bias,
                        activation: e.activation,
                    }),
                    (e.input_shape, e.output_shape),
                )
            }
            other => {
                return Err(Error::parse(
                    format!("layer {i}"),
                    format!(
                        "unknown layer kind `{other}` (expected one of {})",
                        KNOWN_KINDS.join(", ")
                    ),
                ))
            }
        };
        layers.push(layer);
        declared.push(shapes);
    }

    let model = ModelSpec {
        name: manifest.name,
        input_shape: manifest.input,
        class_names: manifest.class_names,
        layers,
    };
    let shapes = model
        .validate()
        .map_err(|e| Error::parse("model architecture", e.to_string()))?;
    let mut input = LayerShape::Volume(model.input_shape);
    for (i, (decl, out)) in declared.into_iter().zip(shapes).enumerate() {
        check_shapes(
            &format!("layer {i} ({})", model.layers[i].kind()),
            decl,
            (input, out),
        )?;
        input = out;
    }
    Ok(model)
}

pub fn save_model(model: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
