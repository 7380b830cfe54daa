//! Dense 3-D feature volumes and their binary block encoding.
//!
//! Layout is row-major with the channel as the outermost dimension, so the
//! element at `(c, y, x)` lives at `c * H * W + y * W + x`. One channel slice
//! is one feature map.
//!
//! Block format (little-endian):
//! - magic: `b"FT3\0"`
//! - version: u8 (= 1)
//! - channels, height, width: u32 each
//! - data: f32 * channels * height * width

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"FT3\0";
pub const TENSOR_VERSION: u8 = 1;
/// Bytes taken by a block header.
pub const TENSOR_HEADER_LEN: usize = 4 + 1 + 3 * 4;

/// Shape of a [`Tensor3`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Identifies filter `filter_index` of convolutional layer `layer_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterKey {
    pub layer_id: u16,
    pub filter_index: u32,
}

impl FilterKey {
    pub const fn new(layer_id: u16, filter_index: u32) -> Self {
        Self {
            layer_id,
            filter_index,
        }
    }
}

impl std::fmt::Display for FilterKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}/F{}", self.layer_id, self.filter_index)
    }
}

/// A channels x height x width volume of finite f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: Shape3,
    values: Vec<f32>,
}

impl Tensor3 {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Shape3, values: Vec<f32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {pos}",
                values[pos]
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    /// Builds a tensor by evaluating `f(c, y, x)` in layout order.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self::new(shape, values)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[self.index(c, y, x)]
    }

    /// The `c`-th feature map as a borrowed `height * width` slice.
    pub fn channel_slice(&self, c: usize) -> Result<&[f32]> {
        if c >= self.shape.channels {
            return Err(Error::Index(format!(
                "channel {c} out of range for tensor {}",
                self.shape
            )));
        }
        let plane = self.shape.plane();
        Ok(&self.values[c * plane..(c + 1) * plane])
    }

    /// Applies `f` elementwise. The result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.shape, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> Option<(f32, f32)> {
        let mut it = self.values.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Number of bytes [`write_tensor`] produces for this tensor.
    pub fn encoded_len(&self) -> usize {
        TENSOR_HEADER_LEN + 4 * self.values.len()
    }
}

/// Arithmetic mean with a 64-bit accumulator, summed left to right.
pub fn mean(values: &[f32]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("mean of an empty sequence".into()));
    }
    let mut sum = 0.0f64;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Data(format!("non-finite value {v} in mean")));
        }
        sum += f64::from(v);
    }
    Ok(sum / values.len() as f64)
}

fn dim_u32(d: usize, what: &str) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::Shape(format!("{what} {d} does not fit in u32")))
}

/// Writes one tensor block.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor3) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(t.encoded_len());
    encode_tensor_into(&mut buf, t)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    w.write_all(&buf)
}

/// Appends the block encoding of `t` to `buf`.
pub fn encode_tensor_into(buf: &mut Vec<u8>, t: &Tensor3) -> Result<()> {
    let s = t.shape();
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.push(TENSOR_VERSION);
    buf.extend_from_slice(&dim_u32(s.channels, "channels")?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(s.height, "height")?.to_le_bytes());
    buf.extend_from_slice(&dim_u32(s.width, "width")?.to_le_bytes());
    buf.reserve(4 * t.values.len());
    for v in &t.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor3) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(t.encoded_len());
    encode_tensor_into(&mut buf, t)?;
    Ok(buf)
}

fn read_exact_ctx<R: Read>(r: &mut R, buf: &mut [u8], context: &str, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::parse(context, format!("truncated tensor block ({what})"))
        } else {
            Error::parse(context, format!("reading {what}: {e}"))
        }
    })
}

/// Reads the header of a block and returns its shape.
pub fn read_tensor_header<R: Read>(r: &mut R, context: &str) -> Result<Shape3> {
    let mut head = [0u8; TENSOR_HEADER_LEN];
    read_exact_ctx(r, &mut head, context, "header")?;
    if head[..4] != TENSOR_MAGIC {
        return Err(Error::parse(
            context,
            format!("bad tensor magic {:02x?}", &head[..4]),
        ));
    }
    if head[4] != TENSOR_VERSION {
        return Err(Error::parse(
            context,
            format!("unsupported tensor version {}", head[4]),
        ));
    }
    let dim = |at: usize| u32::from_le_bytes(head[at..at + 4].try_into().unwrap()) as usize;
    Ok(Shape3::new(dim(5), dim(9), dim(13)))
}

/// Reads one tensor block. `context` is echoed in parse errors.
pub fn read_tensor<R: Read>(r: &mut R, context: &str) -> Result<Tensor3> {
    let shape = read_tensor_header(r, context)?;
    let n = shape
        .channels
        .checked_mul(shape.height)
        .and_then(|v| v.checked_mul(shape.width))
        .filter(|&n| n <= (isize::MAX as usize) / 4)
        .ok_or_else(|| Error::parse(context, format!("tensor shape {shape} is too large")))?;
    let mut bytes = vec![0u8; 4 * n];
    read_exact_ctx(r, &mut bytes, context, "values")?;
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor3::new(shape, values).map_err(|e| Error::parse(context, e.to_string()))
}

/// Decodes a block from the start of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn decode_tensor(bytes: &[u8], context: &str) -> Result<(Tensor3, usize)> {
    let mut cursor = std::io::Cursor::new(bytes);
    let t = read_tensor(&mut cursor, context)?;
    Ok((t, cursor.position() as usize))
}
