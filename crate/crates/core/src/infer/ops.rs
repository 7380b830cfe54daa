//! Elementary CNN operators on [`Tensor3`].
//!
//! Convolution is cross-correlation (no kernel flip), lowered to im2col
//! followed by a dot product per (filter, output pixel).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape3, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    #[serde(rename = "valid")]
    Valid,
    /// Zero padding so that stride 1 preserves height and width.
    #[serde(rename = "same-zero")]
    SameZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::None => v,
        }
    }
}

/// Output extent and leading pad along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct AxisGeometry {
    pub out: usize,
    pub pad_before: usize,
}

pub(crate) fn axis_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<AxisGeometry> {
    if stride == 0 {
        return Err(Error::Domain("stride must be at least 1".into()));
    }
    if kernel == 0 {
        return Err(Error::Shape("kernel extent must be at least 1".into()));
    }
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(Error::Shape(format!(
                    "kernel extent {kernel} exceeds input extent {input}"
                )));
            }
            Ok(AxisGeometry {
                out: (input - kernel) / stride + 1,
                pad_before: 0,
            })
        }
        Padding::SameZero => {
            if input == 0 {
                return Err(Error::Shape("cannot pad an empty input".into()));
            }
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            if kernel > input + total {
                return Err(Error::Shape(format!(
                    "kernel extent {kernel} exceeds padded input extent {}",
                    input + total
                )));
            }
            Ok(AxisGeometry {
                out,
                pad_before: total / 2,
            })
        }
    }
}

/// Output shape of a convolution without running it.
pub fn conv2d_output_shape(
    input: Shape3,
    filter: Shape3,
    out_channels: usize,
    stride: usize,
    padding: Padding,
) -> Result<Shape3> {
    if filter.channels != input.channels {
        return Err(Error::Shape(format!(
            "filter has {} channels, input has {}",
            filter.channels, input.channels
        )));
    }
    let gy = axis_geometry(input.height, filter.height, stride, padding)?;
    let gx = axis_geometry(input.width, filter.width, stride, padding)?;
    Ok(Shape3::new(out_channels, gy.out, gx.out))
}

/// Cross-correlates `input` with each filter and adds the matching bias.
pub fn conv2d(
    input: &Tensor3,
    filters: &[Tensor3],
    biases: &[f32],
    stride: usize,
    padding: Padding,
) -> Result<Tensor3> {
    let first = filters
        .first()
        .ok_or_else(|| Error::Shape("convolution needs at least one filter".into()))?;
    let fshape = first.shape();
    if let Some(f) = filters.iter().find(|f| f.shape() != fshape) {
        return Err(Error::Shape(format!(
            "filters disagree in shape: {} vs {}",
            fshape,
            f.shape()
        )));
    }
    if biases.len() != filters.len() {
        return Err(Error::Shape(format!(
            "{} biases for {} filters",
            biases.len(),
            filters.len()
        )));
    }
    let ishape = input.shape();
    let out_shape = conv2d_output_shape(ishape, fshape, filters.len(), stride, padding)?;
    let gy = axis_geometry(ishape.height, fshape.height, stride, padding)?;
    let gx = axis_geometry(ishape.width, fshape.width, stride, padding)?;

    let cols = im2col(input, fshape, stride, gy, gx);
    let patch = fshape.len();
    let pixels = out_shape.plane();
    let mut out = Vec::with_capacity(out_shape.len());
    for (filter, &bias) in filters.iter().zip(biases) {
        let w = filter.values();
        for p in 0..pixels {
            let col = &cols[p * patch..(p + 1) * patch];
            let acc: f64 = w
                .iter()
                .zip(col)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            out.push((acc + f64::from(bias)) as f32);
        }
    }
    Tensor3::new(out_shape, out)
}

/// One row per output pixel, each row a flattened (channel, ky, kx) patch
/// with zeros where the window hangs over the padding.
fn im2col(
    input: &Tensor3,
    kernel: Shape3,
    stride: usize,
    gy: AxisGeometry,
    gx: AxisGeometry,
) -> Vec<f32> {
    let (h, w) = (input.height() as isize, input.width() as isize);
    let patch = kernel.len();
    let mut cols = vec![0.0f32; gy.out * gx.out * patch];
    for oy in 0..gy.out {
        for ox in 0..gx.out {
            let row = &mut cols[(oy * gx.out + ox) * patch..][..patch];
            let y0 = (oy * stride) as isize - gy.pad_before as isize;
            let x0 = (ox * stride) as isize - gx.pad_before as isize;
            let mut r = 0;
            for c in 0..kernel.channels {
                let plane = input.channel_slice(c).expect("channel checked by caller");
                for ky in 0..kernel.height as isize {
                    let y = y0 + ky;
                    for kx in 0..kernel.width as isize {
                        let x = x0 + kx;
                        if y >= 0 && y < h && x >= 0 && x < w {
                            row[r] = plane[(y * w + x) as usize];
                        }
                        r += 1;
                    }
                }
            }
        }
    }
    cols
}

pub fn relu(t: &Tensor3) -> Tensor3 {
    t.map(|v| v.max(0.0)).expect("relu keeps values finite")
}

/// Per-channel window maximum.
pub fn maxpool2d(t: &Tensor3, size: usize, stride: usize) -> Result<Tensor3> {
    let s = t.shape();
    let out = maxpool2d_output_shape(s, size, stride)?;
    let mut values = Vec::with_capacity(out.len());
    for c in 0..s.channels {
        let plane = t.channel_slice(c)?;
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut best = f32::NEG_INFINITY;
                for ky in 0..size {
                    let row = &plane[(oy * stride + ky) * s.width..];
                    for &v in &row[ox * stride..ox * stride + size] {
                        best = best.max(v);
                    }
                }
                values.push(best);
            }
        }
    }
    Tensor3::new(out, values)
}

pub fn maxpool2d_output_shape(s: Shape3, size: usize, stride: usize) -> Result<Shape3> {
    if size == 0 || stride == 0 {
        return Err(Error::Domain(
            "pool size and stride must be at least 1".into(),
        ));
    }
    if size > s.height || size > s.width {
        return Err(Error::Shape(format!(
            "pool window {size} exceeds input {}",
            s
        )));
    }
    Ok(Shape3::new(
        s.channels,
        (s.height - size) / stride + 1,
        (s.width - size) / stride + 1,
    ))
}

/// Fully connected layer over a flat vector; `weights` is out x in, row-major.
pub fn dense(
    input: &[f32],
    weights: &[f32],
    bias: &[f32],
    activation: Activation,
) -> Result<Vec<f32>> {
    let out_dim = bias.len();
    if weights.len() != out_dim * input.len() {
        return Err(Error::Shape(format!(
            "dense weights hold {} values, expected {}x{}",
            weights.len(),
            out_dim,
            input.len()
        )));
    }
    Ok(weights
        .chunks_exact(input.len().max(1))
        .take(out_dim)
        .zip(bias)
        .map(|(row, &b)| {
            let acc: f64 = row
                .iter()
                .zip(input)
                .map(|(&w, &x)| f64::from(w) * f64::from(x))
                .sum();
            activation.apply((acc + f64::from(b)) as f32)
        })
        .collect())
}

/// Numerically stable softmax (max-shifted, f64 internally).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape3) -> Tensor3 {
        Tensor3::from_fn(shape, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    /// Direct six-loop sliding window; independent of the im2col path.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        input: &Tensor3,
        filters: &[Tensor3],
        biases: &[f32],
        stride: usize,
        pad_y: usize,
        pad_x: usize,
        out_h: usize,
        out_w: usize,
    ) -> Vec<f64> {
        let mut out = Vec::new();
        for (f, filter) in filters.iter().enumerate() {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = biases[f] as f64;
                    for c in 0..filter.channels() {
                        for ky in 0..filter.height() {
                            for kx in 0..filter.width() {
                                let y = (oy * stride + ky) as isize - pad_y as isize;
                                let x = (ox * stride + kx) as isize - pad_x as isize;
                                if y < 0
                                    || x < 0
                                    || y >= input.height() as isize
                                    || x >= input.width() as isize
                                {
                                    continue;
                                }
                                acc += input.get(c, y as usize, x as usize) as f64
                                    * filter.get(c, ky, kx) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let input = Tensor3::filled(Shape3::new(1, 3, 3), 1.0).unwrap();
        let k = Tensor3::new(Shape3::new(1, 1, 1), vec![1.0]).unwrap();
        let out = conv2d(&input, &[k], &[0.0], 1, Padding::Valid).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn sum_kernel() {
        let input = Tensor3::new(Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor3::filled(Shape3::new(1, 2, 2), 1.0).unwrap();
        let out = conv2d(&input, &[k], &[0.0], 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), Shape3::new(1, 1, 1));
        assert_eq!(out.values(), &[10.0]);
    }

    #[test]
    fn same_zero_preserves_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_tensor(&mut rng, Shape3::new(2, 7, 5));
        let filters: Vec<_> = (0..3)
            .map(|_| random_tensor(&mut rng, Shape3::new(2, 3, 3)))
            .collect();
        let out = conv2d(&input, &filters, &[0.0; 3], 1, Padding::SameZero).unwrap();
        assert_eq!(out.shape(), Shape3::new(3, 7, 5));
        let want = conv_oracle(&input, &filters, &[0.0; 3], 1, 1, 1, 7, 5);
        for (a, b) in out.values().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn random_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = random_tensor(&mut rng, Shape3::new(3, 8, 8));
        let filters: Vec<_> = (0..4)
            .map(|_| random_tensor(&mut rng, Shape3::new(3, 3, 3)))
            .collect();
        let biases: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv2d(&input, &filters, &biases, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), Shape3::new(4, 6, 6));
        let want = conv_oracle(&input, &filters, &biases, 1, 0, 0, 6, 6);
        for (a, b) in out.values().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_errors() {
        let input = Tensor3::zeros(Shape3::new(1, 2, 2));
        let big = Tensor3::zeros(Shape3::new(1, 3, 3));
        assert!(matches!(
            conv2d(
                &input,
                std::slice::from_ref(&big),
                &[0.0],
                1,
                Padding::Valid
            ),
            Err(Error::Shape(_))
        ));
        let wrong_c = Tensor3::zeros(Shape3::new(2, 1, 1));
        assert!(matches!(
            conv2d(&input, &[wrong_c], &[0.0], 1, Padding::Valid),
            Err(Error::Shape(_))
        ));
        let k = Tensor3::zeros(Shape3::new(1, 1, 1));
        assert!(matches!(
            conv2d(&input, &[k], &[0.0], 0, Padding::Valid),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn relu_cases() {
        let t = Tensor3::new(Shape3::new(1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&t).values(), &[0.0, 0.0, 2.0]);
        let pos = Tensor3::new(Shape3::new(1, 1, 3), vec![0.5, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_cases() {
        let t = Tensor3::new(Shape3::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&t, 2, 2).unwrap().values(), &[4.0]);
        let c = Tensor3::filled(Shape3::new(2, 4, 4), 0.25).unwrap();
        let out = maxpool2d(&c, 2, 2).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.25));
        assert!(matches!(maxpool2d(&t, 3, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let t = random_tensor(&mut rng, Shape3::new(2, 6, 6));
        let out = maxpool2d(&t, 2, 2).unwrap();
        let mut want = Vec::new();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            m = m.max(t.get(c, oy * 2 + ky, ox * 2 + kx));
                        }
                    }
                    want.push(m);
                }
            }
        }
        assert_eq!(out.values(), want.as_slice());
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn relu_is_idempotent(values in prop::collection::vec(-5f32..5.0, 1..40)) {
            let t = Tensor3::new(Shape3::new(1, 1, values.len()), values).unwrap();
            let once = relu(&t);
            prop_assert_eq!(relu(&once), once);
        }

        #[test]
        fn conv_is_linear(seed in any::<u64>(), a in -2f32..2.0, b in -2f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = Shape3::new(2, 6, 6);
            let x = random_tensor(&mut rng, shape);
            let y = random_tensor(&mut rng, shape);
            let filters: Vec<_> = (0..2).map(|_| random_tensor(&mut rng, Shape3::new(2, 3, 3))).collect();
            let zero = [0.0; 2];
            let mix = Tensor3::from_fn(shape, |c, i, j| a * x.get(c, i, j) + b * y.get(c, i, j)).unwrap();
            let lhs = conv2d(&mix, &filters, &zero, 1, Padding::SameZero).unwrap();
            let cx = conv2d(&x, &filters, &zero, 1, Padding::SameZero).unwrap();
            let cy = conv2d(&y, &filters, &zero, 1, Padding::SameZero).unwrap();
            for ((l, p), q) in lhs.values().iter().zip(cx.values()).zip(cy.values()) {
                prop_assert!((l - (a * p + b * q)).abs() < 1e-4);
            }
        }

        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50f32..50.0, 1..12), shift in -100f32..100.0) {
            let p = softmax(&logits);
            let total: f32 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let shifted: Vec<f32> = logits.iter().map(|v| v + shift).collect();
            for (x, y) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
