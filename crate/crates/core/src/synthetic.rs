//! Hand-built stripe-detector models and stripe image datasets.
//!
//! Each [`StripeKind`] has a matching 3x3 edge kernel. A model built by
//! [`edge_model`] convolves a single-channel image with the chosen kernels,
//! applies ReLU and 2x2 max pooling, and scores every class by the mean
//! pooled response of its own kernel. Classes without a kernel get a large
//! negative bias, so images of those classes are always misclassified.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{Activation, ConvLayer, DenseLayer, Layer, ModelSpec, Padding};
use crate::tensor::{Shape3, Tensor3};

pub const EDGE_IMAGE_SIDE: usize = 12;
/// Logit multiplier applied to the mean pooled response of a class's kernel.
const HEAD_GAIN: f32 = 2.0;
const UNMODELLED_BIAS: f32 = -10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripeKind {
    Vertical,
    Horizontal,
    Diagonal,
    AntiDiagonal,
}

impl StripeKind {
    pub const ALL: [StripeKind; 4] = [
        StripeKind::Vertical,
        StripeKind::Horizontal,
        StripeKind::Diagonal,
        StripeKind::AntiDiagonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StripeKind::Vertical => "vertical",
            StripeKind::Horizontal => "horizontal",
            StripeKind::Diagonal => "diagonal",
            StripeKind::AntiDiagonal => "anti_diagonal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown stripe kind `{s}`")))
    }

    /// Sobel-style 3x3 kernel responding to edges of this orientation.
    pub fn kernel(self) -> [f32; 9] {
        match self {
            StripeKind::Vertical => [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
            StripeKind::Horizontal => [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
            StripeKind::Diagonal => [-2.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0, 1.0, 2.0],
            StripeKind::AntiDiagonal => [0.0, -1.0, -2.0, 1.0, 0.0, -1.0, 2.0, 1.0, 0.0],
        }
    }

    /// 1.0 on stripes three pixels wide, 0.0 between them. A period of six
    /// keeps the diagonal kernels ahead of the axis-aligned ones on diagonal
    /// stripes; with period four their responses coincide.
    fn intensity(self, y: usize, x: usize, phase: usize) -> f32 {
        let coord = match self {
            StripeKind::Vertical => x + phase,
            StripeKind::Horizontal => y + phase,
            StripeKind::Diagonal => x + y + phase,
            StripeKind::AntiDiagonal => x + 4 * EDGE_IMAGE_SIDE - y + phase,
        };
        if (coord / 3) % 2 == 0 {
            1.0
        } else {
            0.0
        }
    }
}

/// Stripe image with a random phase and uniform noise in `[-noise, noise]`.
pub fn stripe_image(kind: StripeKind, shape: Shape3, noise: f32, rng: &mut impl Rng) -> Tensor3 {
    let phase = rng.random_range(0..6);
    let noise = noise.abs();
    Tensor3::from_fn(shape, |_, y, x| {
        let jitter = if noise > 0.0 {
            rng.random_range(-noise..=noise)
        } else {
            0.0
        };
        kind.intensity(y, x, phase) + jitter
    })
    .expect("stripe values are finite")
}

/// Builds the stripe detector: one conv layer with a kernel per entry of
/// `filters`, and a softmax head over `classes`.
pub fn edge_model(filters: &[StripeKind], classes: &[StripeKind]) -> Result<ModelSpec> {
    if filters.is_empty() || classes.is_empty() {
        return Err(Error::Domain(
            "edge model needs at least one filter and one class".into(),
        ));
    }
    let input_shape = Shape3::new(1, EDGE_IMAGE_SIDE, EDGE_IMAGE_SIDE);
    let conv_side = EDGE_IMAGE_SIDE - 2;
    let pooled_side = conv_side / 2;
    let plane = pooled_side * pooled_side;
    let in_dim = filters.len() * plane;

    let kernels = filters
        .iter()
        .map(|k| Tensor3::new(Shape3::new(1, 3, 3), k.kernel().to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let mut weights = vec![0.0f32; classes.len() * in_dim];
    let mut bias = vec![0.0f32; classes.len()];
    for (c, class) in classes.iter().enumerate() {
        match filters.iter().position(|f| f == class) {
            Some(f) => {
                let row = &mut weights[c * in_dim..(c + 1) * in_dim];
                row[f * plane..(f + 1) * plane].fill(HEAD_GAIN / plane as f32);
            }
            None => bias[c] = UNMODELLED_BIAS,
        }
    }

    Ok(ModelSpec {
        name: format!(
            "edge-world[{}]",
            filters
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join(",")
        ),
        input_shape,
        class_names: classes.iter().map(|k| k.name().to_owned()).collect(),
        layers: vec![
            Layer::Conv(ConvLayer {
                filters: kernels,
                bias: vec![0.0; filters.len()],
                stride: 1,
                padding: Padding::Valid,
                activation: Activation::Relu,
            }),
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Flatten,
            Layer::Dense(DenseLayer {
                in_dim,
                out_dim: classes.len(),
                weights,
                bias,
                activation: Activation::None,
            }),
            Layer::Softmax,
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeWorldConfig {
    pub filters: Vec<StripeKind>,
    pub classes: Vec<StripeKind>,
    pub per_class: usize,
    pub noise: f32,
    /// Fraction of images whose recorded label is replaced by another class.
    pub label_noise: f64,
    pub seed: u64,
}

impl EdgeWorldConfig {
    /// Two classes, vertical and horizontal, each with its own kernel.
    pub fn two_class(seed: u64) -> Self {
        let kinds = vec![StripeKind::Vertical, StripeKind::Horizontal];
        Self {
            filters: kinds.clone(),
            classes: kinds,
            per_class: 40,
            noise: 0.05,
            label_noise: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_id: u32,
    /// Recorded label (possibly noisy), an index into the model's classes.
    pub label: u32,
    /// Class the image was actually drawn from.
    pub drawn_from: u32,
    pub image: Tensor3,
}

#[derive(Debug, Clone)]
pub struct EdgeWorld {
    pub model: ModelSpec,
    pub images: Vec<LabeledImage>,
}

impl EdgeWorld {
    pub fn generate(cfg: &EdgeWorldConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.label_noise) {
            return Err(Error::Domain(format!(
                "label noise {} outside [0, 1]",
                cfg.label_noise
            )));
        }
        let model = edge_model(&cfg.filters, &cfg.classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_classes = cfg.classes.len() as u32;
        let mut images = Vec::with_capacity(cfg.per_class * cfg.classes.len());
        for (c, kind) in cfg.classes.iter().enumerate() {
            for _ in 0..cfg.per_class {
                let image = stripe_image(*kind, model.input_shape, cfg.noise, &mut rng);
                let drawn_from = c as u32;
                let mut label = drawn_from;
                if n_classes > 1 && rng.random_bool(cfg.label_noise) {
                    let others: Vec<u32> = (0..n_classes).filter(|&o| o != drawn_from).collect();
                    label = *others.choose(&mut rng).expect("at least one other class");
                }
                images.push(LabeledImage {
                    image_id: images.len() as u32,
                    label,
                    drawn_from,
                    image,
                });
            }
        }
        Ok(Self { model, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::forward;

    #[test]
    fn clean_two_class_images_are_classified_correctly() {
        let world = EdgeWorld::generate(&EdgeWorldConfig::two_class(9)).unwrap();
        assert_eq!(world.images.len(), 80);
        for img in &world.images {
            let trace = forward(&world.model, &img.image).unwrap();
            assert_eq!(
                trace.predicted_class as u32, img.label,
                "image {}",
                img.image_id
            );
        }
    }

    #[test]
    fn unmodelled_class_is_never_predicted() {
        let filters = [StripeKind::Vertical, StripeKind::Horizontal];
        let classes = [
            StripeKind::Vertical,
            StripeKind::Horizontal,
            StripeKind::Diagonal,
        ];
        let model = edge_model(&filters, &classes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let img = stripe_image(StripeKind::Diagonal, model.input_shape, 0.05, &mut rng);
            assert_ne!(forward(&model, &img).unwrap().predicted_class, 2);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = EdgeWorldConfig::two_class(3);
        let a = EdgeWorld::generate(&cfg).unwrap();
        let b = EdgeWorld::generate(&cfg).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn label_noise_flips_some_labels() {
        let mut cfg = EdgeWorldConfig::two_class(3);
        cfg.label_noise = 0.3;
        let world = EdgeWorld::generate(&cfg).unwrap();
        let flipped = world
            .images
            .iter()
            .filter(|i| i.label != i.drawn_from)
            .count();
        assert!(flipped > 0 && flipped < 80);
    }
}
