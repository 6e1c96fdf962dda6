//! Layer-by-layer definitions of VGG-16 and the MobileNet-V1 family.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Activation, LayerKind, LayerSpec, LayerWeights, TensorError};

pub const WIDTH_MULTIPLIERS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];
pub const RESOLUTIONS: [usize; 3] = [224, 192, 160];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("unsupported width multiplier {0} (expected one of 1.0, 0.75, 0.5, 0.25)")]
    UnsupportedAlpha(f64),
    #[error("unsupported resolution {0} (expected one of 224, 192, 160)")]
    UnsupportedResolution(usize),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("inconsistent model: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Vgg16,
    MobileNetV1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub family: Family,
    /// (height, width, channels)
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub width_multiplier: f64,
    pub resolution: usize,
}

/// Per-layer multiply-accumulate counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

/// Knobs for shrunken VGG variants used in fast tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VggConfig {
    pub base_width: usize,
    pub fc_hidden: usize,
    pub num_classes: usize,
}

impl Default for VggConfig {
    fn default() -> Self {
        Self { base_width: 64, fc_hidden: 4096, num_classes: 1000 }
    }
}

/// Rounds `alpha * channels` half-up, never below one channel.
pub fn scale_channels(alpha: f64, channels: usize) -> usize {
    ((alpha * channels as f64 + 0.5).floor() as usize).max(1)
}

pub fn alpha_label(alpha: f64) -> String {
    if alpha == 1.0 {
        "1.0".to_string()
    } else {
        format!("{alpha:.2}")
    }
}

pub fn mobilenet_name(alpha: f64, rho: usize) -> String {
    format!("MobileNet_v1_{}_{}", alpha_label(alpha), rho)
}

pub fn build_vgg16() -> ModelSpec {
    build_vgg16_with(VggConfig::default())
}

pub fn build_vgg16_with(cfg: VggConfig) -> ModelSpec {
    let b = cfg.base_width;
    let blocks = [(2, b), (2, 2 * b), (3, 4 * b), (3, 8 * b), (3, 8 * b)];
    let mut layers = Vec::new();
    let mut c_in = 3;
    for (convs, width) in blocks {
        for _ in 0..convs {
            layers.push(LayerSpec::conv3x3(c_in, width, 1));
            c_in = width;
        }
        layers.push(LayerSpec::max_pool(c_in));
    }
    layers.push(LayerSpec::fully_connected(7 * 7 * c_in, cfg.fc_hidden, Activation::ReLU));
    layers.push(LayerSpec::fully_connected(cfg.fc_hidden, cfg.fc_hidden, Activation::ReLU));
    layers.push(LayerSpec::fully_connected(cfg.fc_hidden, cfg.num_classes, Activation::None));
    let name = if cfg == VggConfig::default() { "VGG-16".to_string() } else { format!("VGG-16-w{b}") };
    ModelSpec {
        name,
        family: Family::Vgg16,
        input: (224, 224, 3),
        layers,
        width_multiplier: 1.0,
        resolution: 224,
    }
}

/// (output channels at alpha = 1, depthwise stride) for the 13 separable blocks.
const MOBILENET_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

pub fn build_mobilenet_v1(alpha: f64, rho: usize) -> Result<ModelSpec, ZooError> {
    build_mobilenet_v1_with(alpha, rho, 1000)
}

pub fn build_mobilenet_v1_with(alpha: f64, rho: usize, num_classes: usize) -> Result<ModelSpec, ZooError> {
    if !WIDTH_MULTIPLIERS.contains(&alpha) {
        return Err(ZooError::UnsupportedAlpha(alpha));
    }
    if !RESOLUTIONS.contains(&rho) {
        return Err(ZooError::UnsupportedResolution(rho));
    }
    let mut c = scale_channels(alpha, 32);
    let mut layers = vec![LayerSpec::conv3x3(3, c, 2)];
    for (base, stride) in MOBILENET_BLOCKS {
        let out = scale_channels(alpha, base);
        layers.push(LayerSpec::depthwise3x3(c, stride));
        layers.push(LayerSpec::pointwise(c, out));
        c = out;
    }
    layers.push(LayerSpec::global_avg_pool(c));
    layers.push(LayerSpec::fully_connected(c, num_classes, Activation::None));
    Ok(ModelSpec {
        name: mobilenet_name(alpha, rho),
        family: Family::MobileNetV1,
        input: (rho, rho, 3),
        layers,
        width_multiplier: alpha,
        resolution: rho,
    })
}

/// All twelve (alpha, rho) MobileNet-V1 variants.
pub fn mobilenet_variants() -> Vec<ModelSpec> {
    WIDTH_MULTIPLIERS
        .iter()
        .flat_map(|&a| RESOLUTIONS.iter().map(move |&r| build_mobilenet_v1(a, r).expect("supported variant")))
        .collect()
}

/// Looks a model up by a CLI-style name: `vgg16` or `mobilenet`.
pub fn by_name(name: &str, alpha: f64, rho: usize) -> Result<ModelSpec, ZooError> {
    match name.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "vgg16" | "vgg" => Ok(build_vgg16()),
        "mobilenet" | "mobilenetv1" => build_mobilenet_v1(alpha, rho),
        _ => Err(ZooError::UnknownModel(name.to_string())),
    }
}

impl ModelSpec {
    /// Input shape of every layer followed by the final output shape.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let (mut h, mut w, mut c) = self.input;
        shapes.push((h, w, c));
        for l in &self.layers {
            if l.kind == LayerKind::FullyConnected {
                (h, w, c) = (1, 1, l.out_channels);
            } else {
                (h, w, c) = l.output_shape(h, w);
            }
            shapes.push((h, w, c));
        }
        shapes
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    /// Number of leading layers that can be split by rows.
    pub fn row_local_prefix(&self) -> usize {
        self.layers.iter().take_while(|l| l.is_row_local()).count()
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        let (mut h, mut w, mut c) = self.input;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            let expected_in = if l.kind == LayerKind::FullyConnected { h * w * c } else { c };
            if l.in_channels != expected_in {
                return Err(ZooError::Inconsistent(format!(
                    "layer {i} ({:?}) expects {} inputs but receives {expected_in}",
                    l.kind, l.in_channels
                )));
            }
            if l.kind == LayerKind::MaxPool && (h % 2 != 0 || w % 2 != 0) {
                return Err(ZooError::Inconsistent(format!("layer {i} pools an odd {h}x{w} map")));
            }
            if l.kind == LayerKind::FullyConnected {
                (h, w, c) = (1, 1, l.out_channels);
            } else {
                (h, w, c) = l.output_shape(h, w);
            }
        }
        Ok(())
    }

    /// MACs per output row of layer `index`.
    pub fn macs_per_row(&self, index: usize) -> u64 {
        let shapes = self.shapes();
        let l = &self.layers[index];
        let (_, w_out, _) = shapes[index + 1];
        let (kh, kw) = l.kernel;
        let per_px = match l.kind {
            LayerKind::Conv => kh * kw * l.in_channels * l.out_channels,
            LayerKind::DepthwiseConv => kh * kw * l.in_channels,
            LayerKind::PointwiseConv => l.in_channels * l.out_channels,
            LayerKind::FullyConnected => return (l.in_channels * l.out_channels) as u64,
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => 0,
        };
        (per_px * w_out) as u64
    }

    pub fn macs(&self) -> MacCount {
        let shapes = self.shapes();
        let per_layer: Vec<u64> = (0..self.layers.len())
            .map(|i| self.macs_per_row(i) * shapes[i + 1].0 as u64)
            .collect();
        let total = per_layer.iter().sum();
        MacCount { per_layer, total }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ZooError> {
        let m: ModelSpec =
            serde_json::from_str(s).map_err(|e| ZooError::Inconsistent(format!("bad model JSON: {e}")))?;
        m.validate()?;
        Ok(m)
    }
}

/// Seeded random weights for every layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub layers: Vec<LayerWeights>,
}

impl ModelWeights {
    /// Layer `i` draws from its own ChaCha stream, so adding layers never
    /// perturbs the weights of earlier ones.
    pub fn random(model: &ModelSpec, seed: u64) -> Self {
        let layers = model
            .layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                LayerWeights::random(spec, &mut rng)
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(model: &ModelSpec) -> Self {
        Self { layers: model.layers.iter().map(LayerWeights::zeros).collect() }
    }
}
