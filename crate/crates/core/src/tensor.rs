//! Dense feature maps and the reference CNN kernels.
//!
//! Every kernel is written against a [`RowBand`]: a contiguous slab of rows
//! cut out of a taller logical feature map. The monolithic path passes the
//! whole map as a single band, the distributed runtime passes whatever rows a
//! node holds. Both go through the same loops, so each output element is
//! accumulated in the same order on either path.

use std::ops::Range;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("input row {row} is not held by this band (holds {start}..{end})")]
    MissingRow { row: usize, start: usize, end: usize },
    #[error("max-pool needs even spatial dimensions, got {height}x{width}")]
    OddSpatial { height: usize, width: usize },
    #[error("output rows {start}..{end} out of bounds for height {height}")]
    RowsOutOfBounds { start: usize, end: usize, height: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// H x W x C float32 feature map, row-major in (H, W, C) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::Shape(format!(
                "dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(TensorError::Shape(format!(
                "{height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Uniform values in [-1, 1) drawn from a seeded generator.
    pub fn random(height: usize, width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..height * width * channels).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row_len(&self) -> usize {
        self.width * self.channels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let n = self.row_len();
        &self.data[row * n..(row + 1) * n]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        let n = self.row_len();
        &mut self.data[row * n..(row + 1) * n]
    }

    /// Copy of rows `rows` as a new tensor.
    pub fn slice_rows(&self, rows: Range<usize>) -> Result<Tensor> {
        if rows.start >= rows.end || rows.end > self.height {
            return Err(TensorError::RowsOutOfBounds {
                start: rows.start,
                end: rows.end,
                height: self.height,
            });
        }
        let n = self.row_len();
        Tensor::new(
            rows.len(),
            self.width,
            self.channels,
            self.data[rows.start * n..rows.end * n].to_vec(),
        )
    }

    /// Stacks tensors of equal width and channel count along the height axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::Shape("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut height = 0;
        for p in parts {
            if p.width != first.width || p.channels != first.channels {
                return Err(TensorError::Shape(format!(
                    "cannot stack {}x{} rows onto {}x{} rows",
                    p.width, p.channels, first.width, first.channels
                )));
            }
            height += p.height;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(height, first.width, first.channels, data)
    }
}

/// Rows `first_row .. first_row + rows.height()` of a logical map that is
/// `full_height` rows tall. Rows outside `0..full_height` read as zero padding.
#[derive(Debug, Clone)]
pub struct RowBand<'a> {
    pub rows: &'a Tensor,
    pub first_row: usize,
    pub full_height: usize,
}

impl<'a> RowBand<'a> {
    pub fn whole(t: &'a Tensor) -> Self {
        Self { rows: t, first_row: 0, full_height: t.height() }
    }

    fn row(&self, row: usize) -> Result<&'a [f32]> {
        let end = self.first_row + self.rows.height();
        if row < self.first_row || row >= end {
            return Err(TensorError::MissingRow { row, start: self.first_row, end });
        }
        Ok(self.rows.row(row - self.first_row))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    PointwiseConv,
    MaxPool,
    GlobalAvgPool,
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    None,
    ReLU,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel: (3, 3),
            stride,
            padding: 1,
            in_channels,
            out_channels,
            activation: Activation::ReLU,
        }
    }

    pub fn depthwise3x3(channels: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv,
            kernel: (3, 3),
            stride,
            padding: 1,
            in_channels: channels,
            out_channels: channels,
            activation: Activation::ReLU,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kind: LayerKind::PointwiseConv,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels,
            out_channels,
            activation: Activation::ReLU,
        }
    }

    pub fn max_pool(channels: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            kernel: (2, 2),
            stride: 2,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
            activation: Activation::None,
        }
    }

    pub fn global_avg_pool(channels: usize) -> Self {
        Self {
            kind: LayerKind::GlobalAvgPool,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
            activation: Activation::None,
        }
    }

    pub fn fully_connected(in_features: usize, out_features: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::FullyConnected,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels: in_features,
            out_channels: out_features,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TensorError::InvalidSpec(format!("{:?}: {m}", self.kind)));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive");
        }
        if !(1..=2).contains(&self.stride) {
            return bad("stride must be 1 or 2");
        }
        match self.kind {
            LayerKind::Conv => {
                if self.kernel.0 == 0 || self.kernel.1 == 0 {
                    return bad("kernel must be non-empty");
                }
            }
            LayerKind::DepthwiseConv => {
                if self.in_channels != self.out_channels {
                    return bad("depthwise conv keeps the channel count");
                }
                if self.kernel.0 == 0 || self.kernel.1 == 0 {
                    return bad("kernel must be non-empty");
                }
            }
            LayerKind::PointwiseConv => {
                if self.kernel != (1, 1) || self.padding != 0 || self.stride != 1 {
                    return bad("pointwise conv is 1x1, stride 1, no padding");
                }
            }
            LayerKind::MaxPool => {
                if self.kernel != (2, 2) || self.stride != 2 || self.padding != 0 {
                    return bad("only 2x2 stride-2 pooling is supported");
                }
                if self.in_channels != self.out_channels {
                    return bad("pooling keeps the channel count");
                }
            }
            LayerKind::GlobalAvgPool => {
                if self.in_channels != self.out_channels {
                    return bad("pooling keeps the channel count");
                }
            }
            LayerKind::FullyConnected => {}
        }
        Ok(())
    }

    /// Whether the layer maps row bands to row bands and can be split by rows.
    pub fn is_row_local(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::PointwiseConv | LayerKind::MaxPool
        )
    }

    /// Output spatial extent along one axis.
    pub fn output_extent(&self, input: usize) -> usize {
        match self.kind {
            LayerKind::GlobalAvgPool | LayerKind::FullyConnected => 1,
            _ => {
                let k = self.kernel.0;
                (input + 2 * self.padding).saturating_sub(k) / self.stride + 1
            }
        }
    }

    fn output_width(&self, input: usize) -> usize {
        match self.kind {
            LayerKind::GlobalAvgPool | LayerKind::FullyConnected => 1,
            _ => (input + 2 * self.padding).saturating_sub(self.kernel.1) / self.stride + 1,
        }
    }

    /// Output (height, width, channels) for an input of the given shape.
    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize, usize) {
        (self.output_extent(height), self.output_width(width), self.out_channels)
    }

    /// Input rows `[start, end)` that output rows `out` read, clipped to the map.
    pub fn input_rows_for(&self, out: Range<usize>, input_height: usize) -> Range<usize> {
        if out.is_empty() {
            return 0..0;
        }
        let (kh, s, p) = (self.kernel.0, self.stride, self.padding);
        let start = (out.start * s).saturating_sub(p);
        let end = ((out.end - 1) * s + kh).saturating_sub(p).min(input_height);
        start..end
    }

    pub fn weight_len(&self) -> usize {
        let (kh, kw) = self.kernel;
        match self.kind {
            LayerKind::Conv => kh * kw * self.in_channels * self.out_channels,
            LayerKind::DepthwiseConv => kh * kw * self.in_channels,
            LayerKind::PointwiseConv | LayerKind::FullyConnected => self.in_channels * self.out_channels,
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => 0,
            _ => self.out_channels,
        }
    }
}

/// Kernel in (kh, kw, Cin, Cout) order (depthwise: (kh, kw, C); FC: (in, out))
/// plus one bias per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LayerWeights {
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerWeights {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self { kernel: vec![0.0; spec.weight_len()], bias: vec![0.0; spec.bias_len()] }
    }

    /// Uniform weights in [-0.5, 0.5).
    pub fn random<R: Rng>(spec: &LayerSpec, rng: &mut R) -> Self {
        let kernel = (0..spec.weight_len()).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let bias = (0..spec.bias_len()).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        Self { kernel, bias }
    }

    pub fn check(&self, spec: &LayerSpec) -> Result<()> {
        if self.kernel.len() != spec.weight_len() || self.bias.len() != spec.bias_len() {
            return Err(TensorError::Shape(format!(
                "{:?} expects {} kernel and {} bias values, got {} and {}",
                spec.kind,
                spec.weight_len(),
                spec.bias_len(),
                self.kernel.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }
}

fn check_input(spec: &LayerSpec, band: &RowBand<'_>) -> Result<()> {
    if band.rows.channels() != spec.in_channels {
        return Err(TensorError::Shape(format!(
            "{:?} expects {} input channels, got {}",
            spec.kind,
            spec.in_channels,
            band.rows.channels()
        )));
    }
    Ok(())
}

fn check_out_rows(out: &Range<usize>, height: usize) -> Result<()> {
    if out.start >= out.end || out.end > height {
        return Err(TensorError::RowsOutOfBounds { start: out.start, end: out.end, height });
    }
    Ok(())
}

#[inline]
fn tap(pos: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (pos + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

fn relu_in_place(values: &mut [f32], act: Activation) {
    if act == Activation::ReLU {
        for v in values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Computes output rows `out` of a standard or pointwise convolution.
pub fn conv2d_rows(
    spec: &LayerSpec,
    weights: &LayerWeights,
    input: &RowBand<'_>,
    out: Range<usize>,
) -> Result<Tensor> {
    if !matches!(spec.kind, LayerKind::Conv | LayerKind::PointwiseConv) {
        return Err(TensorError::InvalidSpec(format!("{:?} is not a convolution", spec.kind)));
    }
    spec.validate()?;
    weights.check(spec)?;
    check_input(spec, input)?;
    let (h_in, w_in) = (input.full_height, input.rows.width());
    let (h_out, w_out, c_out) = spec.output_shape(h_in, w_in);
    check_out_rows(&out, h_out)?;
    let (kh, kw) = spec.kernel;
    let (s, pad, c_in) = (spec.stride, spec.padding, spec.in_channels);

    let mut data = vec![0.0f32; out.len() * w_out * c_out];
    for (oi, oy) in out.clone().enumerate() {
        for ox in 0..w_out {
            let base = (oi * w_out + ox) * c_out;
            let acc = &mut data[base..base + c_out];
            acc.copy_from_slice(&weights.bias);
            for ky in 0..kh {
                let Some(iy) = tap(oy * s, ky, pad, h_in) else { continue };
                let row = input.row(iy)?;
                for kx in 0..kw {
                    let Some(ix) = tap(ox * s, kx, pad, w_in) else { continue };
                    let px = &row[ix * c_in..(ix + 1) * c_in];
                    let wbase = (ky * kw + kx) * c_in * c_out;
                    for (ci, &v) in px.iter().enumerate() {
                        let w = &weights.kernel[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                        for (a, &wv) in acc.iter_mut().zip(w) {
                            *a += v * wv;
                        }
                    }
                }
            }
            relu_in_place(acc, spec.activation);
        }
    }
    Tensor::new(out.len(), w_out, c_out, data)
}

/// Computes output rows `out` of a depthwise convolution.
pub fn depthwise_conv2d_rows(
    spec: &LayerSpec,
    weights: &LayerWeights,
    input: &RowBand<'_>,
    out: Range<usize>,
) -> Result<Tensor> {
    if spec.kind != LayerKind::DepthwiseConv {
        return Err(TensorError::InvalidSpec(format!("{:?} is not a depthwise convolution", spec.kind)));
    }
    spec.validate()?;
    weights.check(spec)?;
    check_input(spec, input)?;
    let (h_in, w_in) = (input.full_height, input.rows.width());
    let (h_out, w_out, c) = spec.output_shape(h_in, w_in);
    check_out_rows(&out, h_out)?;
    let (kh, kw) = spec.kernel;
    let (s, pad) = (spec.stride, spec.padding);

    let mut data = vec![0.0f32; out.len() * w_out * c];
    for (oi, oy) in out.clone().enumerate() {
        for ox in 0..w_out {
            let base = (oi * w_out + ox) * c;
            let acc = &mut data[base..base + c];
            acc.copy_from_slice(&weights.bias);
            for ky in 0..kh {
                let Some(iy) = tap(oy * s, ky, pad, h_in) else { continue };
                let row = input.row(iy)?;
                for kx in 0..kw {
                    let Some(ix) = tap(ox * s, kx, pad, w_in) else { continue };
                    let px = &row[ix * c..(ix + 1) * c];
                    let w = &weights.kernel[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                    for ((a, &v), &wv) in acc.iter_mut().zip(px).zip(w) {
                        *a += v * wv;
                    }
                }
            }
            relu_in_place(acc, spec.activation);
        }
    }
    Tensor::new(out.len(), w_out, c, data)
}

/// Computes output rows `out` of a 2x2 stride-2 max pool.
pub fn maxpool2d_rows(spec: &LayerSpec, input: &RowBand<'_>, out: Range<usize>) -> Result<Tensor> {
    if spec.kind != LayerKind::MaxPool {
        return Err(TensorError::InvalidSpec(format!("{:?} is not a max pool", spec.kind)));
    }
    spec.validate()?;
    check_input(spec, input)?;
    let (h_in, w_in, c) = (input.full_height, input.rows.width(), input.rows.channels());
    if h_in % 2 != 0 || w_in % 2 != 0 {
        return Err(TensorError::OddSpatial { height: h_in, width: w_in });
    }
    let w_out = w_in / 2;
    check_out_rows(&out, h_in / 2)?;
    let mut data = vec![0.0f32; out.len() * w_out * c];
    for (oi, oy) in out.clone().enumerate() {
        let top = input.row(2 * oy)?;
        let bottom = input.row(2 * oy + 1)?;
        for ox in 0..w_out {
            let dst = &mut data[(oi * w_out + ox) * c..(oi * w_out + ox + 1) * c];
            for (ch, d) in dst.iter_mut().enumerate() {
                let a = top[2 * ox * c + ch];
                let b = top[(2 * ox + 1) * c + ch];
                let e = bottom[2 * ox * c + ch];
                let f = bottom[(2 * ox + 1) * c + ch];
                *d = a.max(b).max(e.max(f));
            }
        }
    }
    Tensor::new(out.len(), w_out, c, data)
}

/// Row-partitionable layers dispatch here.
pub fn apply_rows(
    spec: &LayerSpec,
    weights: &LayerWeights,
    input: &RowBand<'_>,
    out: Range<usize>,
) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Conv | LayerKind::PointwiseConv => conv2d_rows(spec, weights, input, out),
        LayerKind::DepthwiseConv => depthwise_conv2d_rows(spec, weights, input, out),
        LayerKind::MaxPool => maxpool2d_rows(spec, input, out),
        LayerKind::GlobalAvgPool | LayerKind::FullyConnected => Err(TensorError::InvalidSpec(format!(
            "{:?} cannot be computed on a row band",
            spec.kind
        ))),
    }
}

pub fn conv2d(input: &Tensor, spec: &LayerSpec, weights: &LayerWeights) -> Result<Tensor> {
    let h = spec.output_extent(input.height());
    conv2d_rows(spec, weights, &RowBand::whole(input), 0..h)
}

pub fn depthwise_conv2d(input: &Tensor, spec: &LayerSpec, weights: &LayerWeights) -> Result<Tensor> {
    let h = spec.output_extent(input.height());
    depthwise_conv2d_rows(spec, weights, &RowBand::whole(input), 0..h)
}

pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    let spec = LayerSpec::max_pool(input.channels());
    if input.height() % 2 != 0 || input.width() % 2 != 0 {
        return Err(TensorError::OddSpatial { height: input.height(), width: input.width() });
    }
    maxpool2d_rows(&spec, &RowBand::whole(input), 0..input.height() / 2)
}

/// Per-channel mean over all spatial positions, summed in row-major order.
pub fn global_avg_pool(input: &Tensor) -> Vec<f32> {
    let c = input.channels();
    let mut sums = vec![0.0f32; c];
    for px in input.data().chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    let n = (input.height() * input.width()) as f32;
    sums.iter().map(|s| s / n).collect()
}

/// `bias + x · W` with `W` stored as (in, out).
pub fn fully_connected(input: &[f32], spec: &LayerSpec, weights: &LayerWeights) -> Result<Vec<f32>> {
    if spec.kind != LayerKind::FullyConnected {
        return Err(TensorError::InvalidSpec(format!("{:?} is not fully connected", spec.kind)));
    }
    weights.check(spec)?;
    if input.len() != spec.in_channels {
        return Err(TensorError::Shape(format!(
            "fully connected layer expects {} inputs, got {}",
            spec.in_channels,
            input.len()
        )));
    }
    let n_out = spec.out_channels;
    let mut out = weights.bias.clone();
    for (i, &x) in input.iter().enumerate() {
        let w = &weights.kernel[i * n_out..(i + 1) * n_out];
        for (o, &wv) in out.iter_mut().zip(w) {
            *o += x * wv;
        }
    }
    relu_in_place(&mut out, spec.activation);
    Ok(out)
}

/// Applies any layer to a whole tensor. Pooling to a vector and FC layers
/// return a 1 x 1 x C tensor.
pub fn apply_layer(spec: &LayerSpec, weights: &LayerWeights, input: &Tensor) -> Result<Tensor> {
    match spec.kind {
        LayerKind::Conv | LayerKind::PointwiseConv => conv2d(input, spec, weights),
        LayerKind::DepthwiseConv => depthwise_conv2d(input, spec, weights),
        LayerKind::MaxPool => maxpool2d(input),
        LayerKind::GlobalAvgPool => {
            if input.channels() != spec.in_channels {
                return Err(TensorError::Shape(format!(
                    "global pool expects {} channels, got {}",
                    spec.in_channels,
                    input.channels()
                )));
            }
            let v = global_avg_pool(input);
            Tensor::new(1, 1, v.len(), v)
        }
        LayerKind::FullyConnected => {
            let v = fully_connected(input.data(), spec, weights)?;
            Tensor::new(1, 1, v.len(), v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_oracle(input: &Tensor, spec: &LayerSpec, w: &LayerWeights) -> Vec<f64> {
        // Explicit six-deep loop with signed index arithmetic.
        let (kh, kw) = spec.kernel;
        let (s, p) = (spec.stride as i64, spec.padding as i64);
        let (h, wd, cin, cout) = (input.height() as i64, input.width() as i64, spec.in_channels, spec.out_channels);
        let ho = (h + 2 * p - kh as i64) / s + 1;
        let wo = (wd + 2 * p - kw as i64) / s + 1;
        let mut out = Vec::new();
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = 0.0f64;
                    for ky in 0..kh as i64 {
                        for kx in 0..kw as i64 {
                            for ci in 0..cin {
                                let iy = oy * s - p + ky;
                                let ix = ox * s - p + kx;
                                if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                    continue;
                                }
                                let wi = ((ky as usize * kw + kx as usize) * cin + ci) * cout + co;
                                acc += input.get(iy as usize, ix as usize, ci) as f64 * w.kernel[wi] as f64;
                            }
                        }
                    }
                    acc += w.bias[co] as f64;
                    if spec.activation == Activation::ReLU && acc < 0.0 {
                        acc = 0.0;
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    fn assert_close(got: &[f32], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
            let tol = 1e-6 * w.abs().max(1.0);
            assert!((g as f64 - w).abs() <= tol, "element {i}: {g} vs {w}");
        }
    }

    #[test]
    fn conv_zero_input_gives_zero() {
        let spec = LayerSpec { activation: Activation::None, ..LayerSpec::conv3x3(1, 1, 1) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = LayerWeights::random(&spec, &mut rng);
        w.bias = vec![0.0];
        let out = conv2d(&Tensor::zeros(5, 5, 1), &spec, &w).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (5, 5, 1));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = LayerSpec {
            kind: LayerKind::Conv,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels: 1,
            out_channels: 1,
            activation: Activation::None,
        };
        let w = LayerWeights { kernel: vec![1.0], bias: vec![0.0] };
        let x = Tensor::random(4, 4, 1, 3);
        assert_eq!(conv2d(&x, &spec, &w).unwrap(), x);
    }

    #[test]
    fn conv_matches_oracle_8x8x3() {
        let spec = LayerSpec::conv3x3(3, 4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = LayerWeights::random(&spec, &mut rng);
        let x = Tensor::random(8, 8, 3, 11);
        let out = conv2d(&x, &spec, &w).unwrap();
        assert_close(out.data(), &conv_oracle(&x, &spec, &w));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let spec = LayerSpec::conv3x3(3, 4, 1);
        let w = LayerWeights::zeros(&spec);
        assert!(matches!(conv2d(&Tensor::zeros(4, 4, 2), &spec, &w), Err(TensorError::Shape(_))));
        let short = LayerWeights { kernel: vec![0.0; 5], bias: vec![0.0; 4] };
        assert!(conv2d(&Tensor::zeros(4, 4, 3), &spec, &short).is_err());
    }

    #[test]
    fn depthwise_center_tap_is_identity() {
        let spec = LayerSpec { activation: Activation::None, ..LayerSpec::depthwise3x3(2, 1) };
        let mut kernel = vec![0.0; 9 * 2];
        kernel[4 * 2] = 1.0;
        kernel[4 * 2 + 1] = 1.0;
        let w = LayerWeights { kernel, bias: vec![0.0, 0.0] };
        let x = Tensor::random(6, 6, 2, 5);
        assert_eq!(depthwise_conv2d(&x, &spec, &w).unwrap(), x);
    }

    #[test]
    fn depthwise_zero_input() {
        let spec = LayerSpec { activation: Activation::None, ..LayerSpec::depthwise3x3(3, 2) };
        let mut w = LayerWeights::random(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        w.bias = vec![0.0; 3];
        let out = depthwise_conv2d(&Tensor::zeros(6, 6, 3), &spec, &w).unwrap();
        assert_eq!((out.height(), out.width()), (3, 3));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_single_window() {
        let x = Tensor::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn maxpool_constant_field() {
        let out = maxpool2d(&Tensor::filled(6, 4, 2, 1.5)).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (3, 2, 2));
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_rejects_odd() {
        assert!(matches!(maxpool2d(&Tensor::zeros(3, 4, 1)), Err(TensorError::OddSpatial { .. })));
    }

    #[test]
    fn fc_zero_input_and_identity() {
        let spec = LayerSpec::fully_connected(3, 3, Activation::None);
        let mut w = LayerWeights::zeros(&spec);
        w.bias = vec![0.1, -0.2, 0.3];
        assert_eq!(fully_connected(&[0.0; 3], &spec, &w).unwrap(), w.bias);
        let mut id = LayerWeights::zeros(&spec);
        for i in 0..3 {
            id.kernel[i * 3 + i] = 1.0;
        }
        assert_eq!(fully_connected(&[1.0, -2.0, 3.5], &spec, &id).unwrap(), vec![1.0, -2.0, 3.5]);
        assert!(fully_connected(&[1.0; 4], &spec, &id).is_err());
    }

    #[test]
    fn band_missing_row_is_reported() {
        let spec = LayerSpec::conv3x3(1, 1, 1);
        let w = LayerWeights::zeros(&spec);
        let rows = Tensor::zeros(2, 4, 1);
        let band = RowBand { rows: &rows, first_row: 3, full_height: 8 };
        let err = conv2d_rows(&spec, &w, &band, 3..5).unwrap_err();
        assert!(matches!(err, TensorError::MissingRow { row: 2, start: 3, end: 5 }));
    }

    #[test]
    fn receptive_rows_stride_two() {
        let spec = LayerSpec::depthwise3x3(1, 2);
        assert_eq!(spec.input_rows_for(5..6, 224), 9..12);
        assert_eq!(LayerSpec::conv3x3(1, 1, 1).input_rows_for(0..1, 224), 0..2);
        assert_eq!(LayerSpec::pointwise(1, 1).input_rows_for(3..9, 20), 3..9);
    }
}
