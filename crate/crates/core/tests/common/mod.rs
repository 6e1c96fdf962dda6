//! Shared oracles and generators for the integration tests.
#![allow(dead_code)]

use halp::planner::{PartitionPlan, RowRange, Scheme};
use halp::tensor::{Activation, LayerSpec, LayerWeights, Tensor};
use halp::zoo::ModelSpec;

/// Padded read: zero outside the map.
pub fn at(x: &Tensor, y: isize, xx: isize, c: usize) -> f64 {
    if y < 0 || xx < 0 || y as usize >= x.height() || xx as usize >= x.width() {
        0.0
    } else {
        x.get(y as usize, xx as usize, c) as f64
    }
}

pub fn relu(v: f64, act: Activation) -> f64 {
    if act == Activation::ReLU { v.max(0.0) } else { v }
}

pub fn oracle_conv(x: &Tensor, spec: &LayerSpec, w: &LayerWeights) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let ho = (x.height() + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (x.width() + 2 * spec.padding - kw) / spec.stride + 1;
    let (ci_n, co_n) = (spec.in_channels, spec.out_channels);
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..co_n {
                let mut acc = w.bias[co] as f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        for ci in 0..ci_n {
                            let v = at(x, oy as isize * s + ky as isize - p, ox as isize * s + kx as isize - p, ci);
                            acc += v * w.kernel[((ky * kw + kx) * ci_n + ci) * co_n + co] as f64;
                        }
                    }
                }
                out.push(relu(acc, spec.activation));
            }
        }
    }
    out
}

pub fn oracle_depthwise(x: &Tensor, spec: &LayerSpec, w: &LayerWeights) -> Vec<f64> {
    let (kh, kw) = spec.kernel;
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    let ho = (x.height() + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (x.width() + 2 * spec.padding - kw) / spec.stride + 1;
    let c_n = spec.in_channels;
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for c in 0..c_n {
                let mut acc = w.bias[c] as f64;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = at(x, oy as isize * s + ky as isize - p, ox as isize * s + kx as isize - p, c);
                        acc += v * w.kernel[(ky * kw + kx) * c_n + c] as f64;
                    }
                }
                out.push(relu(acc, spec.activation));
            }
        }
    }
    out
}

pub fn oracle_maxpool(x: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for oy in 0..x.height() / 2 {
        for ox in 0..x.width() / 2 {
            for c in 0..x.channels() {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.get(2 * oy + dy, 2 * ox + dx, c) as f64);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Whether every element agrees to 1e-4 relative (absolute below 1).
pub fn close(got: &[f32], want: &[f64]) -> bool {
    got.len() == want.len() && got.iter().zip(want).all(|(&g, &w)| (g as f64 - w).abs() <= 1e-4 * w.abs().max(1.0))
}

pub fn assert_close(got: &[f32], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let tol = 1e-4 * w.abs().max(1.0);
        assert!((g as f64 - w).abs() <= tol, "element {i}: got {g}, want {w}");
    }
}

/// Contiguous three-way split of every row-local layer: ED1 on top, the
/// host in the middle, ED2 below, with cut points taken modulo the height.
pub fn split_plan(model: &ModelSpec, cuts: &[(usize, usize)]) -> PartitionPlan {
    let shapes = model.shapes();
    let outs = (0..model.row_local_prefix())
        .map(|l| {
            let h = shapes[l + 1].0;
            let (a, b) = cuts[l % cuts.len()];
            let (a, b) = ((a % (h + 1)).min(b % (h + 1)), (a % (h + 1)).max(b % (h + 1)));
            [RowRange::new(a, b), RowRange::new(0, a), RowRange::new(b, h)]
        })
        .collect();
    PartitionPlan::from_outputs(model, Scheme::Custom, outs)
}
