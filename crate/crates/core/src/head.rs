//! Center head: three convolutional branches over the search token grid,
//! and box decoding from the resulting score maps.

use crate::encoder::{Meter, Op};
use crate::error::{Error, Result};
use crate::tensor::{matmul, MacCounter, Tensor, LAYER_NORM_EPS};
use crate::weights::{ConvStage, WeightStore};

/// Largest `f32` strictly below one.
pub const ONE_BELOW: f32 = 1.0 - f32::EPSILON / 2.0;

/// Head outputs on an `S×S` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    /// `S×S` centerness in (0, 1).
    pub center: Tensor,
    /// `2×S×S` sub-cell offsets (x then y) in [0, 1).
    pub offset: Tensor,
    /// `2×S×S` normalized width then height in (0, 1).
    pub size: Tensor,
}

impl ScoreMaps {
    pub fn new(center: Tensor, offset: Tensor, size: Tensor) -> Result<Self> {
        let s = match center.shape() {
            &[a, b] if a == b && a > 0 => a,
            other => return Err(Error::Dimension(format!("center map must be S×S, got {other:?}"))),
        };
        for (name, t) in [("offset", &offset), ("size", &size)] {
            if t.shape() != [2, s, s] {
                return Err(Error::Dimension(format!(
                    "{name} map must be [2, {s}, {s}], got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(ScoreMaps { center, offset, size })
    }

    pub fn grid(&self) -> usize {
        self.center.shape()[0]
    }
}

/// Axis-aligned box as center and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    /// Raw center score at the chosen cell (before any penalty).
    pub score: f32,
    /// `(row, col)`.
    pub cell: (usize, usize),
}

fn logistic(v: f32, lo: f32) -> f32 {
    let y = 1.0 / (1.0 + (-(v as f64)).exp());
    (y as f32).clamp(lo, ONE_BELOW)
}

/// 3×3 convolution with zero padding 1 over a `cin × (S·S)` feature map.
fn conv3x3(x: &Tensor, side: usize, weight: &Tensor, bias: &Tensor, macs: &mut MacCounter) -> Result<Tensor> {
    let (cin, positions) = x.dims2()?;
    let src = x.data();
    let mut cols = vec![0.0f32; cin * 9 * positions];
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * positions;
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for xx in 0..side {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= side as isize {
                            continue;
                        }
                        cols[row + y * side + xx] = src[ci * positions + sy as usize * side + sx as usize];
                    }
                }
            }
        }
    }
    let cols = Tensor::new([cin * 9, positions], cols)?;
    let out = matmul(weight, &cols, macs)?;
    let (cout, _) = out.dims2()?;
    let b = bias.data();
    let data: Vec<f32> = out
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b[i / positions])
        .collect();
    Tensor::new([cout, positions], data)
}

/// Per-channel normalization over spatial positions followed by ReLU.
fn norm_relu(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (ch, positions) = x.dims2()?;
    let mut out = Vec::with_capacity(ch * positions);
    for c in 0..ch {
        let row = x.row(c);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / positions as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / positions as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let (g, b) = (gamma.data()[c] as f64, beta.data()[c] as f64);
        out.extend(row.iter().map(|&v| (((v as f64 - mean) * inv * g + b).max(0.0)) as f32));
    }
    Tensor::new([ch, positions], out)
}

fn run_branch(x: &Tensor, side: usize, stages: &[ConvStage<'_>], macs: &mut MacCounter) -> Result<Tensor> {
    let mut h = x.clone();
    for stage in stages {
        h = conv3x3(&h, side, stage.weight, stage.bias, macs)?;
        if let Some((g, b)) = stage.norm {
            h = norm_relu(&h, g, b)?;
        }
    }
    Ok(h)
}

/// Reshapes `N_x × C` search tokens to a `C × S × S` map and runs the three
/// branches.
pub fn head_forward(search_tokens: &Tensor, weights: &WeightStore, meter: &mut Meter) -> Result<ScoreMaps> {
    let (n, c) = search_tokens.dims2()?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || n == 0 {
        return Err(Error::Dimension(format!("{n} search tokens do not form a square grid")));
    }
    if c != weights.config().embed_dim {
        return Err(Error::Dimension(format!(
            "search tokens have width {c}, head expects {}",
            weights.config().embed_dim
        )));
    }
    let hw = weights.head()?;
    let feature = search_tokens.transpose()?;
    meter.scoped(Op::Head, |macs| {
        let center = run_branch(&feature, side, &hw.center, macs)?
            .map(|v| logistic(v, f32::MIN_POSITIVE))
            .reshape([side, side])?;
        let offset = run_branch(&feature, side, &hw.offset, macs)?
            .map(|v| logistic(v, 0.0))
            .reshape([2, side, side])?;
        let size = run_branch(&feature, side, &hw.size, macs)?
            .map(|v| logistic(v, f32::MIN_POSITIVE))
            .reshape([2, side, side])?;
        ScoreMaps::new(center, offset, size)
    })
}

/// Normalized box predicted at a given cell.
pub fn decode_at(maps: &ScoreMaps, cell: (usize, usize)) -> BBox {
    let s = maps.grid();
    let (r, c) = cell;
    let ox = maps.offset.get(&[0, r, c]) as f64;
    let oy = maps.offset.get(&[1, r, c]) as f64;
    BBox {
        cx: (c as f64 + ox) / s as f64,
        cy: (r as f64 + oy) / s as f64,
        w: maps.size.get(&[0, r, c]) as f64,
        h: maps.size.get(&[1, r, c]) as f64,
    }
}

/// Picks the cell maximizing `center ⊙ penalty` (ties go to the smallest
/// row-major index) and decodes its box.
pub fn decode_box(maps: &ScoreMaps, penalty: Option<&Tensor>) -> Result<Decoded> {
    let s = maps.grid();
    if let Some(p) = penalty {
        if p.shape() != [s, s] {
            return Err(Error::Dimension(format!(
                "penalty {:?} does not match the {s}×{s} score map",
                p.shape()
            )));
        }
        if p.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Input("penalty entries must be non-negative".into()));
        }
    }
    let center = maps.center.data();
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, &v) in center.iter().enumerate() {
        let weighted = v as f64 * penalty.map_or(1.0, |p| p.data()[i] as f64);
        if weighted > best_score {
            best_score = weighted;
            best = i;
        }
    }
    let cell = (best / s, best % s);
    Ok(Decoded {
        bbox: decode_at(maps, cell),
        score: center[best],
        cell,
    })
}
