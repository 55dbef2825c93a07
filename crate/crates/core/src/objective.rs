//! Training objective: Gaussian-weighted focal loss on the center map plus
//! GIoU and L1 losses on the box decoded at the ground-truth cell, with
//! closed-form gradients with respect to every head output.

use crate::error::{Error, Result};
use crate::head::{decode_at, BBox, ScoreMaps};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    /// Exponent on `(1 - p)` for positives and on `p` for negatives.
    pub focal_alpha: f64,
    /// Exponent on `(1 - y)` that down-weights negatives near the peak.
    pub focal_beta: f64,
    /// Target spread in cells; `None` means `max(S / 16, 1)`.
    pub gaussian_sigma: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            gaussian_sigma: None,
        }
    }
}

impl LossConfig {
    pub fn sigma_for(&self, grid: usize) -> f64 {
        self.gaussian_sigma.unwrap_or_else(|| (grid as f64 / 16.0).max(1.0))
    }

    fn validate(&self) -> Result<()> {
        let all = [self.lambda_giou, self.lambda_l1, self.focal_alpha, self.focal_beta];
        if all.iter().any(|v| !(*v >= 0.0)) || self.gaussian_sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Input(format!("invalid loss configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub focal: f64,
    /// `1 - GIoU`.
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(focal: f64, giou: f64, l1: f64, config: &LossConfig) -> Self {
        LossBreakdown {
            focal,
            giou,
            l1,
            total: focal + config.lambda_giou * giou + config.lambda_l1 * l1,
        }
    }
}

/// Gradients of the total loss, shaped like the corresponding [`ScoreMaps`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub center: Tensor,
    pub offset: Tensor,
    pub size: Tensor,
}

/// `y[r, c] = exp(-((r - row)² + (c - col)²) / (2σ²))`.
pub fn gaussian_target(cell: (usize, usize), grid: usize, sigma: f64) -> Result<Tensor> {
    let (row, col) = cell;
    if row >= grid || col >= grid {
        return Err(Error::Range(format!("cell {cell:?} outside a {grid}×{grid} grid")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input(format!("sigma must be positive, got {sigma}")));
    }
    Ok(Tensor::from_fn([grid, grid], |i| {
        let dr = (i / grid) as f64 - row as f64;
        let dc = (i % grid) as f64 - col as f64;
        (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp() as f32
    }))
}

/// Per-cell focal term `t` and `dt/dp` (before the `-1/N_pos` factor).
fn focal_term(p_raw: f64, y: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let clamped = p != p_raw;
    if y == 1.0 {
        let t = (1.0 - p).powf(alpha) * p.ln();
        let dt = if clamped || alpha == 0.0 {
            if clamped { 0.0 } else { 1.0 / p }
        } else {
            -alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() + (1.0 - p).powf(alpha) / p
        };
        (t, dt)
    } else {
        let wy = (1.0 - y).powf(beta);
        let t = wy * p.powf(alpha) * (1.0 - p).ln();
        let dt = if clamped {
            0.0
        } else {
            let dpow = if alpha == 0.0 { 0.0 } else { alpha * p.powf(alpha - 1.0) };
            wy * (dpow * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
        };
        (t, dt)
    }
}

fn check_pair(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

fn positives(target: &Tensor) -> f64 {
    (target.data().iter().filter(|&&y| y == 1.0).count() as f64).max(1.0)
}

/// Weighted focal loss, normalized by the number of cells with `y = 1`.
pub fn focal_loss(pred: &Tensor, target: &Tensor, alpha: f64, beta: f64) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| focal_term(p as f64, y as f64, alpha, beta).0)
        .sum();
    Ok(-sum / positives(target))
}

fn check_box(b: &BBox) -> Result<()> {
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::Domain(format!("box {b:?} has no area")));
    }
    Ok(())
}

/// GIoU of `a` against `b` plus its gradient with respect to `a`'s
/// `[x1, y1, x2, y2]`.
fn giou_with_grad(a: &BBox, b: &BBox) -> Result<(f64, [f64; 4])> {
    check_box(a)?;
    check_box(b)?;
    let [x1, y1, x2, y2] = a.xyxy();
    let [gx1, gy1, gx2, gy2] = b.xyxy();
    let iw = (x2.min(gx2) - x1.max(gx1)).max(0.0);
    let ih = (y2.min(gy2) - y1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let (aw, ah) = (x2 - x1, y2 - y1);
    let union = aw * ah + b.area() - inter;
    let cw = x2.max(gx2) - x1.min(gx1);
    let ch = y2.max(gy2) - y1.min(gy1);
    let hull = cw * ch;
    let giou = inter / union - (hull - union) / hull;

    let overlap = iw > 0.0 && ih > 0.0;
    let d_inter = if overlap {
        [
            if x1 > gx1 { -ih } else { 0.0 },
            if y1 > gy1 { -iw } else { 0.0 },
            if x2 < gx2 { ih } else { 0.0 },
            if y2 < gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_area = [-ah, -aw, ah, aw];
    let d_hull = [
        if x1 < gx1 { -ch } else { 0.0 },
        if y1 < gy1 { -cw } else { 0.0 },
        if x2 > gx2 { ch } else { 0.0 },
        if y2 > gy2 { cw } else { 0.0 },
    ];
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d_union = d_area[i] - d_inter[i];
        grad[i] = d_inter[i] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[i] / (hull * hull);
    }
    Ok((giou, grad))
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    giou_with_grad(a, b).map(|(g, _)| g)
}

/// Mean absolute difference of the `xyxy` corners.
pub fn l1_box(a: &BBox, b: &BBox) -> f64 {
    a.xyxy()
        .iter()
        .zip(b.xyxy())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 4.0
}

/// Cell containing the box center, clamped onto the grid.
pub fn gt_cell(gt: &BBox, grid: usize) -> (usize, usize) {
    let idx = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    (idx(gt.cy), idx(gt.cx))
}

/// Focal + `λ_G`·(1 − GIoU) + `λ_l`·L1, with box terms taken at the
/// ground-truth center cell.
pub fn total_loss(maps: &ScoreMaps, gt: &BBox, config: &LossConfig) -> Result<LossBreakdown> {
    config.validate()?;
    check_box(gt)?;
    let s = maps.grid();
    let cell = gt_cell(gt, s);
    let target = gaussian_target(cell, s, config.sigma_for(s))?;
    let focal = focal_loss(&maps.center, &target, config.focal_alpha, config.focal_beta)?;
    let pred = decode_at(maps, cell);
    let g = giou(&pred, gt)?;
    Ok(LossBreakdown::compose(focal, 1.0 - g, l1_box(&pred, gt), config))
}

/// Analytic gradient of [`total_loss`]`.total` with respect to every entry
/// of the center, offset and size maps.
pub fn loss_grad(maps: &ScoreMaps, gt: &BBox, config: &LossConfig) -> Result<LossGrad> {
    config.validate()?;
    check_box(gt)?;
    let s = maps.grid();
    let cell = gt_cell(gt, s);
    let target = gaussian_target(cell, s, config.sigma_for(s))?;
    let norm = positives(&target);
    let center: Vec<f32> = maps
        .center
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let (_, dt) = focal_term(p as f64, y as f64, config.focal_alpha, config.focal_beta);
            (-dt / norm) as f32
        })
        .collect();

    let pred = decode_at(maps, cell);
    let (_, dg) = giou_with_grad(&pred, gt)?;
    let corners = pred.xyxy();
    let gt_corners = gt.xyxy();
    let mut d = [0.0f64; 4];
    for i in 0..4 {
        let sign = match corners[i].partial_cmp(&gt_corners[i]) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => -1.0,
            _ => 0.0,
        };
        d[i] = -config.lambda_giou * dg[i] + config.lambda_l1 * sign / 4.0;
    }
    let [dx1, dy1, dx2, dy2] = d;
    let (r, c) = cell;
    let at = |ch: usize| ch * s * s + r * s + c;
    let mut offset = vec![0.0f32; 2 * s * s];
    let mut size = vec![0.0f32; 2 * s * s];
    offset[at(0)] = ((dx1 + dx2) / s as f64) as f32;
    offset[at(1)] = ((dy1 + dy2) / s as f64) as f32;
    size[at(0)] = ((dx2 - dx1) / 2.0) as f32;
    size[at(1)] = ((dy2 - dy1) / 2.0) as f32;
    Ok(LossGrad {
        center: Tensor::new([s, s], center)?,
        offset: Tensor::new([2, s, s], offset)?,
        size: Tensor::new([2, s, s], size)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_peak_symmetry_and_diagonal() {
        let y = gaussian_target((3, 4), 8, 1.0).unwrap();
        assert_eq!(y.get(&[3, 4]), 1.0);
        assert_eq!(y.get(&[1, 4]), y.get(&[5, 4]));
        assert!((y.get(&[4, 5]) as f64 - (-1.0f64).exp()).abs() < 1e-7);
        assert!(gaussian_target((8, 0), 8, 1.0).is_err());
    }

    #[test]
    fn focal_single_positive_closed_form() {
        let s = 4;
        let target = gaussian_target((1, 1), s, 0.1).unwrap();
        let pred = Tensor::from_fn([s, s], |i| if i == 5 { 0.5 } else { 1e-7 });
        let l = focal_loss(&pred, &target, 2.0, 4.0).unwrap();
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-6, "{l}");
    }

    #[test]
    fn focal_vanishes_for_near_perfect_prediction() {
        let target = gaussian_target((2, 2), 5, 1.0).unwrap();
        let pred = Tensor::from_fn([5, 5], |i| if i == 12 { 1.0 - 1e-6 } else { 1e-6 });
        let l = focal_loss(&pred, &target, 2.0, 4.0).unwrap();
        assert!(l >= 0.0 && l < 1e-9, "{l}");
    }

    #[test]
    fn giou_hand_examples() {
        let a = BBox::from_xyxy(0.0, 0.0, 2.0, 2.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let b = BBox::from_xyxy(1.0, 1.0, 3.0, 3.0);
        assert!((giou(&a, &b).unwrap() + 5.0 / 63.0).abs() < 1e-12);
        let far = giou(&BBox::from_xyxy(0.0, 0.0, 1.0, 1.0), &BBox::from_xyxy(99.0, 99.0, 100.0, 100.0)).unwrap();
        assert!((far - (2.0 / 10000.0 - 1.0)).abs() < 1e-12);
        assert!(giou(&BBox::new(0.5, 0.5, 0.0, 0.2), &a).is_err());
    }

    #[test]
    fn composition_uses_lambdas() {
        let c = LossConfig::default();
        let b = LossBreakdown::compose(0.1, 0.2, 0.02, &c);
        assert!((b.total - 0.6).abs() < 1e-12);
        let no_l1 = LossConfig { lambda_l1: 0.0, ..c };
        assert_eq!(LossBreakdown::compose(0.1, 0.2, 0.02, &no_l1).total, 0.1 + 2.0 * 0.2);
    }

    #[test]
    fn gt_cell_clamps() {
        assert_eq!(gt_cell(&BBox::new(0.999, 0.0, 0.1, 0.1), 8), (0, 7));
        assert_eq!(gt_cell(&BBox::new(1.0, 1.0, 0.1, 0.1), 8), (7, 7));
    }

    #[test]
    fn offset_gradient_is_zero_off_the_assigned_cell() {
        let s = 4;
        let maps = ScoreMaps::new(
            Tensor::full([s, s], 0.3),
            Tensor::full([2, s, s], 0.4),
            Tensor::full([2, s, s], 0.3),
        )
        .unwrap();
        let gt = BBox::new(0.66, 0.31, 0.21, 0.27);
        let g = loss_grad(&maps, &gt, &LossConfig::default()).unwrap();
        let (r, c) = gt_cell(&gt, s);
        for ch in 0..2 {
            for i in 0..s {
                for j in 0..s {
                    if (i, j) != (r, c) {
                        assert_eq!(g.offset.get(&[ch, i, j]), 0.0);
                        assert_eq!(g.size.get(&[ch, i, j]), 0.0);
                    }
                }
            }
        }
        assert_ne!(g.offset.get(&[0, r, c]), 0.0);
    }

    #[test]
    fn far_negatives_have_vanishing_center_gradient() {
        let s = 8;
        let maps = ScoreMaps::new(
            Tensor::full([s, s], 1e-6),
            Tensor::full([2, s, s], 0.5),
            Tensor::full([2, s, s], 0.2),
        )
        .unwrap();
        let g = loss_grad(&maps, &BBox::new(0.1, 0.1, 0.1, 0.1), &LossConfig::default()).unwrap();
        assert!(g.center.get(&[7, 7]).abs() < 1e-5);
    }
}
