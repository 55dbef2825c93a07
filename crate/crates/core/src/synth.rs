//! Synthetic sequences and planted weights for tests, demos and benchmarks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::runtime::{save_frame, Rect};
use crate::tensor::Tensor;
use crate::weights::{WeightStore, HEAD_BRANCHES, HEAD_STAGES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Static,
    /// Constant velocity in pixels per frame.
    Linear { dx: f64, dy: f64 },
    /// Circle of `radius` pixels, one revolution every `period` frames.
    Orbit { radius: f64, period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Target width and height in pixels.
    pub target: (f64, f64),
    /// Target center on the first frame.
    pub start: (f64, f64),
    pub motion: Motion,
    pub seed: u64,
}

impl SyntheticSpec {
    /// A square target resting at the frame center.
    pub fn stationary(width: usize, height: usize, frames: usize, side: f64, seed: u64) -> Self {
        SyntheticSpec {
            width,
            height,
            frames,
            target: (side, side),
            start: (width as f64 / 2.0, height as f64 / 2.0),
            motion: Motion::Static,
            seed,
        }
    }

    /// A square target orbiting the frame center.
    pub fn moving(width: usize, height: usize, frames: usize, side: f64, seed: u64) -> Self {
        let room = (width.min(height) as f64 - side) / 2.0;
        SyntheticSpec {
            motion: Motion::Orbit {
                radius: (room * 0.5).max(0.0),
                period: 40.0,
            },
            ..Self::stationary(width, height, frames, side, seed)
        }
    }

    pub fn center_at(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let (x, y) = self.start;
        match self.motion {
            Motion::Static => (x, y),
            Motion::Linear { dx, dy } => (x + dx * t, y + dy * t),
            Motion::Orbit { radius, period } => {
                let a = std::f64::consts::TAU * t / period;
                (x + radius * (a.cos() - 1.0), y + radius * a.sin())
            }
        }
    }

    pub fn generate(&self) -> SyntheticSequence {
        let (w, h) = (self.width, self.height);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let freq: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
            (
                rng.random_range(0.02..0.08),
                rng.random_range(0.02..0.08),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        });
        let color: [f32; 3] = [0.95, rng.random_range(0.1..0.3), rng.random_range(0.1..0.3)];
        let background: Vec<f32> = (0..3 * h * w)
            .map(|i| {
                let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
                let (fx, fy, phase) = freq[c];
                (0.45 + 0.2 * ((fx * x as f64 + phase).sin() * (fy * y as f64).cos())) as f32
            })
            .collect();

        let mut frames = Vec::with_capacity(self.frames);
        let mut boxes = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            let (cx, cy) = self.center_at(t);
            let rect = Rect::from_center(cx, cy, self.target.0, self.target.1);
            let mut data = background.clone();
            for v in data.iter_mut() {
                *v = (*v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0);
            }
            paint_target(&mut data, (h, w), &rect, color);
            frames.push(Tensor::new([3, h, w], data).expect("frame buffer matches its shape"));
            boxes.push(rect);
        }
        SyntheticSequence { frames, boxes }
    }
}

/// Solid rectangle with a darker cross so the target has internal structure.
fn paint_target(data: &mut [f32], (h, w): (usize, usize), r: &Rect, color: [f32; 3]) {
    let x0 = r.x.round().max(0.0) as usize;
    let y0 = r.y.round().max(0.0) as usize;
    let x1 = ((r.x + r.w).round().max(0.0) as usize).min(w);
    let y1 = ((r.y + r.h).round().max(0.0) as usize).min(h);
    let (mx, my) = r.center();
    let arm = (r.w.min(r.h) / 8.0).max(0.5);
    for y in y0..y1 {
        for x in x0..x1 {
            let on_cross = (x as f64 + 0.5 - mx).abs() < arm || (y as f64 + 0.5 - my).abs() < arm;
            for (c, &v) in color.iter().enumerate() {
                data[c * h * w + y * w + x] = if on_cross { v * 0.4 } else { v };
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    /// `3 × H × W` frames with values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// Ground-truth box per frame.
    pub boxes: Vec<Rect>,
}

impl SyntheticSequence {
    /// Writes `00000001.png`, … and a `groundtruth.txt` with one
    /// `x,y,w,h` line per frame.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            save_frame(dir.join(format!("{:08}.png", i + 1)), f)?;
        }
        let gt: String = self
            .boxes
            .iter()
            .map(|b| format!("{:.4},{:.4},{:.4},{:.4}\n", b.x, b.y, b.w, b.h))
            .collect();
        let path = dir.join("groundtruth.txt");
        fs::write(&path, gt).map_err(|e| Error::io(&path, e))
    }
}

/// Replaces the last conv of every head branch so the prediction ignores the
/// features: a flat center map (the Hann penalty then selects the cell just
/// above and left of the middle), offsets pinned at the top of their range,
/// and box sides of `size_fraction` of the crop.
///
/// With the tracker's ×4 search crop, `size_fraction = 0.25` reproduces the
/// previous box, so a centered target is held exactly.
pub fn plant_centered_head(weights: &WeightStore, size_fraction: f64) -> Result<WeightStore> {
    if !(size_fraction > 0.0 && size_fraction < 1.0) {
        return Err(Error::Domain(format!("size fraction {size_fraction} must lie in (0, 1)")));
    }
    let last = HEAD_STAGES - 1;
    let size_logit = (size_fraction / (1.0 - size_fraction)).ln() as f32;
    let mut out = weights.clone();
    for (branch, width) in HEAD_BRANCHES {
        let name = format!("head.{branch}.{last}.conv.weight");
        let shape = weights.get(&name)?.shape().to_vec();
        out = out.with_tensor(&name, Tensor::zeros(shape))?;
        let bias = match branch {
            "offset" => 20.0,
            "size" => size_logit,
            _ => 0.0,
        };
        out = out.with_tensor(&format!("head.{branch}.{last}.conv.bias"), Tensor::full([width], bias))?;
    }
    Ok(out)
}

/// Zeroes the query projections so every attention row is uniform.
pub fn plant_uniform_attention(weights: &WeightStore) -> Result<WeightStore> {
    let c = weights.config().embed_dim;
    let mut out = weights.clone();
    for i in 0..weights.config().num_layers() {
        out = out.with_tensor(&format!("blocks.{i}.attn.q.weight"), Tensor::zeros([c, c]))?;
        out = out.with_tensor(&format!("blocks.{i}.attn.q.bias"), Tensor::zeros([c]))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::runtime::track_frames;

    #[test]
    fn generation_is_seeded() {
        let spec = SyntheticSpec::moving(64, 48, 3, 12.0, 5);
        let (a, b) = (spec.generate(), spec.generate());
        assert_eq!(a.frames, b.frames);
        let other = SyntheticSpec { seed: 6, ..spec }.generate();
        assert_ne!(a.frames[0], other.frames[0]);
    }

    #[test]
    fn frames_are_in_unit_range_and_target_is_painted() {
        let seq = SyntheticSpec::stationary(40, 40, 1, 10.0, 0).generate();
        let f = &seq.frames[0];
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // red channel just inside the box corner
        assert!((f.get(&[0, 16, 16]) - 0.95).abs() < 1e-6);
    }

    #[test]
    fn orbit_starts_at_start() {
        let spec = SyntheticSpec::moving(100, 100, 10, 10.0, 0);
        assert_eq!(spec.center_at(0), spec.start);
        assert_ne!(spec.center_at(5), spec.start);
    }

    #[test]
    fn planted_head_holds_a_static_target() {
        let w = WeightStore::generate(&ModelConfig::toy(1, 1), 3).unwrap();
        let w = plant_centered_head(&w, 0.25).unwrap();
        let seq = SyntheticSpec::stationary(96, 96, 5, 16.0, 1).generate();
        let out = track_frames(&seq.frames, seq.boxes[0], &w).unwrap();
        for r in &out {
            let (cx, cy) = r.rect.center();
            assert!((cx - 48.0).abs() < 1e-3 && (cy - 48.0).abs() < 1e-3, "{r:?}");
            assert!((r.rect.w - 16.0).abs() < 1e-3);
        }
    }
}
