//! Per-sequence tracking loop: template caching, search-region cropping,
//! Hann-window penalty and frame-by-frame prediction.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::encoder::{extract_template, forward_search, Meter};
use crate::error::{Error, Result};
use crate::head::{decode_box, head_forward, BBox};
use crate::tensor::Tensor;
use crate::weights::{tensor_digest, WeightStore};

/// Template crop side relative to the target's geometric-mean size.
pub const TEMPLATE_FACTOR: f64 = 2.0;
/// Search crop side relative to the target's geometric-mean size.
pub const SEARCH_FACTOR: f64 = 4.0;

/// Box in absolute pixel units, top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Rect { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Area of overlap with the `width × height` frame.
    pub fn overlap_with_frame(&self, width: usize, height: usize) -> f64 {
        let ix = (self.x + self.w).min(width as f64) - self.x.max(0.0);
        let iy = (self.y + self.h).min(height as f64) - self.y.max(0.0);
        ix.max(0.0) * iy.max(0.0)
    }
}

/// Where a square crop came from, for mapping predictions back to the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    /// Crop center in frame pixels.
    pub center: (f64, f64),
    /// Crop side in frame pixels.
    pub side: f64,
    /// Model-input pixels per frame pixel.
    pub scale: f64,
    /// Whether the crop extends past the frame border.
    pub padded: bool,
}

impl CropSpec {
    pub fn top_left(&self) -> (f64, f64) {
        (self.center.0 - 0.5 * self.side, self.center.1 - 0.5 * self.side)
    }

    /// Maps a box normalized to the crop back to frame pixels.
    pub fn to_frame(&self, b: &BBox) -> Rect {
        let (x0, y0) = self.top_left();
        Rect::from_center(
            x0 + b.cx * self.side,
            y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
        )
    }
}

fn frame_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::Input(format!("expected a non-empty 3×H×W frame, got {s:?}"))),
    }
}

/// Square crop of side `factor·√(w·h)` centered on `rect`, resized to
/// `out_size` by bilinear sampling at half-pixel centers. Pixels outside the
/// frame read as the frame's per-channel mean.
pub fn make_crop(image: &Tensor, rect: &Rect, factor: f64, out_size: usize) -> Result<(Tensor, CropSpec)> {
    let (h, w) = frame_dims(image)?;
    if !(factor > 0.0) || !(rect.w > 0.0 && rect.h > 0.0) || out_size == 0 {
        return Err(Error::Input(format!(
            "crop needs a positive factor, box area and output size (factor {factor}, box {rect:?}, size {out_size})"
        )));
    }
    let side = factor * (rect.w * rect.h).sqrt();
    let center = rect.center();
    let (x0, y0) = (center.0 - 0.5 * side, center.1 - 0.5 * side);
    let step = side / out_size as f64;
    let plane = h * w;
    let src = image.data();
    let means: Vec<f64> = (0..3)
        .map(|c| src[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect();
    // Source pixel index and weight pairs for each output row/column.
    let taps = |origin: f64| -> Vec<(isize, f64)> {
        (0..out_size)
            .map(|i| {
                let p = origin + (i as f64 + 0.5) * step - 0.5;
                let f = p.floor();
                (f as isize, p - f)
            })
            .collect()
    };
    let (xs, ys) = (taps(x0), taps(y0));
    let mut out = Vec::with_capacity(3 * out_size * out_size);
    for (c, &mean) in means.iter().enumerate() {
        let px = |y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                mean
            } else {
                src[c * plane + y as usize * w + x as usize] as f64
            }
        };
        for &(iy, fy) in &ys {
            for &(ix, fx) in &xs {
                let top = px(iy, ix) * (1.0 - fx) + px(iy, ix + 1) * fx;
                let bottom = px(iy + 1, ix) * (1.0 - fx) + px(iy + 1, ix + 1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    let padded = x0 < 0.0 || y0 < 0.0 || x0 + side > w as f64 || y0 + side > h as f64;
    Ok((
        Tensor::new([3, out_size, out_size], out)?,
        CropSpec {
            center,
            side,
            scale: out_size as f64 / side,
            padded,
        },
    ))
}

/// Outer product of the length-`S` Hann window `0.5·(1 − cos(2πi/(S−1)))`.
pub fn hanning2d(size: usize) -> Tensor {
    let w: Vec<f64> = if size <= 1 {
        vec![1.0; size]
    } else {
        (0..size)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (size - 1) as f64).cos()))
            .collect()
    };
    Tensor::from_fn([size, size], |i| (w[i / size] * w[i % size]) as f32)
}

/// Last-layer template tokens, extracted once per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCache {
    pub features: Tensor,
    /// Digest of the model configuration and weights that produced it.
    pub config_hash: [u8; 32],
}

impl TemplateCache {
    pub fn digest(&self) -> [u8; 32] {
        tensor_digest(&self.features)
    }
}

fn model_hash(weights: &WeightStore) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(weights.config().to_kv_string().as_bytes());
    h.update(weights.digest());
    h.finalize().into()
}

/// How the template features are obtained on each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemplateMode {
    /// Extract once at initialization and reuse.
    #[default]
    Cached,
    /// Re-run template extraction every frame; a reference for the cache.
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameResult {
    pub rect: Rect,
    /// Raw center score of the chosen cell.
    pub score: f32,
    /// `(row, col)` of the chosen cell.
    pub cell: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct TrackState<'w> {
    weights: &'w WeightStore,
    cache: TemplateCache,
    prev_box: Rect,
    frame_index: usize,
    frame_size: (usize, usize),
    penalty: Tensor,
    mode: TemplateMode,
    template_crop: Tensor,
}

/// Initializes tracking on the first frame with a cached template.
pub fn init_track<'w>(first_frame: &Tensor, gt: Rect, weights: &'w WeightStore) -> Result<TrackState<'w>> {
    init_track_with(first_frame, gt, weights, TemplateMode::Cached)
}

pub fn init_track_with<'w>(
    first_frame: &Tensor,
    gt: Rect,
    weights: &'w WeightStore,
    mode: TemplateMode,
) -> Result<TrackState<'w>> {
    let (h, w) = frame_dims(first_frame)?;
    let (cx, cy) = gt.center();
    if !(gt.w > 0.0 && gt.h > 0.0) || !(0.0..=w as f64).contains(&cx) || !(0.0..=h as f64).contains(&cy) {
        return Err(Error::Input(format!("initial box {gt:?} is degenerate or outside the {w}×{h} frame")));
    }
    let config = weights.config();
    let (tz, _) = config.template_size;
    if config.template_size.0 != config.template_size.1 {
        return Err(Error::Config("square template crops need a square template size".into()));
    }
    let (template_crop, _) = make_crop(first_frame, &gt, TEMPLATE_FACTOR, tz)?;
    let features = extract_template(&template_crop, weights, &mut Meter::off())?;
    Ok(TrackState {
        weights,
        cache: TemplateCache {
            features,
            config_hash: model_hash(weights),
        },
        prev_box: gt,
        frame_index: 0,
        frame_size: (h, w),
        penalty: hanning2d(config.score_size()),
        mode,
        template_crop,
    })
}

impl<'w> TrackState<'w> {
    pub fn cache(&self) -> &TemplateCache {
        &self.cache
    }

    pub fn prev_box(&self) -> Rect {
        self.prev_box
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn weights(&self) -> &'w WeightStore {
        self.weights
    }

    pub fn track_frame(&mut self, frame: &Tensor) -> Result<FrameResult> {
        self.track_frame_metered(frame, &mut Meter::off())
    }

    /// Predicts the box on the next frame, recording work in `meter`.
    pub fn track_frame_metered(&mut self, frame: &Tensor, meter: &mut Meter) -> Result<FrameResult> {
        let dims = frame_dims(frame)?;
        if dims != self.frame_size {
            return Err(Error::Input(format!(
                "frame is {}×{}, sequence was initialized at {}×{}",
                dims.1, dims.0, self.frame_size.1, self.frame_size.0
            )));
        }
        if self.cache.config_hash != model_hash(self.weights) {
            return Err(Error::Config("template cache was built for a different model".into()));
        }
        let config = self.weights.config();
        let (search, crop) = make_crop(frame, &self.prev_box, SEARCH_FACTOR, config.search_size.0)?;
        let recomputed;
        let template = match self.mode {
            TemplateMode::Cached => &self.cache.features,
            TemplateMode::Recompute => {
                recomputed = extract_template(&self.template_crop, self.weights, meter)?;
                &recomputed
            }
        };
        let tokens = forward_search(&search, template, self.weights, meter)?;
        let maps = head_forward(&tokens, self.weights, meter)?;
        let decoded = decode_box(&maps, Some(&self.penalty))?;
        let rect = clip_to_frame(crop.to_frame(&decoded.bbox), self.frame_size);
        self.prev_box = rect;
        self.frame_index += 1;
        Ok(FrameResult {
            rect,
            score: decoded.score,
            cell: decoded.cell,
        })
    }
}

/// Intersects the box with the frame. A side that would fall below one
/// pixel becomes a one-pixel span around the clamped center.
fn clip_to_frame(r: Rect, (h, w): (usize, usize)) -> Rect {
    let clip = |lo: f64, len: f64, extent: f64| -> (f64, f64) {
        let (a, b) = (lo.max(0.0), (lo + len).min(extent));
        if b - a >= 1.0 {
            return (a, b - a);
        }
        let c = (lo + 0.5 * len).clamp(0.5, extent - 0.5);
        (c - 0.5, 1.0)
    };
    let (x, bw) = clip(r.x, r.w, w as f64);
    let (y, bh) = clip(r.y, r.h, h as f64);
    Rect::new(x, y, bw, bh)
}

/// One line of tracker output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame_index: usize,
    pub rect: Rect,
    pub score: f32,
}

/// Initializes on `frames[0]` and tracks the rest. The first record is the
/// initial box with score 1.
pub fn track_frames(frames: &[Tensor], gt: Rect, weights: &WeightStore) -> Result<Vec<TrackRecord>> {
    let first = frames.first().ok_or_else(|| Error::Input("empty sequence".into()))?;
    let mut state = init_track(first, gt, weights)?;
    let mut out = vec![TrackRecord {
        frame_index: 0,
        rect: gt,
        score: 1.0,
    }];
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let r = state.track_frame(frame)?;
        out.push(TrackRecord {
            frame_index: i,
            rect: r.rect,
            score: r.score,
        });
    }
    Ok(out)
}

/// `frame_index,x,y,w,h,score`, one line per record.
pub fn format_results(records: &[TrackRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4},{:.6}",
            r.frame_index, r.rect.x, r.rect.y, r.rect.w, r.rect.h, r.score
        );
    }
    s
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "ppm", "pgm", "bmp"];

/// Image files in `dir` with numeric stems, in numeric order.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(n) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) {
            frames.push((n, path));
        }
    }
    if frames.is_empty() {
        return Err(Error::Input(format!("no numbered image files in {}", dir.display())));
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

/// Loads an image as a `3×H×W` tensor with values in `[0, 1]`.
pub fn load_frame(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    }))
}

/// Writes a `3×H×W` tensor with values in `[0, 1]` as an 8-bit RGB image.
pub fn save_frame(path: impl AsRef<Path>, frame: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = frame_dims(frame)?;
    let d = frame.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Parses `x,y,w,h` (commas, tabs or spaces) from the first non-empty line.
pub fn parse_gt(text: &str) -> Result<Rect> {
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or_else(|| Error::Input("ground-truth file is empty".into()))?;
    let vals: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Input(format!("bad ground-truth value {s:?}"))))
        .collect::<Result<_>>()?;
    match vals[..] {
        [x, y, w, h] if w > 0.0 && h > 0.0 => Ok(Rect::new(x, y, w, h)),
        _ => Err(Error::Input(format!("ground truth must be x,y,w,h with positive size, got {line:?}"))),
    }
}

pub fn read_gt(path: impl AsRef<Path>) -> Result<Rect> {
    let path = path.as_ref();
    parse_gt(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_geometry_from_box_size() {
        let img = Tensor::full([3, 100, 100], 0.5);
        let rect = Rect::from_center(50.0, 50.0, 16.0, 16.0);
        let (_, spec) = make_crop(&img, &rect, 4.0, 32).unwrap();
        assert_eq!(spec.side, 64.0);
        assert_eq!(spec.top_left(), (18.0, 18.0));
        assert!(!spec.padded);
        let (_, spec) = make_crop(&img, &rect, 2.0, 32).unwrap();
        assert_eq!(spec.side, 32.0);
    }

    #[test]
    fn uniform_image_gives_uniform_crop_even_when_padded() {
        let img = Tensor::full([3, 40, 60], 0.3);
        let (crop, spec) = make_crop(&img, &Rect::new(50.0, 30.0, 20.0, 20.0), 4.0, 16).unwrap();
        assert!(spec.padded);
        assert!(crop.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn identity_crop_reproduces_pixels() {
        let img = Tensor::from_fn([3, 8, 8], |i| (i % 17) as f32 / 17.0);
        let (crop, _) = make_crop(&img, &Rect::new(0.0, 0.0, 8.0, 8.0), 1.0, 8).unwrap();
        assert!(crop.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn crop_rejects_bad_inputs() {
        let img = Tensor::full([3, 10, 10], 0.0);
        assert!(make_crop(&img, &Rect::new(1.0, 1.0, 0.0, 3.0), 2.0, 8).is_err());
        assert!(make_crop(&img, &Rect::new(1.0, 1.0, 3.0, 3.0), 0.0, 8).is_err());
        assert!(make_crop(&Tensor::full([1, 10, 10], 0.0), &Rect::new(1.0, 1.0, 3.0, 3.0), 2.0, 8).is_err());
    }

    #[test]
    fn hann_window_cases() {
        assert_eq!(hanning2d(1).data(), &[1.0]);
        let h3 = hanning2d(3);
        assert_eq!(h3.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let h = hanning2d(16);
        for (r, c) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
            assert_eq!(h.get(&[r, c]), 0.0);
        }
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(h.get(&[r, c]), h.get(&[15 - r, c]));
                assert_eq!(h.get(&[r, c]), h.get(&[r, 15 - c]));
            }
        }
    }

    #[test]
    fn gt_parsing() {
        assert_eq!(parse_gt("10,20,30,40\n").unwrap(), Rect::new(10.0, 20.0, 30.0, 40.0));
        assert_eq!(parse_gt("\n1.5\t2 3 4").unwrap(), Rect::new(1.5, 2.0, 3.0, 4.0));
        assert!(parse_gt("1,2,3").is_err());
        assert!(parse_gt("1,2,0,4").is_err());
        assert!(parse_gt("").is_err());
    }

    #[test]
    fn clipping_keeps_box_on_frame() {
        let r = clip_to_frame(Rect::from_center(-30.0, 500.0, 0.1, 900.0), (100, 200));
        assert_eq!((r.x, r.y, r.w, r.h), (0.0, 50.0, 1.0, 50.0));
        let r = clip_to_frame(Rect::new(150.0, 90.0, 80.0, 30.0), (100, 200));
        assert_eq!((r.x, r.y, r.w, r.h), (150.0, 90.0, 50.0, 10.0));
        let inside = Rect::new(10.0, 20.0, 30.0, 40.0);
        assert_eq!(clip_to_frame(inside, (100, 200)), inside);
        let r = clip_to_frame(Rect::new(300.0, 10.0, 5.0, 5.0), (100, 200));
        assert_eq!((r.x, r.w), (199.0, 1.0));
    }
}
