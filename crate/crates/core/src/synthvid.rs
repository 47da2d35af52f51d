//! Deterministic synthetic video clips: textured shapes moving over a
//! textured background, with occlusion, motion blur and per-frame
//! ground-truth tracks.
//!
//! # Dataset layout
//!
//! A dataset directory holds three kinds of files:
//!
//! | file | contents |
//! |------|----------|
//! | `manifest.txt` | header lines `format clipvid-synth 1`, `height H`, `width W`, `frames T`, `classes C`, `clips N`, then one `clip <id> <file>` line per clip |
//! | `clip_<id>.bin` | `T·H·W·3` little-endian `f32` values, frame-major, then row, column, channel |
//! | `annotations.txt` | one record per track and frame: `clip track class frame x1 y1 x2 y2 visibility speed`; absent boxes are written as `- - - -` |
//!
//! Box corners are quantised to multiples of 1/256, so the text form
//! round-trips exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::matching::{LabeledBox, TrackedBox};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Box corners are multiples of `1 / COORD_QUANTUM`.
pub const COORD_QUANTUM: f64 = 256.0;
/// Below this visible fraction a frame carries no ground-truth box.
pub const MIN_VISIBILITY: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Speed {
    Slow,
    Medium,
    Fast,
}

impl Speed {
    pub const ALL: [Speed; 3] = [Speed::Slow, Speed::Medium, Speed::Fast];

    pub fn as_str(self) -> &'static str {
        match self {
            Speed::Slow => "slow",
            Speed::Medium => "medium",
            Speed::Fast => "fast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }
}

/// Per-frame displacement thresholds (fraction of the frame) between bands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeedBands {
    pub slow_max: f64,
    pub fast_min: f64,
}

impl Default for SpeedBands {
    fn default() -> Self {
        Self {
            slow_max: 0.02,
            fast_min: 0.06,
        }
    }
}

impl SpeedBands {
    pub fn classify(&self, displacement: f64) -> Speed {
        if displacement < self.slow_max {
            Speed::Slow
        } else if displacement <= self.fast_min {
            Speed::Medium
        } else {
            Speed::Fast
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub bands: SpeedBands,
    /// Sampling range of the per-frame speed for each band, slow to fast.
    pub speed_ranges: [(f64, f64); 3],
    /// Object side length range in pixels.
    pub min_size_px: f64,
    pub max_size_px: f64,
    /// Probability that a clip contains an occluder strip.
    pub occlusion_prob: f64,
    /// Blur streak length as a multiple of the per-frame displacement.
    pub blur_gain: f64,
    /// Per-frame exposure is drawn from this range (scales the streak).
    pub exposure: (f64, f64),
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            min_objects: 1,
            max_objects: 4,
            height: 64,
            width: 64,
            frames: 8,
            bands: SpeedBands::default(),
            speed_ranges: [(0.0, 0.015), (0.025, 0.05), (0.07, 0.11)],
            min_size_px: 10.0,
            max_size_px: 20.0,
            occlusion_prob: 0.3,
            blur_gain: 1.5,
            exposure: (0.1, 1.0),
            noise: 0.03,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn to_kv(&self) -> String {
        let r = &self.speed_ranges;
        format!(
            "classes={}\nmin_objects={}\nmax_objects={}\nheight={}\nwidth={}\nframes={}\nslow_max={}\nfast_min={}\n\
             speed_slow={},{}\nspeed_medium={},{}\nspeed_fast={},{}\nmin_size_px={}\nmax_size_px={}\n\
             occlusion_prob={}\nblur_gain={}\nexposure={},{}\nnoise={}\nseed={}\n",
            self.classes,
            self.min_objects,
            self.max_objects,
            self.height,
            self.width,
            self.frames,
            self.bands.slow_max,
            self.bands.fast_min,
            r[0].0,
            r[0].1,
            r[1].0,
            r[1].1,
            r[2].0,
            r[2].1,
            self.min_size_px,
            self.max_size_px,
            self.occlusion_prob,
            self.blur_gain,
            self.exposure.0,
            self.exposure.1,
            self.noise,
            self.seed,
        )
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
            let (a, b) = v
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("`{key}` expects two comma-separated values")))?;
            Ok((num(key, a)?, num(key, b)?))
        }
        match key.trim() {
            "classes" => self.classes = num(key, value)?,
            "min_objects" => self.min_objects = num(key, value)?,
            "max_objects" => self.max_objects = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "slow_max" => self.bands.slow_max = num(key, value)?,
            "fast_min" => self.bands.fast_min = num(key, value)?,
            "speed_slow" => self.speed_ranges[0] = pair(key, value)?,
            "speed_medium" => self.speed_ranges[1] = pair(key, value)?,
            "speed_fast" => self.speed_ranges[2] = pair(key, value)?,
            "min_size_px" => self.min_size_px = num(key, value)?,
            "max_size_px" => self.max_size_px = num(key, value)?,
            "occlusion_prob" => self.occlusion_prob = num(key, value)?,
            "blur_gain" => self.blur_gain = num(key, value)?,
            "exposure" => self.exposure = pair(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown generator key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.classes == 0 || self.classes > Shape::ALL.len() {
            return bad("classes must be in 1..=5");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("objects per clip must satisfy 1 <= min <= max");
        }
        if self.height < 8 || self.width < 8 || self.frames == 0 {
            return bad("frames must be at least 8x8 and clips non-empty");
        }
        if !(self.bands.slow_max >= 0.0 && self.bands.slow_max < self.bands.fast_min) {
            return bad("speed thresholds must satisfy 0 <= slow_max < fast_min");
        }
        for (i, &(lo, hi)) in self.speed_ranges.iter().enumerate() {
            if !(lo >= 0.0 && lo <= hi)
                || self.bands.classify(lo) != Speed::ALL[i]
                || self.bands.classify(hi) != Speed::ALL[i]
            {
                return bad("each speed range must lie inside its band");
            }
        }
        let extent = self.height.min(self.width) as f64;
        if !(self.min_size_px >= 2.0 && self.min_size_px <= self.max_size_px && self.max_size_px < extent) {
            return bad("object size range must lie within the frame");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob)
            || !(self.exposure.0 >= 0.0 && self.exposure.0 <= self.exposure.1)
            || self.blur_gain < 0.0
            || self.noise < 0.0
        {
            return bad("occlusion, exposure, blur and noise must be non-negative ranges");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub class: usize,
    pub boxes: Vec<Option<NormBox>>,
    pub visibility: Vec<f64>,
    pub speed: Speed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    /// One `H·W·3` buffer per frame, values in `[0, 1]`.
    pub frames: Vec<Vec<f32>>,
    pub tracks: Vec<Track>,
}

impl ClipSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_tensor<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = self.frames[i].iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("frame buffer matches extents")
    }

    /// Ground truth present in frame `i`, in track order.
    pub fn targets(&self, i: usize) -> Vec<TrackedBox> {
        self.tracks
            .iter()
            .filter_map(|t| {
                t.boxes[i].map(|bbox| TrackedBox {
                    track: t.id,
                    label: LabeledBox { class: t.class, bbox },
                })
            })
            .collect()
    }

    /// A clip made of the listed frames, in the given order.
    pub fn select_frames(&self, idx: &[usize]) -> ClipSample {
        ClipSample {
            id: self.id,
            height: self.height,
            width: self.width,
            frames: idx.iter().map(|&i| self.frames[i].clone()).collect(),
            tracks: self
                .tracks
                .iter()
                .map(|t| Track {
                    boxes: idx.iter().map(|&i| t.boxes[i]).collect(),
                    visibility: idx.iter().map(|&i| t.visibility[i]).collect(),
                    ..t.clone()
                })
                .collect(),
        }
    }
}

/// Mean centre displacement per frame over consecutive annotated frames.
///
/// Gaps are bridged by dividing by the frame distance; fewer than two
/// annotated frames count as static.
pub fn mean_displacement(boxes: &[Option<NormBox>]) -> f64 {
    let present: Vec<(usize, NormBox)> = boxes
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.map(|b| (i, b)))
        .collect();
    if present.len() < 2 {
        return 0.0;
    }
    let total: f64 = present
        .windows(2)
        .map(|w| {
            let ((i, a), (j, b)) = (w[0], w[1]);
            (b.cx - a.cx).hypot(b.cy - a.cy) / (j - i) as f64
        })
        .sum();
    total / (present.len() - 1) as f64
}

pub fn speed_label(boxes: &[Option<NormBox>], bands: &SpeedBands) -> Speed {
    bands.classify(mean_displacement(boxes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

impl Shape {
    const ALL: [Shape; 5] = [Shape::Disc, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

    // Local coordinates span [-1, 1] on both axes; every shape touches all
    // four sides, so the box is exactly the extent.
    fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        match self {
            Shape::Disc => u * u + v * v <= 1.0,
            Shape::Square => true,
            Shape::Triangle => u.abs() <= (v + 1.0) / 2.0,
            Shape::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            Shape::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Solid,
    Stripes { freq: f64, angle: f64 },
    Checker { freq: f64 },
}

impl Texture {
    fn shade(self, u: f64, v: f64) -> f64 {
        match self {
            Texture::Solid => 1.0,
            Texture::Stripes { freq, angle } => {
                let t = u * angle.cos() + v * angle.sin();
                if (t * freq).sin() >= 0.0 {
                    1.0
                } else {
                    0.6
                }
            }
            Texture::Checker { freq } => {
                let a = ((u + 1.0) * freq).floor() as i64 + ((v + 1.0) * freq).floor() as i64;
                if a % 2 == 0 {
                    1.0
                } else {
                    0.65
                }
            }
        }
    }
}

struct Object {
    shape: Shape,
    texture: Texture,
    colour: [f64; 3],
    // Half extents in normalised units.
    rx: f64,
    ry: f64,
    centres: Vec<(f64, f64)>,
}

impl Object {
    fn true_box(&self, t: usize) -> NormBox {
        let (cx, cy) = self.centres[t];
        let q = |v: f64| (v * COORD_QUANTUM).round() / COORD_QUANTUM;
        let (x1, y1) = (q(cx - self.rx).max(0.0), q(cy - self.ry).max(0.0));
        let (x2, y2) = (q(cx + self.rx).min(1.0), q(cy + self.ry).min(1.0));
        NormBox::from_corners(x1, y1, x2, y2).expect("object extent is positive")
    }

    fn local(&self, cx: f64, cy: f64, x: f64, y: f64) -> (f64, f64) {
        ((x - cx) / self.rx, (y - cy) / self.ry)
    }
}

struct Strip {
    vertical: bool,
    lo: f64,
    hi: f64,
    shade: f64,
}

impl Strip {
    fn covers(&self, x: f64, y: f64) -> bool {
        let c = if self.vertical { x } else { y };
        c >= self.lo && c < self.hi
    }
}

fn clip_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// Reflecting random walk with a slowly turning heading.
fn trajectory(rng: &mut ChaCha8Rng, frames: usize, speed: f64, rx: f64, ry: f64) -> Vec<(f64, f64)> {
    let mut x = rng.gen_range(rx..=1.0 - rx);
    let mut y = rng.gen_range(ry..=1.0 - ry);
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let turn = rng.gen_range(-0.15..=0.15);
    let mut out = vec![(x, y)];
    for _ in 1..frames {
        let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
        x += vx;
        y += vy;
        if x < rx {
            x = 2.0 * rx - x;
            vx = -vx;
        } else if x > 1.0 - rx {
            x = 2.0 * (1.0 - rx) - x;
            vx = -vx;
        }
        if y < ry {
            y = 2.0 * ry - y;
            vy = -vy;
        } else if y > 1.0 - ry {
            y = 2.0 * (1.0 - ry) - y;
            vy = -vy;
        }
        x = x.clamp(rx, 1.0 - rx);
        y = y.clamp(ry, 1.0 - ry);
        heading = vy.atan2(vx) + turn;
        out.push((x, y));
    }
    out
}

/// Renders one clip; fully determined by `cfg.seed` and `index`.
pub fn generate_clip(cfg: &GenConfig, index: u64) -> Result<ClipSample> {
    cfg.validate()?;
    let mut rng = clip_rng(cfg.seed, index);
    let (h, w) = (cfg.height, cfg.width);
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);

    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = rng.gen_range(0..cfg.classes);
        let band = rng.gen_range(0..3);
        let (lo, hi) = cfg.speed_ranges[band];
        let speed = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let rx = rng.gen_range(cfg.min_size_px..=cfg.max_size_px) / (2.0 * w as f64);
        let ry = rng.gen_range(cfg.min_size_px..=cfg.max_size_px) / (2.0 * h as f64);
        let texture = match rng.gen_range(0..3) {
            0 => Texture::Solid,
            1 => Texture::Stripes {
                freq: rng.gen_range(3.0..6.0),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
            _ => Texture::Checker {
                freq: rng.gen_range(1.5..3.0),
            },
        };
        let colour = [
            rng.gen_range(0.35..1.0),
            rng.gen_range(0.35..1.0),
            rng.gen_range(0.35..1.0),
        ];
        let centres = trajectory(&mut rng, cfg.frames, speed, rx, ry);
        objects.push(Object {
            shape: Shape::ALL[class],
            texture,
            colour,
            rx,
            ry,
            centres,
        });
    }
    let strip = (rng.gen::<f64>() < cfg.occlusion_prob).then(|| {
        let vertical = rng.gen_bool(0.5);
        let extent = if vertical { w } else { h } as f64;
        let width = (rng.gen_range(6.0..12.0) / extent).min(0.3);
        let lo = rng.gen_range(0.1..0.9 - width);
        Strip {
            vertical,
            lo,
            hi: lo + width,
            shade: rng.gen_range(0.2..0.5),
        }
    });
    let base: [f64; 3] = [
        rng.gen_range(0.0..0.3),
        rng.gen_range(0.0..0.3),
        rng.gen_range(0.0..0.3),
    ];
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..8.0),
                rng.gen_range(2.0..8.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut visibility = vec![vec![0.0; cfg.frames]; n_obj];
    for t in 0..cfg.frames {
        let exposure = rng.gen_range(cfg.exposure.0..=cfg.exposure.1);
        let mut img = vec![0f64; h * w * 3];
        for py in 0..h {
            for px in 0..w {
                let (x, y) = ((px as f64 + 0.5) / w as f64, (py as f64 + 0.5) / h as f64);
                let pattern: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph)| (fx * x + fy * y + ph).sin())
                    .sum::<f64>()
                    / 3.0;
                for c in 0..3 {
                    let noise = rng.gen_range(-1.0..=1.0) * cfg.noise;
                    img[(py * w + px) * 3 + c] = base[c] + 0.08 * pattern + noise;
                }
            }
        }

        // Objects are composited back to front with blurred coverage.
        for o in &objects {
            let (cx, cy) = o.centres[t];
            let (dx, dy) = if t > 0 {
                (cx - o.centres[t - 1].0, cy - o.centres[t - 1].1)
            } else {
                (
                    o.centres[1.min(cfg.frames - 1)].0 - cx,
                    o.centres[1.min(cfg.frames - 1)].1 - cy,
                )
            };
            let streak = (dx * cfg.blur_gain * exposure, dy * cfg.blur_gain * exposure);
            let streak_px = (streak.0 * w as f64).hypot(streak.1 * h as f64);
            let samples = (streak_px.ceil() as usize + 1).clamp(1, 8);
            let offsets: Vec<f64> = (0..samples)
                .map(|s| {
                    if samples == 1 {
                        0.0
                    } else {
                        s as f64 / (samples - 1) as f64 - 0.5
                    }
                })
                .collect();
            let reach_x = o.rx + streak.0.abs() / 2.0 + 1.0 / w as f64;
            let reach_y = o.ry + streak.1.abs() / 2.0 + 1.0 / h as f64;
            let x_lo = (((cx - reach_x) * w as f64).floor().max(0.0)) as usize;
            let x_hi = (((cx + reach_x) * w as f64).ceil() as usize).min(w);
            let y_lo = (((cy - reach_y) * h as f64).floor().max(0.0)) as usize;
            let y_hi = (((cy + reach_y) * h as f64).ceil() as usize).min(h);
            for py in y_lo..y_hi {
                for px in x_lo..x_hi {
                    let mut alpha = 0.0;
                    let mut shade = 0.0;
                    for &k in &offsets {
                        let (sx, sy) = (cx - streak.0 * k, cy - streak.1 * k);
                        for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                            let x = (px as f64 + ox) / w as f64;
                            let y = (py as f64 + oy) / h as f64;
                            let (u, v) = o.local(sx, sy, x, y);
                            if o.shape.contains(u, v) {
                                alpha += 1.0;
                                shade += o.texture.shade(u, v);
                            }
                        }
                    }
                    let n = (offsets.len() * 4) as f64;
                    if alpha > 0.0 {
                        let a = alpha / n;
                        for c in 0..3 {
                            let p = &mut img[(py * w + px) * 3 + c];
                            *p = *p * (1.0 - a) + o.colour[c] * shade / n;
                        }
                    }
                }
            }
        }
        if let Some(s) = &strip {
            for py in 0..h {
                for px in 0..w {
                    let (x, y) = ((px as f64 + 0.5) / w as f64, (py as f64 + 0.5) / h as f64);
                    if s.covers(x, y) {
                        let stripe = if (px + py) % 4 < 2 { 1.0 } else { 0.8 };
                        for c in 0..3 {
                            img[(py * w + px) * 3 + c] = s.shade * stripe;
                        }
                    }
                }
            }
        }

        // Visibility from the sharp geometry at time t.
        for (i, o) in objects.iter().enumerate() {
            let (cx, cy) = o.centres[t];
            let (mut total, mut seen) = (0usize, 0usize);
            for py in 0..h {
                for px in 0..w {
                    let (x, y) = ((px as f64 + 0.5) / w as f64, (py as f64 + 0.5) / h as f64);
                    let (u, v) = o.local(cx, cy, x, y);
                    if !o.shape.contains(u, v) {
                        continue;
                    }
                    total += 1;
                    let covered = strip.as_ref().is_some_and(|s| s.covers(x, y))
                        || objects[i + 1..].iter().any(|above| {
                            let (ax, ay) = above.centres[t];
                            let (u, v) = above.local(ax, ay, x, y);
                            above.shape.contains(u, v)
                        });
                    if !covered {
                        seen += 1;
                    }
                }
            }
            visibility[i][t] = if total == 0 { 0.0 } else { seen as f64 / total as f64 };
        }
        frames.push(img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect());
    }

    let tracks = objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let boxes: Vec<Option<NormBox>> = (0..cfg.frames)
                .map(|t| (visibility[i][t] >= MIN_VISIBILITY).then(|| o.true_box(t)))
                .collect();
            let speed = speed_label(&boxes, &cfg.bands);
            Track {
                id: i as u32 + 1,
                class: Shape::ALL.iter().position(|&s| s == o.shape).expect("known shape"),
                boxes,
                visibility: visibility[i].clone(),
                speed,
            }
        })
        .collect();
    Ok(ClipSample {
        id: index,
        height: h,
        width: w,
        frames,
        tracks,
    })
}

/// Generates `count` clips in parallel; the result does not depend on the
/// number of worker threads.
pub fn generate_dataset(cfg: &GenConfig, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    let clips = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_clip(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        classes: cfg.classes,
        clips,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub classes: usize,
    pub clips: Vec<ClipSample>,
}

const MANIFEST: &str = "manifest.txt";
const ANNOTATIONS: &str = "annotations.txt";
const FORMAT_LINE: &str = "format clipvid-synth 1";

fn clip_file(id: u64) -> String {
    format!("clip_{id}.bin")
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "{FORMAT_LINE}\nheight {}\nwidth {}\nframes {}\nclips {}\nclasses {}\n",
        ds.height,
        ds.width,
        ds.frames,
        ds.clips.len(),
        ds.classes
    );
    let mut ann = String::new();
    for clip in &ds.clips {
        if clip.height != ds.height || clip.width != ds.width || clip.frames.len() != ds.frames {
            return Err(Error::Input(format!(
                "clip {} does not match the dataset extents",
                clip.id
            )));
        }
        let name = clip_file(clip.id);
        writeln!(manifest, "clip {} {name}", clip.id).expect("string write");
        let mut bytes = Vec::with_capacity(ds.frames * ds.height * ds.width * 12);
        for frame in &clip.frames {
            for &v in frame {
                v.write_le(&mut bytes);
            }
        }
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        for t in &clip.tracks {
            for f in 0..ds.frames {
                let coords = match t.boxes[f] {
                    Some(b) => {
                        let [x1, y1, x2, y2] = b.corners();
                        format!("{x1} {y1} {x2} {y2}")
                    }
                    None => "- - - -".to_string(),
                };
                writeln!(
                    ann,
                    "{} {} {} {f} {coords} {} {}",
                    clip.id,
                    t.id,
                    t.class,
                    t.visibility[f],
                    t.speed.as_str()
                )
                .expect("string write");
            }
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(ANNOTATIONS);
    fs::write(&path, ann).map_err(|e| Error::io(&path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what}")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l == FORMAT_LINE => {}
        _ => return Err(parse_err(&mpath, 1, "missing format header")),
    }
    let mut header = |key: &str| -> Result<usize> {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_err(&mpath, 0, format!("missing {key}")))?;
        let mut toks = l.split_whitespace();
        if toks.next() != Some(key) {
            return Err(parse_err(&mpath, no, format!("expected {key}")));
        }
        field(&mpath, no, toks.next(), key)
    };
    let (height, width, frames, count, classes) = (
        header("height")?,
        header("width")?,
        header("frames")?,
        header("clips")?,
        header("classes")?,
    );
    let mut clips = Vec::with_capacity(count);
    for (no, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let mut toks = l.split_whitespace();
        if toks.next() != Some("clip") {
            return Err(parse_err(&mpath, no, "expected a clip entry"));
        }
        let id: u64 = field(&mpath, no, toks.next(), "clip id")?;
        let name: String = field(&mpath, no, toks.next(), "clip file")?;
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let per_frame = height * width * 3;
        if bytes.len() != frames * per_frame * 4 {
            return Err(Error::Format {
                path,
                offset: bytes.len() as u64,
                msg: format!("expected {} bytes", frames * per_frame * 4),
            });
        }
        let values: Vec<f32> = bytes.chunks_exact(4).map(f32::read_le).collect();
        clips.push(ClipSample {
            id,
            height,
            width,
            frames: values.chunks(per_frame).map(<[f32]>::to_vec).collect(),
            tracks: Vec::new(),
        });
    }
    if clips.len() != count {
        return Err(parse_err(
            &mpath,
            5,
            format!("header announces {count} clips, found {}", clips.len()),
        ));
    }

    let apath = dir.join(ANNOTATIONS);
    let text = fs::read_to_string(&apath).map_err(|e| Error::io(&apath, e))?;
    for (i, l) in text.lines().enumerate() {
        let no = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 10 {
            return Err(parse_err(
                &apath,
                no,
                format!("expected 10 fields, found {}", toks.len()),
            ));
        }
        let clip_id: u64 = field(&apath, no, Some(toks[0]), "clip id")?;
        let track_id: u32 = field(&apath, no, Some(toks[1]), "track id")?;
        let class: usize = field(&apath, no, Some(toks[2]), "class")?;
        let frame: usize = field(&apath, no, Some(toks[3]), "frame")?;
        let bbox = if toks[4..8].iter().all(|t| *t == "-") {
            None
        } else {
            let c: Vec<f64> = toks[4..8]
                .iter()
                .map(|t| field(&apath, no, Some(t), "coordinate"))
                .collect::<Result<_>>()?;
            Some(NormBox::from_corners(c[0], c[1], c[2], c[3]).map_err(|e| parse_err(&apath, no, e.to_string()))?)
        };
        let vis: f64 = field(&apath, no, Some(toks[8]), "visibility")?;
        let speed = Speed::parse(toks[9]).ok_or_else(|| parse_err(&apath, no, "invalid speed label"))?;
        if class >= classes || frame >= frames {
            return Err(parse_err(&apath, no, "class or frame out of range"));
        }
        let clip = clips
            .iter_mut()
            .find(|c| c.id == clip_id)
            .ok_or_else(|| parse_err(&apath, no, format!("unknown clip {clip_id}")))?;
        let pos = match clip.tracks.iter().position(|t| t.id == track_id) {
            Some(p) => p,
            None => {
                clip.tracks.push(Track {
                    id: track_id,
                    class,
                    boxes: vec![None; frames],
                    visibility: vec![0.0; frames],
                    speed,
                });
                clip.tracks.len() - 1
            }
        };
        let track = &mut clip.tracks[pos];
        if track.class != class || track.speed != speed {
            return Err(parse_err(&apath, no, "class or speed changes within a track"));
        }
        track.boxes[frame] = bbox;
        track.visibility[frame] = vis;
    }
    Ok(Dataset {
        height,
        width,
        frames,
        classes,
        clips,
    })
}
