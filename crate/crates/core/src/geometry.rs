//! Normalised boxes, IoU/GIoU, logit-space refinement and RoI sampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{RowMixPlan, Tape, Var};

/// Smallest admissible box width/height.
pub const MIN_EXTENT: f64 = 1e-4;
/// Largest admissible box width/height (the full frame).
pub const MAX_EXTENT: f64 = 1.0;
/// Inputs to [`inverse_sigmoid`] are clamped to `[LOGIT_EPS, 1 - LOGIT_EPS]`.
pub const LOGIT_EPS: f64 = 1e-3;

/// Box in `(cx, cy, w, h)` form, normalised to the frame extents.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Offsets in inverse-sigmoid space.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Result<Self> {
        if [dx, dy, dw, dh].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("box delta must be finite".into()));
        }
        Ok(Self { dx, dy, dw, dh })
    }

    pub fn negated(self) -> Self {
        Self {
            dx: -self.dx,
            dy: -self.dy,
            dw: -self.dw,
            dh: -self.dh,
        }
    }
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
            return Err(Error::Precondition(format!(
                "box ({cx}, {cy}, {w}, {h}) must be finite with positive extent"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn full_frame() -> Self {
        Self {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
        }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if x2 < x1 || y2 < y1 {
            return Err(Error::Precondition(format!(
                "corners ({x1}, {y1}, {x2}, {y2}) are not ordered"
            )));
        }
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice<T: Scalar>(v: &[T]) -> Self {
        Self {
            cx: v[0].as_f64(),
            cy: v[1].as_f64(),
            w: v[2].as_f64(),
            h: v[3].as_f64(),
        }
    }

    /// Clamps extents to `[MIN_EXTENT, MAX_EXTENT]`.
    pub fn clamped(self) -> Self {
        Self {
            w: self.w.clamp(MIN_EXTENT, MAX_EXTENT),
            h: self.h.clamp(MIN_EXTENT, MAX_EXTENT),
            ..self
        }
    }

    /// True when every corner lies in `[0, 1]`.
    pub fn inside_frame(&self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        x1 >= 0.0 && y1 >= 0.0 && x2 <= 1.0 && y2 <= 1.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (x / (1.0 - x)).ln()
}

fn intersection(a: &NormBox, b: &NormBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalised IoU in `[-1, 1]`.
pub fn giou(a: &NormBox, b: &NormBox) -> Result<f64> {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return Err(Error::Precondition("giou of a zero-area box".into()));
    }
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let encl = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    Ok(inter / union - (encl - union) / encl)
}

/// `sigmoid(inverse_sigmoid(coord) + offset)` per coordinate, then clamped.
pub fn apply_delta(b: &NormBox, d: &BoxDelta) -> NormBox {
    let step = |v: f64, dv: f64| sigmoid(inverse_sigmoid(v) + dv);
    NormBox {
        cx: step(b.cx, d.dx),
        cy: step(b.cy, d.dy),
        w: step(b.w, d.dw),
        h: step(b.h, d.dh),
    }
    .clamped()
}

fn bilinear_taps<T: Scalar>(px: f64, py: f64, width: usize, height: usize) -> Vec<(usize, T)> {
    let px = px.clamp(0.0, (width - 1) as f64);
    let py = py.clamp(0.0, (height - 1) as f64);
    let x0 = px.floor() as usize;
    let y0 = py.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = px - x0 as f64;
    let fy = py - y0 as f64;
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
        for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            let w = wy * wx;
            if w == 0.0 {
                continue;
            }
            let idx = y * width + x;
            match taps.iter_mut().find(|t| t.0 == idx) {
                Some(t) => t.1 += w,
                None => taps.push((idx, w)),
            }
        }
    }
    taps.into_iter().map(|(i, w)| (i, T::from_f64(w))).collect()
}

/// Sampling plan for an `s×s` aligned RoI grid over an `height×width` map.
///
/// One bilinear sample is taken at the centre of every cell; pixel `i` has
/// its centre at normalised coordinate `(i + 0.5) / extent`. The box is
/// clamped to the frame first.
pub fn roi_plan<T: Scalar>(height: usize, width: usize, b: &NormBox, s: usize) -> RowMixPlan<T> {
    let [x1, y1, x2, y2] = b.corners();
    let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
    let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
    let mut plan = RowMixPlan::new();
    for gy in 0..s {
        let ny = y1 + (gy as f64 + 0.5) / s as f64 * (y2 - y1);
        for gx in 0..s {
            let nx = x1 + (gx as f64 + 0.5) / s as f64 * (x2 - x1);
            let taps = bilinear_taps(nx * width as f64 - 0.5, ny * height as f64 - 0.5, width, height);
            plan.push_row(taps);
        }
    }
    plan
}

/// Adaptive average pooling of an `height×width` grid down to `s×s` cells.
pub fn avg_pool_plan<T: Scalar>(height: usize, width: usize, s: usize) -> RowMixPlan<T> {
    let bins = |i: usize, n: usize| (i * n / s, ((i + 1) * n).div_ceil(s));
    let mut plan = RowMixPlan::new();
    for gy in 0..s {
        let (ys, ye) = bins(gy, height);
        for gx in 0..s {
            let (xs, xe) = bins(gx, width);
            let w = T::from_f64(1.0 / ((ye - ys) * (xe - xs)) as f64);
            plan.push_row((ys..ye).flat_map(|y| (xs..xe).map(move |x| (y * width + x, w))));
        }
    }
    plan
}

/// Bilinear RoI sampling of `f[H×W×d]` inside `b`; output `[s²×d]`,
/// differentiable with respect to `f`.
pub fn roi_sample<T: Scalar>(tape: &Tape<T>, f: Var, b: &NormBox, s: usize) -> Result<Var> {
    let shape = tape.shape(f);
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "roi_sample",
            lhs: shape,
            rhs: vec![3],
        });
    }
    let flat = tape.reshape(f, &[shape[0] * shape[1], shape[2]])?;
    tape.row_mix(flat, roi_plan(shape[0], shape[1], b, s))
}
