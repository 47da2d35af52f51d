//! Hand-written three-clip evaluation fixture and a flat-list AP oracle
//! that shares no code with the evaluator.

#![allow(dead_code)]

use clipvid::eval::{ClipDetections, Detection};
use clipvid::geometry::NormBox;
use clipvid::synthvid::{ClipSample, Speed, Track};

fn corners(c: [f64; 4]) -> NormBox {
    NormBox::from_corners(c[0], c[1], c[2], c[3]).unwrap()
}

fn track(id: u32, class: usize, speed: Speed, boxes: &[Option<[f64; 4]>]) -> Track {
    Track {
        id,
        class,
        boxes: boxes.iter().map(|b| b.map(corners)).collect(),
        visibility: vec![1.0; boxes.len()],
        speed,
    }
}

fn blank(id: u64, frames: usize, tracks: Vec<Track>) -> ClipSample {
    ClipSample {
        id,
        height: 8,
        width: 8,
        frames: vec![vec![0.0; 8 * 8 * 3]; frames],
        tracks,
    }
}

fn det(class: usize, score: f64, c: [f64; 4]) -> Detection {
    Detection {
        class,
        score,
        bbox: corners(c),
    }
}

pub const CLASSES: usize = 3;

/// Three clips of two or three frames. The detections include a duplicate,
/// a localisation miss, score ties, a hit on a box that leaves the frame and
/// a class without any ground truth in the fast bucket.
pub fn fixture() -> (Vec<ClipSample>, Vec<ClipDetections>) {
    use Speed::*;
    let a = [0.10, 0.10, 0.30, 0.30];
    let b = [0.50, 0.50, 0.80, 0.90];
    let c = [0.20, 0.60, 0.40, 0.95];
    let clips = vec![
        blank(
            0,
            2,
            vec![
                track(1, 0, Slow, &[Some(a), Some([0.11, 0.10, 0.31, 0.30])]),
                track(2, 1, Fast, &[Some(b), Some([0.40, 0.50, 0.70, 0.90])]),
            ],
        ),
        blank(
            1,
            3,
            vec![
                track(1, 0, Fast, &[Some(c), None, Some([0.45, 0.60, 0.65, 0.95])]),
                track(2, 2, Medium, &[Some([0.60, 0.05, 0.90, 0.35]); 3]),
                track(3, 0, Medium, &[None, Some(a), Some(a)]),
            ],
        ),
        blank(2, 2, vec![track(1, 1, Slow, &[Some([0.05, 0.05, 0.95, 0.95]); 2])]),
    ];
    let dets = vec![
        vec![
            vec![
                det(0, 0.90, [0.10, 0.11, 0.30, 0.31]),
                det(0, 0.85, [0.10, 0.10, 0.29, 0.30]),
                det(1, 0.70, [0.52, 0.50, 0.80, 0.88]),
                det(2, 0.40, [0.00, 0.00, 0.20, 0.20]),
            ],
            vec![
                det(0, 0.60, [0.11, 0.10, 0.31, 0.30]),
                det(1, 0.70, [0.60, 0.50, 0.90, 0.90]),
            ],
        ],
        vec![
            vec![
                det(0, 0.80, [0.20, 0.60, 0.40, 0.95]),
                det(2, 0.95, [0.60, 0.05, 0.90, 0.35]),
            ],
            vec![
                det(0, 0.60, [0.50, 0.50, 0.70, 0.70]),
                det(0, 0.55, [0.10, 0.10, 0.30, 0.30]),
            ],
            vec![
                det(0, 0.50, [0.45, 0.60, 0.65, 0.95]),
                det(2, 0.30, [0.62, 0.05, 0.90, 0.33]),
                det(0, 0.20, [0.12, 0.12, 0.30, 0.30]),
            ],
        ],
        vec![
            vec![det(1, 0.65, [0.05, 0.05, 0.95, 0.95])],
            vec![det(1, 0.10, [0.30, 0.30, 0.60, 0.60])],
        ],
    ];
    (clips, dets)
}

fn box_iou(p: [f64; 4], q: [f64; 4]) -> f64 {
    let w = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let h = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = w * h;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(p) + area(q) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Mean AP over classes with ground truth in `bucket` (all speeds when
/// `None`), together with the per-class values.
pub fn flat_map(
    clips: &[ClipSample],
    dets: &[ClipDetections],
    classes: usize,
    bucket: Option<Speed>,
) -> (f64, Vec<Option<f64>>) {
    // (image, class, score, corners) and (image, class, corners, in bucket)
    let mut all_dets = Vec::new();
    let mut all_gts = Vec::new();
    let mut image = 0usize;
    for (clip, cd) in clips.iter().zip(dets) {
        for (f, frame) in cd.iter().enumerate() {
            for d in frame {
                all_dets.push((image, d.class, d.score, d.bbox.corners()));
            }
            for t in &clip.tracks {
                if let Some(b) = t.boxes[f] {
                    all_gts.push((image, t.class, b.corners(), bucket.is_none_or(|s| s == t.speed)));
                }
            }
            image += 1;
        }
    }
    let mut per_class = Vec::new();
    for class in 0..classes {
        let positives = all_gts.iter().filter(|g| g.1 == class && g.3).count();
        if positives == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<_> = all_dets.iter().filter(|d| d.1 == class).collect();
        // Stable sort keeps input order among equal scores.
        ranked.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap());
        let mut used = vec![false; all_gts.len()];
        let mut hits = Vec::new();
        for d in ranked {
            let mut best = None;
            let mut best_iou = -1.0;
            for (g, gt) in all_gts.iter().enumerate() {
                if gt.0 == d.0 && gt.1 == class {
                    let o = box_iou(d.3, gt.2);
                    if o > best_iou {
                        best_iou = o;
                        best = Some(g);
                    }
                }
            }
            match best {
                Some(g) if best_iou >= 0.5 => {
                    if !all_gts[g].3 {
                        continue;
                    }
                    hits.push(!used[g]);
                    used[g] = true;
                }
                _ => hits.push(false),
            }
        }
        // Each hit adds 1/positives of recall at the best precision
        // reachable from its rank onwards.
        let precision: Vec<f64> = hits
            .iter()
            .scan(0usize, |tp, &h| {
                *tp += h as usize;
                Some(*tp as f64)
            })
            .enumerate()
            .map(|(i, tp)| tp / (i + 1) as f64)
            .collect();
        let mut ap = 0.0;
        for i in 0..hits.len() {
            if hits[i] {
                let best = precision[i..].iter().cloned().fold(0.0, f64::max);
                ap += best / positives as f64;
            }
        }
        per_class.push(Some(ap));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (map, per_class)
}
