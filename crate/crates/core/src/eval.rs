//! VOC-style detection evaluation with a motion-speed breakdown.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{iou, NormBox};
use crate::synthvid::{ClipSample, Speed};

pub const IOU_THRESHOLD: f64 = 0.5;
/// Per-query class scores at or below this are not reported.
pub const SCORE_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: NormBox,
}

/// Detections of one clip, one list per frame.
pub type ClipDetections = Vec<Vec<Detection>>;

/// A scored box in a flat list; `image` groups boxes that may match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: NormBox,
}

/// A ground-truth box; detections matched to an uncounted box are neither
/// true nor false positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: NormBox,
    pub counted: bool,
}

/// Outcome of greedy matching for one class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassMatch {
    pub ap: f64,
    pub positives: usize,
    pub true_positives: usize,
}

/// Greedy matching in descending score order (input order breaks ties)
/// followed by all-point interpolated AP.
pub fn match_class(dets: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> ClassMatch {
    let positives = gts.iter().filter(|g| g.counted).count();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut flags: Vec<bool> = Vec::with_capacity(dets.len());
    for &k in &order {
        let d = &dets[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.image != d.image {
                continue;
            }
            let o = iou(&d.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, o)) if o >= iou_thresh => {
                if !gts[g].counted {
                    continue;
                }
                if taken[g] {
                    flags.push(false);
                } else {
                    taken[g] = true;
                    flags.push(true);
                }
            }
            _ => flags.push(false),
        }
    }
    let true_positives = flags.iter().filter(|&&f| f).count();
    ClassMatch {
        ap: all_point_ap(&flags, positives),
        positives,
        true_positives,
    }
}

/// All-point interpolated area under the precision/recall curve of a
/// ranked list of hit flags.
pub fn all_point_ap(flags: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev {
            ap += (r - prev) * p;
            prev = *r;
        }
    }
    ap
}

pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox], iou_thresh: f64) -> f64 {
    match_class(dets, gts, iou_thresh).ap
}

/// Metrics of one gt subset: all objects or one speed bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketReport {
    /// AP per class; `None` for classes without ground truth in the subset.
    pub class_ap: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub map: f64,
    pub gts: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: BucketReport,
    /// Slow, medium, fast.
    pub buckets: [BucketReport; 3],
}

impl EvalReport {
    pub fn bucket(&self, s: Speed) -> &BucketReport {
        &self.buckets[s as usize]
    }

    /// One `name=value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: String, v: String| writeln!(out, "{k}={v}").expect("string write");
        line("map".into(), format!("{:.6}", self.overall.map));
        for s in Speed::ALL {
            line(format!("map_{}", s.as_str()), format!("{:.6}", self.bucket(s).map));
        }
        line("gt_total".into(), self.overall.gts.to_string());
        for s in Speed::ALL {
            line(format!("gt_{}", s.as_str()), self.bucket(s).gts.to_string());
        }
        for (c, ap) in self.overall.class_ap.iter().enumerate() {
            line(format!("ap_class{c}"), ap.map_or("nan".into(), |a| format!("{a:.6}")));
        }
        out
    }

    /// Tab-separated `bucket class gts tp ap` rows; class `all` is the mean.
    pub fn to_table(&self) -> String {
        let mut out = String::from("bucket\tclass\tgts\ttp\tap\n");
        let rows =
            std::iter::once(("all", &self.overall)).chain(Speed::ALL.iter().map(|&s| (s.as_str(), self.bucket(s))));
        for (name, b) in rows {
            writeln!(out, "{name}\tall\t{}\t{}\t{:.6}", b.gts, b.true_positives, b.map).expect("string write");
            for (c, ap) in b.class_ap.iter().enumerate() {
                let ap = ap.map_or("nan".into(), |a| format!("{a:.6}"));
                writeln!(out, "{name}\t{c}\t\t\t{ap}").expect("string write");
            }
        }
        out
    }
}

struct Flat {
    dets: Vec<Vec<ScoredBox>>,
    gts: Vec<Vec<(GtBox, Speed)>>,
}

fn flatten(dets: &[ClipDetections], clips: &[ClipSample], classes: usize) -> Result<Flat> {
    if dets.len() != clips.len() {
        return Err(Error::Input(format!(
            "{} detection clips for {} clips",
            dets.len(),
            clips.len()
        )));
    }
    let mut flat = Flat {
        dets: vec![Vec::new(); classes],
        gts: vec![Vec::new(); classes],
    };
    let mut image = 0;
    for (cd, clip) in dets.iter().zip(clips) {
        if cd.len() != clip.num_frames() {
            return Err(Error::Input(format!(
                "clip {} has {} frames but {} detection frames",
                clip.id,
                clip.num_frames(),
                cd.len()
            )));
        }
        for (i, frame) in cd.iter().enumerate() {
            for d in frame {
                if d.class >= classes {
                    return Err(Error::Input(format!(
                        "detection class {} outside {classes} classes",
                        d.class
                    )));
                }
                if !d.score.is_finite() {
                    return Err(Error::Input(format!("non-finite detection score in clip {}", clip.id)));
                }
                flat.dets[d.class].push(ScoredBox {
                    image,
                    score: d.score,
                    bbox: d.bbox,
                });
            }
            for t in &clip.tracks {
                let Some(b) = t.boxes[i] else { continue };
                if t.class >= classes {
                    return Err(Error::Input(format!(
                        "ground-truth class {} outside {classes} classes",
                        t.class
                    )));
                }
                let gt = GtBox {
                    image,
                    bbox: b,
                    counted: true,
                };
                flat.gts[t.class].push((gt, t.speed));
            }
            image += 1;
        }
    }
    Ok(flat)
}

fn bucket(flat: &Flat, keep: impl Fn(Speed) -> bool + Sync) -> BucketReport {
    let per_class: Vec<ClassMatch> = (0..flat.dets.len())
        .into_par_iter()
        .map(|c| {
            let gts: Vec<GtBox> = flat.gts[c]
                .iter()
                .map(|&(g, s)| GtBox { counted: keep(s), ..g })
                .collect();
            match_class(&flat.dets[c], &gts, IOU_THRESHOLD)
        })
        .collect();
    let class_ap: Vec<Option<f64>> = per_class.iter().map(|m| (m.positives > 0).then_some(m.ap)).collect();
    let present: Vec<f64> = class_ap.iter().flatten().copied().collect();
    BucketReport {
        map: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        class_ap,
        gts: per_class.iter().map(|m| m.positives).sum(),
        true_positives: per_class.iter().map(|m| m.true_positives).sum(),
    }
}

/// Evaluates per-frame detections against the clips' annotations. Speed
/// buckets restrict the ground truth to one speed label.
pub fn evaluate(dets: &[ClipDetections], clips: &[ClipSample], classes: usize) -> Result<EvalReport> {
    let flat = flatten(dets, clips, classes)?;
    Ok(EvalReport {
        overall: bucket(&flat, |_| true),
        buckets: Speed::ALL.map(|s| bucket(&flat, move |x| x == s)),
    })
}

/// Ground truth echoed as detections with score 1.
pub fn oracle_detections(clip: &ClipSample) -> ClipDetections {
    (0..clip.num_frames())
        .map(|i| {
            clip.tracks
                .iter()
                .filter_map(|t| {
                    t.boxes[i].map(|bbox| Detection {
                        class: t.class,
                        score: 1.0,
                        bbox,
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{generate_dataset, GenConfig};
    use proptest::prelude::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> NormBox {
        NormBox::new(cx, cy, w, h).unwrap()
    }

    fn gt(image: usize, bbox: NormBox) -> GtBox {
        GtBox {
            image,
            bbox,
            counted: true,
        }
    }

    fn det(image: usize, score: f64, bbox: NormBox) -> ScoredBox {
        ScoredBox { image, score, bbox }
    }

    #[test]
    fn single_detection_cases() {
        let g = b(0.5, 0.5, 0.4, 0.4);
        let near = b(0.51, 0.5, 0.4, 0.4);
        assert!(iou(&g, &near) > 0.9);
        assert_eq!(average_precision(&[det(0, 0.9, near)], &[gt(0, g)], 0.5), 1.0);
        let miss = b(0.1, 0.1, 0.1, 0.1);
        let ap = average_precision(&[det(0, 0.9, miss), det(0, 0.6, near)], &[gt(0, g)], 0.5);
        assert!((ap - 0.5).abs() < 1e-15);
        assert_eq!(average_precision(&[], &[gt(0, g)], 0.5), 0.0);
    }

    #[test]
    fn equal_scores_break_ties_by_input_order() {
        let g = b(0.5, 0.5, 0.4, 0.4);
        let miss = b(0.1, 0.1, 0.1, 0.1);
        let a = average_precision(&[det(0, 0.5, miss), det(0, 0.5, g)], &[gt(0, g)], 0.5);
        let c = average_precision(&[det(0, 0.5, g), det(0, 0.5, miss)], &[gt(0, g)], 0.5);
        assert_eq!((a, c), (0.5, 1.0));
    }

    #[test]
    fn ignored_matches_are_neither_hit_nor_miss() {
        let g1 = b(0.3, 0.3, 0.2, 0.2);
        let g2 = b(0.7, 0.7, 0.2, 0.2);
        let gts = [
            gt(0, g1),
            GtBox {
                counted: false,
                ..gt(0, g2)
            },
        ];
        let m = match_class(&[det(0, 0.9, g2), det(0, 0.8, g1)], &gts, 0.5);
        assert_eq!((m.ap, m.positives, m.true_positives), (1.0, 1, 1));
    }

    fn random_case(seed: u64) -> (Vec<ScoredBox>, Vec<GtBox>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<GtBox> = (0..rng.gen_range(1..8))
            .map(|_| {
                gt(
                    rng.gen_range(0..3),
                    b(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.2),
                )
            })
            .collect();
        let dets = (0..rng.gen_range(0..12))
            .map(|_| {
                let base = gts[rng.gen_range(0..gts.len())];
                let jitter = rng.gen_range(-0.08..0.08);
                det(
                    base.image,
                    rng.gen_range(0.0..1.0),
                    b(base.bbox.cx + jitter, base.bbox.cy, 0.2, 0.2),
                )
            })
            .collect();
        (dets, gts)
    }

    proptest! {
        #[test]
        fn monotone_score_maps_keep_ap(seed in any::<u64>()) {
            let (dets, gts) = random_case(seed);
            let mapped: Vec<ScoredBox> = dets.iter().map(|d| ScoredBox { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect();
            prop_assert_eq!(average_precision(&dets, &gts, 0.5), average_precision(&mapped, &gts, 0.5));
        }

        #[test]
        fn duplicates_lower_ap(seed in any::<u64>()) {
            let (dets, gts) = random_case(seed);
            // A lone hit ranked first keeps precision 1 with its duplicate
            // ranked right behind it.
            let m = match_class(&dets, &gts, 0.5);
            prop_assume!(m.true_positives >= 2);
            let ap = m.ap;
            let doubled: Vec<ScoredBox> = dets.iter().chain(&dets).copied().collect();
            prop_assert!(average_precision(&doubled, &gts, 0.5) < ap);
        }
    }

    fn small_dataset() -> Vec<ClipSample> {
        let cfg = GenConfig {
            seed: 9,
            ..GenConfig::default()
        };
        generate_dataset(&cfg, 12).unwrap().clips
    }

    #[test]
    fn oracle_detector_scores_one_everywhere() {
        let clips = small_dataset();
        let dets: Vec<ClipDetections> = clips.iter().map(oracle_detections).collect();
        let r = evaluate(&dets, &clips, 5).unwrap();
        assert_eq!(r.overall.map, 1.0);
        for s in Speed::ALL {
            if r.bucket(s).gts > 0 {
                assert_eq!(r.bucket(s).map, 1.0);
            }
        }
    }

    #[test]
    fn missing_fast_tracks_only_hurts_the_fast_bucket() {
        let clips = small_dataset();
        let dets: Vec<ClipDetections> = clips
            .iter()
            .map(|c| {
                let mut reduced = c.clone();
                reduced.tracks.retain(|t| t.speed != Speed::Fast);
                oracle_detections(&reduced)
            })
            .collect();
        let r = evaluate(&dets, &clips, 5).unwrap();
        assert!(r.bucket(Speed::Fast).gts > 0 && r.bucket(Speed::Slow).gts > 0);
        assert_eq!(r.bucket(Speed::Fast).map, 0.0);
        assert_eq!(r.bucket(Speed::Slow).map, 1.0);
    }

    #[test]
    fn bucket_counts_recombine() {
        let clips = small_dataset();
        let dets: Vec<ClipDetections> = clips
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let mut d = oracle_detections(c);
                for (i, f) in d.iter_mut().enumerate() {
                    if (k + i) % 3 == 0 {
                        f.pop();
                    }
                    for x in f.iter_mut() {
                        x.score = 0.3 + 0.01 * ((k * 7 + i) % 11) as f64;
                    }
                }
                d
            })
            .collect();
        let r = evaluate(&dets, &clips, 5).unwrap();
        let gts: usize = r.buckets.iter().map(|b| b.gts).sum();
        let tps: usize = r.buckets.iter().map(|b| b.true_positives).sum();
        assert_eq!(gts, r.overall.gts);
        assert_eq!(tps, r.overall.true_positives);
        assert!(r.overall.true_positives < r.overall.gts);
    }

    #[test]
    fn rejects_unknown_classes_and_frame_mismatch() {
        let clips = small_dataset();
        let mut dets: Vec<ClipDetections> = clips.iter().map(oracle_detections).collect();
        assert!(matches!(evaluate(&dets, &clips, 2), Err(Error::Input(_))));
        dets[0].pop();
        assert!(matches!(evaluate(&dets, &clips, 5), Err(Error::Input(_))));
    }

    #[test]
    fn report_serialization() {
        let clips = small_dataset();
        let dets: Vec<ClipDetections> = clips.iter().map(oracle_detections).collect();
        let r = evaluate(&dets, &clips, 5).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("map=1.000000\n"));
        assert!(text.lines().all(|l| l.split_once('=').is_some()));
        let table = r.to_table();
        assert_eq!(table.lines().count(), 1 + 4 * 6);
        assert!(table.lines().all(|l| l.split('\t').count() == 5));
    }
}
