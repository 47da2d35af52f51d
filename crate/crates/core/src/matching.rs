//! Hungarian assignment between predictions and ground truth, match costs
//! and the set prediction loss.

use crate::error::{Error, Result};
use crate::geometry::{giou, NormBox};
use crate::scalar::Scalar;
use crate::tape::{focal_value, Tape, Var};

/// Weights of the matching cost and the training loss (they share one form).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchCostConfig {
    pub lambda_cls: f64,
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for MatchCostConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 2.0,
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl MatchCostConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_giou,
            self.lambda_l1,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("match cost coefficients must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A ground-truth box with its class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub class: usize,
    pub bbox: NormBox,
}

/// A ground-truth box that belongs to a persistent track.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackedBox {
    pub track: u32,
    pub label: LabeledBox,
}

/// Sigmoid focal loss of one logit against a binary target.
pub fn focal_loss(logit: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    focal_value(logit, if target { 1.0 } else { 0.0 }, alpha, gamma)
}

/// Prediction-side view used by [`match_cost`].
#[derive(Clone, Copy, Debug)]
pub struct Prediction<'a> {
    pub logits: &'a [f64],
    pub bbox: NormBox,
}

/// λ_cls·focal(p_c, 1) + λ_giou·(1 − GIoU) + λ_l1·‖b* − b‖₁.
pub fn match_cost(pred: &Prediction<'_>, gt: &LabeledBox, cfg: &MatchCostConfig) -> Result<f64> {
    let logit = *pred
        .logits
        .get(gt.class)
        .ok_or_else(|| Error::Input(format!("class {} outside {} logits", gt.class, pred.logits.len())))?;
    let cls = focal_loss(logit, true, cfg.focal_alpha, cfg.focal_gamma);
    let g = giou(&gt.bbox, &pred.bbox)?;
    let l1: f64 = gt
        .bbox
        .to_array()
        .iter()
        .zip(pred.bbox.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(cfg.lambda_cls * cls + cfg.lambda_giou * (1.0 - g) + cfg.lambda_l1 * l1)
}

/// Minimum-cost perfect matching on a square matrix; returns `row -> column`.
///
/// Among optimal matchings the lexicographically smallest permutation is
/// returned (rows in order, smallest admissible column first).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension {
            op: "hungarian",
            lhs: vec![n],
            rhs: cost.iter().map(Vec::len).collect(),
        });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cost matrix has a non-finite entry".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (mut row_to_col, u, v) = solve(cost);
    let scale = cost.iter().flatten().fold(0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * (1.0 + scale);
    let tight = |r: usize, c: usize| cost[r][c] - u[r + 1] - v[c + 1] <= tol;
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }

    // Greedy lexicographic refinement inside the equality subgraph: every
    // perfect matching of tight edges is optimal for the dual (u, v).
    let mut fixed_col = vec![false; n];
    for r in 0..n {
        for c in 0..n {
            if fixed_col[c] || !tight(r, c) {
                continue;
            }
            if row_to_col[r] == c {
                break;
            }
            let r2 = col_to_row[c];
            let c_old = row_to_col[r];
            if let Some(path) = alternating_path(n, r2, c, c_old, &fixed_col, &col_to_row, &row_to_col, &tight) {
                for (row, col) in path {
                    row_to_col[row] = col;
                    col_to_row[col] = row;
                }
                row_to_col[r] = c;
                col_to_row[c] = r;
                break;
            }
        }
        fixed_col[row_to_col[r]] = true;
    }
    Ok(row_to_col)
}

// BFS for a tight alternating path that lets `start` (which is losing column
// `taken`) end up holding `target`, never touching fixed columns.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    n: usize,
    start: usize,
    taken: usize,
    target: usize,
    fixed_col: &[bool],
    col_to_row: &[usize],
    row_to_col: &[usize],
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let mut from_row = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([start]);
    let mut seen_row = vec![false; n];
    seen_row[start] = true;
    while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if fixed_col[col] || col == taken || from_row[col] != usize::MAX || !tight(row, col) {
                continue;
            }
            from_row[col] = row;
            if col == target {
                let mut path = Vec::new();
                let mut c = col;
                loop {
                    let r = from_row[c];
                    path.push((r, c));
                    if r == start {
                        return Some(path);
                    }
                    c = row_to_col[r];
                }
            }
            let next = col_to_row[col];
            if !seen_row[next] {
                seen_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    None
}

// Shortest augmenting path O(n³) solver with 1-indexed potentials.
fn solve(a: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = a.len();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u, v)
}

/// Rectangular form: `rows ≤ cols`; missing rows are padded with a constant
/// (which cannot change the optimum). Returns the column for each real row.
pub fn hungarian_rect(cost: &[Vec<f64>], cols: usize) -> Result<Vec<usize>> {
    let rows = cost.len();
    if rows > cols {
        return Err(Error::Capacity {
            needed: rows,
            available: cols,
        });
    }
    let mut square: Vec<Vec<f64>> = cost.to_vec();
    square.resize(cols, vec![0.0; cols]);
    let mut perm = hungarian(&square)?;
    perm.truncate(rows);
    Ok(perm)
}

/// Per-frame assignment of ground-truth objects to query slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    /// `pred_for_gt[j]` is the query matched to ground-truth `j`.
    pub pred_for_gt: Vec<usize>,
    pub queries: usize,
}

impl Assignment {
    pub fn gt_for_pred(&self, q: usize) -> Option<usize> {
        self.pred_for_gt.iter().position(|&p| p == q)
    }

    /// Full permutation σ over `queries` slots: real ground truths first,
    /// then ∅ padding mapped to the remaining queries in ascending order.
    pub fn permutation(&self) -> Vec<usize> {
        let mut perm = self.pred_for_gt.clone();
        perm.extend((0..self.queries).filter(|q| !self.pred_for_gt.contains(q)));
        perm
    }

    /// Whether entry `j` of [`Assignment::permutation`] is padding.
    pub fn is_padding(&self, j: usize) -> bool {
        j >= self.pred_for_gt.len()
    }
}

/// Cost matrix `[gts × queries]` from tape values.
pub fn cost_matrix<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    boxes: Var,
    gts: &[LabeledBox],
    cfg: &MatchCostConfig,
) -> Result<Vec<Vec<f64>>> {
    let classes = tape.shape(logits)[1];
    let lv: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
    let bv = tape.to_vec(boxes);
    let queries = lv.len() / classes;
    gts.iter()
        .map(|gt| {
            (0..queries)
                .map(|q| {
                    let pred = Prediction {
                        logits: &lv[q * classes..(q + 1) * classes],
                        bbox: NormBox::from_slice(&bv[q * 4..q * 4 + 4]),
                    };
                    match_cost(&pred, gt, cfg)
                })
                .collect()
        })
        .collect()
}

/// Un-normalised loss of one frame; every component is a `[1]` var.
#[derive(Clone, Copy, Debug)]
pub struct FrameLoss {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
}

/// Set prediction loss for one frame.
///
/// `logits` is `[L×C]`, `boxes` is `[L×4]` (cxcywh). Ground truths are matched
/// by [`hungarian_rect`] unless `fixed` supplies the assignment. Matched
/// queries receive the full loss; every other query only the all-negative
/// focal term.
pub fn set_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: Var,
    boxes: Var,
    gts: &[LabeledBox],
    cfg: &MatchCostConfig,
    fixed: Option<&Assignment>,
) -> Result<(FrameLoss, Assignment)> {
    let ls = tape.shape(logits);
    if ls.len() != 2 || tape.shape(boxes) != vec![ls[0], 4] {
        return Err(Error::Dimension {
            op: "set_loss",
            lhs: ls,
            rhs: tape.shape(boxes),
        });
    }
    let (queries, classes) = (ls[0], ls[1]);
    if gts.len() > queries {
        return Err(Error::Capacity {
            needed: gts.len(),
            available: queries,
        });
    }
    if let Some(gt) = gts.iter().find(|g| g.class >= classes) {
        return Err(Error::Input(format!("class {} outside {classes} classes", gt.class)));
    }
    let assignment = match fixed {
        Some(a) => a.clone(),
        None => {
            let cost = cost_matrix(tape, logits, boxes, gts, cfg)?;
            Assignment {
                pred_for_gt: hungarian_rect(&cost, queries)?,
                queries,
            }
        }
    };

    let mut target = vec![T::zero(); queries * classes];
    for (gt, &q) in gts.iter().zip(&assignment.pred_for_gt) {
        target[q * classes + gt.class] = T::one();
    }
    let focal = tape.focal_loss(logits, &target, cfg.focal_alpha, cfg.focal_gamma)?;
    let cls = tape.scale(tape.sum(focal), T::from_f64(cfg.lambda_cls));

    let (giou, l1) = if gts.is_empty() {
        let zero = tape.constant_from(&[1], vec![T::zero()])?;
        (zero, zero)
    } else {
        let matched = tape.gather_rows(boxes, &assignment.pred_for_gt)?;
        let tb: Vec<T> = gts.iter().flat_map(|g| g.bbox.to_array()).map(T::from_f64).collect();
        let giou = tape.scale(tape.sum(tape.giou_loss(matched, &tb)?), T::from_f64(cfg.lambda_giou));
        let l1 = tape.scale(tape.sum(tape.l1_loss(matched, &tb)?), T::from_f64(cfg.lambda_l1));
        (giou, l1)
    };
    let total = tape.add(cls, giou)?;
    let total = tape.add(total, l1)?;
    Ok((FrameLoss { total, cls, giou, l1 }, assignment))
}

/// Sum of per-frame losses divided by `max(total ground truths, 1)`.
pub fn normalize_clip_loss<T: Scalar>(tape: &Tape<T>, frames: &[Var], gt_count: usize) -> Result<Var> {
    let Some((&first, rest)) = frames.split_first() else {
        return Err(Error::Precondition("clip loss over zero frames".into()));
    };
    let mut total = first;
    for &f in rest {
        total = tape.add(total, f)?;
    }
    Ok(tape.scale(total, T::from_f64(1.0 / gt_count.max(1) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn total(cost: &[Vec<f64>], perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
            .collect()
    }

    #[test]
    fn focal_scalar_cases() {
        assert!(focal_loss(30.0, true, 0.25, 2.0) < 1e-12);
        let ln2 = 2f64.ln();
        assert!((focal_loss(0.0, true, 0.25, 2.0) - 0.25 * 0.25 * ln2).abs() < 1e-12);
        assert!((focal_loss(0.0, false, 0.25, 2.0) - 0.75 * 0.25 * ln2).abs() < 1e-12);
        assert!((focal_loss(0.0, true, 0.25, 2.0) - 0.04332).abs() < 1e-4);
        assert!((focal_loss(0.0, false, 0.25, 2.0) - 0.12997).abs() < 1e-4);
        // Large negative logit for a positive target stays finite.
        assert!(focal_loss(-200.0, true, 0.25, 2.0).is_finite());
    }

    #[test]
    fn hungarian_small_cases() {
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..4).map(|c| if r == c { 0.0 } else { 1.0 }).collect())
            .collect();
        assert_eq!(hungarian(&eye).unwrap(), vec![0, 1, 2, 3]);
        let m = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        let p = hungarian(&m).unwrap();
        assert_eq!(p, vec![1, 0]);
        assert_eq!(total(&m, &p), 4.0);
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
        assert!(hungarian(&[vec![1.0, 2.0]]).is_err());
        assert_eq!(hungarian(&[]).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn hungarian_ties_pick_lexicographically_smallest() {
        let flat = vec![vec![1.0; 4]; 4];
        assert_eq!(hungarian(&flat).unwrap(), vec![0, 1, 2, 3]);
        // Two optima: [1, 0, 2] and [2, 0, 1] both cost 0; [1, 0, 2] is smaller.
        let m = vec![vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 5.0], vec![5.0, 0.0, 0.0]];
        assert_eq!(hungarian(&m).unwrap(), vec![1, 0, 2]);
        // Exhaustive check on integer matrices with many ties.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let m: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0..3) as f64).collect())
                .collect();
            let best = permutations(n)
                .into_iter()
                .map(|p| (total(&m, &p), p))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                .unwrap();
            assert_eq!(hungarian(&m).unwrap(), best.1, "{m:?}");
        }
    }

    #[test]
    fn hungarian_matches_brute_force_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let perms = permutations(6);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 6);
            let best = perms.iter().map(|p| total(&m, p)).fold(f64::INFINITY, f64::min);
            let got = total(&m, &hungarian(&m).unwrap());
            assert!((got - best).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn hungarian_beats_random_permutations(n in 1usize..=12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n);
            let got = total(&m, &hungarian(&m).unwrap());
            let mut perm: Vec<usize> = (0..n).collect();
            for _ in 0..1000 {
                for i in (1..n).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                prop_assert!(got <= total(&m, &perm) + 1e-9);
            }
        }
    }

    // Scalar re-implementation of the cost, written out term by term.
    fn oracle_cost(logit: f64, pred: [f64; 4], gt: [f64; 4]) -> f64 {
        let p = 1.0 / (1.0 + (-logit).exp());
        let cls = -0.25 * (1.0 - p).powi(2) * p.ln();
        let c = |b: [f64; 4]| {
            [
                b[0] - b[2] / 2.0,
                b[1] - b[3] / 2.0,
                b[0] + b[2] / 2.0,
                b[1] + b[3] / 2.0,
            ]
        };
        let (a, b) = (c(pred), c(gt));
        let inter = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) * (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let union = pred[2] * pred[3] + gt[2] * gt[3] - inter;
        let encl = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
        let g = inter / union - (encl - union) / encl;
        let l1: f64 = (0..4).map(|i| (pred[i] - gt[i]).abs()).sum();
        2.0 * cls + 2.0 * (1.0 - g) + 5.0 * l1
    }

    #[test]
    fn cost_matrix_matches_scalar_oracle() {
        let tape = Tape::<f64>::new();
        let logits = [0.3, -1.2, 2.0, 0.1, -0.4, 1.5];
        let boxes = [
            0.5, 0.5, 0.2, 0.3, //
            0.3, 0.6, 0.4, 0.2, //
            0.7, 0.2, 0.1, 0.1,
        ];
        let lv = tape.constant(&Tensor::from_f64(&[3, 2], &logits).unwrap());
        let bv = tape.constant(&Tensor::from_f64(&[3, 4], &boxes).unwrap());
        let gts = [
            LabeledBox {
                class: 1,
                bbox: NormBox::new(0.45, 0.5, 0.25, 0.3).unwrap(),
            },
            LabeledBox {
                class: 0,
                bbox: NormBox::new(0.7, 0.25, 0.15, 0.1).unwrap(),
            },
        ];
        let m = cost_matrix(&tape, lv, bv, &gts, &MatchCostConfig::default()).unwrap();
        for (j, gt) in gts.iter().enumerate() {
            for q in 0..3 {
                let mut pb = [0.0; 4];
                pb.copy_from_slice(&boxes[q * 4..q * 4 + 4]);
                let want = oracle_cost(logits[q * 2 + gt.class], pb, gt.bbox.to_array());
                assert!((m[j][q] - want).abs() < 1e-6, "{j} {q}");
            }
        }
    }

    #[test]
    fn identical_predictions_differ_only_through_box_terms() {
        let pred = Prediction {
            logits: &[0.7, 0.7],
            bbox: NormBox::new(0.5, 0.5, 0.3, 0.3).unwrap(),
        };
        let g1 = LabeledBox {
            class: 0,
            bbox: NormBox::new(0.5, 0.5, 0.3, 0.3).unwrap(),
        };
        let g2 = LabeledBox {
            class: 1,
            bbox: NormBox::new(0.4, 0.5, 0.3, 0.3).unwrap(),
        };
        let cfg = MatchCostConfig::default();
        let diff = match_cost(&pred, &g2, &cfg).unwrap() - match_cost(&pred, &g1, &cfg).unwrap();
        let g = giou(&g2.bbox, &pred.bbox).unwrap();
        assert!((diff - (2.0 * (1.0 - g) + 5.0 * 0.1)).abs() < 1e-12);
        let perfect = Prediction {
            logits: &[40.0, 0.0],
            bbox: g1.bbox,
        };
        assert!(match_cost(&perfect, &g1, &cfg).unwrap() < 1e-12);
    }

    fn frame(tape: &Tape<f64>, logits: &[f64], boxes: &[f64], classes: usize) -> (Var, Var) {
        let l = boxes.len() / 4;
        (
            tape.param(&Tensor::from_f64(&[l, classes], logits).unwrap()),
            tape.param(&Tensor::from_f64(&[l, 4], boxes).unwrap()),
        )
    }

    #[test]
    fn empty_frame_is_pure_negative_classification() {
        let tape = Tape::<f64>::new();
        let logits = [0.2, -1.0, 0.5, 0.0, 1.0, -2.0];
        let (lv, bv) = frame(
            &tape,
            &logits,
            &[0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1, 0.6, 0.6, 0.3, 0.2],
            2,
        );
        let (loss, a) = set_loss(&tape, lv, bv, &[], &MatchCostConfig::default(), None).unwrap();
        let want: f64 = logits.iter().map(|&x| 2.0 * focal_loss(x, false, 0.25, 2.0)).sum();
        assert!((tape.scalar(loss.total) - want).abs() < 1e-12);
        assert!(a.pred_for_gt.is_empty());
        assert_eq!(a.permutation(), vec![0, 1, 2]);
    }

    #[test]
    fn perfect_single_prediction_has_near_zero_loss() {
        let tape = Tape::<f64>::new();
        let (lv, bv) = frame(&tape, &[40.0, -40.0], &[0.4, 0.6, 0.2, 0.3], 2);
        let gt = [LabeledBox {
            class: 0,
            bbox: NormBox::new(0.4, 0.6, 0.2, 0.3).unwrap(),
        }];
        let (loss, _) = set_loss(&tape, lv, bv, &gt, &MatchCostConfig::default(), None).unwrap();
        assert!(tape.scalar(loss.total) < 1e-9);
    }

    #[test]
    fn capacity_is_enforced() {
        let tape = Tape::<f64>::new();
        let (lv, bv) = frame(&tape, &[0.0, 0.0], &[0.4, 0.6, 0.2, 0.3], 2);
        let g = LabeledBox {
            class: 0,
            bbox: NormBox::full_frame(),
        };
        let r = set_loss(&tape, lv, bv, &[g, g], &MatchCostConfig::default(), None);
        assert!(matches!(
            r,
            Err(Error::Capacity {
                needed: 2,
                available: 1
            })
        ));
    }

    #[test]
    fn matching_equals_brute_force_l4() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = MatchCostConfig::default();
        for _ in 0..20 {
            let tape = Tape::<f64>::new();
            let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let boxes: Vec<f64> = (0..16)
                .map(|i| {
                    if i % 4 < 2 {
                        rng.gen_range(0.2..0.8)
                    } else {
                        rng.gen_range(0.1..0.4)
                    }
                })
                .collect();
            let (lv, bv) = frame(&tape, &logits, &boxes, 3);
            let gts: Vec<LabeledBox> = (0..2)
                .map(|_| LabeledBox {
                    class: rng.gen_range(0..3),
                    bbox: NormBox::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), 0.2, 0.25).unwrap(),
                })
                .collect();
            let (_, a) = set_loss(&tape, lv, bv, &gts, &cfg, None).unwrap();
            let cost = cost_matrix(&tape, lv, bv, &gts, &cfg).unwrap();
            let mut best = (f64::INFINITY, vec![]);
            for p in 0..4 {
                for q in 0..4 {
                    if p != q && cost[0][p] + cost[1][q] < best.0 {
                        best = (cost[0][p] + cost[1][q], vec![p, q]);
                    }
                }
            }
            assert_eq!(a.pred_for_gt, best.1);
        }
    }

    #[test]
    fn permuting_predictions_permutes_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = MatchCostConfig::default();
        let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let boxes: Vec<f64> = (0..20)
            .map(|i| {
                if i % 4 < 2 {
                    rng.gen_range(0.2..0.8)
                } else {
                    rng.gen_range(0.1..0.4)
                }
            })
            .collect();
        let gts = [
            LabeledBox {
                class: 1,
                bbox: NormBox::new(0.3, 0.3, 0.2, 0.2).unwrap(),
            },
            LabeledBox {
                class: 0,
                bbox: NormBox::new(0.6, 0.7, 0.3, 0.2).unwrap(),
            },
        ];
        let perm = [3usize, 0, 4, 1, 2];
        let tape = Tape::<f64>::new();
        let (lv, bv) = frame(&tape, &logits, &boxes, 2);
        let (l0, a0) = set_loss(&tape, lv, bv, &gts, &cfg, None).unwrap();
        let pl: Vec<f64> = perm.iter().flat_map(|&q| logits[q * 2..q * 2 + 2].to_vec()).collect();
        let pb: Vec<f64> = perm.iter().flat_map(|&q| boxes[q * 4..q * 4 + 4].to_vec()).collect();
        let (lv2, bv2) = frame(&tape, &pl, &pb, 2);
        let (l1, a1) = set_loss(&tape, lv2, bv2, &gts, &cfg, None).unwrap();
        for (j, &q) in a1.pred_for_gt.iter().enumerate() {
            assert_eq!(perm[q], a0.pred_for_gt[j]);
        }
        // Summation order over queries changes, so compare to rounding.
        assert!((tape.scalar(l0.total) - tape.scalar(l1.total)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_clip_keeps_normalized_loss() {
        let cfg = MatchCostConfig::default();
        let logits = [0.4, -0.3, 1.1, -2.0];
        let boxes = [0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.2, 0.1];
        let gt = [LabeledBox {
            class: 1,
            bbox: NormBox::new(0.45, 0.5, 0.2, 0.25).unwrap(),
        }];
        let tape = Tape::<f64>::new();
        let mut frames = Vec::new();
        for _ in 0..2 {
            let (lv, bv) = frame(&tape, &logits, &boxes, 2);
            frames.push(set_loss(&tape, lv, bv, &gt, &cfg, None).unwrap().0.total);
        }
        let one = normalize_clip_loss(&tape, &frames[..1], 1).unwrap();
        let two = normalize_clip_loss(&tape, &frames, 2).unwrap();
        assert!((tape.scalar(one) - tape.scalar(two)).abs() < 1e-12);
        assert!(normalize_clip_loss(&tape, &[], 0).is_err());
    }
}
