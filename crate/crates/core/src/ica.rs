//! Identity-consistent aggregation: cross-frame identity matching, the
//! contrastive identity loss and attention over stacked region features.

use std::io::Write;

use crate::error::{Error, Result};
use crate::geometry::sigmoid;
use crate::matching::{Assignment, TrackedBox};
use crate::model::Bound;
use crate::model::{residual_ln, LnVars, MhaVars};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Anchor,
    Learned,
    Oracle,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Anchor => "anchor",
            Provenance::Learned => "learned",
            Provenance::Oracle => "oracle",
        }
    }
}

/// The partners of one anchor query: one `(frame, query)` per frame in
/// ascending frame order, the anchor itself included.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityMatch {
    pub anchor: (usize, usize),
    pub selected: Vec<(usize, usize)>,
    /// Identity similarity with the anchor for every selected entry.
    pub dots: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

/// Max-over-classes sigmoid score of every row of `logits[n × classes]`.
pub fn max_scores(logits: &[f64], classes: usize) -> Vec<f64> {
    logits
        .chunks(classes)
        .map(|row| row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(sigmoid(v))))
        .collect()
}

/// Indices of the `k` highest scores, best first; ties keep the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Argmax of `anchor · h` over `(index, h)` candidates; ties keep the
/// first candidate with the lowest index.
pub fn identity_match(anchor: &[f64], candidates: &[(usize, &[f64])]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &(j, h) in candidates {
        if h.len() != anchor.len() {
            return Err(Error::State(format!(
                "identity embedding of width {} against anchor width {}",
                h.len(),
                anchor.len()
            )));
        }
        let s = dot(anchor, h);
        match best {
            Some((bj, bs)) if s < bs || (s == bs && j > bj) => {}
            _ => best = Some((j, s)),
        }
    }
    best.ok_or_else(|| Error::State("identity matching without candidates".into()))
}

/// Learned partners for every top-k anchor, anchors in `(frame, query)`
/// order. `h` is `[T·L × d]`.
pub fn learned_matches(
    h: &[f64],
    d: usize,
    frames: usize,
    queries: usize,
    topk: &[Vec<usize>],
    wide: bool,
    frame_isolation: bool,
) -> Result<Vec<IdentityMatch>> {
    if h.len() != frames * queries * d || topk.len() != frames {
        return Err(Error::State(
            "identity embeddings or top-k sets do not cover the clip".into(),
        ));
    }
    let row = |i: usize, j: usize| &h[(i * queries + j) * d..(i * queries + j + 1) * d];
    let mut out = Vec::new();
    for m in 0..frames {
        let mut anchors = topk[m].clone();
        anchors.sort_unstable();
        for n in anchors {
            let anchor = row(m, n);
            let mut entry = IdentityMatch {
                anchor: (m, n),
                selected: Vec::with_capacity(frames),
                dots: Vec::with_capacity(frames),
                provenance: Vec::with_capacity(frames),
            };
            for i in 0..frames {
                if i == m {
                    entry.selected.push((m, n));
                    entry.dots.push(dot(anchor, anchor));
                    entry.provenance.push(Provenance::Anchor);
                    continue;
                }
                if frame_isolation {
                    continue;
                }
                let pool: Vec<usize> = if wide {
                    (0..queries).collect()
                } else {
                    let mut p = topk[i].clone();
                    p.sort_unstable();
                    p
                };
                let cands: Vec<(usize, &[f64])> = pool.iter().map(|&j| (j, row(i, j))).collect();
                let (j, s) = identity_match(anchor, &cands)?;
                entry.selected.push((i, j));
                entry.dots.push(s);
                entry.provenance.push(Provenance::Learned);
            }
            out.push(entry);
        }
    }
    Ok(out)
}

/// Track id owning each query of each frame under the given assignments.
pub fn track_owners(assignments: &[Assignment], targets: &[Vec<TrackedBox>], queries: usize) -> Vec<Vec<Option<u32>>> {
    assignments
        .iter()
        .zip(targets)
        .map(|(a, gts)| {
            let mut owners = vec![None; queries];
            for (g, &q) in gts.iter().zip(&a.pred_for_gt) {
                owners[q] = Some(g.track);
            }
            owners
        })
        .collect()
}

/// Replaces learned partners with the query assigned to the anchor's track
/// wherever that track is present; other frames keep the learned choice.
/// `h` (when given) refreshes the recorded similarities.
pub fn oracle_matches(
    learned: &[IdentityMatch],
    owners: &[Vec<Option<u32>>],
    h: Option<(&[f64], usize)>,
) -> Vec<IdentityMatch> {
    let queries = owners.first().map_or(0, Vec::len);
    learned
        .iter()
        .map(|m| {
            let (fm, qm) = m.anchor;
            let Some(track) = owners[fm][qm] else {
                return m.clone();
            };
            let mut out = m.clone();
            for k in 0..out.selected.len() {
                let (i, _) = out.selected[k];
                if i == fm {
                    continue;
                }
                if let Some(j) = owners[i].iter().position(|&o| o == Some(track)) {
                    out.selected[k] = (i, j);
                    out.provenance[k] = Provenance::Oracle;
                    if let Some((h, d)) = h {
                        let r = |f: usize, q: usize| &h[(f * queries + q) * d..(f * queries + q + 1) * d];
                        out.dots[k] = dot(r(fm, qm), r(i, j));
                    }
                }
            }
            out
        })
        .collect()
}

/// Parameters of one aggregation block.
#[derive(Clone, Copy, Debug)]
pub struct IcaParams {
    pub mha: MhaVars,
    pub pos_w: Var,
    pub pos_b: Var,
    pub ln: LnVars,
}

impl IcaParams {
    pub fn bind<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            mha: MhaVars::bind(tape, b, prefix)?,
            pos_w: b.get(tape, &format!("{prefix}.pos_w"))?,
            pos_b: b.get(tape, &format!("{prefix}.pos_b"))?,
            ln: LnVars::bind(tape, b, &format!("{prefix}.ln"))?,
        })
    }
}

/// Updates every anchor query with attention over its joint representation
/// `K_mn`: the region features of the selected queries stacked in frame
/// order, each `s²`-row block offset by a projection of its own query.
/// Non-anchor rows of `q` pass through unchanged.
///
/// `q` is `[T·L × d]`, `regions` is `[T·L·s² × d]`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate<T: Scalar>(
    tape: &Tape<T>,
    p: &IcaParams,
    q: Var,
    regions: Var,
    matches: &[IdentityMatch],
    queries: usize,
    s: usize,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    if matches.is_empty() {
        return Ok(q);
    }
    let n = tape.shape(q)[0];
    let s2 = s * s;
    let row = |(f, j): (usize, usize)| f * queries + j;

    let mut blocks: Vec<usize> = matches
        .iter()
        .flat_map(|m| m.selected.iter().map(|&x| row(x)))
        .collect();
    blocks.sort_unstable();
    blocks.dedup();
    let slot = |r: usize| blocks.binary_search(&r).expect("block collected above");

    let pos = tape.linear(tape.gather_rows(q, &blocks)?, p.pos_w, p.pos_b)?;
    let region_rows: Vec<usize> = blocks.iter().flat_map(|&r| r * s2..(r + 1) * s2).collect();
    let spread: Vec<usize> = (0..blocks.len()).flat_map(|u| std::iter::repeat_n(u, s2)).collect();
    let joint = tape.add(
        tape.gather_rows(regions, &region_rows)?,
        tape.gather_rows(pos, &spread)?,
    )?;
    let keys = tape.linear(joint, p.mha.wk, p.mha.bk)?;
    let values = tape.linear(joint, p.mha.wv, p.mha.bv)?;

    let mut key_rows = Vec::new();
    let mut ranges = Vec::with_capacity(matches.len());
    for m in matches {
        let start = key_rows.len();
        for &sel in &m.selected {
            let u = slot(row(sel));
            key_rows.extend(u * s2..(u + 1) * s2);
        }
        ranges.push((start, key_rows.len() - start));
    }
    let k = tape.gather_rows(keys, &key_rows)?;
    let v = tape.gather_rows(values, &key_rows)?;

    let anchor_rows: Vec<usize> = matches.iter().map(|m| row(m.anchor)).collect();
    let anchors = tape.gather_rows(q, &anchor_rows)?;
    let qp = tape.linear(anchors, p.mha.wq, p.mha.bq)?;
    let att = tape.attention(qp, k, v, heads, ranges)?;
    let out = tape.linear(att, p.mha.wo, p.mha.bo)?;
    let updated = residual_ln(tape, anchors, out, &p.ln, eps)?;

    let mut pick: Vec<usize> = (0..n).collect();
    for (a, &r) in anchor_rows.iter().enumerate() {
        pick[r] = n + a;
    }
    let both = tape.concat_rows(&[q, updated])?;
    tape.gather_rows(both, &pick)
}

/// Contrastive identity loss over every ordered pair of frames in which a
/// track is matched; the softmax of each pair runs over all queries of the
/// second frame. Returns the mean over pairs and the pair count; with no
/// pairs the loss is exactly zero.
pub fn contrastive_loss<T: Scalar>(
    tape: &Tape<T>,
    h: Var,
    frames: usize,
    queries: usize,
    owners: &[Vec<Option<u32>>],
) -> Result<(Var, usize)> {
    let n = frames * queries;
    if tape.shape(h)[0] != n || owners.len() != frames {
        return Err(Error::Dimension {
            op: "contrastive_loss",
            lhs: tape.shape(h),
            rhs: vec![frames, queries],
        });
    }
    let mut tracks: Vec<u32> = owners.iter().flatten().flatten().copied().collect();
    tracks.sort_unstable();
    tracks.dedup();
    let mut picks = Vec::new();
    for track in tracks {
        let hits: Vec<(usize, usize)> = owners
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.iter().position(|&x| x == Some(track)).map(|j| (i, j)))
            .collect();
        for &(m, a) in &hits {
            for &(i, b) in &hits {
                if i != m {
                    picks.push(((m * queries + a) * frames + i) * queries + b);
                }
            }
        }
    }
    if picks.is_empty() {
        return Ok((tape.constant_from(&[1], vec![T::zero()])?, 0));
    }
    let sims = tape.matmul(h, tape.transpose(h)?)?;
    let per_frame = tape.reshape(sims, &[n * frames, queries])?;
    let logp = tape.log_softmax(per_frame)?;
    let chosen = tape.sum(tape.pick(logp, &picks)?);
    Ok((tape.scale(chosen, T::from_f64(-1.0 / picks.len() as f64)), picks.len()))
}

/// Writes one line per selected partner: anchor, partner, similarity and
/// where the choice came from.
pub fn write_match_table(
    clip: u64,
    layer: usize,
    matches: &[IdentityMatch],
    out: &mut impl Write,
) -> std::io::Result<()> {
    for m in matches {
        for ((&(f, q), &d), p) in m.selected.iter().zip(&m.dots).zip(&m.provenance) {
            writeln!(
                out,
                "clip={clip} layer={layer} anchor={}:{} frame={f} query={q} dot={d:.6} source={}",
                m.anchor.0,
                m.anchor.1,
                p.as_str()
            )?;
        }
    }
    Ok(())
}
