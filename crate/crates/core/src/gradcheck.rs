//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test hook forwarded to [`Tape::inject_fault`] for the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub passed: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Numeric(format!("checked function returned {v}")));
    }
    Ok(v)
}

/// Compares analytic gradients of a scalar function of several inputs with
/// central differences.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    tape.inject_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: tape.shape(out),
            rhs: vec![1],
        });
    }
    if !tape.scalar(out).is_finite() {
        return Err(Error::Numeric("checked function is not finite".into()));
    }
    let grads = tape.backward(out)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let n = inputs[which].len();
        let analytic = grads.wrt(*var, n);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + opts.step;
            let up = eval(&f, &work)?;
            work[which].data_mut()[idx] = orig - opts.step;
            let down = eval(&f, &work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[idx];
            let abs = (a - numeric).abs();
            let rel = abs / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (which, idx);
            }
        }
    }
    report.passed = report.max_rel_err < opts.tol;
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_matches_closed_form() {
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(v).unwrap(), &[2.0, 4.0]);

        let report = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed && report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_exactly_zero_error() {
        let x = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let report = grad_check(
            |t, _| t.constant_from(&[1], vec![4.0]),
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let r = grad_check(
            |t, _| t.constant_from(&[1], vec![f64::INFINITY]),
            &x,
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_f64(&[2], &[0.3, -0.7]).unwrap();
        let opts = GradCheckOptions {
            fault: Some(OpKind::Relu),
            ..Default::default()
        };
        let r = grad_check(|t, v| Ok(t.sum(t.relu(t.scale(v, -2.0)))), &x, &opts).unwrap();
        assert!(!r.passed);
    }
}

pub mod suite {
    //! Randomised gradient checks for every differentiable primitive.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::{grad_check_many, GradCheckOptions, GradCheckReport};
    use crate::error::Result;
    use crate::geometry::{roi_sample, NormBox};
    use crate::tape::{OpKind, Tape, Var};
    use crate::tensor::Tensor;

    type CheckFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

    struct Case {
        kind: OpKind,
        inputs: Vec<Tensor<f64>>,
        f: CheckFn,
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    // Contracts an op output with fixed random weights so every output
    // element carries a distinct adjoint.
    fn project(tape: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let shape = tape.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_t(&mut rng, &shape, -1.0, 1.0);
        let w = tape.constant(&w);
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
        let mut v: Vec<Case> = Vec::new();
        let m = rng.gen_range(2..5);
        let k = rng.gen_range(2..5);
        let n = rng.gen_range(2..5);
        v.push(Case {
            kind: OpKind::MatMul,
            inputs: vec![rand_t(rng, &[m, k], -1.0, 1.0), rand_t(rng, &[k, n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.matmul(x[0], x[1])?, 1)),
        });
        v.push(Case {
            kind: OpKind::Transpose,
            inputs: vec![rand_t(rng, &[m, k], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.transpose(x[0])?, 2)),
        });
        let pair = vec![rand_t(rng, &[m, n], -1.0, 1.0), rand_t(rng, &[m, n], -1.0, 1.0)];
        v.push(Case {
            kind: OpKind::Add,
            inputs: pair.clone(),
            f: Box::new(|t, x| project(t, t.add(x[0], x[1])?, 3)),
        });
        v.push(Case {
            kind: OpKind::Sub,
            inputs: pair.clone(),
            f: Box::new(|t, x| project(t, t.sub(x[0], x[1])?, 4)),
        });
        v.push(Case {
            kind: OpKind::Mul,
            inputs: pair,
            f: Box::new(|t, x| project(t, t.mul(x[0], x[1])?, 5)),
        });
        v.push(Case {
            kind: OpKind::AddBias,
            inputs: vec![rand_t(rng, &[m, n], -1.0, 1.0), rand_t(rng, &[n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.add_bias(x[0], x[1])?, 6)),
        });
        v.push(Case {
            kind: OpKind::Scale,
            inputs: vec![rand_t(rng, &[m, n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.scale(x[0], -1.7), 7)),
        });
        // Keep relu inputs away from the kink.
        let mut relu_in = rand_t(rng, &[m, n], 0.1, 1.0);
        for (i, val) in relu_in.data_mut().iter_mut().enumerate() {
            if i % 2 == 0 {
                *val = -*val;
            }
        }
        v.push(Case {
            kind: OpKind::Relu,
            inputs: vec![relu_in],
            f: Box::new(|t, x| project(t, t.relu(x[0]), 8)),
        });
        v.push(Case {
            kind: OpKind::Sigmoid,
            inputs: vec![rand_t(rng, &[m, n], -3.0, 3.0)],
            f: Box::new(|t, x| project(t, t.sigmoid(x[0]), 9)),
        });
        v.push(Case {
            kind: OpKind::Softmax,
            inputs: vec![rand_t(rng, &[m, n], -2.0, 2.0)],
            f: Box::new(|t, x| project(t, t.softmax(x[0])?, 10)),
        });
        v.push(Case {
            kind: OpKind::LogSoftmax,
            inputs: vec![rand_t(rng, &[m, n], -2.0, 2.0)],
            f: Box::new(|t, x| project(t, t.log_softmax(x[0])?, 11)),
        });
        v.push(Case {
            kind: OpKind::LayerNorm,
            inputs: vec![
                rand_t(rng, &[1, 8], -2.0, 2.0),
                rand_t(rng, &[8], 0.5, 1.5),
                rand_t(rng, &[8], -0.5, 0.5),
            ],
            f: Box::new(|t, x| project(t, t.layer_norm(x[0], x[1], x[2], 1e-5)?, 12)),
        });
        v.push(Case {
            kind: OpKind::L2Normalize,
            inputs: vec![rand_t(rng, &[m, 5], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.l2_normalize(x[0]), 13)),
        });
        // Multi-head attention with projections at d = 8, two heads.
        let (nq, nk, d) = (3, 4, 8);
        v.push(Case {
            kind: OpKind::Attention,
            inputs: vec![
                rand_t(rng, &[nq, d], -1.0, 1.0),
                rand_t(rng, &[nk, d], -1.0, 1.0),
                rand_t(rng, &[nk, d], -1.0, 1.0),
                rand_t(rng, &[d, d], -0.5, 0.5),
                rand_t(rng, &[d, d], -0.5, 0.5),
                rand_t(rng, &[d, d], -0.5, 0.5),
            ],
            f: Box::new(move |t, x| {
                let q = t.matmul(x[0], x[3])?;
                let k = t.matmul(x[1], x[4])?;
                let v = t.matmul(x[2], x[5])?;
                let ranges = vec![(0, 4), (1, 2), (3, 1)];
                project(t, t.attention(q, k, v, 2, ranges)?, 14)
            }),
        });
        v.push(Case {
            kind: OpKind::ConcatRows,
            inputs: vec![rand_t(rng, &[2, n], -1.0, 1.0), rand_t(rng, &[3, n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.concat_rows(&[x[0], x[1], x[0]])?, 15)),
        });
        v.push(Case {
            kind: OpKind::SliceRows,
            inputs: vec![rand_t(rng, &[5, n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.slice_rows(x[0], 1, 3)?, 16)),
        });
        v.push(Case {
            kind: OpKind::GatherRows,
            inputs: vec![rand_t(rng, &[4, n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.gather_rows(x[0], &[3, 0, 3, 1])?, 17)),
        });
        let roi_box = NormBox::new(
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.3..0.7),
            rng.gen_range(0.2..0.6),
            rng.gen_range(0.2..0.6),
        )
        .unwrap();
        v.push(Case {
            kind: OpKind::RowMix,
            inputs: vec![rand_t(rng, &[4, 4, 3], -1.0, 1.0)],
            f: Box::new(move |t, x| project(t, roi_sample(t, x[0], &roi_box, 3)?, 18)),
        });
        v.push(Case {
            kind: OpKind::Reshape,
            inputs: vec![rand_t(rng, &[2, 6], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.reshape(x[0], &[3, 4])?, 19)),
        });
        v.push(Case {
            kind: OpKind::Conv2d,
            inputs: vec![
                rand_t(rng, &[6, 6, 2], -1.0, 1.0),
                rand_t(rng, &[3 * 3 * 2, 3], -0.5, 0.5),
                rand_t(rng, &[3], -0.5, 0.5),
            ],
            f: Box::new(|t, x| project(t, t.conv2d(x[0], x[1], x[2], 3, 2, 1)?, 20)),
        });
        let base: Vec<f64> = (0..8)
            .map(|i| {
                if i % 4 < 2 {
                    rng.gen_range(0.2..0.8)
                } else {
                    rng.gen_range(0.1..0.5)
                }
            })
            .collect();
        v.push(Case {
            kind: OpKind::ApplyDelta,
            inputs: vec![rand_t(rng, &[2, 4], -1.0, 1.0)],
            f: Box::new(move |t, x| project(t, t.apply_delta(x[0], &base)?, 21)),
        });
        // Overlapping and disjoint box pairs.
        let pred = Tensor::from_f64(&[2, 4], &[0.45, 0.5, 0.3, 0.35, 0.2, 0.2, 0.1, 0.15]).unwrap();
        let target = vec![0.5, 0.55, 0.25, 0.3, 0.7, 0.75, 0.2, 0.2];
        let giou_target = target.clone();
        v.push(Case {
            kind: OpKind::GiouLoss,
            inputs: vec![pred.clone()],
            f: Box::new(move |t, x| project(t, t.giou_loss(x[0], &giou_target)?, 22)),
        });
        v.push(Case {
            kind: OpKind::L1Loss,
            inputs: vec![pred],
            f: Box::new(move |t, x| project(t, t.l1_loss(x[0], &target)?, 23)),
        });
        let targets: Vec<f64> = (0..m * n).map(|i| (i % 3 == 0) as u8 as f64).collect();
        v.push(Case {
            kind: OpKind::FocalLoss,
            inputs: vec![rand_t(rng, &[m, n], -3.0, 3.0)],
            f: Box::new(move |t, x| project(t, t.focal_loss(x[0], &targets, 0.25, 2.0)?, 24)),
        });
        v.push(Case {
            kind: OpKind::Sum,
            inputs: vec![rand_t(rng, &[m, n], -1.0, 1.0)],
            f: Box::new(|t, x| {
                let sq = t.mul(x[0], x[0])?;
                Ok(t.sum(sq))
            }),
        });
        v.push(Case {
            kind: OpKind::Pick,
            inputs: vec![rand_t(rng, &[m, n], -1.0, 1.0)],
            f: Box::new(|t, x| project(t, t.pick(x[0], &[0, 2, 0, 1])?, 25)),
        });
        v
    }

    /// Runs a randomised gradient check for every differentiable primitive.
    pub fn check_primitives(seed: u64, opts: &GradCheckOptions) -> Vec<(OpKind, Result<GradCheckReport>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cases(&mut rng)
            .into_iter()
            .map(|c| (c.kind, grad_check_many(c.f, &c.inputs, opts)))
            .collect()
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn every_primitive_passes_at_1e4() {
            for seed in 0..3 {
                let results = check_primitives(seed, &GradCheckOptions::default());
                assert!(results.len() >= 12);
                for (kind, r) in results {
                    let r = r.unwrap();
                    assert!(r.passed, "seed {seed} {kind}: {r:?}");
                }
            }
        }

        #[test]
        fn corrupted_adjoint_is_caught_by_name() {
            let opts = GradCheckOptions {
                fault: Some(OpKind::LayerNorm),
                ..Default::default()
            };
            let failed: Vec<OpKind> = check_primitives(0, &opts)
                .into_iter()
                .filter(|(_, r)| !r.as_ref().unwrap().passed)
                .map(|(k, _)| k)
                .collect();
            assert_eq!(failed, vec![OpKind::LayerNorm]);
        }
    }
}
