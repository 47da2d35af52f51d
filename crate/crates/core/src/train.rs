//! Two-stage training loop and clip inference.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{ClipDetections, Detection, SCORE_THRESHOLD};
use crate::geometry::sigmoid;
use crate::matching::TrackedBox;
use crate::model::{clip_forward, clip_loss, is_ica_param, Bound, ForwardOptions, ModelConfig, Params};
use crate::optim::{AdamW, AdamWConfig, StepSchedule};
use crate::scalar::Scalar;
use crate::synthvid::{ClipSample, Dataset};
use crate::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoIca,
    OracleIca,
    FixedQueries,
    WithEncoder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoIca,
        Variant::OracleIca,
        Variant::FixedQueries,
        Variant::WithEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIca => "no_ica",
            Variant::OracleIca => "oracle_ica",
            Variant::FixedQueries => "fixed_queries",
            Variant::WithEncoder => "with_encoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// The architecture this variant runs.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::FixedQueries => cfg.fixed_queries = true,
            Variant::WithEncoder => cfg.encoder = true,
            _ => {}
        }
        cfg
    }

    /// Whether aggregation runs at inference.
    pub fn uses_ica(self) -> bool {
        self != Variant::NoIca
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// 1 trains everything except the aggregation and identity modules;
    /// 2 trains the whole model.
    pub stage: u8,
    pub variant: Variant,
    pub iters: usize,
    pub schedule: StepSchedule,
    /// Clips per iteration.
    pub batch: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            variant: Variant::Full,
            iters: 2000,
            schedule: StepSchedule {
                base: 1e-3,
                milestones: vec![1500],
                factor: 0.1,
            },
            batch: 2,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            iters: 600,
            schedule: StepSchedule {
                base: 1e-4,
                milestones: vec![400],
                factor: 0.1,
            },
            ..Self::stage1()
        }
    }

    /// Shrinks the iteration count and milestones by the same factor.
    pub fn scaled(mut self, factor: f64) -> Self {
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        self.iters = s(self.iters);
        self.schedule.milestones = self.schedule.milestones.iter().map(|&m| s(m)).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.schedule.base > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.adamw.validate()
    }

    /// Aggregation is active during this stage.
    pub fn ica_active(&self) -> bool {
        self.stage == 2 && self.variant.uses_ica()
    }

    pub fn trains(&self, name: &str) -> bool {
        self.stage == 2 || !is_ica_param(name)
    }

    pub fn to_kv(&self) -> String {
        let ms: Vec<String> = self.schedule.milestones.iter().map(usize::to_string).collect();
        let clip = self.adamw.clip_norm.map_or("none".into(), |c| c.to_string());
        format!(
            "stage={}\nvariant={}\niters={}\nlr={}\nlr_milestones={}\nlr_factor={}\nbatch={}\nseed={}\n\
             beta1={}\nbeta2={}\nadam_eps={}\nweight_decay={}\nclip_norm={clip}\n",
            self.stage,
            self.variant,
            self.iters,
            self.schedule.base,
            ms.join(","),
            self.schedule.factor,
            self.batch,
            self.seed,
            self.adamw.beta1,
            self.adamw.beta2,
            self.adamw.eps,
            self.adamw.weight_decay,
        )
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
        }
        match key {
            "stage" => self.stage = num(key, value)?,
            "variant" => {
                self.variant =
                    Variant::parse(value).ok_or_else(|| Error::Config(format!("unknown variant `{value}`")))?
            }
            "iters" => self.iters = num(key, value)?,
            "lr" => self.schedule.base = num(key, value)?,
            "lr_milestones" => {
                self.schedule.milestones = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| num(key, s))
                    .collect::<Result<_>>()?
            }
            "lr_factor" => self.schedule.factor = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "beta1" => self.adamw.beta1 = num(key, value)?,
            "beta2" => self.adamw.beta2 = num(key, value)?,
            "adam_eps" => self.adamw.eps = num(key, value)?,
            "weight_decay" => self.adamw.weight_decay = num(key, value)?,
            "clip_norm" => self.adamw.clip_norm = if value == "none" { None } else { Some(num(key, value)?) },
            _ => return Err(Error::Config(format!("unknown training key `{key}`"))),
        }
        Ok(())
    }
}

/// Loss components averaged over one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub iter: usize,
    pub total: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
    pub con: f64,
}

impl LogLine {
    pub const HEADER: &'static str = "iter\ttotal\tcls\tgiou\tl1\tcon";
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.iter, self.total, self.cls, self.giou, self.l1, self.con
        )
    }
}

/// Clips and sorted frame indices of iteration `iter`.
pub fn batch_plan(
    seed: u64,
    stage: u8,
    iter: usize,
    clips: usize,
    frames: usize,
    t: usize,
    batch: usize,
) -> Vec<(usize, Vec<usize>)> {
    let mix =
        seed ^ (stage as u64).wrapping_mul(0xA076_1D64_78BD_642F) ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    (0..batch)
        .map(|_| {
            let c = rng.gen_range(0..clips);
            let mut idx = sample(&mut rng, frames, t.min(frames)).into_vec();
            idx.sort_unstable();
            (c, idx)
        })
        .collect()
}

struct SampleGrad {
    grads: BTreeMap<String, Vec<f64>>,
    parts: [f64; 5],
}

fn sample_grad<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    clip: &ClipSample,
) -> Result<SampleGrad> {
    let tape = Tape::<T>::new();
    let bound = Bound::new(params, true);
    let frames: Vec<_> = (0..clip.num_frames())
        .map(|i| tape.constant(&clip.frame_tensor::<T>(i)))
        .collect();
    let targets: Vec<Vec<TrackedBox>> = (0..clip.num_frames()).map(|i| clip.targets(i)).collect();
    let opts = ForwardOptions {
        ica: tc.ica_active(),
        ..Default::default()
    };
    let mut out = clip_forward(&tape, &bound, cfg, &frames, &opts)?;
    let loss = clip_loss(&tape, cfg, &mut out, &targets, None)?;
    let g = tape.backward(loss.total)?;
    let grads = bound
        .bound()
        .into_iter()
        .filter(|(name, _)| tc.trains(name))
        .filter_map(|(name, v)| g.get(v).map(|x| (name, x.iter().map(|v| v.as_f64()).collect())))
        .collect();
    let s = |v| tape.scalar(v).as_f64();
    Ok(SampleGrad {
        grads,
        parts: [s(loss.total), s(loss.cls), s(loss.giou), s(loss.l1), s(loss.con)],
    })
}

/// Runs `tc.iters` AdamW steps over random `cfg.frames`-frame samples of
/// the dataset clips. Batch gradients are averaged in batch order, so the
/// result does not depend on the number of worker threads.
pub fn train<T: Scalar>(
    params: &mut Params<T>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    data: &Dataset,
    mut on_step: impl FnMut(&LogLine),
) -> Result<Vec<LogLine>> {
    tc.validate()?;
    cfg.validate()?;
    if data.clips.is_empty() {
        return Err(Error::Precondition("training needs at least one clip".into()));
    }
    if data.height != cfg.height || data.width != cfg.width || data.classes != cfg.classes {
        return Err(Error::Config(format!(
            "dataset is {}x{} with {} classes but the model expects {}x{} with {}",
            data.height, data.width, data.classes, cfg.height, cfg.width, cfg.classes
        )));
    }
    let mut opt = AdamW::new(tc.adamw.clone())?;
    let mut log = Vec::with_capacity(tc.iters);
    for iter in 0..tc.iters {
        let plan = batch_plan(
            tc.seed,
            tc.stage,
            iter,
            data.clips.len(),
            data.frames,
            cfg.frames,
            tc.batch,
        );
        let samples: Vec<SampleGrad> = plan
            .par_iter()
            .map(|(c, idx)| sample_grad(params, cfg, tc, &data.clips[*c].select_frames(idx)))
            .collect::<Result<_>>()?;
        let inv = 1.0 / samples.len() as f64;
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut parts = [0.0; 5];
        for s in &samples {
            for (name, g) in &s.grads {
                let acc = grads.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * inv);
            }
            parts.iter_mut().zip(&s.parts).for_each(|(a, b)| *a += b * inv);
        }
        if !parts[0].is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {iter}")));
        }
        opt.step(params, &grads, tc.schedule.lr(iter))?;
        let line = LogLine {
            iter,
            total: parts[0],
            cls: parts[1],
            giou: parts[2],
            l1: parts[3],
            con: parts[4],
        };
        on_step(&line);
        log.push(line);
    }
    Ok(log)
}

/// Last-layer detections for a clip: every (query, class) pair scoring
/// above the threshold, without suppression.
pub fn detect_clip<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    variant: Variant,
    clip: &ClipSample,
) -> Result<ClipDetections> {
    let tape = Tape::<T>::new();
    let bound = Bound::new(params, false);
    let frames: Vec<_> = (0..clip.num_frames())
        .map(|i| tape.constant(&clip.frame_tensor::<T>(i)))
        .collect();
    let targets: Vec<Vec<TrackedBox>> = (0..clip.num_frames()).map(|i| clip.targets(i)).collect();
    let opts = ForwardOptions {
        ica: variant.uses_ica(),
        oracle: (variant == Variant::OracleIca).then_some(targets.as_slice()),
        ..Default::default()
    };
    let out = clip_forward(&tape, &bound, cfg, &frames, &opts)?;
    let states = out.query_states(&tape, cfg.decoder_layers - 1);
    Ok(states
        .iter()
        .map(|frame| {
            frame
                .iter()
                .flat_map(|q| {
                    q.p.iter().enumerate().filter_map(move |(class, &logit)| {
                        let score = sigmoid(logit);
                        (score > SCORE_THRESHOLD).then_some(Detection {
                            class,
                            score,
                            bbox: q.b,
                        })
                    })
                })
                .collect()
        })
        .collect())
}

/// Detections for every clip, running each clip as consecutive chunks of
/// `t` frames (the last chunk may be shorter).
pub fn detect_dataset<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    variant: Variant,
    clips: &[ClipSample],
    t: usize,
) -> Result<Vec<ClipDetections>> {
    if t == 0 {
        return Err(Error::Config("inference frames must be positive".into()));
    }
    clips
        .par_iter()
        .map(|clip| {
            let n = clip.num_frames();
            let mut dets = Vec::with_capacity(n);
            for start in (0..n).step_by(t) {
                let idx: Vec<usize> = (start..(start + t).min(n)).collect();
                dets.extend(detect_clip(params, cfg, variant, &clip.select_frames(&idx))?);
            }
            Ok(dets)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{generate_dataset, GenConfig};

    fn tiny() -> (ModelConfig, Dataset) {
        let cfg = ModelConfig {
            frames: 2,
            queries: 4,
            dim: 16,
            heads: 2,
            decoder_layers: 2,
            roi: 2,
            ica_topk: 2,
            height: 32,
            width: 32,
            backbone: vec![8, 16],
            ffn_mult: 2,
            ..ModelConfig::desk()
        };
        let gen = GenConfig {
            height: 32,
            width: 32,
            min_size_px: 6.0,
            max_size_px: 10.0,
            seed: 3,
            ..GenConfig::default()
        };
        (cfg, generate_dataset(&gen, 4).unwrap())
    }

    #[test]
    fn batch_plans_are_sorted_and_seeded() {
        let a = batch_plan(1, 1, 5, 10, 8, 4, 3);
        assert_eq!(a, batch_plan(1, 1, 5, 10, 8, 4, 3));
        assert_ne!(a, batch_plan(1, 2, 5, 10, 8, 4, 3));
        for (c, idx) in &a {
            assert!(*c < 10 && idx.len() == 4 && idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn config_round_trips_and_scales() {
        let mut tc = TrainConfig::stage2();
        tc.variant = Variant::NoIca;
        tc.adamw.clip_norm = None;
        let mut back = TrainConfig::stage1();
        for line in tc.to_kv().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        assert_eq!(back, tc);
        let s = TrainConfig::stage1().scaled(0.1);
        assert_eq!((s.iters, s.schedule.milestones), (200, vec![150]));
        assert!(back.set("stage", "x").is_err() && back.set("nope", "1").is_err());
    }

    #[test]
    fn stage_one_leaves_aggregation_untouched() {
        let (cfg, data) = tiny();
        let mut params = Params::<f32>::init(&cfg, 0).unwrap();
        let before = params.clone();
        let tc = TrainConfig {
            iters: 2,
            ..TrainConfig::stage1()
        };
        let log = train(&mut params, &cfg, &tc, &data, |_| {}).unwrap();
        assert!(log.iter().all(|l| l.con == 0.0));
        for (name, t) in params.iter() {
            let changed = t != before.get(name).unwrap();
            assert_eq!(changed, !is_ica_param(name), "{name}");
        }
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let (cfg, data) = tiny();
        let tc = TrainConfig {
            iters: 3,
            batch: 3,
            ..TrainConfig::stage2()
        };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut p = Params::<f32>::init(&cfg, 1).unwrap();
                let log = train(&mut p, &cfg, &tc, &data, |_| {}).unwrap();
                (p, log)
            })
        };
        let (pa, la) = run(1);
        let (pb, lb) = run(3);
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
        assert!(la.iter().any(|l| l.con > 0.0));
    }

    #[test]
    fn detections_respect_threshold_and_chunks() {
        let (cfg, data) = tiny();
        let params = Params::<f32>::init(&cfg, 2).unwrap();
        for t in [1, 3, 8] {
            let dets = detect_dataset(&params, &cfg, Variant::Full, &data.clips, t).unwrap();
            assert_eq!(dets.len(), data.clips.len());
            for (d, c) in dets.iter().zip(&data.clips) {
                assert_eq!(d.len(), c.num_frames());
                assert!(d
                    .iter()
                    .flatten()
                    .all(|x| x.score > SCORE_THRESHOLD && x.class < cfg.classes));
            }
        }
        let a = detect_dataset(&params, &cfg, Variant::OracleIca, &data.clips, 4).unwrap();
        assert_eq!(
            a,
            detect_dataset(&params, &cfg, Variant::OracleIca, &data.clips, 4).unwrap()
        );
    }

    #[test]
    fn variants_parse_and_shape_the_model() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.as_str()), Some(v));
        }
        assert!(Variant::FixedQueries.model_config(&ModelConfig::desk()).fixed_queries);
        assert!(Variant::WithEncoder.model_config(&ModelConfig::desk()).encoder);
        assert!(!Variant::NoIca.uses_ica());
    }
}
