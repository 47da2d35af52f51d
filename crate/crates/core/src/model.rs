//! The clip-wise detector: convolutional backbone, adaptive object queries,
//! decoder layers with extended self-attention, identity-consistent
//! aggregation and guided cross-attention, and per-layer detection heads.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::geometry::{avg_pool_plan, inverse_sigmoid, roi_plan, NormBox};
use crate::gradcheck::{grad_check_many, GradCheckOptions, GradCheckReport};
use crate::ica::{self, IcaParams, IdentityMatch};
use crate::init::{fan_in_uniform, uniform, InitRng};
use crate::matching::{
    cost_matrix, hungarian_rect, normalize_clip_loss, set_loss, Assignment, LabeledBox, MatchCostConfig, TrackedBox,
};
use crate::scalar::Scalar;
use crate::synthvid::{generate_clip, GenConfig};
use crate::tape::{RowMixPlan, Tape, Var};
use crate::tensor::Tensor;

/// Logit bias of the classification heads, `-ln((1 - π) / π)` with π = 0.01.
pub const CLS_PRIOR_BIAS: f64 = -4.59512;

/// Box extent the first layer's localisation bias starts from, so that the
/// full-frame reference is not refined from inside the logit clamp.
pub const FIRST_EXTENT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per training clip.
    pub frames: usize,
    /// Object queries per frame (L).
    pub queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    /// RoI grid side (s).
    pub roi: usize,
    /// Number of trailing decoder layers that run aggregation.
    pub ica_layers: usize,
    pub ica_topk: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the stride-2 convolution blocks.
    pub backbone: Vec<usize>,
    pub ffn_mult: usize,
    pub ln_eps: f64,
    pub encoder: bool,
    pub fixed_queries: bool,
    /// Add a learned embedding per feature-map cell to the backbone output.
    pub spatial_pos: bool,
    /// Identity matching searches all L queries of other frames, not only
    /// their top-k.
    pub wide_candidates: bool,
    pub contrastive_weight: f64,
    pub cost: MatchCostConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            frames: 4,
            queries: 8,
            dim: 32,
            heads: 4,
            decoder_layers: 3,
            roi: 4,
            ica_layers: 1,
            ica_topk: 4,
            classes: 5,
            height: 64,
            width: 64,
            backbone: vec![16, 32],
            ffn_mult: 4,
            ln_eps: 1e-5,
            encoder: false,
            fixed_queries: false,
            spatial_pos: false,
            wide_candidates: false,
            contrastive_weight: 1.0,
            cost: MatchCostConfig::default(),
        }
    }

    /// Two 8×8 frames through a two-layer decoder; small enough for
    /// finite differences over every parameter.
    pub fn micro() -> Self {
        Self {
            frames: 2,
            queries: 3,
            dim: 8,
            heads: 2,
            decoder_layers: 2,
            roi: 2,
            ica_layers: 1,
            ica_topk: 2,
            classes: 2,
            height: 8,
            width: 8,
            backbone: vec![4, 4],
            ffn_mult: 2,
            ..Self::desk()
        }
    }

    /// Full-size configuration. It validates but is too large to train on a CPU.
    pub fn large() -> Self {
        Self {
            frames: 3,
            queries: 72,
            dim: 384,
            heads: 8,
            decoder_layers: 6,
            roi: 7,
            ica_layers: 2,
            ica_topk: 10,
            classes: 30,
            height: 512,
            width: 512,
            backbone: vec![64, 128, 256, 512],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.queries == 0 || self.dim == 0 || self.classes == 0 || self.roi == 0 {
            return bad("frames, queries, dim, classes and roi must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.decoder_layers == 0 || self.ica_layers >= self.decoder_layers {
            return bad(format!(
                "ica_layers {} must be below decoder_layers {}",
                self.ica_layers, self.decoder_layers
            ));
        }
        if self.ica_topk == 0 || self.ica_topk > self.queries {
            return bad(format!("ica_topk {} must be in 1..={}", self.ica_topk, self.queries));
        }
        if self.backbone.is_empty() || self.backbone.contains(&0) {
            return bad("backbone needs at least one block with positive width".into());
        }
        let stride = self.stride();
        if !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return bad(format!(
                "frame {}x{} not divisible by backbone stride {stride}",
                self.height, self.width
            ));
        }
        if self.ffn_mult == 0 || !(self.ln_eps > 0.0) || !(self.contrastive_weight >= 0.0) {
            return bad("ffn_mult, ln_eps and contrastive_weight must be positive".into());
        }
        self.cost.validate()
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone.len()
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.height / self.stride(), self.width / self.stride())
    }

    /// Layer `l` aggregates across frames (never layer 0, which has no
    /// previous predictions).
    pub fn is_ica_layer(&self, l: usize) -> bool {
        l >= 1 && l + self.ica_layers >= self.decoder_layers
    }

    /// Layer `l` predicts identity embeddings for the next layer's matching.
    pub fn has_identity_head(&self, l: usize) -> bool {
        l + 1 < self.decoder_layers && self.is_ica_layer(l + 1)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let backbone: Vec<String> = self.backbone.iter().map(usize::to_string).collect();
        let c = &self.cost;
        for (k, v) in [
            ("frames", self.frames.to_string()),
            ("queries", self.queries.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("roi", self.roi.to_string()),
            ("ica_layers", self.ica_layers.to_string()),
            ("ica_topk", self.ica_topk.to_string()),
            ("classes", self.classes.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("backbone", backbone.join(",")),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("encoder", self.encoder.to_string()),
            ("fixed_queries", self.fixed_queries.to_string()),
            ("spatial_pos", self.spatial_pos.to_string()),
            ("wide_candidates", self.wide_candidates.to_string()),
            ("contrastive_weight", self.contrastive_weight.to_string()),
            ("lambda_cls", c.lambda_cls.to_string()),
            ("lambda_giou", c.lambda_giou.to_string()),
            ("lambda_l1", c.lambda_l1.to_string()),
            ("focal_alpha", c.focal_alpha.to_string()),
            ("focal_gamma", c.focal_gamma.to_string()),
        ] {
            writeln!(s, "{k}={v}").expect("string write");
        }
        s
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key.trim() {
            "frames" => self.frames = num(key, value)?,
            "queries" => self.queries = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "roi" => self.roi = num(key, value)?,
            "ica_layers" => self.ica_layers = num(key, value)?,
            "ica_topk" => self.ica_topk = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "backbone" => self.backbone = value.split(',').map(|v| num(key, v)).collect::<Result<_>>()?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "ln_eps" => self.ln_eps = num(key, value)?,
            "encoder" => self.encoder = num(key, value)?,
            "fixed_queries" => self.fixed_queries = num(key, value)?,
            "spatial_pos" => self.spatial_pos = num(key, value)?,
            "wide_candidates" => self.wide_candidates = num(key, value)?,
            "contrastive_weight" => self.contrastive_weight = num(key, value)?,
            "lambda_cls" => self.cost.lambda_cls = num(key, value)?,
            "lambda_giou" => self.cost.lambda_giou = num(key, value)?,
            "lambda_l1" => self.cost.lambda_l1 = num(key, value)?,
            "focal_alpha" => self.cost.focal_alpha = num(key, value)?,
            "focal_gamma" => self.cost.focal_gamma = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the desk defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
enum Init {
    FanIn(usize),
    Uniform(f64),
    Zeros,
    Ones,
    Const(f64),
    Values(Vec<f64>),
}

fn push_mha(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.w{p}"), vec![d, d], Init::FanIn(d)));
        out.push((format!("{prefix}.b{p}"), vec![d], Init::Zeros));
    }
}

fn push_ln(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.g"), vec![d], Init::Ones));
    out.push((format!("{prefix}.b"), vec![d], Init::Zeros));
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, w: String, b: String, i: usize, o: usize) {
    out.push((w, vec![i, o], Init::FanIn(i)));
    out.push((b, vec![o], Init::FanIn(i)));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let mut out = Vec::new();
    let mut cin = 3;
    for (i, &c) in cfg.backbone.iter().enumerate() {
        push_linear(&mut out, format!("bb.conv{i}.w"), format!("bb.conv{i}.b"), 9 * cin, c);
        cin = c;
    }
    push_linear(&mut out, "bb.proj.w".into(), "bb.proj.b".into(), cin, d);
    if cfg.spatial_pos {
        let (fh, fw) = cfg.feature_hw();
        out.push(("bb.pos".into(), vec![fh * fw, d], Init::Uniform(0.5)));
    }
    out.push(("query.e".into(), vec![cfg.queries, d], Init::Uniform(1.0)));
    let ffn = |out: &mut Vec<_>, p: &str| {
        push_linear(out, format!("{p}.w1"), format!("{p}.b1"), d, cfg.ffn_mult * d);
        push_linear(out, format!("{p}.w2"), format!("{p}.b2"), cfg.ffn_mult * d, d);
    };
    if cfg.encoder {
        push_mha(&mut out, "enc.sa", d);
        push_ln(&mut out, "enc.ln_sa", d);
        ffn(&mut out, "enc.ffn");
        push_ln(&mut out, "enc.ln_ffn", d);
    }
    for l in 0..cfg.decoder_layers {
        let p = format!("dec{l}");
        push_mha(&mut out, &format!("{p}.sa"), d);
        push_ln(&mut out, &format!("{p}.ln_sa"), d);
        if cfg.is_ica_layer(l) {
            push_mha(&mut out, &format!("{p}.ica"), d);
            // Aggregation starts as the identity on the query stream.
            if let Some(wo) = out.iter_mut().find(|e| e.0 == format!("{p}.ica.wo")) {
                wo.2 = Init::Zeros;
            }
            push_linear(&mut out, format!("{p}.ica.pos_w"), format!("{p}.ica.pos_b"), d, d);
            push_ln(&mut out, &format!("{p}.ica.ln"), d);
        }
        push_mha(&mut out, &format!("{p}.ca"), d);
        out.push((format!("{p}.ca.wp"), vec![d, cfg.roi * cfg.roi * d], Init::FanIn(d)));
        push_ln(&mut out, &format!("{p}.ln_ca"), d);
        ffn(&mut out, &format!("{p}.ffn"));
        push_ln(&mut out, &format!("{p}.ln_ffn"), d);
        out.push((format!("{p}.cls.w"), vec![d, cfg.classes], Init::FanIn(d)));
        out.push((format!("{p}.cls.b"), vec![cfg.classes], Init::Const(CLS_PRIOR_BIAS)));
        push_linear(&mut out, format!("{p}.loc.w1"), format!("{p}.loc.b1"), d, d);
        push_linear(&mut out, format!("{p}.loc.w2"), format!("{p}.loc.b2"), d, d);
        out.push((format!("{p}.loc.w3"), vec![d, 4], Init::Zeros));
        let b3 = if l == 0 {
            let e = inverse_sigmoid(FIRST_EXTENT) - inverse_sigmoid(1.0);
            Init::Values(vec![0.0, 0.0, e, e])
        } else {
            Init::Zeros
        };
        out.push((format!("{p}.loc.b3"), vec![4], b3));
        if cfg.has_identity_head(l) {
            push_linear(&mut out, format!("{p}.id.w1"), format!("{p}.id.b1"), d, d);
            push_linear(&mut out, format!("{p}.id.w2"), format!("{p}.id.b2"), d, d);
        }
    }
    out
}

/// Parameters owned by the aggregation modules and identity heads; frozen
/// during the first training stage.
pub fn is_ica_param(name: &str) -> bool {
    name.contains(".ica.") || name.contains(".id.")
}

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = InitRng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let t = match init {
                Init::FanIn(f) => fan_in_uniform(&mut rng, &shape, f),
                Init::Uniform(b) => uniform(&mut rng, &shape, b),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, T::one()),
                Init::Const(c) => Tensor::filled(&shape, T::from_f64(c)),
                Init::Values(v) => Tensor::from_f64(&shape, &v)?,
            };
            entries.insert(name, t);
        }
        Ok(Self { entries })
    }

    /// Rebuilds parameters from named tensors, checking them against `cfg`.
    pub fn from_entries(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        cfg.validate()?;
        let mut given: BTreeMap<String, Tensor<T>> = named.into_iter().collect();
        let mut entries = BTreeMap::new();
        for (name, shape, _) in layout(cfg) {
            let t = given
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}` required by the config")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "`{name}` has shape {:?} in the checkpoint but {shape:?} in the config",
                    t.shape()
                )));
            }
            entries.insert(name, t);
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint tensor `{extra}` is not part of the config"
            )));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn checkpoint_entries(&self) -> Vec<(&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }
}

/// Parameters placed on one tape, pushed lazily on first use.
pub struct Bound<'p, T: Scalar> {
    params: Option<&'p Params<T>>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'p, T: Scalar> Bound<'p, T> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(params: &'p Params<T>, trainable: bool) -> Self {
        Self {
            params: Some(params),
            trainable,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// Uses variables already on the tape (gradient checks).
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            params: None,
            trainable: true,
            vars: RefCell::new(vars.into_iter().collect()),
        }
    }

    pub fn get(&self, tape: &Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .and_then(|p| p.get(name))
            .ok_or_else(|| Error::State(format!("parameter `{name}` is not available")))?;
        let v = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter placed on the tape so far.
    pub fn bound(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().map(|(k, &v)| (k.clone(), v)).collect()
    }
}

/// Projections of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MhaVars {
    pub fn bind<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, prefix: &str) -> Result<Self> {
        let g = |n: &str| b.get(tape, &format!("{prefix}.{n}"));
        Ok(Self {
            wq: g("wq")?,
            bq: g("bq")?,
            wk: g("wk")?,
            bk: g("bk")?,
            wv: g("wv")?,
            bv: g("bv")?,
            wo: g("wo")?,
            bo: g("bo")?,
        })
    }
}

/// Multi-head attention with input and output projections; query row `r`
/// attends to key rows `ranges[r]`.
pub fn mha<T: Scalar>(
    tape: &Tape<T>,
    p: &MhaVars,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    ranges: Vec<(usize, usize)>,
) -> Result<Var> {
    let q = tape.linear(q_in, p.wq, p.bq)?;
    let k = tape.linear(kv_in, p.wk, p.bk)?;
    let v = tape.linear(kv_in, p.wv, p.bv)?;
    let a = tape.attention(q, k, v, heads, ranges)?;
    tape.linear(a, p.wo, p.bo)
}

#[derive(Clone, Copy, Debug)]
pub struct LnVars {
    pub gain: Var,
    pub bias: Var,
}

impl LnVars {
    pub fn bind<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: b.get(tape, &format!("{prefix}.g"))?,
            bias: b.get(tape, &format!("{prefix}.b"))?,
        })
    }
}

/// `LN(x + y)`.
pub fn residual_ln<T: Scalar>(tape: &Tape<T>, x: Var, y: Var, ln: &LnVars, eps: f64) -> Result<Var> {
    let s = tape.add(x, y)?;
    tape.layer_norm(s, ln.gain, ln.bias, eps)
}

fn ffn<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let g = |n: &str| b.get(tape, &format!("{prefix}.{n}"));
    let h = tape.relu(tape.linear(x, g("w1")?, g("b1")?)?);
    tape.linear(h, g("w2")?, g("b2")?)
}

/// Per-frame features: `f` is `[H·W × d]` (row-major grid), `m` is `[s² × d]`.
#[derive(Clone, Copy, Debug)]
pub struct FrameFeature {
    pub f: Var,
    pub m: Var,
}

/// Stride-2 convolution stack and 1×1 projection to `d` channels.
pub fn backbone<T: Scalar>(tape: &Tape<T>, b: &Bound<'_, T>, cfg: &ModelConfig, frame: Var) -> Result<FrameFeature> {
    let s = tape.shape(frame);
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Dimension {
            op: "backbone",
            lhs: s,
            rhs: vec![cfg.height, cfg.width, 3],
        });
    }
    let stride = cfg.stride();
    if !s[0].is_multiple_of(stride) || !s[1].is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "frame {}x{} not divisible by stride {stride}",
            s[0], s[1]
        )));
    }
    let mut x = frame;
    for i in 0..cfg.backbone.len() {
        let w = b.get(tape, &format!("bb.conv{i}.w"))?;
        let bias = b.get(tape, &format!("bb.conv{i}.b"))?;
        x = tape.relu(tape.conv2d(x, w, bias, 3, 2, 1)?);
    }
    let (fh, fw) = (s[0] / stride, s[1] / stride);
    let c = *cfg.backbone.last().expect("validated");
    let flat = tape.reshape(x, &[fh * fw, c])?;
    let mut f = tape.linear(flat, b.get(tape, "bb.proj.w")?, b.get(tape, "bb.proj.b")?)?;
    if cfg.spatial_pos {
        f = tape.add(f, b.get(tape, "bb.pos")?)?;
    }
    let m = tape.row_mix(f, avg_pool_plan(fh, fw, cfg.roi))?;
    Ok(FrameFeature { f, m })
}

/// `softmax(e mᵀ) m`: every query is an attention-weighted average of the
/// pooled frame summary.
pub fn adaptive_queries<T: Scalar>(tape: &Tape<T>, m: Var, e: Var) -> Result<Var> {
    let mt = tape.transpose(m)?;
    let logits = tape.matmul(e, mt)?;
    let w = tape.softmax(logits)?;
    tape.matmul(w, m)
}

/// Self-attention over all `T·L` queries of the clip (or, with
/// `frame_isolation`, only over the queries of the same frame).
#[allow(clippy::too_many_arguments)]
pub fn extended_self_attention<T: Scalar>(
    tape: &Tape<T>,
    p: &MhaVars,
    ln: &LnVars,
    q: Var,
    frames: usize,
    queries: usize,
    heads: usize,
    frame_isolation: bool,
    eps: f64,
) -> Result<Var> {
    let n = frames * queries;
    let ranges = (0..n)
        .map(|r| {
            if frame_isolation {
                (r / queries * queries, queries)
            } else {
                (0, n)
            }
        })
        .collect();
    let a = mha(tape, p, q, q, heads, ranges)?;
    residual_ln(tape, q, a, ln, eps)
}

/// `k + reshape(q·Wp)` for `n` queries at once: `k` is `[n·s² × d]`, `q` is
/// `[n × d]`, `wp` is `[d × s²·d]`.
pub fn adapt_region_feature<T: Scalar>(tape: &Tape<T>, k: Var, q: Var, wp: Var) -> Result<Var> {
    let proj = tape.matmul(q, wp)?;
    let proj = tape.reshape(proj, &tape.shape(k))?;
    tape.add(k, proj)
}

/// Sampling plan for the RoI grids of many queries over stacked frame maps.
pub fn region_plan<T: Scalar>(fh: usize, fw: usize, s: usize, rois: &[(usize, NormBox)]) -> RowMixPlan<T> {
    let mut plan = RowMixPlan::new();
    for &(frame, b) in rois {
        let p: RowMixPlan<T> = roi_plan(fh, fw, &b, s);
        let shift = frame * fh * fw;
        for r in 0..p.rows() {
            plan.push_row(
                p.entries[p.offsets[r]..p.offsets[r + 1]]
                    .iter()
                    .map(|&(i, w)| (i + shift, w)),
            );
        }
    }
    plan
}

/// Cross-attention of each query to the adapted RoI features inside its
/// reference box. Returns the updated queries and the adapted features
/// `[n·s² × d]`.
#[allow(clippy::too_many_arguments)]
pub fn guided_cross_attention<T: Scalar>(
    tape: &Tape<T>,
    p: &MhaVars,
    wp: Var,
    ln: &LnVars,
    q: Var,
    features: Var,
    plan: RowMixPlan<T>,
    s: usize,
    heads: usize,
    eps: f64,
) -> Result<(Var, Var)> {
    let n = tape.shape(q)[0];
    let roi = tape.row_mix(features, plan)?;
    let k = adapt_region_feature(tape, roi, q, wp)?;
    let s2 = s * s;
    let a = mha(tape, p, q, k, heads, (0..n).map(|r| (r * s2, s2)).collect())?;
    Ok((residual_ln(tape, q, a, ln, eps)?, k))
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub boxes: Var,
    pub identity: Option<Var>,
}

/// Classification, box refinement (relative to the constant `base` boxes)
/// and, optionally, unit-norm identity embeddings for `n` queries.
pub fn detection_head<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound<'_, T>,
    layer: usize,
    q: Var,
    base: &[T],
    with_identity: bool,
) -> Result<HeadOutput> {
    let g = |n: &str| b.get(tape, &format!("dec{layer}.{n}"));
    let logits = tape.linear(q, g("cls.w")?, g("cls.b")?)?;
    let h1 = tape.relu(tape.linear(q, g("loc.w1")?, g("loc.b1")?)?);
    let h2 = tape.relu(tape.linear(h1, g("loc.w2")?, g("loc.b2")?)?);
    let delta = tape.linear(h2, g("loc.w3")?, g("loc.b3")?)?;
    let boxes = tape.apply_delta(delta, base)?;
    let identity = if with_identity {
        let h = tape.relu(tape.linear(q, g("id.w1")?, g("id.b1")?)?);
        Some(tape.l2_normalize(tape.linear(h, g("id.w2")?, g("id.b2")?)?))
    } else {
        None
    };
    Ok(HeadOutput {
        logits,
        boxes,
        identity,
    })
}

/// Discrete choices made during one forward pass and loss evaluation.
/// Supplying them back freezes the pass, which makes it a smooth function
/// of the parameters (used by gradient checks).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decisions {
    /// Reference boxes entering each layer, `[T·L·4]` cxcywh.
    pub references: Vec<Vec<f64>>,
    pub topk: BTreeMap<usize, Vec<Vec<usize>>>,
    pub matches: BTreeMap<usize, Vec<IdentityMatch>>,
    pub assignments: BTreeMap<usize, Vec<Assignment>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Run aggregation in the ICA layers (and identity heads feeding them).
    pub ica: bool,
    /// Select aggregation partners from ground-truth assignments.
    pub oracle: Option<&'a [Vec<TrackedBox>]>,
    /// Restrict every cross-query interaction to within a frame.
    pub frame_isolation: bool,
    pub frozen: Option<&'a Decisions>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub queries: Var,
    pub logits: Var,
    pub boxes: Var,
    pub identity: Option<Var>,
    pub regions: Var,
}

#[derive(Clone, Debug)]
pub struct ClipOutput {
    pub frames: usize,
    pub queries: usize,
    pub layers: Vec<LayerOutput>,
    pub decisions: Decisions,
}

/// Per-query view of one layer's predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryState {
    pub frame: usize,
    pub query: usize,
    pub q: Vec<f64>,
    pub b: NormBox,
    pub p: Vec<f64>,
    pub h: Option<Vec<f64>>,
}

impl ClipOutput {
    /// `[frame][query]` states of layer `layer`.
    pub fn query_states<T: Scalar>(&self, tape: &Tape<T>, layer: usize) -> Vec<Vec<QueryState>> {
        let out = &self.layers[layer];
        let rows = |v: Var| -> (Vec<f64>, usize) {
            let s = tape.shape(v);
            (tape.value(v).iter().map(|x| x.as_f64()).collect(), s[1])
        };
        let (q, d) = rows(out.queries);
        let (p, c) = rows(out.logits);
        let (b, _) = rows(out.boxes);
        let h = out.identity.map(rows);
        (0..self.frames)
            .map(|i| {
                (0..self.queries)
                    .map(|j| {
                        let r = i * self.queries + j;
                        QueryState {
                            frame: i,
                            query: j,
                            q: q[r * d..(r + 1) * d].to_vec(),
                            b: NormBox::from_slice(&b[r * 4..r * 4 + 4]),
                            p: p[r * c..(r + 1) * c].to_vec(),
                            h: h.as_ref().map(|(h, hd)| h[r * hd..(r + 1) * hd].to_vec()),
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

fn frame_assignments<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    out: &LayerOutput,
    targets: &[Vec<TrackedBox>],
    frames: usize,
) -> Result<Vec<Assignment>> {
    let l = cfg.queries;
    (0..frames)
        .map(|i| {
            let logits = tape.slice_rows(out.logits, i * l, l)?;
            let boxes = tape.slice_rows(out.boxes, i * l, l)?;
            let gts: Vec<LabeledBox> = targets[i].iter().map(|t| t.label).collect();
            let cost = cost_matrix(tape, logits, boxes, &gts, &cfg.cost)?;
            Ok(Assignment {
                pred_for_gt: hungarian_rect(&cost, l)?,
                queries: l,
            })
        })
        .collect()
}

/// Runs the whole clip through the network in one pass.
pub fn clip_forward<T: Scalar>(
    tape: &Tape<T>,
    b: &Bound<'_, T>,
    cfg: &ModelConfig,
    frames: &[Var],
    opts: &ForwardOptions<'_>,
) -> Result<ClipOutput> {
    cfg.validate()?;
    let t = frames.len();
    if t == 0 {
        return Err(Error::Precondition("a clip needs at least one frame".into()));
    }
    if let Some(targets) = opts.oracle {
        if targets.len() != t {
            return Err(Error::Input(format!("{} target frames for {t} frames", targets.len())));
        }
    }
    let (l, d, s, eps) = (cfg.queries, cfg.dim, cfg.roi, cfg.ln_eps);
    let (fh, fw) = cfg.feature_hw();
    let n = t * l;

    let feats = frames
        .iter()
        .map(|&x| backbone(tape, b, cfg, x))
        .collect::<Result<Vec<_>>>()?;
    let mut fmaps: Vec<Var> = feats.iter().map(|f| f.f).collect();
    if cfg.encoder {
        let tokens = tape.concat_rows(&fmaps)?;
        let hw = fh * fw;
        let ranges = (0..t * hw)
            .map(|r| {
                if opts.frame_isolation {
                    (r / hw * hw, hw)
                } else {
                    (0, t * hw)
                }
            })
            .collect();
        let sa = MhaVars::bind(tape, b, "enc.sa")?;
        let a = mha(tape, &sa, tokens, tokens, cfg.heads, ranges)?;
        let x = residual_ln(tape, tokens, a, &LnVars::bind(tape, b, "enc.ln_sa")?, eps)?;
        let y = ffn(tape, b, "enc.ffn", x)?;
        let x = residual_ln(tape, x, y, &LnVars::bind(tape, b, "enc.ln_ffn")?, eps)?;
        fmaps = (0..t).map(|i| tape.slice_rows(x, i * hw, hw)).collect::<Result<_>>()?;
    }
    let features = tape.concat_rows(&fmaps)?;

    let e = b.get(tape, "query.e")?;
    let per_frame = feats
        .iter()
        .map(|f| {
            if cfg.fixed_queries {
                Ok(e)
            } else {
                adaptive_queries(tape, f.m, e)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut q = tape.concat_rows(&per_frame)?;

    let mut decisions = Decisions::default();
    let mut reference: Vec<f64> = (0..n).flat_map(|_| NormBox::full_frame().to_array()).collect();
    let mut layers: Vec<LayerOutput> = Vec::with_capacity(cfg.decoder_layers);
    for layer in 0..cfg.decoder_layers {
        if let Some(fr) = opts.frozen {
            reference = fr
                .references
                .get(layer)
                .cloned()
                .ok_or_else(|| Error::State(format!("frozen decisions lack layer {layer} references")))?;
        }
        decisions.references.push(reference.clone());
        let p = format!("dec{layer}");

        let sa = MhaVars::bind(tape, b, &format!("{p}.sa"))?;
        let ln = LnVars::bind(tape, b, &format!("{p}.ln_sa"))?;
        q = extended_self_attention(tape, &sa, &ln, q, t, l, cfg.heads, opts.frame_isolation, eps)?;

        if opts.ica && cfg.is_ica_layer(layer) {
            let prev = layers[layer - 1];
            let topk = match opts.frozen.and_then(|f| f.topk.get(&layer)) {
                Some(k) => k.clone(),
                None => {
                    let logits: Vec<f64> = tape.value(prev.logits).iter().map(|v| v.as_f64()).collect();
                    (0..t)
                        .map(|i| {
                            let scores =
                                ica::max_scores(&logits[i * l * cfg.classes..(i + 1) * l * cfg.classes], cfg.classes);
                            ica::select_topk(&scores, cfg.ica_topk)
                        })
                        .collect()
                }
            };
            let matches = match opts.frozen.and_then(|f| f.matches.get(&layer)) {
                Some(m) => m.clone(),
                None => {
                    let h = prev
                        .identity
                        .ok_or_else(|| Error::State(format!("layer {} has no identity embeddings", layer - 1)))?;
                    let hv: Vec<f64> = tape.value(h).iter().map(|v| v.as_f64()).collect();
                    let learned = ica::learned_matches(&hv, d, t, l, &topk, cfg.wide_candidates, opts.frame_isolation)?;
                    match opts.oracle {
                        Some(targets) => {
                            let assignments = match decisions.assignments.get(&(layer - 1)) {
                                Some(a) => a.clone(),
                                None => {
                                    let a = match opts.frozen.and_then(|f| f.assignments.get(&(layer - 1))) {
                                        Some(a) => a.clone(),
                                        None => frame_assignments(tape, cfg, &prev, targets, t)?,
                                    };
                                    decisions.assignments.insert(layer - 1, a.clone());
                                    a
                                }
                            };
                            let owners = ica::track_owners(&assignments, targets, l);
                            ica::oracle_matches(&learned, &owners, Some((&hv, d)))
                        }
                        None => learned,
                    }
                }
            };
            let params = IcaParams::bind(tape, b, &format!("{p}.ica"))?;
            q = ica::aggregate(tape, &params, q, prev.regions, &matches, l, s, cfg.heads, eps)?;
            decisions.topk.insert(layer, topk);
            decisions.matches.insert(layer, matches);
        }

        let rois: Vec<(usize, NormBox)> = (0..n)
            .map(|r| (r / l, NormBox::from_slice(&reference[r * 4..r * 4 + 4])))
            .collect();
        let ca = MhaVars::bind(tape, b, &format!("{p}.ca"))?;
        let wp = b.get(tape, &format!("{p}.ca.wp"))?;
        let ln = LnVars::bind(tape, b, &format!("{p}.ln_ca"))?;
        let (q2, regions) = guided_cross_attention(
            tape,
            &ca,
            wp,
            &ln,
            q,
            features,
            region_plan(fh, fw, s, &rois),
            s,
            cfg.heads,
            eps,
        )?;
        let y = ffn(tape, b, &format!("{p}.ffn"), q2)?;
        q = residual_ln(tape, q2, y, &LnVars::bind(tape, b, &format!("{p}.ln_ffn"))?, eps)?;

        let base: Vec<T> = reference.iter().map(|&v| T::from_f64(v)).collect();
        let with_id = opts.ica && cfg.has_identity_head(layer);
        let head = detection_head(tape, b, layer, q, &base, with_id)?;
        reference = tape.value(head.boxes).iter().map(|v| v.as_f64()).collect();
        layers.push(LayerOutput {
            queries: q,
            logits: head.logits,
            boxes: head.boxes,
            identity: head.identity,
            regions,
        });
    }
    Ok(ClipOutput {
        frames: t,
        queries: l,
        layers,
        decisions,
    })
}

/// Loss components; each is a `[1]` variable.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
    pub con: Var,
}

/// Set loss over every layer and frame normalised by the number of
/// ground-truth boxes in the clip, plus the weighted contrastive loss of
/// every layer that predicts identity embeddings.
pub fn clip_loss<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    out: &mut ClipOutput,
    targets: &[Vec<TrackedBox>],
    frozen: Option<&Decisions>,
) -> Result<LossParts> {
    let (t, l) = (out.frames, out.queries);
    if targets.len() != t {
        return Err(Error::Input(format!("{} target frames for {t} frames", targets.len())));
    }
    let gt_count: usize = targets.iter().map(Vec::len).sum();
    let mut parts: [Vec<Var>; 3] = Default::default();
    let mut con_terms = Vec::new();
    for (layer, lo) in out.layers.clone().iter().enumerate() {
        let fixed = frozen
            .and_then(|f| f.assignments.get(&layer))
            .or_else(|| out.decisions.assignments.get(&layer))
            .cloned();
        let mut assignments = Vec::with_capacity(t);
        for (i, frame_targets) in targets.iter().enumerate() {
            let logits = tape.slice_rows(lo.logits, i * l, l)?;
            let boxes = tape.slice_rows(lo.boxes, i * l, l)?;
            let gts: Vec<LabeledBox> = frame_targets.iter().map(|g| g.label).collect();
            let (fl, a) = set_loss(tape, logits, boxes, &gts, &cfg.cost, fixed.as_ref().map(|f| &f[i]))?;
            parts[0].push(fl.cls);
            parts[1].push(fl.giou);
            parts[2].push(fl.l1);
            assignments.push(a);
        }
        if let Some(h) = lo.identity {
            let owners = ica::track_owners(&assignments, targets, l);
            let (c, _) = ica::contrastive_loss(tape, h, t, l, &owners)?;
            con_terms.push(c);
        }
        out.decisions.assignments.insert(layer, assignments);
    }
    let cls = normalize_clip_loss(tape, &parts[0], gt_count)?;
    let giou = normalize_clip_loss(tape, &parts[1], gt_count)?;
    let l1 = normalize_clip_loss(tape, &parts[2], gt_count)?;
    let con = if con_terms.is_empty() {
        tape.constant_from(&[1], vec![T::zero()])?
    } else {
        let sum = normalize_clip_loss(tape, &con_terms, 1)?;
        tape.scale(sum, T::from_f64(cfg.contrastive_weight))
    };
    let det = tape.add(tape.add(cls, giou)?, l1)?;
    let total = tape.add(det, con)?;
    Ok(LossParts {
        total,
        cls,
        giou,
        l1,
        con,
    })
}

/// Finite-difference check of the full clip loss, aggregation included,
/// against every parameter on one generated clip. Parameters are jittered
/// away from their initial values; discrete choices are made once and then
/// frozen.
pub fn check_loss_gradient(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let side = cfg.height.min(cfg.width) as f64;
    let gen = GenConfig {
        height: cfg.height,
        width: cfg.width,
        frames: cfg.frames,
        min_size_px: (side / 4.0).max(2.0),
        max_size_px: (side / 2.0).max(4.0),
        max_objects: 2,
        classes: cfg.classes,
        seed,
        ..GenConfig::default()
    };
    let clip = generate_clip(&gen, 0)?;
    let frames: Vec<Tensor<f64>> = (0..cfg.frames).map(|i| clip.frame_tensor(i)).collect();
    let targets: Vec<Vec<TrackedBox>> = (0..cfg.frames).map(|i| clip.targets(i)).collect();
    let mut params = Params::<f64>::init(cfg, seed)?;
    // Zero-initialised heads would leave every box on the same lattice point
    // as the targets, where min/max kinks make the loss non-differentiable.
    let mut rng = InitRng::seed_from_u64(seed ^ 0x9e37_79b9);
    for (_, t) in params.iter_mut() {
        let noise = uniform::<f64>(&mut rng, t.shape(), 0.05);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }

    let tape = Tape::new();
    let bound = Bound::new(&params, false);
    let fv: Vec<Var> = frames.iter().map(|f| tape.constant(f)).collect();
    let live = ForwardOptions {
        ica: true,
        ..Default::default()
    };
    let mut out = clip_forward(&tape, &bound, cfg, &fv, &live)?;
    clip_loss(&tape, cfg, &mut out, &targets, None)?;
    let frozen = out.decisions;

    let names = params.names();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).expect("listed").clone()).collect();
    grad_check_many(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let fv: Vec<Var> = frames.iter().map(|f| tape.constant(f)).collect();
            let opts = ForwardOptions {
                ica: true,
                frozen: Some(&frozen),
                ..Default::default()
            };
            let mut out = clip_forward(tape, &bound, cfg, &fv, &opts)?;
            Ok(clip_loss(tape, cfg, &mut out, &targets, Some(&frozen))?.total)
        },
        &inputs,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_many, GradCheckOptions};
    use crate::synthvid::{generate_clip, GenConfig};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro() -> ModelConfig {
        ModelConfig::micro()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_round_trips_and_validates() {
        let mut cfg = ModelConfig::desk();
        cfg.backbone = vec![8, 16, 16];
        cfg.wide_candidates = true;
        cfg.cost.focal_alpha = 0.3;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(ModelConfig::from_kv("nonsense=1")
            .unwrap_err()
            .to_string()
            .contains("nonsense"));
        assert!(ModelConfig::from_kv("heads=5").is_err());
        assert!(ModelConfig::from_kv("ica_layers=3").is_err());
        assert!(ModelConfig::from_kv("ica_topk=9").is_err());
        assert!(ModelConfig::from_kv("height=62").is_err());
        ModelConfig::large().validate().unwrap();
    }

    #[test]
    fn ica_layers_are_the_trailing_ones() {
        let cfg = ModelConfig {
            decoder_layers: 6,
            ica_layers: 2,
            ..ModelConfig::desk()
        };
        let ica: Vec<usize> = (0..6).filter(|&l| cfg.is_ica_layer(l)).collect();
        let id: Vec<usize> = (0..6).filter(|&l| cfg.has_identity_head(l)).collect();
        assert_eq!(ica, vec![4, 5]);
        assert_eq!(id, vec![3, 4]);
        let params = Params::<f32>::init(&cfg, 0).unwrap();
        assert!(params.get("dec4.ica.wq").is_some());
        assert!(params.get("dec3.ica.wq").is_none());
        assert!(params.get("dec3.id.w1").is_some());
        assert!(params.get("dec5.id.w1").is_none());
    }

    #[test]
    fn params_from_entries_names_the_bad_field() {
        let cfg = ModelConfig::desk();
        let params = Params::<f32>::init(&cfg, 1).unwrap();
        let entries: Vec<(String, Tensor<f32>)> = params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert_eq!(Params::from_entries(&cfg, entries.clone()).unwrap(), params);
        let other = ModelConfig { dim: 16, ..cfg.clone() };
        let err = Params::from_entries(&other, entries.clone()).unwrap_err().to_string();
        assert!(err.contains("bb.proj.w"), "{err}");
        let fewer: Vec<_> = entries.into_iter().filter(|(k, _)| k != "query.e").collect();
        assert!(Params::from_entries(&cfg, fewer)
            .unwrap_err()
            .to_string()
            .contains("query.e"));
    }

    #[test]
    fn backbone_shape_and_determinism() {
        let cfg = ModelConfig {
            height: 32,
            width: 32,
            ..ModelConfig::desk()
        };
        let params = Params::<f64>::init(&cfg, 2).unwrap();
        let tape = Tape::new();
        let bound = Bound::new(&params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = rand_tensor(&mut rng, &[32, 32, 3]);
        let a = backbone(&tape, &bound, &cfg, tape.constant(&frame)).unwrap();
        let b2 = backbone(&tape, &bound, &cfg, tape.constant(&frame)).unwrap();
        assert_eq!(tape.shape(a.f), vec![64, 32]);
        assert_eq!(tape.shape(a.m), vec![16, 32]);
        assert_eq!(tape.to_vec(a.f), tape.to_vec(b2.f));
        let odd = tape.constant(&rand_tensor(&mut rng, &[10, 10, 3]));
        assert!(matches!(backbone(&tape, &bound, &cfg, odd), Err(Error::Config(_))));
    }

    #[test]
    fn backbone_pixel_gradient() {
        let cfg = micro();
        let params = Params::<f64>::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = rand_tensor(&mut rng, &[8, 8, 3]);
        let w = rand_tensor(&mut rng, &[4, 8]);
        let report = grad_check_many(
            |tape, v| {
                let bound = Bound::new(&params, false);
                let f = backbone(tape, &bound, &cfg, v[0])?;
                let wv = tape.constant(&w);
                let y = tape.mul(f.m, wv)?;
                Ok(tape.sum(y))
            },
            &[frame],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn adaptive_query_cases() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = tape.constant(&rand_tensor(&mut rng, &[4, 3]));
        let e0 = tape.constant(&Tensor::zeros(&[2, 3]));
        let q = tape.to_vec(adaptive_queries(&tape, m, e0).unwrap());
        let mv = tape.to_vec(m);
        for c in 0..3 {
            let mean = (0..4).map(|r| mv[r * 3 + c]).sum::<f64>() / 4.0;
            assert!((q[c] - mean).abs() < 1e-12 && (q[3 + c] - mean).abs() < 1e-12);
        }
        // Orthonormal one-hot rows; e = 100·row k saturates onto row k.
        let eye = tape.constant(&Tensor::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let e = tape.constant(&Tensor::from_f64(&[1, 3], &[0., 100., 0.]).unwrap());
        let q = tape.to_vec(adaptive_queries(&tape, eye, e).unwrap());
        assert!((q[0]).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12 && q[2].abs() < 1e-12);
        let e5 = tape.constant(&rand_tensor(&mut rng, &[5, 3]));
        let m16 = tape.constant(&rand_tensor(&mut rng, &[16, 3]));
        assert_eq!(tape.shape(adaptive_queries(&tape, m16, e5).unwrap()), vec![5, 3]);
    }

    fn mha_for(tape: &Tape<f64>, rng: &mut ChaCha8Rng, d: usize, zero_v: bool) -> MhaVars {
        let mut w = || tape.constant(&rand_tensor(rng, &[d, d]));
        let (wq, wk, wo) = (w(), w(), w());
        let wv = if zero_v {
            tape.constant(&Tensor::zeros(&[d, d]))
        } else {
            w()
        };
        let z = tape.constant(&Tensor::zeros(&[d]));
        MhaVars {
            wq,
            bq: z,
            wk,
            bk: z,
            wv,
            bv: z,
            wo,
            bo: z,
        }
    }

    fn unit_ln(tape: &Tape<f64>, d: usize) -> LnVars {
        LnVars {
            gain: tape.constant(&Tensor::filled(&[d], 1.0)),
            bias: tape.constant(&Tensor::zeros(&[d])),
        }
    }

    // Direct evaluation: one query at a time, one head at a time.
    fn reference_self_attention(q: &[f64], p: [&[f64]; 4], n: usize, d: usize, heads: usize) -> Vec<f64> {
        let proj =
            |x: &[f64], w: &[f64]| -> Vec<f64> { (0..d).map(|c| (0..d).map(|k| x[k] * w[k * d + c]).sum()).collect() };
        let rows: Vec<&[f64]> = (0..n).map(|r| &q[r * d..(r + 1) * d]).collect();
        let qs: Vec<Vec<f64>> = rows.iter().map(|x| proj(x, p[0])).collect();
        let ks: Vec<Vec<f64>> = rows.iter().map(|x| proj(x, p[1])).collect();
        let vs: Vec<Vec<f64>> = rows.iter().map(|x| proj(x, p[2])).collect();
        let dh = d / heads;
        let mut out = Vec::new();
        for r in 0..n {
            let mut concat = vec![0.0; d];
            for h in 0..heads {
                let sl = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        qs[r][sl.clone()]
                            .iter()
                            .zip(&ks[j][sl.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..n {
                    let a = (scores[j] - mx).exp() / z;
                    for c in sl.clone() {
                        concat[c] += a * vs[j][c];
                    }
                }
            }
            let o = proj(&concat, p[3]);
            let x: Vec<f64> = (0..d).map(|c| rows[r][c] + o[c]).collect();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            out.extend(x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
        }
        out
    }

    #[test]
    fn extended_self_attention_matches_direct_evaluation() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, l, d) = (2, 2, 8);
        let p = mha_for(&tape, &mut rng, d, false);
        let qt = rand_tensor(&mut rng, &[t * l, d]);
        let q = tape.constant(&qt);
        let got = tape.to_vec(extended_self_attention(&tape, &p, &unit_ln(&tape, d), q, t, l, 2, false, 1e-5).unwrap());
        let w = [
            tape.to_vec(p.wq),
            tape.to_vec(p.wk),
            tape.to_vec(p.wv),
            tape.to_vec(p.wo),
        ];
        let want = reference_self_attention(qt.data(), [&w[0], &w[1], &w[2], &w[3]], t * l, d, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }

        // T = 1 equals in-frame attention; zero values give LN(input).
        let one = tape.slice_rows(q, 0, l).unwrap();
        let single =
            tape.to_vec(extended_self_attention(&tape, &p, &unit_ln(&tape, d), one, 1, l, 2, false, 1e-5).unwrap());
        let isolated =
            tape.to_vec(extended_self_attention(&tape, &p, &unit_ln(&tape, d), q, t, l, 2, true, 1e-5).unwrap());
        assert_eq!(&isolated[..l * d], &single[..]);
        let pz = mha_for(&tape, &mut rng, d, true);
        let ln = unit_ln(&tape, d);
        let out = tape.to_vec(extended_self_attention(&tape, &pz, &ln, q, t, l, 2, false, 1e-5).unwrap());
        let plain = tape.to_vec(tape.layer_norm(q, ln.gain, ln.bias, 1e-5).unwrap());
        assert_eq!(out, plain);
    }

    #[test]
    fn adapter_identities_and_scalar_oracle() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (s, d) = (2, 2);
        let kt = rand_tensor(&mut rng, &[s * s, d]);
        let qt = rand_tensor(&mut rng, &[1, d]);
        let wpt = rand_tensor(&mut rng, &[d, s * s * d]);
        let (k, q, wp) = (tape.constant(&kt), tape.constant(&qt), tape.constant(&wpt));
        let zero_w = tape.constant(&Tensor::zeros(&[d, s * s * d]));
        let zero_q = tape.constant(&Tensor::zeros(&[1, d]));
        assert_eq!(
            tape.to_vec(adapt_region_feature(&tape, k, q, zero_w).unwrap()),
            kt.data()
        );
        assert_eq!(
            tape.to_vec(adapt_region_feature(&tape, k, zero_q, wp).unwrap()),
            kt.data()
        );
        let got = tape.to_vec(adapt_region_feature(&tape, k, q, wp).unwrap());
        for r in 0..s * s {
            for c in 0..d {
                let col = r * d + c;
                let want =
                    kt.data()[r * d + c] + qt.data()[0] * wpt.data()[col] + qt.data()[1] * wpt.data()[s * s * d + col];
                assert!((got[r * d + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guided_cross_attention_cases() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let p = mha_for(&tape, &mut rng, d, false);
        let ln = unit_ln(&tape, d);
        let zero_w = tape.constant(&Tensor::zeros(&[d, 4 * d]));
        let q = tape.constant(&rand_tensor(&mut rng, &[2, d]));
        let box_a = NormBox::new(0.3, 0.4, 0.3, 0.5).unwrap();
        let box_b = NormBox::new(0.6, 0.5, 0.4, 0.2).unwrap();

        // Constant field: every value row is equal, so the result cannot
        // depend on the attention weights (here, on the box).
        let field = tape.constant(&Tensor::filled(&[16, d], 0.7));
        let run = |b: NormBox| {
            let plan = region_plan(4, 4, 2, &[(0, b), (0, b)]);
            tape.to_vec(
                guided_cross_attention(&tape, &p, zero_w, &ln, q, field, plan, 2, 2, 1e-5)
                    .unwrap()
                    .0,
            )
        };
        for (a, b) in run(box_a).iter().zip(run(box_b)) {
            assert!((a - b).abs() < 1e-12);
        }

        // Full frame with s equal to the map side: k is the grid itself.
        let ft = rand_tensor(&mut rng, &[16, d]);
        let f = tape.constant(&ft);
        let plan = region_plan(4, 4, 4, &[(0, NormBox::full_frame())]);
        let q1 = tape.slice_rows(q, 0, 1).unwrap();
        let (_, k) = guided_cross_attention(
            &tape,
            &p,
            tape.constant(&Tensor::zeros(&[d, 16 * d])),
            &ln,
            q1,
            f,
            plan,
            4,
            2,
            1e-5,
        )
        .unwrap();
        for (a, b) in tape.to_vec(k).iter().zip(ft.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn guided_cross_attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let inputs: Vec<Tensor<f64>> = vec![
            rand_tensor(&mut rng, &[2, d]),
            rand_tensor(&mut rng, &[16, d]),
            rand_tensor(&mut rng, &[d, 4 * d]),
            rand_tensor(&mut rng, &[d, d]),
            rand_tensor(&mut rng, &[d, d]),
            rand_tensor(&mut rng, &[d, d]),
            rand_tensor(&mut rng, &[d, d]),
        ];
        let proj = rand_tensor(&mut rng, &[2, d]);
        let boxes = [
            (0, NormBox::new(0.4, 0.5, 0.5, 0.6).unwrap()),
            (0, NormBox::new(0.6, 0.4, 0.3, 0.3).unwrap()),
        ];
        let report = grad_check_many(
            |tape, v| {
                let z = tape.constant(&Tensor::zeros(&[d]));
                let p = MhaVars {
                    wq: v[3],
                    bq: z,
                    wk: v[4],
                    bk: z,
                    wv: v[5],
                    bv: z,
                    wo: v[6],
                    bo: z,
                };
                let ln = unit_ln(tape, d);
                let (q, _) = guided_cross_attention(
                    tape,
                    &p,
                    v[2],
                    &ln,
                    v[0],
                    v[1],
                    region_plan(4, 4, 2, &boxes),
                    2,
                    2,
                    1e-5,
                )?;
                Ok(tape.sum(tape.mul(q, tape.constant(&proj))?))
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn detection_head_contracts() {
        let cfg = ModelConfig::desk();
        let params = Params::<f64>::init(&cfg, 9).unwrap();
        let tape = Tape::new();
        let bound = Bound::new(&params, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = tape.constant(&rand_tensor(&mut rng, &[3, 32]));
        let base = [0.5, 0.5, 0.3, 0.3, 0.2, 0.7, 0.1, 0.2, 0.8, 0.1, 0.3, 0.1];
        // Layer 1 feeds the last (ICA) layer, so it has an identity head.
        let out = detection_head(&tape, &bound, 1, q, &base, true).unwrap();
        assert_eq!(tape.shape(out.logits), vec![3, 5]);
        // The last localisation layer starts at zero: boxes are unchanged.
        for (a, b) in tape.to_vec(out.boxes).iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
        let h = tape.to_vec(out.identity.unwrap());
        for r in 0..3 {
            let n: f64 = h[r * 32..(r + 1) * 32].iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    fn clip_inputs(cfg: &ModelConfig, seed: u64) -> (Vec<Tensor<f64>>, Vec<Vec<TrackedBox>>) {
        let gen = GenConfig {
            height: cfg.height,
            width: cfg.width,
            frames: cfg.frames,
            min_size_px: 2.0,
            max_size_px: 4.0,
            max_objects: 2,
            classes: cfg.classes,
            seed,
            ..GenConfig::default()
        };
        let clip = generate_clip(&gen, 0).unwrap();
        let frames = (0..cfg.frames).map(|i| clip.frame_tensor(i)).collect();
        let targets = (0..cfg.frames).map(|i| clip.targets(i)).collect();
        (frames, targets)
    }

    fn run(
        params: &Params<f64>,
        cfg: &ModelConfig,
        frames: &[Tensor<f64>],
        opts: &ForwardOptions<'_>,
    ) -> (Tape<f64>, ClipOutput) {
        let tape = Tape::new();
        let bound = Bound::new(params, false);
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f)).collect();
        let out = clip_forward(&tape, &bound, cfg, &vars, opts).unwrap();
        (tape, out)
    }

    #[test]
    fn clip_forward_shapes_and_determinism() {
        let cfg = ModelConfig {
            frames: 3,
            ..ModelConfig::desk()
        };
        let params = Params::<f64>::init(&cfg, 10).unwrap();
        let (frames, _) = clip_inputs(&cfg, 1);
        let opts = ForwardOptions {
            ica: true,
            ..Default::default()
        };
        let (tape, out) = run(&params, &cfg, &frames, &opts);
        assert_eq!(out.layers.len(), 3);
        for l in 0..3 {
            let states = out.query_states(&tape, l);
            assert_eq!(states.len(), 3);
            assert!(states.iter().all(|f| f.len() == 8));
            for st in states.iter().flatten() {
                assert!(st.b.w > 0.0 && st.b.h > 0.0 && st.b.w <= 1.0 && st.b.h <= 1.0);
            }
        }
        assert!(out.layers[1].identity.is_some() && out.layers[2].identity.is_none());
        assert_eq!(out.decisions.matches[&2].len(), 3 * cfg.ica_topk);
        let (tape2, out2) = run(&params, &cfg, &frames, &opts);
        for (a, b) in out.layers.iter().zip(&out2.layers) {
            assert_eq!(tape.to_vec(a.logits), tape2.to_vec(b.logits));
            assert_eq!(tape.to_vec(a.boxes), tape2.to_vec(b.boxes));
        }
    }

    #[test]
    fn isolated_clip_equals_single_frame_runs() {
        for encoder in [false, true] {
            let cfg = ModelConfig {
                encoder,
                ..ModelConfig::desk()
            };
            let params = Params::<f64>::init(&cfg, 11).unwrap();
            let (frames, _) = clip_inputs(&cfg, 2);
            let opts = ForwardOptions {
                ica: true,
                frame_isolation: true,
                ..Default::default()
            };
            let (tape, out) = run(&params, &cfg, &frames, &opts);
            let l = cfg.queries;
            for (i, frame) in frames.iter().enumerate() {
                let (t1, single) = run(&params, &cfg, std::slice::from_ref(frame), &opts);
                for (a, b) in out.layers.iter().zip(&single.layers) {
                    let rows =
                        |t: &Tape<f64>, v: Var, w: usize, off: usize| t.to_vec(v)[off * w..(off + l) * w].to_vec();
                    assert_eq!(rows(&tape, a.logits, 5, i * l), rows(&t1, b.logits, 5, 0));
                    assert_eq!(rows(&tape, a.boxes, 4, i * l), rows(&t1, b.boxes, 4, 0));
                }
            }
        }
    }

    #[test]
    fn permuting_frames_permutes_outputs() {
        let cfg = ModelConfig::desk();
        let params = Params::<f64>::init(&cfg, 12).unwrap();
        let (frames, _) = clip_inputs(&cfg, 3);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Tensor<f64>> = perm.iter().map(|&i| frames[i].clone()).collect();
        let opts = ForwardOptions {
            ica: true,
            ..Default::default()
        };
        let (ta, a) = run(&params, &cfg, &frames, &opts);
        let (tb, b) = run(&params, &cfg, &permuted, &opts);
        let l = cfg.queries;
        let last = cfg.decoder_layers - 1;
        let (va, vb) = (ta.to_vec(a.layers[last].logits), tb.to_vec(b.layers[last].logits));
        for (new, &old) in perm.iter().enumerate() {
            for x in 0..l * 5 {
                assert!((va[old * l * 5 + x] - vb[new * l * 5 + x]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn disabling_ica_removes_identity_and_contrastive_terms() {
        let cfg = ModelConfig::desk();
        let params = Params::<f64>::init(&cfg, 13).unwrap();
        let (frames, targets) = clip_inputs(&cfg, 4);
        let (tape, mut out) = run(&params, &cfg, &frames, &ForwardOptions::default());
        assert!(out.layers.iter().all(|l| l.identity.is_none()));
        assert!(out.decisions.matches.is_empty());
        let loss = clip_loss(&tape, &cfg, &mut out, &targets, None).unwrap();
        assert_eq!(tape.scalar(loss.con), 0.0);
        assert!(tape.scalar(loss.total) > 0.0);
    }

    #[test]
    fn oracle_mode_records_assignments() {
        let cfg = ModelConfig::desk();
        let params = Params::<f64>::init(&cfg, 14).unwrap();
        let (frames, targets) = clip_inputs(&cfg, 5);
        let opts = ForwardOptions {
            ica: true,
            oracle: Some(&targets),
            ..Default::default()
        };
        let (tape, mut out) = run(&params, &cfg, &frames, &opts);
        let before = out.decisions.assignments[&1].clone();
        clip_loss(&tape, &cfg, &mut out, &targets, None).unwrap();
        assert_eq!(out.decisions.assignments[&1], before);
    }

    /// Full loss as a function of every parameter of a micro-model.
    fn micro_loss_check(seed: u64, fault: Option<crate::tape::OpKind>) -> crate::gradcheck::GradCheckReport {
        let opts = GradCheckOptions {
            max_coords: Some(400),
            seed,
            fault,
            ..GradCheckOptions::default()
        };
        check_loss_gradient(&micro(), seed, &opts).unwrap()
    }

    #[test]
    fn full_loss_gradient_on_micro_model() {
        let report = micro_loss_check(21, None);
        assert!(report.passed, "{report:?}");
    }
}
