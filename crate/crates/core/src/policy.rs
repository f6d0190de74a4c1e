//! Toy captioner and attention-pooled scorer sharing one parameter set.
//!
//! Caption step: `softmax(W_out · tanh(W_hid · ctx + b_hid))`, where `ctx` is
//! the mean of the projected image, the score-prefix embedding and the
//! embeddings of the tokens generated so far.
//!
//! Score step: slots `[P·img] ++ [E[w] for w in caption]`, attention
//! `a = softmax(q · slot)`, pooled `u = Σ a_i slot_i`, bins
//! `softmax(W_s · u + b_s)`.
//!
//! Every log-probability has an exact analytic gradient; the same backward
//! pass also differentiates the per-step KL against a reference policy.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::captions::{Caption, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::synthdata::{MOS_MAX, MOS_MIN};

pub const DEFAULT_EMBED: usize = 16;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_BINS: usize = 17;
pub const INIT_STD: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub feature_dim: usize,
    pub embed: usize,
    pub hidden: usize,
    pub bins: usize,
}

impl ModelDims {
    pub fn new(vocab: usize, feature_dim: usize) -> Self {
        ModelDims {
            vocab,
            feature_dim,
            embed: DEFAULT_EMBED,
            hidden: DEFAULT_HIDDEN,
            bins: DEFAULT_BINS,
        }
    }
}

/// Conditioning score for caption generation: a MOS bin, or the MASK
/// placeholder used at test time by models trained with a score prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorePrefix {
    Bin(usize),
    Mask,
}

/// What a generation pass can see.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conditioning {
    pub image: Option<Vec<f64>>,
    pub score_prefix: Option<ScorePrefix>,
}

impl Conditioning {
    pub fn image(features: &[f64]) -> Self {
        Conditioning {
            image: Some(features.to_vec()),
            score_prefix: None,
        }
    }

    pub fn image_and_score(features: &[f64], prefix: ScorePrefix) -> Self {
        Conditioning {
            image: Some(features.to_vec()),
            score_prefix: Some(prefix),
        }
    }

    pub fn text_only() -> Self {
        Conditioning::default()
    }

    pub fn has_image(&self) -> bool {
        self.image.is_some()
    }
}

/// What a pass generated. The caption of [`Trajectory::Score`] is an input,
/// not part of the action.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Caption(Caption),
    CaptionThenScore(Caption, usize),
    Score { caption: Caption, bin: usize },
}

impl Trajectory {
    pub fn caption(&self) -> &Caption {
        match self {
            Trajectory::Caption(c) | Trajectory::CaptionThenScore(c, _) => c,
            Trajectory::Score { caption, .. } => caption,
        }
    }

    pub fn score_bin(&self) -> Option<usize> {
        match self {
            Trajectory::Caption(_) => None,
            Trajectory::CaptionThenScore(_, b) | Trajectory::Score { bin: b, .. } => Some(*b),
        }
    }

    fn generates_caption(&self) -> bool {
        !matches!(self, Trajectory::Score { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotLabel {
    Image,
    Token(TokenId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub labels: Vec<SlotLabel>,
    pub weights: Vec<f64>,
    /// Pre-softmax attention scores `q · slot`.
    pub logits: Vec<f64>,
}

impl AttentionTrace {
    pub fn has_image_slot(&self) -> bool {
        self.labels.contains(&SlotLabel::Image)
    }

    pub fn image_weight(&self) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| *l == SlotLabel::Image)
            .map(|i| self.weights[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    pub probs: Vec<f64>,
}

impl ScoreDistribution {
    pub fn bins(&self) -> usize {
        self.probs.len()
    }
}

pub fn bin_center(bin: usize, bins: usize) -> f64 {
    if bins <= 1 {
        return 0.5 * (MOS_MIN + MOS_MAX);
    }
    MOS_MIN + (MOS_MAX - MOS_MIN) * bin as f64 / (bins - 1) as f64
}

pub fn bin_of(mos: f64, bins: usize) -> usize {
    if bins <= 1 {
        return 0;
    }
    let step = (MOS_MAX - MOS_MIN) / (bins - 1) as f64;
    (((mos - MOS_MIN) / step).round().max(0.0) as usize).min(bins - 1)
}

/// Expected score over the bin centers.
pub fn point_score(d: &ScoreDistribution) -> f64 {
    let k = d.bins();
    d.probs
        .iter()
        .enumerate()
        .map(|(i, p)| p * bin_center(i, k))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub token_emb: Array2<f64>,
    pub img_proj: Array2<f64>,
    /// One row per score bin plus a trailing MASK row.
    pub score_prefix_emb: Array2<f64>,
    pub cap_hidden_w: Array2<f64>,
    pub cap_hidden_b: Array1<f64>,
    pub cap_out: Array2<f64>,
    pub attn_query: Array1<f64>,
    pub scorer_out_w: Array2<f64>,
    pub scorer_out_b: Array1<f64>,
}

pub const TENSOR_NAMES: [&str; 9] = [
    "token_emb",
    "img_proj",
    "score_prefix_emb",
    "cap_hidden_w",
    "cap_hidden_b",
    "cap_out",
    "attn_query",
    "scorer_out_w",
    "scorer_out_b",
];

impl PolicyParams {
    pub fn zeros(d: ModelDims) -> Self {
        PolicyParams {
            token_emb: Array2::zeros((d.vocab, d.embed)),
            img_proj: Array2::zeros((d.embed, d.feature_dim)),
            score_prefix_emb: Array2::zeros((d.bins + 1, d.embed)),
            cap_hidden_w: Array2::zeros((d.hidden, d.embed)),
            cap_hidden_b: Array1::zeros(d.hidden),
            cap_out: Array2::zeros((d.vocab, d.hidden)),
            attn_query: Array1::zeros(d.embed),
            scorer_out_w: Array2::zeros((d.bins, d.embed)),
            scorer_out_b: Array1::zeros(d.bins),
        }
    }

    /// Seeded Gaussian weights (std 0.08), zero biases.
    pub fn init(d: ModelDims, seed: u64) -> Self {
        let mut p = PolicyParams::zeros(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (name, t) in p.tensors_mut() {
            if name.ends_with("_b") {
                continue;
            }
            t.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParams::zeros(self.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.token_emb.nrows(),
            feature_dim: self.img_proj.ncols(),
            embed: self.token_emb.ncols(),
            hidden: self.cap_hidden_w.nrows(),
            bins: self.scorer_out_w.nrows(),
        }
    }

    pub fn mask_row(&self) -> usize {
        self.score_prefix_emb.nrows() - 1
    }

    pub fn shapes(&self) -> [Vec<usize>; 9] {
        [
            self.token_emb.shape().to_vec(),
            self.img_proj.shape().to_vec(),
            self.score_prefix_emb.shape().to_vec(),
            self.cap_hidden_w.shape().to_vec(),
            self.cap_hidden_b.shape().to_vec(),
            self.cap_out.shape().to_vec(),
            self.attn_query.shape().to_vec(),
            self.scorer_out_w.shape().to_vec(),
            self.scorer_out_b.shape().to_vec(),
        ]
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 9] {
        fn s(a: Option<&[f64]>) -> &[f64] {
            a.expect("standard layout")
        }
        [
            (TENSOR_NAMES[0], s(self.token_emb.as_slice())),
            (TENSOR_NAMES[1], s(self.img_proj.as_slice())),
            (TENSOR_NAMES[2], s(self.score_prefix_emb.as_slice())),
            (TENSOR_NAMES[3], s(self.cap_hidden_w.as_slice())),
            (TENSOR_NAMES[4], s(self.cap_hidden_b.as_slice())),
            (TENSOR_NAMES[5], s(self.cap_out.as_slice())),
            (TENSOR_NAMES[6], s(self.attn_query.as_slice())),
            (TENSOR_NAMES[7], s(self.scorer_out_w.as_slice())),
            (TENSOR_NAMES[8], s(self.scorer_out_b.as_slice())),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 9] {
        fn s<'a>(a: Option<&'a mut [f64]>) -> &'a mut [f64] {
            a.expect("standard layout")
        }
        [
            (TENSOR_NAMES[0], s(self.token_emb.as_slice_mut())),
            (TENSOR_NAMES[1], s(self.img_proj.as_slice_mut())),
            (TENSOR_NAMES[2], s(self.score_prefix_emb.as_slice_mut())),
            (TENSOR_NAMES[3], s(self.cap_hidden_w.as_slice_mut())),
            (TENSOR_NAMES[4], s(self.cap_hidden_b.as_slice_mut())),
            (TENSOR_NAMES[5], s(self.cap_out.as_slice_mut())),
            (TENSOR_NAMES[6], s(self.attn_query.as_slice_mut())),
            (TENSOR_NAMES[7], s(self.scorer_out_w.as_slice_mut())),
            (TENSOR_NAMES[8], s(self.scorer_out_b.as_slice_mut())),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &PolicyParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn dot(&self, other: &PolicyParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn check_compatible(&self, vocab_len: usize, image: Option<&[f64]>) -> Result<()> {
        if vocab_len != self.token_emb.nrows() {
            return Err(Error::invalid(format!(
                "vocabulary has {vocab_len} tokens, parameters expect {}",
                self.token_emb.nrows()
            )));
        }
        if let Some(x) = image {
            if x.len() != self.img_proj.ncols() {
                return Err(Error::invalid(format!(
                    "image has {} features, parameters expect {}",
                    x.len(),
                    self.img_proj.ncols()
                )));
            }
        }
        Ok(())
    }
}

fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = logits.mapv(|v| (v - max).exp());
    let z = out.sum();
    out /= z;
    out
}

fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

struct CaptionStep {
    ctx: Array1<f64>,
    hidden: Array1<f64>,
    logits: Array1<f64>,
    /// Number of averaged context components.
    width: usize,
}

struct ScoreStep {
    slots: Vec<Array1<f64>>,
    labels: Vec<SlotLabel>,
    attn_logits: Array1<f64>,
    attn: Array1<f64>,
    pooled: Array1<f64>,
    logits: Array1<f64>,
}

/// Forward state of one trajectory, kept for the backward pass.
struct Pass {
    caption_steps: Vec<CaptionStep>,
    score_step: Option<ScoreStep>,
}

impl PolicyParams {
    fn context_base(&self, cond: &Conditioning) -> Result<(Array1<f64>, usize)> {
        let e = self.token_emb.ncols();
        let mut base = Array1::zeros(e);
        let mut width = 0;
        if let Some(x) = &cond.image {
            base += &self.img_proj.dot(&ArrayView1::from(x.as_slice()));
            width += 1;
        }
        if let Some(prefix) = cond.score_prefix {
            let row = self.prefix_row(prefix)?;
            base += &self.score_prefix_emb.row(row);
            width += 1;
        }
        if width == 0 {
            return Err(Error::invalid(
                "caption generation needs an image or a score prefix",
            ));
        }
        Ok((base, width))
    }

    fn prefix_row(&self, prefix: ScorePrefix) -> Result<usize> {
        match prefix {
            ScorePrefix::Mask => Ok(self.mask_row()),
            ScorePrefix::Bin(b) if b < self.mask_row() => Ok(b),
            ScorePrefix::Bin(b) => Err(Error::invalid(format!("score prefix bin {b} out of range"))),
        }
    }

    fn caption_step_from_sum(&self, sum: &Array1<f64>, width: usize) -> CaptionStep {
        let ctx = sum / width as f64;
        let hidden = (self.cap_hidden_w.dot(&ctx) + &self.cap_hidden_b).mapv(f64::tanh);
        let logits = self.cap_out.dot(&hidden);
        CaptionStep {
            ctx,
            hidden,
            logits,
            width,
        }
    }

    fn score_step(&self, image: Option<&[f64]>, caption: Option<&Caption>) -> Result<ScoreStep> {
        let mut slots = Vec::new();
        let mut labels = Vec::new();
        if let Some(x) = image {
            slots.push(self.img_proj.dot(&ArrayView1::from(x)));
            labels.push(SlotLabel::Image);
        }
        if let Some(c) = caption {
            for &t in &c.tokens {
                if t >= self.token_emb.nrows() {
                    return Err(Error::invalid(format!("token id {t} out of range")));
                }
                slots.push(self.token_emb.row(t).to_owned());
                labels.push(SlotLabel::Token(t));
            }
        }
        if image.is_none() && caption.is_none() {
            return Err(Error::invalid("score prediction needs an image or a caption"));
        }
        if slots.is_empty() {
            return Err(Error::invalid("score prediction has no input slots"));
        }
        let attn_logits: Array1<f64> = slots.iter().map(|s| self.attn_query.dot(s)).collect();
        let attn = softmax(attn_logits.view());
        let mut pooled = Array1::zeros(self.attn_query.len());
        for (a, s) in attn.iter().zip(&slots) {
            pooled.scaled_add(*a, s);
        }
        let logits = self.scorer_out_w.dot(&pooled) + &self.scorer_out_b;
        Ok(ScoreStep {
            slots,
            labels,
            attn_logits,
            attn,
            pooled,
            logits,
        })
    }

    fn forward(&self, cond: &Conditioning, traj: &Trajectory) -> Result<Pass> {
        self.check_compatible(self.token_emb.nrows(), cond.image.as_deref())?;
        let caption = traj.caption();
        let mut caption_steps = Vec::new();
        if traj.generates_caption() {
            let (mut sum, base_width) = self.context_base(cond)?;
            for (t, &tok) in caption.tokens.iter().enumerate() {
                if tok >= self.token_emb.nrows() {
                    return Err(Error::invalid(format!("token id {tok} out of range")));
                }
                caption_steps.push(self.caption_step_from_sum(&sum, base_width + t));
                sum += &self.token_emb.row(tok);
            }
        }
        let score_step = match traj.score_bin() {
            Some(bin) => {
                if bin >= self.scorer_out_w.nrows() {
                    return Err(Error::invalid(format!("score bin {bin} out of range")));
                }
                Some(self.score_step(cond.image.as_deref(), Some(caption))?)
            }
            None => None,
        };
        Ok(Pass {
            caption_steps,
            score_step,
        })
    }

    /// Accumulates into `grad` the gradient implied by per-step logit
    /// gradients: `caption_g[t]` for caption step t, `score_g` for the score
    /// step.
    fn backward(
        &self,
        cond: &Conditioning,
        traj: &Trajectory,
        pass: &Pass,
        caption_g: &[Array1<f64>],
        score_g: Option<&Array1<f64>>,
        grad: &mut PolicyParams,
    ) {
        let caption = traj.caption();
        let e = self.token_emb.ncols();

        if !pass.caption_steps.is_empty() {
            // Gradient reaching the shared context base, and per caption position.
            let mut g_base = Array1::<f64>::zeros(e);
            let mut g_tok_ctx = vec![Array1::<f64>::zeros(e); caption.tokens.len()];
            // suffix sums: token j feeds every step t > j
            let mut g_ctx_steps = Vec::with_capacity(pass.caption_steps.len());
            for (step, g_l) in pass.caption_steps.iter().zip(caption_g) {
                grad.cap_out += &outer(g_l, &step.hidden);
                let g_h = self.cap_out.t().dot(g_l);
                let g_z = &g_h * &step.hidden.mapv(|h| 1.0 - h * h);
                grad.cap_hidden_w += &outer(&g_z, &step.ctx);
                grad.cap_hidden_b += &g_z;
                let g_ctx = self.cap_hidden_w.t().dot(&g_z) / step.width as f64;
                g_base += &g_ctx;
                g_ctx_steps.push(g_ctx);
            }
            let mut running = Array1::<f64>::zeros(e);
            for j in (0..pass.caption_steps.len()).rev() {
                // token j contributes to steps j+1..
                g_tok_ctx[j] = running.clone();
                running += &g_ctx_steps[j];
            }
            for (j, g) in g_tok_ctx.iter().enumerate() {
                let tok = caption.tokens[j];
                let mut row = grad.token_emb.row_mut(tok);
                row += g;
            }
            if let Some(x) = &cond.image {
                grad.img_proj += &outer(&g_base, &ArrayView1::from(x.as_slice()).to_owned());
            }
            if let Some(prefix) = cond.score_prefix {
                let row = self.prefix_row(prefix).expect("validated in forward");
                let mut r = grad.score_prefix_emb.row_mut(row);
                r += &g_base;
            }
        }

        if let (Some(step), Some(g_l)) = (&pass.score_step, score_g) {
            grad.scorer_out_w += &outer(g_l, &step.pooled);
            grad.scorer_out_b += g_l;
            let g_u = self.scorer_out_w.t().dot(g_l);
            let gamma: Array1<f64> = step.slots.iter().map(|s| g_u.dot(s)).collect();
            let mean_gamma = step.attn.dot(&gamma);
            let g_e = &step.attn * &gamma.mapv(|g| g - mean_gamma);
            for ((slot, label), (&a, &ge)) in step
                .slots
                .iter()
                .zip(&step.labels)
                .zip(step.attn.iter().zip(g_e.iter()))
            {
                grad.attn_query.scaled_add(ge, slot);
                let g_slot = &g_u * a + &self.attn_query * ge;
                match label {
                    SlotLabel::Image => {
                        let x = cond.image.as_ref().expect("image slot implies image");
                        grad.img_proj += &outer(&g_slot, &ArrayView1::from(x.as_slice()).to_owned());
                    }
                    SlotLabel::Token(t) => {
                        let mut row = grad.token_emb.row_mut(*t);
                        row += &g_slot;
                    }
                }
            }
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

fn onehot_minus(probs: &Array1<f64>, target: usize) -> Array1<f64> {
    let mut g = -probs;
    g[target] += 1.0;
    g
}

/// Next-token distribution given a caption prefix.
pub fn caption_step_distribution(
    p: &PolicyParams,
    vocab: &Vocabulary,
    cond: &Conditioning,
    prefix: &Caption,
) -> Result<Vec<f64>> {
    p.check_compatible(vocab.len(), cond.image.as_deref())?;
    if prefix.len() >= vocab.max_caption_len() {
        return Err(Error::MustTerminate(vocab.max_caption_len()));
    }
    let (mut sum, width) = p.context_base(cond)?;
    for &t in &prefix.tokens {
        if t >= vocab.len() {
            return Err(Error::invalid(format!("token id {t} out of range")));
        }
        sum += &p.token_emb.row(t);
    }
    let step = p.caption_step_from_sum(&sum, width + prefix.len());
    Ok(softmax(step.logits.view()).to_vec())
}

fn draw(logits: &Array1<f64>, decoding: Decoding, rng: &mut impl Rng) -> usize {
    match decoding {
        Decoding::Greedy => argmax(logits),
        Decoding::Sample { temperature } => {
            let probs = softmax((logits / temperature).view());
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Ancestral sampling of `n` captions. Stored log-probabilities are always
/// measured at temperature 1, whatever the sampling temperature.
pub fn sample_captions(
    p: &PolicyParams,
    vocab: &Vocabulary,
    cond: &Conditioning,
    n: usize,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> Result<Vec<Caption>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if let Decoding::Sample { temperature } = decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
    }
    p.check_compatible(vocab.len(), cond.image.as_deref())?;
    let (base, width) = p.context_base(cond)?;
    (0..n)
        .map(|_| {
            let mut sum = base.clone();
            let mut tokens = Vec::new();
            let mut logprobs = Vec::new();
            while tokens.len() < vocab.max_caption_len() {
                let step = p.caption_step_from_sum(&sum, width + tokens.len());
                let tok = draw(&step.logits, decoding, rng);
                logprobs.push(log_softmax(step.logits.view())[tok]);
                tokens.push(tok);
                if tok == vocab.eos() {
                    break;
                }
                sum += &p.token_emb.row(tok);
            }
            Ok(Caption {
                tokens,
                logprobs: Some(logprobs),
            })
        })
        .collect()
}

pub fn score_distribution(
    p: &PolicyParams,
    image: Option<&[f64]>,
    caption: Option<&Caption>,
) -> Result<(ScoreDistribution, AttentionTrace)> {
    p.check_compatible(p.token_emb.nrows(), image)?;
    let step = p.score_step(image, caption)?;
    let probs = softmax(step.logits.view()).to_vec();
    Ok((
        ScoreDistribution { probs },
        AttentionTrace {
            labels: step.labels,
            weights: step.attn.to_vec(),
            logits: step.attn_logits.to_vec(),
        },
    ))
}

/// Draws a score bin; returns the bin and its temperature-1 log-probability.
pub fn sample_score(
    p: &PolicyParams,
    image: Option<&[f64]>,
    caption: &Caption,
    decoding: Decoding,
    rng: &mut impl Rng,
) -> Result<(usize, f64)> {
    p.check_compatible(p.token_emb.nrows(), image)?;
    let step = p.score_step(image, Some(caption))?;
    let bin = draw(&step.logits, decoding, rng);
    Ok((bin, log_softmax(step.logits.view())[bin]))
}

pub fn trajectory_logprob(p: &PolicyParams, cond: &Conditioning, traj: &Trajectory) -> Result<f64> {
    let pass = p.forward(cond, traj)?;
    Ok(trajectory_value(&pass, traj))
}

/// Log-probability of generating `caption` (and then `score_bin`, when given)
/// under `cond`.
pub fn sequence_logprob(
    p: &PolicyParams,
    cond: &Conditioning,
    caption: &Caption,
    score_bin: Option<usize>,
) -> Result<f64> {
    let traj = match score_bin {
        Some(b) => Trajectory::CaptionThenScore(caption.clone(), b),
        None => Trajectory::Caption(caption.clone()),
    };
    trajectory_logprob(p, cond, &traj)
}

/// Log-probability and its exact gradient with respect to every tensor.
pub fn grad_trajectory_logprob(
    p: &PolicyParams,
    cond: &Conditioning,
    traj: &Trajectory,
) -> Result<(f64, PolicyParams)> {
    let pass = p.forward(cond, traj)?;
    let caption = traj.caption();
    let caption_g: Vec<Array1<f64>> = pass
        .caption_steps
        .iter()
        .zip(&caption.tokens)
        .map(|(s, &t)| onehot_minus(&softmax(s.logits.view()), t))
        .collect();
    let score_g = match (&pass.score_step, traj.score_bin()) {
        (Some(step), Some(bin)) => Some(onehot_minus(&softmax(step.logits.view()), bin)),
        _ => None,
    };
    let value = trajectory_value(&pass, traj);
    let mut grad = p.zeros_like();
    p.backward(cond, traj, &pass, &caption_g, score_g.as_ref(), &mut grad);
    Ok((value, grad))
}

fn trajectory_value(pass: &Pass, traj: &Trajectory) -> f64 {
    let caption = traj.caption();
    let mut total: f64 = pass
        .caption_steps
        .iter()
        .zip(&caption.tokens)
        .map(|(s, &t)| log_softmax(s.logits.view())[t])
        .sum();
    if let (Some(step), Some(bin)) = (&pass.score_step, traj.score_bin()) {
        total += log_softmax(step.logits.view())[bin];
    }
    total
}

pub fn grad_logprob(
    p: &PolicyParams,
    cond: &Conditioning,
    caption: &Caption,
    score_bin: Option<usize>,
) -> Result<PolicyParams> {
    let traj = match score_bin {
        Some(b) => Trajectory::CaptionThenScore(caption.clone(), b),
        None => Trajectory::Caption(caption.clone()),
    };
    grad_trajectory_logprob(p, cond, &traj).map(|(_, g)| g)
}

fn categorical_kl(logp: &Array1<f64>, logq: &Array1<f64>) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

fn step_logits(pass: &Pass) -> Vec<&Array1<f64>> {
    pass.caption_steps
        .iter()
        .map(|s| &s.logits)
        .chain(pass.score_step.iter().map(|s| &s.logits))
        .collect()
}

/// Sum over generation steps of `KL(current step ‖ reference step)`, with
/// the trajectory's own tokens as the shared prefix.
pub fn kl_divergence(
    p: &PolicyParams,
    reference: &PolicyParams,
    cond: &Conditioning,
    traj: &Trajectory,
) -> Result<f64> {
    let cur = p.forward(cond, traj)?;
    let refp = reference.forward(cond, traj)?;
    Ok(step_logits(&cur)
        .into_iter()
        .zip(step_logits(&refp))
        .map(|(a, b)| categorical_kl(&log_softmax(a.view()), &log_softmax(b.view())))
        .sum())
}

/// KL value and its gradient with respect to the current parameters.
pub fn grad_kl_divergence(
    p: &PolicyParams,
    reference: &PolicyParams,
    cond: &Conditioning,
    traj: &Trajectory,
) -> Result<(f64, PolicyParams)> {
    let cur = p.forward(cond, traj)?;
    let refp = reference.forward(cond, traj)?;
    let mut total = 0.0;
    let mut grads: Vec<Array1<f64>> = step_logits(&cur)
        .into_iter()
        .zip(step_logits(&refp))
        .map(|(a, b)| {
            let logp = log_softmax(a.view());
            let logq = log_softmax(b.view());
            let kl = categorical_kl(&logp, &logq);
            total += kl;
            // d KL / d logit_k = p_k (log p_k - log q_k - KL)
            logp.iter()
                .zip(&logq)
                .map(|(lp, lq)| lp.exp() * (lp - lq - kl))
                .collect()
        })
        .collect();
    let score_g = if cur.score_step.is_some() { grads.pop() } else { None };
    let mut grad = p.zeros_like();
    p.backward(cond, traj, &cur, &grads, score_g.as_ref(), &mut grad);
    Ok((total, grad))
}
