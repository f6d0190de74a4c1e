//! The training paradigms: how rollouts are drawn, rewarded, grouped and
//! weighted before one combined GRPO step.
//!
//! | paradigm          | stage 1 (sees image)               | stage 2 (text only)            |
//! |-------------------|------------------------------------|--------------------------------|
//! | chain of thought  | N captions, reward = mean of M     | M scores per caption           |
//! | self consistency  | N (caption, score) pairs           | one score per caption, group N |
//! | autoencoder-like  | N captions given the true MOS bin  | one score per caption, group N |
//! | score-only        | N (caption, score) pairs           | none                           |

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::captions::{strip_score_words, Caption, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::EvalMode;
use crate::grpo::{self, GrpoConfig, RolloutCandidate, RolloutGroup};
use crate::policy::{
    self, bin_center, bin_of, point_score, AttentionTrace, Conditioning, Decoding, PolicyParams,
    ScorePrefix, Trajectory,
};
use crate::rewards::{format_reward, tolerance_reward, trace_reward, RewardConfig};
use crate::synthdata::QualityRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParadigmKind {
    ChainOfThought,
    SelfConsistency,
    AutoencoderLike,
    ScoreOnlyBaseline,
}

impl ParadigmKind {
    pub fn name(self) -> &'static str {
        match self {
            ParadigmKind::ChainOfThought => "chain_of_thought",
            ParadigmKind::SelfConsistency => "self_consistency",
            ParadigmKind::AutoencoderLike => "autoencoder_like",
            ParadigmKind::ScoreOnlyBaseline => "score_only",
        }
    }

    pub fn has_stage2(self) -> bool {
        self != ParadigmKind::ScoreOnlyBaseline
    }

    /// How captions are prompted at test time.
    pub fn caption_prompt(self) -> CaptionPrompt {
        match self {
            ParadigmKind::AutoencoderLike => CaptionPrompt::ImageWithMask,
            _ => CaptionPrompt::Image,
        }
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParadigmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "chain_of_thought" | "cot" => Ok(ParadigmKind::ChainOfThought),
            "self_consistency" | "sc" => Ok(ParadigmKind::SelfConsistency),
            "autoencoder_like" | "autoencoder" | "ae" => Ok(ParadigmKind::AutoencoderLike),
            "score_only" | "score_only_baseline" | "baseline" => Ok(ParadigmKind::ScoreOnlyBaseline),
            other => Err(Error::invalid(format!("unknown paradigm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionPrompt {
    Image,
    /// Image plus the MASK score placeholder.
    ImageWithMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParadigmConfig {
    pub kind: ParadigmKind,
    /// Weight of the stage-1 objective.
    pub alpha: f64,
    /// Weight of the stage-2 objective (not the KL coefficient).
    pub beta: f64,
    pub grpo: GrpoConfig,
    pub rewards: RewardConfig,
}

impl ParadigmConfig {
    pub fn new(kind: ParadigmKind, alpha: f64, beta: f64) -> Self {
        ParadigmConfig {
            kind,
            alpha,
            beta,
            grpo: GrpoConfig::default(),
            rewards: RewardConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("paradigm.alpha must be non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("paradigm.beta must be non-negative"));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::invalid("paradigm.alpha + paradigm.beta must be positive"));
        }
        self.grpo.validate()?;
        self.rewards.validate()
    }

    fn stage1_weight(&self) -> f64 {
        match self.kind {
            ParadigmKind::ScoreOnlyBaseline => 1.0,
            _ => self.alpha,
        }
    }
}

/// Seeds of the stage-local sampling streams for one iteration. Record `i`
/// of the batch draws from stream `i` of each seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub stage1: u64,
    pub stage2: u64,
}

pub struct IterationContext<'a> {
    pub reference: &'a PolicyParams,
    pub vocab: &'a Vocabulary,
    pub temperature: f64,
    pub seeds: StageSeeds,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rollouts {
    pub stage1: Vec<RolloutGroup>,
    pub stage2: Vec<RolloutGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub paradigm: ParadigmKind,
    pub mean_reward: f64,
    pub stage1_reward: f64,
    pub stage2_reward: Option<f64>,
    pub objective: f64,
    pub stage1_objective: f64,
    pub stage2_objective: Option<f64>,
    pub kl: f64,
    pub clip_frac: f64,
    pub degenerate_stage1: usize,
    pub degenerate_stage2: usize,
}

impl IterationStats {
    pub fn is_finite(&self) -> bool {
        [self.mean_reward, self.objective, self.kl, self.clip_frac]
            .iter()
            .chain(self.stage2_reward.iter())
            .all(|v| v.is_finite())
    }

    /// One training-log line.
    pub fn log_line(&self) -> String {
        let mut line = format!(
            "iter={} paradigm={} mean_reward={:.8} objective={:.8} kl={:.8} clip_frac={:.6} stage1_reward={:.8}",
            self.iteration,
            self.paradigm,
            self.mean_reward,
            self.objective,
            self.kl,
            self.clip_frac,
            self.stage1_reward
        );
        if let Some(r) = self.stage2_reward {
            line.push_str(&format!(" stage2_reward={r:.8}"));
        }
        line
    }
}

fn stream_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn candidate(
    p: &PolicyParams,
    reference: &PolicyParams,
    cond: &Conditioning,
    trajectory: Trajectory,
    reward: f64,
) -> Result<RolloutCandidate> {
    let lp = policy::trajectory_logprob(p, cond, &trajectory)?;
    let lp_ref = policy::trajectory_logprob(reference, cond, &trajectory)?;
    Ok(RolloutCandidate {
        trajectory,
        reward,
        logprob_current: lp,
        logprob_old: lp,
        logprob_ref: lp_ref,
    })
}

struct RecordRollout {
    stage1: RolloutGroup,
    stage2: Vec<RolloutGroup>,
}

fn score_value(bin: usize, bins: usize) -> f64 {
    bin_center(bin, bins)
}

/// Stage 1 of self-consistency and the score-only baseline: captions from
/// the image, then a score from (image, caption) for every complete caption.
fn caption_and_score_group(
    p: &PolicyParams,
    ctx: &IterationContext,
    record: &QualityRecord,
    cfg: &ParadigmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(RolloutGroup, Vec<Caption>)> {
    let n = cfg.grpo.group_size;
    let bins = p.dims().bins;
    let decoding = Decoding::Sample {
        temperature: ctx.temperature,
    };
    let cond = Conditioning::image(&record.features);
    let captions = policy::sample_captions(p, ctx.vocab, &cond, n, decoding, rng)?;
    let mut cands = Vec::with_capacity(n);
    for c in &captions {
        let caption = Caption::new(c.tokens.clone());
        let (traj, reward) = if caption.is_complete(ctx.vocab) {
            let (bin, _) = policy::sample_score(p, Some(&record.features), &caption, decoding, rng)?;
            let r = tolerance_reward(score_value(bin, bins), record.mos, cfg.rewards.tolerance)?
                + cfg.rewards.format_weight * format_reward(&caption, ctx.vocab, true);
            (Trajectory::CaptionThenScore(caption, bin), r)
        } else {
            let r = cfg.rewards.format_weight * format_reward(&caption, ctx.vocab, false);
            (Trajectory::Caption(caption), r)
        };
        cands.push(candidate(p, ctx.reference, &cond, traj, reward)?);
    }
    let plain: Vec<Caption> = captions.into_iter().map(|c| Caption::new(c.tokens)).collect();
    Ok((RolloutGroup::new(cond, cands, 0.0), plain))
}

/// One text-only score per caption, grouped across the captions.
fn text_score_group(
    p: &PolicyParams,
    ctx: &IterationContext,
    record: &QualityRecord,
    captions: &[Caption],
    cfg: &ParadigmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup> {
    let bins = p.dims().bins;
    let decoding = Decoding::Sample {
        temperature: ctx.temperature,
    };
    let cond = Conditioning::text_only();
    let cands = captions
        .iter()
        .map(|c| {
            let (bin, _) = policy::sample_score(p, None, c, decoding, rng)?;
            let r = tolerance_reward(score_value(bin, bins), record.mos, cfg.rewards.tolerance)?;
            candidate(
                p,
                ctx.reference,
                &cond,
                Trajectory::Score {
                    caption: c.clone(),
                    bin,
                },
                r,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup::new(cond, cands, 0.0))
}

fn record_rollout(
    p: &PolicyParams,
    ctx: &IterationContext,
    record: &QualityRecord,
    index: usize,
    cfg: &ParadigmConfig,
) -> Result<RecordRollout> {
    let mut rng1 = stream_rng(ctx.seeds.stage1, index);
    let mut rng2 = stream_rng(ctx.seeds.stage2, index);
    let n = cfg.grpo.group_size;
    let m = cfg.grpo.scores_per_trace;
    let bins = p.dims().bins;
    let t = cfg.rewards.tolerance;
    let decoding = Decoding::Sample {
        temperature: ctx.temperature,
    };

    match cfg.kind {
        ParadigmKind::ScoreOnlyBaseline => {
            let (stage1, _) = caption_and_score_group(p, ctx, record, cfg, &mut rng1)?;
            Ok(RecordRollout {
                stage1,
                stage2: Vec::new(),
            })
        }
        ParadigmKind::SelfConsistency => {
            let (stage1, captions) = caption_and_score_group(p, ctx, record, cfg, &mut rng1)?;
            let stage2 = text_score_group(p, ctx, record, &captions, cfg, &mut rng2)?;
            Ok(RecordRollout {
                stage1,
                stage2: vec![stage2],
            })
        }
        ParadigmKind::ChainOfThought => {
            let cond1 = Conditioning::image(&record.features);
            let captions = policy::sample_captions(p, ctx.vocab, &cond1, n, decoding, &mut rng1)?;
            let text = Conditioning::text_only();
            let mut stage2 = Vec::with_capacity(n);
            let mut cands1 = Vec::with_capacity(n);
            for c in captions {
                let caption = Caption::new(c.tokens);
                let mut scores = Vec::with_capacity(m);
                let mut cands2 = Vec::with_capacity(m);
                for _ in 0..m {
                    let (bin, _) = policy::sample_score(p, None, &caption, decoding, &mut rng2)?;
                    let s = score_value(bin, bins);
                    scores.push(s);
                    let traj = Trajectory::Score {
                        caption: caption.clone(),
                        bin,
                    };
                    cands2.push(candidate(p, ctx.reference, &text, traj, tolerance_reward(s, record.mos, t)?)?);
                }
                let reward = trace_reward(&scores, record.mos, t)?
                    + cfg.rewards.format_weight * format_reward(&caption, ctx.vocab, true);
                cands1.push(candidate(p, ctx.reference, &cond1, Trajectory::Caption(caption), reward)?);
                stage2.push(RolloutGroup::new(text.clone(), cands2, 0.0));
            }
            Ok(RecordRollout {
                stage1: RolloutGroup::new(cond1, cands1, 0.0),
                stage2,
            })
        }
        ParadigmKind::AutoencoderLike => {
            let cond1 = Conditioning::image_and_score(&record.features, ScorePrefix::Bin(bin_of(record.mos, bins)));
            let captions: Vec<Caption> = policy::sample_captions(p, ctx.vocab, &cond1, n, decoding, &mut rng1)?
                .into_iter()
                .map(|c| Caption::new(c.tokens))
                .collect();
            let stage2 = text_score_group(p, ctx, record, &captions, cfg, &mut rng2)?;
            let cands1 = captions
                .iter()
                .zip(&stage2.candidates)
                .map(|(c, decoded)| {
                    let reward = decoded.reward + cfg.rewards.format_weight * format_reward(c, ctx.vocab, true);
                    candidate(p, ctx.reference, &cond1, Trajectory::Caption(c.clone()), reward)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RecordRollout {
                stage1: RolloutGroup::new(cond1, cands1, 0.0),
                stage2: vec![stage2],
            })
        }
    }
}

/// Draws every rollout of one iteration against the snapshot `p`, assigns
/// stage weights and computes advantages.
pub fn build_rollouts(
    p: &PolicyParams,
    ctx: &IterationContext,
    batch: &[&QualityRecord],
    cfg: &ParadigmConfig,
) -> Result<Rollouts> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if !(ctx.temperature > 0.0 && ctx.temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let per_record = batch
        .par_iter()
        .enumerate()
        .map(|(i, r)| record_rollout(p, ctx, r, i, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Rollouts::default();
    for r in per_record {
        out.stage1.push(r.stage1);
        out.stage2.extend(r.stage2);
    }
    let w1 = cfg.stage1_weight() / out.stage1.len() as f64;
    let w2 = if out.stage2.is_empty() {
        0.0
    } else {
        cfg.beta / out.stage2.len() as f64
    };
    for g in &mut out.stage1 {
        g.weight = w1;
        g.compute_advantages(cfg.grpo.std_floor)?;
    }
    for g in &mut out.stage2 {
        g.weight = w2;
        g.compute_advantages(cfg.grpo.std_floor)?;
    }
    Ok(out)
}

fn mean_reward(groups: &[RolloutGroup]) -> Option<f64> {
    let (sum, n) = groups
        .iter()
        .flat_map(|g| g.candidates.iter())
        .fold((0.0, 0usize), |(s, n), c| (s + c.reward, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Rollouts plus one combined update on `α·J₁ + β·J₂`.
pub fn run_iteration(
    p: &PolicyParams,
    ctx: &IterationContext,
    batch: &[&QualityRecord],
    cfg: &ParadigmConfig,
    iteration: usize,
) -> Result<(PolicyParams, IterationStats)> {
    let rollouts = build_rollouts(p, ctx, batch, cfg)?;
    let n1 = rollouts.stage1.len();
    let degenerate_stage1 = rollouts.stage1.iter().filter(|g| g.is_degenerate()).count();
    let degenerate_stage2 = rollouts.stage2.iter().filter(|g| g.is_degenerate()).count();
    let stage1_reward = mean_reward(&rollouts.stage1).unwrap_or(0.0);
    let stage2_reward = if cfg.kind.has_stage2() {
        mean_reward(&rollouts.stage2)
    } else {
        None
    };
    let groups: Vec<RolloutGroup> = rollouts.stage1.into_iter().chain(rollouts.stage2).collect();
    let (next, update) = grpo::grpo_update(p, ctx.reference, &groups, &cfg.grpo)?;
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let stats = IterationStats {
        iteration,
        paradigm: cfg.kind,
        mean_reward: stage1_reward,
        stage1_reward,
        stage2_reward,
        objective: update.objective,
        stage1_objective: mean(&update.group_objectives[..n1]).unwrap_or(0.0),
        stage2_objective: mean(&update.group_objectives[n1..]),
        kl: update.mean_kl,
        clip_frac: update.clip_frac,
        degenerate_stage1,
        degenerate_stage2,
    };
    Ok((next, stats))
}

fn run_kind(
    expected: ParadigmKind,
    p: &PolicyParams,
    ctx: &IterationContext,
    batch: &[&QualityRecord],
    cfg: &ParadigmConfig,
    iteration: usize,
) -> Result<(PolicyParams, IterationStats)> {
    if cfg.kind != expected {
        return Err(Error::invalid(format!(
            "configured paradigm is {}, expected {}",
            cfg.kind, expected
        )));
    }
    run_iteration(p, ctx, batch, cfg, iteration)
}

pub fn run_cot_iteration(
    p: &PolicyParams,
    ctx: &IterationContext,
    batch: &[&QualityRecord],
    cfg: &ParadigmConfig,
) -> Result<(PolicyParams, IterationStats)> {
    run_kind(ParadigmKind::ChainOfThought, p, ctx, batch, cfg, 0)
}

pub fn run_sc_iteration(
    p: &PolicyParams,
    ctx: &IterationContext,
    batch: &[&QualityRecord],
    cfg: &ParadigmConfig,
) -> Result<(PolicyParams, IterationStats)> {
    run_kind(ParadigmKind::SelfConsistency, p, ctx, batch, cfg, 0)
}

pub fn run_ae_iteration(
    p: &PolicyParams,
    ctx: &IterationContext,
    batch: &[&QualityRecord],
    cfg: &ParadigmConfig,
) -> Result<(PolicyParams, IterationStats)> {
    run_kind(ParadigmKind::AutoencoderLike, p, ctx, batch, cfg, 0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 300,
            batch_size: 16,
            temperature: 1.0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<IterationStats>,
}

/// A run that stopped early; `last_good` holds the final finite parameters.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} iterations: {error}", log.len())]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub last_good: Box<PolicyParams>,
    pub log: Vec<IterationStats>,
}

/// Runs `tc.iterations` iterations from `init`, which also serves as the
/// frozen reference policy. The old policy is the snapshot at the start of
/// each iteration. `on_iteration` sees each iteration's stats and the
/// parameters it produced; an error from it stops training.
pub fn train<F>(
    cfg: &ParadigmConfig,
    tc: &TrainConfig,
    vocab: &Vocabulary,
    train_set: &[&QualityRecord],
    init: PolicyParams,
    seed: u64,
    mut on_iteration: F,
) -> std::result::Result<TrainOutcome, TrainFailure>
where
    F: FnMut(&IterationStats, &PolicyParams) -> Result<()>,
{
    let fail = |error: Error, params: &PolicyParams, log: Vec<IterationStats>| TrainFailure {
        error,
        last_good: Box::new(params.clone()),
        log,
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, &init, Vec::new()));
    }
    if tc.iterations > 0 && (train_set.is_empty() || tc.batch_size == 0) {
        return Err(fail(Error::invalid("training needs records and batch_size ≥ 1"), &init, Vec::new()));
    }
    let reference = init.clone();
    let mut params = init;
    let mut log = Vec::with_capacity(tc.iterations);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let batch_size = tc.batch_size.min(train_set.len().max(1));

    for iteration in 1..=tc.iterations {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor >= order.len() {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut master);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]]);
            cursor += 1;
        }
        let seeds = StageSeeds {
            stage1: master.next_u64(),
            stage2: master.next_u64(),
        };
        let ctx = IterationContext {
            reference: &reference,
            vocab,
            temperature: tc.temperature,
            seeds,
        };
        match run_iteration(&params, &ctx, &batch, cfg, iteration) {
            Ok((next, stats)) if stats.is_finite() && next.is_finite() => {
                params = next;
                if let Err(e) = on_iteration(&stats, &params) {
                    log.push(stats);
                    return Err(fail(e, &params, log));
                }
                log.push(stats);
            }
            Ok((_, stats)) => {
                let e = Error::NonFinite(format!("iteration {iteration}: {}", stats.log_line()));
                return Err(fail(e, &params, log));
            }
            Err(e) => return Err(fail(e, &params, log)),
        }
    }
    Ok(TrainOutcome { params, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub score: f64,
    pub caption: Caption,
    pub trace: AttentionTrace,
}

pub fn greedy_caption(
    p: &PolicyParams,
    vocab: &Vocabulary,
    features: &[f64],
    prompt: CaptionPrompt,
) -> Result<Caption> {
    let cond = match prompt {
        CaptionPrompt::Image => Conditioning::image(features),
        CaptionPrompt::ImageWithMask => Conditioning::image_and_score(features, ScorePrefix::Mask),
    };
    // greedy decoding never touches the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut caps = policy::sample_captions(p, vocab, &cond, 1, Decoding::Greedy, &mut rng)?;
    Ok(caps.pop().expect("one caption requested"))
}

/// Scores an already generated caption under one evaluation condition.
pub fn score_in_mode(
    p: &PolicyParams,
    vocab: &Vocabulary,
    features: &[f64],
    caption: &Caption,
    mode: EvalMode,
) -> Result<(f64, AttentionTrace)> {
    let (dist, trace) = match mode {
        EvalMode::Image => policy::score_distribution(p, Some(features), Some(caption))?,
        EvalMode::Text => policy::score_distribution(p, None, Some(caption))?,
        EvalMode::TextStripped => {
            let stripped = strip_score_words(caption, vocab);
            policy::score_distribution(p, None, Some(&stripped))?
        }
    };
    Ok((point_score(&dist), trace))
}

/// Greedy caption for the record, then a score under `mode`.
pub fn masked_inference(
    p: &PolicyParams,
    vocab: &Vocabulary,
    record: &QualityRecord,
    mode: EvalMode,
    prompt: CaptionPrompt,
) -> Result<Inference> {
    let caption = greedy_caption(p, vocab, &record.features, prompt)?;
    let (score, trace) = score_in_mode(p, vocab, &record.features, &caption, mode)?;
    Ok(Inference { score, caption, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ModelDims;
    use crate::synthdata::{generate_dataset, DataConfig};

    fn fixture() -> (Vocabulary, PolicyParams, Vec<QualityRecord>) {
        let vocab = Vocabulary::default();
        let data = generate_dataset(5, 6, &DataConfig::default()).unwrap();
        let p = PolicyParams::init(ModelDims::new(vocab.len(), 16), 9);
        (vocab, p, data.records)
    }

    fn ctx<'a>(reference: &'a PolicyParams, vocab: &'a Vocabulary, s1: u64, s2: u64) -> IterationContext<'a> {
        IterationContext {
            reference,
            vocab,
            temperature: 1.0,
            seeds: StageSeeds { stage1: s1, stage2: s2 },
        }
    }

    #[test]
    fn paradigm_names_round_trip() {
        for k in [
            ParadigmKind::ChainOfThought,
            ParadigmKind::SelfConsistency,
            ParadigmKind::AutoencoderLike,
            ParadigmKind::ScoreOnlyBaseline,
        ] {
            assert_eq!(k.name().parse::<ParadigmKind>().unwrap(), k);
        }
        assert!("dreaming".parse::<ParadigmKind>().is_err());
    }

    #[test]
    fn cot_group_shapes_and_trace_reward() {
        let (vocab, p, recs) = fixture();
        let batch: Vec<&QualityRecord> = recs.iter().take(2).collect();
        let mut cfg = ParadigmConfig::new(ParadigmKind::ChainOfThought, 1.0, 1.0);
        cfg.grpo.group_size = 3;
        cfg.grpo.scores_per_trace = 2;
        cfg.rewards.format_weight = 0.0;
        let r = build_rollouts(&p, &ctx(&p, &vocab, 1, 2), &batch, &cfg).unwrap();
        assert_eq!(r.stage1.len(), 2);
        assert_eq!(r.stage2.len(), 6);
        for (i, g1) in r.stage1.iter().enumerate() {
            assert!(g1.conditioning.has_image());
            for (j, c) in g1.candidates.iter().enumerate() {
                let g2 = &r.stage2[i * 3 + j];
                assert!(!g2.conditioning.has_image());
                let rewards = g2.rewards();
                assert_eq!(c.reward, rewards.iter().sum::<f64>() / rewards.len() as f64);
                for c2 in &g2.candidates {
                    assert_eq!(c2.trajectory.caption(), c.trajectory.caption());
                }
            }
        }
    }

    #[test]
    fn autoencoder_information_flow() {
        let (vocab, p, recs) = fixture();
        let batch: Vec<&QualityRecord> = recs.iter().take(2).collect();
        let cfg = ParadigmConfig::new(ParadigmKind::AutoencoderLike, 1.0, 1.0);
        let r = build_rollouts(&p, &ctx(&p, &vocab, 3, 4), &batch, &cfg).unwrap();
        for (g, rec) in r.stage1.iter().zip(&batch) {
            assert_eq!(g.conditioning.score_prefix, Some(ScorePrefix::Bin(bin_of(rec.mos, 17))));
            assert!(g.conditioning.has_image());
        }
        for g in &r.stage2 {
            assert_eq!(g.conditioning, Conditioning::text_only());
            assert!(g.candidates.iter().all(|c| matches!(c.trajectory, Trajectory::Score { .. })));
        }
    }

    #[test]
    fn on_policy_ratios_are_one() {
        let (vocab, p, recs) = fixture();
        let batch: Vec<&QualityRecord> = recs.iter().collect();
        let cfg = ParadigmConfig::new(ParadigmKind::SelfConsistency, 1.0, 1.0);
        let r = build_rollouts(&p, &ctx(&p, &vocab, 5, 6), &batch, &cfg).unwrap();
        for g in r.stage1.iter().chain(&r.stage2) {
            for c in &g.candidates {
                let now = policy::trajectory_logprob(&p, &g.conditioning, &c.trajectory).unwrap();
                assert_eq!(grpo::ratio(now, c.logprob_old), 1.0);
            }
        }
    }

    #[test]
    fn beta_zero_ignores_stage2_stream() {
        let (vocab, p, recs) = fixture();
        let batch: Vec<&QualityRecord> = recs.iter().collect();
        let mut cfg = ParadigmConfig::new(ParadigmKind::SelfConsistency, 1.0, 0.0);
        cfg.grpo.learning_rate = 0.1;
        let (a, _) = run_sc_iteration(&p, &ctx(&p, &vocab, 7, 100), &batch, &cfg).unwrap();
        let (b, _) = run_sc_iteration(&p, &ctx(&p, &vocab, 7, 200), &batch, &cfg).unwrap();
        assert_eq!(a, b);
        let (c, _) = run_sc_iteration(&p, &ctx(&p, &vocab, 8, 100), &batch, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_kind_rejected() {
        let (vocab, p, recs) = fixture();
        let batch: Vec<&QualityRecord> = recs.iter().collect();
        let cfg = ParadigmConfig::new(ParadigmKind::SelfConsistency, 1.0, 1.0);
        assert!(run_cot_iteration(&p, &ctx(&p, &vocab, 1, 1), &batch, &cfg).is_err());
    }

    #[test]
    fn zero_iterations_returns_init() {
        let (vocab, p, recs) = fixture();
        let set: Vec<&QualityRecord> = recs.iter().collect();
        let cfg = ParadigmConfig::new(ParadigmKind::ScoreOnlyBaseline, 1.0, 0.0);
        let tc = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &tc, &vocab, &set, p.clone(), 1, |_, _| Ok(())).unwrap();
        assert_eq!(out.params, p);
        assert!(out.log.is_empty());
    }

    #[test]
    fn inference_slots_and_stripping() {
        let (vocab, p, recs) = fixture();
        let rec = &recs[0];
        let img = masked_inference(&p, &vocab, rec, EvalMode::Image, CaptionPrompt::Image).unwrap();
        let txt = masked_inference(&p, &vocab, rec, EvalMode::Text, CaptionPrompt::Image).unwrap();
        assert_eq!(img.caption, txt.caption);
        assert_eq!(img.trace.labels.len(), img.caption.len() + 1);
        assert_eq!(txt.trace.labels.len(), txt.caption.len());
        assert!(!txt.trace.has_image_slot());
        let again = masked_inference(&p, &vocab, rec, EvalMode::Image, CaptionPrompt::Image).unwrap();
        assert_eq!(img, again);
    }
}
