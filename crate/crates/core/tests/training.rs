use qflow::captions::{Caption, Vocabulary};
use qflow::grpo::{grpo_update, GrpoConfig, RolloutCandidate, RolloutGroup};
use qflow::paradigms::{
    build_rollouts, run_iteration, train, IterationContext, ParadigmConfig, ParadigmKind, StageSeeds, TrainConfig,
};
use qflow::policy::{trajectory_logprob, Conditioning, ModelDims, PolicyParams, Trajectory};
use qflow::synthdata::{generate_dataset, DataConfig, QualityRecord};

fn fixture(n: usize) -> (Vocabulary, PolicyParams, Vec<QualityRecord>) {
    let vocab = Vocabulary::default();
    let data = generate_dataset(21, n, &DataConfig::default()).unwrap();
    let p = PolicyParams::init(ModelDims::new(vocab.len(), 16), 4);
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

fn cfg(kind: ParadigmKind, alpha: f64, beta: f64) -> ParadigmConfig {
    let mut c = ParadigmConfig::new(kind, alpha, beta);
    c.grpo.learning_rate = 0.5;
    c
}

#[test]
fn self_consistency_without_stage_two_ignores_its_stream() {
    let (vocab, p, recs) = fixture(6);
    let batch: Vec<&QualityRecord> = recs.iter().collect();
    let c = cfg(ParadigmKind::SelfConsistency, 1.0, 0.0);
    let (a, _) = run_iteration(&p, &ctx(&p, &vocab, 7, 100), &batch, &c, 1).unwrap();
    let (b, _) = run_iteration(&p, &ctx(&p, &vocab, 7, 200), &batch, &c, 1).unwrap();
    assert_eq!(a, b);
    let (d, _) = run_iteration(&p, &ctx(&p, &vocab, 8, 100), &batch, &c, 1).unwrap();
    assert_ne!(a, d);
}

#[test]
fn self_consistency_stage_two_is_text_only_and_weighted() {
    let (vocab, p, recs) = fixture(4);
    let batch: Vec<&QualityRecord> = recs.iter().collect();
    let c = cfg(ParadigmKind::SelfConsistency, 1.0, 0.5);
    let r = build_rollouts(&p, &ctx(&p, &vocab, 1, 2), &batch, &c).unwrap();
    assert_eq!(r.stage1.len(), 4);
    assert_eq!(r.stage2.len(), 4);
    for g in &r.stage2 {
        assert!(!g.conditioning.has_image());
        assert!(g.conditioning.score_prefix.is_none());
        assert_eq!(g.candidates.len(), c.grpo.group_size);
        assert!((g.weight - 0.5 / 4.0).abs() < 1e-15);
    }
    for g in &r.stage1 {
        assert!(g.conditioning.has_image());
        assert!((g.weight - 1.0 / 4.0).abs() < 1e-15);
    }
}

#[test]
fn autoencoder_decoder_only_leaves_the_captioner_untouched() {
    let (vocab, p, recs) = fixture(5);
    let batch: Vec<&QualityRecord> = recs.iter().collect();
    let c = cfg(ParadigmKind::AutoencoderLike, 0.0, 1.0);
    let (next, _) = run_iteration(&p, &ctx(&p, &vocab, 3, 4), &batch, &c, 1).unwrap();
    let changed: Vec<&str> = p
        .tensors()
        .iter()
        .zip(next.tensors().iter())
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect();
    for frozen in ["img_proj", "score_prefix_emb", "cap_hidden_w", "cap_hidden_b", "cap_out"] {
        assert!(!changed.contains(&frozen), "{frozen} changed");
    }
    assert!(changed.contains(&"scorer_out_w"), "{changed:?}");
}

#[test]
fn chain_of_thought_groups_match_the_budget() {
    let (vocab, p, recs) = fixture(3);
    let batch: Vec<&QualityRecord> = recs.iter().collect();
    let mut c = cfg(ParadigmKind::ChainOfThought, 1.0, 1.0);
    c.grpo.group_size = 4;
    c.grpo.scores_per_trace = 3;
    let r = build_rollouts(&p, &ctx(&p, &vocab, 5, 6), &batch, &c).unwrap();
    assert_eq!(r.stage1.len(), 3);
    assert_eq!(r.stage2.len(), 3 * 4);
    assert!(r.stage2.iter().all(|g| g.candidates.len() == 3 && !g.conditioning.has_image()));
}

#[test]
fn identical_rewards_leave_params_unchanged_without_kl() {
    let (vocab, p, recs) = fixture(1);
    let cond = Conditioning::image(&recs[0].features);
    let caption = Caption::new(vec![5, vocab.eos()]);
    let traj = Trajectory::CaptionThenScore(caption, 8);
    let lp = trajectory_logprob(&p, &cond, &traj).unwrap();
    let cand = RolloutCandidate {
        trajectory: traj,
        reward: 1.5,
        logprob_current: lp,
        logprob_old: lp,
        logprob_ref: lp,
    };
    let mut g = RolloutGroup::new(cond, vec![cand; 4], 1.0);
    g.compute_advantages(1e-8).unwrap();
    let cfg = GrpoConfig {
        kl_coeff: 0.0,
        ..GrpoConfig::default()
    };
    let (next, stats) = grpo_update(&p, &p, &[g], &cfg).unwrap();
    assert_eq!(next, p);
    assert_eq!(stats.degenerate_groups, 1);
}

#[test]
fn training_is_deterministic_and_logs_every_iteration() {
    let (vocab, p, recs) = fixture(20);
    let set: Vec<&QualityRecord> = recs.iter().collect();
    let c = cfg(ParadigmKind::AutoencoderLike, 1.0, 1.0);
    let tc = TrainConfig {
        iterations: 6,
        batch_size: 4,
        temperature: 1.0,
    };
    let a = train(&c, &tc, &vocab, &set, p.clone(), 77, |_, _| Ok(())).unwrap();
    let b = train(&c, &tc, &vocab, &set, p.clone(), 77, |_, _| Ok(())).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 6);
    assert!(a.log.iter().all(|s| s.stage2_reward.is_some()));
    let c2 = train(&c, &tc, &vocab, &set, p, 78, |_, _| Ok(())).unwrap();
    assert_ne!(a.params, c2.params);
}

#[test]
fn callback_error_stops_training_with_last_good_params() {
    let (vocab, p, recs) = fixture(10);
    let set: Vec<&QualityRecord> = recs.iter().collect();
    let c = cfg(ParadigmKind::ScoreOnlyBaseline, 1.0, 0.0);
    let tc = TrainConfig {
        iterations: 5,
        batch_size: 3,
        temperature: 1.0,
    };
    let err = train(&c, &tc, &vocab, &set, p, 1, |s, _| {
        if s.iteration == 2 {
            Err(qflow::Error::NonFinite("forced".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert_eq!(err.log.len(), 2);
    assert!(err.last_good.is_finite());
}
