//! Reference implementations written independently of the library, plus
//! shared instance generators.
#![allow(dead_code)]

use qflow::captions::{Caption, Vocabulary};
use qflow::policy::{Conditioning, ModelDims, PolicyParams, ScorePrefix, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pearson correlation via raw moments: (nΣxy − ΣxΣy) / sqrt(...).
pub fn plcc_bruteforce(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Rank of each element: 1 + (#smaller) + (#equal others)/2.
pub fn ranks_bruteforce(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn srcc_bruteforce(x: &[f64], y: &[f64]) -> f64 {
    plcc_bruteforce(&ranks_bruteforce(x), &ranks_bruteforce(y))
}

/// Random vector of the given length; with `ties`, values come from a
/// handful of integers.
pub fn random_vector(rng: &mut impl Rng, len: usize, ties: bool) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if ties {
                rng.random_range(0..5) as f64
            } else {
                rng.random_range(-10.0..10.0)
            }
        })
        .collect()
}

/// Central-difference gradient of `f` with respect to every parameter.
pub fn numeric_gradient(p: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.num_params());
    let mut q = p.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|(_, t)| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = q.tensors()[ti].1[j];
            q.tensors_mut()[ti].1[j] = orig + h;
            let up = f(&q);
            q.tensors_mut()[ti].1[j] = orig - h;
            let down = f(&q);
            q.tensors_mut()[ti].1[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

pub fn flatten(p: &PolicyParams) -> Vec<f64> {
    p.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
}

/// Largest coordinate-wise relative error, with `floor` guarding coordinates
/// where both gradients are essentially zero.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn norm_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Params drawn wider than the training init so every nonlinearity matters.
pub fn random_params(seed: u64, vocab: usize, feature_dim: usize, scale: f64) -> PolicyParams {
    let mut p = PolicyParams::init(ModelDims::new(vocab, feature_dim), seed);
    p.scale(scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for (_, t) in p.tensors_mut() {
        for v in t.iter_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    p
}

pub fn random_caption(rng: &mut impl Rng, vocab: &Vocabulary, complete: bool) -> Caption {
    let cap = vocab.max_caption_len();
    let eos = vocab.eos();
    let word = |rng: &mut dyn rand::RngCore| loop {
        let t = rng.random_range(0..vocab.len());
        if t != eos {
            return t;
        }
    };
    let mut tokens = Vec::new();
    if complete {
        let words = rng.random_range(0..cap);
        for _ in 0..words {
            tokens.push(word(rng));
        }
        tokens.push(eos);
    } else {
        for _ in 0..cap {
            tokens.push(word(rng));
        }
    }
    Caption::new(tokens)
}

pub fn random_features(rng: &mut impl Rng, f: usize) -> Vec<f64> {
    (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A random (conditioning, trajectory) pair covering every trajectory shape.
pub fn random_instance(rng: &mut impl Rng, vocab: &Vocabulary, f: usize, bins: usize) -> (Conditioning, Trajectory) {
    let features = random_features(rng, f);
    match rng.random_range(0..5) {
        0 => {
            let complete = rng.random_bool(0.7);
            (
                Conditioning::image(&features),
                Trajectory::Caption(random_caption(rng, vocab, complete)),
            )
        }
        1 => (
            Conditioning::image(&features),
            Trajectory::CaptionThenScore(random_caption(rng, vocab, true), rng.random_range(0..bins)),
        ),
        2 => {
            let prefix = if rng.random_bool(0.5) {
                ScorePrefix::Mask
            } else {
                ScorePrefix::Bin(rng.random_range(0..bins))
            };
            (
                Conditioning::image_and_score(&features, prefix),
                Trajectory::Caption(random_caption(rng, vocab, true)),
            )
        }
        3 => (
            Conditioning::text_only(),
            Trajectory::Score {
                caption: random_caption(rng, vocab, true),
                bin: rng.random_range(0..bins),
            },
        ),
        _ => (
            Conditioning::image(&features),
            Trajectory::Score {
                caption: random_caption(rng, vocab, true),
                bin: rng.random_range(0..bins),
            },
        ),
    }
}
