//! Synthetic image-quality records with a known MOS oracle.
//!
//! Each record stands in for an image: a feature vector produced by a fixed
//! seeded projection of four latent distortion attributes, plus the MOS the
//! oracle assigns to those attributes.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numfmt;

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;
/// Bound on the observation noise added by the oracle.
pub const MAX_NOISE_DRAW: f64 = 0.25;

const DATA_MAGIC: &str = "QFLOW-DATA";
const DATA_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneAttributes {
    pub blur: f64,
    pub noise: f64,
    pub exposure_error: f64,
    pub composition: f64,
}

impl SceneAttributes {
    pub fn as_array(&self) -> [f64; 4] {
        [self.blur, self.noise, self.exposure_error, self.composition]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        SceneAttributes {
            blur: a[0],
            noise: a[1],
            exposure_error: a[2],
            composition: a[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        const NAMES: [&str; 4] = ["blur", "noise", "exposure_error", "composition"];
        for (name, v) in NAMES.iter().zip(self.as_array()) {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("attribute {name}={v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityRecord {
    pub id: usize,
    pub features: Vec<f64>,
    pub attributes: SceneAttributes,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub feature_dim: usize,
    /// Seed of the fixed attribute-to-feature projection.
    pub projection_seed: u64,
    /// Std of the per-record Gaussian perturbation added to the features.
    pub perturbation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            feature_dim: 16,
            projection_seed: 0x51F1_0A7E,
            perturbation: 0.02,
        }
    }
}

impl DataConfig {
    pub fn digest(&self) -> String {
        let canonical = format!(
            "f={};projection_seed={};perturbation={}",
            self.feature_dim,
            self.projection_seed,
            numfmt::sig17(self.perturbation)
        );
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<QualityRecord>,
    pub seed: u64,
    pub config_digest: String,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    /// Seeded shuffle followed by a train/test cut. The split lives in the run
    /// configuration, not the dataset file.
    pub fn split(&self, seed: u64, train_fraction: f64) -> (Vec<&QualityRecord>, Vec<&QualityRecord>) {
        let (train, test) = split_indices(self.records.len(), seed, train_fraction);
        (
            train.into_iter().map(|i| &self.records[i]).collect(),
            test.into_iter().map(|i| &self.records[i]).collect(),
        )
    }
}

pub fn split_indices(n: usize, seed: u64, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5B11_7000);
    idx.shuffle(&mut rng);
    let cut = ((n as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = idx.split_off(cut.min(n));
    (idx, test)
}

fn mos_unclamped(a: &SceneAttributes) -> f64 {
    5.0 - 1.6 * a.blur - 1.2 * a.noise - 0.8 * a.exposure_error + 1.0 * (a.composition - 0.5) * 0.8
}

/// Ground-truth quality for a set of attributes and an observation noise draw.
pub fn mos_oracle(attributes: &SceneAttributes, noise_draw: f64) -> Result<f64> {
    attributes.validate()?;
    if !noise_draw.is_finite() || noise_draw.abs() > MAX_NOISE_DRAW {
        return Err(Error::invalid(format!(
            "noise_draw={noise_draw} outside [-{MAX_NOISE_DRAW}, {MAX_NOISE_DRAW}]"
        )));
    }
    Ok((mos_unclamped(attributes) + noise_draw).clamp(MOS_MIN, MOS_MAX))
}

/// Whether `mos` is reachable from `attributes` under some admissible noise draw.
pub fn mos_consistent(attributes: &SceneAttributes, mos: f64) -> bool {
    let u = mos_unclamped(attributes);
    let lo = (u - MAX_NOISE_DRAW).clamp(MOS_MIN, MOS_MAX);
    let hi = (u + MAX_NOISE_DRAW).clamp(MOS_MIN, MOS_MAX);
    mos >= lo - 1e-7 && mos <= hi + 1e-7
}

struct Projection {
    weights: Vec<[f64; 4]>,
    bias: Vec<f64>,
}

impl Projection {
    fn new(config: &DataConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.projection_seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let bias_dist = Normal::new(0.0, 0.3).expect("bias normal");
        let weights = (0..config.feature_dim)
            .map(|_| std::array::from_fn(|_| unit.sample(&mut rng)))
            .collect();
        let bias = (0..config.feature_dim).map(|_| bias_dist.sample(&mut rng)).collect();
        Projection { weights, bias }
    }

    fn embed(&self, a: &SceneAttributes) -> Vec<f64> {
        let centered = a.as_array().map(|v| v - 0.5);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| {
                let z: f64 = w.iter().zip(&centered).map(|(wi, ai)| wi * ai).sum();
                (2.0 * z + b).tanh()
            })
            .collect()
    }
}

pub fn generate_dataset(seed: u64, n: usize, config: &DataConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if config.feature_dim == 0 {
        return Err(Error::invalid("feature_dim must be at least 1"));
    }
    if !(config.perturbation >= 0.0 && config.perturbation.is_finite()) {
        return Err(Error::invalid("perturbation must be finite and non-negative"));
    }
    let projection = Projection::new(config);
    let jitter = Normal::new(0.0, config.perturbation.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let records = (0..n)
        .map(|id| {
            let attributes = SceneAttributes::from_array(std::array::from_fn(|_| {
                numfmt::quantize9(rng.random::<f64>())
            }));
            let noise_draw = rng.random_range(-MAX_NOISE_DRAW..=MAX_NOISE_DRAW);
            let mos = numfmt::quantize9(mos_oracle(&attributes, noise_draw)?);
            let features = projection
                .embed(&attributes)
                .into_iter()
                .map(|f| {
                    let j = if config.perturbation > 0.0 { jitter.sample(&mut rng) } else { 0.0 };
                    numfmt::quantize9(f + j)
                })
                .collect();
            Ok(QualityRecord {
                id,
                features,
                attributes,
                mos,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        records,
        seed,
        config_digest: config.digest(),
    })
}

pub fn dataset_to_string(d: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DATA_MAGIC} {DATA_VERSION} seed={} f={}", d.seed, d.feature_dim());
    if !d.config_digest.is_empty() {
        let _ = writeln!(out, "# config_digest={}", d.config_digest);
    }
    for r in &d.records {
        let attrs: Vec<String> = r.attributes.as_array().iter().map(|v| numfmt::sig9(*v)).collect();
        let feats: Vec<String> = r.features.iter().map(|v| numfmt::sig9(*v)).collect();
        let _ = writeln!(
            out,
            "{}|{}|{}|{}",
            r.id,
            attrs.join(","),
            numfmt::sig9(r.mos),
            feats.join(",")
        );
    }
    out
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_string(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

fn parse_reals(field: &str, line: usize, what: &str) -> Result<Vec<f64>> {
    field
        .split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::parse(line, format!("bad {what} value {s:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite {what} value {s:?}")));
            }
            Ok(v)
        })
        .collect()
}

fn parse_header(line: &str) -> Result<(u64, usize)> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(DATA_MAGIC) {
        return Err(Error::parse(1, format!("expected {DATA_MAGIC} header")));
    }
    match parts.next() {
        Some(DATA_VERSION) => {}
        Some(v) => return Err(Error::Format(format!("unsupported dataset version {v:?}"))),
        None => return Err(Error::parse(1, "missing version")),
    }
    let mut seed = None;
    let mut dim = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("seed", v)) => seed = v.parse::<u64>().ok(),
            Some(("f", v)) => dim = v.parse::<usize>().ok(),
            _ => return Err(Error::parse(1, format!("unexpected header field {kv:?}"))),
        }
    }
    match (seed, dim) {
        (Some(s), Some(f)) if f > 0 => Ok((s, f)),
        _ => Err(Error::parse(1, "header needs seed=<u64> f=<dim>")),
    }
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let (seed, dim) = parse_header(header)?;
    let mut config_digest = String::new();
    let mut records = Vec::new();

    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(d) = comment.trim().strip_prefix("config_digest=") {
                config_digest = d.to_string();
            }
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 4 {
            return Err(Error::parse(lineno, format!("expected 4 '|' fields, found {}", fields.len())));
        }
        let id: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad id {:?}", fields[0])))?;
        if id != records.len() {
            return Err(Error::Invariant {
                line: lineno,
                message: format!("id {id} is not contiguous (expected {})", records.len()),
            });
        }
        let attrs = parse_reals(fields[1], lineno, "attribute")?;
        let attrs: [f64; 4] = attrs
            .try_into()
            .map_err(|v: Vec<f64>| Error::parse(lineno, format!("expected 4 attributes, found {}", v.len())))?;
        let attributes = SceneAttributes::from_array(attrs);
        attributes.validate().map_err(|e| Error::Invariant {
            line: lineno,
            message: e.to_string(),
        })?;
        let mos: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| Error::parse(lineno, format!("bad mos {:?}", fields[2])))?;
        if !(MOS_MIN..=MOS_MAX).contains(&mos) {
            return Err(Error::Invariant {
                line: lineno,
                message: format!("mos={mos} outside [1,5]"),
            });
        }
        if !mos_consistent(&attributes, mos) {
            return Err(Error::Invariant {
                line: lineno,
                message: format!("mos={mos} not reachable from the attributes under bounded noise"),
            });
        }
        let features = parse_reals(fields[3], lineno, "feature")?;
        if features.len() != dim {
            return Err(Error::parse(
                lineno,
                format!("expected {dim} features, found {}", features.len()),
            ));
        }
        records.push(QualityRecord {
            id,
            features,
            attributes,
            mos,
        });
    }
    if records.is_empty() {
        return Err(Error::parse(1, "no records"));
    }
    Ok(Dataset {
        records,
        seed,
        config_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(blur: f64, noise: f64, exposure_error: f64, composition: f64) -> SceneAttributes {
        SceneAttributes {
            blur,
            noise,
            exposure_error,
            composition,
        }
    }

    #[test]
    fn oracle_boundaries() {
        assert_eq!(mos_oracle(&attrs(0.0, 0.0, 0.0, 0.5), 0.0).unwrap(), 5.0);
        // the worst attributes stay above the floor: 5 - 1.6 - 1.2 - 0.8
        let worst = mos_oracle(&attrs(1.0, 1.0, 1.0, 0.5), 0.0).unwrap();
        assert!((worst - 1.4).abs() < 1e-12, "{worst}");
        assert_eq!(mos_oracle(&attrs(1.0, 1.0, 1.0, 0.0), -0.25).unwrap(), 1.0);
        let v = mos_oracle(&attrs(0.5, 0.0, 0.0, 0.5), 0.0).unwrap();
        assert!((v - 4.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn oracle_rejects_bad_input() {
        assert!(mos_oracle(&attrs(1.5, 0.0, 0.0, 0.5), 0.0).is_err());
        assert!(mos_oracle(&attrs(0.5, f64::NAN, 0.0, 0.5), 0.0).is_err());
        assert!(mos_oracle(&attrs(0.5, 0.0, 0.0, 0.5), 0.3).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = DataConfig::default();
        let a = generate_dataset(7, 4, &cfg).unwrap();
        let b = generate_dataset(7, 4, &cfg).unwrap();
        assert_eq!(dataset_to_string(&a), dataset_to_string(&b));
        let c = generate_dataset(8, 4, &cfg).unwrap();
        assert_ne!(a.records[0].features, c.records[0].features);
    }

    #[test]
    fn zero_records_rejected() {
        assert!(matches!(
            generate_dataset(7, 0, &DataConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mos_in_range_and_blur_signal() {
        let d = generate_dataset(7, 512, &DataConfig::default()).unwrap();
        assert!(d.records.iter().all(|r| (1.0..=5.0).contains(&r.mos)));
        let blur: Vec<f64> = d.records.iter().map(|r| r.attributes.blur).collect();
        let mos: Vec<f64> = d.records.iter().map(|r| r.mos).collect();
        let r = crate::evaluation::plcc(&blur, &mos).unwrap();
        assert!(r < -0.3, "blur/mos correlation {r}");
    }

    #[test]
    fn round_trip_through_text() {
        let d = generate_dataset(3, 20, &DataConfig::default()).unwrap();
        let back = parse_dataset(&dataset_to_string(&d)).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn truncated_file_names_line() {
        let d = generate_dataset(3, 5, &DataConfig::default()).unwrap();
        let text = dataset_to_string(&d);
        let cut = &text[..text.len() - 40];
        let last_line = cut.lines().count();
        match parse_dataset(cut) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, last_line),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_mos_is_invariant_error() {
        let d = generate_dataset(3, 2, &DataConfig::default()).unwrap();
        let text = dataset_to_string(&d);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[2].split('|').map(String::from).collect();
        fields[2] = "7.0".into();
        lines[2] = fields.join("|");
        match parse_dataset(&lines.join("\n")) {
            Err(Error::Invariant { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected invariant error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let text = "QFLOW-DATA v2 seed=1 f=2\n0|0,0,0,0.5|5|0,0\n";
        assert!(matches!(parse_dataset(text), Err(Error::Format(_))));
    }

    #[test]
    fn split_fractions() {
        let (train, test) = split_indices(768, 1, 2.0 / 3.0);
        assert_eq!((train.len(), test.len()), (512, 256));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..768).collect::<Vec<_>>());
    }
}
