//! PLCC/SRCC, condition-wise evaluation, image–text gap reports and the
//! attention histogram.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::captions::{Caption, Vocabulary};
use crate::error::{Error, Result};
use crate::paradigms::{greedy_caption, score_in_mode, CaptionPrompt};
use crate::policy::{AttentionTrace, PolicyParams, SlotLabel};
use crate::synthdata::QualityRecord;

pub const IMAGE_SLOT: &str = "IMAGE_SLOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EvalMode {
    Image,
    Text,
    TextStripped,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Image, EvalMode::Text, EvalMode::TextStripped];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Image => "image",
            EvalMode::Text => "text",
            EvalMode::TextStripped => "text_stripped",
        }
    }

    pub fn is_text_only(self) -> bool {
        self != EvalMode::Image
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "image" => Ok(EvalMode::Image),
            "text" => Ok(EvalMode::Text),
            "text_stripped" => Ok(EvalMode::TextStripped),
            other => Err(Error::invalid(format!("unknown evaluation mode {other:?}"))),
        }
    }
}

pub fn parse_modes(s: &str) -> Result<Vec<EvalMode>> {
    let mut modes = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: EvalMode = part.parse()?;
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    if modes.is_empty() {
        return Err(Error::invalid("no evaluation modes given"));
    }
    Ok(modes)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the inputs is constant".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson over average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    plcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub mode: EvalMode,
    pub plcc: f64,
    pub srcc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub record_id: usize,
    pub mode: EvalMode,
    pub score: f64,
    pub mos: f64,
    pub caption: Caption,
    pub trace: AttentionTrace,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ConditionRow>,
    pub gap_plcc: Option<f64>,
    pub gap_srcc: Option<f64>,
}

impl EvalReport {
    pub fn row(&self, mode: EvalMode) -> Option<&ConditionRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    fn fill_gaps(&mut self) {
        let gaps = match (self.row(EvalMode::Image), self.row(EvalMode::Text)) {
            (Some(i), Some(t)) => Some((i.plcc - t.plcc, i.srcc - t.srcc)),
            _ => None,
        };
        if let Some((p, s)) = gaps {
            self.gap_plcc = Some(p);
            self.gap_srcc = Some(s);
        }
    }

    pub fn gap_line(&self) -> Option<String> {
        match (self.gap_plcc, self.gap_srcc) {
            (Some(p), Some(s)) => Some(format!("gap_plcc={p} gap_srcc={s}")),
            _ => None,
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "condition={} plcc={} srcc={} n={}", r.mode, r.plcc, r.srcc, r.n);
        }
        if let Some(g) = self.gap_plcc {
            let _ = writeln!(out, "gap_plcc={g}");
        }
        if let Some(g) = self.gap_srcc {
            let _ = writeln!(out, "gap_srcc={g}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = EvalReport::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let real = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::parse(lineno, format!("bad number {v:?}")))
            };
            if let Some(v) = line.strip_prefix("gap_plcc=") {
                report.gap_plcc = Some(real(v)?);
                continue;
            }
            if let Some(v) = line.strip_prefix("gap_srcc=") {
                report.gap_srcc = Some(real(v)?);
                continue;
            }
            let mut fields = BTreeMap::new();
            for kv in line.split_whitespace() {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::parse(lineno, format!("expected key=value, got {kv:?}")))?;
                fields.insert(k, v);
            }
            let get = |k: &str| {
                fields
                    .get(k)
                    .copied()
                    .ok_or_else(|| Error::parse(lineno, format!("missing {k}")))
            };
            let mode: EvalMode = get("condition")?.parse().map_err(|e: Error| Error::parse(lineno, e.to_string()))?;
            let n: usize = get("n")?
                .parse()
                .map_err(|_| Error::parse(lineno, "bad n"))?;
            report.rows.push(ConditionRow {
                mode,
                plcc: real(get("plcc")?)?,
                srcc: real(get("srcc")?)?,
                n,
            });
        }
        Ok(report)
    }
}

fn check_test_set(test: &[&QualityRecord]) -> Result<()> {
    if test.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 test records, got {}", test.len())));
    }
    Ok(())
}

fn row_from(mode: EvalMode, preds: &[&Prediction]) -> Result<ConditionRow> {
    let s: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let m: Vec<f64> = preds.iter().map(|p| p.mos).collect();
    Ok(ConditionRow {
        mode,
        plcc: plcc(&s, &m)?,
        srcc: srcc(&s, &m)?,
        n: preds.len(),
    })
}

/// One greedy caption per record, scored under every requested mode.
pub fn predict(
    p: &PolicyParams,
    vocab: &Vocabulary,
    test: &[&QualityRecord],
    modes: &[EvalMode],
    prompt: CaptionPrompt,
) -> Result<Vec<Prediction>> {
    let per_record = test
        .par_iter()
        .map(|r| {
            let caption = greedy_caption(p, vocab, &r.features, prompt)?;
            modes
                .iter()
                .map(|&mode| {
                    let (score, trace) = score_in_mode(p, vocab, &r.features, &caption, mode)?;
                    Ok(Prediction {
                        record_id: r.id,
                        mode,
                        score,
                        mos: r.mos,
                        caption: caption.clone(),
                        trace,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_record.into_iter().flatten().collect())
}

pub fn report_from_predictions(preds: &[Prediction], modes: &[EvalMode]) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for &mode in modes {
        let subset: Vec<&Prediction> = preds.iter().filter(|p| p.mode == mode).collect();
        if subset.len() < 3 {
            return Err(Error::invalid(format!("need at least 3 predictions for mode {mode}")));
        }
        report.rows.push(row_from(mode, &subset)?);
    }
    report.fill_gaps();
    Ok(report)
}

pub fn evaluate(
    p: &PolicyParams,
    vocab: &Vocabulary,
    test: &[&QualityRecord],
    mode: EvalMode,
    prompt: CaptionPrompt,
) -> Result<ConditionRow> {
    check_test_set(test)?;
    let preds = predict(p, vocab, test, &[mode], prompt)?;
    let refs: Vec<&Prediction> = preds.iter().collect();
    row_from(mode, &refs)
}

/// All three conditions on shared greedy captions, plus the image–text gaps.
pub fn gap_report(
    p: &PolicyParams,
    vocab: &Vocabulary,
    test: &[&QualityRecord],
    prompt: CaptionPrompt,
) -> Result<(EvalReport, Vec<Prediction>)> {
    check_test_set(test)?;
    let preds = predict(p, vocab, test, &EvalMode::ALL, prompt)?;
    let report = report_from_predictions(&preds, &EvalMode::ALL)?;
    Ok((report, preds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramEntry {
    pub label: String,
    pub mean_weight: f64,
    pub count: usize,
    /// Mean pre-softmax attention score for the label.
    pub mean_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionHistogram {
    pub entries: Vec<HistogramEntry>,
    pub predictions: usize,
}

pub fn slot_name(label: SlotLabel, vocab: &Vocabulary) -> String {
    match label {
        SlotLabel::Image => IMAGE_SLOT.to_string(),
        SlotLabel::Token(t) => vocab.token(t).unwrap_or("<?>").to_string(),
    }
}

impl AttentionHistogram {
    /// Mean weight per slot label over every occurrence, sorted descending.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a AttentionTrace>, vocab: &Vocabulary) -> Self {
        let mut acc: BTreeMap<SlotLabel, (f64, f64, usize)> = BTreeMap::new();
        let mut predictions = 0;
        for t in traces {
            predictions += 1;
            for ((label, w), logit) in t.labels.iter().zip(&t.weights).zip(&t.logits) {
                let e = acc.entry(*label).or_insert((0.0, 0.0, 0));
                e.0 += w;
                e.1 += logit;
                e.2 += 1;
            }
        }
        let mut entries: Vec<HistogramEntry> = acc
            .into_iter()
            .map(|(label, (w, l, c))| HistogramEntry {
                label: slot_name(label, vocab),
                mean_weight: w / c as f64,
                count: c,
                mean_logit: l / c as f64,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.mean_weight
                .total_cmp(&a.mean_weight)
                .then_with(|| a.label.cmp(&b.label))
        });
        AttentionHistogram {
            entries,
            predictions,
        }
    }

    pub fn top(&self) -> Option<&HistogramEntry> {
        self.entries.first()
    }

    pub fn get(&self, label: &str) -> Option<&HistogramEntry> {
        self.entries.iter().find(|e| e.label == label)
    }

    /// `label,mean_weight,count` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.label, e.mean_weight, e.count);
        }
        out
    }

    /// `label,mean_logit,count` lines in the same order as [`to_csv`](Self::to_csv).
    pub fn logits_csv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.label, e.mean_logit, e.count);
        }
        out
    }

    /// Parses the `label,mean_weight,count` format. Logits are not part of it
    /// and come back as zero.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.rsplitn(3, ',').collect();
            if parts.len() != 3 {
                return Err(Error::parse(i + 1, "expected label,mean_weight,count"));
            }
            let (count, weight, label) = (parts[0], parts[1], parts[2]);
            let mean_weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad weight {weight:?}")))?;
            if !(0.0..=1.0).contains(&mean_weight) {
                return Err(Error::parse(i + 1, format!("weight {mean_weight} outside [0,1]")));
            }
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("bad count {count:?}")))?;
            if label.is_empty() {
                return Err(Error::parse(i + 1, "empty label"));
            }
            entries.push(HistogramEntry {
                label: label.to_string(),
                mean_weight,
                count,
                mean_logit: 0.0,
            });
        }
        Ok(AttentionHistogram {
            entries,
            predictions: 0,
        })
    }
}

pub fn attention_report(
    p: &PolicyParams,
    vocab: &Vocabulary,
    test: &[&QualityRecord],
    mode: EvalMode,
    prompt: CaptionPrompt,
) -> Result<AttentionHistogram> {
    check_test_set(test)?;
    let preds = predict(p, vocab, test, &[mode], prompt)?;
    Ok(AttentionHistogram::from_traces(preds.iter().map(|p| &p.trace), vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((plcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| -v + 7.0).collect();
        assert!((plcc(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!((plcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn srcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let cubed: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 10.0).collect();
        assert!((srcc(&x, &cubed).unwrap() - 1.0).abs() < 1e-12);
        assert!((srcc(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn correlation_errors() {
        assert!(matches!(
            plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(plcc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let mut r = EvalReport {
            rows: vec![
                ConditionRow { mode: EvalMode::Image, plcc: 0.91234567891, srcc: 0.9, n: 10 },
                ConditionRow { mode: EvalMode::Text, plcc: 0.7, srcc: -0.1, n: 10 },
                ConditionRow { mode: EvalMode::TextStripped, plcc: 0.69, srcc: 0.2, n: 10 },
            ],
            ..Default::default()
        };
        r.fill_gaps();
        assert_eq!(r.gap_plcc, Some(0.91234567891 - 0.7));
        let back = EvalReport::parse(&r.to_file_string()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_file_string().lines().count(), 5);
    }

    #[test]
    fn histogram_round_trip_and_conservation() {
        let v = Vocabulary::default();
        let traces = vec![
            AttentionTrace {
                labels: vec![SlotLabel::Image, SlotLabel::Token(3), SlotLabel::Token(0)],
                weights: vec![0.5, 0.3, 0.2],
                logits: vec![1.0, 0.4, 0.0],
            },
            AttentionTrace {
                labels: vec![SlotLabel::Image],
                weights: vec![1.0],
                logits: vec![0.2],
            },
        ];
        let h = AttentionHistogram::from_traces(&traces, &v);
        assert_eq!(h.top().unwrap().label, IMAGE_SLOT);
        assert!((h.get(IMAGE_SLOT).unwrap().mean_weight - 0.75).abs() < 1e-15);
        let mass: f64 = h.entries.iter().map(|e| e.mean_weight * e.count as f64).sum();
        assert!((mass - traces.len() as f64).abs() < 1e-12);
        let back = AttentionHistogram::parse_csv(&h.to_csv()).unwrap();
        assert_eq!(back.to_csv(), h.to_csv());
    }

    #[test]
    fn modes_parse() {
        assert_eq!(parse_modes("image,text,text_stripped").unwrap(), EvalMode::ALL.to_vec());
        assert!(parse_modes("image,pixels").is_err());
        assert!(parse_modes("").is_err());
    }
}
