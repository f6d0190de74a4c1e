//! `QFLOW-CKPT v1` text checkpoints: a header line, optional `#` comment
//! lines, then per tensor a `name d1,d2` line followed by its row-major
//! values at 17 significant digits.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::numfmt;
use crate::policy::{PolicyParams, TENSOR_NAMES};

const CKPT_MAGIC: &str = "QFLOW-CKPT";
const CKPT_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    /// `key=value` pairs carried in comment lines (e.g. the training paradigm).
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(params: PolicyParams) -> Self {
        Checkpoint {
            params,
            meta: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: &str) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn checkpoint_to_string(ckpt: &Checkpoint) -> String {
    let mut out = format!("{CKPT_MAGIC} {CKPT_VERSION}\n");
    for (k, v) in &ckpt.meta {
        let _ = writeln!(out, "# {k}={v}");
    }
    let shapes = ckpt.params.shapes();
    for ((name, data), shape) in ckpt.params.tensors().iter().zip(shapes.iter()) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "{name} {}", dims.join(","));
        let row_len = *shape.last().unwrap_or(&1);
        for row in data.chunks(row_len.max(1)) {
            let vals: Vec<String> = row.iter().map(|v| numfmt::sig17(*v)).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_string(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

fn parse_shape(s: &str, line: usize) -> Result<Vec<usize>> {
    let dims = s
        .split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(line, format!("bad dimension {d:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() || dims.len() > 2 || dims.iter().any(|&d| d == 0 || d > 1 << 20) {
        return Err(Error::parse(line, format!("unsupported shape {s:?}")));
    }
    Ok(dims)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
    let mut h = header.split_whitespace();
    if h.next() != Some(CKPT_MAGIC) {
        return Err(Error::parse(1, format!("expected {CKPT_MAGIC} header")));
    }
    match h.next() {
        Some(CKPT_VERSION) => {}
        Some(v) => return Err(Error::Format(format!("unsupported checkpoint version {v:?}"))),
        None => return Err(Error::parse(1, "missing checkpoint version")),
    }

    let mut meta = Vec::new();
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    while let Some((lineno, line)) = lines.next() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(c) = trimmed.strip_prefix('#') {
            if let Some((k, v)) = c.trim().split_once('=') {
                meta.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let name = parts.next().unwrap_or_default().to_string();
        let shape = parts
            .next()
            .ok_or_else(|| Error::parse(lineno, format!("tensor {name:?} lacks a shape")))?;
        if parts.next().is_some() {
            return Err(Error::parse(lineno, "expected `name shape`"));
        }
        let shape = parse_shape(shape, lineno)?;
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        while values.len() < count {
            let (vl, vline) = lines
                .next()
                .ok_or_else(|| Error::parse(lineno, format!("tensor {name} truncated")))?;
            for tok in vline.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(vl, format!("bad value {tok:?}")))?;
                if !v.is_finite() {
                    return Err(Error::parse(vl, format!("non-finite value {tok:?}")));
                }
                values.push(v);
            }
            if values.len() > count {
                return Err(Error::parse(vl, format!("too many values for tensor {name}")));
            }
        }
        tensors.push((name, shape, values));
    }

    let take = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let found: Vec<_> = tensors.iter().filter(|(n, _, _)| n == name).collect();
        match found.as_slice() {
            [(_, s, v)] => Ok((s.clone(), v.clone())),
            [] => Err(Error::Format(format!("missing tensor {name}"))),
            _ => Err(Error::Format(format!("duplicate tensor {name}"))),
        }
    };
    if let Some((n, _, _)) = tensors.iter().find(|(n, _, _)| !TENSOR_NAMES.contains(&n.as_str())) {
        return Err(Error::Format(format!("unknown tensor {n}")));
    }
    let mat = |name: &str| -> Result<Array2<f64>> {
        let (s, v) = take(name)?;
        if s.len() != 2 {
            return Err(Error::Format(format!("tensor {name} must be 2-D")));
        }
        Array2::from_shape_vec((s[0], s[1]), v).map_err(|e| Error::Format(e.to_string()))
    };
    let vec1 = |name: &str| -> Result<Array1<f64>> {
        let (s, v) = take(name)?;
        if s.len() != 1 {
            return Err(Error::Format(format!("tensor {name} must be 1-D")));
        }
        Ok(Array1::from(v))
    };

    let params = PolicyParams {
        token_emb: mat("token_emb")?,
        img_proj: mat("img_proj")?,
        score_prefix_emb: mat("score_prefix_emb")?,
        cap_hidden_w: mat("cap_hidden_w")?,
        cap_hidden_b: vec1("cap_hidden_b")?,
        cap_out: mat("cap_out")?,
        attn_query: vec1("attn_query")?,
        scorer_out_w: mat("scorer_out_w")?,
        scorer_out_b: vec1("scorer_out_b")?,
    };
    validate_shapes(&params)?;
    Ok(Checkpoint { params, meta })
}

fn validate_shapes(p: &PolicyParams) -> Result<()> {
    let d = p.dims();
    let ok = p.img_proj.nrows() == d.embed
        && p.score_prefix_emb.ncols() == d.embed
        && p.score_prefix_emb.nrows() == d.bins + 1
        && p.cap_hidden_w.ncols() == d.embed
        && p.cap_hidden_b.len() == d.hidden
        && p.cap_out.nrows() == d.vocab
        && p.cap_out.ncols() == d.hidden
        && p.attn_query.len() == d.embed
        && p.scorer_out_w.ncols() == d.embed
        && p.scorer_out_b.len() == d.bins;
    if ok {
        Ok(())
    } else {
        Err(Error::Format("inconsistent tensor shapes".into()))
    }
}
