//! One JSON object per line, one line per step.
//!
//! Keys, in order: `step`, `loss`, `lr`, `smax.L{l}.H{h}` for every head,
//! `gamma.L{l}.H{h}` for every head (1 when the head was not clipped that step),
//! `clip_events`, `update_rms_max`, `ms`. Non-finite numbers are written as `null`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub n_heads: usize,
    /// Indexed by `layer * n_heads + head`.
    pub smax: Vec<f64>,
    pub gamma: Vec<f64>,
    pub clip_events: usize,
    pub update_rms_max: f64,
    pub ms: f64,
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

impl MetricsRow {
    pub fn smax_at(&self, layer: usize, head: usize) -> f64 {
        self.smax[layer * self.n_heads + head]
    }

    /// Largest max logit across all heads this step.
    pub fn max_smax(&self) -> f64 {
        self.smax.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json_line(&self) -> String {
        let mut m = Map::new();
        m.insert("step".into(), Value::from(self.step));
        m.insert("loss".into(), num(self.loss));
        m.insert("lr".into(), num(self.lr));
        for (prefix, values) in [("smax", &self.smax), ("gamma", &self.gamma)] {
            for (i, &v) in values.iter().enumerate() {
                let key = format!("{prefix}.L{}.H{}", i / self.n_heads, i % self.n_heads);
                m.insert(key, num(v));
            }
        }
        m.insert("clip_events".into(), Value::from(self.clip_events));
        m.insert("update_rms_max".into(), num(self.update_rms_max));
        m.insert("ms".into(), num(self.ms));
        Value::Object(m).to_string()
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let bad = |what: String| Error::Format(format!("metrics row: {what}"));
        let v: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let obj = v.as_object().ok_or_else(|| bad("not an object".into()))?;
        let get = |k: &str| -> Result<f64> {
            match obj.get(k) {
                Some(Value::Null) => Ok(f64::NAN),
                Some(x) => x.as_f64().ok_or_else(|| bad(format!("{k} is not a number"))),
                None => Err(bad(format!("missing {k}"))),
            }
        };
        let mut heads: Vec<(usize, usize)> = Vec::new();
        for key in obj.keys() {
            if let Some(rest) = key.strip_prefix("smax.L") {
                let (l, h) = rest
                    .split_once(".H")
                    .and_then(|(l, h)| Some((l.parse().ok()?, h.parse().ok()?)))
                    .ok_or_else(|| bad(format!("malformed key {key}")))?;
                heads.push((l, h));
            }
        }
        let n_layers = heads.iter().map(|&(l, _)| l + 1).max().unwrap_or(0);
        let n_heads = heads.iter().map(|&(_, h)| h + 1).max().unwrap_or(0);
        if heads.len() != n_layers * n_heads {
            return Err(bad("smax keys do not cover a full layer × head grid".into()));
        }
        let mut smax = Vec::with_capacity(heads.len());
        let mut gamma = Vec::with_capacity(heads.len());
        for l in 0..n_layers {
            for h in 0..n_heads {
                smax.push(get(&format!("smax.L{l}.H{h}"))?);
                gamma.push(get(&format!("gamma.L{l}.H{h}"))?);
            }
        }
        let step = obj
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing step".into()))?;
        let clip_events = obj
            .get("clip_events")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing clip_events".into()))? as usize;
        Ok(Self {
            step,
            loss: get("loss")?,
            lr: get("lr")?,
            n_heads,
            smax,
            gamma,
            clip_events,
            update_rms_max: get("update_rms_max")?,
            ms: get("ms")?,
        })
    }
}

/// Appends rows to a metrics file, flushing after each so an aborted run keeps its history.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Truncates `path`, or appends to it when `append` is set (used on resume).
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_json_line())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            rows.push(MetricsRow::from_json_line(&line)?);
        }
    }
    Ok(rows)
}
