//! Run reports (pretty JSON) and delimiter-separated tables.
//!
//! Reports carry no timestamps or wall-clock timings, so a command repeated
//! with the same config and seed writes the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attnsim::{HadTarget, MapSource};
use crate::config::LabConfig;
use crate::distill::Selection;
use crate::error::{LabError, Result};

/// Modelling choices that are fixed in code or easy to misread from the
/// config alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignFlags {
    pub attention_scale: String,
    pub coherency_maps: MapSource,
    pub had_target: HadTarget,
    pub softmax_quantized: bool,
    pub layernorm_quantized: bool,
    pub weight_quant: String,
    pub act_quant: String,
    /// Which tensors the `lsq` mode makes learnable.
    pub lsq_applies_to: String,
    pub ema_momentum: f64,
    pub synthesis_clamping: bool,
    pub student_selection: Selection,
    pub stratification: String,
}

impl DesignFlags {
    pub fn from_config(c: &LabConfig) -> Self {
        DesignFlags {
            attention_scale: "1/sqrt(embed_dim)".into(),
            coherency_maps: c.synth.map_source,
            had_target: c.distill.target,
            softmax_quantized: false,
            layernorm_quantized: false,
            weight_quant: "per-output-channel symmetric min-max, refit every forward".into(),
            act_quant: "per-tensor asymmetric, EMA-tracked range".into(),
            lsq_applies_to: "activations".into(),
            ema_momentum: c.distill.ema_momentum,
            synthesis_clamping: false,
            student_selection: c.distill.selection,
            stratification: "within-class".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub compute: String,
    pub storage: String,
    pub rng: String,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            compute: "f64".into(),
            storage: "f32 little-endian".into(),
            rng: "ChaCha8".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: LabConfig,
    pub design: DesignFlags,
    pub environment: Environment,
    /// Final scalars, e.g. `accuracy` or `mean_coherency`; `null` marks an
    /// undefined value such as a degenerate correlation.
    pub metrics: BTreeMap<String, Option<f64>>,
    /// Per-epoch or per-step curves.
    pub series: BTreeMap<String, Vec<Option<f64>>>,
    /// Files written next to the report, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, config: &LabConfig) -> Self {
        RunReport {
            command: command.into(),
            config: config.clone(),
            design: DesignFlags::from_config(config),
            environment: Environment::current(),
            metrics: BTreeMap::new(),
            series: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.metrics.insert(key.into(), finite(value));
        self
    }

    pub fn series(&mut self, key: impl Into<String>, values: Vec<f64>) -> &mut Self {
        self.series.insert(key.into(), values.into_iter().map(finite).collect());
        self
    }

    pub fn artifact(&mut self, name: impl Into<String>) -> &mut Self {
        self.artifacts.push(name.into());
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => LabError::MissingCheckpoint(path.to_path_buf()),
            _ => LabError::Io(e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Serializes rows as CSV with a header taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_text(path, &to_csv(rows)?)
}

/// One bar of a coherency histogram, annotated with the accuracy of the
/// students trained on that subset (empty for unscored pools).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_center: f64,
    pub count: usize,
    pub subset: String,
    pub accuracy: Option<f64>,
}

/// `bins` uniform bins over the observed range of all scores; each subset
/// gets one row per bin.
pub fn coherency_histogram(groups: &[(String, Vec<f64>, Option<f64>)], bins: usize) -> Result<Vec<HistogramRow>> {
    if bins == 0 {
        return Err(LabError::invalid("histogram needs at least one bin"));
    }
    let all = groups.iter().flat_map(|g| g.1.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(LabError::invalid("histogram needs finite scores"));
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut rows = Vec::with_capacity(groups.len() * bins);
    for (name, scores, acc) in groups {
        let mut counts = vec![0usize; bins];
        for &v in scores {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        for (b, &count) in counts.iter().enumerate() {
            rows.push(HistogramRow {
                bin_center: lo + (b as f64 + 0.5) * width,
                count,
                subset: name.clone(),
                accuracy: *acc,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        let groups = vec![
            ("a".to_string(), vec![0.0, 0.1, 1.0], Some(0.5)),
            ("b".to_string(), vec![0.5], None),
        ];
        let rows = coherency_histogram(&groups, 4).unwrap();
        assert_eq!(rows.len(), 8);
        let counts: Vec<usize> = rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![2, 0, 0, 1, 0, 0, 1, 0]);
        assert_eq!(rows[0].bin_center, 0.125);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 4);
        let csv = to_csv(&rows[..1]).unwrap();
        assert_eq!(csv, "bin_center,count,subset,accuracy\n0.125,2,a,0.5\n");
        let blank = to_csv(&rows[4..5]).unwrap();
        assert!(blank.ends_with(",b,\n"));
    }

    #[test]
    fn report_json_is_stable() {
        let cfg = LabConfig::default();
        let mut r = RunReport::new("eval", &cfg);
        r.metric("accuracy", 0.75)
            .metric("undefined", f64::NAN)
            .series("loss", vec![1.0, f64::NAN])
            .artifact("x.ckpt");
        assert_eq!(r.metrics["undefined"], None);
        let a = r.to_json().unwrap();
        let back: RunReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), a);
    }
}
