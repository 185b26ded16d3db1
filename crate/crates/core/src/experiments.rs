//! Multi-run studies built from the pipeline pieces: coherency-stratified
//! subsets, bit-width sweeps and the synthesis ablation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{LabConfig, MotivConfig, SweepConfig};
use crate::data::LabeledImages;
use crate::distill::{evaluate_quantized, run_distillation, DistillConfig, DistillLog};
use crate::error::{LabError, Result};
use crate::quant::{BitWidths, QuantConfig, QuantizedViT};
use crate::report::{coherency_histogram, HistogramRow};
use crate::synthesis::{stratify_within_classes, synthesize, SynthConfig, SynthSet};
use crate::tensor::Tensor;
use crate::vit::MicroViT;

/// A base pool (no `L_IHC`) and a coherent set synthesized with one seed.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub seed: u64,
    pub base: SynthSet,
    pub coherent: SynthSet,
}

pub fn base_synth_config(synth: &SynthConfig, samples: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        samples_total: samples,
        coherency: false,
        seed,
        ..synth.clone()
    }
}

pub fn coherent_synth_config(synth: &SynthConfig, samples: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        samples_total: samples,
        coherency: true,
        seed,
        ..synth.clone()
    }
}

pub fn synth_pairs(teacher: &MicroViT, cfg: &LabConfig) -> Result<Vec<SynthPair>> {
    let m = &cfg.motiv;
    m.seeds
        .iter()
        .map(|&seed| {
            log::info!("synthesizing base pool and coherent set for seed {seed}");
            Ok(SynthPair {
                seed,
                base: synthesize(teacher, &base_synth_config(&cfg.synth, m.base_pool, seed))?,
                coherent: synthesize(teacher, &coherent_synth_config(&cfg.synth, m.coherent_pool, seed))?,
            })
        })
        .collect()
}

/// Accuracy of a student and the calibration-only starting point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfqResult {
    pub calibrated_accuracy: f64,
    pub log: DistillLog,
}

impl DfqResult {
    pub fn accuracy(&self) -> f64 {
        self.log.accuracy()
    }
}

pub fn dfq(teacher: &MicroViT, images: &Tensor, eval: &LabeledImages, cfg: &DistillConfig) -> Result<DfqResult> {
    let mut q = QuantizedViT::new(
        teacher.clone(),
        QuantConfig {
            bits: cfg.bits,
            mode: cfg.mode,
            ema_momentum: cfg.ema_momentum,
        },
    )?;
    q.calibrate(images, cfg.batch)?;
    let calibrated_accuracy = evaluate_quantized(&q, eval, 256)?;
    let out = run_distillation(teacher, images, eval, cfg)?;
    Ok(DfqResult {
        calibrated_accuracy,
        log: out.log,
    })
}

pub const SUBSETS: [&str; 4] = ["high", "low", "random", "coherent"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRun {
    pub seed: u64,
    pub subset: String,
    pub size: usize,
    pub mean_coherency: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotivStudy {
    pub runs: Vec<SubsetRun>,
    /// Mean student accuracy per subset over seeds.
    pub mean_accuracy: BTreeMap<String, f64>,
    pub base_mean_coherency: f64,
    pub coherent_mean_coherency: f64,
    pub histogram: Vec<HistogramRow>,
}

impl MotivStudy {
    pub fn high_minus_low(&self) -> f64 {
        self.mean_accuracy["high"] - self.mean_accuracy["low"]
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

/// Trains one student per (seed, subset). High, low and random subsets come
/// from the seed's base pool; the coherent subset is an equally sized,
/// class-balanced draw from the seed's coherent set.
pub fn motiv_study(
    teacher: &MicroViT,
    pairs: &[SynthPair],
    eval: &LabeledImages,
    distill: &DistillConfig,
    motiv: &MotivConfig,
) -> Result<MotivStudy> {
    if pairs.is_empty() {
        return Err(LabError::invalid("motivational study needs at least one synthesized pair"));
    }
    let mut runs = Vec::new();
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for pair in pairs {
        let strata = stratify_within_classes(&pair.base.coherency, &pair.base.labels, motiv.fraction, pair.seed)?;
        let k = strata.high.len();
        let share = k as f64 / pair.coherent.len() as f64;
        let coherent =
            stratify_within_classes(&pair.coherent.coherency, &pair.coherent.labels, share, pair.seed)?.random;
        if coherent.len() != k {
            return Err(LabError::invalid(format!(
                "coherent set of {} images cannot supply a balanced subset of {k}",
                pair.coherent.len()
            )));
        }
        if k < distill.batch {
            return Err(LabError::invalid(format!(
                "subset of {k} images is smaller than the training batch {}",
                distill.batch
            )));
        }
        let cfg = DistillConfig {
            bits: motiv.bits,
            gamma: motiv.gamma,
            seed: pair.seed,
            ..distill.clone()
        };
        for (name, source, idx) in [
            ("high", &pair.base, &strata.high),
            ("low", &pair.base, &strata.low),
            ("random", &pair.base, &strata.random),
            ("coherent", &pair.coherent, &coherent),
        ] {
            let sub = source.subset(idx)?;
            let out = run_distillation(teacher, &sub.images, eval, &cfg)?;
            log::info!("motiv seed {} subset {name}: accuracy {:.4}", pair.seed, out.log.accuracy());
            groups.entry(name).or_default().extend(&sub.coherency);
            runs.push(SubsetRun {
                seed: pair.seed,
                subset: name.into(),
                size: sub.len(),
                mean_coherency: sub.mean_coherency(),
                accuracy: out.log.accuracy(),
            });
        }
    }
    let mean_accuracy: BTreeMap<String, f64> = SUBSETS
        .iter()
        .map(|&s| (s.to_string(), mean(runs.iter().filter(|r| r.subset == s).map(|r| r.accuracy))))
        .collect();
    let mut hist_groups: Vec<(String, Vec<f64>, Option<f64>)> = vec![
        ("base_pool".into(), pairs.iter().flat_map(|p| p.base.coherency.clone()).collect(), None),
        ("coherent_pool".into(), pairs.iter().flat_map(|p| p.coherent.coherency.clone()).collect(), None),
    ];
    for s in SUBSETS {
        hist_groups.push((s.into(), groups.remove(s).unwrap_or_default(), Some(mean_accuracy[s])));
    }
    Ok(MotivStudy {
        runs,
        base_mean_coherency: mean(pairs.iter().flat_map(|p| p.base.coherency.iter().copied())),
        coherent_mean_coherency: mean(pairs.iter().flat_map(|p| p.coherent.coherency.iter().copied())),
        mean_accuracy,
        histogram: coherency_histogram(&hist_groups, motiv.bins)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `start`, `weight`, `act` or `end`.
    pub axis: String,
    pub bits: BitWidths,
    pub calibrated_accuracy: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `acc(W{min}A{max}) - acc(W{min}A{min})`.
    pub act_delta: f64,
    /// `acc(W{max}A{min}) - acc(W{min}A{min})`.
    pub weight_delta: f64,
}

/// Varies one bit width at a time from `W{k_min}A{k_min}`, plus the shared
/// `W{k_max}A{k_max}` endpoint.
pub fn sweep_bits(
    teacher: &MicroViT,
    images: &Tensor,
    eval: &LabeledImages,
    distill: &DistillConfig,
    sweep: &SweepConfig,
) -> Result<SweepTable> {
    let (lo, hi) = (sweep.k_min, sweep.k_max);
    let mut settings = vec![("start", BitWidths::new(lo, lo)?)];
    settings.extend(((lo + 1)..=hi).map(|k| ("weight", BitWidths { weight: k, act: lo })));
    settings.extend(((lo + 1)..=hi).map(|k| ("act", BitWidths { weight: lo, act: k })));
    settings.push(("end", BitWidths::new(hi, hi)?));
    let mut rows = Vec::with_capacity(settings.len());
    for (axis, bits) in settings {
        let r = dfq(teacher, images, eval, &DistillConfig { bits, ..distill.clone() })?;
        log::info!("sweep {bits}: accuracy {:.4}", r.accuracy());
        rows.push(SweepRow {
            axis: axis.into(),
            bits,
            calibrated_accuracy: r.calibrated_accuracy,
            accuracy: r.accuracy(),
        });
    }
    let at = |w: u8, a: u8| {
        rows.iter()
            .find(|r| r.bits == BitWidths { weight: w, act: a })
            .map(|r| r.accuracy)
            .expect("setting is part of the sweep")
    };
    let start = at(lo, lo);
    Ok(SweepTable {
        act_delta: at(lo, hi) - start,
        weight_delta: at(hi, lo) - start,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    /// Coherent synthesis with `L_HAD` at the configured gamma.
    pub full: DfqResult,
    /// Base synthesis, KL only.
    pub base: DfqResult,
}

/// Full method against the base pipeline at equal image budgets; the base
/// arm uses the first `coherent.len()` images of each base pool.
pub fn synthesis_ablation(
    teacher: &MicroViT,
    pairs: &[SynthPair],
    eval: &LabeledImages,
    distill: &DistillConfig,
) -> Result<Vec<AblationRun>> {
    pairs
        .iter()
        .map(|p| {
            let n = p.coherent.len().min(p.base.len());
            let first: Vec<usize> = (0..n).collect();
            let base_images = p.base.images.gather_leading(&first)?;
            let coherent_images = p.coherent.images.gather_leading(&first)?;
            let cfg = DistillConfig {
                seed: p.seed,
                ..distill.clone()
            };
            let full = dfq(teacher, &coherent_images, eval, &cfg)?;
            let base = dfq(teacher, &base_images, eval, &DistillConfig { gamma: 0.0, ..cfg })?;
            log::info!(
                "ablation seed {}: full {:.4} base {:.4}",
                p.seed,
                full.accuracy(),
                base.accuracy()
            );
            Ok(AblationRun {
                seed: p.seed,
                full,
                base,
            })
        })
        .collect()
}
