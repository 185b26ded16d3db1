//! Quantization-aware distillation of a fake-quantized student from a frozen
//! full-precision teacher, and the head-quantization metric study.
//!
//! Training objective: `KL(f_T || f_S) + gamma * L_HAD`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnsim::{head_wise_distance, rank_correlation, HadTarget, Metric, RankKind};
use crate::data::{crop_flip, LabeledImages};
use crate::error::{LabError, Result};
use crate::optim::OptimizerConfig;
use crate::quant::{BitWidths, Observe, QuantConfig, QuantHook, QuantMode, QuantizedViT, DEFAULT_EMA_MOMENTUM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::cosine_scale;
use crate::vit::{accuracy, argmax_rows, forward, ActSite, AttentionStack, FullPrecision, MicroViT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    #[default]
    CropFlip,
}

/// Which student a run hands back. Picking the best epoch needs labelled
/// held-out data, which a data-free pipeline does not have, so the final
/// student is the default and `BestHeldOut` is an analysis aid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Final,
    BestHeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub gamma: f64,
    pub metric: Metric,
    pub target: HadTarget,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub cosine: bool,
    pub bits: BitWidths,
    pub mode: QuantMode,
    pub ema_momentum: f64,
    pub augment: Augment,
    /// Held-out evaluation every this many epochs (and after the last).
    pub eval_every: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gamma: 1.0,
            metric: Metric::Dssim,
            target: HadTarget::AttentionMaps,
            epochs: 200,
            batch: 16,
            lr: 1e-3,
            momentum: 0.9,
            cosine: false,
            bits: BitWidths { weight: 4, act: 4 },
            mode: QuantMode::Minmax,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            augment: Augment::CropFlip,
            eval_every: 1,
            selection: Selection::Final,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(LabError::config(format!("distill.{k}"), m));
        if !(self.gamma >= 0.0) {
            return bad("gamma", "must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if self.metric == Metric::AbsSsim {
            return bad("metric", "use dssim, mse, l1 or kl");
        }
        Ok(())
    }
}

/// `KL(softmax(teacher) || softmax(student))`, mean over the batch.
pub fn loss_kl(tape: &mut Tape, teacher_logits: Var, student_logits: Var) -> Result<Var> {
    let s = tape.shape(teacher_logits).to_vec();
    if s != tape.shape(student_logits) || s.len() != 2 {
        return Err(LabError::shape("loss_kl", &s, tape.shape(student_logits)));
    }
    let p = tape.softmax(teacher_logits);
    let lp = tape.log_softmax(teacher_logits);
    let lq = tape.log_softmax(student_logits);
    let d = tape.sub(lp, lq)?;
    let w = tape.mul(p, d)?;
    let total = tape.sum(w);
    Ok(tape.scale(total, 1.0 / s[0] as f64))
}

/// Head-wise attention distillation loss, mean over layers and heads.
pub fn loss_had(
    tape: &mut Tape,
    teacher: &AttentionStack,
    student: &AttentionStack,
    metric: Metric,
    target: HadTarget,
) -> Result<Var> {
    head_wise_distance(tape, teacher, student, metric, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub kl: f64,
    pub had: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub epochs: Vec<DistillEpoch>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub selection: Selection,
    pub steps: usize,
}

impl DistillLog {
    /// Held-out accuracy of the student that was returned.
    pub fn accuracy(&self) -> f64 {
        match self.selection {
            Selection::Final => self.final_accuracy,
            Selection::BestHeldOut => self.best_accuracy,
        }
    }
}

pub struct DistillOutcome {
    /// Final student, or the best held-out one under `Selection::BestHeldOut`.
    pub student: QuantizedViT,
    pub log: DistillLog,
}

/// Evaluates a fake-quantized model on labelled images.
pub fn evaluate_quantized(q: &QuantizedViT, data: &LabeledImages, batch: usize) -> Result<f64> {
    let preds = q.predict(&data.images, batch)?;
    Ok(accuracy(&preds, &data.labels))
}

/// Fine-tunes a fake-quantized copy of `teacher` on `images` (labels are not
/// used).
pub fn run_distillation(
    teacher: &MicroViT,
    images: &Tensor,
    eval: &LabeledImages,
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let n = images.shape()[0];
    if n == 0 {
        return Err(LabError::invalid("distillation set is empty"));
    }
    let qcfg = QuantConfig {
        bits: cfg.bits,
        mode: cfg.mode,
        ema_momentum: cfg.ema_momentum,
    };
    let mut student = QuantizedViT::new(teacher.clone(), qcfg)?;
    student.calibrate(images, cfg.batch)?;
    let lsq = cfg.mode == QuantMode::Lsq && cfg.bits.quantizes_acts();
    let mut lsq_state: Vec<(ActSite, Tensor, Tensor)> = if lsq {
        student
            .acts
            .iter()
            .map(|(&site, p)| (site, Tensor::vector(p.scale.clone()), Tensor::vector(p.zero.clone())))
            .collect()
    } else {
        Vec::new()
    };

    let opt_cfg = OptimizerConfig::nesterov(cfg.lr, cfg.momentum);
    let mut opt = opt_cfg.build();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut order: Vec<usize> = (0..n).collect();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Option<QuantizedViT>, usize, f64)> = None;
    let keep_best = cfg.selection == Selection::BestHeldOut;
    let capture = cfg.gamma > 0.0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut kl_sum, mut had_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let raw = images.gather_leading(chunk)?;
            let x = match cfg.augment {
                Augment::CropFlip => crop_flip(&raw, &mut rng),
                Augment::None => raw,
            };
            let mut tape = Tape::new();
            let tb = teacher.bind(&mut tape, false);
            let xt = tape.constant(x);
            let t_out = forward(&mut tape, &tb, xt, &mut FullPrecision, capture)?;

            let sb = student.model.bind(&mut tape, true);
            let lsq_vars: BTreeMap<ActSite, (Var, Var)> = lsq_state
                .iter()
                .map(|(site, s, z)| (*site, (tape.param(s.clone()), tape.param(z.clone()))))
                .collect();
            let observe = if lsq { Observe::Frozen } else { Observe::Update };
            let mut hook = QuantHook::new(&student, observe, lsq.then_some(&lsq_vars));
            let s_out = forward(&mut tape, &sb, xt, &mut hook, capture)?;
            let acts = hook.into_acts();

            let kl = loss_kl(&mut tape, t_out.logits, s_out.logits)?;
            let mut loss = kl;
            let mut had_v = 0.0;
            if let (Some(ta), Some(sa)) = (&t_out.attn, &s_out.attn) {
                let had = loss_had(&mut tape, ta, sa, cfg.metric, cfg.target)?;
                had_v = tape.value(had).item();
                let weighted = tape.scale(had, cfg.gamma);
                loss = tape.add(loss, weighted)?;
            }
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(LabError::Diverged {
                    seed: cfg.seed,
                    step,
                    detail: format!(
                        "distillation loss {lv} (kl {}, had {had_v}) in epoch {epoch}; last epochs: {:?}",
                        tape.value(kl).item(),
                        epochs.iter().rev().take(3).collect::<Vec<&DistillEpoch>>()
                    ),
                });
            }
            loss_sum += lv * chunk.len() as f64;
            kl_sum += tape.value(kl).item() * chunk.len() as f64;
            had_sum += had_v * chunk.len() as f64;
            tape.backward(loss)?;

            let mut grads: Vec<Option<Tensor>> = sb.params.refs().iter().map(|&&v| tape.grad(v)).collect();
            for (site, _, _) in &lsq_state {
                let (s, z) = lsq_vars[site];
                grads.push(tape.grad(s));
                grads.push(tape.grad(z));
            }
            drop(tape);
            student.acts = acts;
            let mut params = student.model.params.refs_mut();
            for (_, s, z) in lsq_state.iter_mut() {
                params.push(s);
                params.push(z);
            }
            let scale = if cfg.cosine { cosine_scale(step, total_steps) } else { 1.0 };
            opt.step(&mut params, &grads, scale);
            for (site, s, z) in lsq_state.iter_mut() {
                for v in s.data_mut() {
                    *v = v.max(1e-8);
                }
                let p = student.acts.get_mut(site).expect("calibrated site");
                p.scale = s.data().to_vec();
                p.zero = z.data().to_vec();
            }
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        let eval_accuracy = if (epoch + 1) % cfg.eval_every == 0 || last {
            Some(evaluate_quantized(&student, eval, 256)?)
        } else {
            None
        };
        let entry = DistillEpoch {
            epoch,
            loss: loss_sum / n as f64,
            kl: kl_sum / n as f64,
            had: had_sum / n as f64,
            eval_accuracy,
        };
        log::info!(
            "distill epoch {epoch}: loss {:.5} kl {:.5} had {:.5} acc {:?}",
            entry.loss,
            entry.kl,
            entry.had,
            entry.eval_accuracy
        );
        if let Some(acc) = eval_accuracy {
            if best.as_ref().is_none_or(|b| acc > b.2) {
                best = Some((keep_best.then(|| student.clone()), epoch, acc));
            }
        }
        epochs.push(entry);
    }
    let (best_student, best_epoch, best_accuracy) = best.expect("last epoch is always evaluated");
    let final_accuracy = epochs.last().and_then(|e| e.eval_accuracy).expect("last epoch is always evaluated");
    Ok(DistillOutcome {
        student: best_student.unwrap_or(student),
        log: DistillLog {
            epochs,
            best_epoch,
            best_accuracy,
            final_accuracy,
            selection: cfg.selection,
            steps: step,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrStudyConfig {
    pub n_configs: usize,
    pub bits: BitWidths,
    pub mode: QuantMode,
    /// Upper bound on quantized heads per layer; `None` allows all heads.
    pub max_heads: Option<usize>,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CorrStudyConfig {
    fn default() -> Self {
        CorrStudyConfig {
            n_configs: 500,
            bits: BitWidths { weight: 4, act: 4 },
            mode: QuantMode::Minmax,
            max_heads: None,
            batch: 128,
            seed: 0,
        }
    }
}

/// One sampled head-quantization setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrSample {
    pub mask: Vec<Vec<bool>>,
    pub accuracy: f64,
    /// Mean head-wise distance to the full-precision model, in
    /// [`Metric::DISTANCES`] order.
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrEntry {
    pub metric: Metric,
    /// `None` when a series is constant and the coefficient is undefined.
    pub spearman_abs: Option<f64>,
    pub kendall_abs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrStudy {
    pub config: CorrStudyConfig,
    pub samples: Vec<CorrSample>,
    pub table: Vec<CorrEntry>,
}

pub const DEGENERATE: &str = "degenerate";

fn fmt_coef(v: Option<f64>) -> String {
    v.map_or_else(|| DEGENERATE.to_string(), |c| format!("{c:.6}"))
}

impl CorrStudy {
    pub fn entry(&self, metric: Metric) -> Option<&CorrEntry> {
        self.table.iter().find(|e| e.metric == metric)
    }

    pub fn table_csv(&self) -> String {
        let mut s = String::from("metric,spearman_abs,kendall_abs\n");
        for e in &self.table {
            let _ = writeln!(s, "{},{},{}", e.metric, fmt_coef(e.spearman_abs), fmt_coef(e.kendall_abs));
        }
        s
    }

    /// Raw scatter: one row per sampled setting.
    pub fn scatter_csv(&self) -> String {
        let mut s = String::from("config,quantized_heads,accuracy");
        for m in Metric::DISTANCES {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        for (i, c) in self.samples.iter().enumerate() {
            let heads: usize = c.mask.iter().map(|l| l.iter().filter(|&&b| b).count()).sum();
            let _ = write!(s, "{i},{heads},{:.6}", c.accuracy);
            for d in &c.distances {
                let _ = write!(s, ",{d:.9}");
            }
            s.push('\n');
        }
        s
    }
}

fn sample_mask(rng: &mut ChaCha8Rng, layers: usize, heads: usize, max: usize) -> Vec<Vec<bool>> {
    (0..layers)
        .map(|_| {
            let k = rng.random_range(0..=max.min(heads));
            let mut m = vec![false; heads];
            for h in sample(rng, heads, k) {
                m[h] = true;
            }
            m
        })
        .collect()
}

/// Randomly quantizes subsets of attention heads and relates each candidate
/// distance (student vs full-precision attention maps) to accuracy.
pub fn head_quant_corr_study(
    teacher: &MicroViT,
    eval: &LabeledImages,
    calib: &Tensor,
    cfg: &CorrStudyConfig,
) -> Result<CorrStudy> {
    if eval.is_empty() {
        return Err(LabError::invalid("evaluation set is empty"));
    }
    if cfg.n_configs < 2 {
        return Err(LabError::config("corr.n_configs", "need at least 2 settings"));
    }
    let (layers, heads) = (teacher.config.layers, teacher.config.heads);
    let batches: Vec<Tensor> = (0..eval.len())
        .step_by(cfg.batch.max(1))
        .map(|s| eval.images.slice_leading(s, cfg.batch.max(1).min(eval.len() - s)))
        .collect::<Result<_>>()?;
    let teacher_probs: Vec<Vec<Tensor>> = batches
        .iter()
        .map(|b| {
            let mut tape = Tape::new();
            let bound = teacher.bind(&mut tape, false);
            let x = tape.constant(b.clone());
            let out = forward(&mut tape, &bound, x, &mut FullPrecision, true)?;
            Ok(out.attn.unwrap().layers.iter().map(|l| tape.value(l.probs).clone()).collect())
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max = cfg.max_heads.unwrap_or(heads);
    let mut samples = Vec::with_capacity(cfg.n_configs);
    for i in 0..cfg.n_configs {
        let mask = sample_mask(&mut rng, layers, heads, max);
        let mut q = QuantizedViT::new(teacher.clone(), QuantConfig::new(cfg.bits, cfg.mode))?
            .with_head_mask(mask.clone())?;
        q.calibrate(calib, cfg.batch)?;
        let mut preds = Vec::with_capacity(eval.len());
        let mut dist = vec![0.0; Metric::DISTANCES.len()];
        for (b, tp) in batches.iter().zip(&teacher_probs) {
            let mut tape = Tape::new();
            let bound = q.model.bind(&mut tape, false);
            let x = tape.constant(b.clone());
            let mut hook = QuantHook::frozen(&q);
            let out = forward(&mut tape, &bound, x, &mut hook, true)?;
            preds.extend(argmax_rows(tape.value(out.logits)));
            let sa = out.attn.unwrap();
            let mut ta = sa.clone();
            for (la, t) in ta.layers.iter_mut().zip(tp) {
                la.probs = tape.constant(t.clone());
            }
            let weight = b.shape()[0] as f64 / eval.len() as f64;
            for (k, &m) in Metric::DISTANCES.iter().enumerate() {
                let v = head_wise_distance(&mut tape, &ta, &sa, m, HadTarget::AttentionMaps)?;
                dist[k] += weight * tape.value(v).item();
            }
        }
        let acc = accuracy(&preds, &eval.labels);
        log::debug!("corr config {i}: accuracy {acc:.4} distances {dist:?}");
        samples.push(CorrSample {
            mask,
            accuracy: acc,
            distances: dist,
        });
    }

    let accs: Vec<f64> = samples.iter().map(|s| s.accuracy).collect();
    let table = Metric::DISTANCES
        .iter()
        .enumerate()
        .map(|(k, &metric)| {
            let d: Vec<f64> = samples.iter().map(|s| s.distances[k]).collect();
            let coef = |kind| match rank_correlation(&d, &accs, kind) {
                Ok(v) => Ok(Some(v.abs())),
                Err(LabError::DegenerateSeries(_)) => Ok(None),
                Err(e) => Err(e),
            };
            Ok(CorrEntry {
                metric,
                spearman_abs: coef(RankKind::Spearman)?,
                kendall_abs: coef(RankKind::Kendall)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CorrStudy {
        config: cfg.clone(),
        samples,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap());
        let s = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let v = loss_kl(&mut tape, t, s).unwrap();
        let p1 = 10f64.exp() / (10f64.exp() + 1.0);
        let p2 = 1.0 - p1;
        let expect = p1 * (p1 / 0.5).ln() + p2 * (p2 / 0.5).ln();
        assert!((tape.value(v).item() - expect).abs() < 1e-9);
        let same = loss_kl(&mut tape, t, t).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig { gamma: -1.0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig { epochs: 0, ..DistillConfig::default() }.validate().is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }

    #[test]
    fn csv_marks_degenerate_coefficients() {
        let study = CorrStudy {
            config: CorrStudyConfig::default(),
            samples: vec![],
            table: vec![CorrEntry {
                metric: Metric::Dssim,
                spearman_abs: None,
                kendall_abs: Some(0.5),
            }],
        };
        assert_eq!(study.table_csv(), "metric,spearman_abs,kendall_abs\ndssim,degenerate,0.500000\n");
    }
}
