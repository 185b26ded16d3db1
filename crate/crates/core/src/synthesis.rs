//! Synthetic image generation by gradient descent on pixels.
//!
//! The objective is `L_G = L_IHC + alpha * L_CL + beta * L_TV`; with
//! `coherency = false` the first term is dropped, which gives the baseline
//! "class + smoothness" synthesis.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attnsim::{coherency, MapSource};
use crate::error::{LabError, Result};
use crate::optim::OptimizerConfig;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{forward, FullPrecision, MicroViT};

pub const MAX_RESTARTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples_total: usize,
    pub batch: usize,
    pub steps_per_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Include `L_IHC` in the objective.
    pub coherency: bool,
    pub map_source: MapSource,
    /// Objective is recorded every `log_every` steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples_total: 256,
            batch: 32,
            steps_per_batch: 2000,
            alpha: 1.0,
            beta: 2.5e-5,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            coherency: true,
            map_source: MapSource::PreSoftmax,
            log_every: 50,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(LabError::config(format!("synth.{k}"), m));
        if !(self.alpha >= 0.0) {
            return bad("alpha", "must be non-negative");
        }
        if !(self.beta >= 0.0) {
            return bad("beta", "must be non-negative");
        }
        if self.steps_per_batch == 0 {
            return bad("steps_per_batch", "must be at least 1");
        }
        if self.batch == 0 || self.samples_total == 0 {
            return bad("batch", "batch and samples_total must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be at least 1");
        }
        Ok(())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::Adam {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Mean cross-entropy of `logits` (`[B, C]`) against integer labels.
pub fn loss_cl(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(LabError::shape("loss_cl", &s, &[labels.len()]));
    }
    let classes = s[1];
    let mut onehot = vec![0.0; s[0] * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(LabError::invalid(format!("label {y} outside 0..{classes}")));
        }
        onehot[i * classes + y] = 1.0;
    }
    let ls = tape.log_softmax(logits);
    let mask = tape.constant(Tensor::new(s.clone(), onehot)?);
    let picked = tape.mul(ls, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / s[0] as f64))
}

/// Sum of squared vertical and horizontal neighbour differences, averaged
/// over batch and channels.
pub fn loss_tv(tape: &mut Tape, images: Var) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(LabError::shape("loss_tv", &s, &[0, 0, 2, 2]));
    }
    let (h, w) = (s[2], s[3]);
    let mut total = None;
    for (axis, len) in [(2, h), (3, w)] {
        let a = tape.narrow(images, axis, 0, len - 1)?;
        let b = tape.narrow(images, axis, 1, len - 1)?;
        let d = tape.sub(b, a)?;
        let sq = tape.mul(d, d)?;
        let part = tape.sum(sq);
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / (s[0] * s[1]) as f64))
}

/// Per-image total variation without a tape.
pub fn tv_per_image(images: &Tensor) -> Vec<f64> {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let d = images.data();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for ch in 0..c {
                let base = (i * c + ch) * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let v = d[base + y * w + x];
                        if y + 1 < h {
                            acc += (d[base + (y + 1) * w + x] - v).powi(2);
                        }
                        if x + 1 < w {
                            acc += (d[base + y * w + x + 1] - v).powi(2);
                        }
                    }
                }
            }
            acc / c as f64
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub ihc: f64,
    pub cl: f64,
    pub tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub index: usize,
    /// ChaCha stream used for the successful attempt.
    pub stream: u64,
    pub restarts: usize,
    /// `(step, terms)` every `log_every` steps and at the last step.
    pub history: Vec<(usize, LossTerms)>,
}

/// A synthesized dataset with per-image telemetry.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Mean inter-head coherency `D` per image (pre-softmax or as configured).
    pub coherency: Vec<f64>,
    /// Final per-image loss terms (unweighted).
    pub terms: Vec<LossTerms>,
    pub batches: Vec<BatchLog>,
}

impl SynthSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mean_coherency(&self) -> f64 {
        self.coherency.iter().sum::<f64>() / self.coherency.len().max(1) as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Result<SynthSet> {
        Ok(SynthSet {
            images: self.images.gather_leading(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            coherency: indices.iter().map(|&i| self.coherency[i]).collect(),
            terms: indices.iter().map(|&i| self.terms[i]).collect(),
            batches: Vec::new(),
        })
    }
}

struct StepOutput {
    terms: LossTerms,
    grad: Tensor,
}

fn objective(
    teacher: &MicroViT,
    pixels: &Tensor,
    labels: &[usize],
    cfg: &SynthConfig,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let x = tape.param(pixels.clone());
    let out = forward(&mut tape, &bound, x, &mut FullPrecision, cfg.coherency)?;
    let cl = loss_cl(&mut tape, out.logits, labels)?;
    let tv = loss_tv(&mut tape, x)?;
    let wcl = tape.scale(cl, cfg.alpha);
    let wtv = tape.scale(tv, cfg.beta);
    let mut total = tape.add(wcl, wtv)?;
    let mut ihc = 0.0;
    if let Some(attn) = &out.attn {
        let c = coherency(&mut tape, attn, cfg.map_source)?;
        ihc = c.report.l_ihc;
        total = tape.add(total, c.loss)?;
    }
    let terms = LossTerms {
        total: tape.value(total).item(),
        ihc,
        cl: tape.value(cl).item(),
        tv: tape.value(tv).item(),
    };
    tape.backward(total)?;
    let grad = tape.grad(x).unwrap_or_else(|| Tensor::zeros(pixels.shape()));
    Ok(StepOutput { terms, grad })
}

fn optimize_batch(
    teacher: &MicroViT,
    labels: &[usize],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<(usize, LossTerms)>)> {
    let c = &teacher.config;
    let shape = [labels.len(), c.channels, c.image_side, c.image_side];
    let mut pixels = Tensor::randn(&shape, 1.0, rng);
    let mut opt = cfg.optimizer().build();
    let mut history = Vec::new();
    for step in 0..cfg.steps_per_batch {
        let StepOutput { terms, grad } = objective(teacher, &pixels, labels, cfg)?;
        if !terms.total.is_finite() || !grad.all_finite() {
            return Err(LabError::NonFinite {
                site: format!("synthesis step {step}"),
            });
        }
        if step % cfg.log_every == 0 {
            history.push((step, terms));
        }
        opt.step(&mut [&mut pixels], &[Some(grad)], 1.0);
    }
    Ok((pixels, history))
}

/// Final per-image terms and coherency of a finished batch.
fn measure(
    teacher: &MicroViT,
    pixels: &Tensor,
    labels: &[usize],
    source: MapSource,
) -> Result<(Vec<f64>, Vec<LossTerms>, LossTerms)> {
    let mut tape = Tape::new();
    let bound = teacher.bind(&mut tape, false);
    let x = tape.constant(pixels.clone());
    let out = forward(&mut tape, &bound, x, &mut FullPrecision, true)?;
    let attn = out.attn.expect("capture enabled");
    let coh = coherency(&mut tape, &attn, source)?.report.per_image();
    let logits = tape.value(out.logits).clone();
    let tv = tv_per_image(pixels);
    let classes = *logits.shape().last().unwrap();
    let mut terms = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let cl = lse - row[y];
        terms.push(LossTerms {
            total: f64::NAN,
            ihc: 1.0 - coh[i],
            cl,
            tv: tv[i],
        });
    }
    let mean = |f: fn(&LossTerms) -> f64| terms.iter().map(f).sum::<f64>() / terms.len() as f64;
    let summary = LossTerms {
        total: f64::NAN,
        ihc: mean(|t| t.ihc),
        cl: mean(|t| t.cl),
        tv: mean(|t| t.tv),
    };
    Ok((coh, terms, summary))
}

/// Synthesizes `cfg.samples_total` images from a frozen teacher. Labels are
/// assigned round-robin over the classes.
pub fn synthesize(teacher: &MicroViT, cfg: &SynthConfig) -> Result<SynthSet> {
    cfg.validate()?;
    let classes = teacher.config.classes;
    let mut images = Vec::new();
    let mut labels = Vec::with_capacity(cfg.samples_total);
    let mut coh = Vec::with_capacity(cfg.samples_total);
    let mut terms = Vec::with_capacity(cfg.samples_total);
    let mut batches = Vec::new();
    let mut start = 0;
    while start < cfg.samples_total {
        let len = cfg.batch.min(cfg.samples_total - start);
        let index = batches.len();
        let batch_labels: Vec<usize> = (start..start + len).map(|i| i % classes).collect();
        let mut restarts = 0;
        let (pixels, mut history, stream) = loop {
            let stream = (index * (MAX_RESTARTS + 1) + restarts) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            match optimize_batch(teacher, &batch_labels, cfg, &mut rng) {
                Ok((p, h)) => break (p, h, stream),
                Err(LabError::NonFinite { site }) => {
                    restarts += 1;
                    log::warn!("batch {index}: non-finite objective at {site}; restart {restarts}");
                    if restarts >= MAX_RESTARTS {
                        return Err(LabError::Diverged {
                            seed: cfg.seed,
                            step: index,
                            detail: format!("synthesis batch {index} failed {restarts} times"),
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        };
        let (c, t, mut summary) = measure(teacher, &pixels, &batch_labels, cfg.map_source)?;
        let ihc_term = if cfg.coherency { summary.ihc } else { 0.0 };
        summary.total = ihc_term + cfg.alpha * summary.cl + cfg.beta * summary.tv;
        history.push((cfg.steps_per_batch, summary));
        log::info!(
            "synth batch {index}: L_G {:.4} (ihc {:.4}, cl {:.4}, tv {:.2})",
            summary.total,
            summary.ihc,
            summary.cl,
            summary.tv
        );
        images.push(pixels);
        labels.extend(batch_labels);
        coh.extend(c);
        terms.extend(t);
        batches.push(BatchLog {
            index,
            stream,
            restarts,
            history,
        });
        start += len;
    }
    Ok(SynthSet {
        images: Tensor::stack_leading(&images)?,
        labels,
        coherency: coh,
        terms,
        batches,
    })
}

/// Index sets of the most coherent, least coherent and a random subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub random: Vec<usize>,
}

/// Sorts by score (ties by index) and takes `fraction` of the set from each
/// end, plus a seeded random subset of the same size.
pub fn stratify_by_coherency(scores: &[f64], fraction: f64, seed: u64) -> Result<Strata> {
    let n = scores.len();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 || k > n {
        return Err(LabError::invalid(format!(
            "fraction {fraction} of {n} images gives an empty or oversized subset"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LabError::NonFinite { site: "coherency scores".into() });
    }
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random: Vec<usize> = sample(&mut rng, n, k).into_vec();
    random.sort_unstable();
    Ok(Strata {
        high: desc[..k].to_vec(),
        low: asc[..k].to_vec(),
        random,
    })
}

/// Class-balanced stratification: each label group is stratified on its own
/// and the per-class picks are concatenated in label order. Keeps the high
/// and low subsets from being dominated by whichever class happens to be
/// most coherent.
pub fn stratify_within_classes(scores: &[f64], labels: &[usize], fraction: f64, seed: u64) -> Result<Strata> {
    if scores.len() != labels.len() {
        return Err(LabError::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut out = Strata {
        high: Vec::new(),
        low: Vec::new(),
        random: Vec::new(),
    };
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let sub: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let s = stratify_by_coherency(&sub, fraction, seed.wrapping_add(c as u64))?;
        out.high.extend(s.high.iter().map(|&j| idx[j]));
        out.low.extend(s.low.iter().map(|&j| idx[j]));
        out.random.extend(s.random.iter().map(|&j| idx[j]));
    }
    if out.high.is_empty() {
        return Err(LabError::invalid("no images to stratify"));
    }
    Ok(out)
}
