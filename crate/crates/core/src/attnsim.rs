//! Structural similarity between attention maps.
//!
//! SSIM here is the global single-window form
//!
//! ```text
//! SSIM(x, y) = (2 mu_x mu_y + c1)(2 s_xy + c2) / ((mu_x^2 + mu_y^2 + c1)(s_x^2 + s_y^2 + c2))
//! ```
//!
//! with population moments, `c1 = (0.01 R)^2`, `c2 = (0.03 R)^2` and `R` the
//! value range over both maps (floored at `1e-8`). The gradient includes the
//! dependence of `c1`, `c2` on `R` through the extreme elements.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{forward, AttentionStack, FullPrecision, MicroViT};

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const RANGE_FLOOR: f64 = 1e-8;

/// One query's scores over the spatial key grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMap {
    side: usize,
    values: Vec<f64>,
}

impl AttnMap {
    pub fn new(side: usize, values: Vec<f64>) -> Result<Self> {
        if side < 2 || values.len() != side * side {
            return Err(LabError::shape("attn_map", &[values.len()], &[side, side]));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { site: "attn_map".into() });
        }
        Ok(AttnMap { side, values })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn same_grid(a: &AttnMap, b: &AttnMap) -> Result<()> {
    if a.side != b.side {
        return Err(LabError::shape("ssim", &[a.side, a.side], &[b.side, b.side]));
    }
    Ok(())
}

pub fn ssim(a: &AttnMap, b: &AttnMap) -> Result<f64> {
    same_grid(a, b)?;
    Ok(ssim_slices(&a.values, &b.values))
}

/// SSIM of two equal-length slices.
pub fn ssim_slices(x: &[f64], y: &[f64]) -> f64 {
    SsimTerms::new(x, y).value()
}

/// SSIM and its gradients with respect to both arguments.
pub fn ssim_with_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let t = SsimTerms::new(x, y);
    let s = t.value();
    let n = x.len() as f64;
    let b1b2 = t.b1 * t.b2;
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    for k in 0..x.len() {
        let (dx, dy) = (x[k] - t.mx, y[k] - t.my);
        gx[k] = (2.0 * t.my / n * t.a2 + t.a1 * 2.0 * dy / n) / b1b2
            - s * (2.0 * t.mx / n / t.b1 + 2.0 * dx / n / t.b2);
        gy[k] = (2.0 * t.mx / n * t.a2 + t.a1 * 2.0 * dx / n) / b1b2
            - s * (2.0 * t.my / n / t.b1 + 2.0 * dy / n / t.b2);
    }
    if t.range > RANGE_FLOOR {
        let dc1 = 2.0 * K1 * K1 * t.range;
        let dc2 = 2.0 * K2 * K2 * t.range;
        let ds_dr = (dc1 * t.a2 + t.a1 * dc2) / b1b2 - s * (dc1 / t.b1 + dc2 / t.b2);
        let slot = |g: &mut Vec<f64>, h: &mut Vec<f64>, idx: (bool, usize), v: f64| {
            if idx.0 {
                g[idx.1] += v;
            } else {
                h[idx.1] += v;
            }
        };
        slot(&mut gx, &mut gy, t.argmax, ds_dr);
        slot(&mut gx, &mut gy, t.argmin, -ds_dr);
    }
    (s, gx, gy)
}

struct SsimTerms {
    mx: f64,
    my: f64,
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    range: f64,
    /// `(in x, index)` of the first maximum / minimum over both slices.
    argmax: (bool, usize),
    argmin: (bool, usize),
}

impl SsimTerms {
    fn new(x: &[f64], y: &[f64]) -> Self {
        debug_assert_eq!(x.len(), y.len());
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (da, db) = (a - mx, b - my);
            vx += da * da;
            vy += db * db;
            cxy += da * db;
        }
        let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
        let mut argmax = (true, 0);
        let mut argmin = (true, 0);
        let (mut hi, mut lo) = (x[0], x[0]);
        for (in_x, s) in [(true, x), (false, y)] {
            for (i, &v) in s.iter().enumerate() {
                if v > hi {
                    hi = v;
                    argmax = (in_x, i);
                }
                if v < lo {
                    lo = v;
                    argmin = (in_x, i);
                }
            }
        }
        let range = (hi - lo).max(RANGE_FLOOR);
        let c1 = (K1 * range).powi(2);
        let c2 = (K2 * range).powi(2);
        SsimTerms {
            mx,
            my,
            a1: 2.0 * mx * my + c1,
            a2: 2.0 * cxy + c2,
            b1: mx * mx + my * my + c1,
            b2: vx + vy + c2,
            range,
            argmax,
            argmin,
        }
    }

    fn value(&self) -> f64 {
        self.a1 * self.a2 / (self.b1 * self.b2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AbsSsim,
    Dssim,
    Mse,
    L1,
    Kl,
}

impl Metric {
    /// The candidate distances compared in the head-quantization study.
    pub const DISTANCES: [Metric; 4] = [Metric::Dssim, Metric::Mse, Metric::L1, Metric::Kl];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AbsSsim => "abs_ssim",
            Metric::Dssim => "dssim",
            Metric::Mse => "mse",
            Metric::L1 => "l1",
            Metric::Kl => "kl",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "abs_ssim" => Ok(Metric::AbsSsim),
            "dssim" => Ok(Metric::Dssim),
            "mse" => Ok(Metric::Mse),
            "l1" => Ok(Metric::L1),
            "kl" => Ok(Metric::Kl),
            other => Err(LabError::invalid(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn head_distance(a: &AttnMap, b: &AttnMap, metric: Metric) -> Result<f64> {
    same_grid(a, b)?;
    Ok(metric_value(metric, &a.values, &b.values))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn metric_value(metric: Metric, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    match metric {
        Metric::AbsSsim => ssim_slices(x, y).abs(),
        Metric::Dssim => -ssim_slices(x, y),
        Metric::Mse => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
        Metric::L1 => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        Metric::Kl => {
            let (lp, lq) = (log_softmax(x), log_softmax(y));
            lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
        }
    }
}

/// Metric value and gradients with respect to `x` and `y`.
pub fn metric_with_grad(metric: Metric, x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    match metric {
        Metric::AbsSsim | Metric::Dssim => {
            let (s, mut gx, mut gy) = ssim_with_grad(x, y);
            let (v, sign) = if metric == Metric::Dssim {
                (-s, -1.0)
            } else {
                (s.abs(), s.signum() * f64::from(u8::from(s != 0.0)))
            };
            gx.iter_mut().chain(gy.iter_mut()).for_each(|g| *g *= sign);
            (v, gx, gy)
        }
        Metric::Mse => {
            let gx: Vec<f64> = x.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let gy = gx.iter().map(|g| -g).collect();
            (metric_value(metric, x, y), gx, gy)
        }
        Metric::L1 => {
            let gx: Vec<f64> = x
                .iter()
                .zip(y)
                .map(|(a, b)| if a > b { 1.0 / n } else if a < b { -1.0 / n } else { 0.0 })
                .collect();
            let gy = gx.iter().map(|g| -g).collect();
            (metric_value(metric, x, y), gx, gy)
        }
        Metric::Kl => {
            let (lp, lq) = (log_softmax(x), log_softmax(y));
            let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
            let q = softmax(y);
            let kl: f64 = p.iter().zip(lp.iter().zip(&lq)).map(|(pi, (a, b))| pi * (a - b)).sum();
            let gx = (0..x.len()).map(|k| p[k] * ((lp[k] - lq[k]) - kl)).collect();
            let gy = (0..y.len()).map(|k| q[k] - p[k]).collect();
            (kl, gx, gy)
        }
    }
}

/// Which attention tensor coherency is measured on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    #[default]
    PreSoftmax,
    PostSoftmax,
}

/// Layout of one layer's `[B*N, N_d, N_d]` attention tensor.
#[derive(Clone, Copy, Debug)]
struct Layout {
    batch: usize,
    heads: usize,
    seq: usize,
    offset: usize,
}

impl Layout {
    fn of(attn: &AttentionStack) -> Result<Self> {
        let l = Layout {
            batch: attn.batch,
            heads: attn.heads,
            seq: attn.seq_len,
            offset: attn.spatial_offset(),
        };
        if l.heads == 0 {
            return Err(LabError::invalid("attention stack has no heads"));
        }
        let p = l.patches();
        let side = (p as f64).sqrt().round() as usize;
        if side * side != p || side < 2 {
            return Err(LabError::invalid(format!("{p} spatial patches do not form a square grid")));
        }
        Ok(l)
    }

    fn patches(&self) -> usize {
        self.seq - self.offset
    }

    /// Start of spatial query `q`'s spatial key scores for head `h` of image `b`.
    fn row(&self, b: usize, h: usize, q: usize) -> usize {
        ((b * self.heads + h) * self.seq + self.offset + q) * self.seq + self.offset
    }
}

/// Per-image, per-query `D_q`: mean `|SSIM|` over all ordered head pairs.
struct CoherencyOp {
    layout: Layout,
}

impl CoherencyOp {
    fn forward(&self, maps: &[f64]) -> Vec<f64> {
        let l = self.layout;
        let p = l.patches();
        let n2 = (l.heads * l.heads) as f64;
        let mut out = vec![0.0; l.batch * p];
        for b in 0..l.batch {
            for q in 0..p {
                // diagonal pairs contribute exactly 1 each
                let mut acc = l.heads as f64;
                for i in 0..l.heads {
                    let ri = l.row(b, i, q);
                    for j in i + 1..l.heads {
                        let rj = l.row(b, j, q);
                        acc += 2.0 * ssim_slices(&maps[ri..ri + p], &maps[rj..rj + p]).abs();
                    }
                }
                out[b * p + q] = acc / n2;
            }
        }
        out
    }
}

impl CustomOp for CoherencyOp {
    fn name(&self) -> &'static str {
        "coherency"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        let l = self.layout;
        let p = l.patches();
        let maps = inputs[0].data();
        let n2 = (l.heads * l.heads) as f64;
        let mut g = vec![0.0; maps.len()];
        for b in 0..l.batch {
            for q in 0..p {
                let go = grad_output[b * p + q];
                if go == 0.0 {
                    continue;
                }
                for i in 0..l.heads {
                    let ri = l.row(b, i, q);
                    for j in i + 1..l.heads {
                        let rj = l.row(b, j, q);
                        let (_, gi, gj) =
                            metric_with_grad(Metric::AbsSsim, &maps[ri..ri + p], &maps[rj..rj + p]);
                        let w = 2.0 * go / n2;
                        for k in 0..p {
                            g[ri + k] += w * gi[k];
                            g[rj + k] += w * gj[k];
                        }
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Coherency measurements of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherencyReport {
    pub layers: usize,
    pub batch: usize,
    pub patches: usize,
    /// `D[l][b][q]`, flattened.
    pub d: Vec<f64>,
    pub l_ihc: f64,
}

impl CoherencyReport {
    pub fn value(&self, layer: usize, image: usize, query: usize) -> f64 {
        self.d[(layer * self.batch + image) * self.patches + query]
    }

    /// `D_{l,q}` averaged over the batch, indexed `[l][q]`.
    pub fn per_layer_query(&self) -> Vec<Vec<f64>> {
        (0..self.layers)
            .map(|l| {
                (0..self.patches)
                    .map(|q| (0..self.batch).map(|b| self.value(l, b, q)).sum::<f64>() / self.batch as f64)
                    .collect()
            })
            .collect()
    }

    /// Mean of `D_{l,q}` over layers and queries, per image.
    pub fn per_image(&self) -> Vec<f64> {
        let terms = (self.layers * self.patches) as f64;
        (0..self.batch)
            .map(|b| {
                let mut acc = 0.0;
                for l in 0..self.layers {
                    for q in 0..self.patches {
                        acc += self.value(l, b, q);
                    }
                }
                acc / terms
            })
            .collect()
    }
}

pub struct Coherency {
    /// `L_IHC` averaged over the batch, on the tape.
    pub loss: Var,
    pub report: CoherencyReport,
}

/// Inter-head coherency of every layer and spatial query, plus the
/// differentiable loss `mean(1 - D_{l,q})`.
pub fn coherency(tape: &mut Tape, attn: &AttentionStack, source: MapSource) -> Result<Coherency> {
    let layout = Layout::of(attn)?;
    if attn.layers.is_empty() {
        return Err(LabError::invalid("attention stack is empty; enable capture"));
    }
    let mut parts = Vec::with_capacity(attn.depth());
    let mut d = Vec::with_capacity(attn.depth() * layout.batch * layout.patches());
    for la in &attn.layers {
        let maps = match source {
            MapSource::PreSoftmax => la.logits,
            MapSource::PostSoftmax => la.probs,
        };
        let op = CoherencyOp { layout };
        let values = op.forward(tape.value(maps).data());
        d.extend_from_slice(&values);
        let out = Tensor::new(vec![layout.batch, layout.patches()], values)?;
        parts.push(tape.custom(&[maps], out, Box::new(op)));
    }
    let all = tape.concat(&parts, 1)?;
    let mean = tape.mean(all);
    let neg = tape.scale(mean, -1.0);
    let loss = tape.add_scalar(neg, 1.0);
    let l_ihc = tape.value(loss).item();
    Ok(Coherency {
        loss,
        report: CoherencyReport {
            layers: attn.depth(),
            batch: layout.batch,
            patches: layout.patches(),
            d,
            l_ihc,
        },
    })
}

/// Per-image coherency scores of `images` under a full-precision model.
pub fn image_coherency(
    model: &MicroViT,
    images: &Tensor,
    source: MapSource,
    batch: usize,
) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    let mut scores = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(images.slice_leading(start, len)?);
        let out = forward(&mut tape, &bound, x, &mut FullPrecision, true)?;
        let attn = out.attn.expect("capture enabled");
        scores.extend(coherency(&mut tape, &attn, source)?.report.per_image());
        start += len;
    }
    Ok(scores)
}

/// What the head-wise distillation distance compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HadTarget {
    /// Post-softmax spatial attention rows, averaged over queries.
    #[default]
    AttentionMaps,
    /// Head outputs `H_h` over spatial tokens, compared as one matrix.
    HeadOutputs,
}

/// Mean over `B*N` heads of one layer's per-head distance. Inputs are
/// `[teacher, student]`.
struct HadOp {
    metric: Metric,
    layout: Layout,
    target: HadTarget,
    width: usize,
}

impl HadOp {
    /// `(start, len)` slices making up head `h` of image `b`.
    fn units(&self, b: usize, h: usize) -> Vec<(usize, usize)> {
        let l = self.layout;
        let p = l.patches();
        match self.target {
            HadTarget::AttentionMaps => (0..p).map(|q| (l.row(b, h, q), p)).collect(),
            HadTarget::HeadOutputs => {
                vec![(((b * l.heads + h) * l.seq + l.offset) * self.width, p * self.width)]
            }
        }
    }

    fn heads(&self) -> f64 {
        (self.layout.batch * self.layout.heads) as f64
    }

    fn forward(&self, t: &[f64], s: &[f64]) -> f64 {
        let mut acc = 0.0;
        for b in 0..self.layout.batch {
            for h in 0..self.layout.heads {
                let units = self.units(b, h);
                let k = units.len() as f64;
                for (o, n) in units {
                    acc += metric_value(self.metric, &t[o..o + n], &s[o..o + n]) / k;
                }
            }
        }
        acc / self.heads()
    }
}

impl CustomOp for HadOp {
    fn name(&self) -> &'static str {
        "head_distance"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (t, s) = (inputs[0].data(), inputs[1].data());
        let mut gt = vec![0.0; t.len()];
        let mut gs = vec![0.0; s.len()];
        let go = grad_output[0] / self.heads();
        for b in 0..self.layout.batch {
            for h in 0..self.layout.heads {
                let units = self.units(b, h);
                let w = go / units.len() as f64;
                for (o, n) in units {
                    let (_, a, c) = metric_with_grad(self.metric, &t[o..o + n], &s[o..o + n]);
                    for k in 0..n {
                        gt[o + k] += w * a[k];
                        gs[o + k] += w * c[k];
                    }
                }
            }
        }
        vec![needs[0].then_some(gt), needs[1].then_some(gs)]
    }
}

/// Head-wise distance between two attention stacks: the mean over layers and
/// heads (and the batch) of `metric(teacher head, student head)`.
pub fn head_wise_distance(
    tape: &mut Tape,
    teacher: &AttentionStack,
    student: &AttentionStack,
    metric: Metric,
    target: HadTarget,
) -> Result<Var> {
    if teacher.depth() != student.depth()
        || teacher.heads != student.heads
        || teacher.batch != student.batch
        || teacher.seq_len != student.seq_len
        || teacher.has_class_token != student.has_class_token
    {
        return Err(LabError::invalid(format!(
            "attention stacks differ: teacher {}x{} heads, student {}x{} heads",
            teacher.depth(),
            teacher.heads,
            student.depth(),
            student.heads
        )));
    }
    if metric == Metric::AbsSsim {
        return Err(LabError::invalid("abs_ssim is a similarity, not a distillation distance"));
    }
    let layout = Layout::of(teacher)?;
    let mut total: Option<Var> = None;
    for (lt, ls) in teacher.layers.iter().zip(&student.layers) {
        let (vt, vs) = match target {
            HadTarget::AttentionMaps => (lt.probs, ls.probs),
            HadTarget::HeadOutputs => (lt.head_out, ls.head_out),
        };
        if tape.shape(vt) != tape.shape(vs) {
            return Err(LabError::shape("head_distance", tape.shape(vt), tape.shape(vs)));
        }
        let width = *tape.shape(vt).last().unwrap();
        let op = HadOp {
            metric,
            layout,
            target,
            width,
        };
        let value = op.forward(tape.value(vt).data(), tape.value(vs).data());
        let v = tape.custom(&[vt, vs], Tensor::scalar(value), Box::new(op));
        total = Some(match total {
            None => v,
            Some(acc) => tape.add(acc, v)?,
        });
    }
    let total = total.ok_or_else(|| LabError::invalid("attention stack is empty; enable capture"))?;
    Ok(tape.scale(total, 1.0 / teacher.depth() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKind {
    Spearman,
    Kendall,
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    let n = x.len();
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                ties_x += 1;
            }
            if dy == 0 {
                ties_y += 1;
            }
            match dx * dy {
                1 => concordant += 1,
                -1 => discordant += 1,
                _ => {}
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = (((pairs - ties_x) * (pairs - ties_y)) as f64).sqrt();
    (concordant - discordant) as f64 / denom
}

pub fn rank_correlation(xs: &[f64], ys: &[f64], kind: RankKind) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(LabError::invalid(format!(
            "rank correlation needs two series of equal length >= 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite { site: "rank_correlation".into() });
    }
    let constant = |s: &[f64]| s.iter().all(|&v| v == s[0]);
    if constant(xs) {
        return Err(LabError::DegenerateSeries("first series is constant"));
    }
    if constant(ys) {
        return Err(LabError::DegenerateSeries("second series is constant"));
    }
    Ok(match kind {
        RankKind::Spearman => pearson(&average_ranks(xs), &average_ranks(ys)),
        RankKind::Kendall => kendall_tau_b(xs, ys),
    })
}
