//! Uniform fake quantization with min-max calibration and LSQ.
//!
//! Integer mapping: `q = clamp(round(x*s - z), -2^(k-1), 2^(k-1) - 1)`,
//! dequantized as `(q + z) / s`. Rounding is half away from zero.
//!
//! Weights use per-output-channel symmetric scales (`z = 0`), where the
//! output channel is the last axis of an `[in, out]` matrix. Activations use
//! one asymmetric `(s, z)` pair per tensor.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tape::{round_half_away, CustomOp, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{
    forward, plain_linear, predict_with, ActSite, LinearHook, LinearSite, MicroViT, ViTParams,
};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Minmax,
    Lsq,
}

impl FromStr for QuantMode {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "minmax" | "min-max" | "min_max" => Ok(QuantMode::Minmax),
            "lsq" => Ok(QuantMode::Lsq),
            other => Err(LabError::invalid(format!("unknown quantization mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Weight,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub mode: QuantMode,
    pub target: Target,
}

impl QuantSpec {
    pub fn weight(bits: u8) -> Self {
        QuantSpec {
            bits,
            scheme: Scheme::Symmetric,
            granularity: Granularity::PerChannel,
            mode: QuantMode::Minmax,
            target: Target::Weight,
        }
    }

    pub fn activation(bits: u8, mode: QuantMode) -> Self {
        QuantSpec {
            bits,
            scheme: Scheme::Asymmetric,
            granularity: Granularity::PerTensor,
            mode,
            target: Target::Activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(LabError::invalid(format!("bit width {} outside 2..=8", self.bits)));
        }
        let ok = match self.target {
            Target::Weight => {
                self.scheme == Scheme::Symmetric && self.granularity == Granularity::PerChannel
            }
            Target::Activation => {
                self.scheme == Scheme::Asymmetric && self.granularity == Granularity::PerTensor
            }
        };
        if !ok {
            return Err(LabError::invalid(
                "weights are per-channel symmetric, activations per-tensor asymmetric",
            ));
        }
        Ok(())
    }

    pub fn qmin(&self) -> f64 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> f64 {
        qmax(self.bits)
    }
}

pub fn qmin(bits: u8) -> f64 {
    -(2f64.powi(bits as i32 - 1))
}

pub fn qmax(bits: u8) -> f64 {
    2f64.powi(bits as i32 - 1) - 1.0
}

/// Scale and zero point, one entry per channel (a single entry per tensor).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero: Vec<f64>,
    pub ema_min: Option<f64>,
    pub ema_max: Option<f64>,
    pub trainable: bool,
}

impl QuantParams {
    pub fn per_tensor(scale: f64, zero: f64) -> Self {
        QuantParams {
            scale: vec![scale],
            zero: vec![zero],
            ema_min: None,
            ema_max: None,
            trainable: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// Scalar reference of quantize-dequantize.
pub fn fake_quant_scalar(x: f64, s: f64, z: f64, bits: u8) -> f64 {
    let q = round_half_away(x * s - z).clamp(qmin(bits), qmax(bits));
    (q + z) / s
}

fn channel_count(x: &Tensor, p: &QuantParams) -> Result<usize> {
    let c = p.channels();
    if p.zero.len() != c || c == 0 {
        return Err(LabError::invalid("scale and zero point lengths differ"));
    }
    if c > 1 && *x.shape().last().unwrap() != c {
        return Err(LabError::shape("fake_quant", x.shape(), &[c]));
    }
    if p.scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(LabError::invalid("quantization scale must be positive and finite"));
    }
    Ok(c)
}

/// Quantize-dequantize `x` without recording anything.
pub fn fake_quant(x: &Tensor, p: &QuantParams, spec: &QuantSpec, site: &str) -> Result<Tensor> {
    spec.validate()?;
    if !x.all_finite() {
        return Err(LabError::NonFinite { site: site.to_string() });
    }
    let c = channel_count(x, p)?;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| fake_quant_scalar(v, p.scale[i % c], p.zero[i % c], spec.bits))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Gradient multiplier applied to LSQ scale and zero-point gradients.
pub fn lsq_grad_scale(numel: usize, bits: u8) -> f64 {
    1.0 / ((numel.max(1) as f64) * qmax(bits)).sqrt()
}

/// Min-max fit with the scheme and granularity of `spec`. A degenerate
/// range falls back to `s = 1` and logs a warning.
pub fn minmax_fit(x: &Tensor, spec: &QuantSpec) -> Result<QuantParams> {
    spec.validate()?;
    if !x.all_finite() {
        return Err(LabError::NonFinite { site: "minmax_fit".into() });
    }
    let channels = match spec.granularity {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => *x.shape().last().unwrap(),
    };
    let mut lo = vec![f64::INFINITY; channels];
    let mut hi = vec![f64::NEG_INFINITY; channels];
    for (i, &v) in x.data().iter().enumerate() {
        let c = i % channels;
        lo[c] = lo[c].min(v);
        hi[c] = hi[c].max(v);
    }
    let mut scale = Vec::with_capacity(channels);
    let mut zero = Vec::with_capacity(channels);
    for c in 0..channels {
        let (s, z) = match spec.scheme {
            Scheme::Asymmetric => asymmetric_params(lo[c], hi[c], spec.bits),
            Scheme::Symmetric => symmetric_params(lo[c].abs().max(hi[c].abs()), spec.bits),
        };
        scale.push(s);
        zero.push(z);
    }
    Ok(QuantParams {
        scale,
        zero,
        ema_min: None,
        ema_max: None,
        trainable: spec.mode == QuantMode::Lsq,
    })
}

/// `s = (2^k - 1) / (max - min)`, `z = s*min + 2^(k-1)`.
pub fn asymmetric_params(lo: f64, hi: f64, bits: u8) -> (f64, f64) {
    let levels = 2f64.powi(bits as i32) - 1.0;
    let s = if hi > lo {
        levels / (hi - lo)
    } else {
        log::warn!("degenerate quantization range [{lo}, {hi}]; using unit scale");
        1.0
    };
    (s, s * lo + 2f64.powi(bits as i32 - 1))
}

/// `s = (2^(k-1) - 1) / max|x|`, `z = 0`.
pub fn symmetric_params(absmax: f64, bits: u8) -> (f64, f64) {
    if absmax > 0.0 {
        (qmax(bits) / absmax, 0.0)
    } else {
        log::warn!("all-zero weight channel; using unit scale");
        (1.0, 0.0)
    }
}

/// Folds the batch range into the running range and refreshes `(s, z)`.
pub fn ema_update(p: &QuantParams, batch: &Tensor, momentum: f64, bits: u8) -> Result<QuantParams> {
    if !batch.all_finite() {
        return Err(LabError::NonFinite { site: "ema_update".into() });
    }
    let (bmin, bmax) = (batch.min(), batch.max());
    let (lo, hi) = match (p.ema_min, p.ema_max) {
        (Some(lo), Some(hi)) => (
            momentum * lo + (1.0 - momentum) * bmin,
            momentum * hi + (1.0 - momentum) * bmax,
        ),
        _ => (bmin, bmax),
    };
    let (s, z) = asymmetric_params(lo, hi, bits);
    Ok(QuantParams {
        scale: vec![s],
        zero: vec![z],
        ema_min: Some(lo),
        ema_max: Some(hi),
        trainable: p.trainable,
    })
}

/// Fused quantize-dequantize node with inputs `[x, s, z]`.
///
/// Straight-through inside the clamp range. Scale and zero-point gradients
/// follow from differentiating `(round(x*s - z) + z)/s` with the rounding
/// treated as identity, then get multiplied by `grad_scale`.
struct FakeQuantOp {
    bits: u8,
    grad_scale: f64,
}

impl CustomOp for FakeQuantOp {
    fn name(&self) -> &'static str {
        "fake_quant"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, s, z) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let c = s.len();
        let (lo, hi) = (qmin(self.bits), qmax(self.bits));
        let mut gx = vec![0.0; x.len()];
        let mut gs = vec![0.0; c];
        let mut gz = vec![0.0; c];
        for (i, (&xi, &g)) in x.iter().zip(grad_output).enumerate() {
            let ch = i % c;
            let (si, zi) = (s[ch], z[ch]);
            let v = xi * si - zi;
            if (lo..=hi).contains(&v) {
                gx[i] = g;
                gs[ch] += g * (v - round_half_away(v)) / (si * si);
            } else {
                let q = if v < lo { lo } else { hi };
                gs[ch] -= g * (q + zi) / (si * si);
                gz[ch] += g / si;
            }
        }
        for v in gs.iter_mut().chain(gz.iter_mut()) {
            *v *= self.grad_scale;
        }
        vec![
            needs[0].then_some(gx),
            needs[1].then_some(gs),
            needs[2].then_some(gz),
        ]
    }
}

/// Records fake quantization of `x` with per-channel (last axis) or
/// per-tensor `s`, `z` vectors on the tape.
pub fn fake_quant_var(
    tape: &mut Tape,
    x: Var,
    s: Var,
    z: Var,
    bits: u8,
    grad_scale: f64,
    site: &str,
) -> Result<Var> {
    let xv = tape.value(x);
    if !xv.all_finite() {
        return Err(LabError::NonFinite { site: site.to_string() });
    }
    let p = QuantParams {
        scale: tape.value(s).data().to_vec(),
        zero: tape.value(z).data().to_vec(),
        ema_min: None,
        ema_max: None,
        trainable: false,
    };
    let c = channel_count(xv, &p)?;
    let data = xv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| fake_quant_scalar(v, p.scale[i % c], p.zero[i % c], bits))
        .collect();
    let out = Tensor::from_parts(xv.shape().to_vec(), data);
    Ok(tape.custom(&[x, s, z], out, Box::new(FakeQuantOp { bits, grad_scale })))
}

/// Weight/activation bit widths; 32 means full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BitWidths {
    pub weight: u8,
    pub act: u8,
}

impl BitWidths {
    pub const FULL: BitWidths = BitWidths { weight: 32, act: 32 };

    pub fn new(weight: u8, act: u8) -> Result<Self> {
        for b in [weight, act] {
            if !((2..=8).contains(&b) || b == 32) {
                return Err(LabError::invalid(format!("bit width {b} must be in 2..=8 or 32")));
            }
        }
        Ok(BitWidths { weight, act })
    }

    pub fn quantizes_weights(&self) -> bool {
        self.weight != 32
    }

    pub fn quantizes_acts(&self) -> bool {
        self.act != 32
    }
}

impl fmt::Display for BitWidths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}A{}", self.weight, self.act)
    }
}

impl FromStr for BitWidths {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::invalid(format!("quantization setting {s:?} is not of the form W<k>A<k>"));
        let rest = s.trim().strip_prefix(['W', 'w']).ok_or_else(bad)?;
        let (w, a) = rest.split_once(['A', 'a']).ok_or_else(bad)?;
        let w: u8 = w.parse().map_err(|_| bad())?;
        let a: u8 = a.parse().map_err(|_| bad())?;
        BitWidths::new(w, a)
    }
}

impl TryFrom<String> for BitWidths {
    type Error = LabError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BitWidths> for String {
    fn from(b: BitWidths) -> String {
        b.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: BitWidths,
    /// Applies to activations; weights always refit min-max per step.
    pub mode: QuantMode,
    pub ema_momentum: f64,
}

impl QuantConfig {
    pub fn new(bits: BitWidths, mode: QuantMode) -> Self {
        QuantConfig {
            bits,
            mode,
            ema_momentum: DEFAULT_EMA_MOMENTUM,
        }
    }
}

/// A model plus activation quantizer state. Weight quantizers are refit
/// from the current weights on every forward, so only activation state is
/// stored.
#[derive(Clone, Debug)]
pub struct QuantizedViT {
    pub model: MicroViT,
    pub config: QuantConfig,
    pub acts: BTreeMap<ActSite, QuantParams>,
    /// When set, only the attention heads flagged per layer are quantized
    /// (query/key/value columns and the matching output-projection rows);
    /// every other linear layer stays full precision.
    pub head_mask: Option<Vec<Vec<bool>>>,
}

impl QuantizedViT {
    pub fn new(model: MicroViT, config: QuantConfig) -> Result<Self> {
        BitWidths::new(config.bits.weight, config.bits.act)?;
        if !(0.0..=1.0).contains(&config.ema_momentum) {
            return Err(LabError::config("quant.ema_momentum", "must lie in [0, 1]"));
        }
        Ok(QuantizedViT {
            model,
            config,
            acts: BTreeMap::new(),
            head_mask: None,
        })
    }

    pub fn with_head_mask(mut self, mask: Vec<Vec<bool>>) -> Result<Self> {
        let cfg = &self.model.config;
        if mask.len() != cfg.layers || mask.iter().any(|m| m.len() != cfg.heads) {
            return Err(LabError::invalid("head mask must be layers x heads"));
        }
        self.head_mask = Some(mask);
        Ok(self)
    }

    pub fn act_spec(&self) -> QuantSpec {
        QuantSpec::activation(self.config.bits.act, self.config.mode)
    }

    pub fn weight_spec(&self) -> QuantSpec {
        QuantSpec::weight(self.config.bits.weight)
    }

    /// Runs observation forwards over `images` in chunks so every activation
    /// site has a calibrated range. For LSQ the first chunk alone sets the
    /// initial `(s, z)`.
    pub fn calibrate(&mut self, images: &Tensor, batch: usize) -> Result<()> {
        if !self.config.bits.quantizes_acts() {
            return Ok(());
        }
        let n = images.shape()[0];
        let chunks = if self.config.mode == QuantMode::Lsq { 1 } else { usize::MAX };
        let mut start = 0;
        let mut done = 0;
        while start < n && done < chunks {
            let len = batch.max(1).min(n - start);
            let chunk = images.slice_leading(start, len)?;
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, false);
            let x = tape.constant(chunk);
            let mut hook = QuantHook::new(self, Observe::Update, None);
            forward(&mut tape, &bound, x, &mut hook, false)?;
            let acts = hook.into_acts();
            self.acts = acts;
            start += len;
            done += 1;
        }
        Ok(())
    }

    /// Inference logits with frozen quantizers.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let mut hook = QuantHook::frozen(self);
        let out = forward(&mut tape, &bound, x, &mut hook, false)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
        predict_with(images, batch, |chunk| self.logits(chunk))
    }

    /// Model with every linear weight replaced by its quantize-dequantize
    /// image (what an integer deployment would hold).
    pub fn quantized_weights(&self) -> Result<MicroViT> {
        let mut m = self.model.clone();
        if !self.config.bits.quantizes_weights() {
            return Ok(m);
        }
        let spec = self.weight_spec();
        let sites = LinearSite::all(m.config.layers);
        let names = ViTParams::<Tensor>::names(m.config.layers);
        let quantized: Vec<(String, Tensor)> = sites
            .iter()
            .map(|&site| {
                let (w, _) = self.model.params.linear(site);
                let p = minmax_fit(w, &spec)?;
                Ok((weight_name(site), fake_quant(w, &p, &spec, &site.name())?))
            })
            .collect::<Result<_>>()?;
        for (name, t) in names.iter().zip(m.params.refs_mut()) {
            if let Some((_, q)) = quantized.iter().find(|(n, _)| n == name) {
                *t = q.clone();
            }
        }
        Ok(m)
    }
}

fn weight_name(site: LinearSite) -> String {
    match site {
        LinearSite::PatchEmbed => "patch_w".into(),
        LinearSite::Head => "head_w".into(),
        other => other.name(),
    }
}

/// Whether activation ranges are updated during a forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observe {
    Update,
    Frozen,
}

/// [`LinearHook`] applying fake quantization to weights and activations.
pub struct QuantHook<'a> {
    cfg: &'a QuantConfig,
    head_mask: Option<&'a [Vec<bool>]>,
    acts: BTreeMap<ActSite, QuantParams>,
    observe: Observe,
    lsq: Option<&'a BTreeMap<ActSite, (Var, Var)>>,
    heads: usize,
    cache: Vec<(ActSite, Var, Var)>,
}

impl<'a> QuantHook<'a> {
    /// `lsq` supplies tape handles for trainable activation `(s, z)`.
    pub fn new(
        q: &'a QuantizedViT,
        observe: Observe,
        lsq: Option<&'a BTreeMap<ActSite, (Var, Var)>>,
    ) -> Self {
        QuantHook {
            cfg: &q.config,
            head_mask: q.head_mask.as_deref(),
            acts: q.acts.clone(),
            observe,
            lsq,
            heads: q.model.config.heads,
            cache: Vec::new(),
        }
    }

    pub fn frozen(q: &'a QuantizedViT) -> Self {
        Self::new(q, Observe::Frozen, None)
    }

    /// Activation state after this forward (updated when observing).
    pub fn into_acts(self) -> BTreeMap<ActSite, QuantParams> {
        self.acts
    }

    fn quantize_act(&mut self, tape: &mut Tape, site: ActSite, x: Var) -> Result<Var> {
        if let Some(&(_, _, q)) = self.cache.iter().find(|(s, v, _)| *s == site && *v == x) {
            return Ok(q);
        }
        let bits = self.cfg.bits.act;
        let lsq_vars = self.lsq.and_then(|m| m.get(&site).copied());
        let q = if let Some((s, z)) = lsq_vars {
            let gs = lsq_grad_scale(tape.value(x).numel(), bits);
            fake_quant_var(tape, x, s, z, bits, gs, &site.name())?
        } else {
            let needs_fit = self.observe == Observe::Update
                && !(self.cfg.mode == QuantMode::Lsq && self.acts.contains_key(&site));
            if needs_fit {
                let prev = self.acts.get(&site).cloned().unwrap_or(QuantParams {
                    scale: vec![1.0],
                    zero: vec![0.0],
                    ema_min: None,
                    ema_max: None,
                    trainable: self.cfg.mode == QuantMode::Lsq,
                });
                let next = ema_update(&prev, tape.value(x), self.cfg.ema_momentum, bits)
                    .map_err(|_| LabError::NonFinite { site: site.name() })?;
                self.acts.insert(site, next);
            }
            let p = self.acts.get(&site).ok_or_else(|| {
                LabError::invalid(format!("activation site {} is not calibrated", site.name()))
            })?;
            let s = tape.constant(Tensor::vector(p.scale.clone()));
            let z = tape.constant(Tensor::vector(p.zero.clone()));
            fake_quant_var(tape, x, s, z, bits, 1.0, &site.name())?
        };
        self.cache.push((site, x, q));
        Ok(q)
    }

    fn quantize_weight(&self, tape: &mut Tape, site: LinearSite, w: Var) -> Result<Var> {
        let spec = QuantSpec::weight(self.cfg.bits.weight);
        let p = minmax_fit(tape.value(w), &spec)?;
        let s = tape.constant(Tensor::vector(p.scale));
        let z = tape.constant(Tensor::vector(p.zero));
        fake_quant_var(tape, w, s, z, spec.bits, 1.0, &site.name())
    }

    fn quantized_inputs(
        &mut self,
        tape: &mut Tape,
        site: LinearSite,
        x: Var,
        w: Var,
    ) -> Result<(Var, Var)> {
        let xq = if self.cfg.bits.quantizes_acts() {
            self.quantize_act(tape, site.act_site(), x)?
        } else {
            x
        };
        let wq = if self.cfg.bits.quantizes_weights() {
            self.quantize_weight(tape, site, w)?
        } else {
            w
        };
        Ok((xq, wq))
    }

    /// Per-feature 0/1 mask over the `d` attention columns of `layer`.
    fn column_mask(&self, layer: usize, d: usize) -> Option<Vec<f64>> {
        let mask = &self.head_mask?[layer];
        if !mask.iter().any(|&m| m) {
            return None;
        }
        let dh = d / self.heads;
        Some((0..d).map(|j| if mask[j / dh] { 1.0 } else { 0.0 }).collect())
    }

    /// `a + (b - a) * m`, with `m` broadcast over trailing dims of `a`.
    fn blend(tape: &mut Tape, a: Var, b: Var, mask: Tensor) -> Result<Var> {
        let diff = tape.sub(b, a)?;
        let m = tape.constant(mask);
        let masked = tape.mul_broadcast(diff, m)?;
        tape.add(a, masked)
    }
}

impl LinearHook for QuantHook<'_> {
    fn linear(&mut self, tape: &mut Tape, site: LinearSite, x: Var, w: Var, b: Var) -> Result<Var> {
        if self.head_mask.is_none() {
            let (xq, wq) = self.quantized_inputs(tape, site, x, w)?;
            return plain_linear(tape, xq, wq, b);
        }
        let d = tape.shape(w)[0];
        match site {
            LinearSite::Query(l) | LinearSite::Key(l) | LinearSite::Value(l) => {
                let Some(mask) = self.column_mask(l, d) else {
                    return plain_linear(tape, x, w, b);
                };
                let full = plain_linear(tape, x, w, b)?;
                let (xq, wq) = self.quantized_inputs(tape, site, x, w)?;
                let quant = plain_linear(tape, xq, wq, b)?;
                Self::blend(tape, full, quant, Tensor::vector(mask))
            }
            LinearSite::Out(l) => {
                let Some(mask) = self.column_mask(l, d) else {
                    return plain_linear(tape, x, w, b);
                };
                let (xq, wq) = self.quantized_inputs(tape, site, x, w)?;
                let x_mix = Self::blend(tape, x, xq, Tensor::vector(mask.clone()))?;
                let out = tape.shape(w)[1];
                let rows: Vec<f64> = mask.iter().flat_map(|&m| std::iter::repeat_n(m, out)).collect();
                let rows = Tensor::new(vec![d, out], rows)?;
                let w_mix = Self::blend(tape, w, wq, rows)?;
                plain_linear(tape, x_mix, w_mix, b)
            }
            _ => plain_linear(tape, x, w, b),
        }
    }
}
