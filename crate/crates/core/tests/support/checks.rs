// Independent oracles shared by the core integration tests and the
// acceptance runner. Nothing here calls a backward rule or a quantizer
// formula of the library to produce an expected value.

#![allow(dead_code)]

use dfqlab::attnsim::{coherency, head_wise_distance, ssim_slices, HadTarget, MapSource, Metric};
use dfqlab::distill::loss_kl;
use dfqlab::gradcheck::{eval_scalar, max_relative_error, relative_error};
use dfqlab::quant::{fake_quant, minmax_fit, QuantParams, QuantSpec};
use dfqlab::synthesis::{loss_cl, loss_tv};
use dfqlab::vit::{forward, AttentionStack, FullPrecision, LayerAttention, MicroViT, ViTConfig};
use dfqlab::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const INSTANCES: usize = 20;

/// Worst relative gradient error of one check over its instances.
#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub worst: f64,
    pub limit: f64,
    pub instances: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.limit
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> dfqlab::Result<Var>>;

fn run(name: &str, limit: f64, seed: u64, shapes: &[&[usize]], std: f64, build: Build) -> GradCheck {
    run_with(name, limit, seed, shapes, std, FD_STEP, None, build)
}

/// `probes`: when set, only that many randomly chosen coordinates of the
/// first input are differenced per instance.
#[allow(clippy::too_many_arguments)]
fn run_with(
    name: &str,
    limit: f64,
    seed: u64,
    shapes: &[&[usize]],
    std: f64,
    h: f64,
    probes: Option<usize>,
    build: Build,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, std, &mut rng)).collect();
        let err = match probes {
            None => max_relative_error(&inputs, h, &build).expect("finite-difference probe"),
            Some(k) => sampled_error(&inputs, h, k, &mut rng, &build),
        };
        worst = worst.max(err);
    }
    GradCheck {
        name: name.into(),
        worst,
        limit,
        instances: INSTANCES,
    }
}

fn sampled_error(inputs: &[Tensor], h: f64, k: usize, rng: &mut ChaCha8Rng, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    let grad = tape.grad(vars[0]).expect("input gradient");
    let coords = rand::seq::index::sample(rng, inputs[0].numel(), k.min(inputs[0].numel()));
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let mut probe = inputs.to_vec();
    for j in coords {
        let x0 = inputs[0].data()[j];
        probe[0].data_mut()[j] = x0 + h;
        let up = eval_scalar(&probe, build).expect("forward");
        probe[0].data_mut()[j] = x0 - h;
        let down = eval_scalar(&probe, build).expect("forward");
        probe[0].data_mut()[j] = x0;
        analytic.push(grad.data()[j]);
        numeric.push((up - down) / (2.0 * h));
    }
    relative_error(&analytic, &numeric)
}

fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> dfqlab::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(t.shape(y), 1.0, &mut rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Every primitive of the tape, each behind a scalar reduction.
pub fn primitive_gradients() -> Vec<GradCheck> {
    let lim = 1e-4;
    vec![
        run("matmul", lim, 1, &[&[3, 4], &[4, 2]], 1.0, Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 0)
        })),
        run("matmul_batched", lim, 2, &[&[2, 3, 4], &[2, 4, 3]], 1.0, Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.mean(y2))
        })),
        run("matmul_shared_rhs", lim, 3, &[&[2, 3, 4], &[4, 2]], 1.0, Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 1)
        })),
        run("matmul_nt", lim, 4, &[&[2, 3, 4], &[2, 5, 4]], 1.0, Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        })),
        run("add_sub_mul", lim, 5, &[&[3, 4], &[3, 4], &[3, 4]], 1.0, Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[2])?;
            let m = t.mul(s, v[0])?;
            weighted_sum(t, m, 2)
        })),
        run("broadcast", lim, 6, &[&[3, 4], &[4], &[4]], 1.0, Box::new(|t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            let z = t.mul_broadcast(y, v[2])?;
            let z2 = t.mul(z, z)?;
            Ok(t.sum(z2))
        })),
        run("scale_add_scalar", lim, 7, &[&[5]], 1.0, Box::new(|t, v| {
            let s = t.scale(v[0], -0.7);
            let a = t.add_scalar(s, 0.3);
            let a2 = t.mul(a, a)?;
            Ok(t.sum(a2))
        })),
        run("exp_log", lim, 8, &[&[6]], 1.0, Box::new(|t, v| {
            let e = t.exp(v[0]);
            let e1 = t.add_scalar(e, 1.0);
            let l = t.log(e1);
            weighted_sum(t, l, 3)
        })),
        run("gelu", lim, 9, &[&[8]], 1.5, Box::new(|t, v| {
            let g = t.gelu(v[0]);
            weighted_sum(t, g, 4)
        })),
        run("clamp_interior", lim, 10, &[&[6]], 1.0, Box::new(|t, v| {
            let c = t.clamp(v[0], -50.0, 50.0);
            let c2 = t.mul(c, c)?;
            Ok(t.sum(c2))
        })),
        run("sum_mean", lim, 11, &[&[2, 3]], 1.0, Box::new(|t, v| {
            let e = t.exp(v[0]);
            let s = t.sum(e);
            let m = t.mean(v[0]);
            let p = t.mul(s, m)?;
            Ok(p)
        })),
        run("reshape_permute_transpose", lim, 12, &[&[2, 3, 4]], 1.0, Box::new(|t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 6])?;
            let tr = t.transpose(r)?;
            let sq = t.mul(tr, tr)?;
            weighted_sum(t, sq, 5)
        })),
        run("narrow_concat", lim, 13, &[&[2, 3, 4], &[2, 1, 4]], 1.0, Box::new(|t, v| {
            let n = t.narrow(v[0], 1, 1, 2)?;
            let c = t.concat(&[v[1], n], 1)?;
            let c2 = t.mul(c, c)?;
            weighted_sum(t, c2, 6)
        })),
        run("repeat_leading", lim, 14, &[&[1, 3], &[4, 1, 3]], 1.0, Box::new(|t, v| {
            let r = t.repeat_leading(v[0], 4)?;
            let d = t.sub(r, v[1])?;
            let d2 = t.mul(d, d)?;
            Ok(t.mean(d2))
        })),
        run("softmax", lim, 15, &[&[3, 5]], 1.5, Box::new(|t, v| {
            let s = t.softmax(v[0]);
            weighted_sum(t, s, 7)
        })),
        run("log_softmax", lim, 16, &[&[3, 5]], 1.5, Box::new(|t, v| {
            let s = t.log_softmax(v[0]);
            weighted_sum(t, s, 8)
        })),
        run("layer_norm", lim, 17, &[&[3, 5], &[5], &[5]], 1.0, Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
            let y2 = t.mul(y, y)?;
            weighted_sum(t, y2, 9)
        })),
    ]
}

/// A small model used where every pixel is probed.
pub fn tiny_config() -> ViTConfig {
    ViTConfig {
        image_side: 8,
        patch_side: 2,
        channels: 1,
        embed_dim: 8,
        layers: 2,
        heads: 2,
        mlp_ratio: 2.0,
        classes: 3,
        use_class_token: true,
    }
}

/// Builds an attention stack straight from leaf score tensors, one per layer
/// (`[B*N, N_d, N_d]`), with values `vals` (`[B*N, N_d, w]`).
pub fn stack_from_scores(
    t: &mut Tape,
    scores: &[Var],
    vals: &[Var],
    batch: usize,
    heads: usize,
    class_token: bool,
) -> dfqlab::Result<AttentionStack> {
    let seq_len = t.shape(scores[0])[1];
    let mut layers = Vec::new();
    for (&logits, &v) in scores.iter().zip(vals) {
        let probs = t.softmax(logits);
        let head_out = t.matmul(probs, v)?;
        layers.push(LayerAttention {
            logits,
            probs,
            head_out,
        });
    }
    Ok(AttentionStack {
        batch,
        heads,
        seq_len,
        has_class_token: class_token,
        layers,
    })
}

fn labels_for(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Checks of the synthesis, distillation and coherency objectives.
pub fn loss_gradients() -> Vec<GradCheck> {
    let lim = 1e-4;
    let mut out = vec![
        run("L_CL", lim, 21, &[&[4, 5]], 2.0, Box::new(|t, v| {
            loss_cl(t, v[0], &labels_for(4, 5, 0))
        })),
        run("L_TV", lim, 22, &[&[2, 2, 5, 6]], 1.0, Box::new(|t, v| loss_tv(t, v[0]))),
        run("L_KL", lim, 23, &[&[3, 6], &[3, 6]], 2.0, Box::new(|t, v| loss_kl(t, v[0], v[1]))),
    ];
    for source in [MapSource::PreSoftmax, MapSource::PostSoftmax] {
        // scores of 2 images x 3 heads over a class token plus a 3x3 grid
        let name = format!("L_IHC on attention maps ({})", source_name(source));
        out.push(run(&name, lim, 24, &[&[6, 10, 10], &[6, 10, 10]], 1.0, Box::new(move |t, v| {
            let vals: Vec<Var> = (0..2).map(|_| t.constant(Tensor::zeros(&[6, 10, 2]))).collect();
            let attn = stack_from_scores(t, &v[..2], &vals, 2, 3, true)?;
            Ok(coherency(t, &attn, source)?.loss)
        })));
    }
    for target in [HadTarget::AttentionMaps, HadTarget::HeadOutputs] {
        for metric in Metric::DISTANCES {
            let name = format!("L_HAD {} on {}", metric.as_str(), target_name(target));
            // L1 has a kink wherever a teacher and student entry coincide; a
            // smaller step makes straddling one unlikely.
            let h = if metric == Metric::L1 { 1e-8 } else { FD_STEP };
            out.push(run_with(&name, lim, 25, &[&[2, 1, 8, 8]], 1.0, h, None, Box::new(move |t, v| {
                had_through_models(t, v[0], metric, target)
            })));
        }
    }
    out
}

fn had_through_models(t: &mut Tape, pixels: Var, metric: Metric, target: HadTarget) -> dfqlab::Result<Var> {
    let teacher = MicroViT::new(tiny_config(), 100)?;
    let student = MicroViT::new(tiny_config(), 101)?;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let fixed = t.constant(Tensor::randn(&[2, 1, 8, 8], 1.0, &mut rng));
    let tb = teacher.bind(t, false);
    let sb = student.bind(t, false);
    let to = forward(t, &tb, fixed, &mut FullPrecision, true)?;
    let so = forward(t, &sb, pixels, &mut FullPrecision, true)?;
    head_wise_distance(t, to.attn.as_ref().unwrap(), so.attn.as_ref().unwrap(), metric, target)
}

fn source_name(s: MapSource) -> &'static str {
    match s {
        MapSource::PreSoftmax => "pre-softmax",
        MapSource::PostSoftmax => "post-softmax",
    }
}

fn target_name(t: HadTarget) -> &'static str {
    match t {
        HadTarget::AttentionMaps => "attention maps",
        HadTarget::HeadOutputs => "head outputs",
    }
}

/// `L_IHC` with respect to the input pixels of the default micro ViT, and
/// the full synthesis objective on the tiny model.
pub fn model_gradients() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for source in [MapSource::PreSoftmax, MapSource::PostSoftmax] {
        let name = format!("L_IHC through micro ViT ({})", source_name(source));
        out.push(run_with(&name, 1e-3, 31, &[&[1, 1, 32, 32]], 1.0, FD_STEP, Some(128), Box::new(move |t, v| {
            let model = MicroViT::new(ViTConfig::default(), 7)?;
            let b = model.bind(t, false);
            let o = forward(t, &b, v[0], &mut FullPrecision, true)?;
            Ok(coherency(t, o.attn.as_ref().unwrap(), source)?.loss)
        })));
    }
    out.push(run("L_G (alpha*L_CL + beta*L_TV + L_IHC)", 1e-4, 32, &[&[2, 1, 8, 8]], 1.0, Box::new(|t, v| {
        let model = MicroViT::new(tiny_config(), 8)?;
        let b = model.bind(t, false);
        let o = forward(t, &b, v[0], &mut FullPrecision, true)?;
        let cl = loss_cl(t, o.logits, &[0, 2])?;
        let tv = loss_tv(t, v[0])?;
        let ihc = coherency(t, o.attn.as_ref().unwrap(), MapSource::PreSoftmax)?.loss;
        let wcl = t.scale(cl, 1.3);
        let wtv = t.scale(tv, 0.05);
        let s = t.add(wcl, wtv)?;
        t.add(s, ihc)
    })));
    out
}

pub fn all_gradient_checks() -> Vec<GradCheck> {
    let mut v = primitive_gradients();
    v.extend(loss_gradients());
    v.extend(model_gradients());
    v
}

// ---- quantizer oracle ----

/// Scalar min-max asymmetric parameters straight from the formulas.
pub fn oracle_asym(lo: f64, hi: f64, k: u8) -> (f64, f64) {
    let s = (2f64.powi(k as i32) - 1.0) / (hi - lo);
    (s, s * lo + 2f64.powi(k as i32 - 1))
}

pub fn oracle_sym(absmax: f64, k: u8) -> f64 {
    (2f64.powi(k as i32 - 1) - 1.0) / absmax
}

pub fn oracle_fake_quant(x: f64, s: f64, z: f64, k: u8) -> f64 {
    let lo = -(2f64.powi(k as i32 - 1));
    let hi = 2f64.powi(k as i32 - 1) - 1.0;
    let q = (x * s - z).round().max(lo).min(hi);
    (q + z) / s
}

/// A value grid covering the fitted range and beyond, including every
/// rounding midpoint of the integer lattice.
fn grid(lo: f64, hi: f64, k: u8) -> Vec<f64> {
    let levels = 2usize.pow(k as u32);
    let n = levels * 16;
    let span = hi - lo;
    let mut xs: Vec<f64> = (0..=n)
        .map(|i| lo - 0.25 * span + 1.5 * span * i as f64 / n as f64)
        .collect();
    let (s, z) = oracle_asym(lo, hi, k);
    for q in 0..=levels {
        let q = q as f64 - 2f64.powi(k as i32 - 1) - 0.5;
        xs.push((q + z) / s);
    }
    xs
}

/// Exhaustive comparison of the library quantizer with the oracle. Returns
/// the number of values compared, or the first mismatch.
pub fn quantizer_oracle() -> Result<usize, String> {
    let ranges = [(-1.0, 1.0), (-0.3, 2.7), (0.5, 0.75), (-5.0, -1.0), (-1e-3, 4e-3)];
    let mut compared = 0;
    for k in [2u8, 4, 8] {
        for &(lo, hi) in &ranges {
            let xs = grid(lo, hi, k);
            let fit_input = Tensor::vector(vec![lo, hi, 0.5 * (lo + hi)]);
            let p = minmax_fit(&fit_input, &QuantSpec::activation(k, dfqlab::quant::QuantMode::Minmax))
                .map_err(|e| e.to_string())?;
            let (s, z) = oracle_asym(lo, hi, k);
            if p.scale[0].to_bits() != s.to_bits() || p.zero[0].to_bits() != z.to_bits() {
                return Err(format!("k={k} [{lo}, {hi}]: fit ({}, {}) vs oracle ({s}, {z})", p.scale[0], p.zero[0]));
            }
            let spec = QuantSpec::activation(k, dfqlab::quant::QuantMode::Minmax);
            let got = fake_quant(&Tensor::vector(xs.clone()), &p, &spec, "grid").map_err(|e| e.to_string())?;
            for (x, g) in xs.iter().zip(got.data()) {
                let want = oracle_fake_quant(*x, s, z, k);
                if g.to_bits() != want.to_bits() {
                    return Err(format!("k={k} x={x}: {g} vs oracle {want}"));
                }
            }
            // idempotence and level count
            let again = fake_quant(&got, &p, &spec, "grid").map_err(|e| e.to_string())?;
            if again.data() != got.data() {
                return Err(format!("k={k} [{lo}, {hi}]: not idempotent"));
            }
            let mut levels: Vec<u64> = got.data().iter().map(|v| v.to_bits()).collect();
            levels.sort_unstable();
            levels.dedup();
            if levels.len() > 1 << k {
                return Err(format!("k={k}: {} distinct outputs", levels.len()));
            }
            compared += xs.len();
        }

        // per-channel symmetric weights, 3 output channels
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let w = Tensor::randn(&[40, 3], 0.7, &mut rng);
        let wspec = QuantSpec::weight(k);
        let p = minmax_fit(&w, &wspec).map_err(|e| e.to_string())?;
        let got = fake_quant(&w, &p, &wspec, "weight").map_err(|e| e.to_string())?;
        for c in 0..3 {
            let absmax = (0..40).map(|r| w.data()[r * 3 + c].abs()).fold(0.0, f64::max);
            let s = oracle_sym(absmax, k);
            if p.scale[c].to_bits() != s.to_bits() || p.zero[c] != 0.0 {
                return Err(format!("k={k} channel {c}: scale {} vs oracle {s}", p.scale[c]));
            }
            for r in 0..40 {
                let i = r * 3 + c;
                let want = oracle_fake_quant(w.data()[i], s, 0.0, k);
                if got.data()[i].to_bits() != want.to_bits() {
                    return Err(format!("k={k} weight ({r}, {c}): {} vs oracle {want}", got.data()[i]));
                }
            }
        }
        compared += w.numel();
    }
    Ok(compared)
}

/// Fixed-parameter fake quantization, handy for property tests.
pub fn per_tensor(s: f64, z: f64) -> QuantParams {
    QuantParams::per_tensor(s, z)
}

// ---- SSIM oracle ----

/// Luminance, contrast and structure terms multiplied out with `c3 = c2/2`,
/// population moments, dynamic range over both maps.
pub fn oracle_ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(x), mean(y));
    let var = |v: &[f64], m: f64| v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
    let (sx, sy) = (var(x, mx).sqrt(), var(y, my).sqrt());
    let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let hi = x.iter().chain(y).copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = x.iter().chain(y).copied().fold(f64::INFINITY, f64::min);
    let r = (hi - lo).max(1e-8);
    let c1 = (0.01 * r).powi(2);
    let c2 = (0.03 * r).powi(2);
    let c3 = c2 / 2.0;
    let l = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
    let c = (2.0 * sx * sy + c2) / (sx * sx + sy * sy + c2);
    let s = (sxy + c3) / (sx * sy + c3);
    l * c * s
}

fn random_map(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    // mix of offsets and scales so luminance and contrast both matter
    let shift = rng.random_range(-2.0..2.0);
    let spread = rng.random_range(0.05..3.0);
    (0..len).map(|_| shift + spread * rng.random_range(-1.0..1.0)).collect()
}

/// Largest deviation between the module and the oracle on `n` random 8x8
/// pairs.
pub fn ssim_oracle_gap(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..n {
        let x = random_map(&mut rng, 64);
        let y = if i % 5 == 0 {
            // partially inverted copy, exercises negative SSIM
            x.iter().map(|v| -v + rng.random_range(-0.1..0.1)).collect()
        } else {
            random_map(&mut rng, 64)
        };
        worst = worst.max((ssim_slices(&x, &y) - oracle_ssim(&x, &y)).abs());
    }
    worst
}

/// Bound, symmetry and identity on `n` random pairs; the first violation.
pub fn ssim_properties(n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let len = [4, 9, 16, 64][i % 4];
        let x = random_map(&mut rng, len);
        let y = random_map(&mut rng, len);
        let (a, b) = (ssim_slices(&x, &y), ssim_slices(&y, &x));
        if a.abs() > 1.0 + 1e-12 {
            return Err(format!("pair {i}: |SSIM| = {}", a.abs()));
        }
        if a != b {
            return Err(format!("pair {i}: SSIM(x, y) = {a} but SSIM(y, x) = {b}"));
        }
        let id = ssim_slices(&x, &x);
        if (id - 1.0).abs() > 1e-12 {
            return Err(format!("pair {i}: SSIM(x, x) = {id}"));
        }
    }
    Ok(())
}
