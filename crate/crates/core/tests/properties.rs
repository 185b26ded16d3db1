#[path = "support/checks.rs"]
mod checks;

use dfqlab::attnsim::{coherency, head_wise_distance, rank_correlation, HadTarget, MapSource, Metric, RankKind};
use dfqlab::checkpoint::{load_model, round_to_f32, save_model};
use dfqlab::quant::{asymmetric_params, fake_quant_scalar, minmax_fit, QuantMode, QuantSpec};
use dfqlab::synthesis::stratify_within_classes;
use dfqlab::vit::{MicroViT, ViTConfig};
use dfqlab::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `[B*N, N_d, N_d]` scores with the heads of every image reordered by `perm`.
fn permute_heads(t: &Tensor, batch: usize, perm: &[usize]) -> Tensor {
    let heads = perm.len();
    let block = t.numel() / (batch * heads);
    let mut out = Vec::with_capacity(t.numel());
    for b in 0..batch {
        for &h in perm {
            let start = (b * heads + h) * block;
            out.extend_from_slice(&t.data()[start..start + block]);
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

struct Stacks {
    teacher: Vec<Tensor>,
    student: Vec<Tensor>,
    values: Vec<Tensor>,
}

fn random_stacks(seed: u64, batch: usize, heads: usize, seq: usize, layers: usize) -> Stacks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = |w: usize| -> Vec<Tensor> {
        (0..layers)
            .map(|_| Tensor::randn(&[batch * heads, seq, w], 1.5, &mut rng))
            .collect()
    };
    Stacks {
        teacher: gen(seq),
        student: gen(seq),
        values: gen(3),
    }
}

fn had_value(s: &Stacks, batch: usize, heads: usize, metric: Metric, target: HadTarget) -> f64 {
    let mut t = Tape::new();
    let consts = |t: &mut Tape, v: &[Tensor]| v.iter().map(|x| t.constant(x.clone())).collect::<Vec<_>>();
    let (tv, sv, vv) = (consts(&mut t, &s.teacher), consts(&mut t, &s.student), consts(&mut t, &s.values));
    let ta = checks::stack_from_scores(&mut t, &tv, &vv, batch, heads, true).unwrap();
    let sa = checks::stack_from_scores(&mut t, &sv, &vv, batch, heads, true).unwrap();
    let d = head_wise_distance(&mut t, &ta, &sa, metric, target).unwrap();
    t.value(d).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fake_quant_error_is_at_most_half_a_step(
        lo in -10.0f64..0.0,
        width in 1e-3f64..20.0,
        u in 0.0f64..=1.0,
        k in prop::sample::select(vec![2u8, 3, 4, 6, 8]),
    ) {
        let hi = lo + width;
        let x = lo + u * width;
        let (s, z) = asymmetric_params(lo, hi, k);
        let err = (fake_quant_scalar(x, s, z, k) - x).abs();
        prop_assert!(err <= 0.5 / s * (1.0 + 1e-9) + 1e-12, "err {} step {}", err, 1.0 / s);
    }

    #[test]
    fn weight_fit_is_symmetric_per_channel(seed in 0u64..1000, k in 2u8..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let p = minmax_fit(&w, &QuantSpec::weight(k)).unwrap();
        prop_assert_eq!(p.channels(), 5);
        prop_assert!(p.zero.iter().all(|&z| z == 0.0));
        let neg = w.map(|v| -v);
        let q = minmax_fit(&neg, &QuantSpec::weight(k)).unwrap();
        prop_assert_eq!(p.scale, q.scale);
        let act = minmax_fit(&w, &QuantSpec::activation(k, QuantMode::Minmax)).unwrap();
        prop_assert_eq!(act.channels(), 1);
    }

    #[test]
    fn coherency_lies_between_one_over_heads_and_one(
        seed in 0u64..1000,
        heads in 1usize..5,
        post in any::<bool>(),
    ) {
        let s = random_stacks(seed, 2, heads, 10, 2);
        let mut t = Tape::new();
        let sv: Vec<_> = s.teacher.iter().map(|x| t.constant(x.clone())).collect();
        let vv: Vec<_> = s.values.iter().map(|x| t.constant(x.clone())).collect();
        let attn = checks::stack_from_scores(&mut t, &sv, &vv, 2, heads, true).unwrap();
        let source = if post { MapSource::PostSoftmax } else { MapSource::PreSoftmax };
        let c = coherency(&mut t, &attn, source).unwrap();
        let floor = 1.0 / heads as f64;
        for &d in &c.report.d {
            prop_assert!(d >= floor - 1e-12 && d <= 1.0 + 1e-12, "D = {}", d);
        }
        prop_assert!(c.report.l_ihc >= -1e-12 && c.report.l_ihc <= 1.0 - floor + 1e-12);
    }

    #[test]
    fn had_is_unchanged_when_both_models_reorder_heads(
        seed in 0u64..1000,
        metric in prop::sample::select(Metric::DISTANCES.to_vec()),
        outputs in any::<bool>(),
    ) {
        let (batch, heads) = (2, 3);
        let s = random_stacks(seed, batch, heads, 10, 2);
        let target = if outputs { HadTarget::HeadOutputs } else { HadTarget::AttentionMaps };
        let base = had_value(&s, batch, heads, metric, target);
        let mut perm: Vec<usize> = (0..heads).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        let p = |v: &[Tensor]| v.iter().map(|x| permute_heads(x, batch, &perm)).collect();
        let moved = Stacks {
            teacher: p(&s.teacher),
            student: p(&s.student),
            values: p(&s.values),
        };
        let after = had_value(&moved, batch, heads, metric, target);
        prop_assert!((base - after).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn rank_correlation_is_bounded_and_rank_invariant(
        xs in prop::collection::vec(-100.0f64..100.0, 3..40),
        noise in prop::collection::vec(-50.0f64..50.0, 40),
        kendall in any::<bool>(),
    ) {
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let kind = if kendall { RankKind::Kendall } else { RankKind::Spearman };
        let (Ok(r), Ok(again)) = (
            rank_correlation(&xs, &ys, kind),
            rank_correlation(&xs.iter().map(|v| v.mul_add(3.0, 1.0)).collect::<Vec<_>>(), &ys.iter().map(|v| (v / 50.0).exp()).collect::<Vec<_>>(), kind),
        ) else {
            return Ok(());
        };
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - again).abs() < 1e-12);
        let flipped: Vec<f64> = ys.iter().map(|v| -v).collect();
        let neg = rank_correlation(&xs, &flipped, kind).unwrap();
        prop_assert!((r + neg).abs() < 1e-12);
    }

    #[test]
    fn strata_are_disjoint_and_class_balanced(
        scores in prop::collection::vec(0.0f64..1.0, 8..80),
        classes in 1usize..5,
        fraction in 0.1f64..0.5,
        seed in 0u64..100,
    ) {
        let labels: Vec<usize> = (0..scores.len()).map(|i| i % classes).collect();
        let Ok(s) = stratify_within_classes(&scores, &labels, fraction, seed) else {
            return Ok(());
        };
        prop_assert_eq!(s.high.len(), s.low.len());
        prop_assert_eq!(s.high.len(), s.random.len());
        for c in 0..classes {
            let count = |v: &[usize]| v.iter().filter(|&&i| labels[i] == c).count();
            prop_assert_eq!(count(&s.high), count(&s.low));
            let lows: Vec<usize> = s.low.iter().copied().filter(|&i| labels[i] == c).collect();
            let highs: Vec<usize> = s.high.iter().copied().filter(|&i| labels[i] == c).collect();
            let members = labels.iter().filter(|&&l| l == c).count();
            if 2 * highs.len() <= members {
                // no overlap when the two ends fit side by side
                prop_assert!(highs.iter().all(|i| !lows.contains(i)));
                let hmin = highs.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
                let lmax = lows.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(hmin >= lmax);
            }
        }
        let mut r = s.random.clone();
        r.dedup();
        prop_assert_eq!(r.len(), s.random.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_checkpoint_roundtrip(seed in 0u64..1000, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let cfg = ViTConfig { heads, ..ViTConfig::default() };
        let m = MicroViT::new(cfg, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&m, &path).unwrap();
        let back = load_model(&path).unwrap();
        prop_assert_eq!(&back.config, &m.config);
        for (a, b) in back.params.refs().iter().zip(m.params.refs()) {
            prop_assert_eq!(*a, &round_to_f32(b));
        }
        // a second save of the loaded model is byte-identical
        let again = dir.path().join("m2.ckpt");
        save_model(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
}
