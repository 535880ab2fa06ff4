mod common;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use refseg::intervention::{split, MaskPair};
use refseg::metrics::{dice, iou, miou, BinaryMask, MiouMode};
use refseg::training::{compute_losses, model_losses};
use refseg::SegModel;

fn f32s(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn streams_sum_to_features_exactly_in_the_model() {
    let mut cfg = common::micro_config();
    let (batch, _) = common::micro_batch(&mut cfg, 2);
    let model = SegModel::new(&cfg, &Device::Cpu).unwrap();
    let out = model.forward(&batch.images, &batch.tokens).unwrap();
    assert_eq!(out.masks.len(), 3);
    for m in &out.masks {
        let (a, b) = (f32s(&m.mask), f32s(&m.complement));
        for (x, y) in a.iter().zip(&b) {
            assert!((x + y - 1.0).abs() <= f32::EPSILON, "{x} + {y}");
            assert!(*x > 0.0 && *x < 1.0);
        }
    }
}

fn grads_by_name(model: &SegModel, loss: &Tensor) -> HashMap<String, Vec<f64>> {
    let g = loss.backward().unwrap();
    model
        .params()
        .vars()
        .into_iter()
        .filter_map(|(n, v)| g.get(v.as_tensor()).map(|t| (n, common::to_vec(t))))
        .collect()
}

fn is_confounding_only(name: &str) -> bool {
    name.starts_with("decoder_s.") || name.starts_with("fuse_s.")
}

#[test]
fn confounding_decoder_gradients_are_minus_lambda_times_ls_gradients() {
    let mut cfg = common::micro_config();
    let (batch, _) = common::micro_batch(&mut cfg, 2);
    let model = SegModel::new(&cfg, &Device::Cpu).unwrap();
    // a power-of-two lambda makes every scaled intermediate exact
    let lambda = 0.0625;
    let (_, losses) = model_losses(&model, &batch, lambda).unwrap();
    let g_total = grads_by_name(&model, &losses.total);
    let g_s = grads_by_name(&model, losses.l_s.as_ref().unwrap());
    let mut checked = 0;
    for (name, gs) in &g_s {
        if !is_confounding_only(name) {
            continue;
        }
        let gt = &g_total[name];
        for (a, b) in gt.iter().zip(gs) {
            assert_eq!(*a, -lambda * b, "{name}");
        }
        checked += 1;
    }
    assert!(checked >= 4, "only {checked} confounding-only parameters");
}

#[test]
fn confounding_gradients_at_default_lambda_f64() {
    let mut cfg = common::micro_config();
    let (batch, _) = common::micro_batch(&mut cfg, 2);
    let model = SegModel::with_dtype(&cfg, DType::F64, &Device::Cpu).unwrap();
    let (_, losses) = model_losses(&model, &batch, cfg.lambda).unwrap();
    let g_total = grads_by_name(&model, &losses.total);
    let g_s = grads_by_name(&model, losses.l_s.as_ref().unwrap());
    for (name, gs) in g_s.iter().filter(|(n, _)| is_confounding_only(n)) {
        for (a, b) in g_total[name].iter().zip(gs) {
            let expect = -cfg.lambda * b;
            assert!((a - expect).abs() <= 1e-12 * expect.abs().max(1e-12), "{name}: {a} vs {expect}");
        }
    }
}

#[test]
fn zero_lambda_reduces_to_causal_supervision() {
    let mut cfg = common::micro_config();
    let (batch, _) = common::micro_batch(&mut cfg, 2);
    let model = SegModel::new(&cfg, &Device::Cpu).unwrap();
    let (_, losses) = model_losses(&model, &batch, 0.0).unwrap();
    assert_eq!(losses.bundle.l, losses.bundle.l_c);
    let g_total = grads_by_name(&model, &losses.total);
    let g_c = grads_by_name(&model, &losses.l_c);
    for (name, gt) in &g_total {
        match g_c.get(name) {
            Some(gc) => assert_eq!(gt, gc, "{name}"),
            None => assert!(gt.iter().all(|v| *v == 0.0), "{name}"),
        }
    }
}

#[test]
fn reported_total_matches_graph_value() {
    let mut cfg = common::micro_config();
    let (batch, _) = common::micro_batch(&mut cfg, 2);
    let model = SegModel::new(&cfg, &Device::Cpu).unwrap();
    let (_, losses) = model_losses(&model, &batch, 0.05).unwrap();
    let b = losses.bundle;
    assert_eq!(b.l, b.l_c - b.lambda * b.l_s);
    assert!(b.l_c >= 0.0 && b.l_s >= 0.0);
    let graph: f32 = losses.total.to_scalar().unwrap();
    let ulp = f32::EPSILON * graph.abs().max(f32::MIN_POSITIVE);
    assert!(((b.l as f32) - graph).abs() <= ulp, "{} vs {graph}", b.l);
}

fn tensor(v: Vec<f32>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_exactly_additive(
        feats in prop::collection::vec(-1e4f32..1e4, 24),
        logits in prop::collection::vec(-30f32..30.0, 8),
    ) {
        let f = tensor(feats, &[1, 3, 2, 4]);
        let masks = MaskPair::from_logits(&tensor(logits, &[1, 1, 2, 4])).unwrap();
        let (c, s) = split(&f, &masks).unwrap();
        let sum = f32s(&(c + s).unwrap());
        prop_assert_eq!(sum, f32s(&f));
        for (m, mb) in f32s(&masks.mask).iter().zip(f32s(&masks.complement)) {
            prop_assert!((m + mb - 1.0).abs() <= f32::EPSILON);
        }
    }

    #[test]
    fn loss_identity_holds(lc in 0f64..10.0, ls in 0f64..10.0, lambda in 0f64..1.0) {
        let b = refseg::training::LossBundle::new(lc, ls, lambda);
        prop_assert_eq!(b.l, lc - lambda * ls);
    }

    #[test]
    fn bce_is_non_negative(logits in prop::collection::vec(-50f32..50.0, 6), bits in prop::collection::vec(any::<bool>(), 6)) {
        let s = tensor(logits, &[1, 1, 2, 3]);
        let y = tensor(bits.iter().map(|&b| b as u8 as f32).collect(), &[1, 1, 2, 3]);
        let l = compute_losses(&s, Some(&s), &y, 0.05).unwrap().bundle;
        prop_assert!(l.l_c >= 0.0 && l.l_s >= 0.0);
    }

    #[test]
    fn metrics_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 12), b in prop::collection::vec(any::<bool>(), 12)) {
        let p = BinaryMask::new(3, 4, a).unwrap();
        let g = BinaryMask::new(3, 4, b).unwrap();
        let d = dice(&p, &g).unwrap();
        prop_assert_eq!(d, dice(&g, &p).unwrap());
        prop_assert_eq!(iou(&p, &g).unwrap(), iou(&g, &p).unwrap());
        let m = miou(&p, &g, MiouMode::TwoClass).unwrap();
        prop_assert_eq!(m, miou(&g, &p, MiouMode::TwoClass).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&m));
    }

    #[test]
    fn fixing_a_false_negative_never_lowers_dice(a in prop::collection::vec(any::<bool>(), 16), b in prop::collection::vec(any::<bool>(), 16)) {
        let p = BinaryMask::new(4, 4, a).unwrap();
        let g = BinaryMask::new(4, 4, b).unwrap();
        if let Some(i) = (0..16).find(|&i| g.data[i] && !p.data[i]) {
            let mut fixed = p.clone();
            fixed.data[i] = true;
            prop_assert!(dice(&fixed, &g).unwrap() >= dice(&p, &g).unwrap());
        }
    }

    #[test]
    fn carafe_output_is_a_convex_combination(seed in 0u64..1000) {
        use refseg::carafe::{reassemble, ReassemblyKernels};
        let x = common::randn(&[1, 2, 3, 4], seed);
        let raw = (common::randn(&[1, 4 * 25, 3, 4], seed + 1) * 3.0).unwrap();
        let k = ReassemblyKernels::from_encoder_output(&raw, 5, 2).unwrap();
        let y = common::to_vec(&reassemble(&x, &k).unwrap());
        let xs = common::to_vec(&x);
        let lo = xs.iter().cloned().fold(0.0, f64::min);
        let hi = xs.iter().cloned().fold(0.0, f64::max);
        prop_assert!(y.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }
}
