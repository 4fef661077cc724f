use coupalign::autodiff::Tape;
use coupalign::losses::{aux_loss, downsample_nearest, seg_loss, total_loss, AuxConfig};
use coupalign::metrics::{overlap, EvalAccumulator, Overlap, HISTOGRAM_EDGES};
use coupalign::tensor::Tensor;
use coupalign::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{bce_oracle, info_nce_oracle};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}


fn seg(logits: &Tensor<f64>, mask: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let l = seg_loss(&mut tape, x, mask).unwrap();
    tape.value(l)[0]
}

fn aux(y1: &Tensor<f64>, mask: &Tensor<f64>, cfg: AuxConfig) -> Option<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(y1);
    aux_loss(&mut tape, y, mask, cfg).unwrap().map(|v| tape.value(v)[0])
}

#[test]
fn zero_logits_cost_ln_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask: Vec<f64> = (0..36).map(|_| rng.random_range(0..2) as f64).collect();
    let v = seg(&Tensor::zeros(&[6, 6]), &t(&[6, 6], &mask));
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn saturated_logits_cost_nothing() {
    let mask = [1.0, 0.0, 0.0, 1.0];
    let logits: Vec<f64> = mask.iter().map(|&m| if m == 1.0 { 20.0 } else { -20.0 }).collect();
    assert!(seg(&t(&[2, 2], &logits), &t(&[2, 2], &mask)) < 1e-8);
}

#[test]
fn two_by_two_bce_matches_hand_formula() {
    let x = [1.0, -1.0, 0.0, 2.0];
    let y = [1.0, 0.0, 0.0, 1.0];
    // ln(1+e^-1) twice, ln 2, ln(1+e^-2)
    let hand = (2.0 * (1.0 + (-1.0f64).exp()).ln() + 2f64.ln() + (1.0 + (-2.0f64).exp()).ln()) / 4.0;
    let v = seg(&t(&[2, 2], &x), &t(&[2, 2], &y));
    assert!((v - hand).abs() < 1e-12);
    assert!((v - bce_oracle(&x, &y)).abs() < 1e-12);
}

#[test]
fn seg_loss_rejects_bad_masks() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::<f64>::zeros(&[2, 2]));
    assert!(matches!(seg_loss(&mut tape, x, &t(&[2, 2], &[0.0, 0.5, 1.0, 0.0])), Err(Error::Input(_))));
    assert!(matches!(seg_loss(&mut tape, x, &Tensor::zeros(&[2, 3])), Err(Error::Dimension { .. })));
}

#[test]
fn orthogonal_pair_info_nce_closed_form() {
    let y1 = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
    let mask = t(&[2, 1], &[1.0, 0.0]);
    let v = aux(&y1, &mask, AuxConfig { tau: 1.0, normalize: true }).unwrap();
    let term = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    assert!((term - 0.313262).abs() < 1e-6);
    assert!((v - 2.0 * term).abs() < 1e-12);
    assert!((v - 0.626524).abs() < 1e-5);
}

#[test]
fn info_nce_is_skipped_without_both_sets() {
    let y1 = Tensor::full(&[2, 2, 3], 0.5);
    assert_eq!(aux(&y1, &Tensor::full(&[2, 2], 1.0), AuxConfig::default()), None);
    assert_eq!(aux(&y1, &Tensor::zeros(&[2, 2]), AuxConfig::default()), None);
}

#[test]
fn nearest_downsample_reads_pixel_centers() {
    // 4×4 mask with only the bottom-right 2×2 block set
    let mut m = vec![0.0; 16];
    for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
        m[y * 4 + x] = 1.0;
    }
    let d = downsample_nearest(&t(&[4, 4], &m), 2, 2).unwrap();
    assert_eq!(d, vec![false, false, false, true]);
    let same = downsample_nearest(&t(&[4, 4], &m), 4, 4).unwrap();
    assert_eq!(same, m.iter().map(|&v| v == 1.0).collect::<Vec<_>>());
}


#[test]
fn info_nce_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..20 {
        let (h, w, d) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(1..6));
        let y: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut fg: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
        fg[0] = true;
        fg[1] = false;
        let mask: Vec<f64> = fg.iter().map(|&b| b as u8 as f64).collect();
        let normalize = case % 2 == 0;
        let tau = [0.07, 0.5, 1.0][case % 3];
        let got = aux(&t(&[h, w, d], &y), &t(&[h, w], &mask), AuxConfig { tau, normalize }).unwrap();
        let want = info_nce_oracle(&y, d, &fg, tau, normalize);
        assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "case {case}: {got} vs {want}");
    }
}

#[test]
fn total_loss_arithmetic() {
    let mut tape = Tape::<f64>::new();
    let s1 = tape.constant(&Tensor::scalar(0.4));
    let s2 = tape.constant(&Tensor::scalar(0.8));
    let a1 = tape.constant(&Tensor::scalar(2.0));
    let a2 = tape.constant(&Tensor::scalar(1.0));

    let (l, r) = total_loss(&mut tape, &[s1, s2], &[Some(a1), Some(a2)], 0.0).unwrap();
    assert!((tape.value(l)[0] - 0.6).abs() < 1e-12);
    assert_eq!(r.per_image.len(), 2);

    let (l, _) = total_loss(&mut tape, &[s1], &[Some(a1)], 0.1).unwrap();
    assert!((tape.value(l)[0] - 0.6).abs() < 1e-12);

    // ((0.4 + 0.1·2) + (0.8 + 0.1·1)) / 2 = 0.75
    let (l, r) = total_loss(&mut tape, &[s1, s2], &[Some(a1), Some(a2)], 0.1).unwrap();
    assert!((tape.value(l)[0] - 0.75).abs() < 1e-12);
    assert!((r.seg - 0.6).abs() < 1e-12 && (r.aux - 1.5).abs() < 1e-12);

    // a skipped auxiliary term contributes nothing
    let (l, _) = total_loss(&mut tape, &[s1, s2], &[None, Some(a2)], 0.1).unwrap();
    assert!((tape.value(l)[0] - 0.65).abs() < 1e-12);

    assert!(matches!(total_loss(&mut tape, &[s1], &[], 0.1), Err(Error::Contract(_))));
    assert!(matches!(total_loss(&mut tape, &[s1], &[None], -1.0), Err(Error::Config(_))));
}

#[test]
fn non_finite_loss_is_reported() {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(&Tensor::scalar(f64::NAN));
    assert!(matches!(total_loss(&mut tape, &[s], &[None], 0.1), Err(Error::NonFinite(_))));
}

fn mask_from(ones: &[usize], n: usize) -> Vec<bool> {
    (0..n).map(|i| ones.contains(&i)).collect()
}

#[test]
fn iou_examples() {
    let a = mask_from(&[0, 1, 2, 3], 16);
    assert_eq!(overlap(&a, &a).unwrap().iou(), 1.0);
    assert_eq!(overlap(&a, &mask_from(&[8, 9], 16)).unwrap().iou(), 0.0);
    let gt = mask_from(&[0, 1, 2, 3, 4, 5, 6, 7], 16);
    let o = overlap(&a, &gt).unwrap();
    assert_eq!(o, Overlap { intersection: 4, union: 8 });
    assert_eq!(o.iou(), 0.5);
    assert!(matches!(overlap(&a, &a[..3]), Err(Error::Input(_))));
}

#[test]
fn aggregate_examples() {
    let mut acc = EvalAccumulator::new();
    acc.accumulate(&mask_from(&[0, 1, 2, 3], 16), &mask_from(&[0, 1, 2, 3, 4, 5, 6, 7], 16)).unwrap();
    acc.accumulate(&mask_from(&[0, 1], 16), &mask_from(&[2, 3], 16)).unwrap();
    let m = acc.finalize().unwrap();
    assert!((m.oiou - 4.0 / 12.0).abs() < 1e-15);
    assert!((m.miou - 0.25).abs() < 1e-15);

    let mut one = EvalAccumulator::new();
    let p = mask_from(&[3, 4], 9);
    one.accumulate(&p, &p).unwrap();
    let m = one.finalize().unwrap();
    assert_eq!([m.oiou, m.miou, m.prec50, m.prec70, m.prec90], [1.0; 5]);

    assert!(matches!(EvalAccumulator::new().finalize(), Err(Error::Contract(_))));
}

/// Accumulator holding samples with the given IoUs (as k/20 fractions).
fn with_ious(ious: &[f64]) -> EvalAccumulator {
    let mut acc = EvalAccumulator::new();
    for &v in ious {
        let k = (v * 20.0).round() as usize;
        let gt = vec![true; 20];
        let pred: Vec<bool> = (0..20).map(|i| i < k).collect();
        acc.accumulate(&pred, &gt).unwrap();
    }
    acc
}

#[test]
fn precision_examples() {
    let m = with_ious(&[0.6, 0.4]).finalize().unwrap();
    assert_eq!((m.prec50, m.prec70, m.prec90), (0.5, 0.0, 0.0));
    // strictly greater than the threshold
    let m = with_ious(&[0.5]).finalize().unwrap();
    assert_eq!(m.prec50, 0.0);
}

#[test]
fn histogram_examples() {
    assert_eq!(with_ious(&[0.05, 0.45, 0.9]).iou_histogram(&HISTOGRAM_EDGES), vec![1, 0, 0, 0, 1]);
    assert_eq!(with_ious(&[0.5, 0.75, 1.0]).iou_histogram(&HISTOGRAM_EDGES), vec![0; 5]);
    assert_eq!(with_ious(&[0.1]).iou_histogram(&HISTOGRAM_EDGES), vec![0, 1, 0, 0, 0]);
}

#[test]
fn merge_equals_single_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<(Vec<bool>, Vec<bool>)> = (0..10)
        .map(|_| ((0..16).map(|_| rng.random_bool(0.5)).collect(), (0..16).map(|_| rng.random_bool(0.5)).collect()))
        .collect();
    let mut whole = EvalAccumulator::new();
    let (mut a, mut b) = (EvalAccumulator::new(), EvalAccumulator::new());
    for (i, (p, g)) in pairs.iter().enumerate() {
        whole.accumulate(p, g).unwrap();
        let part = if i < 4 { &mut a } else { &mut b };
        part.accumulate(p, g).unwrap();
    }
    a.merge(&b);
    assert_eq!(a, whole);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn precision_is_monotone_and_metrics_bounded(
        pairs in prop::collection::vec((prop::collection::vec(any::<bool>(), 64), prop::collection::vec(any::<bool>(), 64)), 1..12)
    ) {
        let mut acc = EvalAccumulator::new();
        for (p, g) in &pairs {
            acc.accumulate(p, g).unwrap();
        }
        let m = acc.finalize().unwrap();
        prop_assert!(m.prec90 <= m.prec70 && m.prec70 <= m.prec50);
        for v in [m.oiou, m.miou, m.prec50] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let hist: usize = acc.iou_histogram(&HISTOGRAM_EDGES).iter().sum();
        let below = acc.ious().iter().filter(|&&v| v < 0.5).count();
        prop_assert_eq!(hist, below);
    }
}
