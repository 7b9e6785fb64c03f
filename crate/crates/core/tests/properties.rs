use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clinix_core::blocks::hgconv::{channel_partition, working_channels};
use clinix_core::harness::bench::scan_instance;
use clinix_core::harness::volume_io::{read_sample_from, write_sample_to};
use clinix_core::harness::SynthSpec;
use clinix_core::loss::{dice_loss, region_dice_loss, region_tversky_loss, tversky_loss, Coefficients, RegionPartition};
use clinix_core::metrics::metrics;
use clinix_core::net::{preset_plan, NetworkPlan, Variant};
use clinix_core::ssm::scan_with;
use clinix_core::{Error, ScanElement, ScanMode, Tape, Tensor};

fn probs(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn labels(seed: u64, n: usize, classes: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

fn value(p: &Tensor, f: impl FnOnce(&mut Tape, clinix_core::Var) -> clinix_core::Result<clinix_core::Var>) -> f64 {
    let mut t = Tape::new();
    let v = t.var("p", p.clone()).unwrap();
    let l = f(&mut t, v).unwrap();
    t.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scan_paths_agree_for_any_chunk(l in 1usize..300, c in 1usize..5, n in 1usize..9, chunk in 1usize..80, seed in any::<u64>()) {
        let [x, abar, bbar, cm, d] = scan_instance(l, c, n, seed).unwrap();
        let seq = scan_with(&x, &abar, &bbar, &cm, &d, ScanMode::Sequential, chunk).unwrap();
        let par = scan_with(&x, &abar, &bbar, &cm, &d, ScanMode::Parallel, chunk).unwrap();
        prop_assert!(seq.max_abs_diff(&par) <= 1e-10);
    }

    #[test]
    fn combine_has_identity_and_associates(a in 0.0f64..1.0, b in -3.0f64..3.0, c in 0.0f64..1.0, d in -3.0f64..3.0) {
        let (p, q) = (ScanElement { a, b }, ScanElement { a: c, b: d });
        prop_assert_eq!(ScanElement::IDENTITY.combine(p), p);
        prop_assert_eq!(p.combine(ScanElement::IDENTITY), p);
        let r = p.combine(q).combine(p);
        let s = p.combine(q.combine(p));
        prop_assert!((r.a - s.a).abs() <= 1e-12 && (r.b - s.b).abs() <= 1e-12);
    }

    #[test]
    fn partition_of_working_width(c in 1usize..400, n in 2usize..=6) {
        let w = working_channels(c, n);
        prop_assert!(w >= c && w % (1 << (n - 1)) == 0 && w - c < (1 << (n - 1)));
        let parts = channel_partition(w, n).unwrap();
        prop_assert_eq!(parts.iter().sum::<usize>(), 2 * w);
        prop_assert_eq!(*parts.last().unwrap(), w);
        prop_assert!(parts[1..].windows(2).all(|p| p[1] == 2 * p[0]));
    }

    #[test]
    fn losses_bounded(seed in any::<u64>(), d in 2usize..6, h in 2usize..6, w in 1usize..4, classes in 2usize..4, bx in 1usize..4) {
        let shape = [1, classes, d, h, w];
        let p = probs(seed, &shape);
        let y = labels(seed, d * h * w, classes);
        let part = RegionPartition::with_box([d, h, w], [bx.min(d), bx.min(h), 1]).unwrap();
        let k = part.regions() as f64;
        let coeffs = Coefficients::uniform(classes, part.regions(), 0.3, 0.7);
        for v in [
            value(&p, |t, v| dice_loss(t, v, &y, 1e-5)),
            value(&p, |t, v| tversky_loss(t, v, &y, 0.3, 0.7, 1e-5)),
        ] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for v in [
            value(&p, |t, v| region_tversky_loss(t, v, &y, &part, &coeffs, 1e-5, false)),
            value(&p, |t, v| region_dice_loss(t, v, &y, &part, 1e-5, false)),
        ] {
            prop_assert!(v >= 0.0 && v <= k + 1e-12);
        }
        let normalized = value(&p, |t, v| region_tversky_loss(t, v, &y, &part, &coeffs, 1e-5, true));
        prop_assert!((0.0..=1.0).contains(&normalized));
    }

    #[test]
    fn perfect_prediction_is_lossless(seed in any::<u64>(), d in 3usize..6, classes in 2usize..4) {
        let y = labels(seed, d * d * d, classes);
        let onehot = clinix_core::loss::one_hot(&y, 1, classes, &[d, d, d]).unwrap();
        let part = RegionPartition::split([d, d, d], [2, 2, 2]).unwrap();
        let coeffs = Coefficients::uniform(classes, part.regions(), 0.3, 0.7);
        prop_assert!(value(&onehot, |t, v| dice_loss(t, v, &y, 1e-5)).abs() < 1e-12);
        prop_assert!(value(&onehot, |t, v| region_tversky_loss(t, v, &y, &part, &coeffs, 1e-5, false)).abs() < 1e-12);
    }

    #[test]
    fn dsc_iou_identity(seed in any::<u64>(), n in 1usize..200, classes in 2usize..5) {
        let pred = labels(seed, n, classes);
        let target = labels(seed.wrapping_add(1), n, classes);
        let m = metrics(&pred, &target, classes).unwrap();
        for c in &m.classes {
            prop_assert!((c.dsc - 2.0 * c.iou / (1.0 + c.iou)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&c.recall));
        }
        let same = metrics(&target, &target, classes).unwrap();
        prop_assert_eq!(same.mean_dsc(), 1.0);
    }

    #[test]
    fn sample_files_round_trip(seed in 0u64..1000, cut in 0usize..400) {
        let spec = SynthSpec { extents: [6, 5, 4], radius: [1.0, 2.0], tw_band: [0.01, 0.6], classes: 3, in_channels: 2, seed, ..Default::default() };
        let s = spec.sample(0).unwrap();
        let mut buf = Vec::new();
        write_sample_to(&mut buf, &s).unwrap();
        let back = read_sample_from(buf.as_slice(), &s.id).unwrap();
        prop_assert_eq!(&back, &s);
        // any truncation is a format error, never a panic
        let cut = cut.min(buf.len() - 1);
        let r = read_sample_from(&buf[..cut], "x");
        prop_assert!(matches!(r, Err(Error::Format { .. })), "{:?}", r.err());
    }

    #[test]
    fn synthetic_ratio_in_band(seed in 0u64..500) {
        let spec = SynthSpec { tw_band: [0.001, 0.003], blobs: [1, 1], radius: [1.0, 2.5], seed, ..Default::default() };
        let s = spec.sample(0).unwrap();
        let tw = s.target_fraction();
        prop_assert!((0.001..=0.003).contains(&tw), "{}", tw);
        prop_assert!(s.labels.iter().any(|&l| l > 0));
    }
}

#[test]
fn broadcast_add_matches_manual() {
    let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let b = Tensor::from_fn(&[4], |i| 10.0 * i as f64);
    let mut t = Tape::new();
    let (va, vb) = (t.var("a", a.clone()).unwrap(), t.var("b", b.clone()).unwrap());
    let s = t.add(va, vb).unwrap();
    let out = t.value(s).clone();
    for i in 0..24 {
        assert_eq!(out.data()[i], a.data()[i] + b.data()[i % 4]);
    }
    let total = t.sum(s);
    let g = t.backward(total).unwrap();
    assert!(g.get("b").unwrap().data().iter().all(|&v| v == 6.0));
    // leading-axis alignment is not broadcasting
    let mut t = Tape::new();
    let c = t.constant(Tensor::zeros(&[2]));
    let va = t.constant(a);
    assert!(matches!(t.add(va, c), Err(Error::Shape(_))));
}

#[test]
fn plan_variants_round_trip() {
    let base = preset_plan("lungt").unwrap();
    for v in ["plain", "all-h", "all-m", "order-3", "stagewise"] {
        let p = base.clone().with_variant(v.parse::<Variant>().unwrap()).unwrap();
        assert_eq!(NetworkPlan::from_toml(&p.to_toml().unwrap()).unwrap(), p);
    }
}
