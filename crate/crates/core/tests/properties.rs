use proptest::prelude::*;
use xmask::attack::{fgsm, masked_pgd, pgd, AttackConfig};
use xmask::mask::{mute_mix, mute_weights};
use xmask::metrics::{balance, cosine_similarity, normalize_speeds, percentile, speed, BalanceRun, BalanceWeights, Monitor};
use xmask::nn::{build_mlp, build_xunet, XUnetConfig};
use xmask::tensor::{rng_uniform, Precision, Rng, Tape, Tensor};
use xmask::train::{xunet_loss, TrainConfig};
use xmask::xai::{normalize01_tensor, GradientSaliency};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, len)
}

fn tensor(v: Vec<f64>) -> Tensor {
    let n = v.len();
    Tensor::new([n], v).unwrap()
}

proptest! {
    #[test]
    fn cosine_is_symmetric_bounded_and_scale_invariant(a in vec_strategy(12), b in vec_strategy(12), c in 0.01f64..100.0) {
        let (ta, tb) = (tensor(a), tensor(b));
        let ab = cosine_similarity(&ta, &tb).unwrap().0;
        let ba = cosine_similarity(&tb, &ta).unwrap().0;
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-12);
        if ta.norm_l2() > 1e-3 && tb.norm_l2() > 1e-3 {
            let scaled = cosine_similarity(&ta.scale(c), &tb).unwrap().0;
            prop_assert!((scaled - ab).abs() < 1e-9);
            let own = cosine_similarity(&ta, &ta).unwrap().0;
            prop_assert!((own - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn monitor_verdict_is_monotone(s1 in 0.0f64..1.0, s2 in 0.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let (tlo, thi) = (t1.min(t2), t1.max(t2));
        let strict = Monitor::with_explainer(Box::new(GradientSaliency), thi).unwrap();
        let loose = Monitor::with_explainer(Box::new(GradientSaliency), tlo).unwrap();
        // a higher score never turns a pass into a fail
        prop_assert!(!strict.judge(lo).pass || strict.judge(hi).pass);
        // a stricter threshold never turns a fail into a pass
        prop_assert!(!strict.judge(lo).pass || loose.judge(lo).pass);
    }

    #[test]
    fn mute_weights_sum_to_one_and_favor_ig(drawn in 0.0f64..1.0, thresh in 0.0f64..=1.0) {
        let (a, b) = mute_weights(drawn, thresh);
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        if drawn < thresh {
            prop_assert!((a - (1.0 - drawn)).abs() < 1e-12);
        } else {
            prop_assert_eq!(a, drawn);
        }
    }

    #[test]
    fn mute_mix_stays_in_unit_range(l in prop::collection::vec(0.0f64..=1.0, 9), i in prop::collection::vec(0.0f64..=1.0, 9), drawn in 0.0f64..1.0) {
        let (a, b) = mute_weights(drawn, 0.5);
        let mix = mute_mix(&tensor(l.clone()), &tensor(i.clone()), a, b).unwrap();
        for (k, &m) in mix.data().iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&m));
            prop_assert!((m - (1.0 - b * l[k] - a * i[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize01_maps_onto_unit_range(v in vec_strategy(10)) {
        let t = tensor(v);
        let n = normalize01_tensor(&t);
        prop_assert!(n.data().iter().all(|x| (0.0..=1.0).contains(x)));
        if t.max() > t.min() {
            prop_assert_eq!(n.min(), 0.0);
            prop_assert_eq!(n.max(), 1.0);
            prop_assert_eq!(n.argmax(), t.argmax());
        } else {
            prop_assert!(n.data().iter().all(|&x| x == 0.5));
        }
    }

    #[test]
    fn percentile_is_bounded_and_monotone(v in prop::collection::vec(-5.0f64..5.0, 1..40), p in 0.0f64..=100.0, q in 0.0f64..=100.0) {
        let (lo, hi) = (p.min(q), p.max(q));
        let a = percentile(&v, lo).unwrap();
        let b = percentile(&v, hi).unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a <= b);
        prop_assert!(min <= a && b <= max);
        prop_assert_eq!(percentile(&v, 0.0).unwrap(), min);
        prop_assert_eq!(percentile(&v, 100.0).unwrap(), max);
    }

    #[test]
    fn speed_is_linear_in_misclassifications(m in 0usize..1000, k in 1usize..20, t in 0.001f64..100.0) {
        let one = speed(m, t).unwrap().value;
        let many = speed(m * k, t).unwrap().value;
        prop_assert!((many - one * k as f64).abs() <= 1e-9 * many.max(1.0));
        prop_assert!(speed(m, 0.0).is_err());
    }

    #[test]
    fn balance_reduces_to_single_weighted_term(s in 0.0f64..1.0, e in 0.0f64..1.0, v in 0.0f64..1.0) {
        let run = [BalanceRun { stealth: s, explain: e, speed: v }];
        let only = |stealth, explain, speed| BalanceWeights { stealth, explain, speed };
        prop_assert!((balance(&run, &only(1.0, 0.0, 0.0)).unwrap() - s).abs() < 1e-12);
        prop_assert!((balance(&run, &only(0.0, 1.0, 0.0)).unwrap() - e).abs() < 1e-12);
        prop_assert!((balance(&run, &only(0.0, 0.0, 1.0)).unwrap() - v).abs() < 1e-12);
        prop_assert!(balance(&run, &only(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn normalized_speeds_lie_in_unit_range(v in prop::collection::vec(0.0f64..1e4, 1..8)) {
        let n = normalize_speeds(&v);
        prop_assert_eq!(n.len(), v.len());
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_respect_the_box_and_the_mask(seed in any::<u64>(), eps in 0.01f64..0.5, steps in 1usize..6, random_start in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let model = build_mlp(&[1, 4, 4], &[8], 3, &mut rng, Precision::F64).unwrap();
        let x = rng_uniform(&mut rng, &[3, 1, 4, 4]);
        let mask = rng_uniform(&mut rng, &[3, 1, 4, 4]).map(|v| if v < 0.3 { 0.0 } else { v });
        let labels = [0, 1, 2];
        let cfg = AttackConfig { epsilon: eps, alpha: eps / 2.0, steps, random_start, seed };
        let runs = [
            (pgd(&model, &x, &labels, &cfg).unwrap(), None),
            (fgsm(&model, &x, &labels, eps).unwrap(), None),
            (masked_pgd(&model, &x, &labels, &mask, &cfg).unwrap(), Some(&mask)),
        ];
        for (adv, gate) in runs {
            for (j, (&a, &c)) in adv.x_adv.data().iter().zip(x.data()).enumerate() {
                prop_assert!((0.0..=1.0).contains(&a));
                prop_assert!((a - c).abs() <= eps + 1e-12);
                if let Some(m) = gate {
                    if m.data()[j] == 0.0 {
                        prop_assert_eq!(a, c);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn xunet_loss_terms_are_non_negative(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let classifier = build_mlp(&[1, 4, 4], &[6], 3, &mut rng, Precision::F64).unwrap();
        let xunet = build_xunet(&[1, 4, 4], &XUnetConfig { widths: [2, 2, 3], ..Default::default() }, &mut rng, Precision::F64).unwrap();
        let x = rng_uniform(&mut rng, &[2, 1, 4, 4]);
        let mix = rng_uniform(&mut rng, &[2, 1, 4, 4]);
        let cfg = TrainConfig { unroll: 2, ..Default::default() };
        let mut tape = Tape::new(Precision::F64);
        let params = xunet.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let mask = xunet.forward_on(&mut tape, &params, xv).unwrap();
        let (_, terms) = xunet_loss(&mut tape, &classifier, mask, &x, &[0, 1], &mix, &cfg).unwrap();
        prop_assert!(terms.fidelity >= 0.0 && terms.mix >= 0.0 && terms.accuracy >= 0.0);
        prop_assert!(terms.total >= 0.0 && terms.total.is_finite());
    }
}
