use bws_core::maps::{BinaryMask, LabelMap};
use bws_core::metrics::*;
use bws_tensor::Rng;
use proptest::prelude::*;

mod common;
use common::metric::{brute_boundary, brute_directed, expected, grid, random_mask, CASES};

#[test]
fn hand_counted_four_by_four_cases() {
    for (i, (gt, pred, [tp, fp, fn_, tn])) in CASES.iter().enumerate() {
        let c = confusion(&grid(*pred), &grid(*gt), 2).unwrap();
        assert_eq!((c.tp[1], c.fp[1], c.fn_[1], c.tn[1]), (*tp, *fp, *fn_, *tn), "case {i}");
        assert_eq!((c.tp[0], c.fp[0], c.fn_[0], c.tn[0]), (*tn, *fn_, *fp, *tp), "case {i} background");
        let got = [dice(&c, 1), jaccard(&c, 1), sensitivity(&c, 1), specificity(&c, 1)].map(|r| (r.value, r.undefined));
        let want = [
            expected(2 * tp, 2 * tp + fp + fn_, 100.0),
            expected(*tp, tp + fp + fn_, 100.0),
            expected(*tp, tp + fn_, 100.0),
            expected(*tn, tn + fp, 100.0),
        ];
        assert_eq!(got, want, "case {i}");
    }
    let c = confusion(&grid(CASES[5].1), &grid(CASES[5].0), 2).unwrap();
    assert_eq!(dice(&c, 1).value, 25.0);
    assert_eq!(jaccard(&c, 1).value, 100.0 / 7.0);
}

#[test]
fn hd95_matches_all_pairs_oracle() {
    let mut rng = Rng::new(21);
    for i in 0..20 {
        let (h, w) = (rng.range_inclusive(8, 24), rng.range_inclusive(8, 24));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let s = if i % 2 == 0 { (1.0, 1.0) } else { (rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0)) };
        let (ba, bb) = (brute_boundary(&a), brute_boundary(&b));
        assert!(ba.len() <= 200 && bb.len() <= 200);
        let want = brute_directed(&ba, &bb, s).max(brute_directed(&bb, &ba, s));
        let got = hd95(&a, &b, s).unwrap().unwrap();
        assert!((got - want).abs() <= 1e-9, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn hd95_examples() {
    let mut a = BinaryMask::empty(10, 10);
    let mut b = BinaryMask::empty(10, 10);
    a.set(2, 1, true);
    b.set(2, 6, true);
    assert_eq!(hd95(&a, &b, (1.0, 1.0)).unwrap(), Some(5.0));
    assert_eq!(hd95(&a, &a, (1.0, 1.0)).unwrap(), Some(0.0));
    assert_eq!(hd95(&a, &BinaryMask::empty(10, 10), (1.0, 1.0)).unwrap(), None);
    let mut d: Vec<f64> = std::iter::repeat(1.0).take(100).chain([50.0]).collect();
    assert_eq!(percentile(&mut d, 0.95), 1.0);
}

fn arb_pair() -> impl Strategy<Value = (LabelMap, LabelMap, usize)> {
    (2usize..5, 1usize..10, 1usize..10).prop_flat_map(|(c, h, w)| {
        (proptest::collection::vec(0..c as u8, h * w), proptest::collection::vec(0..c as u8, h * w)).prop_map(move |(a, b)| {
            (LabelMap::from_vec(h, w, a).unwrap(), LabelMap::from_vec(h, w, b).unwrap(), c)
        })
    })
}

proptest! {
    #[test]
    fn rates_are_bounded_and_dice_dominates_jaccard((pred, gt, c) in arb_pair()) {
        let counts = confusion(&pred, &gt, c).unwrap();
        for m in class_metrics(&counts) {
            let k = m.class;
            prop_assert_eq!(counts.total(k), (pred.len()) as u64);
            for r in [m.dice, m.jaccard, m.sensitivity, m.specificity] {
                prop_assert!((0.0..=100.0).contains(&r.value));
            }
            if counts.tp[k] > 0 {
                prop_assert!(m.dice.value >= m.jaccard.value);
                let j = m.jaccard.value / 100.0;
                prop_assert!((m.dice.value - 200.0 * j / (1.0 + j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn metrics_ignore_pixel_order((pred, gt, c) in arb_pair(), seed in any::<u64>()) {
        let mut perm: Vec<usize> = (0..pred.len()).collect();
        Rng::new(seed).shuffle(&mut perm);
        let shuffle = |m: &LabelMap| LabelMap::from_vec(1, m.len(), perm.iter().map(|&i| m.data[i]).collect()).unwrap();
        prop_assert_eq!(confusion(&pred, &gt, c).unwrap(), confusion(&shuffle(&pred), &shuffle(&gt), c).unwrap());
    }

    #[test]
    fn hd95_is_symmetric(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (a, b) = (random_mask(&mut rng, 12, 15), random_mask(&mut rng, 12, 15));
        prop_assert_eq!(hd95(&a, &b, (1.0, 1.5)).unwrap(), hd95(&b, &a, (1.0, 1.5)).unwrap());
    }
}
