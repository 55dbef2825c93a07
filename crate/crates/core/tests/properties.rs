use litetrack::cost::count_macs;
use litetrack::head::{decode_box, BBox, ScoreMaps};
use litetrack::objective::{focal_loss, gaussian_target, giou, l1_box};
use litetrack::runtime::hanning2d;
use litetrack::tensor::{matmul, patchify, softmax_rows, unpatchify, MacCounter};
use litetrack::{ModelConfig, Tensor};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn matrix(rows: usize, cols: usize, scale: f32) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |v| Tensor::new([rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_are_distributions(t in (1usize..6, 1usize..40).prop_flat_map(|(r, c)| matrix(r, c, 50.0))) {
        let p = softmax_rows(&t).unwrap();
        for r in 0..p.rows() {
            let sum: f64 = p.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn patchify_round_trip_is_exact(ph in 1usize..4, pw in 1usize..4, p in 1usize..6, seed in any::<u32>()) {
        let (h, w) = (ph * p, pw * p);
        let img = Tensor::from_fn([3, h, w], |i| ((i as u32 ^ seed).wrapping_mul(2654435761) >> 8) as f32);
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[ph * pw, 3 * p * p]);
        prop_assert_eq!(unpatchify(&patches, 3, h, w, p).unwrap(), img);
    }

    #[test]
    fn giou_is_bounded_symmetric_and_maximal_on_identity(a in bbox(), b in bbox()) {
        let g = giou(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&g));
        prop_assert!((g - giou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        if a != b {
            prop_assert!(g < 1.0);
        }
        prop_assert!(l1_box(&a, &b) >= 0.0);
    }

    #[test]
    fn focal_loss_is_non_negative(s in 2usize..10, r in 0usize..10, c in 0usize..10, vals in prop::collection::vec(0.0f32..=1.0, 100)) {
        let target = gaussian_target((r % s, c % s), s, 1.0).unwrap();
        let pred = Tensor::new([s, s], vals[..s * s].to_vec()).unwrap();
        prop_assert!(focal_loss(&pred, &target, 2.0, 4.0).unwrap() >= 0.0);
    }

    #[test]
    fn hann_window_is_symmetric_and_bounded(s in 1usize..20) {
        let w = hanning2d(s);
        for i in 0..s {
            for j in 0..s {
                let v = w.get(&[i, j]);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v, w.get(&[j, i]));
                prop_assert!((v - w.get(&[s - 1 - i, j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoded_cell_maximizes_the_penalized_map(s in 1usize..9, vals in prop::collection::vec(0.0f32..1.0, 5 * 81)) {
        let n = s * s;
        let maps = ScoreMaps::new(
            Tensor::new([s, s], vals[..n].to_vec()).unwrap(),
            Tensor::new([2, s, s], vals[n..3 * n].to_vec()).unwrap(),
            Tensor::new([2, s, s], vals[3 * n..5 * n].to_vec()).unwrap(),
        ).unwrap();
        let pen = hanning2d(s);
        let d = decode_box(&maps, Some(&pen)).unwrap();
        let (r, c) = d.cell;
        prop_assert!(r < s && c < s);
        let best = maps.center.get(&[r, c]) * pen.get(&[r, c]);
        for i in 0..n {
            prop_assert!(maps.center.data()[i] * pen.data()[i] <= best + 1e-7);
        }
        prop_assert!((0.0..=1.0).contains(&d.bbox.cx) && (0.0..=1.0).contains(&d.bbox.cy));
    }

    #[test]
    fn mac_counts_are_additive_across_calls(m in 1usize..8, k in 1usize..8, n in 1usize..8) {
        let a = Tensor::full([m, k], 1.0);
        let b = Tensor::full([k, n], 1.0);
        let mut c1 = MacCounter::enabled();
        matmul(&a, &b, &mut c1).unwrap();
        let mut c2 = MacCounter::enabled();
        matmul(&a, &b, &mut c2).unwrap();
        c2.merge(&c1);
        prop_assert_eq!(c2.total(), 2 * (m * k * n) as u64);
    }

    #[test]
    fn macs_fall_as_layers_are_pruned(fe in 0usize..6, ai in 1usize..6, flag in any::<bool>()) {
        prop_assume!(fe + ai >= 2);
        let full = count_macs(&ModelConfig::toy(fe, ai), flag).total_macs;
        prop_assert!(count_macs(&ModelConfig::toy(fe, ai - 1), flag).total_macs < full);
        if fe > 0 {
            prop_assert!(count_macs(&ModelConfig::toy(fe - 1, ai), flag).total_macs < full);
        }
    }

    #[test]
    fn config_text_round_trips(fe in 0usize..5, ai in 0usize..5) {
        prop_assume!(fe + ai > 0);
        let c = ModelConfig::toy(fe, ai);
        prop_assert_eq!(ModelConfig::parse_kv(&c.to_kv_string()).unwrap(), c);
    }
}
