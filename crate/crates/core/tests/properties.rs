use hyperprune::checkpoint;
use hyperprune::compactor::{select_channels, Compactor, Placement};
use hyperprune::config::Config;
use hyperprune::metrics::{psnr_from_mse, ImageMetrics, RDReport};
use hyperprune::ops::{pixel_shuffle, pixel_unshuffle};
use hyperprune::prune::manual_uniform_prune;
use hyperprune::tensor::{Shape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn unshuffle_inverts_shuffle(n in 1usize..3, c in 1usize..4, alpha in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let len = n * c * alpha * alpha * h * w;
        let data: Vec<f64> = (0..len).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64).collect();
        let t = Tensor::from_vec(Shape::new(n, c * alpha * alpha, h, w), data).unwrap();
        let s = pixel_shuffle(&t, alpha).unwrap();
        prop_assert_eq!(s.shape(), Shape::new(n, c, h * alpha, w * alpha));
        prop_assert_eq!(pixel_unshuffle(&s, alpha).unwrap(), t);
    }

    #[test]
    fn psnr_decreases_with_mse(a in 1e-6f64..1e5, b in 1e-6f64..1e5) {
        prop_assume!(a < b);
        prop_assert!(psnr_from_mse(a) >= psnr_from_mse(b));
        prop_assert!(psnr_from_mse(a).is_finite());
    }

    #[test]
    fn selection_keeps_at_least_min_keep(norms in prop::collection::vec(0.0f64..2.0, 1..12), threshold in 0.0f64..2.0, min_keep in 0usize..6) {
        let c = norms.len();
        let mut comp = Compactor::<f64>::init_identity(c, Placement::AfterConv).unwrap();
        for (j, v) in norms.iter().enumerate() {
            *comp.r.at_mut(j, j, 0, 0) = *v;
        }
        let mask = select_channels(&comp, threshold, min_keep);
        let kept = mask.iter().filter(|&&k| k).count();
        prop_assert!(kept >= min_keep.max(1).min(c));
        let above = norms.iter().filter(|&&v| v >= threshold).count();
        prop_assert_eq!(kept, above.max(min_keep.max(1).min(c)));
    }

    #[test]
    fn report_csv_is_stable_after_one_pass(rows in prop::collection::vec((0.0f64..60.0, 0.0f64..3.0, 0.0f64..0.5), 1..5), total in 1usize..10_000_000) {
        let report = RDReport {
            model: "m".into(),
            images: rows
                .iter()
                .enumerate()
                .map(|(i, &(p, y, z))| ImageMetrics { name: format!("i{i}"), psnr_db: p, bpp_y: y, bpp_z: z, mse: 0.0 })
                .collect(),
            params_total: total,
            params_hyper: total / 2,
        };
        let once = RDReport::from_csv(&report.to_csv()).unwrap().remove(0).to_csv();
        let twice = RDReport::from_csv(&once).unwrap().remove(0).to_csv();
        prop_assert_eq!(once, twice);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), ratio in 0.2f64..1.0) {
        let cfg = Config { n: 6, m: 8, seed, ..Config::default() };
        let mut net = cfg.build::<f64>().unwrap();
        manual_uniform_prune(&mut net, ratio).unwrap();
        let bytes = checkpoint::to_bytes(&net).unwrap();
        let back = checkpoint::from_bytes::<f64>(&bytes, &cfg).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
        prop_assert_eq!(back.specs(), net.specs());
    }
}
