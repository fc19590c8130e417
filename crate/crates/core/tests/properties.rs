use dualview_core::losses::{ce_loss, masked_ce_loss};
use dualview_core::metrics::{dsc, hd, hd95, surface_distances};
use dualview_core::models::{CriticConfig, SegNetConfig};
use dualview_core::optim::CosineSchedule;
use dualview_core::pipeline::{prepare_sample, Sample, TrainConfig, Trainer};
use dualview_core::preprocess::{crop_or_pad, minmax_normalize, one_hot, PatchSpec};
use dualview_core::synth::{generate, PhantomSpec};
use dualview_core::volume::{LabelMask, ProbabilityMap};
use dualview_core::{Geometry, Volume};
use proptest::prelude::*;

fn shape() -> impl Strategy<Value = [usize; 3]> {
    [2usize..12, 2usize..12, 2usize..12]
}

fn simplex(voxels: usize, k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, voxels * k).prop_map(move |w| {
        let mut p = vec![0.0; voxels * k];
        for v in 0..voxels {
            let s: f64 = (0..k).map(|c| w[c * voxels + v]).sum();
            for c in 0..k {
                p[c * voxels + v] = w[c * voxels + v] / s;
            }
        }
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_hot_channels_sum_to_one(s in shape(), seed in any::<u64>()) {
        let n = s.iter().product::<usize>();
        let labels = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) >> 7) as u8 % 3).collect();
        let m = LabelMask::new("m", Geometry::new(s, [1.0; 3]).unwrap(), labels).unwrap();
        let h = one_hot(&m, 3).unwrap();
        for v in 0..n {
            let total: f32 = (0..3).map(|c| h.channel(c)[v]).sum();
            prop_assert_eq!(total, 1.0);
            prop_assert_eq!(h.channel(m.labels[v] as usize)[v], 1.0);
        }
    }

    #[test]
    fn crop_or_pad_hits_target_shape(
        s in [8usize..80, 8usize..80, 8usize..80],
        t in [prop::sample::select(vec![16usize, 32, 64]), prop::sample::select(vec![16usize, 32, 64]), prop::sample::select(vec![16usize, 32, 64])],
        threshold in 0.0f32..1.0,
    ) {
        let g = Geometry::new(s, [1.0; 3]).unwrap();
        let n = g.voxels();
        let v = Volume::new("v", g.clone(), (0..n).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let m = LabelMask::background("m", g);
        let spec = PatchSpec { target_shape: t, background_threshold: threshold };
        let (img, mask, window) = crop_or_pad(&v, Some(&m), &spec).unwrap();
        prop_assert_eq!(img.shape(), t);
        prop_assert_eq!(mask.unwrap().shape(), t);
        prop_assert_eq!(window.restore(&img.data, 0.0).len(), n);
    }

    #[test]
    fn normalization_is_idempotent(s in shape(), values in prop::collection::vec(-100.0f32..100.0, 2000)) {
        let n = s.iter().product::<usize>();
        let v = Volume::new("v", Geometry::new(s, [1.0; 3]).unwrap(), values[..n].to_vec()).unwrap();
        let once = minmax_normalize(&v, 0.0, 100.0).unwrap();
        let twice = minmax_normalize(&once, 0.0, 100.0).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-6);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn dsc_is_symmetric_and_bounded(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let ab = dsc(&a, &b).unwrap();
        prop_assert_eq!(ab, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn hd95_never_exceeds_hd(
        a in prop::collection::vec(any::<bool>(), 216),
        b in prop::collection::vec(any::<bool>(), 216),
        spacing in [0.3f64..3.0, 0.3f64..3.0, 0.3f64..3.0],
    ) {
        prop_assume!(a.iter().any(|&x| x) && b.iter().any(|&x| x));
        let (d1, d2) = surface_distances(&a, &b, [6; 3], spacing).unwrap();
        prop_assert!(hd95(&d1, &d2) <= hd(&d1, &d2));
    }

    #[test]
    fn ensemble_stays_on_simplex(p in simplex(20, 3), q in simplex(20, 3)) {
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let a = ProbabilityMap::new(3, [4, 5, 1], to32(&p)).unwrap();
        let b = ProbabilityMap::new(3, [4, 5, 1], to32(&q)).unwrap();
        let e = a.average(&b).unwrap();
        for v in 0..20 {
            let total: f32 = (0..3).map(|c| e.channel(c)[v]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            prop_assert!((0..3).all(|c| e.channel(c)[v] >= 0.0));
        }
    }

    #[test]
    fn cosine_schedule_matches_closed_form(base in 1e-5f64..1.0, epochs in 1usize..500) {
        let s = CosineSchedule::new(base, epochs);
        for e in 0..=epochs {
            let want = 0.5 * base * (1.0 + (std::f64::consts::PI * e as f64 / epochs as f64).cos());
            prop_assert!((s.lr(e) - want).abs() <= 1e-9);
        }
        prop_assert!(s.lr(epochs) <= s.lr(0));
    }

    #[test]
    fn masked_ce_with_full_confidence_is_summed_ce(p in simplex(27, 3), labels in prop::collection::vec(0usize..3, 27)) {
        let mut y = vec![0.0; 81];
        for (v, &c) in labels.iter().enumerate() {
            y[c * 27 + v] = 1.0;
        }
        let masked = masked_ce_loss(&p, &y, &[1.0; 27], 0.2, 3).unwrap();
        let mean = ce_loss(&p, &y, 3).unwrap();
        prop_assert!((masked - 27.0 * mean).abs() <= 1e-9 * masked.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn phantom_sides_mirror(
        a in [2.0f64..4.0, 2.0f64..4.0, 2.0f64..4.0],
        cx in 5.0f64..8.0,
        seed in any::<u64>(),
    ) {
        let spec = PhantomSpec {
            shape: [20, 16, 16],
            left_center: [cx, 7.5, 7.5],
            semi_axes: a,
            noise_std: 0.0,
            smoothing: 0.0,
            left_contrast: 0.9,
            right_contrast: 0.9,
            seed,
            ..PhantomSpec::default()
        };
        prop_assume!(spec.validate().is_ok());
        let (img, mask) = generate("p", &spec).unwrap();
        let [n0, n1, n2] = mask.shape();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let here = (i * n1 + j) * n2 + k;
                    let there = ((n0 - 1 - i) * n1 + j) * n2 + k;
                    let swapped = match mask.labels[there] { 1 => 2, 2 => 1, l => l };
                    prop_assert_eq!(mask.labels[here], swapped);
                    prop_assert!((img.data[here] - img.data[there]).abs() <= 1e-6);
                }
            }
        }
        prop_assert!(mask.count(1) > 0);
        prop_assert_eq!(mask.count(1), mask.count(2));
    }
}

fn tiny_batch(cfg: &TrainConfig, seed: u64) -> Vec<Sample> {
    let filter = cfg.filter().unwrap();
    (0..2)
        .map(|i| {
            let spec = PhantomSpec {
                shape: [16; 3],
                left_center: [3.5, 7.5, 7.5],
                semi_axes: [2.5, 3.0, 3.0],
                seed: seed + i,
                ..PhantomSpec::default()
            };
            let (v, m) = generate("t", &spec).unwrap();
            prepare_sample(&v, &m, cfg, &filter).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn phases_only_touch_their_own_parameters(seed in 0u64..1000) {
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 1,
            seed,
            patch: PatchSpec { target_shape: [16; 3], background_threshold: 0.5 },
            network: SegNetConfig { base_width: 2, ..SegNetConfig::default() },
            critic: CriticConfig { base_width: 2, ..CriticConfig::default() },
            ..TrainConfig::default()
        };
        let data = tiny_batch(&cfg, seed);
        let batch: Vec<&Sample> = data.iter().collect();
        let mut t = Trainer::new(cfg).unwrap();

        let critic_before = t.model.critic.params.clone();
        let other_view = t.model.nets[1].params.clone();
        let (_, p0) = t.seg_step(0, &batch).unwrap();
        prop_assert_eq!(&t.model.critic.params, &critic_before);
        prop_assert_eq!(&t.model.nets[1].params, &other_view);

        let (_, p1) = t.seg_step(1, &batch).unwrap();
        let nets_before = [t.model.nets[0].params.clone(), t.model.nets[1].params.clone()];
        t.critic_step(&batch, [&p0, &p1]).unwrap();
        prop_assert_eq!(&t.model.nets[0].params, &nets_before[0]);
        prop_assert_eq!(&t.model.nets[1].params, &nets_before[1]);
        prop_assert_ne!(&t.model.critic.params, &critic_before);
    }
}
