use proptest::prelude::*;

use privad::baselines::{ToyBoxProvider, Transform};
use privad::data::{sample_clip, sample_triplet, AugmentationParams, ClipSpec, NegativeDistance, Video};
use privad::evaluation::{roc_auc, segments_to_frames};
use privad::imgproc::Rect;
use privad::losses::{
    budget_nt_xent, cross_entropy, l1_reconstruction, magnitude_contrastive, sigmoid_ce, sparsity,
    temporal_smoothness, triplet_distinct,
};
use privad::models::{AnomalyHead, AnomalyHeadConfig};
use privad::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp_video(t: usize) -> Video {
    let data = (0..t * 3 * 2 * 2).map(|i| (i / 12) as f32 / t as f32).collect();
    Video::new("v", Tensor::from_vec(&[t, 3, 2, 2], data), 0).unwrap()
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((-10.0f64..10.0, any::<bool>()), 2..80)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_ignores_strictly_increasing_maps((s, y) in scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert_eq!(roc_auc(&mapped, &y).unwrap(), roc_auc(&s, &y).unwrap());
    }

    #[test]
    fn auc_of_negation_is_complement((s, y) in scored()) {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&s, &y).unwrap() + roc_auc(&neg, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frame_expansion_keeps_every_segment_score(
        seg in prop::collection::vec(0.0f64..1.0, 1..20),
        clip_len in 1usize..20,
        tail_frac in 0.0f64..1.0,
    ) {
        let tail = (tail_frac * clip_len as f64) as usize % clip_len;
        let frames = seg.len() * clip_len + tail;
        let f = segments_to_frames(&seg, clip_len, frames).unwrap();
        prop_assert_eq!(f.len(), frames);
        for (i, v) in seg.iter().enumerate() {
            let chunk = &f[i * clip_len..(i + 1) * clip_len];
            prop_assert!(chunk.iter().all(|x| x.to_bits() == v.to_bits()));
        }
        let last = *seg.last().unwrap();
        prop_assert!(f[seg.len() * clip_len..].iter().all(|x| x.to_bits() == last.to_bits()));
    }

    #[test]
    fn clip_sampling_stays_in_range(t in 1usize..80, start in 0usize..80, len in 1usize..20, skip in 1usize..4) {
        let v = ramp_video(t);
        match sample_clip(&v, start, len, skip) {
            Ok(c) => {
                prop_assert!(start + (len - 1) * skip < t);
                prop_assert_eq!(c.frames.shape()[0], len);
                for i in 0..len {
                    prop_assert_eq!(c.frames.index_axis0(i), v.frame(start + i * skip));
                }
            }
            Err(_) => prop_assert!(start + (len - 1) * skip >= t),
        }
    }

    #[test]
    fn transforms_keep_shape_and_range(
        data in prop::collection::vec(0.0f32..=1.0, 2 * 3 * 8 * 8),
        bx in 0usize..8, by in 0usize..8, bw in 0usize..9, bh in 0usize..9,
    ) {
        let x = Tensor::from_vec(&[2, 3, 8, 8], data);
        let boxes = ToyBoxProvider::constant(vec![Rect::new(bx, by, bw, bh)]);
        for t in Transform::ALL {
            let y = t.apply(&x, &boxes).unwrap();
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&t.apply(&x, &boxes).unwrap(), &y);
        }
        let once = Transform::Blacken.apply(&x, &boxes).unwrap();
        prop_assert_eq!(Transform::Blacken.apply(&once, &boxes).unwrap(), once);
    }

    #[test]
    fn triplet_is_translation_invariant(
        v in prop::collection::vec(-3.0f64..3.0, 18),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
        margin in 0.1f64..3.0,
    ) {
        let g = Graph::<f64>::new();
        let mk = |k: usize, s: &[f64]| {
            let rows: Vec<f64> = (0..6).map(|i| v[k * 6 + i] + s[i % 3]).collect();
            g.constant(Tensor::from_vec(&[2, 3], rows))
        };
        let zero = [0.0; 3];
        let base = g.item(triplet_distinct(&g, mk(0, &zero), mk(1, &zero), mk(2, &zero), margin).unwrap());
        let moved = g.item(triplet_distinct(&g, mk(0, &shift), mk(1, &shift), mk(2, &shift), margin).unwrap());
        prop_assert!((base - moved).abs() < 1e-9);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn bounded_losses_are_non_negative(v in prop::collection::vec(0.0f64..1.0, 12), w in prop::collection::vec(0.0f64..1.0, 12)) {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[3, 4], v.clone()));
        let b = g.constant(Tensor::from_vec(&[3, 4], w.clone()));
        let img_a = g.constant(Tensor::from_vec(&[1, 3, 2, 2], v.clone()));
        let img_b = g.constant(Tensor::from_vec(&[1, 3, 2, 2], w.clone()));
        prop_assert!(g.item(l1_reconstruction(&g, img_a, img_b).unwrap()) >= 0.0);
        prop_assert!(g.item(cross_entropy(&g, a, &[0, 1, 3]).unwrap()) >= 0.0);
        prop_assert!(g.item(temporal_smoothness(&g, a).unwrap()) >= 0.0);
        prop_assert!(g.item(sparsity(&g, a).unwrap()) >= 0.0);
        let p = g.constant(Tensor::from_vec(&[12], v.clone()));
        let labels: Vec<f64> = w.iter().map(|x| x.round()).collect();
        prop_assert!(g.item(sigmoid_ce(&g, p, &labels).unwrap()) >= 0.0);
        let (mn, ma) = (g.constant(Tensor::from_vec(&[4], v[..4].to_vec())), g.constant(Tensor::from_vec(&[4], w[..4].to_vec())));
        prop_assert!(g.item(magnitude_contrastive(&g, mn, ma, 1.0).unwrap()) >= 0.0);
        prop_assert!(g.item(triplet_distinct(&g, a, b, a, 1.0).unwrap()) >= 0.0);
    }

    #[test]
    fn nt_xent_falls_as_a_positive_pair_aligns(
        v in prop::collection::vec(-1.0f64..1.0, 12),
        t in 0.05f64..1.0,
        r in 0.2f64..2.0,
        theta in (0.05f64..3.0, 0.05f64..3.0),
    ) {
        // Rows 1 and 2 of both views live in the first two dimensions; the
        // first pair also shares a private plane, so turning the first
        // positive within that plane changes only its similarity to its
        // anchor.
        let (near, far) = if theta.0 < theta.1 { theta } else { (theta.1, theta.0) };
        prop_assume!(far - near > 1e-3);
        let views = |th: f64| {
            let mut a = vec![v[0], v[1], r, 0.0];
            let mut b = vec![v[2], v[3], r * th.cos(), r * th.sin()];
            for i in 0..2 {
                a.extend([v[4 + 4 * i], v[5 + 4 * i], 0.0, 0.0]);
                b.extend([v[6 + 4 * i], v[7 + 4 * i], 0.0, 0.0]);
            }
            (a, b)
        };
        let loss = |th: f64| {
            let (a, b) = views(th);
            let g = Graph::<f64>::new();
            let za = g.constant(Tensor::from_vec(&[3, 4], a));
            let zb = g.constant(Tensor::from_vec(&[3, 4], b));
            g.item(budget_nt_xent(&g, za, zb, t).unwrap())
        };
        prop_assume!(views(near).0.chunks(4).chain(views(near).1.chunks(4)).all(|row| row.iter().map(|x| x * x).sum::<f64>() > 1e-4));
        prop_assert!(loss(near) < loss(far));
    }

    #[test]
    fn anomaly_scores_stay_in_unit_interval(feats in prop::collection::vec(-1e3f32..1e3, 4 * 6)) {
        let head = AnomalyHead::<f32>::new(
            AnomalyHeadConfig { feature_dim: 6, hidden: 5, ..AnomalyHeadConfig::default() },
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let (scores, mags) = head.score_segments(&Tensor::from_vec(&[4, 6], feats)).unwrap();
        prop_assert_eq!(scores.len(), 4);
        prop_assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        prop_assert!(mags.iter().all(|m| m.is_finite() && *m >= 0.0));
    }
}

#[test]
fn ten_thousand_triplets_keep_their_invariants() {
    let v = ramp_video(80);
    let spec = ClipSpec::new(16, 2, 2, 2);
    let id = AugmentationParams::identity(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let max_start = 80 - spec.span();
    for k in 0..10_000 {
        let anchor_t = k % (max_start + 1);
        let tr = sample_triplet(&v, anchor_t, NegativeDistance::Random, (&id, &id), spec, &mut rng).unwrap();
        assert_eq!(tr.anchor.start_index, anchor_t);
        assert_eq!(tr.positive.start_index, tr.anchor.start_index);
        assert_eq!(tr.positive.source_id, tr.anchor.source_id);
        assert_eq!(tr.negative.source_id, tr.anchor.source_id);
        assert_ne!(tr.negative.start_index, tr.anchor.start_index);
        assert!(tr.negative.start_index <= max_start);
    }
}

#[test]
fn a_160_frame_video_gives_ten_segments() {
    let f = segments_to_frames(&[0.5; 10], 16, 160).unwrap();
    assert_eq!(f.len(), 160);
    assert!(segments_to_frames(&[0.5; 9], 16, 160).is_err());
}
