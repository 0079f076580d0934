use decaps_core::capsnet::{idr_route, route, VoteTensor};
use decaps_core::data::{generate, DatasetSpec, PixelBox, ShapeKind};
use decaps_core::metrics::{average_precision, extract_detections, iou, roc_auc, Detection, Level};
use decaps_core::training::{cosine, crop_mask_and_bbox, drop_patch, normalize_ham, TemplateBank};
use decaps_core::{RoutingMode, Tape, Tensor};
use proptest::prelude::*;

fn vote_set<'t>(tape: &'t Tape, grid: (usize, usize), dim: usize, data: &[Vec<Vec<f64>>]) -> Vec<Vec<VoteTensor<'t>>> {
    data.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| VoteTensor {
                    head: i,
                    class: j,
                    grid,
                    votes: tape.constant(Tensor::new(&[grid.0 * grid.1, dim], v.clone()).unwrap()),
                    coordinate_added: false,
                })
                .collect()
        })
        .collect()
}

/// `(heads, classes, h, w, dim, votes)`.
fn votes_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize, Vec<Vec<Vec<f64>>>)> {
    (1usize..=3, 1usize..=3, 1usize..=5, 1usize..=5, 2usize..=5).prop_flat_map(|(i, j, h, w, d)| {
        let one = prop::collection::vec(-2.0f64..2.0, h * w * d);
        let all = prop::collection::vec(prop::collection::vec(one, j), i);
        (Just(i), Just(j), Just(h), Just(w), Just(d), all)
    })
}

fn pbox() -> impl Strategy<Value = PixelBox> {
    (0usize..20, 0usize..20, 0usize..10, 0usize..10).prop_map(|(r, c, h, w)| PixelBox::new(r, c, r + h, c + w))
}

fn det(b: PixelBox, score: f64) -> Detection {
    Detection {
        class: 0,
        bbox: b,
        score,
        level: Level::Coarse,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(&v).unwrap()).softmax(0).unwrap().value();
        prop_assert!(s.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn routing_outputs_are_finite_and_normalized((i, j, h, w, d, data) in votes_strategy(), n_iter in 1usize..4) {
        let tape = Tape::new();
        let votes = vote_set(&tape, (h, w), d, &data);
        for mode in [RoutingMode::Idr, RoutingMode::Baseline] {
            let r = route(&votes, n_iter, mode).unwrap();
            prop_assert!(r.score_values().iter().all(|s| s.is_finite() && (0.0..1.0).contains(s)));
            prop_assert!(r.hams.data().iter().all(|a| a.is_finite() && *a >= 0.0));
            for it in &r.history {
                for hi in 0..i {
                    for cj in 0..j {
                        let k = (hi * j + cj) * h * w;
                        let slice = &it.data()[k..k + h * w];
                        if mode == RoutingMode::Idr {
                            prop_assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        }
                    }
                }
                if mode == RoutingMode::Baseline {
                    for hi in 0..i {
                        for p in 0..h * w {
                            let total: f64 = (0..j).map(|cj| it.data()[(hi * j + cj) * h * w + p]).sum();
                            prop_assert!((total - 1.0).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn routing_is_equivariant_to_position_shuffles((i, j, h, w, d, data) in votes_strategy(), shift in 0usize..25) {
        let n = h * w;
        let perm: Vec<usize> = (0..n).map(|p| (p + shift) % n).collect();
        let permuted: Vec<Vec<Vec<f64>>> = data
            .iter()
            .map(|row| row.iter().map(|v| perm.iter().flat_map(|&p| v[p * d..(p + 1) * d].to_vec()).collect()).collect())
            .collect();
        let tape = Tape::new();
        let a = idr_route(&vote_set(&tape, (h, w), d, &data), 3).unwrap();
        let b = idr_route(&vote_set(&tape, (h, w), d, &permuted), 3).unwrap();
        for (x, y) in a.score_values().iter().zip(b.score_values()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for hi in 0..i {
            for cj in 0..j {
                let base = (hi * j + cj) * n;
                for (q, &p) in perm.iter().enumerate() {
                    prop_assert!((a.routing.data()[base + p] - b.routing.data()[base + q]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scores in prop::collection::vec(-3.0f64..3.0, 4..60),
        seed in any::<u64>(),
    ) {
        let labels: Vec<u8> = (0..scores.len()).map(|k| ((seed >> (k % 64)) & 1) as u8).collect();
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 5.0).collect();
        prop_assert!((a - roc_auc(&warped, &labels).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in pbox(), b in pbox()) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
        prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
    }

    #[test]
    fn ap_does_not_rise_with_threshold(
        groups in prop::collection::vec((prop::collection::vec((pbox(), 0.0f64..1.0), 0..4), prop::collection::vec(pbox(), 0..4)), 1..6),
    ) {
        let groups: Vec<(Vec<Detection>, Vec<PixelBox>)> = groups
            .into_iter()
            .map(|(p, t)| (p.into_iter().map(|(b, s)| det(b, s)).collect(), t))
            .collect();
        let aps: Vec<f64> = [0.3, 0.4, 0.5, 0.6].iter().map(|&t| average_precision(&groups, t)).collect();
        prop_assert!(aps.windows(2).all(|w| w[0] >= w[1]), "{:?}", aps);
    }

    #[test]
    fn detections_cover_above_threshold_cells(
        map in prop::collection::vec(0.0f64..1.0, 64),
        theta in 0.05f64..0.95,
    ) {
        let t = Tensor::new(&[8, 8], map).unwrap();
        let a = normalize_ham(&t);
        let dets = extract_detections(&t, 1, 0.9, theta, 4, 32, 32, Level::Coarse);
        prop_assert!(!dets.is_empty());
        for d in &dets {
            let hit = (0..64).any(|k| {
                a.data()[k] >= theta && d.bbox.contains((k / 8) * 4, (k % 8) * 4)
            });
            prop_assert!(hit, "{:?}", d.bbox);
        }
        let support = (0..64).filter(|&k| a.data()[k] >= theta).count();
        let covered = (0..64)
            .filter(|&k| a.data()[k] >= theta && dets.iter().any(|d| d.bbox.contains((k / 8) * 4, (k % 8) * 4)))
            .count();
        prop_assert_eq!(support, covered);
    }

    #[test]
    fn crop_and_drop_supports_coincide(map in prop::collection::vec(0.0f64..1.0, 16), theta in 0.05f64..0.95) {
        let a = normalize_ham(&Tensor::new(&[4, 4], map).unwrap());
        let (mask, _) = crop_mask_and_bbox(&a, theta);
        let ones = Tensor::new(&[1, 16, 16], vec![1.0; 256]).unwrap();
        let dropped = drop_patch(&ones, &a, theta);
        for p in 0..256 {
            let cell = (p / 16 / 4) * 4 + (p % 16) / 4;
            prop_assert_eq!(dropped.data()[p] == 0.0, mask.data()[cell] == 1.0);
        }
    }

    #[test]
    fn crop_box_covers_the_mask(map in prop::collection::vec(0.0f64..1.0, 30), theta in 0.0f64..1.0) {
        let a = normalize_ham(&Tensor::new(&[5, 6], map).unwrap());
        let (mask, b) = crop_mask_and_bbox(&a, theta);
        for k in 0..30 {
            if mask.data()[k] == 1.0 {
                prop_assert!(b.contains(k / 6, k % 6));
            }
        }
    }
}

#[test]
fn template_cosine_never_decreases() {
    let f = [0.3, -1.2, 0.5, 2.0];
    let mut bank = TemplateBank::new(1, 1, 4, 1e-2);
    bank.set(0, 0, &[-1.0, 0.4, 0.2, -0.1]);
    let mut last = cosine(bank.get(0, 0), &f);
    for _ in 0..2000 {
        bank.update(0, 0, &f);
        let c = cosine(bank.get(0, 0), &f);
        assert!(c >= last - 1e-15, "{c} < {last}");
        last = c;
    }
    assert!(last > 0.999, "{last}");
    let norm: f64 = bank.get(0, 0).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 2.0, "{norm}");
}

#[test]
fn generated_boxes_are_tight() {
    let spec = DatasetSpec {
        num_samples: 60,
        classes: ShapeKind::ALL.to_vec(),
        noise: 0.0,
        ..DatasetSpec::default()
    };
    for s in generate(&spec).unwrap() {
        let w = s.width();
        let on = |r: usize, c: usize| s.image.data()[r * w + c] > 0.5;
        for b in &s.boxes {
            let b = b.bbox;
            assert!((b.c0..=b.c1).any(|c| on(b.r0, c)) && (b.c0..=b.c1).any(|c| on(b.r1, c)));
            assert!((b.r0..=b.r1).any(|r| on(r, b.c0)) && (b.r0..=b.r1).any(|r| on(r, b.c1)));
        }
    }
}
