use diffseg::merger::run_merging_traced;
use diffseg::{
    aggregate, confusion, generate_anchor_grid, hungarian_match, kl_distance, nms_assign,
    read_stack, score, upsample_map, write_stack, AggregatedTensor, AttentionStack, LabelMap,
    LayerTensor, MergeConfig, ProposalList, WeightScheme,
};
use proptest::prelude::*;

fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, n).prop_map(normalize)
}

fn distribution_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..64).prop_flat_map(|n| (distribution(n), distribution(n)))
}

fn layer(w: usize) -> impl Strategy<Value = LayerTensor<f64>> {
    let n = w * w;
    prop::collection::vec(distribution(n), n)
        .prop_map(move |maps| LayerTensor::new(w, maps.concat()).unwrap())
}

/// Stacks with `w_max = 4` plus an optional coarser layer.
fn small_stack() -> impl Strategy<Value = AttentionStack<f64>> {
    (layer(4), prop::option::of(layer(2)), prop::option::of(layer(1))).prop_map(|(top, mid, low)| {
        let mut layers = vec![top];
        layers.extend(mid);
        layers.extend(low);
        AttentionStack {
            layers,
            image_height: 32,
            image_width: 32,
            time_step: 300,
            source_id: "prop".into(),
        }
    })
}

fn field(w: usize) -> impl Strategy<Value = AggregatedTensor<f64>> {
    let n = w * w;
    prop::collection::vec(distribution(n), n)
        .prop_map(move |maps| AggregatedTensor::new(w, maps.concat()).unwrap())
}

fn label_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            prop::collection::vec(0u32..5, n),
            prop::collection::vec(0u32..4, n),
        )
            .prop_map(move |(p, g)| {
                (LabelMap::new(h, w, p).unwrap(), LabelMap::new(h, w, g).unwrap())
            })
    })
}

fn brute_force_best(counts: &[Vec<u64>]) -> u64 {
    fn go(counts: &[Vec<u64>], row: usize, used: &mut [bool]) -> u64 {
        if row == counts.len() {
            return 0;
        }
        let mut best = if counts.len() > used.len() {
            go(counts, row + 1, used)
        } else {
            0
        };
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(counts[row][c] + go(counts, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(counts, 0, &mut vec![false; counts[0].len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stack_round_trip_is_bit_exact(stack in small_stack()) {
        let stack = stack.cast::<f32>();
        let dir = tempfile::tempdir().unwrap();
        write_stack(&stack, dir.path()).unwrap();
        prop_assert_eq!(read_stack(dir.path()).unwrap(), stack);
    }

    #[test]
    fn aggregated_maps_are_distributions(stack in small_stack()) {
        let f = aggregate(&stack, &WeightScheme::Proportional).unwrap();
        prop_assert_eq!(f.resolution, 4);
        for map in f.maps() {
            prop_assert!(map.iter().all(|&v| v >= 0.0));
            prop_assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn upsampling_preserves_unit_mass(map in distribution(4), out in 2usize..12) {
        let up = upsample_map(&map, 2, out).unwrap();
        prop_assert_eq!(up.len(), out * out);
        prop_assert!(up.iter().all(|&v| v >= 0.0));
        prop_assert!((up.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_a_symmetric_premetric((p, q) in distribution_pair()) {
        let d = kl_distance(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, kl_distance(&q, &p).unwrap());
        prop_assert_eq!(kl_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn merging_never_grows_the_list(f in field(8), tau in 0.001f64..3.0, iterations in 1usize..6) {
        let grid = generate_anchor_grid(4, 8).unwrap();
        let config = MergeConfig::new(tau, iterations).unwrap();
        let (list, counts) = run_merging_traced(&f, &grid, &config).unwrap();
        prop_assert_eq!(counts[0], 16);
        prop_assert_eq!(counts.len(), iterations);
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(*counts.last().unwrap(), list.len());
        for map in &list.maps {
            prop_assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_matches_brute_force(
        counts in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec(prop::collection::vec(0u64..50, c), r)
        })
    ) {
        let pairs = hungarian_match(&counts);
        let total: u64 = pairs.iter().map(|&(r, c)| counts[r][c]).sum();
        prop_assert_eq!(total, brute_force_best(&counts));
    }

    #[test]
    fn scores_ignore_prediction_label_names((pred, gt) in label_pair(), shift in 1u32..100) {
        let renamed = LabelMap::new(
            pred.height,
            pred.width,
            pred.data.iter().map(|&l| (l * 7 + shift) % 1000).collect(),
        ).unwrap();
        let a = confusion(&pred, &gt, None).unwrap();
        let b = confusion(&renamed, &gt, None).unwrap();
        let sa = score(&a, &hungarian_match(&a.counts));
        let sb = score(&b, &hungarian_match(&b.counts));
        prop_assert!((sa.acc - sb.acc).abs() < 1e-12);
        prop_assert!((sa.miou - sb.miou).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&sa.acc));
        prop_assert!((0.0..=1.0).contains(&sa.miou));
    }

    #[test]
    fn nms_partition_is_order_free(
        maps in prop::collection::vec(distribution(16), 1..6),
        rotate in 0usize..6,
        out in 4usize..10,
    ) {
        let forward = ProposalList { resolution: 4, maps: maps.clone() };
        let mut rotated = maps;
        let len = rotated.len();
        rotated.rotate_left(rotate % len);
        let rotated = ProposalList { resolution: 4, maps: rotated };
        let a = nms_assign(&forward, out, out).unwrap();
        let b = nms_assign(&rotated, out, out).unwrap();
        // Continuous random maps make exact argmax ties vanishingly unlikely.
        prop_assert_eq!(a.labels.compact().0, b.labels.compact().0);
        prop_assert_eq!(a.num_labels, b.num_labels);
        prop_assert_eq!(a.labels.data.len(), out * out);
    }

    #[test]
    fn native_size_nms_is_plain_argmax(maps in prop::collection::vec(distribution(16), 1..6)) {
        let list = ProposalList { resolution: 4, maps: maps.clone() };
        let mask = nms_assign(&list, 4, 4).unwrap();
        for cell in 0..16 {
            let mut best = 0;
            for (k, m) in maps.iter().enumerate() {
                if m[cell] > maps[best][cell] {
                    best = k;
                }
            }
            prop_assert_eq!(mask.proposal_index[mask.labels.data[cell] as usize] as usize, best);
        }
    }
}
