use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use octoseq::checkpoint::{from_bytes, to_bytes};
use octoseq::embedding::embed_sequence;
use octoseq::grid::VoxelGrid;
use octoseq::metrics::{coverage, mmd, IouDistance};
use octoseq::model::{Model, ModelConfig};
use octoseq::octree::{build_octree, octree_to_voxels, CellValue};
use octoseq::sampler::temperature_scale;
use octoseq::scheme::{expected_latent_count, plan_groups, CompressionScheme};
use octoseq::sequence::{axis_id, delinearize, linearize, TokenSequence};
use octoseq::training::{depth_weights, learning_rate, AugmentConfig, AxisWarp};

/// Blocky grid: a background with a few aligned cubes and some noise, so
/// trees of every depth profile occur.
fn grid_from(depth: u32, seed: u64) -> VoxelGrid {
    let res = 1u32 << depth;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = VoxelGrid::filled(res, rng.gen_bool(0.3)).unwrap();
    for _ in 0..rng.gen_range(0..6) {
        let size = 1 << rng.gen_range(0..=depth);
        let o = [0; 3].map(|_| rng.gen_range(0..=res - size));
        g.fill_cube(o, size, rng.gen());
    }
    let noise = rng.gen_range(0.0..0.05);
    for i in 0..g.len() {
        if rng.gen_bool(noise) {
            let v = g.get_index(i);
            g.set_index(i, !v);
        }
    }
    g
}

fn scheme_text() -> impl Strategy<Value = String> {
    let entry = |max_a: u32| (0..=max_a, prop::sample::select(vec![1usize, 2, 4, 8])).prop_map(|(a, b)| format!("{a}/{b}"));
    (entry(0), entry(1), entry(2), entry(3), 1usize..=4).prop_map(|(e1, e2, e3, e4, n)| {
        [e1, e2, e3, e4][..n].join(",")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn voxel_round_trip(depth in 1u32..=5, seed: u64) {
        let g = grid_from(depth, seed);
        let tree = build_octree(&g).unwrap();
        prop_assert_eq!(octree_to_voxels(&tree, g.resolution()).unwrap(), g);
    }

    #[test]
    fn sequence_round_trip(depth in 1u32..=5, seed: u64) {
        let tree = build_octree(&grid_from(depth, seed)).unwrap();
        let seq = linearize(&tree);
        prop_assert_eq!(&delinearize(&seq.values()).unwrap(), &tree);
        prop_assert_eq!(TokenSequence::from_text(&seq.to_text()).unwrap(), seq);
    }

    #[test]
    fn sequence_counting(depth in 1u32..=5, seed: u64) {
        let seq = linearize(&build_octree(&grid_from(depth, seed)).unwrap());
        let max = seq.max_depth();
        prop_assert!(seq.tokens.windows(2).all(|w| w[0].depth <= w[1].depth));
        prop_assert_eq!(seq.tokens.iter().filter(|t| t.depth == 1).count(), 8);
        for d in 1..max {
            let mixed = seq.tokens.iter().filter(|t| t.depth == d && t.value.is_mixed()).count();
            let next = seq.tokens.iter().filter(|t| t.depth == d + 1).count();
            prop_assert_eq!(next, 8 * mixed);
        }
        prop_assert!(seq.tokens.iter().all(|t| t.depth < max || t.value != CellValue::Mixed));
        prop_assert!(max <= depth);
    }

    #[test]
    fn octv_round_trip(depth in 1u32..=5, seed: u64) {
        let g = grid_from(depth, seed);
        prop_assert_eq!(VoxelGrid::from_octv_bytes(&g.to_octv_bytes()).unwrap(), g);
    }

    #[test]
    fn spatial_ids_injective(d1 in 1u32..=8, i1: u32, d2 in 1u32..=8, i2: u32) {
        let (i1, i2) = (i1 % (1 << d1), i2 % (1 << d2));
        prop_assert_eq!(axis_id(d1, i1) == axis_id(d2, i2), (d1, i1) == (d2, i2));
    }

    #[test]
    fn groups_partition_tokens(depth in 1u32..=5, seed: u64, s in scheme_text()) {
        let scheme = CompressionScheme::parse(&s).unwrap();
        let tree = build_octree(&grid_from(depth, seed)).unwrap();
        let seq = linearize(&tree);
        let layout = plan_groups(&seq, &scheme);
        let mut owner = vec![0usize; seq.len()];
        for grp in &layout.groups {
            for i in grp.generated() {
                owner[i] += 1;
                prop_assert_eq!(seq.tokens[i].depth, grp.depth);
            }
        }
        prop_assert!(owner.iter().all(|&n| n == 1));
        prop_assert!(layout.groups.windows(2).all(|w| w[0].depth <= w[1].depth));
        prop_assert_eq!(expected_latent_count(&tree.level_values(), &scheme), layout.latents_per_level());
    }

    #[test]
    fn identity_scheme_one_latent_per_token(depth in 1u32..=5, seed: u64) {
        let seq = linearize(&build_octree(&grid_from(depth, seed)).unwrap());
        prop_assert_eq!(plan_groups(&seq, &CompressionScheme::identity()).len(), seq.len());
    }

    #[test]
    fn depth_weights_mean_one(depths in prop::collection::vec(1u32..=8, 1..300), alpha in 0.01f64..=1.0) {
        let w = depth_weights(&depths, alpha);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        prop_assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn temperature_gives_distribution(logits in prop::array::uniform3(-30.0f64..30.0), tau in 0.01f64..3.0) {
        let p = temperature_scale(&logits, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn schedule_bounded(step in 0usize..2000, total in 1usize..2000, warmup in 0.01f64..0.99) {
        let lr = learning_rate(1e-3, step, total, warmup);
        prop_assert!(lr > 0.0 && lr <= 1e-3);
    }

    #[test]
    fn warp_is_monotone(depth in 1u32..=6, seed: u64, points in 0usize..5) {
        let res = 1 << depth;
        let cfg = AugmentConfig { probability: 1.0, control_points: points, ..AugmentConfig::default() };
        let w = AxisWarp::random(res, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(w.dst[0], 0.0);
        prop_assert_eq!(*w.dst.last().unwrap(), res as f64);
        prop_assert!(w.dst.windows(2).all(|p| p[0] < p[1]));
        let samples: Vec<f64> = (0..=4 * res).map(|k| w.source_of(k as f64 / 4.0)).collect();
        prop_assert!(samples.windows(2).all(|p| p[0] <= p[1] + 1e-12));
    }

    #[test]
    fn metric_ranges(seeds in prop::collection::vec(any::<u64>(), 2..12), split in 1usize..11) {
        let grids: Vec<VoxelGrid> = seeds.iter().map(|&s| grid_from(2, s)).collect();
        let k = split.min(grids.len() - 1);
        let (gen, reference) = grids.split_at(k);
        let cov = coverage(gen, reference, &IouDistance).unwrap();
        let m = mmd(gen, reference, &IouDistance).unwrap();
        prop_assert!((0.0..=100.0).contains(&cov));
        prop_assert!((0.0..=1.0).contains(&m));
        // each generated shape covers at most one reference
        prop_assert!(cov * reference.len() as f64 <= 100.0 * gen.len() as f64 + 1e-9);
    }
}

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 16,
        max_positions: 4096,
        max_depth: 4,
        scheme: "0/1,0/2,0/8".into(),
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn embedding_rows_are_local(depth in 2u32..=4, seed: u64, pick: usize) {
        let model = small_model(seed);
        let seq = linearize(&build_octree(&grid_from(depth, seed)).unwrap());
        let leaves: Vec<usize> = (0..seq.len()).filter(|&i| !seq.tokens[i].value.is_mixed()).collect();
        let j = leaves[pick % leaves.len()];
        let mut other = seq.clone();
        other.tokens[j].value = if seq.tokens[j].value == CellValue::Empty { CellValue::Full } else { CellValue::Empty };
        let a = embed_sequence(&model.store, &model.tables, &seq.tokens).unwrap();
        let b = embed_sequence(&model.store, &model.tables, &other.tokens).unwrap();
        for i in 0..seq.len() {
            prop_assert_eq!(a.row(i) == b.row(i), i != j);
        }
        prop_assert!(a.is_finite());
    }

    #[test]
    fn checkpoint_round_trip(seed: u64) {
        let model = small_model(seed);
        let back = from_bytes(&to_bytes(&model)).unwrap();
        prop_assert_eq!(back, model);
    }

    #[test]
    fn forward_is_deterministic(depth in 1u32..=3, seed: u64) {
        let seq = linearize(&build_octree(&grid_from(depth, seed)).unwrap());
        let a = small_model(seed).forward_values(&seq).unwrap();
        let b = small_model(seed).forward_values(&seq).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(a.rows(), seq.len());
    }
}
