use ggeur::augment::{augment_multi_domain, augment_single_domain, AugmentationPlan, Prototype};
use ggeur::datastore::{synth_generate, SyntheticSpec};
use ggeur::federation::fedavg_aggregate;
use ggeur::geometry::{
    aggregate_global_stats, build_shape, compute_class_stats, frobenius, shape_similarity, GeometricShape,
};
use ggeur::model::LinearClassifierParams;
use ggeur::partition::{build_partition, check_disjoint, PartitionMode, PartitionSpec};
use ggeur::rng::{Purpose, StreamId};
use ndarray::{s, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Array2<f64> {
    let shift: Vec<f64> = (0..p).map(|_| rng.random_range(-5.0..5.0)).collect();
    Array2::from_shape_fn((n, p), |(_, j)| shift[j] + rng.random_range(-1.0..1.0) * (1.0 + j as f64))
}

fn shape_of(rows: &Array2<f64>) -> GeometricShape {
    build_shape(&compute_class_stats(0, rows.view()).unwrap().into()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merged_statistics_match_pooled(seed in any::<u64>(), p in 1usize..9, sizes in prop::collection::vec(0usize..30, 1..6)) {
        prop_assume!(sizes.iter().sum::<usize>() > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = sizes.iter().sum();
        let pooled = gaussian_rows(&mut rng, total, p);
        let mut at = 0;
        let locals: Vec<_> = sizes
            .iter()
            .map(|&n| {
                let part = pooled.slice(s![at..at + n, ..]);
                at += n;
                compute_class_stats(0, part).unwrap()
            })
            .collect();
        let merged = aggregate_global_stats(&locals).unwrap();
        let direct = compute_class_stats(0, pooled.view()).unwrap();
        prop_assert_eq!(merged.total_count, total);
        let scale = frobenius(direct.covariance.view()).max(1e-300);
        prop_assert!(frobenius((&merged.covariance - &direct.covariance).view()) / scale <= 1e-10);
        let mean_err = (&merged.mean - &direct.mean).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        prop_assert!(mean_err <= 1e-10 * (1.0 + direct.mean.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    #[test]
    fn similarity_bounded_and_sign_invariant(seed in any::<u64>(), p in 5usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = shape_of(&gaussian_rows(&mut rng, 40, p));
        let b = shape_of(&gaussian_rows(&mut rng, 40, p));
        let sab = shape_similarity(&a, &b, 5).unwrap();
        prop_assert!((0.0..=5.0).contains(&sab));
        prop_assert_eq!(sab, shape_similarity(&b, &a, 5).unwrap());
        let mut flipped = b.clone();
        for m in 0..p {
            if rng.random_bool(0.5) {
                flipped.eigenvectors.column_mut(m).mapv_inplace(|x| -x);
            }
        }
        prop_assert_eq!(sab, shape_similarity(&a, &flipped, 5).unwrap());
    }

    #[test]
    fn fedavg_permutation_and_idempotence(seed in any::<u64>(), k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ups: Vec<_> = (0..k)
            .map(|_| {
                (
                    LinearClassifierParams {
                        weights: Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0)),
                        bias: Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0)),
                    },
                    rng.random_range(1..500) as f64,
                )
            })
            .collect();
        let agg = fedavg_aggregate(&ups).unwrap();
        let mut shuffled = ups.clone();
        shuffled.rotate_left(seed as usize % k);
        prop_assert_eq!(&agg, &fedavg_aggregate(&shuffled).unwrap());

        let same: Vec<_> = ups.iter().map(|(_, w)| (ups[0].0.clone(), *w)).collect();
        prop_assert_eq!(&fedavg_aggregate(&same).unwrap(), &ups[0].0);

        let total: f64 = ups.iter().map(|(_, w)| w).sum();
        let mut brute = Array2::<f64>::zeros((3, 4));
        for (p, w) in &ups {
            brute.scaled_add(w / total, &p.weights);
        }
        prop_assert!((&brute - &agg.weights).iter().all(|d| d.abs() <= 1e-12));
    }

    #[test]
    fn augmentation_counts(seed in any::<u64>(), n in 1usize..40, target in 1usize..80, protos in 0usize..4, m in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 4;
        let rows = gaussian_rows(&mut rng, n.max(p + 1), p);
        let shape = shape_of(&rows);
        let local = rows.slice(s![..n, ..]);
        let stream = StreamId::new(seed, 0, 0, Purpose::AugmentStep1);

        let plan = AugmentationPlan { target_per_class: target, ..Default::default() };
        let single = augment_single_domain(local, &shape, &plan, stream).unwrap();
        prop_assert_eq!(single.len(), n.max(target));
        prop_assert_eq!(single.rows.slice(s![..n, ..]), local);

        let prototypes: Vec<Prototype> = (0..protos)
            .map(|i| Prototype {
                class_id: 0,
                source_client: i + 1,
                source_domain: format!("d{}", i + 1),
                mean: Array1::from_elem(p, i as f64),
            })
            .collect();
        let plan = AugmentationPlan { step1_target: target, step2_per_prototype: m, ..AugmentationPlan::multi_domain() };
        let multi = augment_multi_domain(local, &shape, &prototypes, &plan, stream).unwrap();
        prop_assert_eq!(multi.len(), n.max(target) + m * protos);
    }

    #[test]
    fn dirichlet_partition_is_a_disjoint_cover(seed in any::<u64>(), beta in 0.05f64..5.0, k in 1usize..8) {
        let ds = synth_generate(&SyntheticSpec { dim: 2, classes: 4, train_per_cell: 15, test_per_cell: 1, seed, ..Default::default() }).unwrap();
        let spec = PartitionSpec { mode: PartitionMode::DirichletLabel, beta, num_clients: k, seed, ..Default::default() };
        let shards = build_partition(&ds, &spec).unwrap();
        check_disjoint(&ds, &shards).unwrap();
        prop_assert_eq!(shards.iter().map(|s| s.indices.len()).sum::<usize>(), 60);
        prop_assert_eq!(&shards, &build_partition(&ds, &spec).unwrap());
    }
}
