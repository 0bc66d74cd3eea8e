use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucl_core::analysis::linear_cka;
use ucl_core::data::{build_split_stream, two_view_augment, AugConfig, DatasetId, Image, Normalization, SplitSpec};
use ucl_core::eval::{average_accuracy, average_forgetting, fit_knn_bank, knn_predict, AccuracyMatrix};
use ucl_core::strategies::{lump_mix, reservoir_slot, ReplayBuffer};
use ucl_core::testing::{exhaustive_knn, reference_average_accuracy, reference_forgetting};
use ucl_core::Tensor;

fn labels(classes: usize, per_class: usize) -> Vec<u32> {
    (0..classes * per_class).map(|i| (i % classes) as u32).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn lower_triangle(rng: &mut ChaCha8Rng, t: usize) -> Vec<Vec<f64>> {
    (0..t).map(|tau| (0..=tau).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
}

/// Orthogonal matrix from Gram-Schmidt on random columns.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut data = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            data[i * d + j] = c[i];
        }
    }
    Tensor::from_vec(&[d, d], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stream_partitions_classes(tasks in 1usize..6, cpt in 1usize..4, extra in 0usize..4, seed in any::<u64>()) {
        let classes = tasks * cpt + extra;
        let (tr, te) = (labels(classes, 5), labels(classes, 2));
        let spec = SplitSpec { num_tasks: tasks, classes_per_task: cpt, seed, per_task_cap: None };
        let s = build_split_stream(DatasetId::Synthetic, classes, &tr, &te, &spec).unwrap();
        s.validate(&tr, &te).unwrap();
        let mut all: Vec<u32> = s.tasks.iter().flat_map(|t| t.class_ids.clone()).collect();
        prop_assert_eq!(all.len(), tasks * cpt);
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), tasks * cpt);
        for t in &s.tasks {
            prop_assert!(t.train_ids.iter().all(|&i| t.class_ids.contains(&tr[i])));
            prop_assert!(t.test_ids.iter().all(|&i| t.class_ids.contains(&te[i])));
        }
        prop_assert_eq!(build_split_stream(DatasetId::Synthetic, classes, &tr, &te, &spec).unwrap(), s);
    }

    #[test]
    fn few_shot_caps_nest(cap_small in 1usize..10, grow in 0usize..10, seed in any::<u64>()) {
        let (tr, te) = (labels(6, 8), labels(6, 2));
        let build = |cap| {
            let spec = SplitSpec { num_tasks: 3, classes_per_task: 2, seed, per_task_cap: cap };
            build_split_stream(DatasetId::Synthetic, 6, &tr, &te, &spec).unwrap()
        };
        let (small, large, full) = (build(Some(cap_small)), build(Some(cap_small + grow)), build(None));
        for ((s, l), f) in small.tasks.iter().zip(&large.tasks).zip(&full.tasks) {
            prop_assert_eq!(&s.class_ids, &f.class_ids);
            prop_assert_eq!(s.train_ids.len(), cap_small.min(f.train_ids.len()));
            prop_assert!(s.train_ids.iter().all(|i| l.train_ids.contains(i)));
            prop_assert!(l.train_ids.iter().all(|i| f.train_ids.contains(i)));
        }
    }

    #[test]
    fn augmentation_is_a_function_of_rng_state(seed in any::<u64>(), pix in proptest::collection::vec(0.0f64..1.0, 3 * 8 * 8)) {
        let img = Image::new(3, 8, 8, pix).unwrap();
        let cfg = AugConfig::for_size(8);
        let norm = Normalization::identity(3);
        let a = two_view_augment(&img, 0, &cfg, &norm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = two_view_augment(&img, 0, &cfg, &norm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.view1.shape(), &[3, 8, 8]);
        prop_assert_eq!(a, b);
        let id = two_view_augment(&img, 0, &AugConfig::identity(8), &norm, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(id.view1.data(), &img.data[..]);
        prop_assert_eq!(id.view2.data(), &img.data[..]);
    }

    #[test]
    fn metrics_match_enumeration(t in 1usize..8, seed in any::<u64>()) {
        let rows = lower_triangle(&mut ChaCha8Rng::seed_from_u64(seed), t);
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        for tau in 0..t {
            prop_assert!((average_accuracy(&m, tau).unwrap() - reference_average_accuracy(&rows, tau)).abs() < 1e-12);
            let mut shuffled = rows[tau].clone();
            shuffled.reverse();
            let mean = shuffled.iter().sum::<f64>() / shuffled.len() as f64;
            prop_assert!((average_accuracy(&m, tau).unwrap() - mean).abs() < 1e-12);
        }
        if t >= 2 {
            let f = average_forgetting(&m).unwrap();
            prop_assert!(f >= 0.0);
            prop_assert!((f - reference_forgetting(&rows)).abs() < 1e-12);
        } else {
            prop_assert!(average_forgetting(&m).is_err());
        }
    }

    #[test]
    fn knn_matches_exhaustive_scoring(n in 1usize..50, d in 1usize..16, k in 1usize..60, classes in 1u32..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = random_tensor(&mut rng, n, d);
        let lab: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let queries = random_tensor(&mut rng, 7, d);
        let fitted = fit_knn_bank(&bank, &lab, k, 0.1).unwrap();
        let got = knn_predict(&fitted, &queries).unwrap();
        prop_assert_eq!(&got, &exhaustive_knn(&bank, &lab, &queries, k, 0.1));
        let scaled = fit_knn_bank(&bank.map(|v| 3.5 * v), &lab, k, 0.1).unwrap();
        prop_assert_eq!(knn_predict(&scaled, &queries.map(|v| 0.25 * v)).unwrap(), got);
    }

    #[test]
    fn cka_invariances(n in 5usize..40, d in 1usize..8, scale in 0.1f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, n, d);
        let y = random_tensor(&mut rng, n, d + 1);
        prop_assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        let q = orthogonal(&mut rng, d);
        let xq = x.matmul(&q, false, false).unwrap();
        prop_assert!((linear_cka(&x, &xq).unwrap() - 1.0).abs() < 1e-9);
        let c = linear_cka(&x, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((linear_cka(&x.map(|v| scale * v), &y).unwrap() - c).abs() < 1e-9);
        prop_assert!((linear_cka(&y, &x).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn lump_mix_endpoints(rows in 1usize..5, cols in 1usize..6, lam in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, m) = (random_tensor(&mut rng, rows, cols), random_tensor(&mut rng, rows, cols));
        prop_assert_eq!(lump_mix(&x, &m, 1.0).unwrap(), x.clone());
        prop_assert_eq!(lump_mix(&x, &m, 0.0).unwrap(), m.clone());
        let mixed = lump_mix(&x, &m, lam).unwrap();
        for ((v, a), b) in mixed.data().iter().zip(x.data()).zip(m.data()) {
            prop_assert!(*v >= a.min(*b) - 1e-15 && *v <= a.max(*b) + 1e-15);
        }
    }

    #[test]
    fn buffer_never_exceeds_capacity(cap in 0usize..10, n in 0usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.reservoir_insert(i, &mut rng);
            prop_assert_eq!(buf.len(), (i + 1).min(cap));
        }
        prop_assert_eq!(buf.seen_count(), n as u64);
        let mut items = buf.items().to_vec();
        items.sort_unstable();
        items.dedup();
        prop_assert_eq!(items.len(), buf.len());
    }
}

#[test]
fn reservoir_retention_is_uniform() {
    let (cap, n, trials) = (2usize, 10usize, 10_000);
    let mut kept = vec![0usize; n];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..trials {
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..n {
            buf.reservoir_insert(i, &mut rng);
        }
        for &i in buf.items() {
            kept[i] += 1;
        }
    }
    for (i, &k) in kept.iter().enumerate() {
        let freq = k as f64 / trials as f64;
        assert!((freq - cap as f64 / n as f64).abs() < 0.02, "item {i} kept with frequency {freq}");
    }
    assert_eq!(reservoir_slot(0, 0, &mut rng), None);
}

#[test]
fn independent_data_has_low_cka() {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut draw = || -> Tensor { Tensor::from_vec(&[2000, 10], (0..20_000).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap() };
    let (x, y) = (draw(), draw());
    assert!(linear_cka(&x, &y).unwrap() < 0.05);
}
