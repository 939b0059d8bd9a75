use nptc::eikonal::{fast_marching, select_seed, SeedPolicy};
use nptc::geometry_io::{brute_force_k_nearest, NeighborIndex};
use nptc::hierarchy::{build_hierarchy, farthest_point_sampling, level_sizes};
use nptc::narrowband::{jaccard, voxelize_with_index};
use nptc::operator::NptcOperator;
use nptc::{PointCloud, Tensor2, Vec3};
use proptest::prelude::*;

fn points(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
}

/// A tilted, wavy sheet sampled on a jittered lattice.
fn sheet(n: usize, tilt: f64, wave: f64) -> PointCloud {
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (u, v) = (0.1 + 0.8 * i as f64 / (n - 1) as f64, 0.1 + 0.8 * j as f64 / (n - 1) as f64);
            let z = 0.5 + tilt * (u - 0.5) + wave * (6.0 * v).sin();
            pts.push(Vec3::new(u, v, z));
        }
    }
    PointCloud::new(pts).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_matches_brute_force(pts in points(120), q in (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), k in 1usize..12) {
        let k = k.min(pts.len());
        let index = NeighborIndex::from_points(&pts);
        let q = Vec3::new(q.0, q.1, q.2);
        prop_assert_eq!(index.k_nearest(&q, k).unwrap(), brute_force_k_nearest(&pts, &q, k));
        prop_assert_eq!(index.nearest(&q).0, brute_force_k_nearest(&pts, &q, 1)[0]);
    }

    #[test]
    fn fps_is_a_growing_prefix(pts in points(100), a in 1usize..40, start_frac in 0.0..1.0f64) {
        let n = pts.len();
        let start = ((start_frac * n as f64) as usize).min(n - 1);
        let cloud = PointCloud::new(pts).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let m = a.min(n);
        let short = farthest_point_sampling(&cloud, &all, m, start).unwrap();
        let long = farthest_point_sampling(&cloud, &all, n, start).unwrap();
        prop_assert_eq!(short[0], start);
        prop_assert_eq!(&long[..m], &short[..]);
        let mut sorted = long.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, all);
    }

    #[test]
    fn hierarchy_levels_nest(pts in points(100).prop_filter("enough points", |p| p.len() >= 12), r in 0.1..0.9f64) {
        let ratios = [1.0, r, r * r];
        prop_assume!(level_sizes(pts.len(), &ratios).is_ok());
        let cloud = PointCloud::new(pts).unwrap();
        let h = build_hierarchy(&cloud, &ratios, 0).unwrap();
        for l in 1..h.levels().len() {
            let fine = h.level(l - 1);
            for &p in h.level(l) {
                prop_assert!(fine.contains(&p));
            }
            for (i, &c) in h.coarse_map(l).iter().enumerate() {
                prop_assert!(c < h.level(l).len(), "row {} maps out of range", i);
            }
        }
    }

    #[test]
    fn adjoint_identity_holds(
        n_in in 1usize..25,
        n_out in 1usize..25,
        k in prop::sample::select(vec![1usize, 3, 5]),
        c_in in 1usize..4,
        c_out in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let out: Vec<u32> = (0..n_out).map(|_| rng.random_range(0..n_in) as u32).collect();
        let taps: Vec<u32> = (0..n_out * k * k).map(|_| rng.random_range(0..n_in) as u32).collect();
        let op = NptcOperator::from_table(n_in, out, taps, k, 0.05).unwrap();
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let w = rand_vec(k * k * c_in * c_out);
        let f = Tensor2::from_vec(n_in, c_in, rand_vec(n_in * c_in)).unwrap();
        let g = Tensor2::from_vec(n_out, c_out, rand_vec(n_out * c_out)).unwrap();
        let lhs = op.apply(&w, &f, c_out).unwrap().dot(&g);
        let (fg, wg) = op.apply_adjoint(&w, &f, &g).unwrap();
        let scale = lhs.abs().max(1.0);
        prop_assert!((lhs - f.dot(&fg)).abs() <= 1e-12 * scale);
        let ww: f64 = w.iter().zip(&wg).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - ww).abs() <= 1e-12 * scale);
    }

    #[test]
    fn distance_field_is_h_lipschitz(tilt in -0.5..0.5f64, wave in 0.0..0.05f64) {
        let cloud = sheet(24, tilt, wave);
        let index = NeighborIndex::new(&cloud);
        let m = 40;
        let band = voxelize_with_index(&cloud, &index, m, 2.5 / m as f64).unwrap();
        let seeds = select_seed(&cloud, &band, SeedPolicy::default()).unwrap();
        let field = fast_marching(&band, &seeds).unwrap();
        let h = band.grid().spacing();
        prop_assert_eq!(field.unreached_count(), 0);
        for &s in seeds.slots() {
            prop_assert_eq!(field.value(s), 0.0);
        }
        for (slot, &v) in band.voxels().iter().enumerate() {
            let t = field.value(slot);
            prop_assert!(t >= 0.0);
            for axis in 0..3 {
                if let Some(nb) = band.neighbor_slot(v, axis, 1) {
                    prop_assert!((t - field.value(nb)).abs() <= h * (1.0 + 1e-12));
                }
            }
        }
        prop_assert!((jaccard(&band, &band) - 1.0).abs() < 1e-15);
    }
}
