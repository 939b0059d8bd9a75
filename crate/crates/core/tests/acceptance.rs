//! Acceptance suite: one PASS/FAIL line per criterion, run sequentially on one thread.
//!
//! Criteria whose targets the current method does not reach are listed in
//! `EXPECTED_FAILURES`; they still run and still print FAIL. Any other failure exits
//! nonzero. Runs without the libtest harness so the lines are never captured.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use nptc::eikonal::{fast_marching, interpolate_to_points, Axis, SeedSet, Side};
use nptc::frames::{build_frame_field, NormalPolicy, DEFAULT_K};
use nptc::geometry_io::{brute_force_k_nearest, normalize_to_unit_cube, NeighborIndex};
use nptc::hierarchy::farthest_point_sampling;
use nptc::narrowband::{jaccard, voxelize_with_index};
use nptc::network::layers::{
    concat, conv, conv_backward, global_max_pool, global_max_pool_backward, linear, linear_backward, mlp,
    relu, relu_backward, residual_block_backward, residual_block_forward, scatter_rows, split_cols,
    ResidualParams,
};
use nptc::network::{
    cross_entropy, evaluate, grad_check, train, CloudGeometry, FnFragment, ForwardPass,
    Model, ModelFragment, NetworkConfig, Sample, Task, TrainConfig,
};
use nptc::operator::{build_operator, KernelSpec, NptcOperator, TapSpacing};
use nptc::pipeline::{build_geometry, prepare_cloud, prepare_samples, PipelineConfig, PreparedCloud};
use nptc::synthetic::{make_dataset, sample_shape, DatasetSpec, ShapeFamily, SyntheticDataset, NORMALIZE_MARGIN};
use nptc::{PointCloud, Tensor2, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Criteria known to miss their targets; see the project notes for the measurements.
const EXPECTED_FAILURES: &[u32] = &[2, 9];

struct Outcome {
    id: u32,
    pass: bool,
}

fn report(id: u32, name: &str, pass: bool, detail: String) -> Outcome {
    println!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, pass }
}

fn fibonacci_sphere(n: usize, r: f64) -> PointCloud {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let pts = (0..n)
        .map(|i| {
            let z = -1.0 + (2 * i + 1) as f64 / n as f64;
            let s = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            Vec3::new(0.5 + r * s * t.cos(), 0.5 + r * s * t.sin(), 0.5 + r * z)
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

const SPHERE_N: usize = 4096;
const SPHERE_R: f64 = 0.35;

fn center() -> Vec3 {
    Vec3::new(0.5, 0.5, 0.5)
}

fn geodesic(p: &Vec3, s: &Vec3) -> f64 {
    let c = center();
    let cos = ((p - c).dot(&(s - c)) / (SPHERE_R * SPHERE_R)).clamp(-1.0, 1.0);
    SPHERE_R * cos.acos()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------------------
// 1. planar reduction

fn criterion_planar() -> Outcome {
    let t0 = Instant::now();
    let g = 32;
    let mut pts = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            pts.push(Vec3::new(i as f64, j as f64, 0.0));
        }
    }
    let normals = vec![Vec3::z(); g * g];
    let raw = PointCloud::with_normals(pts, normals).unwrap();
    let cloud = normalize_to_unit_cube(&raw, NORMALIZE_MARGIN).unwrap();
    let spacing = (cloud.point(g) - cloud.point(0)).norm();
    let index = NeighborIndex::new(&cloud);
    let m = 100;
    let band = voxelize_with_index(&cloud, &index, m, 2.0 / m as f64).unwrap();
    let seeds = SeedSet::plane_edge(&band, Axis::X, Side::Low).unwrap();
    let field = fast_marching(&band, &seeds).unwrap();
    let rho = interpolate_to_points(&field, &band, &cloud).unwrap();
    let frames = build_frame_field(&cloud, &index, &rho, None, DEFAULT_K, NormalPolicy::UseInput).unwrap();
    let spec = KernelSpec::new(3, TapSpacing::Fixed(spacing)).unwrap();
    let all: Vec<usize> = (0..cloud.len()).collect();
    let op = build_operator(&cloud, &index, &frames, &all, &spec).unwrap();

    let interior = |i: usize, j: usize| i >= 1 && j >= 1 && i + 1 < g && j + 1 < g;
    // u2 = u1 x n with u1 = +x and n = +z points along -y
    let mut frame_ok = true;
    for i in 0..g {
        for j in 0..g {
            let f = frames.frame(i * g + j);
            if interior(i, j) && ((f.u1 - Vec3::x()).norm() > 1e-9 || (f.u2 + Vec3::y()).norm() > 1e-9) {
                frame_ok = false;
            }
        }
    }

    let (c_in, c_out) = (2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let f = Tensor2::<f64>::from_vec(g * g, c_in, (0..g * g * c_in).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let w: Vec<f64> = (0..9 * c_in * c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = op.apply(&w, &f, c_out).unwrap();
        // dense 2-D convolution over grid offsets (a, b): tap (p, q) lies at (p - 1, 1 - q)
        for i in 1..g - 1 {
            for j in 1..g - 1 {
                for co in 0..c_out {
                    let mut s = 0.0;
                    for a in -1i64..=1 {
                        for b in -1i64..=1 {
                            let (p, q) = ((a + 1) as usize, (1 - b) as usize);
                            let src = (i as i64 + a) as usize * g + (j as i64 + b) as usize;
                            for ci in 0..c_in {
                                s += w[((p * 3 + q) * c_in + ci) * c_out + co] * f.get(src, ci);
                            }
                        }
                    }
                    let got = out.get(i * g + j, co);
                    worst = worst.max((got - s).abs() / s.abs().max(1e-12));
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = frame_ok && worst <= 1e-6 && elapsed < Duration::from_secs(10);
    report(
        1,
        "planar reduction",
        pass,
        format!("max relative error {worst:.2e} on interior points, frames u1=+x u2=-y: {frame_ok}, {elapsed:.2?}"),
    )
}

// ---------------------------------------------------------------------------------------
// 2-4, 9a-b. sphere

struct SphereRun {
    prepared: PreparedCloud,
    seed: Vec3,
    elapsed: Duration,
}

fn sphere_run() -> SphereRun {
    let cloud = fibonacci_sphere(SPHERE_N, SPHERE_R);
    let t0 = Instant::now();
    let prepared = prepare_cloud(&cloud, &PipelineConfig::default()).unwrap();
    let elapsed = t0.elapsed();
    let s = prepared.seeds.seed_point().expect("single seed point");
    SphereRun {
        seed: prepared.cloud.point(s),
        prepared,
        elapsed,
    }
}

fn criterion_geodesic(run: &SphereRun) -> Outcome {
    let p = &run.prepared;
    let mut rel = Vec::new();
    for (x, &r) in p.cloud.points().iter().zip(&p.rho.values) {
        let g = geodesic(x, &run.seed);
        if g > 0.1 {
            rel.push((r - g).abs() / g);
        }
    }
    let within = rel.iter().filter(|&&e| e <= 0.05).count();
    let max = rel.iter().copied().fold(0.0, f64::max);
    let total = rel.len();
    let med = median(rel);
    let pass = within == total && run.elapsed < Duration::from_secs(60);
    report(
        2,
        "sphere geodesic distance",
        pass,
        format!(
            "{within}/{total} points within 5% (max {max:.4}, median {med:.4}), pipeline {:.2?}",
            run.elapsed
        ),
    )
}

/// Unit tangent at `x` pointing away from the seed along the great circle.
fn meridian(x: &Vec3, seed: &Vec3) -> Vec3 {
    let n = (x - center()).normalize();
    let to_seed = seed - center();
    let t = -(to_seed - n * to_seed.dot(&n));
    t.normalize()
}

fn criterion_meridian(run: &SphereRun) -> Outcome {
    let p = &run.prepared;
    let hi = std::f64::consts::PI * SPHERE_R - 0.2;
    let mut total = 0;
    let mut good = 0;
    for (i, x) in p.cloud.points().iter().enumerate() {
        let g = geodesic(x, &run.seed);
        if !(0.2..=hi).contains(&g) {
            continue;
        }
        total += 1;
        let cos = p.frames.frame(i).u1.dot(&meridian(x, &run.seed)).clamp(-1.0, 1.0);
        if cos.acos().to_degrees() <= 10.0 {
            good += 1;
        }
    }
    let frac = good as f64 / total as f64;
    report(
        3,
        "meridian frames",
        frac >= 0.95,
        format!("{good}/{total} = {:.2}% within 10 degrees", 100.0 * frac),
    )
}

fn criterion_orthonormal(run: &SphereRun) -> Outcome {
    let f = &run.prepared.frames;
    let nonsingular: Vec<_> = f.frames().iter().filter(|t| !t.singular).collect();
    let ok = nonsingular.iter().filter(|t| t.is_orthonormal(1e-6)).count();
    let singular = f.singular_count();
    let limit = f.len() as f64 * 0.01;
    let pass = ok == nonsingular.len() && singular as f64 <= limit;
    report(
        4,
        "frame orthonormality and singularities",
        pass,
        format!(
            "{ok}/{} non-singular frames orthonormal, {singular} singular (limit {limit:.0})",
            nonsingular.len()
        ),
    )
}

// ---------------------------------------------------------------------------------------
// 5. gradients

fn signature(parts: &[&Tensor2<f64>], extra: &[usize]) -> u64 {
    let mut h = DefaultHasher::new();
    for t in parts {
        for v in t.data() {
            (*v > 0.0).hash(&mut h);
        }
    }
    extra.hash(&mut h);
    h.finish()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2<f64> {
    Tensor2::from_vec(r, c, random_vec(rng, r * c, 1.0)).unwrap()
}

/// A small sphere sample with a two-level hierarchy and its operators.
fn small_geometry(seed: u64, n: usize, k: usize) -> (PointCloud, CloudGeometry) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample_shape(ShapeFamily::Sphere, n, &Default::default(), None, &mut rng).unwrap();
    let prepared = prepare_cloud(&s.cloud, &PipelineConfig::dataset_default()).unwrap();
    let kernel = KernelSpec {
        taps_per_axis: k,
        ..KernelSpec::default()
    };
    let geom = build_geometry(&prepared.cloud, &prepared.frames, &[1.0, 0.25], &[kernel; 2], 0).unwrap();
    (prepared.cloud, geom)
}

fn check_layers(seed: u64, geom: &CloudGeometry) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = geom.level_size(0);
    let c = 8;
    let h = c / 2;
    let op = &geom.level_ops[0];
    let down = &geom.down_ops[0];
    let mut results = Vec::new();
    let mut run = |name: &'static str, frag: &dyn nptc::network::Differentiable, params: Vec<Vec<f64>>, input: Tensor2<f64>| {
        let r = grad_check(frag, &params, &input, seed).unwrap();
        assert!(r.checked > 0, "{name}: nothing checked");
        results.push((name, r.max_relative_error));
    };

    let linear_frag = FnFragment {
        forward: |p: &[Vec<f64>], x: &Tensor2<f64>| {
            Ok(ForwardPass {
                output: linear(x, &p[0], &p[1])?,
                signature: 0,
            })
        },
        backward: |p: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
            let (mut dw, mut db) = (vec![0.0; p[0].len()], vec![0.0; p[1].len()]);
            let dx = linear_backward(x, &p[0], dy, &mut dw, &mut db);
            Ok((dx, vec![dw, db]))
        },
    };
    run("linear", &linear_frag, vec![random_vec(&mut rng, c * 5, 1.0), random_vec(&mut rng, 5, 1.0)], random_tensor(&mut rng, n, c));

    let mlp_frag = FnFragment {
        forward: |p: &[Vec<f64>], x: &Tensor2<f64>| {
            let hidden = linear(x, &p[0], &p[1])?;
            let out = mlp(x, &[(&p[0], &p[1]), (&p[2], &p[3])], false)?;
            Ok(ForwardPass {
                output: out,
                signature: signature(&[&hidden], &[]),
            })
        },
        backward: |p: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
            let a = relu(&linear(x, &p[0], &p[1])?);
            let mut g: Vec<Vec<f64>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
            let (g01, g23) = g.split_at_mut(2);
            let (g2, g3) = g23.split_at_mut(1);
            let da = linear_backward(&a, &p[2], dy, &mut g2[0], &mut g3[0]);
            let da = relu_backward(&a, &da);
            let (g0, g1) = g01.split_at_mut(1);
            let dx = linear_backward(x, &p[0], &da, &mut g0[0], &mut g1[0]);
            Ok((dx, g))
        },
    };
    run(
        "mlp + relu",
        &mlp_frag,
        vec![random_vec(&mut rng, c * 6, 1.0), random_vec(&mut rng, 6, 0.5), random_vec(&mut rng, 6 * 3, 1.0), random_vec(&mut rng, 3, 0.5)],
        random_tensor(&mut rng, n, c),
    );

    for (name, o) in [("nptc conv", op), ("strided nptc conv", down)] {
        let frag = FnFragment {
            forward: |p: &[Vec<f64>], x: &Tensor2<f64>| {
                Ok(ForwardPass {
                    output: conv(o, x, &p[0], &p[1])?,
                    signature: 0,
                })
            },
            backward: |p: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
                let (mut dw, mut db) = (vec![0.0; p[0].len()], vec![0.0; p[1].len()]);
                let dx = conv_backward(o, x, &p[0], dy, &mut dw, &mut db)?;
                Ok((dx, vec![dw, db]))
            },
        };
        let taps = o.taps_per_row();
        run(name, &frag, vec![random_vec(&mut rng, taps * c * c, 0.5), random_vec(&mut rng, c, 0.5)], random_tensor(&mut rng, n, c));
    }

    let res_frag = FnFragment {
        forward: |p: &[Vec<f64>], x: &Tensor2<f64>| {
            let rp = ResidualParams {
                reduce: (&p[0], &p[1]),
                conv: (&p[2], &p[3]),
                expand: (&p[4], &p[5]),
            };
            let (y, tape) = residual_block_forward(x, op, &rp)?;
            Ok(ForwardPass {
                output: y,
                signature: signature(&[&tape.a, &tape.c], &[]),
            })
        },
        backward: |p: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
            let rp = ResidualParams {
                reduce: (&p[0], &p[1]),
                conv: (&p[2], &p[3]),
                expand: (&p[4], &p[5]),
            };
            let (_, tape) = residual_block_forward(x, op, &rp)?;
            let mut g: Vec<Vec<f64>> = p.iter().map(|v| vec![0.0; v.len()]).collect();
            let [g0, g1, g2, g3, g4, g5] = &mut g[..] else { unreachable!() };
            let dx = residual_block_backward(op, &rp, &tape, dy, [g0, g1, g2, g3, g4, g5])?;
            Ok((dx, g))
        },
    };
    let taps = op.taps_per_row();
    run(
        "residual block",
        &res_frag,
        vec![
            random_vec(&mut rng, c * h, 1.0),
            random_vec(&mut rng, h, 0.3),
            random_vec(&mut rng, taps * h * h, 0.5),
            random_vec(&mut rng, h, 0.3),
            random_vec(&mut rng, h * c, 1.0),
            random_vec(&mut rng, c, 0.3),
        ],
        random_tensor(&mut rng, n, c),
    );

    let pool_frag = FnFragment {
        forward: |_: &[Vec<f64>], x: &Tensor2<f64>| {
            let (y, arg) = global_max_pool(x)?;
            Ok(ForwardPass {
                output: y,
                signature: signature(&[], &arg),
            })
        },
        backward: |_: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
            let (_, arg) = global_max_pool(x)?;
            Ok((global_max_pool_backward(x.rows(), &arg, dy), vec![]))
        },
    };
    run("global max pool", &pool_frag, vec![], random_tensor(&mut rng, n, c));

    let concat_frag = FnFragment {
        forward: |p: &[Vec<f64>], x: &Tensor2<f64>| {
            Ok(ForwardPass {
                output: concat(x, &linear(x, &p[0], &p[1])?)?,
                signature: 0,
            })
        },
        backward: |p: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
            let (dx_direct, dlin) = split_cols(dy, x.cols());
            let (mut dw, mut db) = (vec![0.0; p[0].len()], vec![0.0; p[1].len()]);
            let mut dx = linear_backward(x, &p[0], &dlin, &mut dw, &mut db);
            dx.add_assign(&dx_direct)?;
            Ok((dx, vec![dw, db]))
        },
    };
    run("concat", &concat_frag, vec![random_vec(&mut rng, c * 3, 1.0), random_vec(&mut rng, 3, 1.0)], random_tensor(&mut rng, n, c));

    let map = geom.hierarchy.coarse_map(1).to_vec();
    let coarse_rows = geom.level_size(1);
    let up_frag = FnFragment {
        forward: |_: &[Vec<f64>], x: &Tensor2<f64>| {
            Ok(ForwardPass {
                output: nptc::hierarchy::upsample_nn(x, &geom.hierarchy, 1)?,
                signature: 0,
            })
        },
        backward: |_: &[Vec<f64>], _: &Tensor2<f64>, dy: &Tensor2<f64>| Ok((scatter_rows(dy, &map, coarse_rows), vec![])),
    };
    run("nearest upsampling", &up_frag, vec![], random_tensor(&mut rng, coarse_rows, c));

    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let ce_frag = FnFragment {
        forward: |_: &[Vec<f64>], x: &Tensor2<f64>| {
            let (loss, _) = cross_entropy(x, &labels)?;
            Ok(ForwardPass {
                output: Tensor2::filled(1, 1, loss),
                signature: 0,
            })
        },
        backward: |_: &[Vec<f64>], x: &Tensor2<f64>, dy: &Tensor2<f64>| {
            let (_, mut g) = cross_entropy(x, &labels)?;
            let s = dy.get(0, 0);
            g.data_mut().iter_mut().for_each(|v| *v *= s);
            Ok((g, vec![]))
        },
    };
    run("softmax cross-entropy", &ce_frag, vec![], random_tensor(&mut rng, n, 3));

    for (name, task) in [
        ("2-level classifier", Task::Classification { classes: 3 }),
        ("2-level segmenter", Task::Segmentation { parts: 2 }),
    ] {
        let cfg = NetworkConfig {
            ratios: vec![1.0, 0.25],
            widths: vec![c, c],
            blocks: vec![1, 1],
            kernels: vec![KernelSpec::default(); 2],
            task,
            input_channels: 3,
        };
        let model = Model::<f64>::new(cfg, seed).unwrap();
        let frag = ModelFragment { model: &model, geometry: geom };
        let input = random_tensor(&mut rng, n, 3);
        run(name, &frag, model.params().to_vec(), input);
    }
    results
}

fn criterion_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for seed in 0..5 {
        let (_, geom) = small_geometry(seed, 64, 3);
        for (name, e) in check_layers(seed, &geom) {
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst.0 <= 1e-4 && elapsed < Duration::from_secs(300);
    report(
        5,
        "gradient correctness",
        pass,
        format!("max relative error {:.2e} ({}) over 11 fragments x 5 seeds, {elapsed:.2?}", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------------------------------
// 6. adjoint

fn criterion_adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for t in 0..50 {
        let op = if t % 5 == 0 {
            let (_, g) = small_geometry(100 + t, 48, 3);
            if t % 10 == 0 {
                g.level_ops[0].clone()
            } else {
                g.down_ops[0].clone()
            }
        } else {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let n_in = rng.random_range(1..30);
            let n_out = rng.random_range(1..30);
            let out: Vec<u32> = (0..n_out).map(|_| rng.random_range(0..n_in) as u32).collect();
            let taps: Vec<u32> = (0..n_out * k * k).map(|_| rng.random_range(0..n_in) as u32).collect();
            NptcOperator::from_table(n_in, out, taps, k, 0.1).unwrap()
        };
        let (c_in, c_out) = (rng.random_range(1..5), rng.random_range(1..5));
        let w = random_vec(&mut rng, op.taps_per_row() * c_in * c_out, 1.0);
        let f = random_tensor(&mut rng, op.input_len(), c_in);
        let g = random_tensor(&mut rng, op.output_len(), c_out);
        let af = op.apply(&w, &f, c_out).unwrap();
        let (atg, wg) = op.apply_adjoint(&w, &f, &g).unwrap();
        let lhs = af.dot(&g);
        let rhs = f.dot(&atg);
        let rhs_w: f64 = w.iter().zip(&wg).map(|(a, b)| a * b).sum();
        let scale = lhs.abs().max(1.0);
        worst = worst.max((lhs - rhs).abs() / scale).max((lhs - rhs_w).abs() / scale);
    }
    report(6, "adjoint identity", worst <= 1e-10, format!("max relative gap {worst:.2e} over 50 instances"))
}

// ---------------------------------------------------------------------------------------
// 7. FPS and k-NN oracles

fn fps_oracle(points: &[Vec3], n: usize, start: usize) -> Vec<usize> {
    let mut picked = vec![start];
    while picked.len() < n {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| (p - points[j]).norm_squared()).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

fn criterion_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut knn_cases, mut fps_cases, mut mismatches) = (0, 0, 0);
    for t in 0..40 {
        let n = rng.random_range(1..=256);
        let pts: Vec<Vec3> = if t % 4 == 0 {
            // lattice points produce exact distance ties
            (0..n).map(|i| Vec3::new((i % 7) as f64, ((i / 7) % 7) as f64, (i / 49) as f64) * 0.1).collect()
        } else {
            (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
        };
        let index = NeighborIndex::from_points(&pts);
        for q in 0..20 {
            let query = if q % 2 == 0 {
                pts[rng.random_range(0..n)]
            } else {
                Vec3::new(rng.random(), rng.random(), rng.random())
            };
            let k = rng.random_range(1..=n.min(20));
            knn_cases += 1;
            if index.k_nearest(&query, k).unwrap() != brute_force_k_nearest(&pts, &query, k) {
                mismatches += 1;
            }
        }
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let m = rng.random_range(1..=n);
        let start = rng.random_range(0..n);
        fps_cases += 1;
        if farthest_point_sampling(&cloud, &all, m, start).unwrap() != fps_oracle(&pts, m, start) {
            mismatches += 1;
        }
    }
    report(
        7,
        "FPS / k-NN oracle equivalence",
        mismatches == 0,
        format!("{mismatches} mismatches in {knn_cases} k-NN and {fps_cases} FPS cases"),
    )
}

// ---------------------------------------------------------------------------------------
// 8. toy classification

struct TrainedRun {
    dataset: SyntheticDataset,
    model: Model<f32>,
    test: Vec<Sample>,
}

fn criterion_classification() -> (Outcome, TrainedRun) {
    let ncfg = NetworkConfig::desk(Task::Classification { classes: 3 });
    let pcfg = PipelineConfig::dataset_default();
    let mut accs = Vec::new();
    let mut kept = None;
    let mut slowest = Duration::ZERO;
    for seed in 0..5u64 {
        let t0 = Instant::now();
        let ds = make_dataset(&DatasetSpec {
            seed,
            ..DatasetSpec::default()
        })
        .unwrap();
        let samples = prepare_samples(&ds, &pcfg, &ncfg).unwrap();
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        let (train_set, test_set) = (pick(&ds.train), pick(&ds.test));
        let mut model = Model::<f32>::new(ncfg.clone(), seed).unwrap();
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &train_set, &test_set, &cfg).unwrap();
        let acc = out.metrics.last().unwrap().accuracy;
        let elapsed = t0.elapsed();
        slowest = slowest.max(elapsed);
        println!("  seed {seed}: test accuracy {:.4} in {elapsed:.2?}", acc);
        accs.push((acc, elapsed));
        if kept.is_none() {
            kept = Some(TrainedRun {
                dataset: ds,
                model,
                test: test_set,
            });
        }
    }
    let good = accs.iter().filter(|(a, t)| *a >= 0.9 && *t < Duration::from_secs(900)).count();
    let list: Vec<String> = accs.iter().map(|(a, _)| format!("{:.3}", a)).collect();
    let outcome = report(
        8,
        "toy classification",
        good >= 4,
        format!("{good}/5 seeds at >= 90% test accuracy [{}], slowest run {slowest:.2?}", list.join(", ")),
    );
    (outcome, kept.unwrap())
}

// ---------------------------------------------------------------------------------------
// 9. noise robustness

fn jitter(cloud: &PointCloud, sigma: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let nd = Normal::new(0.0, sigma).unwrap();
    let pts = cloud
        .points()
        .iter()
        .map(|p| p + Vec3::new(nd.sample(rng), nd.sample(rng), nd.sample(rng)))
        .collect();
    cloud.with_points(pts).unwrap()
}

fn criterion_noise(run: &SphereRun, trained: &TrainedRun) -> Outcome {
    let clean = &run.prepared;
    let eps = clean.band.epsilon();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy_cloud = jitter(&clean.cloud, 0.25 * eps, &mut rng);
    let noisy = prepare_cloud(&noisy_cloud, &PipelineConfig::default());
    let (jac, cos_med) = match &noisy {
        Ok(noisy) => {
            let cos: Vec<f64> = clean
                .frames
                .frames()
                .iter()
                .zip(noisy.frames.frames())
                .map(|(a, b)| a.u1.dot(&b.u1))
                .collect();
            (jaccard(&clean.band, &noisy.band), median(cos))
        }
        Err(e) => {
            println!("  noisy sphere failed to preprocess: {e}");
            (0.0, -1.0)
        }
    };

    let pcfg = PipelineConfig::dataset_default();
    let ncfg = trained.model.config().clone();
    let ds_eps = pcfg.epsilon.resolve(pcfg.resolution);
    let clean_acc = evaluate(&trained.model, &trained.test).unwrap();
    let noisy_test: Vec<Sample> = trained
        .dataset
        .test
        .iter()
        .map(|&i| {
            let e = &trained.dataset.entries[i];
            let cloud = jitter(&e.cloud, 0.25 * ds_eps, &mut rng);
            let prepared = prepare_cloud(&cloud, &pcfg).unwrap();
            let geometry = build_geometry(&prepared.cloud, &prepared.frames, &ncfg.ratios, &ncfg.kernels, pcfg.fps_start).unwrap();
            Sample {
                name: format!("noisy_{i}"),
                points: prepared.cloud.points().to_vec(),
                geometry: Some(geometry),
                label: e.label,
                part_labels: None,
            }
        })
        .collect();
    let noisy_acc = evaluate(&trained.model, &noisy_test).unwrap();
    let drop = clean_acc - noisy_acc;
    let pass = jac >= 0.9 && cos_med >= 0.9 && drop <= 0.05;
    report(
        9,
        "noise robustness",
        pass,
        format!(
            "band Jaccard {jac:.3}, median u1 cosine {cos_med:.4}, classifier {clean_acc:.3} -> {noisy_acc:.3} (drop {:.1} points)",
            100.0 * drop
        ),
    )
}

// ---------------------------------------------------------------------------------------
// 10. preprocessing budget

fn criterion_budget() -> Outcome {
    let ncfg = NetworkConfig::desk(Task::Classification { classes: 3 });
    let mut times = Vec::new();
    for r in [0.3, 0.35, 0.4] {
        let cloud = fibonacci_sphere(2048, r);
        let t0 = Instant::now();
        let p = prepare_cloud(&cloud, &PipelineConfig::default()).unwrap();
        build_geometry(&p.cloud, &p.frames, &ncfg.ratios, &ncfg.kernels, 0).unwrap();
        times.push(t0.elapsed());
    }
    let worst = times.iter().max().copied().unwrap();
    report(
        10,
        "preprocessing budget",
        worst <= Duration::from_secs(2),
        format!("2048-point clouds at M=100: {times:.2?} (worst {worst:.2?})"),
    )
}

fn main() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let outcomes = pool.install(|| {
        let mut out = vec![criterion_planar()];
        let sphere = sphere_run();
        out.push(criterion_geodesic(&sphere));
        out.push(criterion_meridian(&sphere));
        out.push(criterion_orthonormal(&sphere));
        out.push(criterion_gradients());
        out.push(criterion_adjoint());
        out.push(criterion_oracles());
        let (c8, trained) = criterion_classification();
        out.push(c8);
        out.push(criterion_noise(&sphere, &trained));
        out.push(criterion_budget());
        out
    });
    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    println!(
        "summary: {}/{} criteria pass; failing: {failed:?}; expected failures: {EXPECTED_FAILURES:?}",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    for id in EXPECTED_FAILURES {
        if !failed.contains(id) {
            println!("note: criterion {id} is listed as an expected failure but passed");
        }
    }
    let unexpected: Vec<u32> = failed.into_iter().filter(|id| !EXPECTED_FAILURES.contains(id)).collect();
    if !unexpected.is_empty() {
        eprintln!("unexpected failing criteria: {unexpected:?}");
        std::process::exit(1);
    }
}
