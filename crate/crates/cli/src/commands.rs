use std::io::Write;
use std::path::{Path, PathBuf};

use nptc::eikonal::{
    fast_marching, interpolate_to_points, select_seed, GridScalarField, PointScalarField, SeedSet,
};
use nptc::frames::{build_frame_field, FrameField, NormalPolicy};
use nptc::geometry_io::{load_cloud, normalize_to_unit_cube, write_ply, scalar_colormap, CloudFormat, NeighborIndex};
use nptc::hierarchy::farthest_point_sampling;
use nptc::narrowband::{voxelize_with_index, NarrowBand, VoxelGrid, VoxelIndex};
use nptc::network::{
    base_features, evaluate_with_voting, grad_check, load_checkpoint, predict, save_checkpoint, train,
    write_metrics_csv, EpochMetrics, Model, ModelFragment, NetworkConfig, Sample, Task,
};
use nptc::operator::{build_operator, KernelSpec, NptcOperator};
use nptc::pipeline::{build_geometry, prepare_cloud};
use nptc::synthetic::{make_dataset, read_dataset, sample_shape, write_dataset, ShapeFamily, NORMALIZE_MARGIN};
use nptc::{NptcError, PointCloud, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{combined_hash, input_ref, read_artifact, read_cached, write_artifact, Envelope, InputRef, FORMAT_VERSION};
use crate::cache::dataset_samples;
use crate::config::{RunConfig, Split};

pub const CACHE_ENV: &str = "NPTC_CACHE_DIR";

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> nptc::Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| NptcError::Config(format!("missing required path {key}")))
}

fn envelope<T>(kind: &str, inputs: Vec<InputRef>, params: serde_json::Value, payload: T) -> Envelope<T> {
    Envelope {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        inputs,
        params,
        payload,
    }
}

/// Loads a cloud and maps it into the unit cube when it is not already there.
fn load_source(path: &Path) -> nptc::Result<PointCloud> {
    if !path.exists() {
        return Err(NptcError::CacheMiss(format!("{} does not exist", path.display())));
    }
    let cloud = load_cloud(path, CloudFormat::from_path(path))?;
    if cloud.is_normalized() {
        Ok(cloud)
    } else {
        normalize_to_unit_cube(&cloud, NORMALIZE_MARGIN)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BandPayload {
    pub resolution: usize,
    pub epsilon: f64,
    pub voxels: Vec<VoxelIndex>,
    pub distances: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl BandPayload {
    fn to_band(&self) -> nptc::Result<NarrowBand> {
        NarrowBand::from_parts(
            VoxelGrid::new(self.resolution)?,
            self.epsilon,
            self.voxels.clone(),
            self.distances.clone(),
            self.occupied.clone(),
        )
    }
}

/// Unreached voxels and out-of-band points are stored as `null`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DistancePayload {
    pub seed_point: Option<usize>,
    pub seed_slots: Vec<usize>,
    pub grid: Vec<Option<f64>>,
    pub points: Vec<Option<f64>>,
}

impl DistancePayload {
    fn point_field(&self) -> PointScalarField {
        PointScalarField {
            values: self.points.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            out_of_band: self.points.iter().map(Option::is_none).collect(),
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FpsPayload {
    pub start: usize,
    pub indices: Vec<usize>,
}

pub fn voxelize(cfg: &RunConfig) -> nptc::Result<()> {
    let input = require(&cfg.paths.input, "paths.input (--in)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let cloud = load_source(input)?;
    let index = NeighborIndex::new(&cloud);
    let res = cfg.pipeline.resolution;
    let epsilon = cfg.pipeline.epsilon.resolve(res);
    let band = voxelize_with_index(&cloud, &index, res, epsilon)?;
    let payload = BandPayload {
        resolution: res,
        epsilon,
        voxels: band.voxels().to_vec(),
        distances: band.distances().to_vec(),
        occupied: band.occupancy().to_vec(),
    };
    let params = json!({ "resolution": res, "epsilon": epsilon });
    write_artifact(out, &envelope("band", vec![input_ref("cloud", input)?], params, payload))?;
    println!(
        "band: {} active voxels, resolution {res}, epsilon {epsilon}, active/M^2 {:.3}",
        band.len(),
        band.area_constant()
    );
    Ok(())
}

pub fn distance(cfg: &RunConfig) -> nptc::Result<()> {
    let band_path = require(&cfg.paths.band, "paths.band (--band)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let env: Envelope<BandPayload> = read_artifact(band_path, "band")?;
    let cloud_ref = env.input("cloud")?.clone();
    let cloud = load_source(&cloud_ref.path)?;
    let band = env.payload.to_band()?;
    let seeds = match cfg.plane_seed {
        Some(p) => SeedSet::plane_edge(&band, p.axis, p.side)?,
        None => select_seed(&cloud, &band, cfg.pipeline.seed_policy)?,
    };
    let field: GridScalarField = fast_marching(&band, &seeds)?;
    let rho = interpolate_to_points(&field, &band, &cloud)?;
    let payload = DistancePayload {
        seed_point: seeds.seed_point(),
        seed_slots: seeds.slots().to_vec(),
        grid: field.values().iter().map(|&v| finite(v)).collect(),
        points: rho
            .values
            .iter()
            .zip(&rho.out_of_band)
            .map(|(&v, &o)| if o { None } else { finite(v) })
            .collect(),
    };
    let params = json!({ "seed_policy": cfg.pipeline.seed_policy, "plane_seed": cfg.plane_seed });
    let inputs = vec![cloud_ref, input_ref("band", band_path)?];
    write_artifact(out, &envelope("distance", inputs, params, payload))?;
    let max = rho.values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    println!(
        "distance: {} seed voxels, max rho {max:.6}, {} points outside the band",
        seeds.slots().len(),
        rho.out_of_band.iter().filter(|&&o| o).count()
    );
    Ok(())
}

pub fn frames(cfg: &RunConfig) -> nptc::Result<()> {
    let rho_path = require(&cfg.paths.rho, "paths.rho (--rho)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let env: Envelope<DistancePayload> = read_artifact(rho_path, "distance")?;
    let cloud_ref = env.input("cloud")?.clone();
    let cloud = load_source(&cloud_ref.path)?;
    let index = NeighborIndex::new(&cloud);
    let policy = cfg.pipeline.normal_policy.unwrap_or(if cloud.normals().is_some() {
        NormalPolicy::UseInput
    } else {
        NormalPolicy::LpcaCentroidOriented
    });
    let field = build_frame_field(
        &cloud,
        &index,
        &env.payload.point_field(),
        env.payload.seed_point,
        cfg.pipeline.k,
        policy,
    )?;
    let params = json!({ "k": cfg.pipeline.k, "normal_policy": policy });
    let singular = field.singular_count();
    let inputs = vec![cloud_ref, input_ref("distance", rho_path)?];
    write_artifact(out, &envelope("frames", inputs, params, field))?;
    println!("frames: {} points, {singular} singular", cloud.len());
    Ok(())
}

pub fn fps(cfg: &RunConfig) -> nptc::Result<()> {
    let input = require(&cfg.paths.input, "paths.input (--in)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let cloud = load_source(input)?;
    let n = cfg.fps.n.unwrap_or(cloud.len());
    let all: Vec<usize> = (0..cloud.len()).collect();
    let indices = farthest_point_sampling(&cloud, &all, n, cfg.fps.start)?;
    let params = json!({ "n": n, "start": cfg.fps.start });
    let payload = FpsPayload {
        start: cfg.fps.start,
        indices,
    };
    write_artifact(out, &envelope("fps", vec![input_ref("cloud", input)?], params, payload))?;
    println!("fps: {n} of {} points", cloud.len());
    Ok(())
}

struct OperatorInputs {
    cloud: PointCloud,
    frames: FrameField,
    out_indices: Vec<usize>,
    refs: Vec<InputRef>,
}

/// Loads and checks the frames (and optional FPS) artifacts an operator is built from.
fn operator_inputs(cfg: &RunConfig) -> nptc::Result<OperatorInputs> {
    let frames_path = require(&cfg.paths.frames, "paths.frames (--frames)")?;
    let env: Envelope<FrameField> = read_artifact(frames_path, "frames")?;
    let cloud_ref = env.input("cloud")?;
    let cloud = load_source(&cloud_ref.path)?;
    let mut refs = vec![input_ref("frames", frames_path)?];
    let out_indices = match &cfg.paths.fps {
        Some(p) => {
            let f: Envelope<FpsPayload> = read_artifact(p, "fps")?;
            if f.input("cloud")?.sha256 != cloud_ref.sha256 {
                return Err(NptcError::CacheMiss(format!(
                    "{} was sampled from a different cloud than {}",
                    p.display(),
                    frames_path.display()
                )));
            }
            refs.push(input_ref("fps", p)?);
            f.payload.indices
        }
        None => (0..cloud.len()).collect(),
    };
    Ok(OperatorInputs {
        cloud,
        frames: env.payload,
        out_indices,
        refs,
    })
}

pub fn op_build(cfg: &RunConfig) -> nptc::Result<()> {
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let inputs = operator_inputs(cfg)?;
    let index = NeighborIndex::new(&inputs.cloud);
    let op = build_operator(&inputs.cloud, &index, &inputs.frames, &inputs.out_indices, &cfg.kernel)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, op.encode(&combined_hash(&inputs.refs)))?;
    println!(
        "operator: {} outputs, {} taps per row, delta {:.6}",
        op.output_len(),
        op.taps_per_row(),
        op.delta()
    );
    Ok(())
}

/// Reads a whitespace-separated numeric table, one row per point.
fn read_table(path: &Path) -> nptc::Result<Tensor2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => NptcError::CacheMiss(format!("{} does not exist", path.display())),
        _ => NptcError::Io(e),
    })?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| NptcError::Parse {
                line: ln + 1,
                message: format!("{}: {e}", path.display()),
            })?;
        rows.push(row);
    }
    Tensor2::from_rows(&rows).map_err(|e| NptcError::Parse {
        line: 0,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_table(path: &Path, t: &Tensor2<f64>) -> nptc::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..t.rows() {
        let line: Vec<String> = t.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn conv(cfg: &RunConfig) -> nptc::Result<()> {
    let op_path = require(&cfg.paths.operator, "paths.operator (--op)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let (op, hash) = NptcOperator::decode(&read_cached(op_path)?)?;
    let inputs = operator_inputs(cfg)?;
    if combined_hash(&inputs.refs) != hash {
        return Err(NptcError::CacheMiss(format!(
            "{} was not built from the given frames/fps artifacts",
            op_path.display()
        )));
    }
    let features = match &cfg.paths.features {
        Some(p) => read_table(p)?,
        None => base_features(inputs.cloud.points()),
    };
    let c_in = features.cols();
    let c_out = cfg.conv.c_out;
    let fan_in = op.taps_per_row() * c_in;
    let a = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.conv.weight_seed);
    let weights: Vec<f64> = (0..fan_in * c_out).map(|_| rng.random_range(-a..=a)).collect();
    let result = op.apply(&weights, &features, c_out)?;
    write_table(out, &result)?;
    println!("conv: {} x {c_in} -> {} x {c_out}", features.rows(), result.rows());
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> nptc::Result<()> {
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let ds = make_dataset(&cfg.dataset)?;
    write_dataset(out, &ds)?;
    println!(
        "dataset: {} clouds ({} train, {} test) in {}",
        ds.entries.len(),
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn cache_dir(cfg: &RunConfig, data: &Path) -> PathBuf {
    cfg.paths
        .cache_dir
        .clone()
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
        .unwrap_or_else(|| data.join(".nptc-cache"))
}

fn subset(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Fills in a zero class/part count from the dataset.
pub fn resolve_task(network: &mut NetworkConfig, families: usize, max_part: usize) {
    network.task = match network.task {
        Task::Classification { classes: 0 } => Task::Classification { classes: families },
        Task::Segmentation { parts: 0 } => Task::Segmentation { parts: max_part + 1 },
        t => t,
    };
}

pub fn train_cmd(mut cfg: RunConfig) -> nptc::Result<()> {
    let data = require(&cfg.paths.data, "paths.data (--data)")?.to_path_buf();
    let out = require(&cfg.paths.out, "paths.out (--out)")?.to_path_buf();
    let ds = read_dataset(&data)?;
    let max_part = ds.entries.iter().flat_map(|e| e.parts.iter().copied()).max().unwrap_or(0);
    resolve_task(&mut cfg.network, ds.spec.families.len(), max_part);
    crate::log_config(&cfg);
    cfg.network.validate()?;
    if let Task::Classification { classes } = cfg.network.task {
        if classes != ds.spec.families.len() {
            return Err(NptcError::Config(format!(
                "network.task has {classes} classes but {} has {} families",
                data.display(),
                ds.spec.families.len()
            )));
        }
    }
    let samples = dataset_samples(&data, &ds, &cfg.dataset_pipeline, &cfg.network, &cache_dir(&cfg, &data))?;
    let train_set = subset(&samples, &ds.train);
    let test_set = subset(&samples, &ds.test);
    let mut model = Model::<f32>::new(cfg.network.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &train_set, &test_set, &cfg.train)?;
    std::fs::create_dir_all(&out)?;
    save_checkpoint(&out.join("model.ckpt"), &model)?;
    write_metrics_csv(&out.join("metrics.csv"), &outcome.metrics)?;
    if let Some(m) = outcome.metrics.last() {
        println!("train: epoch {} loss {:.6} accuracy {:.4}", m.epoch, m.loss, m.accuracy);
    }
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig) -> nptc::Result<()> {
    let model_path = require(&cfg.paths.model, "paths.model (--model)")?;
    let data = require(&cfg.paths.data, "paths.data (--data)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let model = load_checkpoint(model_path).map_err(|e| match e {
        NptcError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            NptcError::CacheMiss(format!("{} does not exist", model_path.display()))
        }
        other => other,
    })?;
    let ds = read_dataset(data)?;
    let samples = dataset_samples(data, &ds, &cfg.dataset_pipeline, model.config(), &cache_dir(cfg, data))?;
    let picked = match cfg.eval.split {
        Split::Train => subset(&samples, &ds.train),
        Split::Test => subset(&samples, &ds.test),
        Split::All => samples,
    };
    let accuracy = evaluate_with_voting(
        &model,
        &picked,
        cfg.eval.voting_rounds,
        cfg.eval.voting_seed,
        &cfg.train.augmentation,
    )?;
    let mut loss = 0.0;
    for s in &picked {
        let p = predict(&model, s)?;
        let targets = match model.config().task {
            Task::Classification { .. } => vec![s.label],
            Task::Segmentation { .. } => s.part_labels.clone().unwrap_or_default(),
        };
        let mean: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -p.get(r, t).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len().max(1) as f64;
        loss += mean;
    }
    loss /= picked.len().max(1) as f64;
    write_metrics_csv(out, &[EpochMetrics { epoch: 0, loss, accuracy }])?;
    println!("eval: {} clouds, loss {loss:.6}, accuracy {accuracy:.4}", picked.len());
    Ok(())
}

pub fn export_ply(cfg: &RunConfig) -> nptc::Result<()> {
    let rho_path = require(&cfg.paths.rho, "paths.rho (--rho)")?;
    let out = require(&cfg.paths.out, "paths.out (--out)")?;
    let env: Envelope<DistancePayload> = read_artifact(rho_path, "distance")?;
    let cloud_ref = env.input("cloud")?;
    let cloud = load_source(&cloud_ref.path)?;
    let rho: Vec<f64> = env.payload.points.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let finite_max = rho.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let shown: Vec<f64> = rho.iter().map(|&v| if v.is_finite() { v } else { finite_max }).collect();
    let colors = scalar_colormap(&shown)?;
    let mut extra: Vec<(String, Vec<f64>)> = vec![("rho".into(), shown)];
    if let Some(fp) = &cfg.paths.frames {
        let f: Envelope<FrameField> = read_artifact(fp, "frames")?;
        if f.input("cloud")?.sha256 != cloud_ref.sha256 {
            return Err(NptcError::CacheMiss(format!(
                "{} belongs to a different cloud than {}",
                fp.display(),
                rho_path.display()
            )));
        }
        for (a, name) in ["u1x", "u1y", "u1z"].iter().enumerate() {
            extra.push((name.to_string(), f.payload.frames().iter().map(|fr| fr.u1[a]).collect()));
        }
    }
    let extra_refs: Vec<(&str, &[f64])> = extra.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    write_ply(out, &cloud, Some(&colors), &extra_refs)?;
    println!("export: {} points to {}", cloud.len(), out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradCheckLine {
    seed: u64,
    max_relative_error: f64,
    checked: usize,
    skipped: usize,
}

/// Gradient check of a small multi-level network on a sphere sample, once per seed.
pub fn gradcheck(cfg: &RunConfig) -> nptc::Result<f64> {
    let g = &cfg.gradcheck;
    if g.levels == 0 || g.channels == 0 || g.channels % 2 != 0 {
        return Err(NptcError::Config("gradcheck needs at least one level and an even channel count".into()));
    }
    let kernel = KernelSpec {
        taps_per_axis: g.taps_per_axis,
        ..KernelSpec::default()
    };
    let ncfg = NetworkConfig {
        ratios: (0..g.levels).map(|l| 0.5f64.powi(l as i32)).collect(),
        widths: vec![g.channels; g.levels],
        blocks: vec![1; g.levels],
        kernels: vec![kernel; g.levels],
        task: Task::Classification { classes: 3 },
        input_channels: 3,
    };
    ncfg.validate()?;
    let mut worst: f64 = 0.0;
    for &seed in &g.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_shape(ShapeFamily::Sphere, g.points, &Default::default(), None, &mut rng)?;
        let prepared = prepare_cloud(&s.cloud, &cfg.dataset_pipeline)?;
        let geom = build_geometry(&prepared.cloud, &prepared.frames, &ncfg.ratios, &ncfg.kernels, 0)?;
        let model = Model::<f64>::new(ncfg.clone(), seed)?;
        let input = base_features(prepared.cloud.points());
        let fragment = ModelFragment {
            model: &model,
            geometry: &geom,
        };
        let report = grad_check(&fragment, model.params(), &input, seed)?;
        let line = GradCheckLine {
            seed,
            max_relative_error: report.max_relative_error,
            checked: report.checked,
            skipped: report.skipped,
        };
        println!("{}", serde_json::to_string(&line).expect("report serializes"));
        worst = worst.max(report.max_relative_error);
    }
    Ok(worst)
}
