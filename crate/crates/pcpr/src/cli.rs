//! Command implementations behind the binary: prior training, surface
//! reconstruction, evaluation, the 2D circle-to-square demo, gradient
//! self-checks, and manifest-driven reruns.
//!
//! Every command writes a `RunManifest` JSON next to its primary output with
//! the fully resolved configuration, so a run can be reproduced byte for
//! byte from the manifest alone (timestamps and durations live only in the
//! manifest itself).

use crate::error::{Error, Result};
use crate::geometry::{
    build_index, inflated_bbox, normalize_region, partition_regions, sample_queries,
    PointCloud, SigmaMode,
};
use crate::gradcheck::{double_backprop_suite, first_order_suite, SuiteResult};
use crate::io::{self, MeshFormat};
use crate::mesher::{eval_sdf_grid, marching_cubes, marching_squares_with, Polyline};
use crate::metrics::{evaluate_sets, sample_mesh_surface, MetricConfig, MetricReport};
use crate::nets::ArchConfig;
use crate::prior::{train_local_prior, write_loss_history, LossMode, TrainConfig};
use crate::rng::{self, Stream};
use crate::specialize::{specialize, SpecializeConfig, SpecializeMode};
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ----- manifest -------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
    pub duration_secs: f64,
    pub timestamp_unix: f64,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config,
            duration_secs: 0.0,
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        }
    }

    pub fn manifest_path(primary_output: &Path) -> PathBuf {
        let mut name = primary_output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        primary_output.with_file_name(name)
    }

    fn write(&self, primary_output: &Path) -> Result<PathBuf> {
        let path = Self::manifest_path(primary_output);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

// ----- train-prior ------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainPriorSettings {
    pub grid: usize,
    pub train: TrainConfig,
    pub write_loss_history: bool,
}

impl Default for TrainPriorSettings {
    fn default() -> Self {
        TrainPriorSettings {
            grid: 6,
            train: TrainConfig::default(),
            write_loss_history: true,
        }
    }
}

fn collect_cloud_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("xyz") | Some("ply") | Some("txt")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no readable point-cloud files (.xyz/.ply/.txt) under {}",
            input.display()
        )));
    }
    Ok(files)
}

/// Split every input cloud into grid cells, normalize the non-degenerate
/// cells into local regions, train the prior, and write checkpoint, loss
/// history, and manifest.
pub fn cmd_train_prior(
    input: &Path,
    out: &Path,
    settings: &TrainPriorSettings,
) -> Result<RunManifest> {
    let start = Instant::now();
    let files = collect_cloud_files(input)?;
    let mut regions = Vec::new();
    for file in &files {
        let cloud = io::read_pointcloud(file)?;
        if cloud.dim() != settings.train.arch.dim {
            return Err(Error::DimMismatch {
                expected: settings.train.arch.dim,
                found: cloud.dim(),
                context: format!("cloud {}", file.display()),
            });
        }
        let mut rs = partition_regions(&cloud, settings.grid)?;
        log::info!("{}: {} regions from grid {}", file.display(), rs.len(), settings.grid);
        regions.append(&mut rs);
    }
    if regions.is_empty() {
        return Err(Error::Config("no usable regions in the input clouds".into()));
    }

    let checkpoint = train_local_prior(&regions, &settings.train)?;
    io::save_prior_checkpoint(&checkpoint, out)?;

    let mut manifest = RunManifest::new(
        "train-prior",
        settings.train.seed,
        serde_json::to_value(settings)?,
    );
    manifest.inputs = files.iter().map(|p| path_str(p)).collect();
    manifest.outputs.push(path_str(out));
    if settings.write_loss_history {
        let loss_path = out.with_extension("loss.txt");
        write_loss_history(&checkpoint.loss_history, &loss_path)?;
        manifest.outputs.push(path_str(&loss_path));
    }
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(manifest)
}

// ----- reconstruct ------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ReconstructSettings {
    pub spec: SpecializeConfig,
    pub mc_res: usize,
    pub bounds_inflate: f64,
    pub sample_count: usize,
    pub pre_scale: bool,
    pub write_loss_history: bool,
    pub save_sdf_checkpoint: bool,
}

impl Default for ReconstructSettings {
    fn default() -> Self {
        ReconstructSettings {
            spec: SpecializeConfig::default(),
            mc_res: 128,
            bounds_inflate: 0.1,
            sample_count: 10_000,
            pre_scale: false,
            write_loss_history: true,
            save_sdf_checkpoint: true,
        }
    }
}

/// Specialize the prior to one cloud, evaluate the SDF lattice, extract the
/// mesh, and write mesh, specialized checkpoint, metric-ready surface
/// samples, and manifest.
pub fn cmd_reconstruct(
    input: &Path,
    prior_path: Option<&Path>,
    out: &Path,
    settings: &ReconstructSettings,
) -> Result<RunManifest> {
    let start = Instant::now();
    let raw_cloud = io::read_pointcloud(input)?;
    if raw_cloud.dim() != 3 {
        return Err(Error::Config(
            "reconstruct expects a 3D cloud; the 2D pipeline lives in demo2d".into(),
        ));
    }

    // optional uniform pre-scale into a unit box for numerically extreme
    // inputs; mesh vertices are mapped back afterward
    let (cloud, transform) = if settings.pre_scale {
        let (lo, hi) = raw_cloud.bbox();
        let scale = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        if scale <= 0.0 {
            return Err(Error::DegenerateRegion { reason: "degenerate input bbox".into() });
        }
        let center: Vec<f64> = (0..3).map(|a| 0.5 * (lo[a] + hi[a])).collect();
        let data: Vec<f64> = raw_cloud
            .iter()
            .flat_map(|p| (0..3).map(|a| (p[a] - center[a]) / scale).collect::<Vec<_>>())
            .collect();
        log::info!("pre-scaling input by 1/{scale:.6} around {center:?}");
        (PointCloud::new(3, data)?, Some((center, scale)))
    } else {
        (raw_cloud, None)
    };

    let prior = prior_path.map(io::load_prior_checkpoint).transpose()?;
    let fixed_cond = if settings.spec.mode == SpecializeMode::FixedCond {
        let p = prior.as_ref().ok_or_else(|| {
            Error::Config("fixed-cond mode requires a prior checkpoint".into())
        })?;
        let region = normalize_region(cloud.clone(), vec![0]).map_err(|e| {
            Error::Config(format!("cannot derive a fixed condition: {e}"))
        })?;
        Some(p.encoder.encode(region.points.coords())?)
    } else {
        None
    };

    let sdf = specialize(&cloud, prior.as_ref(), fixed_cond, &settings.spec)?;

    let (lo, hi) = inflated_bbox(&cloud, settings.bounds_inflate);
    let res = vec![settings.mc_res; 3];
    let grid = eval_sdf_grid(&sdf, &lo, &hi, &res)?;
    let mut mesh = marching_cubes(&grid, 0.0)?;
    if let Some((center, scale)) = &transform {
        for v in &mut mesh.vertices {
            for a in 0..3 {
                v[a] = v[a] * scale + center[a];
            }
        }
    }
    io::write_mesh(&mesh, out, MeshFormat::from_extension(out))?;

    let mut config = serde_json::to_value(settings)?;
    if let Some((center, scale)) = &transform {
        config["pre_scale_applied"] = serde_json::json!({ "center": center, "scale": scale });
    }
    let mut manifest = RunManifest::new("reconstruct", settings.spec.seed, config);
    manifest.inputs.push(path_str(input));
    if let Some(p) = prior_path {
        manifest.inputs.push(path_str(p));
    }
    manifest.outputs.push(path_str(out));

    if settings.save_sdf_checkpoint {
        let ck_path = out.with_extension("sdf.pcpr");
        io::save_global_sdf(&sdf, &ck_path)?;
        manifest.outputs.push(path_str(&ck_path));
    }
    if !mesh.is_empty() && settings.sample_count > 0 {
        let (pos, norm) = sample_mesh_surface(&mesh, settings.sample_count, settings.spec.seed)?;
        let sample_path = out.with_extension("samples.xyz");
        io::write_xyz(&pos, Some(&norm), 3, &sample_path)?;
        manifest.outputs.push(path_str(&sample_path));
    }
    if settings.write_loss_history {
        let loss_path = out.with_extension("loss.txt");
        write_loss_history(&sdf.loss_history, &loss_path)?;
        manifest.outputs.push(path_str(&loss_path));
    }
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok(manifest)
}

// ----- evaluate ---------------------------------------------------------------------

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvaluateSettings {
    pub metric: MetricConfig,
}

fn load_eval_side(
    path: &Path,
    samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Option<Vec<f64>>, usize)> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "xyz" || ext == "txt" {
        let cloud = io::read_pointcloud(path)?;
        return Ok((
            cloud.coords().to_vec(),
            cloud.normals().map(|n| n.to_vec()),
            cloud.dim(),
        ));
    }
    let mesh = io::read_mesh(path)?;
    if mesh.triangles.is_empty() {
        let cloud = io::read_pointcloud(path)?;
        return Ok((
            cloud.coords().to_vec(),
            cloud.normals().map(|n| n.to_vec()),
            cloud.dim(),
        ));
    }
    let (pos, norm) = sample_mesh_surface(&mesh, samples, seed)?;
    Ok((pos, Some(norm), 3))
}

/// Sample both sides when they are meshes, compute the metric block, write
/// the flat key-value report plus a JSON twin, and the manifest.
pub fn cmd_evaluate(
    recon: &Path,
    truth: &Path,
    out: &Path,
    settings: &EvaluateSettings,
) -> Result<(RunManifest, MetricReport)> {
    let start = Instant::now();
    let m = &settings.metric;
    // both sides sample under the same seed so identical inputs compare at
    // exactly zero distance
    let (xp, xn, xd) = load_eval_side(recon, m.sample_count, m.seed)?;
    let (yp, yn, yd) = load_eval_side(truth, m.sample_count, m.seed)?;
    if xd != yd {
        return Err(Error::DimMismatch {
            expected: xd,
            found: yd,
            context: "evaluation operands".into(),
        });
    }
    let report = evaluate_sets(&xp, xn.as_deref(), &yp, yn.as_deref(), xd, m)?;
    std::fs::write(out, report.to_kv_text())?;
    let json_path = out.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;

    let mut manifest = RunManifest::new("evaluate", m.seed, serde_json::to_value(settings)?);
    manifest.inputs = vec![path_str(recon), path_str(truth)];
    manifest.outputs = vec![path_str(out), path_str(&json_path)];
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok((manifest, report))
}

// ----- demo2d ---------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Demo2dSettings {
    pub width: usize,
    pub circle_points: usize,
    pub square_points: usize,
    pub circle_radius: f64,
    pub square_half_extent: f64,
    pub prior_epochs: usize,
    pub spec_steps: usize,
    pub queries_per_batch: usize,
    pub per_point: usize,
    pub k_sigma: usize,
    pub sigma_mode: SigmaMode,
    pub loss_mode: LossMode,
    pub lr: f64,
    pub seed: u64,
    pub mode: SpecializeMode,
    pub contour_res: usize,
    /// pulled-point pass band: at least `pass_fraction` of pulled queries
    /// within `pass_distance` of the square
    pub pass_distance: f64,
    pub pass_fraction: f64,
}

impl Default for Demo2dSettings {
    fn default() -> Self {
        Demo2dSettings {
            width: 64,
            circle_points: 256,
            square_points: 256,
            circle_radius: 0.4,
            square_half_extent: 0.4,
            prior_epochs: 1200,
            spec_steps: 1000,
            queries_per_batch: 512,
            per_point: 40,
            k_sigma: 50,
            sigma_mode: SigmaMode::Stddev,
            loss_mode: LossMode::default(),
            lr: 1e-3,
            seed: 0,
            mode: SpecializeMode::Full,
            contour_res: 128,
            pass_distance: 0.02,
            pass_fraction: 0.95,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Demo2dReport {
    pub mode: SpecializeMode,
    pub pulled_within_fraction: f64,
    pub pulled_pass: bool,
    pub contour_chamfer_l1: f64,
    pub prior_frozen_verified: bool,
    pub transport_rows: usize,
    pub final_prior_loss: f64,
    pub final_spec_loss: f64,
}

pub fn circle_points(n: usize, r: f64) -> PointCloud {
    let pts: Vec<f64> = (0..n)
        .flat_map(|i| {
            let t = (i as f64) / (n as f64) * std::f64::consts::TAU;
            vec![r * t.cos(), r * t.sin()]
        })
        .collect();
    PointCloud::new(2, pts).expect("nonempty circle")
}

pub fn square_boundary_points(n: usize, h: f64) -> PointCloud {
    let perimeter = 8.0 * h;
    let pts: Vec<f64> = (0..n)
        .flat_map(|i| {
            let s = (i as f64) / (n as f64) * perimeter;
            let (edge, t) = ((s / (2.0 * h)) as usize, s % (2.0 * h));
            match edge {
                0 => vec![-h + t, -h],
                1 => vec![h, -h + t],
                2 => vec![h - t, h],
                _ => vec![-h, h - t],
            }
        })
        .collect();
    PointCloud::new(2, pts).expect("nonempty square")
}

/// Exact signed distance to an axis-aligned square boundary (negative inside).
pub fn square_sdf(p: &[f64], h: f64) -> f64 {
    let dx = p[0].abs() - h;
    let dy = p[1].abs() - h;
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    outside + dx.max(dy).min(0.0)
}

/// Resample a contour set uniformly by arclength.
pub fn resample_polylines(contours: &[Polyline], count: usize) -> Vec<f64> {
    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for c in contours {
        let n = c.points.len();
        for i in 0..c.segment_count() {
            segments.push((c.points[i], c.points[(i + 1) % n]));
        }
    }
    let total: f64 = segments
        .iter()
        .map(|(a, b)| ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt())
        .sum();
    let mut out = Vec::with_capacity(count * 2);
    let mut seg_idx = 0;
    let mut seg_start = 0.0;
    for i in 0..count {
        let target = (i as f64 + 0.5) / count as f64 * total;
        loop {
            let (a, b) = segments[seg_idx];
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            if target <= seg_start + len || seg_idx + 1 == segments.len() {
                let t = if len > 0.0 { ((target - seg_start) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push(a[0] + t * (b[0] - a[0]));
                out.push(a[1] + t * (b[1] - a[1]));
                break;
            }
            seg_start += len;
            seg_idx += 1;
        }
    }
    out
}

/// Train a 2D prior on a circle, specialize it to a square, and emit the
/// contour, the query-transport table, and the pulled-point verdict.
pub fn cmd_demo2d(out_dir: &Path, s: &Demo2dSettings) -> Result<(RunManifest, Demo2dReport)> {
    let start = Instant::now();
    std::fs::create_dir_all(out_dir)?;
    let arch = ArchConfig::desk(2, s.width);

    let circle = circle_points(s.circle_points, s.circle_radius);
    let region = normalize_region(circle, vec![0])
        .map_err(|e| Error::Config(format!("degenerate circle region: {e}")))?;
    let train_cfg = TrainConfig {
        epochs: s.prior_epochs,
        queries_per_region: s.queries_per_batch,
        per_point: s.per_point,
        k_sigma: s.k_sigma,
        sigma_mode: s.sigma_mode,
        loss_mode: s.loss_mode,
        adam: crate::autodiff::AdamConfig { lr: s.lr, ..Default::default() },
        seed: s.seed,
        arch: arch.clone(),
    };
    let prior = train_local_prior(&[region], &train_cfg)?;
    let theta2_before = prior.implicit.group.digest();

    let square = square_boundary_points(s.square_points, s.square_half_extent);
    let fixed_cond: Option<Tensor> = if s.mode == SpecializeMode::FixedCond {
        let sq_region = normalize_region(square.clone(), vec![0])
            .map_err(|e| Error::Config(format!("degenerate square region: {e}")))?;
        Some(prior.encoder.encode(sq_region.points.coords())?)
    } else {
        None
    };
    let spec_cfg = SpecializeConfig {
        steps: s.spec_steps,
        queries_per_step: s.queries_per_batch,
        per_point: s.per_point,
        k_sigma: s.k_sigma,
        sigma_mode: s.sigma_mode,
        loss_mode: s.loss_mode,
        adam: crate::autodiff::AdamConfig { lr: s.lr, ..Default::default() },
        seed: rng::derive_seed(s.seed, Stream::Init, 7, 0),
        mode: s.mode,
        arch: None,
    };
    let sdf = specialize(&square, Some(&prior), fixed_cond, &spec_cfg)?;
    let prior_frozen_verified =
        !s.mode.trains_implicit() && sdf.implicit.group.digest() == theta2_before;

    // fresh evaluation queries around the square, pulled through the SDF
    let index = build_index(&square)?;
    let eval_batch = sample_queries(
        &square,
        &index,
        8,
        s.k_sigma,
        s.sigma_mode,
        rng::derive_seed(s.seed, Stream::Metrics, 3, 0),
    );
    let transport = sdf.transport(&eval_batch.queries)?;
    let n_rows = transport.s.len();
    let within = (0..n_rows)
        .filter(|&i| {
            square_sdf(&transport.pulled[i * 2..i * 2 + 2], s.square_half_extent).abs()
                <= s.pass_distance
        })
        .count();
    let pulled_within_fraction = within as f64 / n_rows as f64;
    let pulled_pass = pulled_within_fraction >= s.pass_fraction;

    // contour of the learned SDF
    let (lo, hi) = inflated_bbox(&square, 0.1);
    let grid = eval_sdf_grid(&sdf, &lo, &hi, &[s.contour_res, s.contour_res])?;
    let contours = marching_squares_with(&grid, 0.0, |p| {
        sdf.eval_one(p).unwrap_or(f64::NAN)
    })?;
    let contour_chamfer_l1 = if contours.is_empty() {
        f64::INFINITY
    } else {
        let got = resample_polylines(&contours, 2048);
        let truth = square_boundary_points(2048, s.square_half_extent);
        crate::metrics::chamfer(&got, truth.coords(), 2, 1)?
    };

    // artifacts
    let transport_path = out_dir.join("transport.csv");
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&transport_path)?);
        writeln!(f, "qg_x,qg_y,ql_x,ql_y,s")?;
        for i in 0..n_rows {
            writeln!(
                f,
                "{:.9},{:.9},{:.9},{:.9},{:.9}",
                transport.qg[i * 2],
                transport.qg[i * 2 + 1],
                transport.ql[i * 2],
                transport.ql[i * 2 + 1],
                transport.s[i]
            )?;
        }
    }
    let contour_path = out_dir.join("contour.txt");
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&contour_path)?);
        for (ci, c) in contours.iter().enumerate() {
            writeln!(f, "# contour {ci} closed={}", c.closed)?;
            for p in &c.points {
                writeln!(f, "{:.9} {:.9}", p[0], p[1])?;
            }
        }
    }
    write_loss_history(&prior.loss_history, &out_dir.join("prior_loss.txt"))?;
    write_loss_history(&sdf.loss_history, &out_dir.join("spec_loss.txt"))?;

    let report = Demo2dReport {
        mode: s.mode,
        pulled_within_fraction,
        pulled_pass,
        contour_chamfer_l1,
        prior_frozen_verified,
        transport_rows: n_rows,
        final_prior_loss: prior.loss_history.last().map(|x| x.1).unwrap_or(f64::NAN),
        final_spec_loss: sdf.loss_history.last().map(|x| x.1).unwrap_or(f64::NAN),
    };
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    let mut manifest = RunManifest::new("demo2d", s.seed, serde_json::to_value(s)?);
    manifest.outputs = vec![
        path_str(&report_path),
        path_str(&transport_path),
        path_str(&contour_path),
    ];
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(&report_path)?;
    Ok((manifest, report))
}

// ----- grad-check -------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GradCheckSettings {
    pub first_order_instances: usize,
    pub double_backprop_instances: usize,
    pub max_layers: usize,
    pub max_width: usize,
    pub seed: u64,
    pub first_order_tol: f64,
    pub double_backprop_tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            first_order_instances: 100,
            double_backprop_instances: 20,
            max_layers: 5,
            max_width: 64,
            seed: 0,
            first_order_tol: 1e-4,
            double_backprop_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub first_order: SuiteResult,
    pub double_backprop: SuiteResult,
}

pub fn cmd_grad_check(
    out: &Path,
    s: &GradCheckSettings,
) -> Result<(RunManifest, GradCheckReport)> {
    let start = Instant::now();
    let first_order = first_order_suite(
        s.first_order_instances,
        s.max_layers,
        s.max_width,
        s.seed,
        s.first_order_tol,
    )?;
    println!(
        "first-order: {} components, max relative error {:.3e}",
        first_order.components_checked, first_order.max_rel_err
    );
    let double_backprop = double_backprop_suite(
        s.double_backprop_instances,
        s.max_layers.min(3),
        s.max_width.min(16),
        s.seed,
        s.double_backprop_tol,
    )?;
    println!(
        "double-backprop: {} components, max relative error {:.3e}",
        double_backprop.components_checked, double_backprop.max_rel_err
    );
    let report = GradCheckReport { first_order, double_backprop };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    let mut manifest = RunManifest::new("grad-check", s.seed, serde_json::to_value(s)?);
    manifest.outputs = vec![path_str(out)];
    manifest.duration_secs = start.elapsed().as_secs_f64();
    manifest.write(out)?;
    Ok((manifest, report))
}

// ----- rerun ------------------------------------------------------------------------

/// Re-execute a recorded command from its manifest, optionally redirecting
/// outputs into another directory.
pub fn cmd_rerun(manifest_path: &Path, out_dir: Option<&Path>) -> Result<RunManifest> {
    let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let redirect = |orig: &str| -> PathBuf {
        let p = PathBuf::from(orig);
        match out_dir {
            Some(d) => d.join(p.file_name().unwrap_or_default()),
            None => p,
        }
    };
    match manifest.command.as_str() {
        "train-prior" => {
            let settings: TrainPriorSettings = serde_json::from_value(manifest.config.clone())?;
            let input = PathBuf::from(&manifest.inputs[0]);
            // a directory input is recorded as its expanded file list; rerun
            // from the first file's parent when several were used
            let input = if manifest.inputs.len() > 1 {
                input.parent().map(|p| p.to_path_buf()).unwrap_or(input)
            } else {
                input
            };
            cmd_train_prior(&input, &redirect(&manifest.outputs[0]), &settings)
        }
        "reconstruct" => {
            let mut config = manifest.config.clone();
            if let Some(obj) = config.as_object_mut() {
                obj.remove("pre_scale_applied");
            }
            let settings: ReconstructSettings = serde_json::from_value(config)?;
            let input = PathBuf::from(&manifest.inputs[0]);
            let prior = manifest.inputs.get(1).map(PathBuf::from);
            cmd_reconstruct(
                &input,
                prior.as_deref(),
                &redirect(&manifest.outputs[0]),
                &settings,
            )
        }
        "evaluate" => {
            let settings: EvaluateSettings = serde_json::from_value(manifest.config.clone())?;
            cmd_evaluate(
                Path::new(&manifest.inputs[0]),
                Path::new(&manifest.inputs[1]),
                &redirect(&manifest.outputs[0]),
                &settings,
            )
            .map(|(m, _)| m)
        }
        "demo2d" => {
            let settings: Demo2dSettings = serde_json::from_value(manifest.config.clone())?;
            let dir = match out_dir {
                Some(d) => d.to_path_buf(),
                None => PathBuf::from(&manifest.outputs[0])
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_default(),
            };
            cmd_demo2d(&dir, &settings).map(|(m, _)| m)
        }
        "grad-check" => {
            let settings: GradCheckSettings = serde_json::from_value(manifest.config.clone())?;
            cmd_grad_check(&redirect(&manifest.outputs[0]), &settings).map(|(m, _)| m)
        }
        other => Err(Error::Config(format!("unknown command '{other}' in manifest"))),
    }
}
