//! Subcommand implementations. Each run writes its artifacts plus a
//! `manifest.json` provenance record into its output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use rolls_core::geometry::{Point3, PointCloud};
use rolls_core::grid::OccupancyGrid;
use rolls_core::io::{load_cloud, load_ply_ascii, save_pgm, save_ply_ascii, CloudFormat};
use rolls_core::metrics::{evaluate_grid, extract_surface, MetricsConfig};
use rolls_core::model::{
    finetune_stage2, infer_occupancy, lidar_teacher_occupancy, train_stage1, write_loss_csv,
    FrameData, Stage2Frame,
};
use rolls_core::nn::{load_checkpoint, save_checkpoint, ParamStore};
use rolls_core::pseudo_label::{
    build_height_map, generate_occupancy_queries, query_height_labels, QueryGenConfig,
};
use rolls_core::synth::{
    demo_scene, ground_truth_occupancy, raycast_lidar, scan_pattern, simulate_radar, SceneSpec,
};

use crate::config::{ensure_dir, require_exists, ConfigArgs, Manifest, RunConfig};
use crate::dataset::{
    labels_dir, load_frame_cloud, save_frame_cloud, survey_pose, DatasetManifest, FrameLabels,
    FrameMeta,
};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

fn parse_point(flag: &str, text: &str) -> Result<Point3, CliError> {
    let parts: Vec<_> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!(
            "{flag}: expected 'x,y,z', got '{text}'"
        )));
    }
    let coord = |s: &str| -> Result<f64, CliError> {
        s.parse()
            .map_err(|_| CliError::Usage(format!("{flag}: '{s}' is not a number")))
    };
    Ok(Point3::new(
        coord(parts[0])?,
        coord(parts[1])?,
        coord(parts[2])?,
    ))
}

fn load_any_cloud(flag: &str, path: &Path) -> Result<PointCloud, CliError> {
    require_exists(flag, path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("ply") {
        return Ok(PointCloud::new(load_ply_ascii(path).map_err(runtime)?));
    }
    let format = CloudFormat::from_extension(path).ok_or_else(|| {
        CliError::Usage(format!("{flag}: unknown cloud extension: {}", path.display()))
    })?;
    Ok(load_cloud(path, format).map_err(runtime)?.cloud)
}

// ---- synth -------------------------------------------------------------

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Scene description (JSON); a built-in demo scene when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Number of frames along the survey trajectory.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    let scene: SceneSpec = match &args.scene {
        Some(path) => {
            require_exists("--scene", path)?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("--scene: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("--scene: invalid JSON: {e}")))?
        }
        None => demo_scene(cfg.model.seed),
    };
    scene.validate().map_err(|e| CliError::Usage(format!("--scene: {e}")))?;
    if args.frames == 0 {
        return Err(CliError::Usage("--frames: must be >= 1".to_string()));
    }
    ensure_dir(&args.out)?;
    let mut manifest = Manifest::new("synth", &cfg);
    manifest.input("scene", scene.name.clone());

    let t0 = Instant::now();
    let mut frames = Vec::new();
    for i in 0..args.frames {
        let id = format!("{i:03}");
        let dir = args.out.join("frames").join(&id);
        ensure_dir(&dir)?;
        let pose = survey_pose(&cfg, i);
        let lidar = raycast_lidar(
            &scene,
            &pose,
            cfg.scan.n_azimuth,
            cfg.scan.n_elevation,
            cfg.scan.max_range,
        )
        .map_err(runtime)?;
        let scan = scan_pattern(
            &pose,
            cfg.scan.n_azimuth,
            cfg.scan.n_elevation,
            cfg.scan.max_range,
        )
        .map_err(runtime)?;
        let mut noise = cfg.noise.clone();
        noise.seed = cfg.noise.seed.wrapping_add(i as u64);
        let radar = simulate_radar(&scene, &scan, &noise).map_err(runtime)?;
        let (lidar_rel, radar_rel) = (
            format!("frames/{id}/lidar.pcd"),
            format!("frames/{id}/radar.pcd"),
        );
        save_frame_cloud(&lidar, &args.out.join(&lidar_rel))?;
        save_frame_cloud(&radar, &args.out.join(&radar_rel))?;
        manifest.output(lidar_rel.clone());
        manifest.output(radar_rel.clone());
        frames.push(FrameMeta {
            id,
            pose,
            lidar: lidar_rel,
            radar: radar_rel,
        });
    }
    manifest.timing("frames", ms(t0));

    let t1 = Instant::now();
    let gt = ground_truth_occupancy(&scene, &cfg.grid).map_err(runtime)?;
    gt.save(&args.out.join("gt.grid")).map_err(runtime)?;
    manifest.output("gt.grid");
    manifest.timing("ground_truth", ms(t1));

    DatasetManifest {
        scene,
        scan: cfg.scan.clone(),
        frames,
        gt_grid: "gt.grid".to_string(),
    }
    .save(&args.out)?;
    manifest.output("dataset.json");
    manifest.save(&args.out)?;
    println!("synth: {} frames -> {}", args.frames, args.out.display());
    Ok(())
}

// ---- labelgen ----------------------------------------------------------

#[derive(Debug, Args)]
pub struct LabelgenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
}

pub fn labelgen(args: &LabelgenArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    require_exists("--dataset", &args.dataset)?;
    let ds = DatasetManifest::load(&args.dataset)?;
    let [nx, ny, _] = cfg.grid.dims().map_err(runtime)?;
    let out = labels_dir(&args.dataset);
    ensure_dir(&out)?;
    let mut manifest = Manifest::new("labelgen", &cfg);
    manifest.input("dataset", args.dataset.display().to_string());
    let t0 = Instant::now();
    for (i, frame) in ds.frames.iter().enumerate() {
        let lidar = load_frame_cloud(&args.dataset, &frame.lidar, frame)?;
        let radar = load_frame_cloud(&args.dataset, &frame.radar, frame)?;
        let queries = generate_occupancy_queries(
            &radar,
            &QueryGenConfig {
                r_occ: cfg.model.r_occ,
                negatives_per_point: cfg.model.negatives_per_point,
                seed: cfg.model.seed.wrapping_add(i as u64),
                ..QueryGenConfig::default()
            },
        );
        let (hmap, _) = build_height_map(
            &lidar,
            (cfg.grid.x_range.0, cfg.grid.y_range.0),
            cfg.grid.voxel.0,
            (nx, ny),
        );
        let heights = query_height_labels(&hmap, &radar);
        FrameLabels { queries, heights }.save(&out, &frame.id)?;
        manifest.output(format!("labels/{}.json", frame.id));
    }
    manifest.timing("labelgen", ms(t0));
    manifest.save(&out)?;
    println!(
        "labelgen: {} frames -> {}",
        ds.frames.len(),
        out.display()
    );
    Ok(())
}

// ---- train / finetune --------------------------------------------------

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Label directory; defaults to `<dataset>/labels`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_frames(
    dataset: &Path,
    labels: &Path,
    ds: &DatasetManifest,
) -> Result<Vec<FrameData>, CliError> {
    ds.frames
        .iter()
        .map(|frame| {
            let radar = load_frame_cloud(dataset, &frame.radar, frame)?;
            let l = FrameLabels::load(labels, &frame.id)?;
            Ok(FrameData {
                frame_id: frame.id.clone(),
                radar,
                queries: l.queries,
                heights: l.heights,
            })
        })
        .collect()
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    require_exists("--dataset", &args.dataset)?;
    let labels = args
        .labels
        .clone()
        .unwrap_or_else(|| labels_dir(&args.dataset));
    require_exists("--labels", &labels)?;
    let ds = DatasetManifest::load(&args.dataset)?;
    ensure_dir(&args.out)?;
    let mut manifest = Manifest::new("train", &cfg);
    manifest.input("dataset", args.dataset.display().to_string());
    manifest.input("labels", labels.display().to_string());

    let t0 = Instant::now();
    let frames = load_frames(&args.dataset, &labels, &ds)?;
    manifest.timing("load", ms(t0));

    let t1 = Instant::now();
    let (store, rows) = train_stage1(&frames, &cfg.grid, &cfg.model).map_err(runtime)?;
    manifest.timing("train", ms(t1));

    let config_json = serde_json::to_string(&cfg).map_err(runtime)?;
    save_checkpoint(&store, &config_json, true, &args.out.join("checkpoint.bin"))
        .map_err(runtime)?;
    write_loss_csv(&rows, &args.out.join("losses.csv")).map_err(runtime)?;
    manifest.output("checkpoint.bin");
    manifest.output("losses.csv");
    manifest.save(&args.out)?;
    let last = rows.last().map(|r| r.total).unwrap_or(f64::NAN);
    println!(
        "train: {} iterations, final loss {last:.6} -> {}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory (LiDAR frames drive the teacher grids).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Stage-1 checkpoint to continue from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Loads a checkpoint plus the RunConfig echoed into it. Explicit
/// `--config`/flags take precedence over the embedded config.
fn load_run_checkpoint(
    args: &ConfigArgs,
    path: &Path,
) -> Result<(ParamStore, RunConfig), CliError> {
    require_exists("--checkpoint", path)?;
    let ckpt = load_checkpoint(path).map_err(runtime)?;
    let cfg = if args.config.is_some() {
        args.resolve()?
    } else {
        let mut cfg: RunConfig = serde_json::from_str(&ckpt.config_json)
            .map_err(|e| CliError::Runtime(format!("checkpoint config: {e}")))?;
        if let Some(seed) = args.seed {
            cfg.model.seed = seed;
        }
        if let Some(iters) = args.iterations {
            cfg.model.iterations = iters;
        }
        if let Some(bs) = args.batch_size {
            cfg.model.batch_size = bs;
        }
        cfg.validate()?;
        cfg
    };
    Ok((ckpt.store, cfg))
}

pub fn finetune(args: &FinetuneArgs) -> Result<(), CliError> {
    require_exists("--dataset", &args.dataset)?;
    let (store, cfg) = load_run_checkpoint(&args.config, &args.checkpoint)?;
    let ds = DatasetManifest::load(&args.dataset)?;
    ensure_dir(&args.out)?;
    let mut manifest = Manifest::new("finetune", &cfg);
    manifest.input("dataset", args.dataset.display().to_string());
    manifest.input("checkpoint", args.checkpoint.display().to_string());

    let t0 = Instant::now();
    let frames: Vec<Stage2Frame> = ds
        .frames
        .iter()
        .map(|frame| {
            let lidar = load_frame_cloud(&args.dataset, &frame.lidar, frame)?;
            let radar = load_frame_cloud(&args.dataset, &frame.radar, frame)?;
            Ok(Stage2Frame {
                frame_id: frame.id.clone(),
                radar,
                teacher: lidar_teacher_occupancy(&lidar, &cfg.grid),
            })
        })
        .collect::<Result<_, CliError>>()?;
    manifest.timing("teacher", ms(t0));

    let t1 = Instant::now();
    let (store, rows) = finetune_stage2(store, &frames, &cfg.grid, &cfg.model).map_err(runtime)?;
    manifest.timing("finetune", ms(t1));

    let config_json = serde_json::to_string(&cfg).map_err(runtime)?;
    save_checkpoint(&store, &config_json, true, &args.out.join("checkpoint.bin"))
        .map_err(runtime)?;
    write_loss_csv(&rows, &args.out.join("losses.csv")).map_err(runtime)?;
    manifest.output("checkpoint.bin");
    manifest.output("losses.csv");
    manifest.save(&args.out)?;
    println!("finetune: {} iterations -> {}", rows.len(), args.out.display());
    Ok(())
}

// ---- infer / eval ------------------------------------------------------

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Radar cloud to infer from (.pcd/.xyz/.bin/.ply), or use --dataset.
    #[arg(long, conflicts_with = "dataset")]
    pub cloud: Option<PathBuf>,
    /// Sensor origin 'x,y,z' for --cloud input.
    #[arg(long)]
    pub origin: Option<String>,
    /// Dataset directory; infers the frame given by --frame.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Frame index within --dataset.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn resolve_infer_cloud(args: &InferArgs) -> Result<PointCloud, CliError> {
    match (&args.cloud, &args.dataset) {
        (Some(path), None) => {
            let mut cloud = load_any_cloud("--cloud", path)?;
            if let Some(text) = &args.origin {
                cloud = cloud.with_origin(parse_point("--origin", text)?);
            }
            Ok(cloud)
        }
        (None, Some(dataset)) => {
            require_exists("--dataset", dataset)?;
            let ds = DatasetManifest::load(dataset)?;
            let frame = ds.frames.get(args.frame).ok_or_else(|| {
                CliError::Usage(format!(
                    "--frame: index {} out of range ({} frames)",
                    args.frame,
                    ds.frames.len()
                ))
            })?;
            load_frame_cloud(dataset, &frame.radar, frame)
        }
        _ => Err(CliError::Usage(
            "exactly one of --cloud or --dataset is required".to_string(),
        )),
    }
}

pub fn infer(args: &InferArgs) -> Result<(), CliError> {
    let (store, cfg) = load_run_checkpoint(&args.config, &args.checkpoint)?;
    let radar = resolve_infer_cloud(args)?;
    ensure_dir(&args.out)?;
    let mut manifest = Manifest::new("infer", &cfg);
    manifest.input("checkpoint", args.checkpoint.display().to_string());
    manifest.input("points", radar.len().to_string());
    let t0 = Instant::now();
    let grid = infer_occupancy(&store, &cfg.model, &radar, &cfg.grid).map_err(runtime)?;
    manifest.timing("infer", ms(t0));
    grid.save(&args.out.join("pred.grid")).map_err(runtime)?;
    manifest.output("pred.grid");
    manifest.save(&args.out)?;
    println!("infer: {} cells -> {}", grid.probs.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Predicted occupancy grid file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth occupancy grid file.
    #[arg(long)]
    pub gt: PathBuf,
    /// Sensor origin 'x,y,z' for the depth metrics.
    #[arg(long, default_value = "0,0,0")]
    pub sensor: String,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Row label in the printed table.
    #[arg(long, default_value = "pred")]
    pub label: String,
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = args.config.resolve()?;
    require_exists("--pred", &args.pred)?;
    require_exists("--gt", &args.gt)?;
    let sensor = parse_point("--sensor", &args.sensor)?;
    let pred = OccupancyGrid::load(&args.pred).map_err(runtime)?;
    let gt = OccupancyGrid::load(&args.gt).map_err(runtime)?;
    ensure_dir(&args.out)?;
    let mcfg = MetricsConfig::default();
    let gt_surface = extract_surface(&gt, mcfg.threshold);
    let t0 = Instant::now();
    let report = evaluate_grid(&pred, &gt_surface, &sensor, &mcfg).map_err(runtime)?;
    let mut manifest = Manifest::new("eval", &cfg);
    manifest.input("pred", args.pred.display().to_string());
    manifest.input("gt", args.gt.display().to_string());
    manifest.timing("eval", ms(t0));
    let json = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(args.out.join("metrics.json"), &json)
        .map_err(|e| CliError::Runtime(format!("cannot write metrics.json: {e}")))?;
    manifest.output("metrics.json");
    manifest.save(&args.out)?;
    println!("{}", report.format_table(&args.label));
    Ok(())
}

// ---- render ------------------------------------------------------------

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Occupancy grid file to render.
    #[arg(long, conflicts_with = "cloud")]
    pub grid: Option<PathBuf>,
    /// Point cloud file to render.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    /// Occupancy threshold for the surface point set.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Output directory for the render files.
    #[arg(long)]
    pub out: PathBuf,
}

/// Max-projection of the grid probabilities along one axis.
fn project_max(grid: &OccupancyGrid, axis: usize) -> (Vec<f64>, usize, usize) {
    let [nx, ny, nz] = grid.spec.dims_unchecked();
    let (w, h) = match axis {
        0 => (ny, nz),
        1 => (nx, nz),
        _ => (nx, ny),
    };
    let mut img = vec![0.0f64; w * h];
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let p = grid.prob_at([ix, iy, iz]);
                let (col, row) = match axis {
                    0 => (iy, nz - 1 - iz),
                    1 => (ix, nz - 1 - iz),
                    _ => (ix, iy),
                };
                let cell = &mut img[row * w + col];
                if p > *cell {
                    *cell = p;
                }
            }
        }
    }
    (img, w, h)
}

pub fn render(args: &RenderArgs) -> Result<(), CliError> {
    ensure_dir(&args.out)?;
    match (&args.grid, &args.cloud) {
        (Some(path), None) => {
            require_exists("--grid", path)?;
            let grid = OccupancyGrid::load(path).map_err(runtime)?;
            let surface = extract_surface(&grid, args.threshold);
            let gray: Vec<f64> = surface
                .points
                .iter()
                .map(|p| grid.spec.cell_of(p).map_or(0.0, |c| grid.prob_at(c)))
                .collect();
            save_ply_ascii(&surface.points, Some(&gray), &args.out.join("surface.ply"))
                .map_err(runtime)?;
            for (axis, name) in [(2, "max_z.pgm"), (1, "max_y.pgm"), (0, "max_x.pgm")] {
                let (img, w, h) = project_max(&grid, axis);
                save_pgm(&img, w, h, &args.out.join(name)).map_err(runtime)?;
            }
            println!(
                "render: {} surface points -> {}",
                surface.len(),
                args.out.display()
            );
        }
        (None, Some(path)) => {
            let cloud = load_any_cloud("--cloud", path)?;
            save_ply_ascii(&cloud.points, None, &args.out.join("cloud.ply")).map_err(runtime)?;
            println!("render: {} points -> {}", cloud.len(), args.out.display());
        }
        _ => {
            return Err(CliError::Usage(
                "exactly one of --grid or --cloud is required".to_string(),
            ))
        }
    }
    Ok(())
}

// ---- bench -------------------------------------------------------------

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Radar cloud to benchmark on.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Timed repetitions after one warm-up pass.
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// Run output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    if args.repeats == 0 {
        return Err(CliError::Usage("--repeats: must be >= 1".to_string()));
    }
    let (store, cfg) = load_run_checkpoint(&args.config, &args.checkpoint)?;
    let radar = load_any_cloud("--cloud", &args.cloud)?;
    ensure_dir(&args.out)?;
    // Warm-up pass, then the timed samples.
    infer_occupancy(&store, &cfg.model, &radar, &cfg.grid).map_err(runtime)?;
    let mut samples = Vec::with_capacity(args.repeats);
    for _ in 0..args.repeats {
        let t0 = Instant::now();
        infer_occupancy(&store, &cfg.model, &radar, &cfg.grid).map_err(runtime)?;
        samples.push(ms(t0));
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let median = sorted[sorted.len() / 2];
    let p95 = sorted[((sorted.len() as f64 * 0.95).ceil() as usize - 1).min(sorted.len() - 1)];
    let report = serde_json::json!({
        "points": radar.len(),
        "cells": cfg.grid.num_cells(),
        "repeats": args.repeats,
        "mean_ms": mean,
        "median_ms": median,
        "p95_ms": p95,
        "samples_ms": samples,
    });
    let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    std::fs::write(args.out.join("bench.json"), &text)
        .map_err(|e| CliError::Runtime(format!("cannot write bench.json: {e}")))?;
    let mut manifest = Manifest::new("bench", &cfg);
    manifest.input("checkpoint", args.checkpoint.display().to_string());
    manifest.input("cloud", args.cloud.display().to_string());
    manifest.timing("mean_infer", mean);
    manifest.output("bench.json");
    manifest.save(&args.out)?;
    println!("{text}");
    Ok(())
}
