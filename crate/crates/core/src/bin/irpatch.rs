//! Command-line front end: dataset generation, patch optimization,
//! evaluation sweeps, rendering, calibration, and board export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use irpatch::attack::{optimize_patch, save_loss_history, Params};
use irpatch::board;
use irpatch::calibrate;
use irpatch::config::ExperimentConfig;
use irpatch::evaluate::{
    make_control_patch, run_condition_suite_with_curves, APReport, Condition, ControlKind,
    PRCurve,
};
use irpatch::gaussian::{render_gaussian_patch, PatchParamsFile};
use irpatch::image::GrayImage;
use irpatch::scenegen::{load_dataset, make_dataset, save_dataset};
use irpatch::{Error, Result};

#[derive(Parser)]
#[command(name = "irpatch", version, about = "Thermal-infrared adversarial patch toolkit")]
struct Cli {
    /// Experiment TOML file; falls back to $IRPATCH_CONFIG, then defaults.
    #[arg(long, global = true, env = "IRPATCH_CONFIG")]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated dataset.
    GenData(GenDataArgs),
    /// Optimize a patch against the training split.
    Optimize(OptimizeArgs),
    /// Evaluate patches on the test split.
    Evaluate(EvaluateArgs),
    /// Render a patch parameter file to a PNG.
    Render(RenderArgs),
    /// Fit a bulb temperature profile.
    FitBulb(FitBulbArgs),
    /// Export a patch parameter file as a physical board plan.
    ExportBoard(ExportBoardArgs),
    /// Plot PR-point files into a PNG.
    PlotPr(PlotPrArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Training scenes; defaults to the config value.
    #[arg(long)]
    n_train: Option<usize>,
    /// Test scenes; defaults to the config value.
    #[arg(long)]
    n_test: Option<usize>,
    /// Target directory; defaults to the config dataset dir.
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    /// Dataset directory; defaults to the config dataset dir.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override the iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    /// Override the spot count M.
    #[arg(long)]
    spots: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory; defaults to the config dataset dir.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Patch parameter file(s) to evaluate; repeat for the count sweep.
    #[arg(long)]
    patch: Vec<PathBuf>,
    /// Also evaluate each patch at scales 2, 1.5, 1, 2/3, 1/2.
    #[arg(long)]
    sweep_size: bool,
    /// Label conditions by their spot count (use with several --patch files).
    #[arg(long)]
    sweep_count: bool,
    /// Skip the blank/noise control conditions.
    #[arg(long)]
    no_controls: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Patch parameter file.
    patch: PathBuf,
    /// Output PNG; defaults to the parameter file with a .png extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitBulbArgs {
    /// Two-column (position_px, temperature_C) profile file.
    profile: PathBuf,
    /// Where to write the fit JSON; defaults to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportBoardArgs {
    /// Patch parameter file.
    patch: PathBuf,
    /// Board side in centimeters.
    #[arg(long, default_value_t = board::DEFAULT_BOARD_CM)]
    board_cm: f64,
    /// Minimum bulb spacing before a warning, centimeters.
    #[arg(long, default_value_t = 1.0)]
    min_spacing_cm: f64,
    /// Output table; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotPrArgs {
    /// PR-point CSV files (columns recall,precision).
    points: Vec<PathBuf>,
    /// Output PNG.
    #[arg(long, default_value = "pr.png")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    log::info!(
        "config: {} seed={} out_dir={}",
        cli.config
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<defaults>".into()),
        config.effective_seed(cli.seed),
        config.effective_out_dir(cli.out_dir.clone()).display()
    );
    Ok(config)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    let seed = config.effective_seed(cli.seed);
    let out_dir = config.effective_out_dir(cli.out_dir.clone());
    match &cli.command {
        Command::GenData(args) => {
            let dir = args.dir.clone().unwrap_or_else(|| config.dataset.dir.clone());
            let n_train = args.n_train.unwrap_or(config.dataset.n_train);
            let n_test = args.n_test.unwrap_or(config.dataset.n_test);
            let dataset = make_dataset(seed, n_train, n_test, &config.scene)?;
            let manifest = save_dataset(&dataset, &dir)?;
            println!(
                "wrote {} train + {} test scenes, manifest {}",
                dataset.train.len(),
                dataset.test.len(),
                manifest.display()
            );
            Ok(())
        }
        Command::Optimize(args) => {
            let dir = args.dataset.clone().unwrap_or_else(|| config.dataset.dir.clone());
            let dataset = load_dataset(&dir)?;
            let adapters = config.build_adapters()?;
            let mut attack = config.attack.clone();
            attack.seed = seed;
            if let Some(iters) = args.iterations {
                attack.iterations = iters;
            }
            if let Some(m) = args.spots {
                attack.spots = m;
            }
            log::info!(
                "optimizing: {} spots, {} iterations, {:?}, {} train scenes",
                attack.spots,
                attack.iterations,
                attack.optimizer,
                dataset.train.len()
            );
            let (params, state) =
                optimize_patch(&dataset.train, &adapters, &attack, &config.transform)?;
            ensure_dir(&out_dir)?;
            save_loss_history(&state.loss_history, out_dir.join("loss.csv"))?;
            match &params {
                Params::Gaussian(g) => {
                    PatchParamsFile::from_params(g, attack.side)
                        .save(out_dir.join("patch.json"))?;
                    render_gaussian_patch(g, attack.side)?.save(out_dir.join("patch.png"))?;
                }
                Params::Pixel(p) => {
                    p.save(out_dir.join("patch.png"))?;
                }
            }
            if let (Some(first), Some(last)) =
                (state.loss_history.first(), state.loss_history.last())
            {
                println!(
                    "loss {:.6} -> {:.6} over {} iterations",
                    first.total,
                    last.total,
                    state.loss_history.len()
                );
            }
            println!("artifacts in {}", out_dir.display());
            Ok(())
        }
        Command::Evaluate(args) => {
            let dir = args.dataset.clone().unwrap_or_else(|| config.dataset.dir.clone());
            let dataset = load_dataset(&dir)?;
            let adapters = config.build_adapters()?;
            let mut eval = config.evaluate.clone();
            eval.seed = seed;
            eval.transform = config.transform.clone();

            let mut conditions = vec![Condition::new("none", None)];
            let mut side = config.attack.side;
            for path in &args.patch {
                let file = PatchParamsFile::load(path)?;
                let params = file.to_params()?;
                side = file.side_px;
                let patch = render_gaussian_patch(&params, file.side_px)?;
                let label = if args.sweep_count {
                    format!("adv-m{}", file.m)
                } else if args.patch.len() > 1 {
                    format!(
                        "adv-{}",
                        path.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
                    )
                } else {
                    "adversarial".to_string()
                };
                conditions.push(Condition::new(&label, Some(patch.clone())));
                if args.sweep_size {
                    for scale in [2.0, 1.5, 2.0 / 3.0, 0.5] {
                        conditions.push(
                            Condition::new(format!("{label}-x{scale:.3}"), Some(patch.clone()))
                                .with_scale(scale),
                        );
                    }
                }
            }
            if !args.no_controls {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                conditions.push(Condition::new(
                    "blank",
                    Some(make_control_patch(ControlKind::Blank, side, &mut rng)?),
                ));
                conditions.push(Condition::new(
                    "noise",
                    Some(make_control_patch(ControlKind::Noise, side, &mut rng)?),
                ));
            }

            let results =
                run_condition_suite_with_curves(&dataset.test, &adapters, &conditions, &eval)?;
            ensure_dir(&out_dir)?;
            let reports: Vec<&APReport> = results.iter().map(|(r, _)| r).collect();
            save_report_csv(&reports, &out_dir.join("report.csv"))?;
            let json = serde_json::to_string_pretty(
                &results.iter().map(|(r, _)| r).collect::<Vec<_>>(),
            )
            .expect("serializable");
            std::fs::write(out_dir.join("report.json"), json)
                .map_err(|e| Error::io(out_dir.join("report.json"), e))?;
            let mut curve_files = Vec::new();
            for (report, curve) in &results {
                let name = format!(
                    "pr_{}_{}_{}.csv",
                    sanitize(&report.adapter),
                    sanitize(&report.condition),
                    format!("{:.3}", report.scale).replace('.', "p")
                );
                let path = out_dir.join(&name);
                save_pr_points(curve, &path)?;
                curve_files.push(path);
            }
            let labels: Vec<String> = results
                .iter()
                .map(|(r, _)| format!("{} {}", r.condition, r.adapter))
                .collect();
            plot_pr_curves(
                &results.iter().map(|(_, c)| c.clone()).collect::<Vec<_>>(),
                &labels,
                &out_dir.join("pr.png"),
            )?;
            for (report, _) in &results {
                println!(
                    "{:<24} {:<12} x{:<5.2} ap={:.4} ap_drop={:6.2}",
                    report.condition, report.adapter, report.scale, report.ap_clean_gt, report.ap_drop
                );
            }
            println!("report in {}", out_dir.display());
            Ok(())
        }
        Command::Render(args) => {
            let file = PatchParamsFile::load(&args.patch)?;
            let patch = render_gaussian_patch(&file.to_params()?, file.side_px)?;
            let out = args
                .out
                .clone()
                .unwrap_or_else(|| args.patch.with_extension("png"));
            patch.save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::FitBulb(args) => {
            let samples = calibrate::load_profile(&args.profile)?;
            let fit = calibrate::fit_bulb_profile(&samples)?;
            let intensity =
                calibrate::temperature_to_intensity(fit.amplitude, config.calibrate.camera_span)?;
            let json = serde_json::to_string_pretty(&fit).expect("serializable");
            println!("{json}");
            println!(
                "amplitude {:.4} degC -> intensity {:.4} at span {:?}",
                fit.amplitude, intensity, config.calibrate.camera_span
            );
            if let Some(out) = &args.out {
                std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
            }
            Ok(())
        }
        Command::ExportBoard(args) => {
            let file = PatchParamsFile::load(&args.patch)?;
            let params = file.to_params()?;
            let layout =
                board::export_board(&params, file.side_px, args.board_cm, args.min_spacing_cm)?;
            for w in &layout.warnings {
                log::warn!("{w}");
            }
            match &args.out {
                Some(path) => {
                    layout.save(path)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{}", layout.to_table()),
            }
            Ok(())
        }
        Command::PlotPr(args) => {
            if args.points.is_empty() {
                return Err(Error::InvalidParam("no PR-point files given".into()));
            }
            let mut curves = Vec::new();
            let mut labels = Vec::new();
            for path in &args.points {
                curves.push(load_pr_points(path)?);
                labels.push(
                    path.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default(),
                );
            }
            plot_pr_curves(&curves, &labels, &args.out)?;
            println!("wrote {}", args.out.display());
            Ok(())
        }
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_alphanumeric() { c } else { '-' })
        .collect()
}

fn save_report_csv(reports: &[&APReport], path: &Path) -> Result<()> {
    let mut out =
        String::from("condition,adapter,scale,ap_clean_gt,ap_drop,ap_annotations,images,gt_boxes\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.4},{:.6},{:.4},{:.6},{},{}\n",
            r.condition, r.adapter, r.scale, r.ap_clean_gt, r.ap_drop, r.ap_annotations, r.images, r.gt_boxes
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn save_pr_points(curve: &PRCurve, path: &Path) -> Result<()> {
    let mut out = String::from("recall,precision,confidence\n");
    for ((r, p), c) in curve.points.iter().zip(&curve.confidences) {
        out.push_str(&format!("{r:.6},{p:.6},{c:.6}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn load_pr_points(path: &Path) -> Result<PRCurve> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut confidences = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || lineno == 0 && line.starts_with("recall") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                what: format!("{}:{}", path.display(), lineno + 1),
                msg: "expected recall,precision[,confidence]".into(),
            });
        }
        let parse = |f: &str| -> Result<f64> {
            f.trim().parse().map_err(|e| Error::Parse {
                what: format!("{}:{}", path.display(), lineno + 1),
                msg: format!("{e}"),
            })
        };
        points.push((parse(fields[0])?, parse(fields[1])?));
        confidences.push(if fields.len() > 2 { parse(fields[2])? } else { 0.0 });
    }
    Ok(PRCurve {
        points,
        confidences,
        gt_count: 0,
    })
}

/// Hand-rasterized PR plot: white canvas, black axes, one gray level per
/// curve.
fn plot_pr_curves(curves: &[PRCurve], labels: &[String], path: &Path) -> Result<()> {
    const SIZE: usize = 512;
    const MARGIN: usize = 48;
    let mut img = GrayImage::new(SIZE, SIZE, 1.0)?;
    let plot = (SIZE - 2 * MARGIN) as f64;
    let to_px = |recall: f64, precision: f64| -> (f64, f64) {
        (
            MARGIN as f64 + recall.clamp(0.0, 1.0) * plot,
            SIZE as f64 - MARGIN as f64 - precision.clamp(0.0, 1.0) * plot,
        )
    };
    // axes
    for k in 0..=plot as usize {
        img.set(SIZE - MARGIN, MARGIN + k, 0.0);
        img.set(SIZE - MARGIN - k, MARGIN, 0.0);
    }
    // tick marks every 0.25
    for t in 0..=4 {
        let k = MARGIN + (plot * t as f64 / 4.0) as usize;
        for d in 1..=4usize {
            img.set(SIZE - MARGIN + d, k, 0.0);
            img.set(SIZE - k, MARGIN - d, 0.0);
        }
    }
    for (ci, curve) in curves.iter().enumerate() {
        let shade = 0.75 * ci as f64 / curves.len().max(1) as f64;
        let mut prev: Option<(f64, f64)> = None;
        for &(r, p) in &curve.points {
            let here = to_px(r, p);
            if let Some(last) = prev {
                draw_line(&mut img, last, here, shade);
            }
            prev = Some(here);
        }
        // single-point or empty curves still get a mark
        if let Some((x, y)) = prev {
            draw_line(&mut img, (x - 2.0, y), (x + 2.0, y), shade);
        }
        let _ = labels; // labels are reflected in the file names
    }
    img.save(path)
}

fn draw_line(img: &mut GrayImage, a: (f64, f64), b: (f64, f64), shade: f64) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.w() && (y as usize) < img.h() {
            img.set(y as usize, x as usize, shade);
        }
    }
}
