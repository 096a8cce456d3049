use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splatrl_core::compare::{desk_config, DESK_ITERATIONS};
use splatrl_core::metrics::{psnr, ssim};
use splatrl_core::probe::probe_run;
use splatrl_core::projection::project;
use splatrl_core::raster::{render, RenderOptions};
use splatrl_core::synth::{degrade, generate, Degrade, RecipeKind, SceneRecipe};
use splatrl_core::trainer::{Controller, HeuristicOptions, LearnedOptions, Trainer};
use splatrl_core::Scene;

use crate::config::RunConfig;
use crate::formats::{load_cameras, load_checkpoint, load_scene, load_views, save_checkpoint, save_image, save_scene, save_views};
use crate::runlog::{lineage_records, read_lineage, read_log, write_eval, Appender, EvalRecord, LogRecord};
use crate::verify::{bench_sensitivity, verify_gradients, verify_sensitivity, verify_theory};

#[derive(Debug, Parser)]
#[command(name = "splatrl", version, about = "Gaussian splatting with learned density control")]
pub struct Cli {
    /// Worker threads for rendering (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for scene generation, training and the oracle suites.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene, cameras, targets and an initialization.
    Gen(GenArgs),
    /// Train a scene with a density controller.
    Fit(FitArgs),
    /// Render a scene or checkpoint through a camera file.
    Render(RenderArgs),
    /// PSNR and SSIM of a scene or checkpoint against a data directory.
    Eval(EvalArgs),
    /// Run an oracle suite.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Probes.
    #[command(subcommand)]
    Probe(ProbeCommand),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub recipe: RecipeKind,
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long)]
    pub cameras: Option<usize>,
    /// Initialization written to init.json: sparse, jitter or none (a copy
    /// of the ground truth).
    #[arg(long, default_value = "sparse")]
    pub init: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shortcut for `data.dir`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Shortcut for `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop at the first eval boundary at or after this iteration; a later
    /// `--resume` picks up from there.
    #[arg(long)]
    pub until: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SceneSource {
    #[arg(long, conflicts_with = "checkpoint")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub source: SceneSource,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// png or ppm.
    #[arg(long, default_value = "png")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Closed-form leave-one-out against re-rendering.
    Sensitivity {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Analytic gradients against central differences.
    Gradients {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
    },
    /// Surrogate error, greedy descent and the one-step bound.
    Theory {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Per-edit CSV of the descent runs.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Fast against naive sensitivity as the stack deepens.
    Sensitivity {
        #[arg(long, value_delimiter = ',', default_values_t = vec![32, 64, 128])]
        contributors: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProbeCommand {
    /// Match rate of learned and heuristic choices with probed locally
    /// optimal actions on texture-grid.
    LocalOptimality {
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = DESK_ITERATIONS)]
        iterations: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![399, 899])]
        checkpoints: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = splatrl_core::probe::DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parses `args` and runs the command. Returns the process exit status:
/// 0 on success, 1 on validation or runtime errors, 2 on usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} message={:?}", error_kind(&e), format!("{e:#}"));
            1
        }
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use splatrl_core::Error as E;
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<E>() {
            return match c {
                E::ShapeMismatch(_) | E::ImageTooSmall { .. } => "shape",
                E::Consistency(_) => "consistency",
                E::Validation(_) | E::UnknownRecipe(_) => "validation",
                E::NonFinite(_) => "non-finite",
                E::Decode(_) => "decode",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<toml::de::Error>() || cause.is::<serde_json::Error>() {
            return "config";
        }
    }
    "validation"
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(splatrl_core::Error::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring threads")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => gen(a, seed.unwrap_or(0)),
        Command::Fit(a) => fit(a, seed),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Verify(v) => verify_cmd(v, seed.unwrap_or(0)),
        Command::Bench(b) => bench_cmd(b, seed.unwrap_or(0)),
        Command::Probe(p) => probe_cmd(p, seed.unwrap_or(0)),
    }
}

fn gen(a: GenArgs, seed: u64) -> Result<()> {
    let mut recipe = SceneRecipe::new(a.recipe, seed, a.resolution);
    if let Some(c) = a.cameras {
        recipe.cameras = c;
    }
    let syn = generate(&recipe)?;
    let init = match a.init.as_str() {
        "sparse" => degrade(&syn.scene, Degrade::SPARSE, seed)?,
        "jitter" => degrade(&syn.scene, Degrade::Jitter { position: 0.05, color: 0.2 }, seed)?,
        "none" => syn.scene.clone(),
        other => bail!(splatrl_core::Error::Validation(format!("unknown init `{other}` (expected sparse, jitter or none)"))),
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_scene(&a.out.join("scene.json"), &syn.scene)?;
    save_scene(&a.out.join("init.json"), &init)?;
    save_views(&a.out.join("cameras.json"), &a.out.join("targets"), &syn.views)?;
    println!("recipe={} seed={seed} gaussians={} init={} views={} out={}", a.recipe, syn.scene.len(), init.len(), syn.views.len(), a.out.display());
    Ok(())
}

fn fit(a: FitArgs, seed: Option<u64>) -> Result<()> {
    let mut overrides = a.overrides.clone();
    if let Some(d) = &a.data {
        overrides.push(format!("data.dir={:?}", d.display().to_string()));
    }
    if let Some(o) = &a.out {
        overrides.push(format!("output.dir={:?}", o.display().to_string()));
    }
    if let Some(s) = seed {
        overrides.push(format!("train.seed={s}"));
    }
    let cfg = RunConfig::load(a.config.as_deref(), &overrides)?;
    let data = &cfg.data.dir;
    let views = load_views(&data.join(&cfg.data.cameras), &data.join(&cfg.data.targets))?;
    let out = &cfg.output.dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt = out.join("checkpoint.bin");

    let mut trainer = if a.resume {
        let t = Trainer::restore(&load_checkpoint(&ckpt)?, views)?;
        if t.config != cfg.train_config()? {
            bail!(splatrl_core::Error::Validation("the checkpoint was written with a different training config".into()));
        }
        truncate_logs(out, t.iteration)?;
        t
    } else {
        for f in ["log.csv", "lineage.csv"] {
            let _ = fs::remove_file(out.join(f));
        }
        let init = load_scene(&data.join(&cfg.data.init))?;
        Trainer::new(cfg.train_config()?, init, views)?
    };
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;

    let mut log = Appender::open(&out.join("log.csv"))?;
    let mut lineage = Appender::open(&out.join("lineage.csv"))?;
    let mut logged = trainer.log.len();
    let mut traced = trainer.lineage_log.len();
    let every = trainer.config.eval_interval;
    let stop = a.until.unwrap_or(usize::MAX);
    while !trainer.is_done() && trainer.iteration < stop {
        let next = (trainer.iteration / every + 1) * every;
        trainer.run_until(next)?;
        log.write(trainer.log[logged..].iter().map(LogRecord::from))?;
        lineage.write(
            trainer.lineage_log[traced..]
                .iter()
                .enumerate()
                .flat_map(|(k, (it, l))| lineage_records(traced + k, *it, l)),
        )?;
        logged = trainer.log.len();
        traced = trainer.lineage_log.len();
        save_checkpoint(&ckpt, &trainer.checkpoint())?;
    }
    save_scene(&out.join("scene.json"), &trainer.scene)?;
    if !trainer.is_done() {
        println!("paused iteration={} gaussians={}", trainer.iteration, trainer.scene.len());
        return Ok(());
    }
    let rows = eval_rows(&trainer.scene, &trainer.views)?;
    write_eval(&out.join("eval.csv"), &rows)?;
    let mean = rows.last().expect("mean row");
    println!(
        "final iteration={} psnr={:.6} ssim={:.6} gaussians={} controller={}",
        trainer.iteration,
        mean.psnr,
        mean.ssim,
        trainer.scene.len(),
        trainer.config.controller.name()
    );
    Ok(())
}

/// Drops log rows written after the checkpoint was taken.
fn truncate_logs(out: &Path, iteration: usize) -> Result<()> {
    let log = out.join("log.csv");
    if log.exists() {
        let rows: Vec<_> = read_log(&log)?.into_iter().filter(|r| r.iteration <= iteration).collect();
        fs::remove_file(&log)?;
        Appender::open(&log)?.write(rows)?;
    }
    let lineage = out.join("lineage.csv");
    if lineage.exists() {
        let rows: Vec<_> = read_lineage(&lineage)?.into_iter().filter(|r| r.iteration <= iteration).collect();
        fs::remove_file(&lineage)?;
        Appender::open(&lineage)?.write(rows)?;
    }
    Ok(())
}

fn source_scene(src: &SceneSource, data: Option<&Path>) -> Result<Scene> {
    match (&src.scene, &src.checkpoint) {
        (Some(s), _) => load_scene(s),
        (None, Some(c)) => {
            let data = data.context("reading a checkpoint needs the data directory")?;
            let views = load_views(&data.join("cameras.json"), &data.join("targets"))?;
            Ok(Trainer::restore(&load_checkpoint(c)?, views)?.scene)
        }
        (None, None) => bail!(splatrl_core::Error::Validation("pass --scene or --checkpoint".into())),
    }
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    if a.format != "png" && a.format != "ppm" {
        bail!(splatrl_core::Error::Validation(format!("unknown format `{}` (expected png or ppm)", a.format)));
    }
    let data = a.cameras.parent().map(Path::to_path_buf);
    let scene = source_scene(&a.source, data.as_deref())?;
    let cams = load_cameras(&a.cameras)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, cam) in cams.iter().enumerate() {
        let img = render(&project(&scene, cam), cam.width, cam.height, scene.background, RenderOptions::default()).image;
        save_image(&a.out.join(format!("{i:03}.{}", a.format)), &img)?;
    }
    println!("rendered={} out={}", cams.len(), a.out.display());
    Ok(())
}

/// One row per view plus a final `mean` row.
fn eval_rows(scene: &Scene, views: &[splatrl_core::sensitivity::View]) -> Result<Vec<EvalRecord>> {
    let mut rows = Vec::with_capacity(views.len() + 1);
    for (i, v) in views.iter().enumerate() {
        let img = render(&project(scene, &v.camera), v.camera.width, v.camera.height, scene.background, RenderOptions::default()).image;
        rows.push(EvalRecord { view: format!("{i:03}"), psnr: psnr(&img, &v.target)?, ssim: ssim(&img, &v.target)? });
    }
    let n = views.len().max(1) as f64;
    let mean = EvalRecord {
        view: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    rows.push(mean);
    Ok(rows)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let scene = source_scene(&a.source, Some(&a.data))?;
    let views = load_views(&a.data.join("cameras.json"), &a.data.join("targets"))?;
    let rows = eval_rows(&scene, &views)?;
    println!("{:>6} {:>10} {:>8}", "view", "psnr", "ssim");
    for r in &rows {
        println!("{:>6} {:>10.4} {:>8.5}", r.view, r.psnr, r.ssim);
    }
    if let Some(p) = &a.csv {
        write_eval(p, &rows)?;
    }
    Ok(())
}

fn verify_cmd(v: VerifyCommand, seed: u64) -> Result<()> {
    match v {
        VerifyCommand::Sensitivity { trials } => {
            let r = verify_sensitivity(trials, seed);
            println!("trials={} max_abs_diff={:.3e} max_contributors={}", r.trials, r.max_error, r.max_contributors);
            if !(r.max_error < 1e-5) {
                bail!(splatrl_core::Error::Consistency(format!("closed form differs from re-render by {:e}", r.max_error)));
            }
        }
        VerifyCommand::Gradients { scenes } => {
            let r = verify_gradients(scenes, seed)?;
            println!("scenes={} checked={} failures={} max_rel_error={:.3e}", r.scenes, r.checked, r.failures.len(), r.max_rel_error);
            for f in &r.failures {
                println!("  {f}");
            }
            if !r.failures.is_empty() {
                bail!(splatrl_core::Error::Consistency(format!("{} gradient entries disagree", r.failures.len())));
            }
        }
        VerifyCommand::Theory { seeds, csv } => {
            let r = verify_theory(seeds)?;
            println!(
                "disjoint_delta={:.3e} max_overlap={} runs={} accepted={} margin_violations={} termination_violations={} probes={} bound_violations={} overlapping_delta={:.4e}",
                r.disjoint_delta,
                r.max_overlap,
                r.descent_runs,
                r.accepted_edits,
                r.margin_violations,
                r.termination_violations,
                r.probes,
                r.bound_violations,
                r.overlapping_delta
            );
            if let Some(p) = csv {
                let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
                for row in &r.rows {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
            if !r.passed() {
                bail!(splatrl_core::Error::Consistency("theory checks failed".into()));
            }
        }
    }
    Ok(())
}

fn bench_cmd(b: BenchCommand, seed: u64) -> Result<()> {
    let BenchCommand::Sensitivity { contributors, size, reps, out } = b;
    if contributors.is_empty() || size == 0 {
        bail!(splatrl_core::Error::Validation("need at least one stack depth and a positive size".into()));
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let rows = bench_sensitivity(&contributors, size, reps, seed);
    let mut w = csv::Writer::from_path(out.join("bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut dat = String::from("# contributors fast_seconds naive_seconds\n");
    for r in &rows {
        dat.push_str(&format!("{} {:.6e} {:.6e}\n", r.contributors, r.fast_seconds, r.naive_seconds));
    }
    fs::write(out.join("bench.dat"), dat).context("writing bench.dat")?;
    for r in &rows {
        println!("contributors={} fast={:.4e}s naive={:.4e}s speedup={:.1}", r.contributors, r.fast_seconds, r.naive_seconds, r.naive_seconds / r.fast_seconds);
    }
    Ok(())
}

fn probe_cmd(p: ProbeCommand, seed: u64) -> Result<()> {
    let ProbeCommand::LocalOptimality { resolution, iterations, checkpoints, samples, horizon, csv } = p;
    let syn = generate(&SceneRecipe::new(RecipeKind::TextureGrid, seed, resolution))?;
    let init = degrade(&syn.scene, Degrade::SPARSE, seed)?;
    let mut t = Trainer::new(desk_config(iterations, seed, Controller::Learned(LearnedOptions::default())), init, syn.views)?;
    let reports = probe_run(&mut t, &checkpoints, samples, horizon, &HeuristicOptions::default(), seed)?;
    let mut writer = csv.as_ref().map(csv::Writer::from_path).transpose()?;
    if let Some(w) = writer.as_mut() {
        w.write_record(["iteration", "gaussian", "maintain", "clone", "split", "prune", "best", "learned", "heuristic"])?;
    }
    let (mut hits_l, mut hits_h, mut n) = (0.0, 0.0, 0);
    for r in &reports {
        let (l, h) = (r.learned_rate()?, r.heuristic_rate()?);
        println!("iteration={} samples={} learned={:.4} heuristic={:.4}", r.iteration, r.samples.len(), l, h);
        hits_l += l * r.samples.len() as f64;
        hits_h += h * r.samples.len() as f64;
        n += r.samples.len();
        if let Some(w) = writer.as_mut() {
            for s in &r.samples {
                let mut rec = vec![r.iteration.to_string(), s.id.0.to_string()];
                rec.extend(s.psnr.iter().map(|p| format!("{p:.6}")));
                rec.extend([s.best().name().into(), r.learned[s.index].name().into(), r.heuristic[s.index].name().into()]);
                w.write_record(&rec)?;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    if n > 0 {
        println!("total samples={n} learned={:.4} heuristic={:.4}", hits_l / n as f64, hits_h / n as f64);
    }
    Ok(())
}
