//! `bevscan` — multi-view BEV vehicle segmentation on procedural scenes.
//!
//! Four subcommands share one `key = value` config file:
//!
//! * `gen`    — materialize every scene of the configured splits and write a
//!             manifest CSV (a determinism / timing smoke pass).
//! * `train`  — run the optimizer; writes checkpoints, a loss CSV and the
//!             resolved config.
//! * `eval`   — score a checkpoint on the validation split; writes the IoU
//!             report CSV.
//! * `export` — dump rendered views (PPM), point clouds (XYZ) and
//!             predicted / ground-truth masks (PGM) for inspection.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use bevscan_core::config::RunConfig;
use bevscan_core::export::{write_pgm, write_ppm, write_xyz};
use bevscan_core::metrics::{evaluate, probabilities};
use bevscan_core::nn::{BevSegModel, Forward, ParamStore};
use bevscan_core::scene::{make_rig, Split};
use bevscan_core::tensor::checkpoint;
use bevscan_core::tensor::Tape;
use bevscan_core::train::{forward_sample, train, LossWeighting};

#[derive(Parser)]
#[command(
    name = "bevscan",
    version,
    about = "Multi-view bird's-eye-view vehicle segmentation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every configured scene and write a dataset manifest.
    Gen(CommonArgs),
    /// Train a model, writing checkpoints and a CSV loss log.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(CommonArgs),
    /// Export views, point clouds and masks for the first validation scenes.
    Export(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the `key = value` run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to load; defaults to `<out_dir>/ckpt_final.bvt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding the config's `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Loads the config, applies `BEVSCAN_SEED` and `--out`, creates the output
/// directory and drops the resolved config next to the outputs.
fn setup(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)
        .with_context(|| format!("loading config {}", args.config.display()))?;
    cfg.apply_env()?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating output dir {}", cfg.out_dir.display()))?;
    let resolved = cfg.out_dir.join("config.resolved.cfg");
    fs::write(&resolved, cfg.to_config_string())
        .with_context(|| format!("writing {}", resolved.display()))?;
    Ok(cfg)
}

/// Builds the parameter store, the model and the loss weighting. The
/// weighting is registered even for eval/export so the store's parameter set
/// matches what `train` checkpoints.
fn build(cfg: &RunConfig) -> Result<(ParamStore, BevSegModel, LossWeighting)> {
    let mut store = cfg.param_store();
    let rig = make_rig(cfg.img_h, cfg.img_w);
    let model = BevSegModel::new(&mut store, cfg.model_config(), &rig)
        .context("constructing the model")?;
    let weighting = cfg.weighting(&mut store)?;
    Ok((store, model, weighting))
}

fn checkpoint_path(args: &CommonArgs, cfg: &RunConfig) -> PathBuf {
    args.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("ckpt_final.bvt"))
}

fn load_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let map =
        checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    store
        .load_map(&map)
        .with_context(|| format!("applying checkpoint {}", path.display()))?;
    Ok(())
}

fn cmd_gen(args: &CommonArgs) -> Result<()> {
    let cfg = setup(args)?;
    let manifest = cfg.out_dir.join("manifest.csv");
    let mut out = fs::File::create(&manifest)
        .with_context(|| format!("creating {}", manifest.display()))?;
    writeln!(out, "split,index,seed,vehicles,visible_instances,points")?;
    let mut scenes = 0usize;
    for (split, name) in [(Split::Train, "train"), (Split::Val, "val")] {
        let data = cfg.dataset(split)?;
        for (index, sample) in data.iter().enumerate() {
            let sample = sample?;
            let visible = sample
                .rendered
                .visibility
                .iter()
                .filter(|&&v| v)
                .count();
            writeln!(
                out,
                "{name},{index},{},{},{visible},{}",
                sample.scene.seed,
                sample.scene.vehicles.len(),
                sample.rendered.points.len()
            )?;
            scenes += 1;
        }
    }
    println!(
        "gen: wrote {} rows to {}",
        scenes,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(args: &CommonArgs) -> Result<()> {
    let cfg = setup(args)?;
    let (mut store, model, weighting) = build(&cfg)?;
    let data = cfg.dataset(Split::Train)?;
    let logs = train(
        &mut store,
        &model,
        &weighting,
        &data,
        &cfg.train_config(),
        Some(&cfg.out_dir),
    )
    .context("training")?;
    if let Some(last) = logs.last() {
        println!(
            "train: {} steps, final losses seg {:.4} cen {:.4} off {:.4}",
            logs.len(),
            last.l_seg,
            last.l_cen,
            last.l_off
        );
    }
    println!(
        "train: checkpoint {}",
        cfg.out_dir.join("ckpt_final.bvt").display()
    );
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let cfg = setup(args)?;
    let (mut store, model, _) = build(&cfg)?;
    load_weights(&mut store, &checkpoint_path(args, &cfg))?;
    let data = cfg.dataset(Split::Val)?;
    let report = evaluate(&store, &model, &data).context("evaluating")?;
    let csv = report.to_csv();
    let path = cfg.out_dir.join("metrics.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    println!("eval: report written to {}", path.display());
    Ok(())
}

fn cmd_export(args: &CommonArgs) -> Result<()> {
    let cfg = setup(args)?;
    let (mut store, model, _) = build(&cfg)?;
    load_weights(&mut store, &checkpoint_path(args, &cfg))?;
    let data = cfg.dataset(Split::Val)?;
    let dir = cfg.out_dir.join("export");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let n = cfg.export_scenes.min(data.size);
    let (nz, nx) = (data.grid.nz, data.grid.nx);
    for i in 0..n {
        let sample = data.get(i)?;
        let fw = Forward::new(Tape::new(), &store);
        let heads = forward_sample(&fw, &model, &sample, &data.grid)?;

        let r = &sample.rendered;
        let plane = 3 * r.img_h * r.img_w;
        for v in 0..r.views {
            write_ppm(
                &dir.join(format!("sample_{i:03}_view{v}.ppm")),
                &r.images[v * plane..(v + 1) * plane],
                r.img_h,
                r.img_w,
            )?;
        }
        if !r.points.is_empty() {
            write_xyz(&dir.join(format!("sample_{i:03}_points.xyz")), &r.points)?;
        }

        let prob = probabilities(&heads.seg_logits.value());
        write_pgm(&dir.join(format!("sample_{i:03}_pred_seg.pgm")), &prob, nz, nx)?;
        write_pgm(
            &dir.join(format!("sample_{i:03}_gt_seg.pgm")),
            &sample.targets.seg,
            nz,
            nx,
        )?;
        write_pgm(
            &dir.join(format!("sample_{i:03}_pred_cen.pgm")),
            &heads.centerness.value(),
            nz,
            nx,
        )?;
        write_pgm(
            &dir.join(format!("sample_{i:03}_gt_cen.pgm")),
            &sample.targets.centerness,
            nz,
            nx,
        )?;
    }
    println!("export: wrote {n} samples to {}", dir.display());
    Ok(())
}
