use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpgcd::checks::{run_checks, TOLERANCE};
use dpgcd::config::{parse_list, KvMap};
use dpgcd::dataset::{load_split, tile_manifest, write_synthetic, Manifest, PriorFallback, Split};
use dpgcd::loss::LossConfig;
use dpgcd::metrics::F1Average;
use dpgcd::model::ModelConfig;
use dpgcd::report::{emit_report, rebuild_report};
use dpgcd::synthetic::SyntheticSceneConfig;
use dpgcd::train::{curve_to_csv, evaluate, load_checkpoint, save_checkpoint, train_toy, NormStats, TrainConfig};
use dpgcd::{Error, Result};

#[derive(Parser)]
#[command(name = "dpgcd", version, about = "Depth-prior-guided 2D/3D change detection toolkit")]
struct Cli {
    /// Flat key=value file; command-line flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural bi-temporal scene set and its manifest.
    GenSynthetic {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        tiles: Option<usize>,
        #[arg(long)]
        tile_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut every sample of a manifest into a grid of square tiles.
    Tile {
        /// Source manifest.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        size: usize,
        /// Defaults to the tile size (non-overlapping grid).
        #[arg(long)]
        stride: Option<usize>,
        /// Defaults to `tiles_<size>` next to the source manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the manifest's train split and write a checkpoint.
    TrainToy {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Loss curve CSV; defaults to the checkpoint path with `.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        no_edp: bool,
        #[arg(long)]
        no_ccab: bool,
        #[arg(long)]
        no_dssm: bool,
        #[arg(long)]
        no_cca: bool,
        /// Loss weights `wCE,mse3d,grad,mseDsm`.
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Substitute the synthetic proxy for missing depth priors.
        #[arg(long)]
        prior_proxy: bool,
    },
    /// Score a checkpoint on one manifest split and write the report files.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// `all` averages F1 over every class, `changed` over change classes.
        #[arg(long, default_value = "all")]
        f1: String,
        /// Normalization statistics at inference: `instance` or `running`.
        #[arg(long, default_value = "instance")]
        norm_stats: NormStats,
        #[arg(long)]
        prior_proxy: bool,
    },
    /// Finite-difference gradient checks of primitives and modules.
    Gradcheck {
        /// Module group or case name; all when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
    /// Rebuild density and histogram files of an evaluation directory.
    Report {
        #[arg(long)]
        eval_dir: PathBuf,
    },
}

fn load_kv(path: Option<&Path>) -> Result<KvMap> {
    match path {
        Some(p) => KvMap::load(p),
        None => Ok(KvMap::default()),
    }
}

fn fallback(enabled: bool, seed: u64) -> PriorFallback {
    let d = SyntheticSceneConfig::default();
    if enabled {
        PriorFallback::Proxy {
            gamma: d.prior_gamma,
            noise: d.prior_noise,
            seed,
        }
    } else {
        PriorFallback::None
    }
}

fn moving_average(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run(cli: Cli) -> Result<()> {
    let kv = load_kv(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynthetic {
            seed,
            tiles,
            tile_size,
            out,
        } => {
            let mut cfg = SyntheticSceneConfig::default();
            cfg.apply_kv(&kv)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = tiles {
                cfg.tiles = t;
            }
            if let Some(t) = tile_size {
                cfg.tile_size = t;
            }
            let m = write_synthetic(&cfg, &out)?;
            let (tr, va, te) = cfg.split_counts();
            println!(
                "wrote {} tiles ({tr} train, {va} val, {te} test) to {}",
                m.entries.len(),
                out.join("manifest.tsv").display()
            );
        }
        Command::Tile {
            input,
            size,
            stride,
            out,
        } => {
            let m = Manifest::load(&input)?;
            let out = out.unwrap_or_else(|| m.root.join(format!("tiles_{size}")));
            let (tiled, trimmed) = tile_manifest(&m, size, stride.unwrap_or(size), &out)?;
            for id in &trimmed {
                eprintln!("note: {id}: edge remainder dropped");
            }
            println!("wrote {} tiles to {}", tiled.entries.len(), out.join("manifest.tsv").display());
        }
        Command::TrainToy {
            manifest,
            steps,
            seed,
            ckpt,
            curve,
            no_edp,
            no_ccab,
            no_dssm,
            no_cca,
            lambda,
            freeze_encoder,
            prior_proxy,
        } => {
            let mut mc = ModelConfig::from_kv(&kv)?;
            mc.use_edp &= !no_edp;
            mc.blocks.ccab &= !no_ccab;
            mc.blocks.dssm &= !no_dssm;
            mc.blocks.cca &= !no_cca;
            let mut tc = TrainConfig {
                loss: LossConfig::for_classes(mc.decoder.num_classes),
                ..TrainConfig::default()
            };
            tc.apply_kv(&kv)?;
            if let Some(s) = steps {
                tc.steps = s;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            if let Some(l) = lambda {
                let v: Vec<f64> = parse_list(&l)?;
                tc.loss.lambda = v
                    .try_into()
                    .map_err(|v: Vec<f64>| Error::config(format!("--lambda needs 4 values, got {}", v.len())))?;
            }
            tc.freeze_encoder |= freeze_encoder;
            let m = Manifest::load(&manifest)?;
            let train = load_split(&m, Split::Train, mc.decoder.num_classes, fallback(prior_proxy, tc.seed))?;
            let last_good = ckpt.with_extension("last_good.ckpt");
            let out = train_toy(&train, &mc, &tc, Some(&last_good), |r| {
                if r.step % 100 == 0 {
                    eprintln!("step {:>6}  total {:.6}", r.step, r.total);
                }
            })?;
            save_checkpoint(&ckpt, &mc, &out.store)?;
            let curve_path = curve.unwrap_or_else(|| ckpt.with_extension("curve.csv"));
            std::fs::write(&curve_path, curve_to_csv(&out.curve))?;
            let totals: Vec<f64> = out.curve.iter().map(|r| r.total).collect();
            let w = totals.len().min(10);
            println!(
                "trained {} steps; total loss moving average {:.6} -> {:.6}; checkpoint {}; curve {}",
                totals.len(),
                moving_average(&totals[..w]),
                moving_average(&totals[totals.len() - w..]),
                ckpt.display(),
                curve_path.display()
            );
        }
        Command::Evaluate {
            manifest,
            ckpt,
            out,
            split,
            f1,
            norm_stats,
            prior_proxy,
        } => {
            let f1 = match f1.as_str() {
                "all" => F1Average::AllClasses,
                "changed" => F1Average::ChangedOnly,
                other => return Err(Error::config(format!("--f1 must be all or changed, got {other:?}"))),
            };
            let (model, store) = load_checkpoint(&ckpt, None)?;
            let m = Manifest::load(&manifest)?;
            let samples = load_split(&m, split, model.config.decoder.num_classes, fallback(prior_proxy, 0))?;
            if samples.is_empty() {
                return Err(Error::data(format!("split {split} of {} is empty", manifest.display())));
            }
            let ev = evaluate(&model, &store, &samples, f1, norm_stats)?;
            emit_report(&ev, &out)?;
            print!("{}", ev.report.to_text());
        }
        Command::Gradcheck { module, seeds } => {
            let outcomes = run_checks(module.as_deref(), 0..seeds)?;
            let mut failed = 0;
            let mut names: Vec<(&str, &str)> = outcomes.iter().map(|o| (o.module, o.name)).collect();
            names.dedup();
            for (module, name) in names {
                let runs: Vec<_> = outcomes.iter().filter(|o| o.name == name).collect();
                let worst = runs.iter().map(|o| o.report.max_rel_error).fold(0.0, f64::max);
                let coords: usize = runs.iter().map(|o| o.report.coords_checked).sum();
                let ok = worst < TOLERANCE;
                failed += usize::from(!ok);
                println!(
                    "{} {module:<11} {name:<20} max_rel_error={worst:.3e} coords={coords}",
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} gradient checks above {TOLERANCE:e}")));
            }
        }
        Command::Report { eval_dir } => {
            print!("{}", rebuild_report(&eval_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
