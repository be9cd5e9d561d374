use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segedit::harness::{self, ExperimentConfig, ExperimentKind, RunOptions};
use segedit::metrics::evaluate;
use segedit::segnet::{train, SegModel};
use segedit::synthgen::Dataset;
use segedit::{Error, Result};

#[derive(Parser)]
#[command(name = "segedit", version, about = "Perturbation probes and weight rewriting for a small segmenter")]
struct Cli {
    /// Dataset seed; overrides the config's dataset seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON experiment config (grid: a list of configs).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Use 20000 rewrite steps per layer instead of 2000.
    #[arg(long = "paper-steps", global = true)]
    long_steps: bool,
    /// Replace existing results instead of verifying them.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the synthetic benchmark.
    GenData,
    /// Train the baseline segmenter.
    Train {
        /// Existing dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Occlude targets on the training images and count confuser detections.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an edit experiment (default: single-image edits of A..F).
    Edit,
    /// Evaluate a checkpoint on the unseen pool.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run a list of experiments (default: the full experiment grid).
    Grid,
    /// Compare two reports (report.json or a directory holding one).
    Compare { a: PathBuf, b: PathBuf },
}

fn config_for(cli: &Cli, kind: ExperimentKind, name: &str) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(name, kind),
    };
    apply_flags(cli, &mut c);
    Ok(c)
}

fn apply_flags(cli: &Cli, c: &mut ExperimentConfig) {
    if let Some(seed) = cli.seed {
        c.dataset.seed = seed;
    }
    if cli.long_steps {
        c.use_long_steps();
    }
}

fn guard_output(dir: &Path, force: bool) -> Result<()> {
    if !force && (dir.join("manifest.json").exists() || dir.join("model.json").exists()) {
        return Err(Error::Config {
            path: dir.display().to_string(),
            reason: "output already exists; pass --force to replace it".into(),
        });
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.verb {
        Verb::GenData => {
            let c = config_for(cli, ExperimentKind::Baseline, "gen-data")?;
            c.dataset.generator.validate()?;
            guard_output(&cli.out, cli.force)?;
            let ds = Dataset::generate(c.dataset.seed, &c.dataset.generator)?;
            ds.save(&cli.out)?;
            for s in &ds.samples {
                println!("{} {} instances, textures {:?}", s.id, s.num_instances(), s.textures);
            }
        }
        Verb::Train { data } => {
            let c = config_for(cli, ExperimentKind::Baseline, "train")?;
            c.validate()?;
            guard_output(&cli.out, cli.force)?;
            let ds = match data {
                Some(d) => Dataset::load(d)?,
                None => Dataset::generate(c.dataset.seed, &c.dataset.generator)?,
            };
            let mut model = SegModel::new(c.model.clone())?;
            model.provenance.dataset_seed = Some(ds.manifest.seed);
            let report = train(&mut model, &ds.train(), &c.train)?;
            model.save(&cli.out)?;
            println!(
                "trained {} epochs, final loss {:.4}, pixel accuracy {:.3}, hash {}",
                report.loss_curve.len(),
                report.loss_curve.last().copied().unwrap_or(f64::NAN),
                report.pixel_accuracy,
                model.parameter_hash()
            );
        }
        Verb::Probe { model, data } => {
            let model = SegModel::load(model)?;
            let ds = Dataset::load(data)?;
            let rows = ds
                .train()
                .into_iter()
                .map(|s| harness::occlusion_probe(&model, s, 0.0))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", harness::probe_markdown(&rows));
        }
        Verb::Edit => {
            let c = config_for(cli, ExperimentKind::EditSingle, "edit")?;
            let opts = RunOptions {
                force: cli.force,
                cache: None,
            };
            let summary = harness::run(&c, &cli.out, &opts)?;
            print!("{}", harness::results_markdown(&summary));
        }
        Verb::Eval { model, data } => {
            let model = SegModel::load(model)?;
            let ds = Dataset::load(data)?;
            let report = evaluate(&model, &ds.unseen(), 0.0)?;
            report.write(&cli.out)?;
            print!("{}", report.to_markdown());
        }
        Verb::Grid => {
            let mut configs = match &cli.config {
                Some(p) => harness::load_grid(p)?,
                None => harness::full_grid(),
            };
            configs.iter_mut().for_each(|c| apply_flags(cli, c));
            let report = harness::grid(&configs, &cli.out, cli.force)?;
            print!("{}", report.to_markdown());
            if let Some(e) = report.entries.iter().find_map(|e| e.result.as_ref().err()) {
                return Err(Error::Stage {
                    stage: "grid".into(),
                    reason: e.to_string(),
                });
            }
        }
        Verb::Compare { a, b } => {
            let ra = harness::load_report(a)?;
            let rb = harness::load_report(b)?;
            let cmp = harness::compare(&ra, &rb)?;
            print!("{}", cmp.to_markdown(&a.display().to_string(), &b.display().to_string()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
