use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sketch_refine::cli::{self, TrainStage, MANIFEST_FILE};
use sketch_refine::config::RunConfig;
use sketch_refine::Result;

#[derive(Parser)]
#[command(
    name = "sketch-refine",
    version,
    about = "Sketch-and-refine DVR prediction from multimodal MRI"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest; defaults to <data_dir>/manifest.tsv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate a synthetic cohort and its manifest.
    PhantomGen(Common),
    /// Train the sketcher, the refiner or both.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "both")]
        stage: String,
    },
    /// Predict DVR maps (and sketches) for every manifest subject.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Directory holding sketcher.ckpt and refiner.ckpt.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Evaluate predictions against the reference maps.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory written by `predict`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train and evaluate with k-fold cross-validation.
    CrossValidate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest(&self, cfg: &RunConfig) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| cfg.data_dir().join(MANIFEST_FILE))
    }

    fn out(&self, default: PathBuf) -> PathBuf {
        self.out.clone().unwrap_or(default)
    }
}

fn run(verb: Verb) -> Result<String> {
    match verb {
        Verb::PhantomGen(c) => {
            let cfg = c.config()?;
            let path = cli::cmd_phantom_gen(&cfg, &c.out(cfg.data_dir()))?;
            Ok(format!("wrote {}", path.display()))
        }
        Verb::Train { common: c, stage } => {
            let cfg = c.config()?;
            let stage: TrainStage = stage.parse()?;
            let a = cli::cmd_train(&cfg, &c.manifest(&cfg), &c.out(cfg.checkpoint_dir()), stage)?;
            let written: Vec<String> = a
                .sketcher
                .iter()
                .chain(&a.refiner)
                .map(|p| p.display().to_string())
                .collect();
            Ok(format!("wrote {}", written.join(", ")))
        }
        Verb::Predict {
            common: c,
            checkpoints,
        } => {
            let cfg = c.config()?;
            let ckpt = checkpoints.unwrap_or_else(|| cfg.checkpoint_dir());
            let out = c.out(cfg.report_dir().join("predictions"));
            let written = cli::cmd_predict(&ckpt, &c.manifest(&cfg), &out)?;
            Ok(format!(
                "wrote {} predictions to {}",
                written.len(),
                out.display()
            ))
        }
        Verb::Evaluate {
            common: c,
            predictions,
        } => {
            let cfg = c.config()?;
            let preds = predictions.unwrap_or_else(|| cfg.report_dir().join("predictions"));
            let out = c.out(cfg.report_dir());
            let report = cli::cmd_evaluate(&cfg, &c.manifest(&cfg), &preds, &out)?;
            let dice = report
                .mean_dice()
                .map_or("unavailable".into(), |d| format!("{d:.4}"));
            Ok(format!(
                "wrote {}; mean Dice {dice}",
                out.join(cli::REPORT_FILE).display()
            ))
        }
        Verb::CrossValidate { common: c, k } => {
            let cfg = c.config()?;
            let out = c.out(cfg.report_dir().join("cross_validation"));
            let cv = cli::cmd_cross_validate(&cfg, &c.manifest(&cfg), &out, k)?;
            let dice = cv
                .aggregate
                .mean_dice()
                .map_or("unavailable".into(), |d| format!("{d:.4}"));
            Ok(format!(
                "{} folds written to {}; mean Dice {dice}",
                cv.folds.len(),
                out.display()
            ))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().verb) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
