use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distraction_cli::inspect::{comparison_table, parse_range, Part};
use distraction_cli::{
    cmd_compare, cmd_evaluate, cmd_explain, cmd_robustness, cmd_train, exit_code, DataSelection, DatasetSource,
};
use distraction_core::metrics::EraseConfig;
use distraction_core::Result;

#[derive(Parser)]
#[command(name = "distraction", version, about = "Saliency-guided occlusion training for small CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train `runs` seeded repetitions from a key=value config file.
    Train {
        config: PathBuf,
        /// Suppress per-epoch progress on stderr.
        #[arg(short, long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint, or t-test two runs.tsv tables with --compare.
    Evaluate {
        #[arg(long, required_unless_present = "compare")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Write the report as key=value lines.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["RUNS_A", "RUNS_B"], conflicts_with = "checkpoint")]
        compare: Option<Vec<PathBuf>>,
    },
    /// Write a Grad-CAM graymap and overlay for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        target: Option<usize>,
        /// Threshold for the reported heat-map area.
        #[arg(long, default_value_t = 0.85)]
        th: f32,
        /// Output prefix; writes <prefix>.heat.pgm and <prefix>.overlay.ppm.
        #[arg(long, default_value = "explain")]
        out: PathBuf,
    },
    /// Accuracy on randomly erased images, one or two checkpoints side by side.
    Robustness {
        #[arg(long, required = true, num_args = 1..=2)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Seed of the erasures, shared by every checkpoint.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Erased area fraction range.
        #[arg(long, default_value = "0.02:0.4")]
        area: String,
        /// Height/width ratio range.
        #[arg(long, default_value = "0.3:3.3")]
        aspect: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory of class folders, or a synth:... spec.
    #[arg(long)]
    dataset: Option<String>,
    /// Defaults to the checkpoint's training resolution.
    #[arg(long)]
    image_size: Option<usize>,
    /// all, train, val or test; the partition is the one training drew with --split-seed.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn selection(&self) -> Result<DataSelection> {
        let source: DatasetSource = self
            .dataset
            .as_deref()
            .ok_or_else(|| distraction_core::Error::Config("--dataset is required".into()))?
            .parse()?;
        Ok(DataSelection {
            source,
            image_size: self.image_size,
            part: self.split.parse::<Part>()?,
            split_seed: self.split_seed,
        })
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, quiet } => {
            let summary = cmd_train(&config, !quiet)?;
            for r in &summary.runs {
                println!("run {}\tseed {}\tbest epoch {}\tsha256 {}", r.run, r.seed, r.best_epoch, r.fingerprint);
            }
            print!("{}", summary.table);
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            compare,
        } => match (compare, checkpoint) {
            (Some(files), _) => print!("{}", comparison_table(&cmd_compare(&files[0], &files[1])?)),
            (None, Some(checkpoint)) => {
                print!("{}", cmd_evaluate(checkpoint, &data.selection()?, out.as_deref())?.to_kv());
            }
            (None, None) => unreachable!("clap requires --checkpoint without --compare"),
        },
        Command::Explain {
            checkpoint,
            image,
            target,
            th,
            out,
        } => {
            let res = cmd_explain(checkpoint, image, target, th, out)?;
            let e = &res.explanation;
            println!("predicted={}\ntarget={}\narea_above_{th}={:.6}", e.predicted, e.target, e.area);
            println!("heat={}\noverlay={}", res.heat_path.display(), res.overlay_path.display());
        }
        Command::Robustness {
            checkpoint,
            data,
            seed,
            area,
            aspect,
            out,
        } => {
            let erase = EraseConfig {
                area: parse_range(&area)?,
                aspect: parse_range(&aspect)?,
            };
            let report = cmd_robustness(&checkpoint, &data.selection()?, seed, &erase)?;
            print!("{report}");
            if let Some(path) = out {
                std::fs::write(&path, report.table()).map_err(|source| distraction_core::Error::Io { path, source })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
