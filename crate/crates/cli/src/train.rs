//! `train`: seeded repetitions, per-run artifacts and a mean±std summary.

use std::path::Path;

use distraction_core::autodiff::Tensor;
use distraction_core::checkpoint;
use distraction_core::data::split;
use distraction_core::metrics::{mean_std, SUMMARY_METRICS};
use distraction_core::optim::{EpochRecord, TrainObserver};
use distraction_core::{
    build_small_cam_net, evaluate, train_baseline, train_distraction, Dataset, EvalReport, Result, StepDecision,
};

use crate::config::{Mode, RunConfig};
use crate::{create_dir, write_file, EVAL_BATCH, SPLIT_FRACTIONS};

/// Outcome of one repetition.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub report: EvalReport,
    /// SHA-256 of the saved checkpoint bytes.
    pub fingerprint: String,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub runs: Vec<RunResult>,
    /// Contents of `summary.tsv`.
    pub table: String,
}

/// Collects the epoch and step logs in memory; progress goes to stderr.
struct Logs {
    run: usize,
    verbose: bool,
    epochs: String,
    steps: String,
}

impl TrainObserver for Logs {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        if self.verbose {
            eprintln!(
                "run {} epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}",
                self.run, record.epoch, record.train_loss, record.train_acc, record.val_acc
            );
        }
        self.epochs.push_str(&format!("{record}\n"));
        Ok(())
    }

    fn on_step(&mut self, decision: &StepDecision, _batch: Option<&Tensor<f32>>) -> Result<()> {
        self.steps.push_str(&format!("{decision}\n"));
        Ok(())
    }
}

/// Read a config file and train. See [`train`].
pub fn cmd_train(config_path: impl AsRef<Path>, verbose: bool) -> Result<TrainSummary> {
    let config = RunConfig::from_file(config_path)?;
    train(&config, verbose)
}

/// Run `config.runs` repetitions with seeds `seed, seed+1, …`. Each run draws
/// its own 60/20/20 split, initialization and batch order from its seed.
///
/// Layout under `out`: `config.txt`, `runs.tsv`, `summary.tsv`, and per run
/// `run<i>/{model.ckpt, epochs.tsv, steps.tsv, test_report.txt}` (`steps.tsv`
/// only in distraction mode). Nothing written depends on wall-clock time.
pub fn train(config: &RunConfig, verbose: bool) -> Result<TrainSummary> {
    for warning in config.validate()? {
        eprintln!("warning: {warning}");
    }
    let dataset = config.dataset.load(config.train.input_size)?;
    create_dir(&config.out)?;
    write_file(config.out.join("config.txt"), config.emit())?;

    let mut runs = Vec::with_capacity(config.runs);
    for run in 0..config.runs {
        let result = train_one(config, &dataset, run, verbose)?;
        if verbose {
            eprintln!("run {run}: test accuracy {:.4}", result.report.accuracy);
        }
        runs.push(result);
    }

    let mut records = format!("run\tseed\t{}\n", SUMMARY_METRICS.join("\t"));
    for r in &runs {
        records.push_str(&format!("{}\t{}\t{}\n", r.run, r.seed, r.report.to_record()));
    }
    write_file(config.out.join("runs.tsv"), records)?;
    let table = summary_table(&runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>());
    write_file(config.out.join("summary.tsv"), &table)?;
    Ok(TrainSummary { runs, table })
}

fn train_one(config: &RunConfig, dataset: &Dataset, run: usize, verbose: bool) -> Result<RunResult> {
    let train_config = config.run_config(run);
    let seed = train_config.seed;
    let parts = split(dataset, SPLIT_FRACTIONS, seed)?;
    let (train, val, test) = (dataset.subset(&parts.train), dataset.subset(&parts.val), dataset.subset(&parts.test));
    let mut model = build_small_cam_net(dataset.channels, dataset.num_classes(), seed)?;
    model.set_input_size(train_config.input_size);
    let mut logs = Logs {
        run,
        verbose,
        epochs: format!("{}\n", EpochRecord::HEADER),
        steps: format!("{}\n", StepDecision::HEADER),
    };
    let outcome = match config.mode {
        Mode::Baseline => train_baseline(model, &train, &val, &train_config, &mut logs)?,
        Mode::Distraction => train_distraction(model, &train, &val, &train_config, &mut logs)?,
    };
    let report = evaluate(&outcome.model, &test, EVAL_BATCH)?;

    let dir = config.out.join(format!("run{run}"));
    create_dir(&dir)?;
    let bytes = checkpoint::encode(&outcome.model);
    write_file(dir.join("model.ckpt"), &bytes)?;
    write_file(dir.join("epochs.tsv"), &logs.epochs)?;
    if config.mode == Mode::Distraction {
        write_file(dir.join("steps.tsv"), &logs.steps)?;
    }
    write_file(dir.join("test_report.txt"), report.to_kv())?;
    Ok(RunResult {
        run,
        seed,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        report,
        fingerprint: checkpoint::fingerprint(&bytes),
    })
}

/// `metric  mean  std` for the seven summary metrics; std is the sample
/// standard deviation and 0 for a single run.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric\tmean\tstd\n");
    for (i, name) in SUMMARY_METRICS.iter().enumerate() {
        let values: Vec<f64> = reports.iter().map(|r| r.summary()[i]).collect();
        let (mean, std) = mean_std(&values);
        out.push_str(&format!("{name}\t{mean:.6}\t{std:.6}\n"));
    }
    out
}
