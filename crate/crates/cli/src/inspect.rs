//! `evaluate`, `explain` and `robustness`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use distraction_core::autodiff::Tensor;
use distraction_core::checkpoint;
use distraction_core::data::split;
use distraction_core::field::{resize_image, upsample_bilinear, Field};
use distraction_core::metrics::{argmax_rows, paired_t_test, robustness_eval, EraseConfig, TTest, SUMMARY_METRICS};
use distraction_core::saliency::threshold_mask;
use distraction_core::{evaluate, grad_cam, pnm, Dataset, Error, EvalReport, HeatMap, Model, Result};

use crate::config::DatasetSource;
use crate::{read_file, write_file, EVAL_BATCH, SPLIT_FRACTIONS};

/// Which part of a dataset a command looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Part {
    #[default]
    All,
    Train,
    Val,
    Test,
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Part::All),
            "train" => Ok(Part::Train),
            "val" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            _ => Err(Error::Config(format!("split must be all, train, val or test, got `{s}`"))),
        }
    }
}

/// A dataset source plus the split a training run would have drawn from it.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSelection {
    pub source: DatasetSource,
    /// Defaults to the checkpoint's training resolution, else 64.
    pub image_size: Option<usize>,
    pub part: Part,
    /// Seed of the training run whose split to reproduce.
    pub split_seed: u64,
}

impl DataSelection {
    pub fn all(source: DatasetSource) -> Self {
        DataSelection {
            source,
            image_size: None,
            part: Part::All,
            split_seed: 0,
        }
    }

    pub fn load(&self, model: &Model<f32>) -> Result<Dataset> {
        let size = self.image_size.or(model.topology().input_size).unwrap_or(64);
        let ds = self.source.load(size)?;
        if ds.num_classes() != model.num_classes() {
            return Err(Error::Data(format!(
                "dataset has {} classes, checkpoint has {}",
                ds.num_classes(),
                model.num_classes()
            )));
        }
        if self.part == Part::All {
            return Ok(ds);
        }
        let s = split(&ds, SPLIT_FRACTIONS, self.split_seed)?;
        let indices = match self.part {
            Part::Train => s.train,
            Part::Val => s.val,
            _ => s.test,
        };
        Ok(ds.subset(&indices))
    }
}

pub fn cmd_evaluate(checkpoint_path: impl AsRef<Path>, data: &DataSelection, out: Option<&Path>) -> Result<EvalReport> {
    let model = checkpoint::load(checkpoint_path)?;
    let report = evaluate(&model, &data.load(&model)?, EVAL_BATCH)?;
    if let Some(path) = out {
        write_file(path, report.to_kv())?;
    }
    Ok(report)
}

/// Per-metric paired t-test between two `runs.tsv` tables (paired by row).
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: &'static str,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when the paired differences have zero variance.
    pub test: Option<TTest>,
}

/// Parse the seven metric columns of a `runs.tsv` table.
pub fn read_runs_table(path: impl AsRef<Path>) -> Result<Vec<[f64; 7]>> {
    let path = path.as_ref();
    let text = read_file(path)?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty table".into()))?.split('\t').collect();
    let columns = SUMMARY_METRICS
        .iter()
        .map(|m| header.iter().position(|h| h == m).ok_or_else(|| bad(format!("no `{m}` column"))))
        .collect::<Result<Vec<_>>>()?;
    lines
        .enumerate()
        .map(|(row, line)| {
            let cells: Vec<&str> = line.split('\t').collect();
            let mut values = [0.0; 7];
            for (slot, &col) in columns.iter().enumerate() {
                values[slot] = cells
                    .get(col)
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| bad(format!("row {}: bad value in column {}", row + 1, SUMMARY_METRICS[slot])))?;
            }
            Ok(values)
        })
        .collect()
}

/// Fails with a degenerate-sample error only when no metric can be tested.
pub fn cmd_compare(a: impl AsRef<Path>, b: impl AsRef<Path>) -> Result<Vec<Comparison>> {
    let (a, b) = (read_runs_table(a)?, read_runs_table(b)?);
    if a.len() != b.len() {
        return Err(Error::Data(format!("tables have {} and {} runs; pairing needs equal counts", a.len(), b.len())));
    }
    let mut out = Vec::new();
    let mut last_err = None;
    for (i, metric) in SUMMARY_METRICS.iter().enumerate() {
        let xa: Vec<f64> = a.iter().map(|r| r[i]).collect();
        let xb: Vec<f64> = b.iter().map(|r| r[i]).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len().max(1) as f64;
        let test = match paired_t_test(&xa, &xb) {
            Ok(t) => Some(t),
            Err(e @ Error::DegenerateSample(_)) => {
                last_err = Some(e);
                None
            }
            Err(e) => return Err(e),
        };
        out.push(Comparison {
            metric,
            mean_a: mean(&xa),
            mean_b: mean(&xb),
            test,
        });
    }
    match last_err {
        Some(e) if out.iter().all(|c| c.test.is_none()) => Err(e),
        _ => Ok(out),
    }
}

pub fn comparison_table(rows: &[Comparison]) -> String {
    let mut out = String::from("metric\tmean_a\tmean_b\tt\tdf\tp\n");
    for c in rows {
        match c.test {
            Some(t) => out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.6}\n",
                c.metric, c.mean_a, c.mean_b, t.t, t.df, t.p
            )),
            None => out.push_str(&format!("{}\t{:.6}\t{:.6}\t-\t-\t-\n", c.metric, c.mean_a, c.mean_b)),
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Explanation {
    pub predicted: usize,
    pub target: usize,
    /// Computed at the network's input resolution.
    pub heat: HeatMap,
    /// Fraction of pixels whose normalized weight exceeds `th`.
    pub area: f64,
}

/// Grad-CAM of one `[C, H, W]` image; `target` defaults to the predicted class.
pub fn explain(model: &mut Model<f32>, image: &Tensor<f32>, target: Option<usize>, th: f32) -> Result<Explanation> {
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let predicted = argmax_rows(&model.logits(&batch)?)[0];
    let target = target.unwrap_or(predicted);
    if target >= model.num_classes() {
        return Err(Error::Config(format!(
            "target class {target} out of range; the model has {} classes",
            model.num_classes()
        )));
    }
    let heat = grad_cam(model, image, target)?;
    model.clear_capture();
    let area = threshold_mask(&heat.normalized, th)?.fraction();
    Ok(Explanation {
        predicted,
        target,
        heat,
        area,
    })
}

/// Thresholded heat-map area of every image, each explained for its predicted class.
pub fn heat_areas(model: &mut Model<f32>, dataset: &Dataset, th: f32) -> Result<Vec<f64>> {
    dataset
        .samples
        .iter()
        .map(|s| explain(model, &s.image, None, th).map(|e| e.area))
        .collect()
}

/// Files written by [`cmd_explain`].
#[derive(Clone, Debug)]
pub struct ExplainOutput {
    pub explanation: Explanation,
    pub heat_path: std::path::PathBuf,
    pub overlay_path: std::path::PathBuf,
}

/// Explain one image file and write `<prefix>.heat.pgm` and `<prefix>.overlay.ppm`
/// at the file's own resolution.
pub fn cmd_explain(
    checkpoint_path: impl AsRef<Path>,
    image_path: impl AsRef<Path>,
    target: Option<usize>,
    th: f32,
    prefix: impl AsRef<Path>,
) -> Result<ExplainOutput> {
    let mut model = checkpoint::load(checkpoint_path)?;
    let image_path = image_path.as_ref();
    let image = pnm::decode(&std::fs::read(image_path).map_err(|source| Error::Io {
        path: image_path.to_path_buf(),
        source,
    })?)
    .map_err(|e| Error::Data(format!("{}: {e}", image_path.display())))?;
    let &[c, h, w] = image.shape() else {
        unreachable!("pnm images are [C, H, W]")
    };
    if c != model.in_channels() {
        return Err(Error::Data(format!(
            "{} has {c} channels, the model expects {}",
            image_path.display(),
            model.in_channels()
        )));
    }
    let size = model.topology().input_size.unwrap_or(h.max(w));
    let input = if (h, w) == (size, size) {
        image.clone()
    } else {
        resize_image(&image, size, size)?
    };
    let explanation = explain(&mut model, &input, target, th)?;
    let heat: Field = upsample_bilinear(&explanation.heat.normalized, h, w)?;

    let prefix = prefix.as_ref().display().to_string();
    let heat_path = format!("{prefix}.heat.pgm").into();
    let overlay_path = format!("{prefix}.overlay.ppm").into();
    write_file(&heat_path, pnm::field_to_pgm(&heat))?;
    write_file(&overlay_path, pnm::encode(&pnm::overlay(&image, &heat)?)?)?;
    Ok(ExplainOutput {
        explanation,
        heat_path,
        overlay_path,
    })
}

/// Clean and erased reports of every model, on erasures shared by all of them.
#[derive(Clone, Debug)]
pub struct RobustnessReport {
    pub clean: Vec<EvalReport>,
    pub erased: Vec<EvalReport>,
}

impl RobustnessReport {
    /// Side-by-side table: one row per metric, clean/erased columns per model.
    pub fn table(&self) -> String {
        let mut out = String::from("metric");
        for m in 0..self.clean.len() {
            let tag = (b'A' + m as u8) as char;
            out.push_str(&format!("\t{tag}_clean\t{tag}_erased\t{tag}_drop"));
        }
        out.push('\n');
        for (i, name) in SUMMARY_METRICS.iter().enumerate() {
            out.push_str(name);
            for (c, e) in self.clean.iter().zip(&self.erased) {
                let (c, e) = (c.summary()[i], e.summary()[i]);
                out.push_str(&format!("\t{c:.6}\t{e:.6}\t{:.6}", c - e));
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for RobustnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

pub fn cmd_robustness(
    checkpoints: &[impl AsRef<Path>],
    data: &DataSelection,
    seed: u64,
    erase: &EraseConfig,
) -> Result<RobustnessReport> {
    if checkpoints.is_empty() {
        return Err(Error::Config("at least one checkpoint is required".into()));
    }
    erase.validate()?;
    let models = checkpoints.iter().map(checkpoint::load).collect::<Result<Vec<_>>>()?;
    if models.iter().any(|m| m.num_classes() != models[0].num_classes()) {
        return Err(Error::Data("checkpoints disagree on the number of classes".into()));
    }
    let dataset = data.load(&models[0])?;
    let mut report = RobustnessReport {
        clean: Vec::new(),
        erased: Vec::new(),
    };
    for model in &models {
        report.clean.push(robustness_eval(model, &dataset, seed, None, EVAL_BATCH)?);
        report.erased.push(robustness_eval(model, &dataset, seed, Some(erase), EVAL_BATCH)?);
    }
    Ok(report)
}

/// `lo:hi` pair.
pub fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Config(format!("expected lo:hi, got `{s}`"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}
