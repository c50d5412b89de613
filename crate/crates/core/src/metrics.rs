//! Confusion matrices, per-class and averaged scores, the paired t-test and
//! random-erasing robustness evaluation.

use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::{Dataset, Rect};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::rng::{mix, stream, stream_rng};

/// Row index of the maximum in each row of `[N, K]` logits; ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted class of every sample, evaluated in batches.
pub fn predict(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = dataset.batch(chunk)?;
        out.extend(argmax_rows(&model.logits(&images)?));
    }
    Ok(out)
}

/// Rows are true classes, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// One-vs-rest counts for a single class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneVsRest {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::contract(format!("{k} classes need {} counts, got {}", k * k, counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn from_predictions(labels: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::contract(format!(
                "{} labels but {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in labels.iter().zip(predictions) {
            if t >= k || p >= k {
                return Err(Error::contract(format!("class index ({t}, {p}) outside [0, {k})")));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|p| self.get(class, p)).sum()
    }

    pub fn one_vs_rest(&self, class: usize) -> OneVsRest {
        let tp = self.get(class, class);
        let predicted: u64 = (0..self.k).map(|t| self.get(t, class)).sum();
        let actual = self.support(class);
        let fp = predicted - tp;
        let fn_ = actual - tp;
        OneVsRest {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    /// Overall fraction of correct predictions.
    pub fn accuracy(&self) -> f64 {
        let hits: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        ratio(hits as f64, self.total() as f64)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::contract("cannot merge confusion matrices of different sizes"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest accuracy `(TP + TN) / total`.
    pub accuracy: f64,
}

/// Precision, recall, F1 and accuracy of one class; 0/0 is taken as 0.
pub fn basic_metrics(cm: &ConfusionMatrix, class: usize) -> ClassMetrics {
    let OneVsRest { tp, fp, fn_, tn } = cm.one_vs_rest(class);
    let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassMetrics {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
        accuracy: ratio(tp + tn, tp + tn + fp + fn_),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro (unweighted) and support-weighted means of per-class scores.
pub fn aggregate(per_class: &[ClassMetrics], supports: &[u64]) -> Result<(Averages, Averages)> {
    if per_class.len() != supports.len() || per_class.is_empty() {
        return Err(Error::contract("need one support per class"));
    }
    let total: u64 = supports.iter().sum();
    if total == 0 {
        return Err(Error::contract("all class supports are zero"));
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().zip(supports).map(|(m, &s)| s as f64 * f(m)).sum::<f64>() / total as f64
    };
    Ok((
        Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        },
        Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
        },
    ))
}

/// Names of the seven headline metrics, in report order.
pub const SUMMARY_METRICS: [&str; 7] = [
    "accuracy",
    "macro_precision",
    "macro_recall",
    "macro_f1",
    "weighted_precision",
    "weighted_recall",
    "weighted_f1",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub support: Vec<u64>,
    pub macro_avg: Averages,
    pub weighted: Averages,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::contract("cannot report on an empty evaluation"));
        }
        let k = confusion.num_classes();
        let per_class: Vec<ClassMetrics> = (0..k).map(|c| basic_metrics(&confusion, c)).collect();
        let support: Vec<u64> = (0..k).map(|c| confusion.support(c)).collect();
        let (macro_avg, weighted) = aggregate(&per_class, &support)?;
        Ok(Self {
            accuracy: confusion.accuracy(),
            per_class,
            support,
            macro_avg,
            weighted,
            confusion,
        })
    }

    /// The seven headline metrics in [`SUMMARY_METRICS`] order.
    pub fn summary(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.macro_avg.precision,
            self.macro_avg.recall,
            self.macro_avg.f1,
            self.weighted.precision,
            self.weighted.recall,
            self.weighted.f1,
        ]
    }

    /// `metric=value` lines, six decimals, headline metrics first.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (name, v) in SUMMARY_METRICS.iter().zip(self.summary()) {
            let _ = writeln!(out, "{name}={v:.6}");
        }
        for (c, (m, s)) in self.per_class.iter().zip(&self.support).enumerate() {
            let _ = writeln!(out, "class{c}_precision={:.6}", m.precision);
            let _ = writeln!(out, "class{c}_recall={:.6}", m.recall);
            let _ = writeln!(out, "class{c}_f1={:.6}", m.f1);
            let _ = writeln!(out, "class{c}_support={s}");
        }
        out
    }

    /// Tab-separated headline metrics on one line.
    pub fn to_record(&self) -> String {
        self.summary().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join("\t")
    }
}

pub fn evaluate(model: &Model<f32>, dataset: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if dataset.num_classes() != model.num_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes(),
            model.num_classes()
        )));
    }
    let preds = predict(model, dataset, batch_size)?;
    EvalReport::from_confusion(ConfusionMatrix::from_predictions(&dataset.labels(), &preds, model.num_classes())?)
}

/// Mean and sample standard deviation (`n − 1`); the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-tailed paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, sd) = mean_std(&d);
    if sd == 0.0 {
        return Err(Error::DegenerateSample(
            "paired differences have zero variance".into(),
        ));
    }
    let n = d.len();
    let t = mean * (n as f64).sqrt() / sd;
    let df = n - 1;
    Ok(TTest {
        t,
        p: student_t_two_tailed(t, df as f64),
        df,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Natural log of Γ(x) for x > 0 (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [even, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Rectangle sampling ranges for random erasing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EraseConfig {
    /// Erased area as a fraction of the image.
    pub area: (f64, f64),
    /// Height / width ratio.
    pub aspect: (f64, f64),
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            area: (0.02, 0.4),
            aspect: (0.3, 3.3),
        }
    }
}

impl EraseConfig {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area;
        let (r0, r1) = self.aspect;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Config(format!("invalid erase ranges {self:?}")));
        }
        Ok(())
    }
}

/// Zero one random rectangle of a `[C, H, W]` image in every channel.
///
/// Area fraction is uniform in `area`, aspect ratio log-uniform in `aspect`;
/// rectangles that do not fit are redrawn up to 100 times, after which the
/// image is returned unchanged.
pub fn random_erase<R: Rng + ?Sized>(
    image: &Tensor<f32>,
    rng: &mut R,
    config: &EraseConfig,
) -> Result<(Tensor<f32>, Option<Rect>)> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::contract(format!("random_erase expects [C, H, W], got {:?}", image.shape())));
    };
    config.validate()?;
    let (a0, a1) = config.area;
    if a1 <= 0.0 {
        return Ok((image.clone(), None));
    }
    let total = (h * w) as f64;
    let (lr0, lr1) = (config.aspect.0.ln(), config.aspect.1.ln());
    for _ in 0..100 {
        let area = total * if a0 < a1 { rng.random_range(a0..=a1) } else { a0 };
        let aspect = if lr0 < lr1 { rng.random_range(lr0..=lr1) } else { lr0 }.exp();
        let rh = (area * aspect).sqrt().round() as usize;
        let rw = (area / aspect).sqrt().round() as usize;
        if rh == 0 || rw == 0 || rh > h || rw > w {
            continue;
        }
        let rect = Rect {
            y: rng.random_range(0..=h - rh),
            x: rng.random_range(0..=w - rw),
            h: rh,
            w: rw,
        };
        return Ok((erase_rect(image, rect), Some(rect)));
    }
    Ok((image.clone(), None))
}

/// Copy of `image` with `rect` zeroed in all channels.
pub fn erase_rect(image: &Tensor<f32>, rect: Rect) -> Tensor<f32> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w) {
        for y in rect.y..(rect.y + rect.h).min(h) {
            plane[y * w + rect.x..y * w + (rect.x + rect.w).min(w)].fill(0.0);
        }
    }
    out
}

/// The test set with one random rectangle erased per image. Image `i` always
/// receives the same rectangle for a given seed, whichever model is evaluated.
pub fn erased_dataset(dataset: &Dataset, seed: u64, config: &EraseConfig) -> Result<(Dataset, Vec<Option<Rect>>)> {
    let mut out = dataset.clone();
    let mut rects = Vec::with_capacity(dataset.len());
    for (i, s) in out.samples.iter_mut().enumerate() {
        let mut rng = stream_rng(mix(&[seed, i as u64]), stream::ERASE);
        let (img, rect) = random_erase(&s.image, &mut rng, config)?;
        s.image = img;
        rects.push(rect);
    }
    Ok((out, rects))
}

/// Evaluate on a random-erased copy of `dataset`; `None` evaluates the clean set.
pub fn robustness_eval(
    model: &Model<f32>,
    dataset: &Dataset,
    seed: u64,
    erase: Option<&EraseConfig>,
    batch_size: usize,
) -> Result<EvalReport> {
    match erase {
        None => evaluate(model, dataset, batch_size),
        Some(cfg) => evaluate(model, &erased_dataset(dataset, seed, cfg)?.0, batch_size),
    }
}
