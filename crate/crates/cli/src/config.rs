//! Flat `key=value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use distraction_core::data::{load_dir, synth_generate, AugmentConfig};
use distraction_core::optim::{AdamConfig, TrainConfig};
use distraction_core::saliency::OcclusionMode;
use distraction_core::{Dataset, Error, Result, SynthSpec};

/// Every accepted key, in the order `emit` writes them.
pub const KEYS: [&str; 20] = [
    "mode",
    "p",
    "th",
    "occlusion_mode",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "patience",
    "max_epochs",
    "image_size",
    "runs",
    "seed",
    "augment_flip",
    "augment_rotation",
    "augment_channel_shift",
    "augment_brightness",
    "dataset",
    "out",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    #[default]
    Distraction,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Distraction => "distraction",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "distraction" => Ok(Mode::Distraction),
            _ => Err(Error::Config(format!("mode must be baseline or distraction, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Dir(PathBuf),
    Synth(SynthSpec),
}

impl DatasetSource {
    /// Decode every image at `size`×`size`. A synthetic canvas must already
    /// have that size; resampling would smear the cue glyphs.
    pub fn load(&self, size: usize) -> Result<Dataset> {
        match self {
            DatasetSource::Dir(path) => load_dir(path, size),
            DatasetSource::Synth(spec) => {
                if spec.canvas != size {
                    return Err(Error::Config(format!(
                        "synthetic canvas is {} but image_size is {size}; set size={size} in the synth spec",
                        spec.canvas
                    )));
                }
                synth_generate(spec)
            }
        }
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSource::Dir(path) => write!(f, "{}", path.display()),
            DatasetSource::Synth(spec) => write!(f, "{spec}"),
        }
    }
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.starts_with("synth:") {
            Ok(DatasetSource::Synth(s.parse()?))
        } else if s.is_empty() {
            Err(Error::Config("dataset must not be empty".into()))
        } else {
            Ok(DatasetSource::Dir(PathBuf::from(s)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// `seed` here is the base seed; run `i` uses `seed + i`.
    pub train: TrainConfig,
    pub runs: usize,
    pub dataset: DatasetSource,
    pub out: PathBuf,
}

impl RunConfig {
    /// Defaults for everything except the two keys that have none.
    pub fn new(dataset: DatasetSource, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            mode: Mode::default(),
            train: TrainConfig::default(),
            runs: 5,
            dataset,
            out: out.into(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut train = TrainConfig::default();
        let mut mode = Mode::default();
        let mut runs = 5;
        let (mut dataset, mut out) = (None, None);
        let mut seen: Vec<&str> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let Some(&known) = KEYS.iter().find(|k| **k == key) else {
                return Err(at(format!("unknown key `{key}`; valid keys: {}", KEYS.join(", "))));
            };
            if seen.contains(&known) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            seen.push(known);
            let wrap = |e: Error| match e {
                Error::Config(msg) => at(msg),
                other => other,
            };
            match known {
                "mode" => mode = value.parse().map_err(wrap)?,
                "p" => train.p = number(key, value).map_err(wrap)?,
                "th" => train.th = number(key, value).map_err(wrap)?,
                "occlusion_mode" => train.occlusion_mode = value.parse::<OcclusionMode>().map_err(wrap)?,
                "batch_size" => train.batch_size = number(key, value).map_err(wrap)?,
                "lr" => train.adam.lr = number(key, value).map_err(wrap)?,
                "beta1" => train.adam.beta1 = number(key, value).map_err(wrap)?,
                "beta2" => train.adam.beta2 = number(key, value).map_err(wrap)?,
                "eps" => train.adam.eps = number(key, value).map_err(wrap)?,
                "patience" => train.patience = number(key, value).map_err(wrap)?,
                "max_epochs" => train.max_epochs = number(key, value).map_err(wrap)?,
                "image_size" => train.input_size = number(key, value).map_err(wrap)?,
                "runs" => runs = number(key, value).map_err(wrap)?,
                "seed" => train.seed = number(key, value).map_err(wrap)?,
                "augment_flip" => train.augmentation.flip = number(key, value).map_err(wrap)?,
                "augment_rotation" => train.augmentation.rotation_deg = number(key, value).map_err(wrap)?,
                "augment_channel_shift" => train.augmentation.channel_shift = number(key, value).map_err(wrap)?,
                "augment_brightness" => train.augmentation.brightness = brightness(value).map_err(wrap)?,
                "dataset" => dataset = Some(value.parse::<DatasetSource>().map_err(wrap)?),
                "out" => out = Some(PathBuf::from(value)),
                _ => unreachable!("every entry of KEYS is handled"),
            }
        }
        let missing = |k: &str| Error::Config(format!("missing required key `{k}`"));
        Ok(RunConfig {
            mode,
            train,
            runs,
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            out: out.ok_or_else(|| missing("out"))?,
        })
    }

    /// Canonical text form: every key, one per line, in `KEYS` order.
    pub fn emit(&self) -> String {
        let t = &self.train;
        let AdamConfig { lr, beta1, beta2, eps } = t.adam;
        let AugmentConfig {
            flip,
            rotation_deg,
            channel_shift,
            brightness,
        } = t.augmentation;
        let brightness = match brightness {
            Some((lo, hi)) => format!("{lo}:{hi}"),
            None => "off".into(),
        };
        let values = [
            self.mode.to_string(),
            t.p.to_string(),
            t.th.to_string(),
            t.occlusion_mode.to_string(),
            t.batch_size.to_string(),
            lr.to_string(),
            beta1.to_string(),
            beta2.to_string(),
            eps.to_string(),
            t.patience.to_string(),
            t.max_epochs.to_string(),
            t.input_size.to_string(),
            self.runs.to_string(),
            t.seed.to_string(),
            flip.to_string(),
            rotation_deg.to_string(),
            channel_shift.to_string(),
            brightness,
            self.dataset.to_string(),
            self.out.display().to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Range checks; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.mode == Mode::Baseline {
            // p, th and occlusion_mode are unused; only the shared fields matter
            let shared = TrainConfig {
                p: 0.0,
                occlusion_mode: OcclusionMode::Off,
                ..self.train.clone()
            };
            return shared.validate();
        }
        self.train.validate()
    }

    /// Training configuration of repetition `run`.
    pub fn run_config(&self, run: usize) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(run as u64),
            ..self.train.clone()
        }
    }
}

fn number<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{value}` is not a valid value for `{key}`")))
}

fn brightness(value: &str) -> Result<Option<(f32, f32)>> {
    if value == "off" {
        return Ok(None);
    }
    let (lo, hi) = value
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("augment_brightness needs lo:hi or off, got `{value}`")))?;
    Ok(Some((
        number("augment_brightness", lo.trim())?,
        number("augment_brightness", hi.trim())?,
    )))
}
