//! Flat `key = value` experiment configuration.
//!
//! A config file is parsed line by line (`#` starts a comment); command-line
//! overrides are applied on top with the same keys, so flags always win. The
//! resolved config is written back next to the results as `config.txt`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use scaleadv::attack_blackbox::SamplingMode;
use scaleadv::ScalerKind;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Train,
    ScaleAttack,
    Whitebox,
    Blackbox,
    Detect,
    Robust,
    Report,
    RemoteEval,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::ScaleAttack => "scale-attack",
            ExperimentKind::Whitebox => "whitebox",
            ExperimentKind::Blackbox => "blackbox",
            ExperimentKind::Detect => "detect",
            ExperimentKind::Robust => "robust-scalers",
            ExperimentKind::Report => "report",
            ExperimentKind::RemoteEval => "remote-eval",
        }
    }

    /// White-box style experiments default to an adversarially trained model.
    fn wants_robust_model(self) -> bool {
        matches!(self, ExperimentKind::Whitebox | ExperimentKind::Robust | ExperimentKind::RemoteEval)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "train" => ExperimentKind::Train,
            "scale-attack" | "attack-scale" => ExperimentKind::ScaleAttack,
            "whitebox" | "attack-white" => ExperimentKind::Whitebox,
            "blackbox" | "attack-black" => ExperimentKind::Blackbox,
            "detect" => ExperimentKind::Detect,
            "robust-scalers" | "robust" => ExperimentKind::Robust,
            "report" => ExperimentKind::Report,
            "remote-eval" => ExperimentKind::RemoteEval,
            other => return Err(format!("unknown experiment {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DefenseChoice {
    None,
    Median,
    Randomized,
}

impl DefenseChoice {
    pub fn name(self) -> &'static str {
        match self {
            DefenseChoice::None => "none",
            DefenseChoice::Median => "median",
            DefenseChoice::Randomized => "randomized",
        }
    }
}

impl fmt::Display for DefenseChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(DefenseChoice::None),
            "median" => Ok(DefenseChoice::Median),
            "randomized" | "random" => Ok(DefenseChoice::Randomized),
            other => Err(format!("unknown defense {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synth,
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhiteboxAttack {
    Pgd,
    Cw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub url: Option<String>,
    pub format: ImageFormat,
    /// Benign Top-1 score needed for an image to enter the evaluation.
    pub truth_min: f64,
    /// The truth label's score must drop below this for success.
    pub success_max: f64,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub scaler: ScalerKind,
    pub beta: usize,
    pub defenses: Vec<DefenseChoice>,
    pub eps_grid: Vec<f64>,
    pub kappa_grid: Vec<f64>,
    pub budget_grid: Vec<usize>,
    /// Black-box sampling modes; empty means the defaults for each defense.
    pub modes: Vec<SamplingMode>,
    pub attack: WhiteboxAttack,
    pub dataset: DatasetSource,
    pub lr_side: usize,
    pub classes: usize,
    pub train_size: usize,
    /// Held-out benign HR images used for calibration and start pools.
    pub calibration: usize,
    /// Evaluation images per grid point.
    pub images: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub model: Option<PathBuf>,
    pub epochs: usize,
    /// `None` trains a plain model.
    pub adv_epsilon: Option<f64>,
    pub adv_steps: usize,
    pub pgd_steps: usize,
    pub cw_binary_steps: usize,
    pub cw_iterations: usize,
    /// Worker threads; 0 picks the available parallelism.
    pub workers: usize,
    pub remote: RemoteConfig,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            scaler: ScalerKind::Bilinear,
            beta: 3,
            defenses: vec![DefenseChoice::None],
            eps_grid: vec![0.5, 1.0, 2.0, 3.0],
            kappa_grid: (0..=10).map(f64::from).collect(),
            budget_grid: vec![1000, 2000],
            modes: Vec::new(),
            attack: WhiteboxAttack::Pgd,
            dataset: DatasetSource::Synth,
            lr_side: 28,
            classes: 10,
            train_size: 1500,
            calibration: 100,
            images: 20,
            seed: 0,
            out: PathBuf::from("out"),
            model: None,
            epochs: 8,
            adv_epsilon: experiment.wants_robust_model().then_some(1.0),
            adv_steps: 5,
            pgd_steps: 100,
            cw_binary_steps: 20,
            cw_iterations: 100,
            workers: 0,
            remote: RemoteConfig { url: None, format: ImageFormat::Png, truth_min: 0.5, success_max: 0.1, timeout_secs: 30 },
        }
    }

    /// Loads `path` on top of the defaults for `experiment`.
    pub fn from_file(experiment: ExperimentKind, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(experiment, &text, path)
    }

    pub fn from_text(experiment: ExperimentKind, text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::defaults(experiment);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Config { path: path.to_path_buf(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    /// Applies one setting; unknown keys and malformed values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "experiment" => {
                let kind: ExperimentKind = value.parse()?;
                if kind != self.experiment {
                    return Err(format!("config is for {kind}, not {}", self.experiment));
                }
            }
            "scaler" => self.scaler = parse_scaler(value)?,
            "beta" => self.beta = parse(key, value)?,
            "defense" => self.defenses = parse_list(key, value)?,
            "eps_grid" => self.eps_grid = parse_list(key, value)?,
            "kappa_grid" => self.kappa_grid = parse_list(key, value)?,
            "budget_grid" => self.budget_grid = parse_list(key, value)?,
            "modes" => self.modes = parse_list(key, value)?,
            "attack" => {
                self.attack = match value {
                    "pgd" => WhiteboxAttack::Pgd,
                    "cw" => WhiteboxAttack::Cw,
                    other => return Err(format!("unknown attack {other:?}")),
                }
            }
            "dataset" => {
                self.dataset = match value {
                    "synth" => DatasetSource::Synth,
                    "idx" => DatasetSource::Idx { images: PathBuf::new(), labels: PathBuf::new() },
                    other => return Err(format!("unknown dataset source {other:?}")),
                }
            }
            "idx_images" | "idx_labels" => {
                let DatasetSource::Idx { images, labels } = &mut self.dataset else {
                    return Err(format!("{key} requires `dataset = idx` earlier in the file"));
                };
                *(if key == "idx_images" { images } else { labels }) = PathBuf::from(value);
            }
            "lr_side" => self.lr_side = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "train_size" => self.train_size = parse(key, value)?,
            "calibration" => self.calibration = parse(key, value)?,
            "images" => self.images = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "model" => self.model = (!value.is_empty()).then(|| PathBuf::from(value)),
            "epochs" => self.epochs = parse(key, value)?,
            "adv_epsilon" => {
                let eps: f64 = parse(key, value)?;
                self.adv_epsilon = (eps > 0.0).then_some(eps);
            }
            "adv_steps" => self.adv_steps = parse(key, value)?,
            "pgd_steps" => self.pgd_steps = parse(key, value)?,
            "cw_binary_steps" => self.cw_binary_steps = parse(key, value)?,
            "cw_iterations" => self.cw_iterations = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "remote_url" => self.remote.url = (!value.is_empty()).then(|| value.to_string()),
            "remote_format" => {
                self.remote.format = match value {
                    "ppm" => ImageFormat::Ppm,
                    "png" => ImageFormat::Png,
                    other => return Err(format!("unknown image format {other:?}")),
                }
            }
            "remote_truth_min" => self.remote.truth_min = parse(key, value)?,
            "remote_success_max" => self.remote.success_max = parse(key, value)?,
            "remote_timeout" => self.remote.timeout_secs = parse(key, value)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        let main = !matches!(self.experiment, ExperimentKind::Train | ExperimentKind::Report);
        if main && !matches!(self.beta, 3 | 4) {
            return bad(format!("beta must be 3 or 4, got {}", self.beta));
        }
        if self.defenses.is_empty() || self.eps_grid.is_empty() || self.kappa_grid.is_empty() || self.budget_grid.is_empty() {
            return bad("grids must be nonempty".into());
        }
        if self.eps_grid.iter().any(|&e| !(e > 0.0)) {
            return bad("eps_grid entries must be positive".into());
        }
        if self.kappa_grid.iter().any(|&k| !(k >= 0.0)) {
            return bad("kappa_grid entries must be >= 0".into());
        }
        if self.budget_grid.iter().any(|&b| b < 100) {
            return bad("budget_grid entries must be >= 100".into());
        }
        if self.experiment == ExperimentKind::Blackbox && self.defenses.contains(&DefenseChoice::Randomized) {
            return bad("the black-box attack does not target randomized filtering".into());
        }
        if let DatasetSource::Idx { images, labels } = &self.dataset {
            if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                return bad("dataset = idx needs idx_images and idx_labels".into());
            }
        }
        if self.images == 0 || self.calibration == 0 || self.train_size == 0 {
            return bad("images, calibration and train_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.remote.truth_min) || !(0.0..=1.0).contains(&self.remote.success_max) {
            return bad("remote thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Serializes to the same flat format [`from_text`](Self::from_text) reads.
    pub fn to_text(&self) -> String {
        let list = |v: &[String]| v.join(",");
        let mut lines = vec![
            format!("experiment = {}", self.experiment),
            format!("scaler = {}", self.scaler.name()),
            format!("beta = {}", self.beta),
            format!("defense = {}", list(&self.defenses.iter().map(|d| d.to_string()).collect::<Vec<_>>())),
            format!("eps_grid = {}", list(&self.eps_grid.iter().map(|e| e.to_string()).collect::<Vec<_>>())),
            format!("kappa_grid = {}", list(&self.kappa_grid.iter().map(|k| k.to_string()).collect::<Vec<_>>())),
            format!("budget_grid = {}", list(&self.budget_grid.iter().map(|b| b.to_string()).collect::<Vec<_>>())),
            format!("modes = {}", list(&self.modes.iter().map(|m| m.to_string()).collect::<Vec<_>>())),
            format!("attack = {}", if self.attack == WhiteboxAttack::Pgd { "pgd" } else { "cw" }),
        ];
        match &self.dataset {
            DatasetSource::Synth => lines.push("dataset = synth".into()),
            DatasetSource::Idx { images, labels } => {
                lines.push("dataset = idx".into());
                lines.push(format!("idx_images = {}", images.display()));
                lines.push(format!("idx_labels = {}", labels.display()));
            }
        }
        lines.extend([
            format!("lr_side = {}", self.lr_side),
            format!("classes = {}", self.classes),
            format!("train_size = {}", self.train_size),
            format!("calibration = {}", self.calibration),
            format!("images = {}", self.images),
            format!("seed = {}", self.seed),
            format!("out = {}", self.out.display()),
            format!("model = {}", self.model.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            format!("epochs = {}", self.epochs),
            format!("adv_epsilon = {}", self.adv_epsilon.unwrap_or(0.0)),
            format!("adv_steps = {}", self.adv_steps),
            format!("pgd_steps = {}", self.pgd_steps),
            format!("cw_binary_steps = {}", self.cw_binary_steps),
            format!("cw_iterations = {}", self.cw_iterations),
            format!("workers = {}", self.workers),
            format!("remote_url = {}", self.remote.url.clone().unwrap_or_default()),
            format!("remote_format = {}", if self.remote.format == ImageFormat::Png { "png" } else { "ppm" }),
            format!("remote_truth_min = {}", self.remote.truth_min),
            format!("remote_success_max = {}", self.remote.success_max),
            format!("remote_timeout = {}", self.remote.timeout_secs),
        ]);
        lines.join("\n") + "\n"
    }

    /// Black-box modes to run for `defense`.
    pub fn modes_for(&self, defense: DefenseChoice) -> Vec<SamplingMode> {
        if !self.modes.is_empty() {
            return self.modes.clone();
        }
        match defense {
            DefenseChoice::Median => vec![SamplingMode::HrNaive, SamplingMode::LrSubspaceMedian],
            _ => vec![SamplingMode::HrNaive, SamplingMode::LrSubspace],
        }
    }

    pub fn worker_count(&self) -> usize {
        if self.workers > 0 {
            self.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| format!("invalid {key} entry {s:?}: {e}")))
        .collect()
}

pub fn parse_scaler(value: &str) -> std::result::Result<ScalerKind, String> {
    ScalerKind::ALL.into_iter().find(|k| k.name() == value).ok_or_else(|| format!("unknown scaler {value:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Blackbox);
        cfg.defenses = vec![DefenseChoice::None, DefenseChoice::Median];
        cfg.modes = vec![SamplingMode::LrSubspace];
        cfg.dataset = DatasetSource::Idx { images: "a.idx".into(), labels: "b.idx".into() };
        let back = ExperimentConfig::from_text(ExperimentKind::Blackbox, &cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let text = "beta = 3\n# comment\n\nbeta = three\n";
        let err = ExperimentConfig::from_text(ExperimentKind::Whitebox, text, Path::new("cfg.txt")).unwrap_err();
        assert_eq!(err.to_string(), "cfg.txt:4: invalid value \"three\" for beta");
        let err = ExperimentConfig::from_text(ExperimentKind::Whitebox, "colour = red", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Config { line: 1, .. }));
    }

    #[test]
    fn validation_rejects_bad_ratios_and_empty_grids() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Whitebox);
        cfg.beta = 2;
        assert!(cfg.validate().is_err());
        cfg.beta = 4;
        cfg.eps_grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Blackbox);
        cfg.defenses = vec![DefenseChoice::Randomized];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn whitebox_defaults_to_a_robust_model() {
        assert!(ExperimentConfig::defaults(ExperimentKind::Whitebox).adv_epsilon.is_some());
        assert!(ExperimentConfig::defaults(ExperimentKind::Blackbox).adv_epsilon.is_none());
    }
}
