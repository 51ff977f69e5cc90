//! Run configuration: a flat, sectioned, line-oriented key=value format.
//!
//! Grammar (one setting per line):
//!
//! ```text
//! # comment (also ';')
//! [section]
//! key = value
//! ```
//!
//! Sections and keys:
//!
//! ```text
//! [model]   input = 784 | 1x28x28
//!           layer = dense <units>
//!                 | conv <out_c> <in_c> <kh>x<kw> [stride <s>] [pad <p>]
//!                 | relu
//!                 | maxpool <window> [stride <s>]
//!                 | norm
//!                 | softmax-ce          (repeated, order = network order)
//! [data]    dataset = mnist | cifar10 | blobs | synth-images
//!           path = <dir or file>        (mnist/cifar10)
//!           train_subset / test_subset = <n>   (0 = all)
//!           seed, classes, dim, per_class, separation, noise
//! [train]   epochs, batch, lr_start, lr_end, schedule = geometric|constant,
//!           momentum, weight_decay, seed, eval_every, shift_augment
//! [ortho]   mode = none | svb | stiefel | soft | srip
//!           epsilon, period_epochs, period_steps (0 = use epochs),
//!           lambda, kappa, pi_iters
//! [norm]    variant = bn | dbn | bbn;  epsilon_tilde
//! [probe]   spectra, induced_anchors, radius_anchors, isometry_pairs,
//!           seed, csv
//! [output]  dir = <path>
//! ```
//!
//! Unknown sections or keys are rejected with their line number, as are
//! type and constraint violations. Later lines win; command-line overrides
//! are applied as extra lines after the file.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::{self, DataError, DatasetHandle, Split};
use crate::net::{FeatureShape, LayerKind};
use crate::norm::NormVariant;
use crate::opt::OrthoMode;
use crate::train::{ScheduleKind, TrainConfig};

#[derive(Debug, Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Blobs,
    SynthImages,
}

impl DatasetKind {
    fn name(&self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Blobs => "blobs",
            DatasetKind::SynthImages => "synth-images",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input: FeatureShape,
    pub layers: Vec<LayerKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub path: Option<PathBuf>,
    pub train_subset: usize,
    pub test_subset: usize,
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoModeKind {
    None,
    Svb,
    Stiefel,
    Soft,
    Srip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthoConfigRaw {
    pub mode: OrthoModeKind,
    pub epsilon: f64,
    pub period_epochs: usize,
    /// When nonzero, overrides the epoch-based period.
    pub period_steps: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub pi_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub spectra: bool,
    pub induced_anchors: usize,
    pub radius_anchors: usize,
    pub isometry_pairs: usize,
    pub seed: u64,
    pub csv: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ortho: OrthoConfigRaw,
    pub norm_variant: NormVariant,
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::SynthImages,
            path: None,
            train_subset: 0,
            test_subset: 0,
            seed: 12345,
            classes: 10,
            dim: 2,
            per_class: 100,
            separation: 5.0,
            noise: 0.25,
        }
    }
}

impl Default for OrthoConfigRaw {
    fn default() -> Self {
        Self {
            mode: OrthoModeKind::None,
            epsilon: 0.05,
            period_epochs: 1,
            period_steps: 0,
            lambda: 0.1,
            kappa: 0.1,
            pi_iters: 20,
        }
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            spectra: true,
            induced_anchors: 0,
            radius_anchors: 0,
            isometry_pairs: 0,
            seed: 777,
            csv: false,
        }
    }
}

impl RunConfig {
    /// Parses the config text, then applies `overrides` of the form
    /// `section.key=value` (last wins).
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut entries = tokenize(text)?;
        for (i, ov) in overrides.iter().enumerate() {
            let Some((path, value)) = ov.split_once('=') else {
                return err(0, format!("override '{ov}' is not section.key=value"));
            };
            let Some((section, key)) = path.trim().split_once('.') else {
                return err(0, format!("override key '{path}' is not section.key"));
            };
            entries.push(Entry {
                section: section.trim().to_string(),
                key: key.trim().to_string(),
                value: value.trim().to_string(),
                // Synthetic line numbers so messages can say "override #k".
                line: usize::MAX - overrides.len() + i,
            });
        }
        build(entries)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_overrides(text, &[])
    }

    /// Canonical serialized form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "input = {}", self.model.input);
        for layer in &self.model.layers {
            let _ = writeln!(s, "layer = {}", layer_to_text(layer));
        }
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "dataset = {}", self.data.dataset.name());
        if let Some(p) = &self.data.path {
            let _ = writeln!(s, "path = {}", p.display());
        }
        let _ = writeln!(s, "train_subset = {}", self.data.train_subset);
        let _ = writeln!(s, "test_subset = {}", self.data.test_subset);
        let _ = writeln!(s, "seed = {}", self.data.seed);
        let _ = writeln!(s, "classes = {}", self.data.classes);
        let _ = writeln!(s, "dim = {}", self.data.dim);
        let _ = writeln!(s, "per_class = {}", self.data.per_class);
        let _ = writeln!(s, "separation = {}", self.data.separation);
        let _ = writeln!(s, "noise = {}", self.data.noise);
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "batch = {}", self.train.batch_size);
        let _ = writeln!(s, "lr_start = {}", self.train.lr_start);
        let _ = writeln!(s, "lr_end = {}", self.train.lr_end);
        let _ = writeln!(
            s,
            "schedule = {}",
            match self.train.schedule {
                ScheduleKind::Geometric => "geometric",
                ScheduleKind::Constant => "constant",
            }
        );
        let _ = writeln!(s, "momentum = {}", self.train.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.train.weight_decay);
        let _ = writeln!(s, "seed = {}", self.train.seed);
        let _ = writeln!(s, "eval_every = {}", self.train.eval_every);
        let _ = writeln!(s, "shift_augment = {}", self.train.shift_augment);
        let _ = writeln!(s, "\n[ortho]");
        let _ = writeln!(
            s,
            "mode = {}",
            match self.ortho.mode {
                OrthoModeKind::None => "none",
                OrthoModeKind::Svb => "svb",
                OrthoModeKind::Stiefel => "stiefel",
                OrthoModeKind::Soft => "soft",
                OrthoModeKind::Srip => "srip",
            }
        );
        let _ = writeln!(s, "epsilon = {}", self.ortho.epsilon);
        let _ = writeln!(s, "period_epochs = {}", self.ortho.period_epochs);
        let _ = writeln!(s, "period_steps = {}", self.ortho.period_steps);
        let _ = writeln!(s, "lambda = {}", self.ortho.lambda);
        let _ = writeln!(s, "kappa = {}", self.ortho.kappa);
        let _ = writeln!(s, "pi_iters = {}", self.ortho.pi_iters);
        let _ = writeln!(s, "\n[norm]");
        let (variant, eps_tilde) = match self.norm_variant {
            NormVariant::Bn => ("bn", 0.2),
            NormVariant::Dbn => ("dbn", 0.2),
            NormVariant::Bbn { epsilon_tilde } => ("bbn", epsilon_tilde),
        };
        let _ = writeln!(s, "variant = {variant}");
        let _ = writeln!(s, "epsilon_tilde = {eps_tilde}");
        let _ = writeln!(s, "\n[probe]");
        let _ = writeln!(s, "spectra = {}", self.probe.spectra);
        let _ = writeln!(s, "induced_anchors = {}", self.probe.induced_anchors);
        let _ = writeln!(s, "radius_anchors = {}", self.probe.radius_anchors);
        let _ = writeln!(s, "isometry_pairs = {}", self.probe.isometry_pairs);
        let _ = writeln!(s, "seed = {}", self.probe.seed);
        let _ = writeln!(s, "csv = {}", self.probe.csv);
        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "dir = {}", self.output_dir.display());
        s
    }

    /// The optimizer mode with the SVB period resolved to steps using the
    /// training-set size (`period_steps` overrides the epoch-based period).
    pub fn ortho_mode(&self, steps_per_epoch: usize) -> OrthoMode {
        match self.ortho.mode {
            OrthoModeKind::None => OrthoMode::None,
            OrthoModeKind::Stiefel => OrthoMode::Stiefel,
            OrthoModeKind::Soft => OrthoMode::Soft {
                lambda: self.ortho.lambda,
            },
            OrthoModeKind::Srip => OrthoMode::Srip {
                kappa: self.ortho.kappa,
                pi_iters: self.ortho.pi_iters,
            },
            OrthoModeKind::Svb => OrthoMode::Svb {
                epsilon: self.ortho.epsilon,
                period: if self.ortho.period_steps > 0 {
                    self.ortho.period_steps
                } else {
                    (self.ortho.period_epochs * steps_per_epoch).max(1)
                },
            },
        }
    }

    /// Loads the configured dataset split.
    pub fn load_dataset(&self, split: Split) -> Result<DatasetHandle, DataError> {
        let subset = match split {
            Split::Train => self.data.train_subset,
            Split::Test => self.data.test_subset,
        };
        let mut handle = match self.data.dataset {
            DatasetKind::Mnist => {
                let path = self.data.path.clone().ok_or_else(|| {
                    DataError::Shape("mnist dataset needs data.path".into())
                })?;
                data::load_mnist_idx(&path, split)?
            }
            DatasetKind::Cifar10 => {
                let path = self.data.path.clone().ok_or_else(|| {
                    DataError::Shape("cifar10 dataset needs data.path".into())
                })?;
                data::load_cifar10_bin(&path, split)?
            }
            DatasetKind::Blobs => data::synth_blobs(
                self.data.classes,
                self.data.dim,
                self.data.per_class,
                self.data.separation,
                self.data.seed,
                split,
            )?,
            DatasetKind::SynthImages => data::synth_images(
                self.data.classes,
                self.data.per_class,
                self.data.noise,
                self.data.seed,
                split,
            )?
        };
        handle = handle.take(subset);
        Ok(handle)
    }
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn tokenize(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return err(line, format!("malformed section header '{trimmed}'"));
            };
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return err(line, format!("expected 'key = value', got '{trimmed}'"));
        };
        if section.is_empty() {
            return err(line, "setting appears before any [section] header");
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(entries)
}

fn parse_num<T: std::str::FromStr>(e: &Entry, what: &str) -> Result<T, ConfigError> {
    e.value
        .parse::<T>()
        .map_err(|_| ConfigError {
            line: e.line,
            message: format!("{}.{}: '{}' is not a valid {what}", e.section, e.key, e.value),
        })
}

fn parse_bool(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => err(e.line, format!("{}.{}: '{other}' is not a boolean", e.section, e.key)),
    }
}

fn parse_shape(e: &Entry) -> Result<FeatureShape, ConfigError> {
    let parts: Vec<&str> = e.value.split('x').collect();
    match parts.len() {
        1 => Ok(FeatureShape::Flat(parse_num::<usize>(e, "dimension")?)),
        3 => {
            let dims: Result<Vec<usize>, _> = parts.iter().map(|p| p.trim().parse()).collect();
            match dims {
                Ok(d) if d.iter().all(|&v| v > 0) => Ok(FeatureShape::Image {
                    channels: d[0],
                    height: d[1],
                    width: d[2],
                }),
                _ => err(e.line, format!("bad input shape '{}'", e.value)),
            }
        }
        _ => err(
            e.line,
            format!("input shape must be N or CxHxW, got '{}'", e.value),
        ),
    }
}

fn layer_to_text(kind: &LayerKind) -> String {
    match *kind {
        LayerKind::Dense { units } => format!("dense {units}"),
        LayerKind::ConvAsMatrix {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
        } => format!("conv {out_channels} {in_channels} {kernel_h}x{kernel_w} stride {stride} pad {pad}"),
        LayerKind::Relu => "relu".into(),
        LayerKind::MaxPool { window, stride } => format!("maxpool {window} stride {stride}"),
        LayerKind::Norm => "norm".into(),
        LayerKind::SoftmaxCe => "softmax-ce".into(),
    }
}

fn parse_layer(e: &Entry) -> Result<LayerKind, ConfigError> {
    let tokens: Vec<&str> = e.value.split_whitespace().collect();
    let bad = |msg: String| ConfigError {
        line: e.line,
        message: msg,
    };
    let int = |t: &str, what: &str| -> Result<usize, ConfigError> {
        t.parse()
            .map_err(|_| bad(format!("layer '{}': '{t}' is not a valid {what}", e.value)))
    };
    match tokens.as_slice() {
        ["dense", units] => Ok(LayerKind::Dense {
            units: int(units, "unit count")?,
        }),
        ["relu"] => Ok(LayerKind::Relu),
        ["norm"] => Ok(LayerKind::Norm),
        ["softmax-ce"] => Ok(LayerKind::SoftmaxCe),
        ["maxpool", window, rest @ ..] => {
            let window = int(window, "window")?;
            let mut stride = window;
            match rest {
                [] => {}
                ["stride", s] => stride = int(s, "stride")?,
                _ => return Err(bad(format!("layer '{}': bad maxpool options", e.value))),
            }
            Ok(LayerKind::MaxPool { window, stride })
        }
        ["conv", out_c, in_c, kernel, rest @ ..] => {
            let Some((kh, kw)) = kernel.split_once('x') else {
                return Err(bad(format!(
                    "layer '{}': kernel must be HxW, got '{kernel}'",
                    e.value
                )));
            };
            let mut stride = 1;
            let mut pad = 0;
            let mut it = rest.iter();
            while let Some(&opt) = it.next() {
                let Some(&val) = it.next() else {
                    return Err(bad(format!("layer '{}': '{opt}' needs a value", e.value)));
                };
                match opt {
                    "stride" => stride = int(val, "stride")?,
                    "pad" => pad = int(val, "pad")?,
                    other => {
                        return Err(bad(format!("layer '{}': unknown option '{other}'", e.value)))
                    }
                }
            }
            Ok(LayerKind::ConvAsMatrix {
                out_channels: int(out_c, "channel count")?,
                in_channels: int(in_c, "channel count")?,
                kernel_h: int(kh, "kernel size")?,
                kernel_w: int(kw, "kernel size")?,
                stride,
                pad,
            })
        }
        _ => Err(bad(format!("unknown layer '{}'", e.value))),
    }
}

fn build(entries: Vec<Entry>) -> Result<RunConfig, ConfigError> {
    let mut input: Option<FeatureShape> = None;
    let mut layers: Vec<LayerKind> = Vec::new();
    let mut data = DataConfig::default();
    let mut train = TrainConfig::default();
    let mut ortho = OrthoConfigRaw::default();
    let mut norm_name = "bn".to_string();
    let mut epsilon_tilde = 0.2;
    let mut probe = ProbeConfig::default();
    let mut output_dir = PathBuf::from("runs/out");

    // Lines where constraint-relevant keys were last set, for diagnostics.
    let mut lr_line = 0usize;
    let mut eps_line = 0usize;
    let mut norm_line = 0usize;

    for e in &entries {
        match (e.section.as_str(), e.key.as_str()) {
            ("model", "input") => input = Some(parse_shape(e)?),
            ("model", "layer") => layers.push(parse_layer(e)?),
            ("data", "dataset") => {
                data.dataset = match e.value.as_str() {
                    "mnist" => DatasetKind::Mnist,
                    "cifar10" => DatasetKind::Cifar10,
                    "blobs" => DatasetKind::Blobs,
                    "synth-images" => DatasetKind::SynthImages,
                    other => return err(e.line, format!("unknown dataset '{other}'")),
                }
            }
            ("data", "path") => data.path = Some(PathBuf::from(&e.value)),
            ("data", "train_subset") => data.train_subset = parse_num(e, "count")?,
            ("data", "test_subset") => data.test_subset = parse_num(e, "count")?,
            ("data", "seed") => data.seed = parse_num(e, "seed")?,
            ("data", "classes") => data.classes = parse_num(e, "count")?,
            ("data", "dim") => data.dim = parse_num(e, "dimension")?,
            ("data", "per_class") => data.per_class = parse_num(e, "count")?,
            ("data", "separation") => data.separation = parse_num(e, "number")?,
            ("data", "noise") => data.noise = parse_num(e, "number")?,
            ("train", "epochs") => train.epochs = parse_num(e, "count")?,
            ("train", "batch") => train.batch_size = parse_num(e, "count")?,
            ("train", "lr_start") => {
                train.lr_start = parse_num(e, "number")?;
                lr_line = e.line;
            }
            ("train", "lr_end") => {
                train.lr_end = parse_num(e, "number")?;
                lr_line = e.line;
            }
            ("train", "schedule") => {
                train.schedule = match e.value.as_str() {
                    "geometric" => ScheduleKind::Geometric,
                    "constant" => ScheduleKind::Constant,
                    other => return err(e.line, format!("unknown schedule '{other}'")),
                }
            }
            ("train", "momentum") => train.momentum = parse_num(e, "number")?,
            ("train", "weight_decay") => train.weight_decay = parse_num(e, "number")?,
            ("train", "seed") => train.seed = parse_num(e, "seed")?,
            ("train", "eval_every") => train.eval_every = parse_num(e, "count")?,
            ("train", "shift_augment") => train.shift_augment = parse_bool(e)?,
            ("ortho", "mode") => {
                ortho.mode = match e.value.as_str() {
                    "none" => OrthoModeKind::None,
                    "svb" => OrthoModeKind::Svb,
                    "stiefel" => OrthoModeKind::Stiefel,
                    "soft" => OrthoModeKind::Soft,
                    "srip" => OrthoModeKind::Srip,
                    other => return err(e.line, format!("unknown ortho mode '{other}'")),
                }
            }
            ("ortho", "epsilon") => {
                ortho.epsilon = parse_num(e, "number")?;
                eps_line = e.line;
            }
            ("ortho", "period_epochs") => ortho.period_epochs = parse_num(e, "count")?,
            ("ortho", "period_steps") => ortho.period_steps = parse_num(e, "count")?,
            ("ortho", "lambda") => {
                ortho.lambda = parse_num(e, "number")?;
                eps_line = e.line;
            }
            ("ortho", "kappa") => {
                ortho.kappa = parse_num(e, "number")?;
                eps_line = e.line;
            }
            ("ortho", "pi_iters") => ortho.pi_iters = parse_num(e, "count")?,
            ("norm", "variant") => {
                norm_name = match e.value.as_str() {
                    v @ ("bn" | "dbn" | "bbn") => v.to_string(),
                    other => return err(e.line, format!("unknown norm variant '{other}'")),
                }
            }
            ("norm", "epsilon_tilde") => {
                epsilon_tilde = parse_num(e, "number")?;
                norm_line = e.line;
            }
            ("probe", "spectra") => probe.spectra = parse_bool(e)?,
            ("probe", "induced_anchors") => probe.induced_anchors = parse_num(e, "count")?,
            ("probe", "radius_anchors") => probe.radius_anchors = parse_num(e, "count")?,
            ("probe", "isometry_pairs") => probe.isometry_pairs = parse_num(e, "count")?,
            ("probe", "seed") => probe.seed = parse_num(e, "seed")?,
            ("probe", "csv") => probe.csv = parse_bool(e)?,
            ("output", "dir") => output_dir = PathBuf::from(&e.value),
            (section, key) => {
                return err(e.line, format!("unknown key '{key}' in section [{section}]"))
            }
        }
    }

    let Some(input) = input else {
        return err(0, "[model] input is required");
    };
    if layers.is_empty() {
        return err(0, "[model] needs at least one layer");
    }

    // Constraint validation, pointing at the lines that set the values.
    if !(train.lr_start >= train.lr_end && train.lr_end > 0.0) {
        return err(
            lr_line,
            format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                train.lr_start, train.lr_end
            ),
        );
    }
    if ortho.epsilon < 0.0 {
        return err(eps_line, format!("ortho.epsilon must be >= 0, got {}", ortho.epsilon));
    }
    if ortho.lambda < 0.0 || ortho.kappa < 0.0 {
        return err(eps_line, "ortho.lambda and ortho.kappa must be >= 0");
    }
    if ortho.period_epochs == 0 && ortho.period_steps == 0 {
        return err(0, "ortho period must be at least 1 (epochs or steps)");
    }
    if epsilon_tilde < 0.0 {
        return err(
            norm_line,
            format!("norm.epsilon_tilde must be >= 0, got {epsilon_tilde}"),
        );
    }

    let norm_variant = match norm_name.as_str() {
        "bn" => NormVariant::Bn,
        "dbn" => NormVariant::Dbn,
        _ => NormVariant::Bbn { epsilon_tilde },
    };
    train.ortho = OrthoMode::None; // resolved per run via ortho_mode()

    Ok(RunConfig {
        model: ModelConfig { input, layers },
        data,
        train,
        ortho,
        norm_variant,
        probe,
        output_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[model]
input = 4
layer = dense 8
layer = relu
layer = dense 2
layer = softmax-ce

[data]
dataset = blobs
dim = 4
classes = 2
";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.train.weight_decay, 1e-4);
        assert_eq!(cfg.ortho.epsilon, 0.05);
        assert!(matches!(cfg.norm_variant, NormVariant::Bn));
        assert_eq!(cfg.model.layers.len(), 4);
        // BBN's band parameter defaults to 0.2 when selected.
        let cfg2 = RunConfig::parse_with_overrides(MINIMAL, &["norm.variant=bbn".into()]).unwrap();
        assert!(matches!(
            cfg2.norm_variant,
            NormVariant::Bbn { epsilon_tilde } if epsilon_tilde == 0.2
        ));
    }

    #[test]
    fn svb_mode_parses_with_epsilon() {
        let text = format!("{MINIMAL}\n[ortho]\nmode = svb\nepsilon = 0.5\n");
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.ortho.mode, OrthoModeKind::Svb);
        assert_eq!(cfg.ortho.epsilon, 0.5);
        match cfg.ortho_mode(10) {
            OrthoMode::Svb { epsilon, period } => {
                assert_eq!(epsilon, 0.5);
                assert_eq!(period, 10);
            }
            other => panic!("expected svb, got {other:?}"),
        }
    }

    #[test]
    fn negative_epsilon_rejected_with_line() {
        let text = format!("{MINIMAL}\n[ortho]\nmode = svb\nepsilon = -0.1\n");
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.message.contains("epsilon"));
        assert!(e.line > 0);
        assert!(text.lines().nth(e.line - 1).unwrap().contains("-0.1"));
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = format!("{MINIMAL}\nbogus_key = 7\n");
        let e = RunConfig::parse(&text).unwrap_err();
        assert!(e.message.contains("bogus_key"), "{e}");
        assert_eq!(
            text.lines().nth(e.line - 1).unwrap().trim(),
            "bogus_key = 7"
        );
    }

    #[test]
    fn layer_grammar() {
        let text = "\
[model]
input = 3x8x8
layer = conv 16 3 3x3 stride 1 pad 1
layer = norm
layer = relu
layer = maxpool 2
layer = dense 10
layer = softmax-ce
[data]
dataset = synth-images
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(
            cfg.model.layers[0],
            LayerKind::ConvAsMatrix {
                out_channels: 16,
                in_channels: 3,
                kernel_h: 3,
                kernel_w: 3,
                stride: 1,
                pad: 1
            }
        );
        assert_eq!(
            cfg.model.layers[3],
            LayerKind::MaxPool {
                window: 2,
                stride: 2
            }
        );
    }

    #[test]
    fn round_trip_is_idempotent() {
        let text = format!("{MINIMAL}\n[ortho]\nmode = srip\nkappa = 0.3\n[output]\ndir = /tmp/x\n");
        let cfg = RunConfig::parse(&text).unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn overrides_win_last() {
        let cfg = RunConfig::parse_with_overrides(
            MINIMAL,
            &["train.epochs=7".into(), "train.epochs=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 9);
    }

    #[test]
    fn blobs_dataset_loads_from_config() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let train = cfg.load_dataset(Split::Train).unwrap();
        let test = cfg.load_dataset(Split::Test).unwrap();
        assert_eq!(train.num_classes, 2);
        assert_eq!(train.inputs.cols(), 4);
        // Different split seeds give different data.
        assert_ne!(train.inputs.data()[0], test.inputs.data()[0]);
    }
}
