//! Flat `key = value` run configuration.
//!
//! Every tunable of a run lives here under a dotted key. Lines starting with
//! `#` and blank lines are ignored; unknown or repeated keys are errors.
//! [`RunConfig::to_text`] writes every key in a fixed order with canonical
//! value spellings, so parsing the output and writing it again reproduces it
//! byte for byte.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 1 |
//! | `threads` | 1 |
//! | `out` | `run` |
//! | `data.count`, `data.held_out` | 200, 40 |
//! | `data.height`, `data.width` | 24, 48 |
//! | `data.dot_density` | 0.5 |
//! | `data.max_disparity` | 12 |
//! | `net.base_filters` | 4 |
//! | `net.feature_layers`, `net.matching_layers` | 6, 12 |
//! | `net.opset` | `reduced` or `large` |
//! | `net.cell` | `residual` or `direct` |
//! | `net.extra_skips` | `2-5 5-9` |
//! | `search.mode` | `joint` or `separate` |
//! | `search.epochs`, `search.warmup_epochs` | 10, 3 |
//! | `search.lr_start`, `search.lr_end` | 0.025, 0.001 |
//! | `search.momentum`, `search.weight_decay` | 0.9, 0.0003 |
//! | `search.arch_optimizer` | `adam` or `sgd` |
//! | `search.arch_lr`, `search.arch_momentum` | 0.003, 0.9 |
//! | `search.crop` | `24x48` |
//! | `search.batch_size` | 1 |
//! | `train.*` | as `search.*` without the architecture keys, 20 epochs |

use std::fmt::{self, Display, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::cell::OpsetVariant;
use crate::data::dataset::GenerateOptions;
use crate::discrete::DiscreteConfig;
use crate::error::{Error, Result};
use crate::genotype::DEFAULT_EXTRA_SKIPS;
use crate::search::{SearchMode, SearchSchedule, TrainSchedule};
use crate::stereo::SuperNetConfig;

/// Residual cells add the aligned previous-layer input to the cell output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellVariant {
    Residual,
    Direct,
}

impl CellVariant {
    pub fn is_residual(self) -> bool {
        self == Self::Residual
    }
}

impl FromStr for CellVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "residual" => Ok(Self::Residual),
            "direct" => Ok(Self::Direct),
            _ => Err(format!("cell must be `residual` or `direct`, got `{s}`")),
        }
    }
}

impl Display for CellVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Residual => "residual",
            Self::Direct => "direct",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub held_out: usize,
    pub height: usize,
    pub width: usize,
    pub dot_density: f64,
    pub max_disparity: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub base_filters: usize,
    pub feature_layers: usize,
    pub matching_layers: usize,
    pub opset: OpsetVariant,
    pub cell: CellVariant,
    pub extra_skips: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Parallelism degree; kernels are single-threaded, so only 1 is accepted.
    pub threads: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub net: NetConfig,
    pub search_mode: SearchMode,
    pub search: SearchSchedule,
    pub train: TrainSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: 1,
            out: PathBuf::from("run"),
            data: DataConfig {
                count: 200,
                held_out: 40,
                height: 24,
                width: 48,
                dot_density: 0.5,
                max_disparity: 12,
            },
            net: NetConfig {
                base_filters: 4,
                feature_layers: 6,
                matching_layers: 12,
                opset: OpsetVariant::Reduced,
                cell: CellVariant::Residual,
                extra_skips: DEFAULT_EXTRA_SKIPS.to_vec(),
            },
            search_mode: SearchMode::Joint,
            search: SearchSchedule::default(),
            train: TrainSchedule::default(),
        }
    }
}

fn parse_as<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_crop(key: &str, value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`{key}`: expected HxW, got `{value}`")))?;
    Ok((parse_as(key, h)?, parse_as(key, w)?))
}

fn parse_skips(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split_whitespace()
        .map(|item| {
            let (a, b) = item
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("`{key}`: expected FROM-TO, got `{item}`")))?;
            Ok((parse_as(key, a)?, parse_as(key, b)?))
        })
        .collect()
}

impl RunConfig {
    /// Parses a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` given twice", n + 1)));
            }
            config
                .set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Sets one key; used for file lines and command-line overrides alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse_as(key, v)?,
            "threads" => self.threads = parse_as(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data.count" => self.data.count = parse_as(key, v)?,
            "data.held_out" => self.data.held_out = parse_as(key, v)?,
            "data.height" => self.data.height = parse_as(key, v)?,
            "data.width" => self.data.width = parse_as(key, v)?,
            "data.dot_density" => self.data.dot_density = parse_as(key, v)?,
            "data.max_disparity" => self.data.max_disparity = parse_as(key, v)?,
            "net.base_filters" => self.net.base_filters = parse_as(key, v)?,
            "net.feature_layers" => self.net.feature_layers = parse_as(key, v)?,
            "net.matching_layers" => self.net.matching_layers = parse_as(key, v)?,
            "net.opset" => self.net.opset = parse_as(key, v)?,
            "net.cell" => self.net.cell = parse_as(key, v)?,
            "net.extra_skips" => self.net.extra_skips = parse_skips(key, v)?,
            "search.mode" => self.search_mode = parse_as(key, v)?,
            "search.epochs" => self.search.total_epochs = parse_as(key, v)?,
            "search.warmup_epochs" => self.search.warmup_epochs = parse_as(key, v)?,
            "search.lr_start" => self.search.lr_start = parse_as(key, v)?,
            "search.lr_end" => self.search.lr_end = parse_as(key, v)?,
            "search.momentum" => self.search.momentum = parse_as(key, v)?,
            "search.weight_decay" => self.search.weight_decay = parse_as(key, v)?,
            "search.arch_optimizer" => self.search.arch_optimizer = parse_as(key, v)?,
            "search.arch_lr" => self.search.arch_lr = parse_as(key, v)?,
            "search.arch_momentum" => self.search.arch_momentum = parse_as(key, v)?,
            "search.crop" => self.search.crop = parse_crop(key, v)?,
            "search.batch_size" => self.search.batch_size = parse_as(key, v)?,
            "train.epochs" => self.train.epochs = parse_as(key, v)?,
            "train.lr_start" => self.train.lr_start = parse_as(key, v)?,
            "train.lr_end" => self.train.lr_end = parse_as(key, v)?,
            "train.momentum" => self.train.momentum = parse_as(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse_as(key, v)?,
            "train.crop" => self.train.crop = parse_crop(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_as(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.threads != 1 {
            return bad(format!("threads = {}: kernels run on one thread", self.threads));
        }
        let d = &self.data;
        if !(d.dot_density > 0.0 && d.dot_density < 1.0) {
            return bad(format!("data.dot_density must lie in (0, 1), got {}", d.dot_density));
        }
        if d.held_out >= d.count {
            return bad(format!(
                "data.held_out ({}) must be smaller than data.count ({})",
                d.held_out, d.count
            ));
        }
        if d.count - d.held_out < 2 {
            return bad("at least two training pairs are needed to split trainI/trainII".into());
        }
        if d.max_disparity == 0 || d.max_disparity >= d.width {
            return bad(format!(
                "data.max_disparity must lie in 1..{}, got {}",
                d.width, d.max_disparity
            ));
        }
        for (name, (h, w)) in [("data", (d.height, d.width)), ("search.crop", self.search.crop), ("train.crop", self.train.crop)] {
            if h == 0 || w == 0 || h % 24 != 0 || w % 24 != 0 {
                return bad(format!("{name} extent {h}x{w} must be positive multiples of 24"));
            }
            if h > d.height || w > d.width {
                return bad(format!("{name} extent {h}x{w} exceeds the {}x{} images", d.height, d.width));
            }
        }
        let n = &self.net;
        if n.base_filters == 0 || n.feature_layers < 2 || n.matching_layers < 2 {
            return bad("net.base_filters must be positive and both trellises need two layers".into());
        }
        for &(a, b) in &n.extra_skips {
            if a >= b || b >= n.matching_layers {
                return bad(format!(
                    "net.extra_skips entry {a}-{b} must point forward within {} layers",
                    n.matching_layers
                ));
            }
        }
        self.search.validate()?;
        self.train.validate()
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let crop = |c: (usize, usize)| format!("{}x{}", c.0, c.1);
        let skips = self
            .net
            .extra_skips
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect::<Vec<_>>()
            .join(" ");
        kv("seed", &self.seed);
        kv("threads", &self.threads);
        kv("out", &self.out.display());
        kv("data.count", &self.data.count);
        kv("data.held_out", &self.data.held_out);
        kv("data.height", &self.data.height);
        kv("data.width", &self.data.width);
        kv("data.dot_density", &self.data.dot_density);
        kv("data.max_disparity", &self.data.max_disparity);
        kv("net.base_filters", &self.net.base_filters);
        kv("net.feature_layers", &self.net.feature_layers);
        kv("net.matching_layers", &self.net.matching_layers);
        kv("net.opset", &self.net.opset);
        kv("net.cell", &self.net.cell);
        kv("net.extra_skips", &skips);
        kv("search.mode", &self.search_mode);
        kv("search.epochs", &self.search.total_epochs);
        kv("search.warmup_epochs", &self.search.warmup_epochs);
        kv("search.lr_start", &self.search.lr_start);
        kv("search.lr_end", &self.search.lr_end);
        kv("search.momentum", &self.search.momentum);
        kv("search.weight_decay", &self.search.weight_decay);
        kv("search.arch_optimizer", &self.search.arch_optimizer);
        kv("search.arch_lr", &self.search.arch_lr);
        kv("search.arch_momentum", &self.search.arch_momentum);
        kv("search.crop", &crop(self.search.crop));
        kv("search.batch_size", &self.search.batch_size);
        kv("train.epochs", &self.train.epochs);
        kv("train.lr_start", &self.train.lr_start);
        kv("train.lr_end", &self.train.lr_end);
        kv("train.momentum", &self.train.momentum);
        kv("train.weight_decay", &self.train.weight_decay);
        kv("train.crop", &crop(self.train.crop));
        kv("train.batch_size", &self.train.batch_size);
        s
    }

    pub fn generate_options(&self) -> GenerateOptions {
        GenerateOptions {
            count: self.data.count,
            held_out: self.data.held_out,
            height: self.data.height,
            width: self.data.width,
            dot_density: self.data.dot_density,
            max_disparity: self.data.max_disparity,
            seed: self.seed,
        }
    }

    pub fn supernet(&self) -> SuperNetConfig {
        SuperNetConfig {
            base_filters: self.net.base_filters,
            feature_layers: self.net.feature_layers,
            matching_layers: self.net.matching_layers,
            opset: self.net.opset,
            residual: self.net.cell.is_residual(),
        }
    }

    pub fn discrete(&self) -> DiscreteConfig {
        DiscreteConfig {
            base_filters: self.net.base_filters,
            residual: self.net.cell.is_residual(),
        }
    }
}

/// Drops the `config error: ` prefix when re-wrapping a message.
fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
