//! `key = value` run configuration. Lines starting with `#` and blank lines
//! are ignored; unknown keys are rejected. `profile = desk|paper` sets the
//! size-related defaults, which explicit keys override regardless of order.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// base 8, 64×64, 60 epochs.
    Desk,
    /// base 32, 256×256, 500 epochs.
    Paper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub image_size: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: u32,
    pub lr_factor: f64,
    pub min_lr: f64,
    pub dice_eps: f64,
    /// Master seed for shuffling and dropout.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Train both attention settings and write an ablation report.
    pub eval_both_configs: bool,
    /// Continue from a checkpoint that carries optimizer state.
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

pub const KEYS: &[&str] = &[
    "profile",
    "in_channels",
    "num_classes",
    "base_channels",
    "depth",
    "dropout_rate",
    "use_attention",
    "attention_reduction",
    "spatial_attention_kernel",
    "elu_alpha",
    "init_seed",
    "image_size",
    "lr",
    "batch_size",
    "epochs",
    "patience",
    "lr_factor",
    "min_lr",
    "dice_eps",
    "seed",
    "data_dir",
    "out_dir",
    "eval_both_configs",
    "resume",
];

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (base, size, epochs) = match profile {
            Profile::Desk => (8, 64, 60),
            Profile::Paper => (32, 256, 500),
        };
        Self {
            profile,
            model: ModelConfig { base_channels: base, ..Default::default() },
            image_size: size,
            lr: 1e-3,
            batch_size: 4,
            epochs,
            patience: 10,
            lr_factor: 0.1,
            min_lr: 1e-7,
            dice_eps: 1e-5,
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            eval_both_configs: false,
            resume: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::RunConfig { line: line_no, detail: format!("expected key=value, got {line:?}") })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::RunConfig { line: line_no, detail: format!("unknown key {key:?}") });
            }
            if let Some((prev, _, _)) = pairs.iter().find(|(_, k, _)| *k == key) {
                return Err(Error::RunConfig { line: line_no, detail: format!("duplicate key {key:?} (first on line {prev})") });
            }
            pairs.push((line_no, key, value));
        }
        let profile = match pairs.iter().find(|(_, k, _)| *k == "profile") {
            None => Profile::Desk,
            Some((_, _, "desk")) => Profile::Desk,
            Some((_, _, "paper")) => Profile::Paper,
            Some((line, _, v)) => {
                return Err(Error::RunConfig { line: *line, detail: format!("profile must be desk or paper, got {v:?}") })
            }
        };
        let mut cfg = Self::for_profile(profile);
        let mut init_seed_set = false;
        for &(line, key, value) in &pairs {
            let err = |detail: String| Error::RunConfig { line, detail: format!("{key}: {detail}") };
            let int = || value.parse::<usize>().map_err(|e| err(format!("{e} ({value:?})")));
            let uint = || value.parse::<u64>().map_err(|e| err(format!("{e} ({value:?})")));
            let real = || {
                value
                    .parse::<f64>()
                    .map_err(|e| err(format!("{e} ({value:?})")))
                    .and_then(|v| if v.is_finite() { Ok(v) } else { Err(err("must be finite".into())) })
            };
            let boolean = || match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(err(format!("expected true/false, got {value:?}"))),
            };
            match key {
                "profile" => {}
                "in_channels" => cfg.model.in_channels = int()?,
                "num_classes" => cfg.model.num_classes = int()?,
                "base_channels" => cfg.model.base_channels = int()?,
                "depth" => cfg.model.depth = int()?,
                "dropout_rate" => cfg.model.dropout_rate = real()?,
                "use_attention" => cfg.model.use_attention = boolean()?,
                "attention_reduction" => cfg.model.attention_reduction = int()?,
                "spatial_attention_kernel" => cfg.model.spatial_attention_kernel = int()?,
                "elu_alpha" => cfg.model.elu_alpha = real()?,
                "init_seed" => {
                    cfg.model.init_seed = uint()?;
                    init_seed_set = true;
                }
                "image_size" => cfg.image_size = int()?,
                "lr" => cfg.lr = real()?,
                "batch_size" => cfg.batch_size = int()?,
                "epochs" => cfg.epochs = int()?,
                "patience" => cfg.patience = u32::try_from(uint()?).map_err(|_| err("too large".into()))?,
                "lr_factor" => cfg.lr_factor = real()?,
                "min_lr" => cfg.min_lr = real()?,
                "dice_eps" => cfg.dice_eps = real()?,
                "seed" => cfg.seed = uint()?,
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "eval_both_configs" => cfg.eval_both_configs = boolean()?,
                "resume" => cfg.resume = (!value.is_empty()).then(|| PathBuf::from(value)),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if !init_seed_set {
            cfg.model.init_seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |detail: String| Err(Error::Config(detail));
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.model.divisor()) {
            return bad(format!("image_size {} must be a positive multiple of {}", self.image_size, self.model.divisor()));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr_factor must lie in (0, 1], got {}", self.lr_factor));
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.min_lr >= 0.0) {
            return bad(format!("min_lr must be non-negative, got {}", self.min_lr));
        }
        if !(self.dice_eps > 0.0) {
            return bad(format!("dice_eps must be positive, got {}", self.dice_eps));
        }
        Ok(())
    }

    /// Serialised form accepted by [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("profile", match self.profile { Profile::Desk => "desk", Profile::Paper => "paper" }.into());
        kv("in_channels", m.in_channels.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("dropout_rate", m.dropout_rate.to_string());
        kv("use_attention", m.use_attention.to_string());
        kv("attention_reduction", m.attention_reduction.to_string());
        kv("spatial_attention_kernel", m.spatial_attention_kernel.to_string());
        kv("elu_alpha", m.elu_alpha.to_string());
        kv("init_seed", m.init_seed.to_string());
        kv("image_size", self.image_size.to_string());
        kv("lr", self.lr.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("patience", self.patience.to_string());
        kv("lr_factor", self.lr_factor.to_string());
        kv("min_lr", self.min_lr.to_string());
        kv("dice_eps", self.dice_eps.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("eval_both_configs", self.eval_both_configs.to_string());
        if let Some(r) = &self.resume {
            kv("resume", r.display().to_string());
        }
        s
    }
}
