use std::fmt::Write as _;
use std::str::FromStr;

use crate::autograd::AdamConfig;
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::generator::GeneratorConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;

/// Every training hyperparameter, serializable as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub resolution: usize,
    pub code_dim: usize,
    pub margin: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub init_std: f64,
    pub extractor_widths: Vec<usize>,
    pub generator_depth: usize,
    pub generator_base_width: usize,
    pub generator_max_width: usize,
    pub generator_batchnorm: bool,
    /// Epochs between checkpoint writes.
    pub checkpoint_every: usize,
    /// Stop gradients through the target codes of the triplet terms.
    pub detach_code_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let loss = LossConfig::default();
        let gen = GeneratorConfig::default();
        Self {
            resolution: 64,
            code_dim: 16,
            margin: loss.margin,
            lambda: loss.lambda,
            epochs: 30,
            batch_size: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            init_std: 0.02,
            extractor_widths: ExtractorConfig::default().widths,
            generator_depth: gen.depth,
            generator_base_width: gen.base_width,
            generator_max_width: gen.max_width,
            generator_batchnorm: gen.batchnorm,
            checkpoint_every: 1,
            detach_code_targets: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "resolution",
        "code_dim",
        "margin",
        "lambda",
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "seed",
        "init_std",
        "extractor_widths",
        "generator_depth",
        "generator_base_width",
        "generator_max_width",
        "generator_batchnorm",
        "checkpoint_every",
        "detach_code_targets",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "resolution" => self.resolution = parse(key, value)?,
            "code_dim" => self.code_dim = parse(key, value)?,
            "margin" => self.margin = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "extractor_widths" => {
                self.extractor_widths =
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<Vec<usize>>>()?
            }
            "generator_depth" => self.generator_depth = parse(key, value)?,
            "generator_base_width" => self.generator_base_width = parse(key, value)?,
            "generator_max_width" => self.generator_max_width = parse(key, value)?,
            "generator_batchnorm" => self.generator_batchnorm = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "detach_code_targets" => self.detach_code_targets = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{raw}`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; `from_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.extractor_widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        line("resolution", self.resolution.to_string());
        line("code_dim", self.code_dim.to_string());
        line("margin", self.margin.to_string());
        line("lambda", self.lambda.to_string());
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("lr", self.lr.to_string());
        line("beta1", self.beta1.to_string());
        line("beta2", self.beta2.to_string());
        line("adam_eps", self.adam_eps.to_string());
        line("seed", self.seed.to_string());
        line("init_std", self.init_std.to_string());
        line("extractor_widths", widths.join(","));
        line("generator_depth", self.generator_depth.to_string());
        line("generator_base_width", self.generator_base_width.to_string());
        line("generator_max_width", self.generator_max_width.to_string());
        line("generator_batchnorm", self.generator_batchnorm.to_string());
        line("checkpoint_every", self.checkpoint_every.to_string());
        line("detach_code_targets", self.detach_code_targets.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("resolution", self.resolution),
            ("code_dim", self.code_dim),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("generator_depth", self.generator_depth),
            ("generator_base_width", self.generator_base_width),
            ("generator_max_width", self.generator_max_width),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.resolution % 32 != 0 {
            return Err(Error::Config(format!("resolution {} is not a multiple of 32", self.resolution)));
        }
        if self.extractor_widths.is_empty() || self.extractor_widths.contains(&0) {
            return Err(Error::Config("extractor_widths must be non-empty and positive".into()));
        }
        if self.resolution % (1 << self.generator_depth) != 0 || self.resolution < (1 << self.extractor_widths.len()) {
            return Err(Error::Config(format!(
                "resolution {} does not fit generator depth {} and {} extractor stages",
                self.resolution,
                self.generator_depth,
                self.extractor_widths.len()
            )));
        }
        for (name, v) in [("lr", self.lr), ("adam_eps", self.adam_eps), ("init_std", self.init_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { margin: self.margin, lambda: self.lambda }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig { code_dim: self.code_dim, widths: self.extractor_widths.clone() },
            generator: GeneratorConfig {
                code_dim: self.code_dim,
                depth: self.generator_depth,
                base_width: self.generator_base_width,
                max_width: self.generator_max_width,
                batchnorm: self.generator_batchnorm,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 1.5e-3;
        cfg.extractor_widths = vec![8, 16, 16, 32, 32];
        cfg.detach_code_targets = true;
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let cfg = TrainConfig::from_text("# toy\nepochs = 3 # short\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(TrainConfig::from_text("nope = 1").is_err());
        assert!(TrainConfig::from_text("epochs").is_err());
    }

    #[test]
    fn resolution_must_be_multiple_of_32() {
        assert!(TrainConfig::from_text("resolution = 48").is_err());
        assert!(TrainConfig::from_text("resolution = 96").is_ok());
    }
}
