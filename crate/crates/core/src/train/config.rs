//! Training configuration and its flat `key = value` text format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::cohort::SyntheticConfig;
use crate::encoders::EncoderMode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Outputs};
use crate::objectives::{DenominatorMode, LossWeights};

/// Which losses drive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Ce,
    Intermodal,
    CeIntermodal,
    Global,
    CeGlobal,
    CeGlobalAugmented,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Ce,
        Regime::Intermodal,
        Regime::CeIntermodal,
        Regime::Global,
        Regime::CeGlobal,
        Regime::CeGlobalAugmented,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::Intermodal => "intermodal",
            Self::CeIntermodal => "ce+intermodal",
            Self::Global => "global",
            Self::CeGlobal => "ce+global",
            Self::CeGlobalAugmented => "ce+global-augmented",
        }
    }

    pub fn uses_ce(self) -> bool {
        matches!(self, Self::Ce | Self::CeIntermodal | Self::CeGlobal | Self::CeGlobalAugmented)
    }

    pub fn uses_intermodal(self) -> bool {
        matches!(self, Self::Intermodal | Self::CeIntermodal)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, Self::Global | Self::CeGlobal | Self::CeGlobalAugmented)
    }

    pub fn augmented(self) -> bool {
        self == Self::CeGlobalAugmented
    }

    /// Contrastive-only regimes train the classification heads on detached
    /// features so the encoders see only the contrastive gradient.
    pub fn probe_heads(self) -> bool {
        !self.uses_ce()
    }

    pub fn outputs(self) -> Outputs {
        Outputs {
            logits: true,
            global_contrast: self.uses_global(),
            intermodal: self.uses_intermodal(),
            detach_heads: self.probe_heads(),
        }
    }

    /// Parses a comma-separated list such as `ce,ce+global`.
    pub fn parse_list(s: &str) -> Result<Vec<Regime>> {
        s.split(',').map(|r| r.trim().parse()).collect()
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss regime {s:?}")))
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub window: usize,
    pub d_model: usize,
    pub d_time: usize,
    pub d_fused: usize,
    pub d_contrast: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub max_len: usize,
    pub max_positions: usize,
    pub rel_clip: usize,
    pub denominator_mode: DenominatorMode,
    pub encoder_mode: EncoderMode,
    pub augment_lambda: f64,
    /// Cohort used by `generate` and `experiment`.
    pub synthetic: SyntheticConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Ce,
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
            dropout: 0.2,
            alpha: 0.2,
            beta: 1.0,
            tau: 0.07,
            window: 16,
            d_model: 32,
            d_time: 8,
            d_fused: 32,
            d_contrast: 32,
            n_heads: 1,
            n_layers: 1,
            seed: 0,
            train_frac: 0.7,
            val_frac: 0.15,
            test_frac: 0.15,
            max_len: 512,
            max_positions: 512,
            rel_clip: 8,
            denominator_mode: DenominatorMode::IncludePositive,
            encoder_mode: EncoderMode::Linear,
            augment_lambda: crate::cohort::DEFAULT_AUGMENT_LAMBDA,
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Shape of the data a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataShape {
    pub n_variables: usize,
    pub static_dim: usize,
    pub embed_dim: usize,
    pub n_outcomes: usize,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

impl TrainConfig {
    /// Loss weights after applying the regime: `ce` forces `alpha = 0` and
    /// the contrastive-only regimes force `beta = 0`.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        let r = self.regime;
        let alpha = if r.uses_global() || r.uses_intermodal() { self.alpha } else { 0.0 };
        let beta = if r.uses_ce() { self.beta } else { 0.0 };
        LossWeights::new(alpha, beta)
    }

    pub fn model_config(&self, shape: DataShape) -> ModelConfig {
        ModelConfig {
            n_variables: shape.n_variables,
            static_dim: shape.static_dim,
            embed_dim: shape.embed_dim,
            n_outcomes: shape.n_outcomes,
            d_model: self.d_model,
            d_time: self.d_time,
            d_fused: self.d_fused,
            d_contrast: self.d_contrast,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            window: self.window,
            rel_clip: self.rel_clip,
            max_len: self.max_len,
            max_positions: self.max_positions,
            encoder_mode: self.encoder_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fracs:?} must be in [0, 1] and sum to 1"));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(self.augment_lambda >= 0.0) {
            return bad("augment_lambda must be non-negative".into());
        }
        let dims = [
            self.window,
            self.d_model,
            self.d_fused,
            self.d_contrast,
            self.n_heads,
            self.n_layers,
            self.max_positions,
            self.rel_clip,
        ];
        if dims.iter().any(|&d| d == 0) {
            return bad("model dimensions, window and clip distance must be positive".into());
        }
        if self.d_time < 2 {
            return bad("d_time must be at least 2".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        self.effective_weights()?;
        self.synthetic.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synthetic;
        match key {
            "regime" => self.regime = value.parse()?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "beta" => self.beta = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "window" => self.window = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "d_time" => self.d_time = parse_value(key, value)?,
            "d_fused" => self.d_fused = parse_value(key, value)?,
            "d_contrast" => self.d_contrast = parse_value(key, value)?,
            "n_heads" => self.n_heads = parse_value(key, value)?,
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "train_frac" => self.train_frac = parse_value(key, value)?,
            "val_frac" => self.val_frac = parse_value(key, value)?,
            "test_frac" => self.test_frac = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "max_positions" => self.max_positions = parse_value(key, value)?,
            "rel_clip" => self.rel_clip = parse_value(key, value)?,
            "denominator_mode" => self.denominator_mode = DenominatorMode::parse(value)?,
            "encoder_mode" => self.encoder_mode = EncoderMode::parse(value)?,
            "augment_lambda" => self.augment_lambda = parse_value(key, value)?,
            "synthetic.n_patients" => s.n_patients = parse_value(key, value)?,
            "synthetic.n_variables" => s.n_variables = parse_value(key, value)?,
            "synthetic.mean_seq_len" => s.mean_seq_len = parse_value(key, value)?,
            "synthetic.n_outcomes" => s.n_outcomes = parse_value(key, value)?,
            "synthetic.static_dim" => s.static_dim = parse_value(key, value)?,
            "synthetic.latent_dim_time" => s.latent_dim_time = parse_value(key, value)?,
            "synthetic.latent_dim_note" => s.latent_dim_note = parse_value(key, value)?,
            "synthetic.embed_dim" => s.embed_dim = parse_value(key, value)?,
            "synthetic.shared_info" => s.shared_info = parse_value(key, value)?,
            "synthetic.label_noise" => s.label_noise = parse_value(key, value)?,
            "synthetic.missing_static_rate" => s.missing_static_rate = parse_value(key, value)?,
            "synthetic.max_note_chunks" => s.max_note_chunks = parse_value(key, value)?,
            "synthetic.seed" => s.seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text with every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let s = &self.synthetic;
        let pairs: Vec<(&str, String)> = vec![
            ("regime", self.regime.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("dropout", self.dropout.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("tau", self.tau.to_string()),
            ("window", self.window.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_time", self.d_time.to_string()),
            ("d_fused", self.d_fused.to_string()),
            ("d_contrast", self.d_contrast.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("seed", self.seed.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("val_frac", self.val_frac.to_string()),
            ("test_frac", self.test_frac.to_string()),
            ("max_len", self.max_len.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("rel_clip", self.rel_clip.to_string()),
            ("denominator_mode", self.denominator_mode.as_str().to_string()),
            ("encoder_mode", self.encoder_mode.as_str().to_string()),
            ("augment_lambda", self.augment_lambda.to_string()),
            ("synthetic.n_patients", s.n_patients.to_string()),
            ("synthetic.n_variables", s.n_variables.to_string()),
            ("synthetic.mean_seq_len", s.mean_seq_len.to_string()),
            ("synthetic.n_outcomes", s.n_outcomes.to_string()),
            ("synthetic.static_dim", s.static_dim.to_string()),
            ("synthetic.latent_dim_time", s.latent_dim_time.to_string()),
            ("synthetic.latent_dim_note", s.latent_dim_note.to_string()),
            ("synthetic.embed_dim", s.embed_dim.to_string()),
            ("synthetic.shared_info", s.shared_info.to_string()),
            ("synthetic.label_noise", s.label_noise.to_string()),
            ("synthetic.missing_static_rate", s.missing_static_rate.to_string()),
            ("synthetic.max_note_chunks", s.max_note_chunks.to_string()),
            ("synthetic.seed", s.seed.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl DataShape {
    const KEYS: [&'static str; 4] = ["data.n_variables", "data.static_dim", "data.embed_dim", "data.n_outcomes"];

    pub fn to_text(&self) -> String {
        let vals = [self.n_variables, self.static_dim, self.embed_dim, self.n_outcomes];
        Self::KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Splits `data.*` lines off a config text and parses them.
    pub fn split_from(text: &str) -> Result<(Self, String)> {
        let mut vals = [None; 4];
        let mut rest = String::new();
        for line in text.lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            match Self::KEYS.iter().position(|k| *k == key) {
                Some(i) => {
                    let v = line.split_once('=').map(|x| x.1.trim()).unwrap_or("");
                    vals[i] = Some(parse_value::<usize>(key, v)?);
                }
                None => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::Config(format!("missing {}", Self::KEYS[i])));
        Ok((
            Self {
                n_variables: get(0)?,
                static_dim: get(1)?,
                embed_dim: get(2)?,
                n_outcomes: get(3)?,
            },
            rest,
        ))
    }
}
