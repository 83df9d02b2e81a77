//! Plain-text `key = value` configuration with validated defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::peft::{PeftConfig, PeftKind};
use crate::pseudo_labeler::VoteRule;

/// How the reconstruction error is reduced over prompt entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    /// Squared Frobenius norm per bank, averaged over banks.
    Sum,
    /// Mean squared entry per bank, averaged over banks.
    Mean,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::Validation {
                key: "ae.reduction".into(),
                reason: format!("expected sum|mean, got {s:?}"),
            }),
        }
    }
}

/// Every tunable of a run. Field docs name the config key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    /// `classes`
    pub classes: usize,
    /// `domains` — sources plus the target.
    pub domains: usize,
    /// `stages` — curriculum clusters `T`.
    pub stages: usize,
    pub tau: f64,
    pub beta: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub m1: usize,
    pub m2: usize,
    pub m3: usize,
    pub r1: usize,
    pub r2: usize,
    pub e1: usize,
    pub e2: usize,
    pub e3: usize,
    /// `peft.kind`
    pub peft_kind: PeftKind,
    pub vote: VoteRule,
    /// `epochs.source`
    pub source_epochs: usize,
    /// `epochs.step1`
    pub step1_epochs: usize,
    /// `epochs.step2`
    pub step2_epochs: usize,
    /// `batch`
    pub batch_size: usize,
    /// `lr.max`
    pub lr_max: f64,
    /// `lr.min`
    pub lr_min: f64,
    pub seed: u64,
    /// `label_noise` — fraction of initial pseudo-labels replaced by a
    /// uniformly drawn wrong class.
    pub label_noise: f64,
    /// `ae.reduction`
    pub ae_reduction: Reduction,
    /// `l1.full` — L1 over the whole target distribution instead of the
    /// pseudo-label entry only.
    pub l1_full: bool,
    /// `synth.samples`
    pub samples_per_class: usize,
    /// `synth.shift`
    pub shift: f64,
    /// `synth.noise`
    pub noise: f64,
    /// `synth.anchors`
    pub anchors_per_class: usize,
    /// `encoder.*`
    pub encoder: EncoderConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            classes: 12,
            domains: 3,
            stages: 3,
            tau: 0.6,
            beta: 0.8,
            alpha: 1.0,
            temperature: 0.01,
            m1: 12,
            m2: 12,
            m3: 20,
            r1: 8,
            r2: 16,
            e1: 9,
            e2: 24,
            e3: 32,
            peft_kind: PeftKind::Lora,
            vote: VoteRule::Average,
            source_epochs: 6,
            step1_epochs: 2,
            step2_epochs: 2,
            batch_size: 64,
            lr_max: 2e-3,
            lr_min: 1e-5,
            seed: 0,
            label_noise: 0.0,
            ae_reduction: Reduction::Sum,
            l1_full: false,
            samples_per_class: 60,
            shift: 1.0,
            noise: 0.05,
            anchors_per_class: 8,
            encoder: EncoderConfig::default(),
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::Validation {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| invalid(key, format!("cannot parse {v:?}")))
}

impl Config {
    /// Reads a `key = value` document; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "classes" => self.classes = parse(key, v)?,
            "domains" => self.domains = parse(key, v)?,
            "stages" => self.stages = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "m1" => self.m1 = parse(key, v)?,
            "m2" => self.m2 = parse(key, v)?,
            "m3" => self.m3 = parse(key, v)?,
            "r1" => self.r1 = parse(key, v)?,
            "r2" => self.r2 = parse(key, v)?,
            "e1" => self.e1 = parse(key, v)?,
            "e2" => self.e2 = parse(key, v)?,
            "e3" => self.e3 = parse(key, v)?,
            "peft.kind" => self.peft_kind = v.parse()?,
            "vote" => self.vote = v.parse()?,
            "epochs.source" => self.source_epochs = parse(key, v)?,
            "epochs.step1" => self.step1_epochs = parse(key, v)?,
            "epochs.step2" => self.step2_epochs = parse(key, v)?,
            "batch" => self.batch_size = parse(key, v)?,
            "lr.max" => self.lr_max = parse(key, v)?,
            "lr.min" => self.lr_min = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "label_noise" => self.label_noise = parse(key, v)?,
            "ae.reduction" => self.ae_reduction = v.parse()?,
            "l1.full" => self.l1_full = parse(key, v)?,
            "synth.samples" => self.samples_per_class = parse(key, v)?,
            "synth.shift" => self.shift = parse(key, v)?,
            "synth.noise" => self.noise = parse(key, v)?,
            "synth.anchors" => self.anchors_per_class = parse(key, v)?,
            "encoder.image" => self.encoder.image_size = parse(key, v)?,
            "encoder.patch" => self.encoder.patch = parse(key, v)?,
            "encoder.width" => self.encoder.width = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.text_layers" => self.encoder.text_layers = parse(key, v)?,
            "encoder.mlp" => self.encoder.mlp_hidden = parse(key, v)?,
            "encoder.embed" => self.encoder.embed_dim = parse(key, v)?,
            "encoder.seed" => self.encoder.seed = parse(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(invalid(key, format!("{v} must lie in (0, 1)")))
            }
        };
        let pos = |key: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(invalid(key, "must be at least 1"))
            }
        };
        unit("tau", self.tau)?;
        unit("beta", self.beta)?;
        for (k, v) in [
            ("classes", self.classes),
            ("stages", self.stages),
            ("m1", self.m1),
            ("m2", self.m2),
            ("m3", self.m3),
            ("r1", self.r1),
            ("r2", self.r2),
            ("e1", self.e1),
            ("e2", self.e2),
            ("batch", self.batch_size),
        ] {
            pos(k, v)?;
        }
        if self.domains < 2 {
            return Err(invalid("domains", "need at least one source and the target"));
        }
        if self.stages > self.classes {
            return Err(invalid("stages", format!("{} exceeds classes {}", self.stages, self.classes)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid("alpha", "must be a finite non-negative value"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be positive"));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(invalid("lr.max", "need 0 <= lr.min <= lr.max and lr.max > 0"));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(invalid("label_noise", "must lie in [0, 1]"));
        }
        if self.e3 != self.encoder.width {
            return Err(invalid(
                "e3",
                format!("must equal the token width {}", self.encoder.width),
            ));
        }
        if self.peft_kind == PeftKind::Adapter && self.r2 >= self.encoder.width {
            return Err(invalid("r2", "adapter bottleneck must be narrower than the token width"));
        }
        if !(self.shift >= 0.0) || !(self.noise >= 0.0) {
            return Err(invalid("synth.shift", "shift and noise must be non-negative"));
        }
        self.encoder.validate()
    }

    pub fn peft(&self) -> PeftConfig {
        PeftConfig {
            kind: self.peft_kind,
            m3: self.m3,
            r1: self.r1,
            r2: self.r2,
        }
    }

    /// Prompt sequence length seen by the text encoder.
    pub fn seq_len(&self) -> usize {
        self.m1 + self.m2 + 1
    }

    /// Canonical `key = value` rendering; `parse(render())` round-trips.
    pub fn render(&self) -> String {
        let e = &self.encoder;
        let pairs: Vec<(&str, String)> = vec![
            ("classes", self.classes.to_string()),
            ("domains", self.domains.to_string()),
            ("stages", self.stages.to_string()),
            ("tau", self.tau.to_string()),
            ("beta", self.beta.to_string()),
            ("alpha", self.alpha.to_string()),
            ("temperature", self.temperature.to_string()),
            ("m1", self.m1.to_string()),
            ("m2", self.m2.to_string()),
            ("m3", self.m3.to_string()),
            ("r1", self.r1.to_string()),
            ("r2", self.r2.to_string()),
            ("e1", self.e1.to_string()),
            ("e2", self.e2.to_string()),
            ("e3", self.e3.to_string()),
            ("peft.kind", self.peft_kind.to_string()),
            ("vote", self.vote.to_string()),
            ("epochs.source", self.source_epochs.to_string()),
            ("epochs.step1", self.step1_epochs.to_string()),
            ("epochs.step2", self.step2_epochs.to_string()),
            ("batch", self.batch_size.to_string()),
            ("lr.max", self.lr_max.to_string()),
            ("lr.min", self.lr_min.to_string()),
            ("seed", self.seed.to_string()),
            ("label_noise", self.label_noise.to_string()),
            ("ae.reduction", self.ae_reduction.to_string()),
            ("l1.full", self.l1_full.to_string()),
            ("synth.samples", self.samples_per_class.to_string()),
            ("synth.shift", self.shift.to_string()),
            ("synth.noise", self.noise.to_string()),
            ("synth.anchors", self.anchors_per_class.to_string()),
            ("encoder.image", e.image_size.to_string()),
            ("encoder.patch", e.patch.to_string()),
            ("encoder.width", e.width.to_string()),
            ("encoder.layers", e.layers.to_string()),
            ("encoder.text_layers", e.text_layers.to_string()),
            ("encoder.mlp", e.mlp_hidden.to_string()),
            ("encoder.embed", e.embed_dim.to_string()),
            ("encoder.seed", e.seed.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::parse("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!((c.tau, c.beta, c.stages), (0.6, 0.8, 3));
        assert_eq!((c.m1, c.m2, c.m3, c.r1, c.r2), (12, 12, 20, 8, 16));
    }

    #[test]
    fn out_of_range_names_key() {
        match Config::parse("beta = 1.5") {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "beta"),
            other => panic!("{other:?}"),
        }
        assert!(Config::parse("tau = 0").is_err());
        assert!(Config::parse("stages = 0").is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        match Config::parse("gamma = 2") {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "gamma"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_overrides() {
        let c = Config::parse("# run\nm1 = 12\nm2=12\npeft.kind = adapter # bottleneck\nvote = majority\n").unwrap();
        assert_eq!(c.peft_kind, PeftKind::Adapter);
        assert_eq!(c.vote, VoteRule::Majority);
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::default();
        c.tau = 0.65;
        c.seed = 9;
        c.ae_reduction = Reduction::Mean;
        assert_eq!(Config::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn malformed_line() {
        assert!(matches!(Config::parse("tau 0.5"), Err(Error::Config(_))));
    }
}
