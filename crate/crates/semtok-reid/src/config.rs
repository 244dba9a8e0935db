//! Configuration: key=value files, the key registry, typed settings and
//! ablation variant names.
//!
//! Every key has a documented default; unknown keys are rejected so typos
//! fail loudly. `parse → serialize → parse` is idempotent.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_INSTRUCTION: &str =
    "Summarize the person image into one word, focusing on age, gender, clothing, and biometric features.";

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

/// The full set of accepted configuration keys.
pub const KEY_REGISTRY: &[KeySpec] = &[
    KeySpec { key: "model.dim", default: "64", doc: "embedding width d shared by all modules" },
    KeySpec { key: "model.heads", default: "4", doc: "attention heads per block" },
    KeySpec { key: "model.vision_blocks", default: "4", doc: "vision encoder depth" },
    KeySpec { key: "model.decoder_blocks", default: "4", doc: "frozen decoder depth" },
    KeySpec { key: "model.vocab", default: "512", doc: "decoder vocabulary size" },
    KeySpec { key: "model.patch_size", default: "8", doc: "square patch side P" },
    KeySpec { key: "pstg.instruction", default: DEFAULT_INSTRUCTION, doc: "instruction text wrapped around the visual tokens" },
    KeySpec { key: "pstg.mode", default: "generated", doc: "semantic token source: generated | learnable_token" },
    KeySpec { key: "sgi.variant", default: "full", doc: "interaction module: full | query_only | none" },
    KeySpec { key: "css.mode", default: "input", doc: "camera embedding injection: off | late | input" },
    KeySpec { key: "loss.alpha1", default: "0.25", doc: "identity-loss weight" },
    KeySpec { key: "loss.alpha2", default: "1.0", doc: "triplet-loss weight" },
    KeySpec { key: "loss.margin", default: "0.3", doc: "triplet margin m" },
    KeySpec { key: "loss.epsilon", default: "0.1", doc: "label-smoothing constant" },
    KeySpec { key: "train.p_ids", default: "16", doc: "identities per batch" },
    KeySpec { key: "train.k_imgs", default: "4", doc: "images per identity per batch" },
    KeySpec { key: "train.epochs", default: "30", doc: "training epochs" },
    KeySpec { key: "train.base_lr", default: "3e-4", doc: "peak learning rate" },
    KeySpec { key: "train.warmup_epochs", default: "10", doc: "linear warmup length" },
    KeySpec { key: "train.decay_epoch", default: "15", doc: "epoch at which the rate decays" },
    KeySpec { key: "train.decay_factor", default: "0.1", doc: "decay multiplier" },
    KeySpec { key: "train.weight_decay", default: "3e-4", doc: "decoupled weight decay" },
    KeySpec { key: "train.stop_gradient", default: "false", doc: "sever the decoder-to-vision gradient path" },
    KeySpec { key: "train.seed", default: "0", doc: "master seed for init, sampling and augmentation" },
    KeySpec { key: "train.eval_every", default: "10", doc: "retrieval evaluation period in epochs (0 = never)" },
    KeySpec { key: "eval.max_rank", default: "10", doc: "CMC curve length" },
];

/// Ablation variant names accepted by `--variant`.
pub const VARIANT_NAMES: &[&str] = &[
    "full",
    "no_pstg",
    "no_sgi",
    "stop_grad",
    "css_off",
    "css_late",
    "css_input",
    "query_only",
];

/// The seven distinct rows of the ablation grid (css_input equals full).
pub const ABLATION_GRID: &[&str] = &[
    "full",
    "no_pstg",
    "no_sgi",
    "stop_grad",
    "css_off",
    "css_late",
    "query_only",
];

#[derive(Clone, Debug)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        let values = KEY_REGISTRY
            .iter()
            .map(|k| (k.key.to_string(), k.default.to_string()))
            .collect();
        ConfigFile { values }
    }
}

impl ConfigFile {
    /// Parse key=value lines; `#` starts a comment, blank lines are skipped,
    /// keys outside the registry are rejected.
    pub fn parse(text: &str) -> Result<ConfigFile> {
        let mut cfg = ConfigFile::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{raw}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ConfigFile::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEY_REGISTRY.iter().any(|k| k.key == key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from registry"))
    }

    /// All keys in registry order, one `key=value` line each.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for spec in KEY_REGISTRY {
            out.push_str(spec.key);
            out.push('=');
            out.push_str(self.get(spec.key));
            out.push('\n');
        }
        out
    }

    /// Apply a named ablation variant on top of the current values.
    pub fn apply_variant(&mut self, variant: &str) -> Result<()> {
        match variant {
            "full" => {}
            "no_pstg" => self.set("pstg.mode", "learnable_token")?,
            "no_sgi" => self.set("sgi.variant", "none")?,
            "stop_grad" => self.set("train.stop_gradient", "true")?,
            "css_off" => self.set("css.mode", "off")?,
            "css_late" => self.set("css.mode", "late")?,
            "css_input" => self.set("css.mode", "input")?,
            "query_only" => self.set("sgi.variant", "query_only")?,
            other => {
                return Err(Error::Config(format!(
                    "unknown variant `{other}`; valid names: {}",
                    VARIANT_NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }

    fn usize_of(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be a non-negative integer, got `{}`", self.get(key))))
    }

    fn f64_of(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("{key} must be a number, got `{}`", self.get(key))))
    }

    fn bool_of(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!("{key} must be true or false, got `{other}`"))),
        }
    }

    /// Resolve and validate all keys into typed settings.
    pub fn resolve(&self) -> Result<Settings> {
        let css_mode = match self.get("css.mode") {
            "off" => CssMode::Off,
            "late" => CssMode::Late,
            "input" => CssMode::Input,
            other => return Err(Error::Config(format!("css.mode must be off|late|input, got `{other}`"))),
        };
        let sgi_variant = match self.get("sgi.variant") {
            "full" => SgiVariant::Full,
            "query_only" => SgiVariant::QueryOnly,
            "none" => SgiVariant::None,
            other => {
                return Err(Error::Config(format!(
                    "sgi.variant must be full|query_only|none, got `{other}`"
                )))
            }
        };
        let pstg_mode = match self.get("pstg.mode") {
            "generated" => PstgMode::Generated,
            "learnable_token" => PstgMode::LearnableToken,
            other => {
                return Err(Error::Config(format!(
                    "pstg.mode must be generated|learnable_token, got `{other}`"
                )))
            }
        };
        let settings = Settings {
            dim: self.usize_of("model.dim")?,
            heads: self.usize_of("model.heads")?,
            vision_blocks: self.usize_of("model.vision_blocks")?,
            decoder_blocks: self.usize_of("model.decoder_blocks")?,
            vocab: self.usize_of("model.vocab")?,
            patch_size: self.usize_of("model.patch_size")?,
            instruction: self.get("pstg.instruction").to_string(),
            pstg_mode,
            sgi_variant,
            css_mode,
            alpha1: self.f64_of("loss.alpha1")?,
            alpha2: self.f64_of("loss.alpha2")?,
            margin: self.f64_of("loss.margin")?,
            epsilon: self.f64_of("loss.epsilon")?,
            p_ids: self.usize_of("train.p_ids")?,
            k_imgs: self.usize_of("train.k_imgs")?,
            epochs: self.usize_of("train.epochs")?,
            base_lr: self.f64_of("train.base_lr")?,
            warmup_epochs: self.usize_of("train.warmup_epochs")?,
            decay_epoch: self.usize_of("train.decay_epoch")?,
            decay_factor: self.f64_of("train.decay_factor")?,
            weight_decay: self.f64_of("train.weight_decay")?,
            stop_gradient: self.bool_of("train.stop_gradient")?,
            seed: self
                .get("train.seed")
                .parse()
                .map_err(|_| Error::Config("train.seed must be an unsigned integer".into()))?,
            eval_every: self.usize_of("train.eval_every")?,
            max_rank: self.usize_of("eval.max_rank")?,
        };
        settings.validate()?;
        Ok(settings)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CssMode {
    Off,
    Late,
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgiVariant {
    Full,
    QueryOnly,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PstgMode {
    Generated,
    LearnableToken,
}

/// Typed, validated view of the whole configuration.
#[derive(Clone, Debug)]
pub struct Settings {
    pub dim: usize,
    pub heads: usize,
    pub vision_blocks: usize,
    pub decoder_blocks: usize,
    pub vocab: usize,
    pub patch_size: usize,
    pub instruction: String,
    pub pstg_mode: PstgMode,
    pub sgi_variant: SgiVariant,
    pub css_mode: CssMode,
    pub alpha1: f64,
    pub alpha2: f64,
    pub margin: f64,
    pub epsilon: f64,
    pub p_ids: usize,
    pub k_imgs: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub stop_gradient: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub max_rank: usize,
}

impl Settings {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.dim ({}) must be a positive multiple of model.heads ({})",
                self.dim, self.heads
            )));
        }
        if (self.dim / self.heads) % 4 != 0 {
            return Err(Error::Config(format!(
                "head width {} must be divisible by 4 for axial rotary positions",
                self.dim / self.heads
            )));
        }
        if self.decay_epoch <= self.warmup_epochs {
            return Err(Error::Config(format!(
                "train.decay_epoch ({}) must exceed train.warmup_epochs ({})",
                self.decay_epoch, self.warmup_epochs
            )));
        }
        if self.p_ids == 0 || self.k_imgs == 0 {
            return Err(Error::Config("train.p_ids and train.k_imgs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "loss.epsilon must lie in [0, 1), got {}",
                self.epsilon
            )));
        }
        if self.alpha1 < 0.0 || self.alpha2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.instruction.trim().is_empty() {
            return Err(Error::Config("pstg.instruction must not be empty".into()));
        }
        if self.max_rank == 0 {
            return Err(Error::Config("eval.max_rank must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p_ids * self.k_imgs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ConfigFile::default();
        let s = cfg.resolve().unwrap();
        assert_eq!(s.dim, 64);
        assert_eq!(s.p_ids, 16);
        assert_eq!(s.k_imgs, 4);
        assert_eq!(s.batch_size(), 64);
        assert!((s.alpha1 - 0.25).abs() < 1e-15);
        assert!((s.margin - 0.3).abs() < 1e-15);
        assert!((s.epsilon - 0.1).abs() < 1e-15);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = ConfigFile::parse("loss.alfa1=0.5").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
    }

    #[test]
    fn parse_serialize_parse_is_idempotent() {
        let mut cfg = ConfigFile::default();
        cfg.set("train.epochs", "7").unwrap();
        cfg.set("css.mode", "late").unwrap();
        let text = cfg.serialize();
        let reparsed = ConfigFile::parse(&text).unwrap();
        assert_eq!(reparsed.serialize(), text);
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let cfg = ConfigFile::parse("# comment\n\ntrain.epochs=3\n").unwrap();
        assert_eq!(cfg.get("train.epochs"), "3");
    }

    #[test]
    fn every_registry_key_round_trips() {
        // docs ⇄ parser audit: each documented key is accepted, and the
        // serializer emits exactly the documented keys.
        let defaults = ConfigFile::default().serialize();
        let parsed = ConfigFile::parse(&defaults).unwrap();
        assert_eq!(parsed.serialize(), defaults);
        assert_eq!(defaults.lines().count(), KEY_REGISTRY.len());
    }

    #[test]
    fn variant_names_apply() {
        for &v in VARIANT_NAMES {
            let mut cfg = ConfigFile::default();
            cfg.apply_variant(v).unwrap();
        }
        let mut cfg = ConfigFile::default();
        let err = cfg.apply_variant("bogus").unwrap_err();
        assert!(err.to_string().contains("full"), "error lists valid names");
    }

    #[test]
    fn decay_must_follow_warmup() {
        let mut cfg = ConfigFile::default();
        cfg.set("train.decay_epoch", "5").unwrap();
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn stop_grad_variant_sets_flag() {
        let mut cfg = ConfigFile::default();
        cfg.apply_variant("stop_grad").unwrap();
        assert!(cfg.resolve().unwrap().stop_gradient);
    }
}
