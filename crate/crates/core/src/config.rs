//! Campaign configuration and seed derivation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, DICT_SIZE, INPUT_NOISE_SIGMA, STR_LEN_MAX};
use crate::nn::ops::LEAKY_SLOPE;
use crate::ranking::DEFAULT_K;
use crate::targets::TargetProgram;
use crate::trace::{DEFAULT_MAP_SIZE, PAPER_MAP_SIZE};
use crate::vae::{VaeSpec, LATENT_DIM};

/// Residual plus upsampling blocks in the full-scale profile.
pub const PAPER_DECONV_BLOCKS: usize = 42;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub profile: Profile,
    pub target: TargetProgram,
    pub map_size: usize,
    pub latent_dim: usize,
    pub str_len_max: usize,
    pub dict_size: usize,
    /// Inputs generated per epoch.
    pub batch_size: usize,
    /// Examples per optimizer step.
    pub train_batch_size: usize,
    pub steps_per_pass: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub input_noise_sigma: f64,
    pub mse_weight: f64,
    pub mse_exponent: f64,
    pub deconv_blocks: usize,
    pub filters: usize,
    pub len0: usize,
    pub vae_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub batch_norm: bool,
    pub epochs: usize,
    pub stall_window: usize,
    pub stop_on_stall: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            profile: Profile::Desk,
            target: TargetProgram::Json,
            map_size: DEFAULT_MAP_SIZE,
            latent_dim: LATENT_DIM,
            str_len_max: STR_LEN_MAX,
            dict_size: DICT_SIZE,
            batch_size: 64,
            train_batch_size: 8,
            steps_per_pass: 100,
            k: DEFAULT_K,
            learning_rate: 1e-4,
            input_noise_sigma: INPUT_NOISE_SIGMA,
            mse_weight: 1.0,
            mse_exponent: 2.0,
            deconv_blocks: 10,
            filters: 32,
            len0: 16,
            vae_hidden: vec![512, 128],
            leaky_slope: LEAKY_SLOPE,
            batch_norm: false,
            epochs: 100,
            stall_window: 20,
            stop_on_stall: true,
            seed: 0,
            output_dir: PathBuf::from("campaign"),
        }
    }
}

fn typed<T: serde::de::DeserializeOwned>(field: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::config(field, e.to_string()))
}

impl CampaignConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = CampaignConfig {
            profile,
            ..Default::default()
        };
        if profile == Profile::Paper {
            c.map_size = PAPER_MAP_SIZE;
            c.deconv_blocks = PAPER_DECONV_BLOCKS;
        }
        c
    }

    /// Assigns one field from a JSON value.
    pub fn set(&mut self, key: &str, v: Value) -> Result<()> {
        match key {
            "profile" => self.profile = typed(key, v)?,
            "target" => {
                let id: String = typed(key, v)?;
                self.target = TargetProgram::from_id(&id)?;
            }
            "map_size" => self.map_size = typed(key, v)?,
            "latent_dim" => self.latent_dim = typed(key, v)?,
            "str_len_max" => self.str_len_max = typed(key, v)?,
            "dict_size" => self.dict_size = typed(key, v)?,
            "batch_size" => self.batch_size = typed(key, v)?,
            "train_batch_size" => self.train_batch_size = typed(key, v)?,
            "steps_per_pass" => self.steps_per_pass = typed(key, v)?,
            "k" => self.k = typed(key, v)?,
            "learning_rate" => self.learning_rate = typed(key, v)?,
            "input_noise_sigma" => self.input_noise_sigma = typed(key, v)?,
            "mse_weight" => self.mse_weight = typed(key, v)?,
            "mse_exponent" => self.mse_exponent = typed(key, v)?,
            "deconv_blocks" => self.deconv_blocks = typed(key, v)?,
            "filters" => self.filters = typed(key, v)?,
            "len0" => self.len0 = typed(key, v)?,
            "vae_hidden" => self.vae_hidden = typed(key, v)?,
            "leaky_slope" => self.leaky_slope = typed(key, v)?,
            "batch_norm" => self.batch_norm = typed(key, v)?,
            "epochs" => self.epochs = typed(key, v)?,
            "stall_window" => self.stall_window = typed(key, v)?,
            "stop_on_stall" => self.stop_on_stall = typed(key, v)?,
            "seed" => self.seed = typed(key, v)?,
            "output_dir" => self.output_dir = typed(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("map_size", self.map_size),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
            ("train_batch_size", self.train_batch_size),
            ("steps_per_pass", self.steps_per_pass),
            ("k", self.k),
            ("deconv_blocks", self.deconv_blocks),
            ("filters", self.filters),
            ("len0", self.len0),
            ("epochs", self.epochs),
            ("stall_window", self.stall_window),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.map_size.is_power_of_two() {
            return Err(Error::config("map_size", format!("{} is not a power of two", self.map_size)));
        }
        if self.str_len_max != STR_LEN_MAX {
            return Err(Error::config("str_len_max", format!("fixed at {STR_LEN_MAX}")));
        }
        if self.dict_size != DICT_SIZE {
            return Err(Error::config("dict_size", format!("fixed at {DICT_SIZE}")));
        }
        if self.k < 2 {
            return Err(Error::config("k", "must be at least 2"));
        }
        if self.vae_hidden.is_empty() || self.vae_hidden.contains(&0) {
            return Err(Error::config("vae_hidden", "needs at least one positive width"));
        }
        for (field, v) in [("learning_rate", self.learning_rate), ("leaky_slope", self.leaky_slope)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be a positive number"));
            }
        }
        for (field, v) in [("input_noise_sigma", self.input_noise_sigma), ("mse_weight", self.mse_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, "must be a nonnegative number"));
            }
        }
        if !(self.mse_exponent.is_finite() && self.mse_exponent >= 1.0) {
            return Err(Error::config("mse_exponent", "must be at least 1"));
        }
        if self.profile == Profile::Paper {
            if self.map_size != PAPER_MAP_SIZE {
                return Err(Error::config("map_size", format!("the paper profile requires {PAPER_MAP_SIZE}")));
            }
            if self.deconv_blocks != PAPER_DECONV_BLOCKS {
                return Err(Error::config(
                    "deconv_blocks",
                    format!("the paper profile requires {PAPER_DECONV_BLOCKS}"),
                ));
            }
        }
        self.generator_spec().layers()?;
        Ok(())
    }

    pub fn vae_spec(&self) -> VaeSpec {
        VaeSpec {
            map_size: self.map_size,
            latent_dim: self.latent_dim,
            hidden: self.vae_hidden.clone(),
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: self.latent_dim,
            len0: self.len0,
            filters: self.filters,
            deconv_blocks: self.deconv_blocks,
            out_len: self.str_len_max,
            dict_size: self.dict_size,
            kernel: 3,
            leaky_slope: self.leaky_slope,
            batch_norm: self.batch_norm,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Reads an override value: JSON when it parses, otherwise a bare string.
pub fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Builds a config from an optional JSON document and `key=value` overrides
/// (applied after the document). The profile is resolved first so that its
/// defaults sit underneath every explicit key.
pub fn parse_config(document: Option<&str>, overrides: &[(String, Value)]) -> Result<CampaignConfig> {
    let doc: Map<String, Value> = match document.map(str::trim) {
        None | Some("") => Map::new(),
        Some(text) => match serde_json::from_str(text).map_err(|e| Error::ConfigDocument(e.to_string()))? {
            Value::Object(m) => m,
            _ => return Err(Error::ConfigDocument("top level must be an object".into())),
        },
    };
    let profile_value = overrides
        .iter()
        .rev()
        .find(|(k, _)| k == "profile")
        .map(|(_, v)| v.clone())
        .or_else(|| doc.get("profile").cloned());
    let profile = match profile_value {
        Some(v) => typed("profile", v)?,
        None => Profile::Desk,
    };
    let mut cfg = CampaignConfig::for_profile(profile);
    for (k, v) in doc.into_iter().chain(overrides.iter().cloned()) {
        cfg.set(&k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Per-component seed: the first eight bytes of `sha256(seed_le ‖ label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ov(k: &str, v: Value) -> (String, Value) {
        (k.to_string(), v)
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = parse_config(None, &[]).unwrap();
        assert_eq!(c, CampaignConfig::default());
        assert_eq!(parse_config(Some("  "), &[]).unwrap(), c);
        assert_eq!((c.k, c.map_size, c.batch_size, c.steps_per_pass), (5000, 1024, 64, 100));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.input_noise_sigma, 0.1);
    }

    #[test]
    fn document_and_overrides() {
        let c = parse_config(Some(r#"{"k": 100}"#), &[]).unwrap();
        assert_eq!(c.k, 100);
        assert_eq!(c.map_size, 1024);
        let c = parse_config(Some(r#"{"k": 100}"#), &[ov("k", json!(50)), ov("target", json!("csub"))]).unwrap();
        assert_eq!(c.k, 50);
        assert_eq!(c.target, TargetProgram::Csub);
    }

    #[test]
    fn violations_name_the_field() {
        let field_of = |doc: &str| match parse_config(Some(doc), &[]) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field_of(r#"{"map_size": 1000}"#), "map_size");
        assert_eq!(field_of(r#"{"k": 1}"#), "k");
        assert_eq!(field_of(r#"{"dict_size": 130}"#), "dict_size");
        assert_eq!(field_of(r#"{"learning_rate": -1}"#), "learning_rate");
        assert_eq!(field_of(r#"{"batch_size": "many"}"#), "batch_size");
        assert_eq!(field_of(r#"{"deconv_blocks": 3}"#), "deconv_blocks");
        assert!(matches!(parse_config(Some(r#"{"colour": 1}"#), &[]), Err(Error::UnknownKey(k)) if k == "colour"));
        assert!(matches!(parse_config(Some("[1]"), &[]), Err(Error::ConfigDocument(_))));
        assert!(matches!(parse_config(Some(r#"{"target": "sparse"}"#), &[]), Err(Error::UnknownTarget(_))));
    }

    #[test]
    fn paper_profile() {
        let c = parse_config(Some(r#"{"profile": "paper"}"#), &[]).unwrap();
        assert_eq!((c.map_size, c.deconv_blocks), (65536, 42));
        assert!(parse_config(Some(r#"{"profile": "paper", "map_size": 1024}"#), &[]).is_err());
    }

    #[test]
    fn echo_roundtrip() {
        let c = parse_config(None, &[ov("seed", json!(7)), ov("mse_weight", json!(0.0))]).unwrap();
        assert_eq!(parse_config(Some(&c.to_json()), &[]).unwrap(), c);
    }

    #[test]
    fn override_values() {
        assert_eq!(override_value("12"), json!(12));
        assert_eq!(override_value("json"), json!("json"));
        assert_eq!(override_value("[1,2]"), json!([1, 2]));
    }

    #[test]
    fn seeds_fan_out() {
        assert_eq!(derive_seed(1, "vae"), derive_seed(1, "vae"));
        assert_ne!(derive_seed(1, "vae"), derive_seed(1, "gnn"));
        assert_ne!(derive_seed(1, "vae"), derive_seed(2, "vae"));
    }
}
