//! Run configuration: one nested record of every tunable, exchanged as flat
//! JSON with dotted keys such as `msm.mask_ratio`.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::align::{ClassifierConfig, FinetuneConfig, FinetunePolicy};
use crate::diffusion::{AeConfig, DenoiserConfig, LdmConfig, SampleConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::default_probe_config;
use crate::msm::{EncoderConfig, MsmConfig};
use crate::signal::synth::CorpusSpec;
use crate::signal::PreprocessConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated images per test signal.
    pub repeats: usize,
    /// Unconditional samples for the chance-level check.
    pub unconditional_samples: usize,
    /// Columns of the saved sample grids.
    pub grid_columns: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { repeats: 1, unconditional_samples: 200, grid_columns: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub msm: MsmConfig,
    pub ae: AeConfig,
    pub image_encoder: ClassifierConfig,
    pub probe: ClassifierConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub ldm: LdmConfig,
    pub finetune: FinetuneConfig,
    pub policy: FinetunePolicy,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            preprocess: PreprocessConfig::default(),
            encoder: EncoderConfig::default(),
            msm: MsmConfig::default(),
            ae: AeConfig::default(),
            image_encoder: ClassifierConfig::default(),
            probe: default_probe_config(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            ldm: LdmConfig::default(),
            finetune: FinetuneConfig::default(),
            policy: FinetunePolicy::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        v => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let mut parts = key.split('.').peekable();
    while let Some(p) = parts.next() {
        let obj = cur.as_object_mut().expect("flat keys come from an object tree");
        if parts.peek().is_none() {
            obj.insert(p.to_string(), v);
            return;
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
}

impl RunConfig {
    /// Every key with its value, dotted.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    /// Applies dotted `overrides` on top of `self`. Unknown keys and values
    /// of the wrong type are rejected.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Self> {
        Self::from_flat(&merge_layers(&self.to_flat(), &[overrides])?)
    }

    /// Builds and validates a config from a complete dotted map.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut tree = Value::Object(Map::new());
        for (k, v) in flat {
            set_path(&mut tree, k, v.clone());
        }
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a flat JSON object and applies it over `self`.
    pub fn with_json(&self, text: &str) -> Result<Self> {
        match serde_json::from_str::<Value>(text).map_err(|e| Error::Config(format!("config file: {e}")))? {
            Value::Object(m) => self.with_overrides(&m),
            _ => Err(Error::Config("config file must hold one JSON object".into())),
        }
    }

    /// Cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.policy.validate()?;
        if self.preprocess.channels != self.encoder.channels || self.preprocess.length != self.encoder.length {
            return Err(Error::Config(format!(
                "preprocessing gives {}x{} but the encoder expects {}x{}",
                self.preprocess.channels, self.preprocess.length, self.encoder.channels, self.encoder.length
            )));
        }
        if !self.sample.guidance.is_finite() {
            return Err(Error::Config(format!("sample.guidance {} is not finite", self.sample.guidance)));
        }
        if self.eval.repeats == 0 || self.eval.grid_columns == 0 {
            return Err(Error::Config("eval repeats and grid_columns must be positive".into()));
        }
        Ok(())
    }
}

/// Folds dotted layers over `base`, later layers winning.
pub fn merge_layers(base: &Map<String, Value>, layers: &[&Map<String, Value>]) -> Result<Map<String, Value>> {
    let mut out = base.clone();
    for layer in layers {
        for (k, v) in *layer {
            if !base.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            out.insert(k.clone(), v.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flat_roundtrip() {
        let c = RunConfig::default();
        let flat = c.to_flat();
        assert_eq!(flat["msm.mask_ratio"], Value::from(0.75));
        assert!(flat.contains_key("msm.decoder.d_dec"));
        assert_eq!(c.with_overrides(&flat).unwrap(), c);
        assert_eq!(c.with_json(&c.to_flat_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_mistyped_keys() {
        let c = RunConfig::default();
        assert!(matches!(c.with_json(r#"{"msm.mask_ration": 0.5}"#), Err(Error::Config(_))));
        assert!(matches!(c.with_json(r#"{"msm": {"mask_ratio": 0.5}}"#), Err(Error::Config(_))));
        assert!(matches!(c.with_json(r#"{"msm.steps": "many"}"#), Err(Error::Config(_))));
        assert!(matches!(c.with_json("[1]"), Err(Error::Config(_))));
        let c2 = c.with_json(r#"{"msm.mask_ratio": 0.5, "msm.clip_norm": null}"#).unwrap();
        assert_eq!(c2.msm.mask_ratio, 0.5);
        assert_eq!(c2.msm.clip_norm, None);
        assert!(c.with_json(r#"{"encoder.channels": 16}"#).is_err());
    }

    fn numeric_keys() -> Vec<String> {
        RunConfig::default()
            .to_flat()
            .into_iter()
            .filter(|(_, v)| v.is_u64())
            .map(|(k, _)| k)
            .collect()
    }

    proptest! {
        // Flags beat the file and the file beats defaults, key by key.
        #[test]
        fn precedence_holds_per_key(file_mask in prop::collection::vec(any::<bool>(), 64), flag_mask in prop::collection::vec(any::<bool>(), 64)) {
            let keys = numeric_keys();
            let defaults = RunConfig::default().to_flat();
            let mut file = Map::new();
            let mut flags = Map::new();
            for (i, k) in keys.iter().enumerate() {
                if file_mask[i % 64] {
                    file.insert(k.clone(), Value::from(defaults[k].as_u64().unwrap() + 1));
                }
                if flag_mask[i % 64] {
                    flags.insert(k.clone(), Value::from(defaults[k].as_u64().unwrap() + 2));
                }
            }
            let merged = merge_layers(&defaults, &[&file, &flags]).unwrap();
            for k in &keys {
                let want = flags.get(k).or(file.get(k)).unwrap_or(&defaults[k]);
                prop_assert_eq!(&merged[k], want);
            }
        }
    }

    #[test]
    fn layers_reject_unknown_keys() {
        let defaults = RunConfig::default().to_flat();
        let mut bad = Map::new();
        bad.insert("nope".into(), Value::from(1));
        assert!(merge_layers(&defaults, &[&bad]).is_err());
    }
}
