//! The run configuration: every module's settings plus seed, with a
//! versioned JSON form, dotted-path overrides and whole-config validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::eeg_data::{PreprocessConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::finetune::{FinetunePlan, ProbeConfig};
use crate::flops::FlopsInputs;
use crate::model::ModelConfig;
use crate::optim::{OptimConfig, ScheduleConfig};
use crate::patching::PatchConfig;
use crate::pretrain::PretrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Channel names to keep; empty keeps every channel.
    pub keep_channels: Vec<String>,
    /// Support samples per class for nearest-class-mean evaluation; 0 skips it.
    pub ncm_shots: usize,
    pub ncm_runs: usize,
    /// Align each subject's recordings before embedding.
    pub euclidean_alignment: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            keep_channels: Vec::new(),
            ncm_shots: 0,
            ncm_runs: 20,
            euclidean_alignment: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out: Option<String>,
    pub model: ModelConfig,
    pub patch: PatchConfig,
    pub preprocess: PreprocessConfig,
    pub synth: SynthSpec,
    pub pretrain: PretrainConfig,
    pub optim: OptimConfig,
    /// Used by the learning-rate preview.
    pub schedule: ScheduleConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetunePlan,
    pub eval: EvalConfig,
    pub flops: FlopsInputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out: None,
            model: ModelConfig::default(),
            patch: PatchConfig::default(),
            preprocess: PreprocessConfig::default(),
            synth: SynthSpec::default(),
            pretrain: PretrainConfig::default(),
            optim: OptimConfig::default(),
            schedule: ScheduleConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetunePlan::default(),
            eval: EvalConfig::default(),
            flops: FlopsInputs::default(),
        }
    }
}

/// Dotted paths present in `given` but absent from `reference`. Keys under
/// a reference `null` (an unset optional section) are not inspected.
fn unknown_keys(given: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                Some(rv) => unknown_keys(v, rv, &path, out),
                None => out.push(path),
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dotted) to `raw`, parsed as JSON when possible and as a
/// string otherwise. Every segment must name an existing key.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let so_far = parts[..=i].join(".");
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                // Unset optional section: materialize it and let the
                // typed parse judge the keys.
                *cur = Value::Object(Default::default());
                cur.as_object_mut().unwrap()
            }
            _ => return Err(Error::Config(vec![format!("override {path}: {} is not a section", parts[..i].join("."))])),
        };
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) && !obj.is_empty() {
                return Err(Error::Config(vec![format!("unknown config key: {so_far}")]));
            }
            obj.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        if !obj.contains_key(*part) && !obj.is_empty() {
            return Err(Error::Config(vec![format!("unknown config key: {so_far}")]));
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(Error::Config(vec![format!("override {s:?} is not of the form key=value")])),
    }
}

impl RunConfig {
    /// Parses a JSON document layered over the defaults, applies overrides,
    /// and reports every unknown key at once.
    pub fn from_value(given: Value, overrides: &[(String, String)]) -> Result<Self> {
        let reference = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&given, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(unknown.into_iter().map(|k| format!("unknown config key: {k}")).collect()));
        }
        let mut doc = reference;
        merge(&mut doc, given);
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(vec![e.to_string()]))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(vec![format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )]));
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let given = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(given, overrides)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every violated invariant across all sections.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.patch.violations());
        if self.patch.w != self.model.patch_len {
            v.push(format!(
                "patch.w ({}) must equal model.patch_len ({})",
                self.patch.w, self.model.patch_len
            ));
        }
        v.extend(self.preprocess.violations());
        v.extend(self.synth.violations());
        v.extend(self.pretrain.violations());
        v.extend(self.optim.violations());
        v.extend(self.schedule.violations());
        v.extend(self.probe.violations());
        v.extend(self.finetune.violations(self.model.dim));
        v.extend(self.flops.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
