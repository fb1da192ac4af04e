//! Run configuration: one JSON document with `model`, `train`, `infer`,
//! `eval` and `seed`. Unknown keys are rejected; omitted keys take the
//! preset's values.

use std::path::Path;

use ovseg_core::config::{EvalConfig, LgaConfig, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: LgaConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            infer: LgaConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }

    pub fn paper() -> Self {
        RunConfig { train: TrainConfig::paper(), ..Self::desk() }
    }

    pub fn preset(name: &str) -> CliResult<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(invalid(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    /// Parses `text` over `base`. Syntax, type and unknown-key errors carry
    /// the line and column in `origin`.
    pub fn parse_over(base: &RunConfig, text: &str, origin: &Path) -> CliResult<Self> {
        let anchored = |e: serde_json::Error| CliError::ConfigSyntax {
            path: origin.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: strip_position(&e.to_string()),
        };
        serde_json::from_str::<RunConfig>(text).map_err(anchored)?;
        let layer: Value = serde_json::from_str(text).map_err(anchored)?;
        let mut merged = serde_json::to_value(base).expect("configs serialize");
        merge(&mut merged, layer);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| invalid(format!("{}: {e}", origin.display())))?;
        cfg.validate().map_err(|e| invalid(format!("{}: {e}", origin.display())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_over(base, &text, path)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate(self.model.encoder.patch_size)?;
        self.infer.validate()?;
        self.eval.validate()?;
        if self.infer.resize % self.model.encoder.patch_size != 0 {
            return Err(invalid(format!(
                "infer.resize ({}) must be a multiple of the patch size ({})",
                self.infer.resize, self.model.encoder.patch_size
            )));
        }
        Ok(())
    }

    /// Sets the dotted `key` (for example `train.iters`) to `value`, read
    /// as JSON when it parses and as a string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let mut root = serde_json::to_value(&*self).expect("configs serialize");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| invalid(format!("unknown config key `{key}`")))?;
        }
        if slot.is_object() {
            return Err(invalid(format!("`{key}` is a section, not a value")));
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| invalid(format!("--{key} {value}: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> CliResult<()> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()
    }
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Splits `--section.key value` pairs out of an argument list, leaving
/// everything else in order.
pub fn extract_overrides(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--").filter(|k| k.contains('.') && !k.contains('=')) {
            Some(key) => {
                let value = it.next().ok_or_else(|| invalid(format!("--{key} needs a value")))?;
                overrides.push((key.to_string(), value));
            }
            None => match a.strip_prefix("--").and_then(|k| k.split_once('=')).filter(|(k, _)| k.contains('.')) {
                Some((key, value)) => overrides.push((key.to_string(), value.to_string())),
                None => rest.push(a),
            },
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<RunConfig> {
        RunConfig::parse_over(&RunConfig::desk(), text, Path::new("run.json"))
    }

    #[test]
    fn presets_differ_only_in_schedule() {
        let (d, p) = (RunConfig::desk(), RunConfig::paper());
        assert_eq!(d.model, p.model);
        assert_eq!(p.train.lr_backbone, 2e-6);
        assert_eq!(p.train.iters, 80_000);
        assert_eq!(d.train.lr_backbone, 1e-4);
        assert_eq!(p.train.loss.lambda, 0.05);
        assert_eq!(p.train.loss.gamma, 2.0);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn partial_file_keeps_preset_values() {
        let cfg = RunConfig::parse_over(&RunConfig::paper(), r#"{"train": {"batch": 2}, "seed": 9}"#, Path::new("x"))
            .unwrap();
        assert_eq!(cfg.train.batch, 2);
        assert_eq!(cfg.train.iters, 80_000);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_point_at_the_line() {
        let err = parse("{\n  \"train\": {\n    \"itres\": 5\n  }\n}").unwrap_err();
        match &err {
            CliError::ConfigSyntax { line, message, .. } => {
                assert_eq!(*line, 3);
                assert!(message.contains("itres"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().starts_with("run.json:3:"));
        assert!(matches!(parse("{\n\"seed\": \"x\"}"), Err(CliError::ConfigSyntax { line: 2, .. })));
        assert!(matches!(parse("{ \"seed\": 1,"), Err(CliError::ConfigSyntax { .. })));
    }

    #[test]
    fn semantic_errors_are_invalid() {
        let err = parse(r#"{"infer": {"window": 700}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = parse(r#"{"model": {"corr_channels": 3}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn dotted_overrides() {
        let mut cfg = RunConfig::desk();
        cfg.set("train.iters", "12").unwrap();
        cfg.set("infer.lga_vlm", "false").unwrap();
        cfg.set("model.encoder.vision_backbone", "linear_patch").unwrap();
        assert_eq!(cfg.train.iters, 12);
        assert!(!cfg.infer.lga_vlm);
        assert!(cfg.set("train.nope", "1").is_err());
        assert!(cfg.set("train", "1").is_err());
        assert!(cfg.set("train.iters", "many").is_err());
    }

    #[test]
    fn override_extraction() {
        let args = ["train", "--out", "d", "--train.iters", "3", "--seed", "4", "--eval.folds=3"];
        let (rest, ov) = extract_overrides(args.iter().map(|s| s.to_string()).collect()).unwrap();
        assert_eq!(rest, vec!["train", "--out", "d", "--seed", "4"]);
        assert_eq!(ov, vec![("train.iters".into(), "3".into()), ("eval.folds".into(), "3".into())]);
        assert!(extract_overrides(vec!["--train.iters".into()]).is_err());
    }
}
