use std::path::{Path, PathBuf};

use intlower::export::ExportConfig;
use intlower::fuse::FuseConfig;
use intlower::quant::QConfig;
use intlower::sparsity::SparsityConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io, CliError};

fn d_samples() -> usize {
    64
}
fn d_max_lsb() -> f64 {
    2.0
}
fn d_agreement() -> f64 {
    0.98
}

/// Tolerances the lowered graph must meet against the fake-quant graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random inputs drawn from the pipeline seed when no data is given.
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default = "d_max_lsb")]
    pub max_lsb: f64,
    #[serde(default = "d_agreement")]
    pub min_agreement: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            samples: d_samples(),
            data: None,
            max_lsb: d_max_lsb(),
            min_agreement: d_agreement(),
        }
    }
}

fn d_calib_batches() -> usize {
    4
}
fn d_calib_batch_size() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: PathBuf,
    /// Directory of calibration batches; synthesized from `seed` when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_data: Option<PathBuf>,
    #[serde(default = "d_calib_batches")]
    pub calib_batches: usize,
    #[serde(default = "d_calib_batch_size")]
    pub calib_batch_size: usize,
    #[serde(default)]
    pub quant: QConfig,
    #[serde(default)]
    pub fuse: FuseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsityConfig>,
    #[serde(default)]
    pub export: ExportConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
}

impl PipelineConfig {
    pub fn check(&self) -> Result<(), CliError> {
        if let Some(s) = &self.sparsity {
            s.check()?;
        }
        if self.export.words_per_line == 0 {
            return Err(CliError::Config("export.words_per_line must be at least 1".into()));
        }
        if self.calib_data.is_none() && (self.calib_batches == 0 || self.calib_batch_size == 0) {
            return Err(CliError::Config("calibration needs at least one batch".into()));
        }
        if !(0.0..=1.0).contains(&self.verify.min_agreement) || self.verify.max_lsb < 0.0 {
            return Err(CliError::Config("verify tolerances out of range".into()));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

const PATH_KEYS: [&[&str]; 4] = [&["model"], &["calib_data"], &["out"], &["verify", "data"]];

/// Reads a JSON config; relative paths inside it resolve against the
/// file's directory.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read(path).map_err(|e| io(path, e))?;
    let mut v: Value = serde_json::from_slice(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Config(format!("{}: expected a JSON object", path.display())));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    for keys in PATH_KEYS {
        let mut slot = Some(&mut v);
        for k in keys {
            slot = slot.and_then(|s| s.get_mut(*k));
        }
        if let Some(Value::String(s)) = slot {
            let p = Path::new(s.as_str());
            if p.is_relative() {
                *s = base.join(p).to_string_lossy().into_owned();
            }
        }
    }
    Ok(v)
}

/// Builds the effective configuration: command-line values first, then
/// the config file on top.
pub fn resolve(flags: Map<String, Value>, file: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let mut v = Value::Object(flags);
    if let Some(path) = file {
        merge(&mut v, read_config_file(path)?);
    }
    strip_nulls(&mut v);
    let cfg: PipelineConfig = serde_json::from_value(v).map_err(|e| CliError::Config(format!("pipeline config: {e}")))?;
    cfg.check()?;
    Ok(cfg)
}

fn strip_nulls(v: &mut Value) {
    if let Value::Object(m) = v {
        m.retain(|_, x| !x.is_null());
        m.values_mut().for_each(strip_nulls);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn file_overrides_flags_and_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"model": "m.zip", "fuse": {"frac_bits": 0}}"#).unwrap();
        let flags = json!({"model": "/elsewhere", "out": "/tmp/o", "fuse": {"int_bits": 6}, "seed": 3});
        let Value::Object(flags) = flags else { unreachable!() };
        let cfg = resolve(flags, Some(&file)).unwrap();
        assert_eq!(cfg.model, dir.path().join("m.zip"));
        assert_eq!((cfg.fuse.int_bits, cfg.fuse.frac_bits), (6, 0));
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let Value::Object(flags) = json!({"model": "m", "out": "o", "colour": 1}) else { unreachable!() };
        assert_eq!(resolve(flags, None).unwrap_err().code(), 2);
    }
}
