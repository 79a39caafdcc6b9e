//! Config resolution: defaults, then the `--config` file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fmini_core::numerics::PrecisionMode;
use fmini_core::trainer::TrainConfig;
use serde::de::DeserializeOwned;

/// Flag values that override the training config file.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub chunk_size: Option<usize>,
    pub zero_workers: Option<usize>,
    pub precision: Option<String>,
    pub stage1_steps: Option<u64>,
    pub stage2_steps: Option<u64>,
    pub high_res_steps: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))
}

/// Resolves and validates a training config.
pub fn parse_train_config(path: Option<&Path>, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::parse_json(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = o.chunk_size {
        cfg.chunk_size = v;
    }
    if let Some(v) = o.zero_workers {
        cfg.zero_workers = v;
    }
    if let Some(v) = &o.precision {
        cfg.precision = v.parse::<PrecisionMode>().map_err(anyhow::Error::msg)?;
    }
    if let Some(v) = o.stage1_steps {
        cfg.stage1_steps = v;
    }
    if let Some(v) = o.stage2_steps {
        cfg.stage2_steps = v;
    }
    if let Some(v) = o.high_res_steps {
        cfg.high_res_steps = v;
    }
    if let Some(v) = &o.out_dir {
        cfg.out_dir = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Any other JSON config: an empty file or no file means all defaults, and
/// unknown keys are rejected.
pub fn parse_json_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = read(p)?;
    if text.trim().is_empty() {
        return Ok(T::default());
    }
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
}

/// `--ks` values must be positive and no larger than `limit`.
pub fn check_ks(ks: &[usize], limit: usize) -> Result<()> {
    if ks.is_empty() {
        bail!("--ks needs at least one value");
    }
    if let Some(k) = ks.iter().find(|&&k| k == 0 || k > limit) {
        bail!("k = {k} is outside 1..={limit}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = file("");
        let cfg = parse_train_config(Some(f.path()), &TrainOverrides::default()).unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    #[test]
    fn flags_override_the_file() {
        let f = file(r#"{"batch_size": 64, "chunk_size": 16}"#);
        let o = TrainOverrides { batch_size: Some(32), ..Default::default() };
        assert_eq!(parse_train_config(Some(f.path()), &o).unwrap().batch_size, 32);
    }

    #[test]
    fn overrides_apply_before_validation() {
        let f = file(r#"{"batch_size": 8, "chunk_size": 3}"#);
        assert!(parse_train_config(Some(f.path()), &TrainOverrides::default()).is_err());
        let o = TrainOverrides { chunk_size: Some(4), ..Default::default() };
        assert_eq!(parse_train_config(Some(f.path()), &o).unwrap().chunk_size, 4);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let f = file(r#"{"optimizer": {"lrr": 1}}"#);
        let e = parse_train_config(Some(f.path()), &TrainOverrides::default()).unwrap_err();
        assert!(format!("{e:#}").contains("lrr"), "{e:#}");
    }

    #[test]
    fn precision_flag_values() {
        for (flag, mode) in [("full", PrecisionMode::Full), ("half-emulated", PrecisionMode::EmulatedHalf)] {
            let o = TrainOverrides { precision: Some(flag.into()), ..Default::default() };
            assert_eq!(parse_train_config(None, &o).unwrap().precision, mode);
        }
        let o = TrainOverrides { precision: Some("quarter".into()), ..Default::default() };
        assert!(parse_train_config(None, &o).is_err());
    }
}
