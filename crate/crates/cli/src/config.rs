//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]` and
//! `[teacher]` sections plus a few top-level keys.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mimic_mae::data::ToySpec;
use mimic_mae::model::{MaskingMode, ModelConfig};
use mimic_mae::teacher::TeacherConfig;
use mimic_mae::trainer::{AblationMode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const STAMP_CONFIG: &str = "config.toml";
pub const STAMP_DIGEST: &str = "config.sha256";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: AblationMode,
    pub seed: u64,
    /// Directory for run artifacts.
    pub output: PathBuf,
    /// Toy dataset directory written by `gen-data`.
    pub data_dir: PathBuf,
    /// Trained teacher parameters; `<data_dir>/teacher.mrmc` when unset.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Precomputed teacher signals; `<data_dir>/features.mrtf` when unset.
    pub features: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: ToySpec,
    pub teacher: TeacherConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::MrMae,
            seed: 0,
            output: "runs/default".into(),
            data_dir: "data".into(),
            teacher_checkpoint: None,
            features: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: ToySpec::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Canonical text: every key, defaults filled in, fixed order.
    pub fn canonical(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.canonical()?.as_bytes()).into())
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.teacher_checkpoint.clone().unwrap_or_else(|| self.data_dir.join("teacher.mrmc"))
    }

    pub fn features_path(&self) -> PathBuf {
        self.features.clone().unwrap_or_else(|| self.data_dir.join("features.mrtf"))
    }

    /// Digest of the settings a trained teacher depends on.
    pub fn teacher_digest(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        h.update(toml::to_string(&self.teacher)?.as_bytes());
        h.update(toml::to_string(&self.data)?.as_bytes());
        Ok(h.finalize().into())
    }

    pub fn needs_teacher(&self) -> bool {
        self.mode.uses_teacher_features() || self.model.masking_mode == MaskingMode::Focused
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.image_size != self.data.image_size {
            bail!(
                "model.image_size {} differs from data.image_size {}",
                self.model.image_size,
                self.data.image_size
            );
        }
        if self.teacher.image_size != self.data.image_size || self.teacher.classes != self.data.classes {
            bail!("teacher image size and classes must match the dataset");
        }
        if self.needs_teacher() {
            if self.teacher.dim != self.model.teacher_dim {
                bail!("teacher.dim {} differs from model.teacher_dim {}", self.teacher.dim, self.model.teacher_dim);
            }
            if self.teacher.image_size / self.teacher.patch_size != self.model.grid_side() {
                bail!("teacher and student token grids differ");
            }
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest recorded in `dir`, if any.
pub fn stamped_digest(dir: &Path) -> Result<Option<String>> {
    let path = dir.join(STAMP_DIGEST);
    match fs::read_to_string(&path) {
        Ok(s) => Ok(Some(s.trim().to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

/// Prepare `dir` for artifacts of `cfg`. A non-empty directory stamped with
/// another digest (or not stamped at all) is refused unless `force`.
pub fn claim_dir(dir: &Path, cfg: &RunConfig, force: bool) -> Result<()> {
    let digest = hex(&cfg.digest()?);
    let occupied = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if occupied && !force {
        match stamped_digest(dir)? {
            Some(d) if d == digest => {}
            Some(d) => bail!(
                "{} holds artifacts of config {d}, not {digest}; pass --force to overwrite",
                dir.display()
            ),
            None => bail!("{} is not empty and carries no config stamp; pass --force to use it", dir.display()),
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join(STAMP_CONFIG), cfg.canonical()?.as_bytes())?;
    write(&dir.join(STAMP_DIGEST), format!("{digest}\n").as_bytes())
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.canonical().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sede = 3").is_err());
        assert!(RunConfig::parse("[train]\nlr = 0.1").is_err());
        assert!(RunConfig::parse("[model]\nembed_dim = 64").is_ok());
    }

    #[test]
    fn digest_ignores_formatting_but_not_values() {
        let a = RunConfig::parse("seed = 1\n[train]\nsteps = 10\n").unwrap();
        let b = RunConfig::parse("[train]\n# comment\nsteps   = 10\n\n[data]\n").unwrap();
        let b = RunConfig { seed: 1, ..b };
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = RunConfig { seed: 2, ..a.clone() };
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn conv_stages_serialize() {
        let mut c = RunConfig::default();
        c.model.conv_stages = ModelConfig::desk_conv_stages();
        let text = c.canonical().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn claim_refuses_foreign_digest() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunConfig::default();
        claim_dir(dir.path(), &a, false).unwrap();
        claim_dir(dir.path(), &a, false).unwrap();
        let b = RunConfig { seed: 9, ..a };
        assert!(claim_dir(dir.path(), &b, false).is_err());
        claim_dir(dir.path(), &b, true).unwrap();
        assert_eq!(stamped_digest(dir.path()).unwrap().unwrap(), hex(&b.digest().unwrap()));
    }
}
