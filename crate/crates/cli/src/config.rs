//! Per-scan pipeline configuration and JSON loading with field-level errors.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use toothmatch::cmr::DEFAULT_THRESHOLD;
use toothmatch::encoder::DEFAULT_K;
use toothmatch::fhm::MatchConfig;
use toothmatch::projection::DEFAULT_IMAGE_SIZE;

use crate::error::{CliError, CliResult, EXIT_SCHEMA};

fn default_image_size() -> (usize, usize) {
    DEFAULT_IMAGE_SIZE
}

fn default_grid_size() -> (usize, usize) {
    (64, 64)
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_smoothing() -> f64 {
    1.5
}

/// Paths are relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub scan_id: Option<String>,
    pub mesh: PathBuf,
    pub sidecar: PathBuf,
    /// Falls back to the labels of the mesh sidecar.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// Defaults to `prediction.json` in the output directory.
    #[serde(default)]
    pub prediction: Option<PathBuf>,
    /// Weight bundle directory; seeded weights when absent.
    #[serde(default)]
    pub weights: Option<PathBuf>,
    /// `C x H' x W'` tensor; a label-derived synthetic grid when absent.
    #[serde(default)]
    pub embedding_grid: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_image_size")]
    pub image_size: (usize, usize),
    #[serde(default = "default_grid_size")]
    pub grid_size: (usize, usize),
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub matching: MatchConfig,
    /// Guidance width in pixels; 2% of the shorter image side when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Smoothing of the synthetic embedding grid, in grid cells.
    #[serde(default = "default_smoothing")]
    pub embed_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::schema(format!("config: {m}")));
        for (name, (h, w)) in [
            ("image_size", self.image_size),
            ("grid_size", self.grid_size),
        ] {
            if h < 2 || w < 2 {
                return bad(format!("{name} {h}x{w} must be at least 2x2"));
            }
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma {s} must be positive"));
            }
        }
        if !(self.embed_smoothing >= 0.0 && self.embed_smoothing.is_finite()) {
            return bad(format!(
                "embed_smoothing {} must be >= 0",
                self.embed_smoothing
            ));
        }
        self.matching.validate()?;
        Ok(())
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }
}

/// A config together with the directory its relative paths start from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> CliResult<Self> {
        let config: PipelineConfig = read_json(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn output(&self, file: &str) -> PathBuf {
        self.output_dir().join(file)
    }

    pub fn scan_id(&self) -> String {
        self.config.scan_id.clone().unwrap_or_else(|| {
            self.config
                .mesh
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

/// Reads JSON, naming the offending field on schema errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_json(&text, &path.display().to_string())
}

pub fn parse_json<T: DeserializeOwned>(text: &str, context: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError {
            code: EXIT_SCHEMA,
            message: format!("{context}: field `{field}`: {}", e.inner()),
        }
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::schema(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"mesh": "a.ply", "sidecar": "a.json", "output_dir": "out"}"#;

    #[test]
    fn defaults_fill_in() {
        let c: PipelineConfig = parse_json(MINIMAL, "t").unwrap();
        assert_eq!(c.k, 32);
        assert_eq!(c.image_size, (1024, 1024));
        assert_eq!(c.matching, MatchConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn errors_name_the_field() {
        let text = r#"{"mesh": "a.ply", "sidecar": "a.json", "output_dir": "o", "matching": {"lambda_ord": "x"}}"#;
        let e = parse_json::<PipelineConfig>(text, "t").unwrap_err();
        assert_eq!(e.code, EXIT_SCHEMA);
        assert!(e.message.contains("matching.lambda_ord"), "{}", e.message);
    }

    #[test]
    fn hash_tracks_content() {
        let a: PipelineConfig = parse_json(MINIMAL, "t").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.matching.lambda_ord = 0.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_paths_start_at_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, MINIMAL).unwrap();
        let l = Loaded::read(&path).unwrap();
        assert_eq!(l.resolve(&l.config.mesh), dir.path().join("a.ply"));
        assert_eq!(l.scan_id(), "a");
    }
}
