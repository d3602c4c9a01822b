//! The flat JSON run configuration.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! command-line flags. Unknown keys in the file are rejected.

use std::path::Path;

use latent_rom::burgers::BurgersConfig;
use latent_rom::dataio::SamplingMode;
use latent_rom::idmodel::{LibrarySpec, TermKind};
use latent_rom::interp::{DistanceSpace, KnnConfig};
use latent_rom::training::TrainingConfig;
use latent_rom::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Parameter box, `[a, width]` lower and upper corners.
    pub param_lo: Vec<f64>,
    pub param_hi: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub train_sampling: SamplingMode,
    pub test_sampling: SamplingMode,
    /// Spread training trajectories over `multiscale_segments` grids.
    pub multiscale: bool,
    pub multiscale_segments: Vec<usize>,
    /// Test grid; defaults to `segments`, or the finest multiscale grid.
    pub test_segments: Option<usize>,

    pub reynolds: f64,
    pub domain: [f64; 2],
    pub segments: usize,
    pub t_final: f64,
    pub n_steps: usize,
    pub picard_tol: f64,
    pub max_sweeps: usize,

    pub latent_dim: usize,
    pub taylor_order: usize,
    pub library: Vec<TermKind>,

    #[serde(flatten)]
    pub training: TrainingConfig,

    pub knn_k: usize,
    pub knn_p: f64,
    pub knn_exact_match: f64,
    pub knn_space: DistanceSpace,

    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let burgers = BurgersConfig::default();
        let knn = KnnConfig::default();
        Self {
            param_lo: vec![0.7, 0.9],
            param_hi: vec![0.9, 1.1],
            n_train: 25,
            n_test: 225,
            train_sampling: SamplingMode::Random,
            test_sampling: SamplingMode::UniformGrid,
            multiscale: false,
            multiscale_segments: vec![50, 60, 70],
            test_segments: None,
            reynolds: burgers.reynolds,
            domain: burgers.domain,
            segments: burgers.segments,
            t_final: burgers.t_final,
            n_steps: burgers.n_steps,
            picard_tol: burgers.picard_tol,
            max_sweeps: burgers.max_sweeps,
            latent_dim: 5,
            taylor_order: 2,
            library: LibrarySpec::default().terms().to_vec(),
            training: TrainingConfig::default(),
            knn_k: knn.k,
            knn_p: knn.p,
            knn_exact_match: knn.exact_match,
            knn_space: knn.space,
            workers: 1,
        }
    }
}

/// Named parameter boxes.
pub fn domain_preset(name: &str) -> Result<([f64; 2], [f64; 2])> {
    match name {
        "d1" => Ok(([0.7, 0.9], [0.9, 1.1])),
        "d2" => Ok(([0.5, 0.5], [1.1, 1.5])),
        other => Err(Error::Spec(format!("unknown domain preset {other:?} (expected d1 or d2)"))),
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        let known = serde_json::to_value(Self::default()).expect("default config serialises");
        if let (Some(given), Some(known)) = (value.as_object(), known.as_object()) {
            let mut unknown: Vec<&String> = given.keys().filter(|k| !known.contains_key(*k)).collect();
            unknown.sort();
            if !unknown.is_empty() {
                return Err(Error::Spec(format!("unknown config keys in {}: {unknown:?}", path.display())));
            }
        }
        serde_json::from_value(value).map_err(|source| Error::Json { path: path.into(), source })
    }

    pub fn burgers(&self, segments: usize) -> BurgersConfig {
        BurgersConfig {
            reynolds: self.reynolds,
            domain: self.domain,
            segments,
            t_final: self.t_final,
            n_steps: self.n_steps,
            picard_tol: self.picard_tol,
            max_sweeps: self.max_sweeps,
        }
    }

    pub fn bounds(&self) -> Result<Vec<[f64; 2]>> {
        if self.param_lo.len() != self.param_hi.len() {
            return Err(Error::Spec("param_lo and param_hi differ in length".into()));
        }
        Ok(self.param_lo.iter().zip(&self.param_hi).map(|(&l, &h)| [l, h]).collect())
    }

    pub fn library(&self) -> Result<LibrarySpec> {
        LibrarySpec::new(&self.library)
    }

    pub fn knn(&self) -> KnnConfig {
        KnnConfig { k: self.knn_k, p: self.knn_p, exact_match: self.knn_exact_match, space: self.knn_space }
    }

    pub fn test_grid(&self) -> usize {
        self.test_segments.unwrap_or_else(|| {
            if self.multiscale {
                self.multiscale_segments.iter().copied().max().unwrap_or(self.segments)
            } else {
                self.segments
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds()?;
        self.burgers(self.segments).validate()?;
        self.training.validate()?;
        self.knn().validate()?;
        self.library()?;
        if self.workers == 0 {
            return Err(Error::Spec("workers must be at least 1".into()));
        }
        if self.multiscale && self.multiscale_segments.is_empty() {
            return Err(Error::Spec("multiscale_segments is empty".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serialises");
        std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
    }
}

/// Parse `"5"`, `"2,3,5"` or the inclusive range `"2..7"`.
pub fn parse_latent_dims(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Spec(format!("cannot parse latent dimensions {text:?}"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    let dims = text.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(bad());
    }
    Ok(dims)
}

pub fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Spec(format!("cannot parse number list {text:?}"))))
        .collect()
}
