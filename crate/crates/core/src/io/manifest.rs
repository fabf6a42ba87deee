//! Run manifests: which files make up a merge problem and where results go.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{adapters_from_bundle, base_from_bundle, samples_from_bundle, TensorBundle};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelInstance};
use crate::harness::MergeProblem;
use crate::merging::MergeConfig;
use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    pub merged: PathBuf,
    pub report: PathBuf,
}

/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub graph: PathBuf,
    pub base: PathBuf,
    pub adapters: Vec<PathBuf>,
    pub samples: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub config: MergeConfig,
    pub output: OutputPaths,
    #[serde(skip)]
    root: PathBuf,
}

/// A manifest with every file loaded and validated.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub graph: Arc<ModelGraph>,
    pub base: ModelInstance,
    pub adapters: Vec<AdapterSet>,
    pub samples: Vec<Matrix>,
    pub holdout: Option<Vec<Matrix>>,
}

impl LoadedRun {
    pub fn task_models(&self) -> Result<Vec<ModelInstance>> {
        self.adapters.iter().map(|a| a.instantiate(&self.base)).collect()
    }

    /// The run as a merge problem; without held-out bundles the merge-time
    /// samples stand in for them.
    pub fn problem(&self) -> Result<MergeProblem> {
        Ok(MergeProblem {
            base: self.base.clone(),
            tasks: self.task_models()?,
            inputs: self.samples.clone(),
            holdout: self.holdout.clone().unwrap_or_else(|| self.samples.clone()),
        })
    }
}

impl RunManifest {
    pub fn new(
        graph: PathBuf,
        base: PathBuf,
        adapters: Vec<PathBuf>,
        samples: Vec<PathBuf>,
        config: MergeConfig,
        output: OutputPaths,
    ) -> Self {
        Self {
            graph,
            base,
            adapters,
            samples,
            holdout: None,
            config,
            output,
            root: PathBuf::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()
            .map_err(|e| e.context(format!("manifest {}", path.display())))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapters.is_empty() {
            return Err(Error::Config("no adapter bundles listed".into()));
        }
        if self.adapters.len() != self.samples.len() {
            return Err(Error::Config(format!(
                "{} adapter bundles but {} sample bundles",
                self.adapters.len(),
                self.samples.len()
            )));
        }
        if let Some(h) = &self.holdout {
            if h.len() != self.adapters.len() {
                return Err(Error::Config(format!(
                    "{} adapter bundles but {} holdout bundles",
                    self.adapters.len(),
                    h.len()
                )));
            }
        }
        self.config.validate(self.adapters.len())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn tasks(&self) -> usize {
        self.adapters.len()
    }

    /// Reads every referenced file, checking each against the graph.
    pub fn load_run(&self) -> Result<LoadedRun> {
        let graph = Arc::new(ModelGraph::load(&self.resolve(&self.graph))?);
        let base_path = self.resolve(&self.base);
        let base = base_from_bundle(Arc::clone(&graph), &TensorBundle::read(&base_path)?, &base_path)?;
        let adapters = self
            .adapters
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let p = self.resolve(p);
                adapters_from_bundle(&graph, &TensorBundle::read(&p)?, n, &p)
            })
            .collect::<Result<Vec<_>>>()?;
        let load_samples = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| {
                    let p = self.resolve(p);
                    samples_from_bundle(&graph, &TensorBundle::read(&p)?, &p)
                })
                .collect::<Result<Vec<_>>>()
        };
        let samples = load_samples(&self.samples)?;
        let holdout = self.holdout.as_deref().map(load_samples).transpose()?;
        Ok(LoadedRun {
            graph,
            base,
            adapters,
            samples,
            holdout,
        })
    }
}
