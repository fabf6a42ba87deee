//! On-disk formats: tensor bundles, run manifests and reports.

pub mod bundle;
pub mod manifest;
pub mod report;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde_json::json;

pub use bundle::{BundleManifest, DType, TensorBundle, TensorEntry};
pub use manifest::{LoadedRun, OutputPaths, RunManifest};

use crate::adapters::{AdapterSet, LoraAdapter};
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelInstance};
use crate::numerics::Matrix;

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // tempfile creates 0600; results are ordinary files
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn kind_of(bundle: &TensorBundle) -> Option<&str> {
    bundle.metadata_str("kind")
}

fn expect_kind(bundle: &TensorBundle, kinds: &[&str], origin: &Path) -> Result<()> {
    match kind_of(bundle) {
        Some(k) if kinds.contains(&k) => Ok(()),
        other => Err(Error::format(
            origin,
            format!("expected a {} bundle, found kind {other:?}", kinds.join(" or ")),
        )),
    }
}

pub fn base_to_bundle(base: &ModelInstance) -> TensorBundle {
    let mut b = TensorBundle::new();
    for (name, m) in base.params() {
        b.insert(name.clone(), m.clone());
    }
    b.set_metadata("kind", json!("base"));
    b
}

pub fn base_from_bundle(graph: Arc<ModelGraph>, bundle: &TensorBundle, origin: &Path) -> Result<ModelInstance> {
    expect_kind(bundle, &["base"], origin)?;
    let params: BTreeMap<String, Matrix> = bundle
        .names()
        .map(|n| (n.to_string(), bundle.get(n).expect("listed").clone()))
        .collect();
    ModelInstance::base(graph, params).map_err(|e| e.context(origin.display().to_string()))
}

fn low_rank_bundle(adapters: &[LoraAdapter], kind: &str) -> TensorBundle {
    let mut b = TensorBundle::new();
    let mut sites = Vec::new();
    for a in adapters {
        let j = a.site().index;
        b.insert(format!("site{j}.down"), a.down().clone());
        b.insert(format!("site{j}.up"), a.up().clone());
        sites.push(json!({"index": j, "label": a.site().label, "rank": a.rank(), "scale": a.scale()}));
    }
    b.set_metadata("kind", json!(kind));
    b.set_metadata("sites", json!(sites));
    b
}

pub fn adapters_to_bundle(set: &AdapterSet) -> TensorBundle {
    let mut b = low_rank_bundle(&set.adapters, "adapters");
    b.set_metadata("task", json!(set.task));
    b
}

fn site_scales(bundle: &TensorBundle, origin: &Path) -> Result<BTreeMap<usize, f64>> {
    let sites = bundle
        .metadata()
        .get("sites")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::format(origin, "metadata lacks the 'sites' list"))?;
    let mut out = BTreeMap::new();
    for s in sites {
        let index = s.get("index").and_then(|v| v.as_u64());
        let scale = s.get("scale").and_then(|v| v.as_f64());
        match (index, scale) {
            (Some(i), Some(scale)) => {
                out.insert(i as usize, scale);
            }
            _ => return Err(Error::format(origin, format!("malformed site entry {s}"))),
        }
    }
    Ok(out)
}

fn low_rank_from_bundle(graph: &ModelGraph, bundle: &TensorBundle, origin: &Path) -> Result<Vec<LoraAdapter>> {
    let scales = site_scales(bundle, origin)?;
    graph
        .sites()
        .iter()
        .map(|site| {
            let j = site.index;
            let down = bundle.require(&format!("site{j}.down"), origin)?;
            let up = bundle.require(&format!("site{j}.up"), origin)?;
            let scale = *scales
                .get(&j)
                .ok_or_else(|| Error::format(origin, format!("no scale recorded for site {j}")))?;
            let a = LoraAdapter::new(site.clone(), down.clone(), up.clone(), scale)
                .map_err(|e| e.context(origin.display().to_string()))?;
            if (a.d_in(), a.d_out()) != graph.site_shape(j) {
                return Err(Error::Shape(format!(
                    "{}: adapter for {site} maps {} -> {}, graph expects {:?}",
                    origin.display(),
                    a.d_in(),
                    a.d_out(),
                    graph.site_shape(j)
                )));
            }
            Ok(a)
        })
        .collect()
}

pub fn adapters_from_bundle(graph: &ModelGraph, bundle: &TensorBundle, task: usize, origin: &Path) -> Result<AdapterSet> {
    expect_kind(bundle, &["adapters"], origin)?;
    let set = AdapterSet::new(task, low_rank_from_bundle(graph, bundle, origin)?);
    set.check_covers(graph).map_err(|e| e.context(origin.display().to_string()))?;
    Ok(set)
}

/// Samples as one `inputs` tensor, `d × (samples · positions)`.
pub fn samples_to_bundle(inputs: &Matrix, positions: usize) -> TensorBundle {
    let mut b = TensorBundle::new();
    b.insert("inputs", inputs.clone());
    b.set_metadata("kind", json!("samples"));
    b.set_metadata("positions", json!(positions));
    b
}

pub fn samples_from_bundle(graph: &ModelGraph, bundle: &TensorBundle, origin: &Path) -> Result<Matrix> {
    expect_kind(bundle, &["samples"], origin)?;
    let x = bundle.require("inputs", origin)?;
    if x.rows() != graph.input_width() || x.cols() % graph.positions() != 0 {
        return Err(Error::Shape(format!(
            "{}: inputs are {}x{}, graph expects {} rows and a multiple of {} columns",
            origin.display(),
            x.rows(),
            x.cols(),
            graph.input_width(),
            graph.positions()
        )));
    }
    Ok(x.clone())
}

/// Merged deltas, dense (`site{j}.delta`) or refactored to low rank.
pub fn merged_to_bundle(merged: &ModelInstance, rank: Option<usize>) -> Result<TensorBundle> {
    let graph = merged.graph();
    let mut b = match rank {
        None => {
            let mut b = TensorBundle::new();
            for (j, d) in merged.deltas().iter().enumerate() {
                b.insert(format!("site{j}.delta"), d.clone());
            }
            let labels: Vec<_> = graph.sites().iter().map(|s| json!({"index": s.index, "label": s.label})).collect();
            b.set_metadata("sites", json!(labels));
            b.set_metadata("kind", json!("merged"));
            b
        }
        Some(r) => {
            let adapters = graph
                .sites()
                .iter()
                .map(|s| {
                    let (d_in, d_out) = graph.site_shape(s.index);
                    crate::adapters::refactor_low_rank(s.clone(), merged.delta(s.index), r.min(d_in.min(d_out)))
                })
                .collect::<Result<Vec<_>>>()?;
            low_rank_bundle(&adapters, "merged")
        }
    };
    b.set_metadata("format", json!(if rank.is_some() { "low_rank" } else { "dense" }));
    Ok(b)
}

pub fn merged_from_bundle(base: &ModelInstance, bundle: &TensorBundle, origin: &Path) -> Result<ModelInstance> {
    expect_kind(bundle, &["merged", "adapters"], origin)?;
    let graph = base.graph();
    let deltas = if bundle.get("site0.delta").is_some() {
        (0..graph.site_count())
            .map(|j| bundle.require(&format!("site{j}.delta"), origin).cloned())
            .collect::<Result<Vec<_>>>()?
    } else {
        low_rank_from_bundle(graph, bundle, origin)?
            .iter()
            .map(LoraAdapter::delta)
            .collect()
    };
    base.with_deltas(deltas).map_err(|e| e.context(origin.display().to_string()))
}
