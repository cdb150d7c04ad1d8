//! Checkpoints: a text manifest of the model spec and named parameter
//! shapes, plus a flat little-endian f64 blob of the parameters in manifest
//! order.

use std::path::Path;
use std::sync::Arc;

use i2i_tensor::Tensor;

use crate::error::{Error, Result};
use crate::harness::model::{Model, ModelSpec};
use crate::icogroup::IcoGroup;

pub const MANIFEST_FILE: &str = "model.txt";
pub const WEIGHTS_FILE: &str = "model.bin";
const HEADER: &str = "i2i-checkpoint 2";

pub fn manifest(model: &Model) -> String {
    let s = &model.spec;
    let mut lines = vec![
        HEADER.to_string(),
        format!("task = {}", s.task),
        format!("variant = {}", s.variant),
        format!("outputs = {}", s.outputs),
        format!("input_size = {}", s.input_size),
        format!("in_channels = {}", s.in_channels),
        format!("base_channels = {}", s.base_channels),
        format!("blocks = {}", s.blocks),
        format!("feature_n = {}", s.feature_n),
        format!("sigma = {}", s.sigma),
        format!("coverage = {}", s.coverage),
    ];
    for (name, t) in model.params() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        lines.push(format!("param {name} {}", dims.join(" ")));
    }
    lines.join("\n") + "\n"
}

pub fn weights(model: &Model) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * model.num_params());
    for (_, t) in model.params() {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Rebuilds a model from manifest text and weight bytes.
pub fn decode(manifest: &str, weights: &[u8], group: Arc<IcoGroup>, path: &Path) -> Result<Model> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = manifest.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(format!("expected header '{HEADER}'")));
    }
    let mut kv = std::collections::HashMap::new();
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("param ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("param line without a name".into()))?;
            let dims = parts
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension '{d}'"))))
                .collect::<Result<Vec<_>>>()?;
            shapes.push((name.to_string(), dims));
        } else if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim().to_string(), v.trim().to_string());
        } else {
            return Err(bad(format!("unreadable line '{line}'")));
        }
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key '{k}'")));
    fn num<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
        v.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad value for {k}: '{v}'"),
        })
    }
    let spec = ModelSpec {
        task: get("task")?.parse()?,
        variant: get("variant")?.parse()?,
        outputs: num(get("outputs")?, "outputs", path)?,
        input_size: num(get("input_size")?, "input_size", path)?,
        in_channels: num(get("in_channels")?, "in_channels", path)?,
        base_channels: num(get("base_channels")?, "base_channels", path)?,
        blocks: num(get("blocks")?, "blocks", path)?,
        feature_n: num(get("feature_n")?, "feature_n", path)?,
        sigma: num(get("sigma")?, "sigma", path)?,
        coverage: num(get("coverage")?, "coverage", path)?,
    };
    let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if weights.len() != 8 * total {
        return Err(bad(format!(
            "weights hold {} bytes, manifest needs {}",
            weights.len(),
            8 * total
        )));
    }
    let mut values = weights
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let params = shapes
        .iter()
        .map(|(_, s)| {
            let n = s.iter().product();
            Tensor::from_vec(s.clone(), values.by_ref().take(n).collect()).map_err(Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_params(spec, group, params).map_err(|e| bad(e.to_string()))?;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    if names.iter().ne(shapes.iter().map(|(n, _)| n)) {
        return Err(bad(format!("parameter names {:?} do not match the model", shapes.iter().map(|(n, _)| n).collect::<Vec<_>>())));
    }
    Ok(model)
}

pub fn save(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = dir.join(MANIFEST_FILE);
    std::fs::write(&m, manifest(model)).map_err(|e| Error::io(&m, e))?;
    let w = dir.join(WEIGHTS_FILE);
    std::fs::write(&w, weights(model)).map_err(|e| Error::io(&w, e))
}

pub fn load(dir: &Path, group: Arc<IcoGroup>) -> Result<Model> {
    let m = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let w = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&w).map_err(|e| Error::io(&w, e))?;
    decode(&text, &bytes, group, dir)
}
