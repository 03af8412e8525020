//! `LayerNames.txt` and `OpsNames.txt`.
//!
//! Both files hold one `key: value` entry per line. The layer file maps each
//! layer with variables to `<layer>/<variable>`, in graph order. The ops file
//! names the graph endpoints under the keys `input`, `output`, `sample` and
//! `accuracy`.

use std::fs;
use std::path::Path;

use crate::error::{BnnError, Result};
use crate::layers::ModelGraph;
use crate::scalar::Scalar;

pub const LAYER_NAMES_FILE: &str = "LayerNames.txt";
pub const OPS_NAMES_FILE: &str = "OpsNames.txt";

const OPS_KEYS: [&str; 4] = ["input", "output", "sample", "accuracy"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// `(layer, "<layer>/<variable>")`.
    pub layers: Vec<(String, String)>,
    pub ops: Vec<(String, String)>,
}

impl Manifest {
    pub fn from_graph<T: Scalar>(g: &ModelGraph<T>) -> Self {
        let layers = g
            .param_ids()
            .into_iter()
            .map(|id| (g.layers()[id.layer].name.clone(), g.param_name(id)))
            .collect();
        let output = g.layers().last().map_or("input", |l| l.name.as_str()).to_string();
        let ops = vec![
            ("input".to_string(), "input".to_string()),
            ("output".to_string(), output),
            ("sample".to_string(), "flipout_sample".to_string()),
            ("accuracy".to_string(), "predictive_mean_accuracy".to_string()),
        ];
        Self { layers, ops }
    }

    /// Every listed variable must exist in `g`.
    pub fn check_against<T: Scalar>(&self, g: &ModelGraph<T>) -> Result<()> {
        for (layer, var) in &self.layers {
            if !var.starts_with(&format!("{layer}/")) || g.param_by_name(var).is_none() {
                return Err(BnnError::Consistency(format!("manifest variable {var} not found in checkpoint")));
            }
        }
        Ok(())
    }

    pub fn op(&self, key: &str) -> Option<&str> {
        self.ops.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn render(entries: &[(String, String)]) -> String {
        entries.iter().map(|(k, v)| format!("{k}: {v}\n")).collect()
    }
}

pub fn write_manifest<T: Scalar>(g: &ModelGraph<T>, dir: &Path) -> Result<Manifest> {
    let m = Manifest::from_graph(g);
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LAYER_NAMES_FILE), Manifest::render(&m.layers))?;
    fs::write(dir.join(OPS_NAMES_FILE), Manifest::render(&m.ops))?;
    Ok(m)
}

fn parse_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => BnnError::NotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    let file = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let parse = |reason: &str| BnnError::Parse {
                file: file.clone(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (k, v) = line.split_once(": ").ok_or_else(|| parse("expected `key: value`"))?;
            if k.is_empty() || v.is_empty() || k.contains(':') {
                return Err(parse("empty or malformed key/value"));
            }
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

pub fn parse_manifest(dir: &Path) -> Result<Manifest> {
    let layers = parse_file(&dir.join(LAYER_NAMES_FILE))?;
    let ops = parse_file(&dir.join(OPS_NAMES_FILE))?;
    for key in OPS_KEYS {
        if !ops.iter().any(|(k, _)| k == key) {
            return Err(BnnError::Parse {
                file: OPS_NAMES_FILE.into(),
                line: ops.len() + 1,
                reason: format!("missing `{key}` entry"),
            });
        }
    }
    Ok(Manifest { layers, ops })
}
