//! Model selection: the two presets or a TOML description such as
//!
//! ```toml
//! input = [28, 28, 1]
//! [[layers]]
//! name = "conv"
//! kind = "conv"
//! kernel = 5
//! filters = 8
//! stride = 2
//! [[layers]]
//! name = "relu"
//! kind = "relu"
//! [[layers]]
//! name = "flat"
//! kind = "flatten"
//! [[layers]]
//! name = "out"
//! kind = "dense"
//! units = 10
//! ```
//!
//! Input widths are inferred from the preceding layer.

use std::path::PathBuf;

use bnn_core::layers::presets::{bnn_conv, bnn_fc};
use bnn_core::tensor::Padding;
use bnn_core::{LayerSpec, ModelGraph, Scalar};
use serde::Deserialize;

use crate::error::{usage, CliResult};

pub const DEFAULT_FILTERS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelChoice {
    Fc,
    Conv { filters: usize },
    Custom { path: PathBuf, spec: ModelSpec },
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    /// dense, conv, relu, maxpool or flatten.
    pub kind: String,
    pub units: Option<usize>,
    pub filters: Option<usize>,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    /// valid (default) or same.
    pub padding: Option<String>,
    pub window: Option<usize>,
    pub bias: Option<bool>,
}

impl ModelChoice {
    pub fn parse(model: &str, filters: Option<usize>) -> CliResult<Self> {
        if filters.is_some() && model != "bnn-conv" {
            return usage("--filters applies to --model bnn-conv only");
        }
        match model {
            "bnn-fc" => Ok(ModelChoice::Fc),
            "bnn-conv" => match filters.unwrap_or(DEFAULT_FILTERS) {
                0 => usage("--filters must be positive"),
                filters => Ok(ModelChoice::Conv { filters }),
            },
            path => {
                let path = PathBuf::from(path);
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    crate::error::CliError::Usage(format!(
                        "--model {}: not bnn-fc, bnn-conv or a readable model file ({e})",
                        path.display()
                    ))
                })?;
                match toml::from_str::<ModelSpec>(&text) {
                    Ok(spec) => {
                        spec.layer_specs()?;
                        Ok(ModelChoice::Custom { path, spec })
                    }
                    Err(e) => usage(format!("--model {}: {e}", path.display())),
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelChoice::Fc => "bnn-fc".into(),
            ModelChoice::Conv { filters } => format!("bnn-conv({filters})"),
            ModelChoice::Custom { path, .. } => path.display().to_string(),
        }
    }

    /// An uninitialized graph.
    pub fn build<T: Scalar>(&self) -> CliResult<ModelGraph<T>> {
        Ok(match self {
            ModelChoice::Fc => bnn_fc(),
            ModelChoice::Conv { filters } => bnn_conv(*filters),
            ModelChoice::Custom { spec, .. } => ModelGraph::new(&spec.input, spec.layer_specs()?)?,
        })
    }
}

impl ModelSpec {
    pub fn layer_specs(&self) -> CliResult<Vec<(String, LayerSpec)>> {
        let mut shape = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let need = |v: Option<usize>, field: &str| match v {
                Some(v) if v > 0 => Ok(v),
                _ => usage(format!("layer {:?}: {} needs a positive {field}", l.name, l.kind)),
            };
            let spec = match l.kind.as_str() {
                "dense" => {
                    let &[inputs] = shape.as_slice() else {
                        return usage(format!("layer {:?}: dense input must be flat, got {shape:?}", l.name));
                    };
                    LayerSpec::DenseFlipout {
                        inputs,
                        outputs: need(l.units, "units")?,
                        bias: l.bias.unwrap_or(true),
                    }
                }
                "conv" => {
                    let &[_, _, cin] = shape.as_slice() else {
                        return usage(format!("layer {:?}: conv input must be [h, w, c], got {shape:?}", l.name));
                    };
                    let k = need(l.kernel, "kernel")?;
                    let padding = match l.padding.as_deref().unwrap_or("valid") {
                        "valid" => Padding::Valid,
                        "same" => Padding::Same,
                        p => return usage(format!("layer {:?}: padding {p:?} is not valid or same", l.name)),
                    };
                    LayerSpec::Conv2dFlipout {
                        kh: k,
                        kw: k,
                        cin,
                        cout: need(l.filters, "filters")?,
                        stride: l.stride.map_or(Ok(1), |s| need(Some(s), "stride"))?,
                        padding,
                        bias: l.bias.unwrap_or(true),
                    }
                }
                "maxpool" => {
                    let window = need(l.window, "window")?;
                    LayerSpec::MaxPool2d {
                        window,
                        stride: l.stride.map_or(Ok(window), |s| need(Some(s), "stride"))?,
                    }
                }
                "relu" => LayerSpec::Relu,
                "flatten" => LayerSpec::Flatten,
                k => return usage(format!("layer {:?}: unknown kind {k:?}", l.name)),
            };
            shape = match spec.output_shape(&shape) {
                Ok(s) => s,
                Err(e) => return usage(format!("layer {:?}: {e}", l.name)),
            };
            out.push((l.name.clone(), spec));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn custom_spec_infers_widths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        std::fs::write(
            &path,
            "input = [6, 6, 1]\n\
             [[layers]]\nname = \"c\"\nkind = \"conv\"\nkernel = 3\nfilters = 2\n\
             [[layers]]\nname = \"p\"\nkind = \"maxpool\"\nwindow = 2\n\
             [[layers]]\nname = \"f\"\nkind = \"flatten\"\n\
             [[layers]]\nname = \"d\"\nkind = \"dense\"\nunits = 3\n",
        )
        .unwrap();
        let m = ModelChoice::parse(path.to_str().unwrap(), None).unwrap();
        let g = m.build::<f32>().unwrap();
        assert_eq!(g.output_shape(), vec![3]);
        assert_eq!(g.param_count(), 2 * 9 * 2 + 2 + 2 * 8 * 3 + 3);
    }

    #[test]
    fn presets_and_errors() {
        assert_eq!(ModelChoice::parse("bnn-conv", None).unwrap(), ModelChoice::Conv { filters: 256 });
        assert!(ModelChoice::parse("bnn-fc", Some(4)).is_err());
        assert!(ModelChoice::parse("/no/such/model.toml", None).is_err());
    }
}
