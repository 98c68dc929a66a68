//! Architecture description files.
//!
//! A description is TOML listing the input shape, class count, and layers.
//! `inputs` names predecessor layers (empty or omitted for the network
//! input); `out_channels` is required for conv2d and linear and inferred
//! elsewhere. Example:
//!
//! ```toml
//! input_shape = [3, 32, 32]
//! num_classes = 10
//!
//! [[layers]]
//! id = "conv1"
//! kind = "conv2d"
//! out_channels = 16
//! kernel = [3, 3]
//! stride = 1
//! padding = 1
//!
//! [[layers]]
//! id = "bn1"
//! kind = "batchnorm2d"
//! inputs = ["conv1"]
//! ```

use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{PruneError, Result};
use serde::Deserialize;

#[derive(Deserialize)]
struct DescFile {
    input_shape: (usize, usize, usize),
    num_classes: usize,
    layers: Vec<DescLayer>,
}

#[derive(Deserialize)]
struct DescLayer {
    id: String,
    #[serde(flatten)]
    kind: LayerKind,
    #[serde(default)]
    out_channels: usize,
    #[serde(default)]
    inputs: Vec<String>,
}

/// Parse and validate a graph description.
pub fn graph_from_description(text: &str) -> Result<ModelGraph> {
    let desc: DescFile = toml::from_str(text).map_err(|e| PruneError::Format {
        path: "<description>".into(),
        offset: None,
        reason: e.to_string(),
    })?;
    let layers = desc
        .layers
        .into_iter()
        .map(|l| LayerSpec {
            id: l.id,
            kind: l.kind,
            in_channels: 0,
            out_channels: l.out_channels,
            predecessors: l.inputs,
            coupling_group: None,
        })
        .collect();
    ModelGraph::new(layers, desc.input_shape, desc.num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
input_shape = [3, 8, 8]
num_classes = 4

[[layers]]
id = "c1"
kind = "conv2d"
out_channels = 6
kernel = [3, 3]
stride = 1
padding = 1

[[layers]]
id = "r1"
kind = "relu"
inputs = ["c1"]

[[layers]]
id = "c2"
kind = "conv2d"
out_channels = 6
kernel = [3, 3]
stride = 1
padding = 1
inputs = ["r1"]

[[layers]]
id = "add"
kind = "add-skip"
inputs = ["c2", "r1"]

[[layers]]
id = "gap"
kind = "avgpool-global"
inputs = ["add"]

[[layers]]
id = "fc"
kind = "linear"
out_channels = 4
inputs = ["gap"]
"#;

    #[test]
    fn parses_and_couples_skip() {
        let g = graph_from_description(GOOD).unwrap();
        assert_eq!(g.coupling_groups().len(), 1);
        assert_eq!(
            g.coupling_groups()[0].member_layer_ids,
            vec!["c1".to_string(), "c2".to_string()]
        );
    }

    #[test]
    fn mismatched_skip_widths_rejected() {
        let bad = GOOD.replace("out_channels = 6\nkernel = [3, 3]\nstride = 1\npadding = 1\ninputs = [\"r1\"]", "out_channels = 5\nkernel = [3, 3]\nstride = 1\npadding = 1\ninputs = [\"r1\"]");
        let err = graph_from_description(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("mismatched widths"), "{msg}");
    }
}
