//! Built-in desk-scale architectures.

use super::{LayerKind, LayerSpec, ModelGraph};
use crate::error::{PruneError, Result};
use serde::{Deserialize, Serialize};

/// Named architecture presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum GraphPreset {
    /// Plain conv stack: three width stages of two convs each, max-pooled
    /// between stages, global pool and a linear classifier. No skips.
    MiniVgg {
        base_width: usize,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    },
    /// CIFAR-style residual net: depth = 6n+2, three stages of n basic
    /// blocks at widths (w, 2w, 4w), strided projection shortcuts between
    /// stages.
    MiniResnet {
        depth: usize,
        base_width: usize,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    },
    /// Global pool straight into a small MLP head; no convs. Useful for
    /// gradient-check baselines.
    MlpProbe {
        hidden: usize,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    },
}

impl GraphPreset {
    pub fn mini_vgg(base_width: usize) -> Self {
        GraphPreset::MiniVgg {
            base_width,
            input_shape: (3, 32, 32),
            num_classes: 10,
        }
    }

    pub fn mini_resnet(depth: usize, base_width: usize) -> Self {
        GraphPreset::MiniResnet {
            depth,
            base_width,
            input_shape: (3, 32, 32),
            num_classes: 10,
        }
    }
}

fn conv(id: &str, out: usize, kernel: usize, stride: usize, padding: usize, from: &[&str]) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::Conv2d {
            kernel: (kernel, kernel),
            stride,
            padding,
            bias: false,
        },
        in_channels: 0,
        out_channels: out,
        predecessors: from.iter().map(|s| s.to_string()).collect(),
        coupling_group: None,
    }
}

fn unary(id: &str, kind: LayerKind, from: &str) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind,
        in_channels: 0,
        out_channels: 0,
        predecessors: vec![from.to_string()],
        coupling_group: None,
    }
}

/// Instantiate a preset graph.
pub fn build_graph(preset: &GraphPreset) -> Result<ModelGraph> {
    match *preset {
        GraphPreset::MiniVgg {
            base_width,
            input_shape,
            num_classes,
        } => build_mini_vgg(base_width, input_shape, num_classes),
        GraphPreset::MiniResnet {
            depth,
            base_width,
            input_shape,
            num_classes,
        } => build_mini_resnet(depth, base_width, input_shape, num_classes),
        GraphPreset::MlpProbe {
            hidden,
            input_shape,
            num_classes,
        } => build_mlp_probe(hidden, input_shape, num_classes),
    }
}

fn build_mini_vgg(
    base: usize,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<ModelGraph> {
    if base == 0 {
        return Err(PruneError::arg("mini-vgg", "base_width must be >= 1"));
    }
    let mut layers = Vec::new();
    let mut prev = String::new();
    for (stage, width) in [base, base * 2, base * 4].into_iter().enumerate() {
        for block in 0..2 {
            let tag = format!("s{stage}b{block}");
            let from = if prev.is_empty() { vec![] } else { vec![prev.as_str()] };
            layers.push(conv(&format!("{tag}.conv"), width, 3, 1, 1, &from));
            layers.push(unary(&format!("{tag}.bn"), LayerKind::Batchnorm2d, &format!("{tag}.conv")));
            layers.push(unary(&format!("{tag}.relu"), LayerKind::Relu, &format!("{tag}.bn")));
            prev = format!("{tag}.relu");
        }
        layers.push(unary(
            &format!("s{stage}.pool"),
            LayerKind::Maxpool2d { kernel: 2, stride: 2 },
            &prev,
        ));
        prev = format!("s{stage}.pool");
    }
    layers.push(unary("gap", LayerKind::AvgPoolGlobal, &prev));
    let mut fc = LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear,
        in_channels: 0,
        out_channels: num_classes,
        predecessors: vec!["gap".into()],
        coupling_group: None,
    };
    fc.in_channels = base * 4;
    layers.push(fc);
    ModelGraph::new(layers, input_shape, num_classes)
}

fn build_mini_resnet(
    depth: usize,
    base: usize,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<ModelGraph> {
    if depth < 8 || (depth - 2) % 6 != 0 {
        return Err(PruneError::arg(
            "mini-resnet",
            format!("depth must be 6n+2 with n >= 1, got {depth}"),
        ));
    }
    if base == 0 {
        return Err(PruneError::arg("mini-resnet", "base_width must be >= 1"));
    }
    let blocks_per_stage = (depth - 2) / 6;
    let mut layers = Vec::new();

    layers.push(conv("stem.conv", base, 3, 1, 1, &[]));
    layers.push(unary("stem.bn", LayerKind::Batchnorm2d, "stem.conv"));
    layers.push(unary("stem.relu", LayerKind::Relu, "stem.bn"));
    let mut prev = "stem.relu".to_string();

    for stage in 0..3 {
        let width = base << stage;
        for block in 0..blocks_per_stage {
            let tag = format!("s{stage}b{block}");
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            layers.push(conv(&format!("{tag}.conv1"), width, 3, stride, 1, &[&prev]));
            layers.push(unary(&format!("{tag}.bn1"), LayerKind::Batchnorm2d, &format!("{tag}.conv1")));
            layers.push(unary(&format!("{tag}.relu1"), LayerKind::Relu, &format!("{tag}.bn1")));
            let relu1 = format!("{tag}.relu1");
            layers.push(conv(&format!("{tag}.conv2"), width, 3, 1, 1, &[&relu1]));
            layers.push(unary(&format!("{tag}.bn2"), LayerKind::Batchnorm2d, &format!("{tag}.conv2")));
            let skip = if stride == 2 {
                // Strided projection shortcut into the new width.
                layers.push(conv(&format!("{tag}.proj"), width, 1, 2, 0, &[&prev]));
                layers.push(unary(&format!("{tag}.projbn"), LayerKind::Batchnorm2d, &format!("{tag}.proj")));
                format!("{tag}.projbn")
            } else {
                prev.clone()
            };
            layers.push(LayerSpec {
                id: format!("{tag}.add"),
                kind: LayerKind::AddSkip,
                in_channels: 0,
                out_channels: 0,
                predecessors: vec![format!("{tag}.bn2"), skip],
                coupling_group: None,
            });
            layers.push(unary(&format!("{tag}.relu2"), LayerKind::Relu, &format!("{tag}.add")));
            prev = format!("{tag}.relu2");
        }
    }

    layers.push(unary("gap", LayerKind::AvgPoolGlobal, &prev));
    layers.push(LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear,
        in_channels: 0,
        out_channels: num_classes,
        predecessors: vec!["gap".into()],
        coupling_group: None,
    });
    ModelGraph::new(layers, input_shape, num_classes)
}

fn build_mlp_probe(
    hidden: usize,
    input_shape: (usize, usize, usize),
    num_classes: usize,
) -> Result<ModelGraph> {
    let layers = vec![
        LayerSpec {
            id: "gap".into(),
            kind: LayerKind::AvgPoolGlobal,
            in_channels: 0,
            out_channels: 0,
            predecessors: vec![],
            coupling_group: None,
        },
        LayerSpec {
            id: "fc1".into(),
            kind: LayerKind::Linear,
            in_channels: 0,
            out_channels: hidden,
            predecessors: vec!["gap".into()],
            coupling_group: None,
        },
        LayerSpec {
            id: "relu1".into(),
            kind: LayerKind::Relu,
            in_channels: 0,
            out_channels: 0,
            predecessors: vec!["fc1".into()],
            coupling_group: None,
        },
        LayerSpec {
            id: "fc2".into(),
            kind: LayerKind::Linear,
            in_channels: 0,
            out_channels: num_classes,
            predecessors: vec!["relu1".into()],
            coupling_group: None,
        },
    ];
    ModelGraph::new(layers, input_shape, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_vgg_has_no_coupling() {
        let g = build_graph(&GraphPreset::mini_vgg(16)).unwrap();
        assert!(g.coupling_groups().is_empty());
        assert_eq!(g.num_prunable(), 6);
    }

    // Structural check against the hand-drawn depth-8 graph: one block per
    // stage, so each stage forms exactly one coupling group, with the stem
    // tied into stage 0 by the identity skip and the projections tied into
    // stages 1 and 2.
    #[test]
    fn mini_resnet8_coupling_matches_hand_drawn_graph() {
        let g = build_graph(&GraphPreset::mini_resnet(8, 16)).unwrap();
        let groups = g.coupling_groups();
        assert_eq!(groups.len(), 3);
        let names: Vec<Vec<&str>> = groups
            .iter()
            .map(|gr| gr.member_layer_ids.iter().map(|s| s.as_str()).collect())
            .collect();
        assert_eq!(names[0], vec!["stem.conv", "s0b0.conv2"]);
        assert_eq!(names[1], vec!["s1b0.conv2", "s1b0.proj"]);
        assert_eq!(names[2], vec!["s2b0.conv2", "s2b0.proj"]);
        // First convs of blocks stay independent.
        assert!(g.layer("s1b0.conv1").unwrap().coupling_group.is_none());
        // Every add-skip's operands live in one space.
        for (i, l) in g.layers.iter().enumerate() {
            if matches!(l.kind, LayerKind::AddSkip) {
                let preds: Vec<usize> = l
                    .predecessors
                    .iter()
                    .map(|p| g.layer_index(p).unwrap())
                    .collect();
                assert_eq!(g.out_space(preds[0]), g.out_space(preds[1]));
                assert_eq!(g.out_space(i), g.out_space(preds[0]));
            }
        }
    }

    #[test]
    fn resnet_depth_must_be_valid() {
        assert!(build_graph(&GraphPreset::mini_resnet(9, 16)).is_err());
    }
}
