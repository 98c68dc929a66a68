//! FLOPs/parameter accounting and configuration-space counting.
//!
//! Conv and linear layers are counted as one FLOP per multiply-accumulate
//! (bias excluded); batchnorm, relu, gates, adds, and pooling count one FLOP
//! per output element; the global pool counts one per input element.
//! Parameters count every retained learnable weight, biases included.

use super::{ChannelConfig, LayerKind, ModelGraph};
use crate::error::{PruneError, Result};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

/// FLOPs and parameter counts of a configuration, absolute and relative to
/// the unpruned graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub flops: u64,
    pub params: u64,
    pub flops_ratio: f64,
    pub params_ratio: f64,
}

/// Channel count of every layer output under a configuration.
fn channel_plan(graph: &ModelGraph, config: &ChannelConfig) -> Vec<usize> {
    let mut out = vec![0usize; graph.layers.len()];
    for (i, layer) in graph.layers.iter().enumerate() {
        out[i] = match layer.kind {
            LayerKind::Conv2d { .. } => config.keep_count[&layer.id],
            LayerKind::Linear => layer.out_channels,
            _ => {
                let space = graph.out_space(i);
                match graph.unit_of_space(space) {
                    Some(unit) => config.keep_count[&graph.layers[unit.conv_layers[0]].id],
                    None => layer.out_channels,
                }
            }
        };
    }
    out
}

/// Spatial extent (h, w) of every layer output; linear/global-pool outputs
/// report (1, 1).
pub(crate) fn spatial_plan(graph: &ModelGraph) -> Vec<(usize, usize)> {
    let (_, ih, iw) = graph.input_shape;
    let mut out = vec![(0usize, 0usize); graph.layers.len()];
    for (i, layer) in graph.layers.iter().enumerate() {
        let (ph, pw) = if layer.predecessors.is_empty() {
            (ih, iw)
        } else {
            out[graph.layer_index(&layer.predecessors[0]).unwrap()]
        };
        out[i] = match layer.kind {
            LayerKind::Conv2d {
                kernel: (kh, kw),
                stride,
                padding,
                ..
            } => (
                (ph + 2 * padding - kh) / stride + 1,
                (pw + 2 * padding - kw) / stride + 1,
            ),
            LayerKind::Maxpool2d { kernel, stride } => {
                ((ph - kernel) / stride + 1, (pw - kernel) / stride + 1)
            }
            LayerKind::AvgPoolGlobal | LayerKind::Linear => (1, 1),
            _ => (ph, pw),
        };
    }
    out
}

fn count(graph: &ModelGraph, config: &ChannelConfig) -> (u64, u64) {
    let channels = channel_plan(graph, config);
    let spatial = spatial_plan(graph);
    let (in_c, ih, iw) = graph.input_shape;
    let mut flops: u64 = 0;
    let mut params: u64 = 0;
    for (i, layer) in graph.layers.iter().enumerate() {
        let (in_ch, in_h, in_w) = if layer.predecessors.is_empty() {
            (in_c, ih, iw)
        } else {
            let p = graph.layer_index(&layer.predecessors[0]).unwrap();
            (channels[p], spatial[p].0, spatial[p].1)
        };
        let out_ch = channels[i] as u64;
        let (oh, ow) = spatial[i];
        let out_elems = out_ch * (oh * ow) as u64;
        match layer.kind {
            LayerKind::Conv2d {
                kernel: (kh, kw),
                bias,
                ..
            } => {
                let macs = out_ch * in_ch as u64 * (kh * kw) as u64 * (oh * ow) as u64;
                flops += macs;
                params += out_ch * in_ch as u64 * (kh * kw) as u64;
                if bias {
                    params += out_ch;
                }
            }
            LayerKind::Linear => {
                flops += out_ch * in_ch as u64;
                params += out_ch * in_ch as u64 + out_ch;
            }
            LayerKind::Batchnorm2d => {
                flops += out_elems;
                params += 2 * out_ch;
            }
            LayerKind::ChannelGate => {
                flops += out_elems;
                params += out_ch;
            }
            LayerKind::Relu | LayerKind::AddSkip | LayerKind::Maxpool2d { .. } => {
                flops += out_elems;
            }
            LayerKind::AvgPoolGlobal => {
                flops += in_ch as u64 * (in_h * in_w) as u64;
            }
        }
    }
    (flops, params)
}

/// Complexity of a configuration relative to the unpruned graph.
pub fn complexity(graph: &ModelGraph, config: &ChannelConfig) -> Result<ComplexityReport> {
    config.validate(graph)?;
    let (flops, params) = count(graph, config);
    let (full_flops, full_params) = count(graph, &ChannelConfig::full(graph));
    Ok(ComplexityReport {
        flops,
        params,
        flops_ratio: flops as f64 / full_flops as f64,
        params_ratio: params as f64 / full_params as f64,
    })
}

/// How configurations are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceMode {
    /// Every nonempty channel subset of every prunable width.
    Subset,
    /// Only the retained channel *count* matters, restricted to multiples
    /// of the granularity.
    ChannelCount,
}

/// Size of the channel-configuration space. Coupled groups count once, at
/// the group width.
pub fn config_space_size(
    graph: &ModelGraph,
    mode: SpaceMode,
    granularity: usize,
    min_keep: usize,
) -> Result<BigUint> {
    if granularity == 0 || min_keep == 0 {
        return Err(PruneError::arg(
            "config_space_size",
            "granularity and min_keep must be >= 1",
        ));
    }
    let mut total = BigUint::from(1u32);
    for unit in graph.prune_units() {
        let width = unit.width;
        match mode {
            SpaceMode::Subset => {
                // 2^width - 1 nonempty subsets.
                let sub = (BigUint::from(1u32) << width) - 1u32;
                total *= sub;
            }
            SpaceMode::ChannelCount => {
                if min_keep > width {
                    return Err(PruneError::arg(
                        "config_space_size",
                        format!(
                            "min_keep {min_keep} exceeds width {width} of unit at '{}'",
                            graph.layers[unit.conv_layers[0]].id
                        ),
                    ));
                }
                let lo = min_keep.div_ceil(granularity);
                let hi = width / granularity;
                if hi < lo {
                    return Err(PruneError::arg(
                        "config_space_size",
                        format!(
                            "no multiple of {granularity} lies in [{min_keep}, {width}] for unit at '{}'",
                            graph.layers[unit.conv_layers[0]].id
                        ),
                    ));
                }
                total *= BigUint::from(hi - lo + 1);
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphPreset, LayerSpec};

    fn single_conv_graph(cin: usize, cout: usize, hw: usize) -> ModelGraph {
        let layers = vec![
            LayerSpec {
                id: "c1".into(),
                kind: LayerKind::Conv2d {
                    kernel: (3, 3),
                    stride: 1,
                    padding: 1,
                    bias: true,
                },
                in_channels: 0,
                out_channels: cout,
                predecessors: vec![],
                coupling_group: None,
            },
            LayerSpec {
                id: "gap".into(),
                kind: LayerKind::AvgPoolGlobal,
                in_channels: 0,
                out_channels: 0,
                predecessors: vec!["c1".into()],
                coupling_group: None,
            },
            LayerSpec {
                id: "fc".into(),
                kind: LayerKind::Linear,
                in_channels: 0,
                out_channels: 10,
                predecessors: vec!["gap".into()],
                coupling_group: None,
            },
        ];
        ModelGraph::new(layers, (cin, hw, hw), 10).unwrap()
    }

    /// Count conv MACs by brute-force enumeration of output positions and
    /// kernel taps; the independent oracle for the analytic formula.
    fn conv_mac_oracle(
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> u64 {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut macs = 0u64;
        for _oc in 0..cout {
            for _oy in 0..oh {
                for _ox in 0..ow {
                    for _ic in 0..cin {
                        for _ky in 0..kh {
                            for _kx in 0..kw {
                                macs += 1;
                            }
                        }
                    }
                }
            }
        }
        macs
    }

    #[test]
    fn conv_flops_match_mac_oracle() {
        let g = single_conv_graph(2, 4, 8);
        let report = complexity(&g, &ChannelConfig::full(&g)).unwrap();
        let conv_macs = conv_mac_oracle(2, 4, 8, 8, 3, 3, 1, 1);
        assert_eq!(conv_macs, 4608);
        // Conv weights 72 plus 4 biases.
        let conv_params = 4 * 2 * 9 + 4;
        assert_eq!(conv_params, 76);
        // Remaining layers: gap (4*64 flops), fc (4*10 macs, 50 params).
        assert_eq!(report.flops, conv_macs + 4 * 64 + 40);
        assert_eq!(report.params, conv_params as u64 + 50);
    }

    #[test]
    fn full_config_has_unit_ratios() {
        let g = build_graph(&GraphPreset::mini_resnet(8, 16)).unwrap();
        let report = complexity(&g, &ChannelConfig::full(&g)).unwrap();
        assert_eq!(report.flops_ratio, 1.0);
        assert_eq!(report.params_ratio, 1.0);
    }

    /// Halving in and out channels of a conv cuts its MACs to a quarter;
    /// verified against the counting oracle on the interior convs of a
    /// plain chain (the first conv keeps its image input width).
    #[test]
    fn halving_interior_chain_convs_quarters_their_flops() {
        let g = build_graph(&GraphPreset::mini_vgg(16)).unwrap();
        let full = ChannelConfig::full(&g);
        let halved = ChannelConfig::from_unit_counts(&g, &[8, 8, 16, 16, 32, 32]).unwrap();
        // Interior convs: everything except the stem. Per-layer check via
        // the MAC oracle at both widths.
        let spatial = spatial_plan(&g);
        for (i, layer) in g.layers.iter().enumerate() {
            let LayerKind::Conv2d { kernel, stride, padding, .. } = layer.kind else {
                continue;
            };
            if layer.predecessors.is_empty() {
                continue;
            }
            let p = g.layer_index(&layer.predecessors[0]).unwrap();
            let (in_h, in_w) = spatial[p];
            let full_macs = conv_mac_oracle(
                layer.in_channels,
                layer.out_channels,
                in_h,
                in_w,
                kernel.0,
                kernel.1,
                stride,
                padding,
            );
            let half_macs = conv_mac_oracle(
                layer.in_channels / 2,
                layer.out_channels / 2,
                in_h,
                in_w,
                kernel.0,
                kernel.1,
                stride,
                padding,
            );
            assert_eq!(half_macs * 4, full_macs, "layer {}", layer.id);
        }
        // And the aggregate reports stay consistent with the per-layer story.
        let rf = complexity(&g, &full).unwrap();
        let rh = complexity(&g, &halved).unwrap();
        assert!(rh.flops < rf.flops);
        assert!(rh.flops_ratio > 0.24 && rh.flops_ratio < 0.5);
    }

    #[test]
    fn space_sizes_match_definition() {
        let g = single_conv_graph(1, 3, 4);
        // Subset mode: 2^3 - 1.
        let s = config_space_size(&g, SpaceMode::Subset, 1, 1).unwrap();
        assert_eq!(s, BigUint::from(7u32));
        // Channel-count mode, granularity 1: widths 1..3.
        let s = config_space_size(&g, SpaceMode::ChannelCount, 1, 1).unwrap();
        assert_eq!(s, BigUint::from(3u32));
    }

    #[test]
    fn granularity_restricts_counts() {
        let g = single_conv_graph(1, 16, 4);
        // Enumeration oracle: multiples of 8 in [8, 16].
        let allowed: Vec<usize> = (1..=16).filter(|w| w % 8 == 0 && *w >= 8).collect();
        assert_eq!(allowed, vec![8, 16]);
        let s = config_space_size(&g, SpaceMode::ChannelCount, 8, 8).unwrap();
        assert_eq!(s, BigUint::from(allowed.len()));
        // Coarser granularity strictly shrinks the space.
        let fine = config_space_size(&g, SpaceMode::ChannelCount, 1, 1).unwrap();
        assert!(s < fine);
    }

    #[test]
    fn min_keep_above_width_rejected() {
        let g = single_conv_graph(1, 3, 4);
        assert!(config_space_size(&g, SpaceMode::ChannelCount, 1, 4).is_err());
    }
}
