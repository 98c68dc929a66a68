//! Architecture description and the channel-configuration space.
//!
//! A [`ModelGraph`] is a topologically ordered DAG of layers. Validation
//! infers *channel spaces*: every conv output opens a space, channel-
//! preserving layers (batchnorm, relu, pooling, gates) propagate it, and
//! `add-skip` unifies the spaces of its operands. Convs sharing a space must
//! be pruned together — those are the coupling groups. Pruning operates on
//! one [`PruneUnit`] per conv-bearing space.

mod complexity;
mod descfile;
mod presets;

pub use complexity::{complexity, config_space_size, ComplexityReport, SpaceMode};
pub use descfile::graph_from_description;
pub use presets::{build_graph, GraphPreset};

use crate::error::{PruneError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Layer kind plus its fixed hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        /// Convs in front of batchnorm conventionally omit the bias; a
        /// training-mode batchnorm cancels it exactly.
        #[serde(default = "default_true")]
        bias: bool,
    },
    Batchnorm2d,
    Relu,
    Maxpool2d {
        kernel: usize,
        stride: usize,
    },
    #[serde(rename = "avgpool-global")]
    AvgPoolGlobal,
    Linear,
    AddSkip,
    ChannelGate,
}

fn default_true() -> bool {
    true
}

impl LayerKind {
    /// Layers that keep the channel dimension of their input.
    pub fn preserves_channels(&self) -> bool {
        !matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear)
    }

    /// Elementwise single-input layers a mask can be pushed through.
    pub fn is_elementwise(&self) -> bool {
        matches!(
            self,
            LayerKind::Batchnorm2d | LayerKind::Relu | LayerKind::ChannelGate
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Batchnorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2d { .. } => "maxpool2d",
            LayerKind::AvgPoolGlobal => "avgpool-global",
            LayerKind::Linear => "linear",
            LayerKind::AddSkip => "add-skip",
            LayerKind::ChannelGate => "channel-gate",
        }
    }
}

/// One layer of the architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Ids of the layers feeding this one; empty means the network input.
    pub predecessors: Vec<String>,
    /// Coupling group index, if the layer's output channels are tied to
    /// other convs by a skip connection. Filled in by validation.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub coupling_group: Option<usize>,
}

/// Convs whose output channels must be pruned together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub id: usize,
    pub member_layer_ids: Vec<String>,
}

/// One independently prunable width: a channel space and the convs that
/// write into it. Singleton units are ordinary convs; multi-member units
/// are coupling groups.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneUnit {
    pub space: usize,
    /// Layer indices of the member convs, in topological order.
    pub conv_layers: Vec<usize>,
    pub width: usize,
}

/// Validated architecture graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    /// (channels, height, width) of one input sample.
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    #[serde(skip)]
    derived: Derived,
}

#[derive(Clone, Debug, Default)]
struct Derived {
    index_of: BTreeMap<String, usize>,
    /// Channel-space id of each layer's output.
    out_space: Vec<usize>,
    /// Channel-space id of each layer's input (of the first predecessor).
    in_space: Vec<usize>,
    coupling_groups: Vec<CouplingGroup>,
    prune_units: Vec<PruneUnit>,
    /// For each conv layer index: the layer index where a channel mask on
    /// this conv's output is applied (end of its elementwise chain).
    mask_point: BTreeMap<usize, usize>,
    /// Consumers of each layer's output (layer indices).
    consumers: Vec<Vec<usize>>,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let r = self.find(self.0[x]);
            self.0[x] = r;
        }
        self.0[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Keep the smaller id as the root so space ids stay stable.
        if ra < rb {
            self.0[rb] = ra;
        } else {
            self.0[ra] = rb;
        }
    }
}

/// Space id reserved for the network input (image channels); never prunable.
pub const INPUT_SPACE: usize = 0;

impl ModelGraph {
    /// Build and validate a graph from layer specs. Layers may be listed in
    /// any order; they are topologically sorted. `in_channels` and
    /// `out_channels` of channel-preserving layers are inferred.
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let mut graph = ModelGraph {
            layers,
            input_shape,
            num_classes,
            derived: Derived::default(),
        };
        graph.sort_topologically()?;
        graph.infer_channels()?;
        graph.derive()?;
        Ok(graph)
    }

    /// Re-derive the analysis tables after deserialization.
    pub fn revalidate(mut self) -> Result<Self> {
        self.sort_topologically()?;
        self.infer_channels()?;
        self.derive()?;
        Ok(self)
    }

    fn sort_topologically(&mut self) -> Result<()> {
        let n = self.layers.len();
        let mut index_of = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if index_of.insert(l.id.clone(), i).is_some() {
                return Err(PruneError::InvalidGraph {
                    layer: l.id.clone(),
                    reason: "duplicate layer id".into(),
                });
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut state = vec![0u8; n]; // 0 unvisited, 1 visiting, 2 done
        fn visit(
            i: usize,
            layers: &[LayerSpec],
            index_of: &BTreeMap<String, usize>,
            state: &mut [u8],
            order: &mut Vec<usize>,
        ) -> Result<()> {
            match state[i] {
                2 => return Ok(()),
                1 => {
                    return Err(PruneError::InvalidGraph {
                        layer: layers[i].id.clone(),
                        reason: "cycle detected".into(),
                    })
                }
                _ => {}
            }
            state[i] = 1;
            for pred in &layers[i].predecessors {
                let Some(&p) = index_of.get(pred) else {
                    return Err(PruneError::InvalidGraph {
                        layer: layers[i].id.clone(),
                        reason: format!("unknown predecessor '{pred}'"),
                    });
                };
                visit(p, layers, index_of, state, order)?;
            }
            state[i] = 2;
            order.push(i);
            Ok(())
        }
        for i in 0..n {
            visit(i, &self.layers, &index_of, &mut state, &mut order)?;
        }
        let mut sorted = Vec::with_capacity(n);
        for &i in &order {
            sorted.push(self.layers[i].clone());
        }
        self.layers = sorted;
        Ok(())
    }

    fn infer_channels(&mut self) -> Result<()> {
        let mut out_ch: BTreeMap<String, usize> = BTreeMap::new();
        let input_c = self.input_shape.0;
        for li in 0..self.layers.len() {
            let preds = self.layers[li].predecessors.clone();
            let pred_ch: Vec<usize> = preds
                .iter()
                .map(|p| *out_ch.get(p).expect("topological order"))
                .collect();
            let in_c = if preds.is_empty() { input_c } else { pred_ch[0] };
            let layer = &mut self.layers[li];
            match layer.kind {
                LayerKind::Conv2d { .. } | LayerKind::Linear => {
                    if layer.out_channels == 0 {
                        return Err(PruneError::InvalidGraph {
                            layer: layer.id.clone(),
                            reason: "out_channels must be >= 1".into(),
                        });
                    }
                    if preds.len() > 1 {
                        return Err(PruneError::InvalidGraph {
                            layer: layer.id.clone(),
                            reason: "expects exactly one input".into(),
                        });
                    }
                    layer.in_channels = in_c;
                }
                LayerKind::AddSkip => {
                    if preds.len() != 2 {
                        return Err(PruneError::InvalidGraph {
                            layer: layer.id.clone(),
                            reason: format!("add-skip needs 2 inputs, has {}", preds.len()),
                        });
                    }
                    if pred_ch[0] != pred_ch[1] {
                        return Err(PruneError::InvalidGraph {
                            layer: layer.id.clone(),
                            reason: format!(
                                "add-skip operands have mismatched widths {} vs {}",
                                pred_ch[0], pred_ch[1]
                            ),
                        });
                    }
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                }
                _ => {
                    if preds.len() > 1 {
                        return Err(PruneError::InvalidGraph {
                            layer: layer.id.clone(),
                            reason: "expects exactly one input".into(),
                        });
                    }
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                }
            }
            out_ch.insert(layer.id.clone(), layer.out_channels);
        }
        Ok(())
    }

    fn derive(&mut self) -> Result<()> {
        let n = self.layers.len();
        let mut index_of = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            index_of.insert(l.id.clone(), i);
        }

        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, l) in self.layers.iter().enumerate() {
            for p in &l.predecessors {
                consumers[index_of[p]].push(i);
            }
        }

        // Channel spaces: id 0 is the network input, then one per raw
        // conv/linear output; add-skip unifies.
        let mut uf = UnionFind::new(1 + n);
        let raw_space = |i: usize| i + 1;
        let mut out_space_raw = vec![0usize; n];
        for (i, l) in self.layers.iter().enumerate() {
            let pred_spaces: Vec<usize> = l
                .predecessors
                .iter()
                .map(|p| out_space_raw[index_of[p]])
                .collect();
            out_space_raw[i] = match l.kind {
                LayerKind::Conv2d { .. } | LayerKind::Linear => raw_space(i),
                LayerKind::AddSkip => {
                    uf.union(pred_spaces[0], pred_spaces[1]);
                    pred_spaces[0]
                }
                _ => {
                    if pred_spaces.is_empty() {
                        INPUT_SPACE
                    } else {
                        pred_spaces[0]
                    }
                }
            };
        }
        let out_space: Vec<usize> = (0..n).map(|i| uf.find(out_space_raw[i])).collect();
        let in_space: Vec<usize> = (0..n)
            .map(|i| {
                let l = &self.layers[i];
                if l.predecessors.is_empty() {
                    INPUT_SPACE
                } else {
                    out_space[index_of[&l.predecessors[0]]]
                }
            })
            .collect();

        // Prune units: conv-bearing spaces, ordered by first member.
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l.kind, LayerKind::Conv2d { .. }) {
                members.entry(out_space[i]).or_default().push(i);
            }
        }
        if let Some(convs) = members.get(&uf.find(INPUT_SPACE)) {
            if !convs.is_empty() {
                return Err(PruneError::InvalidGraph {
                    layer: self.layers[convs[0]].id.clone(),
                    reason: "skip connection ties a conv output to the network input".into(),
                });
            }
        }
        let mut units: Vec<PruneUnit> = Vec::new();
        let mut ordered: Vec<(usize, Vec<usize>)> = members.into_iter().collect();
        ordered.sort_by_key(|(_, m)| m[0]);
        for (space, conv_layers) in ordered {
            let width = self.layers[conv_layers[0]].out_channels;
            for &c in &conv_layers {
                if self.layers[c].out_channels != width {
                    return Err(PruneError::InvalidGraph {
                        layer: self.layers[c].id.clone(),
                        reason: format!(
                            "coupled convs have mismatched widths {} vs {width}",
                            self.layers[c].out_channels
                        ),
                    });
                }
            }
            units.push(PruneUnit {
                space,
                conv_layers,
                width,
            });
        }

        // Coupling groups: units with more than one member conv.
        let mut groups = Vec::new();
        for layer in &mut self.layers {
            layer.coupling_group = None;
        }
        for unit in &units {
            if unit.conv_layers.len() > 1 {
                let gid = groups.len();
                groups.push(CouplingGroup {
                    id: gid,
                    member_layer_ids: unit
                        .conv_layers
                        .iter()
                        .map(|&i| self.layers[i].id.clone())
                        .collect(),
                });
                for &i in &unit.conv_layers {
                    self.layers[i].coupling_group = Some(gid);
                }
            }
        }

        // Mask points: follow the single-consumer elementwise chain.
        let mut mask_point = BTreeMap::new();
        for unit in &units {
            for &conv in &unit.conv_layers {
                let mut at = conv;
                loop {
                    let next = &consumers[at];
                    if next.len() != 1 {
                        break;
                    }
                    let c = next[0];
                    if !self.layers[c].kind.is_elementwise() {
                        break;
                    }
                    at = c;
                }
                mask_point.insert(conv, at);
            }
        }

        // Terminal check: exactly one sink, and it is the classifier.
        let sinks: Vec<usize> = (0..n).filter(|&i| consumers[i].is_empty()).collect();
        if sinks.len() != 1 {
            return Err(PruneError::InvalidGraph {
                layer: sinks
                    .first()
                    .map(|&i| self.layers[i].id.clone())
                    .unwrap_or_default(),
                reason: format!("expected exactly one output layer, found {}", sinks.len()),
            });
        }
        let sink = sinks[0];
        if !matches!(self.layers[sink].kind, LayerKind::Linear)
            || self.layers[sink].out_channels != self.num_classes
        {
            return Err(PruneError::InvalidGraph {
                layer: self.layers[sink].id.clone(),
                reason: format!(
                    "output layer must be linear with {} classes",
                    self.num_classes
                ),
            });
        }

        self.derived = Derived {
            index_of,
            out_space,
            in_space,
            coupling_groups: groups,
            prune_units: units,
            mask_point,
            consumers,
        };
        Ok(())
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.derived.index_of.get(id).copied()
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layer_index(id).map(|i| &self.layers[i])
    }

    /// Channel-space id of a layer's output.
    pub fn out_space(&self, layer_idx: usize) -> usize {
        self.derived.out_space[layer_idx]
    }

    /// Channel-space id of a layer's input.
    pub fn in_space(&self, layer_idx: usize) -> usize {
        self.derived.in_space[layer_idx]
    }

    pub fn coupling_groups(&self) -> &[CouplingGroup] {
        &self.derived.coupling_groups
    }

    pub fn prune_units(&self) -> &[PruneUnit] {
        &self.derived.prune_units
    }

    /// Number of prunable widths (coupled groups count once).
    pub fn num_prunable(&self) -> usize {
        self.derived.prune_units.len()
    }

    /// All conv layer indices, topological order.
    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Conv2d { .. }))
            .collect()
    }

    /// Layer index at which a channel mask for `conv_idx`'s output applies.
    pub fn mask_point(&self, conv_idx: usize) -> usize {
        self.derived.mask_point[&conv_idx]
    }

    pub fn consumers(&self, layer_idx: usize) -> &[usize] {
        &self.derived.consumers[layer_idx]
    }

    /// The prune unit owning a conv layer, if any.
    pub fn unit_of_conv(&self, conv_idx: usize) -> Option<&PruneUnit> {
        self.derived
            .prune_units
            .iter()
            .find(|u| u.conv_layers.contains(&conv_idx))
    }

    /// The prune unit that governs a space id.
    pub fn unit_of_space(&self, space: usize) -> Option<&PruneUnit> {
        self.derived.prune_units.iter().find(|u| u.space == space)
    }
}

/// Per-layer keep-counts and optional keep-index sets: one point in the
/// channel-configuration space. Keys are conv layer ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub keep_count: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub keep_indices: Option<BTreeMap<String, Vec<usize>>>,
}

impl ChannelConfig {
    /// The identity configuration: every channel kept.
    pub fn full(graph: &ModelGraph) -> Self {
        let mut keep_count = BTreeMap::new();
        for &ci in &graph.conv_layers() {
            keep_count.insert(graph.layers[ci].id.clone(), graph.layers[ci].out_channels);
        }
        ChannelConfig {
            keep_count,
            keep_indices: None,
        }
    }

    /// Build from one keep-count per prune unit (unit order).
    pub fn from_unit_counts(graph: &ModelGraph, counts: &[usize]) -> Result<Self> {
        if counts.len() != graph.prune_units().len() {
            return Err(PruneError::InvalidConfig {
                reason: format!(
                    "expected {} unit counts, got {}",
                    graph.prune_units().len(),
                    counts.len()
                ),
            });
        }
        let mut keep_count = BTreeMap::new();
        for (unit, &c) in graph.prune_units().iter().zip(counts) {
            for &li in &unit.conv_layers {
                keep_count.insert(graph.layers[li].id.clone(), c);
            }
        }
        let cfg = ChannelConfig {
            keep_count,
            keep_indices: None,
        };
        cfg.validate(graph)?;
        Ok(cfg)
    }

    /// Keep-count per prune unit, unit order.
    pub fn unit_counts(&self, graph: &ModelGraph) -> Vec<usize> {
        graph
            .prune_units()
            .iter()
            .map(|u| self.keep_count[&graph.layers[u.conv_layers[0]].id])
            .collect()
    }

    pub fn validate(&self, graph: &ModelGraph) -> Result<()> {
        for &ci in &graph.conv_layers() {
            let layer = &graph.layers[ci];
            let Some(&count) = self.keep_count.get(&layer.id) else {
                return Err(PruneError::InvalidConfig {
                    reason: format!("missing keep_count for conv '{}'", layer.id),
                });
            };
            if count == 0 || count > layer.out_channels {
                return Err(PruneError::InvalidConfig {
                    reason: format!(
                        "keep_count {count} out of range [1, {}] for '{}'",
                        layer.out_channels, layer.id
                    ),
                });
            }
        }
        for key in self.keep_count.keys() {
            match graph.layer(key) {
                Some(l) if matches!(l.kind, LayerKind::Conv2d { .. }) => {}
                _ => {
                    return Err(PruneError::InvalidConfig {
                        reason: format!("keep_count names unknown conv '{key}'"),
                    })
                }
            }
        }
        for unit in graph.prune_units() {
            let first = &graph.layers[unit.conv_layers[0]].id;
            let c0 = self.keep_count[first];
            for &li in &unit.conv_layers[1..] {
                let id = &graph.layers[li].id;
                if self.keep_count[id] != c0 {
                    return Err(PruneError::InvalidConfig {
                        reason: format!(
                            "coupled convs '{first}' and '{id}' have unequal keep counts"
                        ),
                    });
                }
            }
        }
        if let Some(indices) = &self.keep_indices {
            for &ci in &graph.conv_layers() {
                let layer = &graph.layers[ci];
                let Some(idx) = indices.get(&layer.id) else {
                    return Err(PruneError::InvalidConfig {
                        reason: format!("missing keep_indices for conv '{}'", layer.id),
                    });
                };
                if idx.len() != self.keep_count[&layer.id] {
                    return Err(PruneError::InvalidConfig {
                        reason: format!(
                            "keep_indices length {} != keep_count {} for '{}'",
                            idx.len(),
                            self.keep_count[&layer.id],
                            layer.id
                        ),
                    });
                }
                let sorted = idx.windows(2).all(|w| w[0] < w[1]);
                if !sorted || idx.iter().any(|&c| c >= layer.out_channels) {
                    return Err(PruneError::InvalidConfig {
                        reason: format!(
                            "keep_indices for '{}' must be sorted, unique, and < {}",
                            layer.id, layer.out_channels
                        ),
                    });
                }
            }
            for unit in graph.prune_units() {
                let first = &graph.layers[unit.conv_layers[0]].id;
                for &li in &unit.conv_layers[1..] {
                    let id = &graph.layers[li].id;
                    if indices[first] != indices[id] {
                        return Err(PruneError::InvalidConfig {
                            reason: format!(
                                "coupled convs '{first}' and '{id}' have different keep indices"
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Leading-channel indices (0..count) for every conv; the slimmable
    /// convention.
    pub fn with_leading_indices(mut self) -> Self {
        let indices = self
            .keep_count
            .iter()
            .map(|(id, &c)| (id.clone(), (0..c).collect()))
            .collect();
        self.keep_indices = Some(indices);
        self
    }
}
