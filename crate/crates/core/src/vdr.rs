//! Coarse visual decision rules: for each inner node, which child's classes
//! receive the node's Grad-PAM, after normalising by class size.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::InducedHierarchy;
use crate::model::Network;
use crate::saliency::{PamVariant, PixelSet, SaliencyContext};
use crate::scalar::Scalar;
use crate::tree::hard_path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum OverlapMode {
    /// Saliency mass over the class pixels.
    Continuous,
    /// Count of class pixels whose saliency exceeds `tau` times the map max.
    Threshold { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapEntry {
    pub child: usize,
    pub class: usize,
    pub raw: f64,
    pub pixels: usize,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OverlapTable {
    pub entries: Vec<OverlapEntry>,
}

impl OverlapTable {
    /// Sum of normalised overlaps of each child.
    pub fn child_scores(&self, children: usize) -> Vec<f64> {
        let mut s = vec![0.0; children];
        for e in &self.entries {
            s[e.child] += e.normalized;
        }
        s
    }
}

/// Nearest-neighbour upsampling of `map` to `(h, w)`; both sides must be
/// integer multiples of the map's.
fn upsample(map: ArrayView2<f64>, h: usize, w: usize) -> Result<Array2<f64>> {
    let (sh, sw) = map.dim();
    if sh == 0 || sw == 0 || h % sh != 0 || w % sw != 0 {
        return Err(Error::ResolutionMismatch {
            saliency: (sh, sw),
            label: (h, w),
        });
    }
    let (fy, fx) = (h / sh, w / sw);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| map[[y / fy, x / fx]]))
}

/// Overlap of each child's saliency with the label pixels of each class in
/// that child's class set. Classes absent from `label` are left out.
pub fn overlap_scores(
    saliency: &[ArrayView2<f64>],
    label: ArrayView2<u16>,
    class_sets: &[Vec<usize>],
    mode: OverlapMode,
) -> Result<OverlapTable> {
    if saliency.len() != class_sets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} saliency maps for {} children",
            saliency.len(),
            class_sets.len()
        )));
    }
    let (h, w) = label.dim();
    let mut entries = Vec::new();
    for (child, (map, classes)) in saliency.iter().zip(class_sets).enumerate() {
        let map = if map.dim() == (h, w) {
            map.to_owned()
        } else {
            upsample(*map, h, w)?
        };
        let max = map.iter().copied().fold(0.0, f64::max);
        for &class in classes {
            let mut raw = 0.0;
            let mut pixels = 0;
            for (&s, &l) in map.iter().zip(label.iter()) {
                if l as usize != class {
                    continue;
                }
                pixels += 1;
                raw += match mode {
                    OverlapMode::Continuous => s,
                    OverlapMode::Threshold { tau } => f64::from(max > 0.0 && s > tau * max),
                };
            }
            if pixels > 0 {
                entries.push(OverlapEntry {
                    child,
                    class,
                    raw,
                    pixels,
                    normalized: raw / pixels as f64,
                });
            }
        }
    }
    Ok(OverlapTable { entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRule {
    pub node: usize,
    pub selected_child: usize,
    /// Classes of the selected child that appeared in the images.
    pub selected_classes: Vec<usize>,
    /// Per child, the mean over images of the summed normalised overlaps.
    pub child_scores: Vec<f64>,
    /// Per `(child, class)`: raw mass and pixels summed over images,
    /// normalised overlap averaged over the images where the class occurs.
    pub table: OverlapTable,
    pub tie: bool,
    pub support: usize,
}

/// Index of the largest score, ties to the lowest, plus whether a tie
/// decided it.
fn argmax_flagged(scores: &[f64]) -> (usize, bool) {
    let best = crate::tree::argmax(scores);
    let tie = scores.iter().enumerate().any(|(i, &s)| i != best && s == scores[best]);
    (best, tie)
}

/// Folds per-image overlap tables into a rule.
pub fn aggregate_rule(node: usize, children: usize, per_image: &[OverlapTable]) -> Result<NodeRule> {
    if per_image.is_empty() {
        return Err(Error::NoRoutedPixels(node));
    }
    let n = per_image.len() as f64;
    let mut child_scores = vec![0.0; children];
    let mut acc: BTreeMap<(usize, usize), (f64, usize, f64, usize)> = BTreeMap::new();
    for table in per_image {
        for (j, s) in table.child_scores(children).into_iter().enumerate() {
            child_scores[j] += s / n;
        }
        for e in &table.entries {
            let a = acc.entry((e.child, e.class)).or_default();
            a.0 += e.raw;
            a.1 += e.pixels;
            a.2 += e.normalized;
            a.3 += 1;
        }
    }
    let (selected_child, tie) = argmax_flagged(&child_scores);
    let table = OverlapTable {
        entries: acc
            .into_iter()
            .map(|((child, class), (raw, pixels, norm, count))| OverlapEntry {
                child,
                class,
                raw,
                pixels,
                normalized: norm / count as f64,
            })
            .collect(),
    };
    let selected_classes = table
        .entries
        .iter()
        .filter(|e| e.child == selected_child)
        .map(|e| e.class)
        .collect();
    Ok(NodeRule {
        node,
        selected_child,
        selected_classes,
        child_scores,
        table,
        tie,
        support: per_image.len(),
    })
}

/// Pixels of a `(d, H, W)` feature map whose hard path visits `node`.
pub fn routed_pixels<T: Scalar>(h: &InducedHierarchy, features: ArrayView3<T>, node: usize) -> Result<Vec<(usize, usize)>> {
    let (_, height, width) = features.dim();
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let f: Vec<f64> = features.slice(ndarray::s![.., y, x]).iter().map(|v| v.as_f64()).collect();
            if hard_path(h, &f)?.steps.iter().any(|s| s.node == node) {
                out.push((x, y));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VdrConfig {
    pub layer: String,
    pub overlap: OverlapMode,
}

impl Default for VdrConfig {
    fn default() -> Self {
        Self {
            layer: crate::model::FEATURES_LAYER.into(),
            overlap: OverlapMode::Continuous,
        }
    }
}

/// Per-image overlap table of `node`, or `None` if no pixel of the image is
/// routed through it.
pub fn node_overlap<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    node: usize,
    image: ArrayView3<f32>,
    label: ArrayView2<u16>,
    cfg: &VdrConfig,
) -> Result<Option<OverlapTable>> {
    let n = &h.nodes[node];
    if n.is_leaf() {
        return Err(Error::LeafHasNoChildren(node));
    }
    let ctx = SaliencyContext::new(net, image, &cfg.layer)?;
    let routed = routed_pixels(h, ctx.features().view(), node)?;
    if routed.is_empty() {
        return Ok(None);
    }
    let set = PixelSet::new(routed)?;
    let maps = (0..n.children.len())
        .map(|j| ctx.node_grad_pam(h, node, j, &set, PamVariant::Relu).map(|m| m.values))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<ArrayView2<f64>> = maps.iter().map(|m| m.view()).collect();
    let class_sets: Vec<Vec<usize>> = n.children.iter().map(|&c| h.nodes[c].class_set.clone()).collect();
    overlap_scores(&views, label, &class_sets, cfg.overlap).map(Some)
}

/// Coarse rule of one node over a set of labelled images.
pub fn coarse_rule<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    node: usize,
    images: &[(ArrayView3<f32>, ArrayView2<u16>)],
    cfg: &VdrConfig,
) -> Result<NodeRule> {
    let n = h.nodes.get(node).ok_or(Error::InvalidArgument(format!("no node {node}")))?;
    if n.is_leaf() {
        return Err(Error::LeafHasNoChildren(node));
    }
    let mut tables = Vec::new();
    for (image, label) in images {
        if let Some(t) = node_overlap(net, h, node, *image, *label, cfg)? {
            tables.push(t);
        }
    }
    aggregate_rule(node, n.children.len(), &tables)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleOutcome {
    pub node: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<NodeRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Rule for every inner node; failures are recorded per node.
pub fn annotate_hierarchy<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    images: &[(ArrayView3<f32>, ArrayView2<u16>)],
    cfg: &VdrConfig,
) -> Vec<RuleOutcome> {
    h.inner_nodes()
        .into_iter()
        .map(|node| match coarse_rule(net, h, node, images, cfg) {
            Ok(rule) => RuleOutcome {
                node,
                rule: Some(rule),
                error: None,
            },
            Err(e) => RuleOutcome {
                node,
                rule: None,
                error: Some(e.to_string()),
            },
        })
        .collect()
}

/// `node_rules.json` body: rules with class ids resolved to names.
pub fn rules_to_json(rules: &[RuleOutcome], h: &InducedHierarchy) -> serde_json::Value {
    let name = |c: usize| h.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    let nodes: Vec<serde_json::Value> = rules
        .iter()
        .map(|r| match &r.rule {
            Some(rule) => serde_json::json!({
                "node": r.node,
                "selected_child": rule.selected_child,
                "selected_child_node": h.nodes[r.node].children[rule.selected_child],
                "class_set": rule.selected_classes.iter().map(|&c| name(c)).collect::<Vec<_>>(),
                "child_class_sets": h.nodes[r.node].children.iter()
                    .map(|&c| h.nodes[c].class_set.iter().map(|&k| name(k)).collect::<Vec<_>>())
                    .collect::<Vec<_>>(),
                "child_scores": rule.child_scores,
                "overlap": rule.table.entries.iter().map(|e| serde_json::json!({
                    "child": e.child,
                    "class": name(e.class),
                    "raw": e.raw,
                    "pixels": e.pixels,
                    "normalized": e.normalized,
                })).collect::<Vec<_>>(),
                "tie": rule.tie,
                "support": rule.support,
            }),
            None => serde_json::json!({
                "node": r.node,
                "error": r.error,
            }),
        })
        .collect();
    serde_json::json!({ "nodes": nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::rng_for;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn indicator_saliency_normalizes_to_one() {
        let label = array![[0u16, 1, 1], [2, 1, 0]];
        let sal = label.mapv(|l| f64::from(l == 1));
        let t = overlap_scores(&[sal.view()], label.view(), &[vec![0, 1, 2]], OverlapMode::Continuous).unwrap();
        let get = |c| t.entries.iter().find(|e| e.class == c).unwrap();
        assert_eq!((get(1).raw, get(1).pixels, get(1).normalized), (3.0, 3, 1.0));
        assert_eq!(get(0).raw, 0.0);
        assert_eq!(get(2).normalized, 0.0);
    }

    #[test]
    fn zero_saliency_gives_zero_table() {
        let label = array![[0u16, 1], [1, 1]];
        let z = Array2::<f64>::zeros((2, 2));
        let t = overlap_scores(&[z.view(), z.view()], label.view(), &[vec![0], vec![1]], OverlapMode::Continuous)
            .unwrap();
        assert!(t.entries.iter().all(|e| e.raw == 0.0 && e.normalized == 0.0));
        assert_eq!(t.entries.len(), 2);
    }

    #[test]
    fn absent_classes_are_left_out() {
        let label = array![[0u16, 0]];
        let s = array![[1.0, 1.0]];
        let t = overlap_scores(&[s.view()], label.view(), &[vec![0, 5]], OverlapMode::Continuous).unwrap();
        assert_eq!(t.entries.len(), 1);
    }

    #[test]
    fn size_bias_is_removed_by_normalization() {
        // Class 0 has 10x the pixels of class 1 under a constant map.
        let label = Array2::from_shape_fn((11, 10), |(y, _)| u16::from(y == 10));
        let ones = Array2::<f64>::ones((11, 10));
        let t = overlap_scores(&[ones.view(), ones.view()], label.view(), &[vec![0], vec![1]], OverlapMode::Continuous)
            .unwrap();
        assert_eq!(t.entries[0].raw, 10.0 * t.entries[1].raw);
        assert_eq!(t.entries[0].normalized, t.entries[1].normalized);
    }

    #[test]
    fn upsampling_and_mismatch() {
        let label = Array2::from_shape_fn((4, 4), |(y, x)| u16::from(y < 2 && x < 2));
        let small = array![[1.0, 0.0], [0.0, 0.0]];
        let t = overlap_scores(&[small.view()], label.view(), &[vec![1]], OverlapMode::Continuous).unwrap();
        assert_eq!(t.entries[0].normalized, 1.0);
        let odd = Array2::<f64>::zeros((3, 3));
        assert!(matches!(
            overlap_scores(&[odd.view()], label.view(), &[vec![1]], OverlapMode::Continuous),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn threshold_mode_counts_hot_pixels() {
        let label = array![[0u16, 0, 1, 1]];
        let s = array![[0.9, 0.1, 1.0, 0.6]];
        let t = overlap_scores(&[s.view()], label.view(), &[vec![0, 1]], OverlapMode::Threshold { tau: 0.5 }).unwrap();
        assert_eq!(t.entries[0].raw, 1.0);
        assert_eq!(t.entries[1].raw, 2.0);
    }

    #[test]
    fn ties_select_the_first_child() {
        let t = OverlapTable {
            entries: vec![
                OverlapEntry {
                    child: 0,
                    class: 0,
                    raw: 2.0,
                    pixels: 2,
                    normalized: 1.0,
                },
                OverlapEntry {
                    child: 1,
                    class: 1,
                    raw: 3.0,
                    pixels: 3,
                    normalized: 1.0,
                },
            ],
        };
        let rule = aggregate_rule(7, 2, &[t.clone(), t]).unwrap();
        assert!(rule.tie);
        assert_eq!(rule.selected_child, 0);
        assert_eq!(rule.support, 2);
        assert!(matches!(aggregate_rule(7, 2, &[]), Err(Error::NoRoutedPixels(7))));
    }

    fn scenario(c: usize, seed: u64) -> (Network<f32>, InducedHierarchy, Vec<(Array3<f32>, Array2<u16>)>) {
        let mut cfg = ModelConfig::new(c, seed);
        cfg.min_input = 1;
        let net = Network::<f32>::new(cfg).unwrap();
        let h = InducedHierarchy::induce(net.final_layer_weights()).unwrap();
        let mut rng = rng_for(seed, &[3]);
        let data = (0..2)
            .map(|_| {
                let img = Array3::from_shape_simple_fn((10, 10, 3), || rng.gen::<f32>());
                let label = Array2::from_shape_simple_fn((10, 10), || rng.gen_range(0..c as u16));
                (img, label)
            })
            .collect();
        (net, h, data)
    }

    #[test]
    fn annotation_covers_every_inner_node() {
        for c in [2, 5] {
            let (net, h, data) = scenario(c, c as u64);
            let views: Vec<_> = data.iter().map(|(i, l)| (i.view(), l.view())).collect();
            let rules = annotate_hierarchy(&net, &h, &views, &VdrConfig::default());
            assert_eq!(rules.len(), c - 1);
            let again = annotate_hierarchy(&net, &h, &views, &VdrConfig::default());
            assert_eq!(rules, again);
            for r in rules.iter().filter_map(|r| r.rule.as_ref()) {
                let chosen = h.node(h.node(r.node).children[r.selected_child]);
                assert!(r.selected_classes.iter().all(|c| chosen.class_set.contains(c)));
                assert!(r.support <= 2);
            }
            let json = rules_to_json(&rules, &h);
            assert_eq!(json["nodes"].as_array().unwrap().len(), c - 1);
        }
    }

    #[test]
    fn routed_pixels_of_the_root_are_everything() {
        let (net, h, data) = scenario(3, 1);
        let f = net.features(data[0].0.view()).unwrap();
        assert_eq!(routed_pixels(&h, f.view(), h.root_id).unwrap().len(), 100);
    }

    proptest! {
        #[test]
        fn overlap_matches_double_loop(seed in 0u64..500, lambda in 0.01f64..100.0) {
            let mut rng = rng_for(seed, &[]);
            let label = Array2::from_shape_simple_fn((7, 9), || rng.gen_range(0..4u16));
            let maps: Vec<Array2<f64>> = (0..2).map(|_| Array2::from_shape_simple_fn((7, 9), || rng.gen::<f64>())).collect();
            let sets = vec![vec![0, 2], vec![1, 3]];
            let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
            let t = overlap_scores(&views, label.view(), &sets, OverlapMode::Continuous).unwrap();
            for e in &t.entries {
                let mut raw = 0.0;
                let mut count = 0;
                for y in 0..7 {
                    for x in 0..9 {
                        if label[[y, x]] as usize == e.class {
                            raw += maps[e.child][[y, x]];
                            count += 1;
                        }
                    }
                }
                prop_assert!((e.raw - raw).abs() < 1e-12);
                prop_assert_eq!(e.pixels, count);
            }
            let scaled: Vec<Array2<f64>> = maps.iter().map(|m| m * lambda).collect();
            let sviews: Vec<_> = scaled.iter().map(|m| m.view()).collect();
            let ts = overlap_scores(&sviews, label.view(), &sets, OverlapMode::Continuous).unwrap();
            let a = aggregate_rule(0, 2, &[t]).unwrap();
            let b = aggregate_rule(0, 2, &[ts]).unwrap();
            prop_assert_eq!(a.selected_child, b.selected_child);
        }
    }
}
