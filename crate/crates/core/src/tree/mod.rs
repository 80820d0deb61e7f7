//! Decision-tree inference over per-pixel features.
//!
//! Every inner node scores its children by inner product with their
//! representatives. Hard inference descends greedily; soft inference
//! multiplies per-node softmax probabilities along each root-to-leaf path.

mod loss;

use std::io::Write;

use ndarray::{s, Array2, ArrayView3};
use serde::{Deserialize, Serialize};

pub use loss::{finetune, tree_loss_grad, FinetuneConfig, TreeSupervisionLoss};

use crate::error::{Error, Result};
use crate::hierarchy::InducedHierarchy;
use crate::model::{Network, Segmenter};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Hard,
    Soft,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: usize,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
    pub chosen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPath {
    pub steps: Vec<PathStep>,
    pub leaf_class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafDistribution {
    pub probs: Vec<f64>,
}

impl LeafDistribution {
    /// Most probable class, ties to the lowest.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn check_dim(h: &InducedHierarchy, x: &[f64]) -> Result<()> {
    if x.len() != h.d {
        return Err(Error::HierarchyDimensionMismatch {
            hierarchy: h.d,
            model: x.len(),
        });
    }
    Ok(())
}

/// `<x, representative(child)>` for each child of `node_id`, in order.
pub fn node_scores(h: &InducedHierarchy, node_id: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(h, x)?;
    let node = h.nodes.get(node_id).ok_or(Error::InvalidArgument(format!("no node {node_id}")))?;
    if node.is_leaf() {
        return Err(Error::LeafHasNoChildren(node_id));
    }
    Ok(node
        .children
        .iter()
        .map(|&c| h.nodes[c].representative.iter().zip(x).map(|(r, v)| r * v).sum())
        .collect())
}

pub fn hard_path(h: &InducedHierarchy, x: &[f64]) -> Result<DecisionPath> {
    check_dim(h, x)?;
    let mut steps = Vec::new();
    let mut id = h.root_id;
    while !h.nodes[id].is_leaf() {
        let scores = node_scores(h, id, x)?;
        let chosen = argmax(&scores);
        let probs = softmax(&scores);
        steps.push(PathStep {
            node: id,
            scores,
            probs,
            chosen,
        });
        id = h.nodes[id].children[chosen];
    }
    Ok(DecisionPath {
        steps,
        leaf_class: h.nodes[id].leaf_class.expect("leaves carry a class"),
    })
}

pub fn soft_distribution(h: &InducedHierarchy, x: &[f64]) -> Result<LeafDistribution> {
    check_dim(h, x)?;
    let mut probs = vec![0.0; h.num_classes()];
    let mut stack = vec![(h.root_id, 1.0)];
    while let Some((id, p)) = stack.pop() {
        let node = &h.nodes[id];
        if let Some(c) = node.leaf_class {
            probs[c] = p;
            continue;
        }
        let child_probs = softmax(&node_scores(h, id, x)?);
        for (&child, q) in node.children.iter().zip(child_probs) {
            stack.push((child, p * q));
        }
    }
    Ok(LeafDistribution { probs })
}

fn pixel_features<T: Scalar>(features: ArrayView3<T>, y: usize, x: usize) -> Vec<f64> {
    features.slice(s![.., y, x]).iter().map(|v| v.as_f64()).collect()
}

/// Tree prediction for every pixel of a `(d, H, W)` feature map.
pub fn predict_features<T: Scalar>(
    h: &InducedHierarchy,
    features: ArrayView3<T>,
    mode: InferenceMode,
) -> Result<Array2<u16>> {
    let (d, height, width) = features.dim();
    if d != h.d {
        return Err(Error::HierarchyDimensionMismatch {
            hierarchy: h.d,
            model: d,
        });
    }
    let mut out = Array2::zeros((height, width));
    for y in 0..height {
        for x in 0..width {
            let f = pixel_features(features, y, x);
            out[[y, x]] = match mode {
                InferenceMode::Hard => hard_path(h, &f)?.leaf_class,
                InferenceMode::Soft => soft_distribution(h, &f)?.argmax(),
            } as u16;
        }
    }
    Ok(out)
}

pub fn predict_image<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    image: ArrayView3<f32>,
    mode: InferenceMode,
) -> Result<Array2<u16>> {
    if net.feature_dim() != h.d {
        return Err(Error::HierarchyDimensionMismatch {
            hierarchy: h.d,
            model: net.feature_dim(),
        });
    }
    predict_features(h, net.features(image)?.view(), mode)
}

/// A network whose classifier is replaced by a tree.
#[derive(Debug, Clone, Copy)]
pub struct SegNbdt<'a, T> {
    pub network: &'a Network<T>,
    pub hierarchy: &'a InducedHierarchy,
    pub mode: InferenceMode,
}

impl<T: Scalar> Segmenter for SegNbdt<'_, T> {
    fn segment(&self, image: ArrayView3<f32>) -> Result<Array2<u16>> {
        predict_image(self.network, self.hierarchy, image, self.mode)
    }
}

/// Hard decision path of every pixel, row-major.
pub fn decision_paths<T: Scalar>(h: &InducedHierarchy, features: ArrayView3<T>) -> Result<Array2<DecisionPath>> {
    let (_, height, width) = features.dim();
    let mut paths = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            paths.push(hard_path(h, &pixel_features(features, y, x))?);
        }
    }
    Ok(Array2::from_shape_vec((height, width), paths).expect("one path per pixel"))
}

#[derive(Serialize)]
struct PathLine<'a> {
    x: usize,
    y: usize,
    steps: Vec<StepLine<'a>>,
    leaf: usize,
}

#[derive(Serialize)]
struct StepLine<'a> {
    node: usize,
    probs: &'a [f64],
    chosen: usize,
}

/// One JSON object per pixel: `{x, y, steps: [{node, probs, chosen}], leaf}`.
pub fn write_paths_jsonl(paths: &Array2<DecisionPath>, out: &mut impl Write) -> Result<()> {
    for ((y, x), p) in paths.indexed_iter() {
        let line = PathLine {
            x,
            y,
            steps: p
                .steps
                .iter()
                .map(|s| StepLine {
                    node: s.node,
                    probs: &s.probs,
                    chosen: s.chosen,
                })
                .collect(),
            leaf: p.leaf_class,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    use crate::model::ModelConfig;
    use crate::rng::rng_for;

    fn random_tree(c: usize, d: usize, seed: u64) -> InducedHierarchy {
        let mut rng = rng_for(seed, &[]);
        let w = Array2::from_shape_simple_fn((c, d), || rng.gen_range(-1.0..1.0));
        InducedHierarchy::induce(w.view()).unwrap()
    }

    /// Every root-to-leaf product enumerated from the leaf upwards.
    fn path_product_oracle(h: &InducedHierarchy, x: &[f64]) -> Vec<f64> {
        (0..h.num_classes())
            .map(|c| {
                let mut p = 1.0;
                let mut id = h.leaf_of(c).unwrap();
                while let Some(parent) = h.parent(id) {
                    let node = h.node(parent);
                    let scores: Vec<f64> = node
                        .children
                        .iter()
                        .map(|&ch| h.node(ch).representative.iter().zip(x).map(|(a, b)| a * b).sum())
                        .collect();
                    let z: f64 = scores.iter().map(|s| s.exp()).sum();
                    let j = node.children.iter().position(|&ch| ch == id).unwrap();
                    p *= scores[j].exp() / z;
                    id = parent;
                }
                p
            })
            .collect()
    }

    #[test]
    fn scores_are_inner_products() {
        let h = InducedHierarchy::induce(array![[2.0, 0.0], [0.0, 2.0]].view()).unwrap();
        assert_eq!(node_scores(&h, 2, &[2.0, 0.0]).unwrap(), [4.0, 0.0]);
        assert_eq!(node_scores(&h, 2, &[0.0, 0.0]).unwrap(), [0.0, 0.0]);
        assert!(matches!(node_scores(&h, 0, &[1.0, 1.0]), Err(Error::LeafHasNoChildren(0))));
    }

    #[test]
    fn random_scores_match_direct_dot_products() {
        let h = random_tree(4, 6, 3);
        let x = [0.3, -1.0, 0.25, 2.0, -0.5, 0.1];
        for id in h.inner_nodes() {
            let got = node_scores(&h, id, &x).unwrap();
            for (j, &ch) in h.node(id).children.iter().enumerate() {
                let mut dot = 0.0;
                for k in 0..6 {
                    dot += h.node(ch).representative[k] * x[k];
                }
                assert!((got[j] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_class_hard_path() {
        let h = InducedHierarchy::induce(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
        let p = hard_path(&h, &[0.1, 0.9]).unwrap();
        assert_eq!(p.leaf_class, 1);
        assert_eq!(p.steps.len(), 1);
        let zero = hard_path(&h, &[0.0, 0.0]).unwrap();
        assert_eq!(zero.leaf_class, 0);
        assert_eq!(soft_distribution(&h, &[0.0, 0.0]).unwrap().probs, [0.5, 0.5]);
    }

    #[test]
    fn zero_features_reach_the_leftmost_leaf() {
        let h = random_tree(6, 5, 8);
        let path = hard_path(&h, &[0.0; 5]).unwrap();
        let mut id = h.root_id;
        while !h.node(id).is_leaf() {
            id = h.node(id).children[0];
        }
        assert_eq!(path.leaf_class, h.node(id).leaf_class.unwrap());
        assert!(path.steps.iter().all(|s| s.chosen == 0));
    }

    #[test]
    fn balanced_ties_are_uniform() {
        let h = InducedHierarchy::induce(Array2::<f64>::eye(4).view()).unwrap();
        let probs = soft_distribution(&h, &[0.0; 4]).unwrap().probs;
        assert_eq!(probs, [0.25; 4]);
    }

    #[test]
    fn strict_margins_reach_their_leaf() {
        let h = random_tree(5, 8, 12);
        let mut rng = rng_for(99, &[]);
        for c in 0..5 {
            let path = h.path_to_class(c).unwrap();
            let x = (0..20_000)
                .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
                .find(|x| {
                    path.iter().all(|&(node, j)| {
                        let dot = |ch: usize| -> f64 { h.node(ch).representative.iter().zip(x).map(|(a, b)| a * b).sum() };
                        let kids = &h.node(node).children;
                        dot(kids[j]) > dot(kids[1 - j])
                    })
                })
                .expect("some random vector has strict margins");
            assert_eq!(hard_path(&h, &x).unwrap().leaf_class, c);
        }
    }

    #[test]
    fn predict_matches_pixelwise_oracle() {
        let net = Network::<f64>::new(ModelConfig::new(5, 4)).unwrap();
        let h = InducedHierarchy::induce(net.final_layer_weights()).unwrap();
        let mut rng = rng_for(5, &[]);
        let img = Array3::from_shape_simple_fn((16, 16, 3), || rng.gen::<f32>());
        let feats = net.features(img.view()).unwrap();
        let hard = predict_image(&net, &h, img.view(), InferenceMode::Hard).unwrap();
        assert_eq!(hard.dim(), (16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let f: Vec<f64> = (0..16).map(|k| feats[[k, y, x]]).collect();
                assert_eq!(hard[[y, x]] as usize, hard_path(&h, &f).unwrap().leaf_class);
            }
        }
        let soft = predict_image(&net, &h, img.view(), InferenceMode::Soft).unwrap();
        assert!(soft.iter().all(|&v| v < 5));
    }

    #[test]
    fn dimension_mismatch() {
        let net = Network::<f32>::new(ModelConfig::new(4, 4)).unwrap();
        let h = random_tree(4, 6, 1);
        let img = Array3::zeros((8, 8, 3));
        assert!(matches!(
            predict_image(&net, &h, img.view(), InferenceMode::Hard),
            Err(Error::HierarchyDimensionMismatch { hierarchy: 6, model: 16 })
        ));
    }

    #[test]
    fn jsonl_has_one_line_per_pixel() {
        let h = random_tree(3, 2, 2);
        let feats = Array3::from_shape_fn((2, 2, 3), |(k, y, x)| (k + y * x) as f64);
        let paths = decision_paths(&h, feats.view()).unwrap();
        let mut buf = Vec::new();
        write_paths_jsonl(&paths, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["x"], 0);
        assert!(first["steps"][0]["probs"].is_array());
    }

    proptest! {
        #[test]
        fn soft_distribution_properties(seed in 0u64..1000, c in 2usize..7, x in proptest::collection::vec(-3.0f64..3.0, 4), lambda in 0.01f64..50.0) {
            let h = random_tree(c, 4, seed);
            let dist = soft_distribution(&h, &x).unwrap();
            prop_assert!((dist.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(dist.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
            let oracle = path_product_oracle(&h, &x);
            for (a, b) in dist.probs.iter().zip(&oracle) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            let path = hard_path(&h, &x).unwrap();
            for s in &path.steps {
                prop_assert!((s.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
            let path_prob: f64 = path.steps.iter().map(|s| s.probs[s.chosen]).product();
            if path_prob > 0.5 {
                prop_assert_eq!(dist.argmax(), path.leaf_class);
            }
            let scaled: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let path_scaled = hard_path(&h, &scaled).unwrap();
            prop_assert_eq!(
                path.steps.iter().map(|s| s.chosen).collect::<Vec<_>>(),
                path_scaled.steps.iter().map(|s| s.chosen).collect::<Vec<_>>()
            );
        }
    }
}
