use std::sync::RwLock;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use super::softmax;
use crate::error::{Error, Result};
use crate::hierarchy::InducedHierarchy;
use crate::model::{cross_entropy_grad, train_with_loss, Checkpoint, LossGrad, Network, TrainConfig, TrainingLoss};
use crate::scalar::Scalar;
use crate::synth::SegmentationSample;

/// Cross-entropy on the scores plus `omega` times the cross-entropy of the
/// soft leaf distribution, both averaged over non-ignore pixels.
///
/// Representatives are taken from `weights` through the structure of `h`
/// (each node is the mean of its classes' rows), so the gradient reaches
/// every classifier row under a node.
pub fn tree_loss_grad<T: Scalar>(
    h: &InducedHierarchy,
    weights: ArrayView2<T>,
    features: &Array3<T>,
    scores: &Array3<T>,
    label: &Array2<u16>,
    ignore: &Array2<bool>,
    omega: f64,
) -> Result<LossGrad<T>> {
    let mut out = cross_entropy_grad(weights, features, scores, label, ignore)?;
    if omega == 0.0 {
        return Ok(out);
    }
    let (d, height, width) = features.dim();
    if weights.dim() != (h.num_classes(), h.d) || d != h.d {
        return Err(Error::HierarchyDimensionMismatch {
            hierarchy: h.d,
            model: d,
        });
    }
    // Every node except the root is somebody's child and gets a row.
    let members: Vec<usize> = (0..h.nodes.len()).filter(|&id| id != h.root_id).collect();
    let mut row_of = vec![usize::MAX; h.nodes.len()];
    for (m, &id) in members.iter().enumerate() {
        row_of[id] = m;
    }
    let mut reps = Array2::<T>::zeros((members.len(), d));
    for (m, &id) in members.iter().enumerate() {
        let set = &h.nodes[id].class_set;
        let inv = T::from_f64(1.0 / set.len() as f64);
        for &c in set {
            reps.row_mut(m).scaled_add(inv, &weights.row(c));
        }
    }
    let hw = height * width;
    let flat = features.view().into_shape_with_order((d, hw)).expect("contiguous features");
    let child_scores = reps.dot(&flat);
    let paths: Vec<Vec<(usize, usize)>> = (0..h.num_classes())
        .map(|c| h.path_to_class(c))
        .collect::<Result<_>>()?;

    let n = ignore.iter().filter(|&&i| !i).count();
    let scale = omega / n as f64;
    let mut g = Array2::<T>::zeros((members.len(), hw));
    let mut soft = 0.0;
    for y in 0..height {
        for x in 0..width {
            if ignore[[y, x]] {
                continue;
            }
            let col = y * width + x;
            for &(node, j) in &paths[label[[y, x]] as usize] {
                let rows: Vec<usize> = h.nodes[node].children.iter().map(|&ch| row_of[ch]).collect();
                let s: Vec<f64> = rows.iter().map(|&r| child_scores[[r, col]].as_f64()).collect();
                let p = softmax(&s);
                soft -= p[j].ln();
                for (k, &r) in rows.iter().enumerate() {
                    let delta = if k == j { 1.0 } else { 0.0 };
                    g[[r, col]] = T::from_f64((p[k] - delta) * scale);
                }
            }
        }
    }
    let d_feat = reps.t().dot(&g).into_shape_with_order((d, height, width)).expect("feature shape");
    let d_reps = g.dot(&flat.t());
    let mut d_weights = out.d_weights;
    for (m, &id) in members.iter().enumerate() {
        let set = &h.nodes[id].class_set;
        let inv = T::from_f64(1.0 / set.len() as f64);
        for &c in set {
            d_weights.row_mut(c).scaled_add(inv, &d_reps.row(m));
        }
    }
    out.loss += omega * soft / n as f64;
    out.d_features = out.d_features + d_feat;
    out.d_weights = d_weights;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Weight of the tree term.
    pub omega: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Re-induce the tree structure after every epoch.
    pub refresh_hierarchy: bool,
    pub cosine_decay: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            omega: 1.0,
            epochs: 4,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            refresh_hierarchy: false,
            cosine_decay: true,
        }
    }
}

/// [`TrainingLoss`] wrapper around [`tree_loss_grad`].
pub struct TreeSupervisionLoss {
    structure: RwLock<InducedHierarchy>,
    pub omega: f64,
    pub refresh_hierarchy: bool,
}

impl TreeSupervisionLoss {
    pub fn new(h: InducedHierarchy, omega: f64, refresh_hierarchy: bool) -> Self {
        Self {
            structure: RwLock::new(h),
            omega,
            refresh_hierarchy,
        }
    }

    pub fn hierarchy(&self) -> InducedHierarchy {
        self.structure.read().expect("lock").clone()
    }
}

impl<T: Scalar> TrainingLoss<T> for TreeSupervisionLoss {
    fn loss_grad(
        &self,
        net: &Network<T>,
        features: &Array3<T>,
        scores: &Array3<T>,
        sample: &SegmentationSample,
    ) -> Result<LossGrad<T>> {
        let h = self.structure.read().expect("lock");
        tree_loss_grad(
            &h,
            net.final_layer_weights(),
            features,
            scores,
            &sample.label,
            &sample.ignore,
            self.omega,
        )
    }

    fn end_epoch(&self, net: &Network<T>) -> Result<()> {
        if self.refresh_hierarchy {
            let mut h = self.structure.write().expect("lock");
            let names = h.class_names.clone();
            *h = InducedHierarchy::induce_named(net.final_layer_weights(), names)?;
        }
        Ok(())
    }
}

/// Fine-tunes a trained network under the tree loss. Returns the new
/// checkpoint and the hierarchy with representatives taken from the final
/// weights.
pub fn finetune(
    base: &Checkpoint,
    h: &InducedHierarchy,
    samples: &[SegmentationSample],
    config: &FinetuneConfig,
) -> Result<(Checkpoint, InducedHierarchy)> {
    let mut net = base.network.clone();
    if net.feature_dim() != h.d || net.num_classes() != h.num_classes() {
        return Err(Error::HierarchyDimensionMismatch {
            hierarchy: h.d,
            model: net.feature_dim(),
        });
    }
    let loss = TreeSupervisionLoss::new(h.clone(), config.omega, config.refresh_hierarchy);
    let train_cfg = TrainConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        seed: config.seed,
        cosine_decay: config.cosine_decay,
    };
    let history = train_with_loss(&mut net, samples, &train_cfg, &loss)?;
    let tree = loss.hierarchy().with_weights(net.final_layer_weights())?;
    Ok((
        Checkpoint {
            network: net,
            stage: "finetune".into(),
            training: serde_json::to_value(config)?,
            seed: config.seed,
            history,
        },
        tree,
    ))
}
