//! Gradient saliency on a segmentation network.
//!
//! Grad-CAM weights each activation channel by its spatially averaged
//! gradient. Grad-PAM keeps the gradient as a full map per channel and
//! multiplies it elementwise with the activation, so the saliency of one
//! output pixel stays spatially resolved.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::InducedHierarchy;
use crate::model::{Network, Selector};
use crate::scalar::Scalar;

/// How the signed per-pixel map `sum_k G_k * A_k` is made nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PamVariant {
    Relu,
    /// `|pre| = relu(pre) + relu(-pre)`; keeps evidence against the target.
    Abs,
}

impl PamVariant {
    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Relu => v.max(0.0),
            Self::Abs => v.max(0.0) + (-v).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaliencyTarget {
    Class { class: usize },
    Node { node: usize, child: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `(H, W)` at the target layer's resolution.
    pub values: Array2<f64>,
    pub target: SaliencyTarget,
    pub layer: String,
    /// Number of output pixels summed into the map (1 for single pixels
    /// and Grad-CAM).
    pub pixels: usize,
}

impl SaliencyMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: &self.values * s,
            ..self.clone()
        }
    }
}

/// Nonempty, deduplicated pixel set `(x, y)`, kept in row-major order so
/// that sums over it are reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelSet {
    pixels: Vec<(usize, usize)>,
}

impl PixelSet {
    pub fn new(mut pixels: Vec<(usize, usize)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::EmptySet);
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        pixels.dedup();
        Ok(Self { pixels })
    }

    pub fn from_mask(mask: ArrayView2<bool>) -> Result<Self> {
        Self::new(mask.indexed_iter().filter(|(_, &m)| m).map(|((y, x), _)| (x, y)).collect())
    }

    pub fn pixels(&self) -> &[(usize, usize)] {
        &self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Activations of every layer of one image, reused across many queries.
pub struct SaliencyContext<'a, T> {
    pub net: &'a Network<T>,
    pub layer: String,
    layer_index: usize,
    acts: Vec<Array3<T>>,
}

impl<'a, T: Scalar> SaliencyContext<'a, T> {
    pub fn new(net: &'a Network<T>, image: ArrayView3<f32>, layer: &str) -> Result<Self> {
        let layer_index = net.layer_index(layer)?;
        Ok(Self {
            net,
            layer: layer.to_string(),
            layer_index,
            acts: net.activations(image)?,
        })
    }

    pub fn activation(&self) -> &Array3<T> {
        &self.acts[self.layer_index]
    }

    pub fn features(&self) -> &Array3<T> {
        self.acts.last().expect("nonempty")
    }

    fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.features().dim();
        (h, w)
    }

    pub fn gradient(&self, selector: &Selector) -> Result<Array3<T>> {
        self.net.grad_query_with(&self.acts, &self.layer, selector)
    }

    /// Signed map `sum_k G_k * A_k`.
    pub fn weighted_sum(&self, grad: &Array3<T>) -> Array2<f64> {
        let a = self.activation();
        let (_, h, w) = a.dim();
        let mut out = Array2::<f64>::zeros((h, w));
        for (gk, ak) in grad.outer_iter().zip(a.outer_iter()) {
            Zip::from(&mut out).and(&gk).and(&ak).for_each(|o, &g, &v| *o += g.as_f64() * v.as_f64());
        }
        out
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.net.num_classes() {
            return Err(Error::UnknownClass(class));
        }
        Ok(())
    }

    fn check_pixel(&self, x: usize, y: usize) -> Result<()> {
        let (h, w) = self.dims();
        if x >= w || y >= h {
            return Err(Error::OutOfBounds { x, y });
        }
        Ok(())
    }

    /// `ReLU(sum_k alpha_k A_k)` with `alpha_k` the mean gradient of the
    /// spatially averaged class score.
    pub fn grad_cam(&self, class: usize) -> Result<SaliencyMap> {
        self.check_class(class)?;
        let grad = self.gradient(&Selector::ClassMean { class })?;
        let alpha = channel_weights(&grad);
        let a = self.activation();
        let (_, h, w) = a.dim();
        let mut pre = Array2::<f64>::zeros((h, w));
        for (k, ak) in a.outer_iter().enumerate() {
            pre.zip_mut_with(&ak, |o, &v| *o += alpha[k] * v.as_f64());
        }
        Ok(SaliencyMap {
            values: pre.mapv(|v| v.max(0.0)),
            target: SaliencyTarget::Class { class },
            layer: self.layer.clone(),
            pixels: 1,
        })
    }

    fn pixel_selector(&self, target: &SaliencyTarget, x: usize, y: usize, h: Option<&InducedHierarchy>) -> Result<Selector> {
        match target {
            SaliencyTarget::Class { class } => Ok(Selector::ClassScore { class: *class, x, y }),
            SaliencyTarget::Node { node, child } => {
                let h = h.expect("node targets carry a hierarchy");
                Ok(Selector::FeatureDot {
                    direction: h.nodes[h.nodes[*node].children[*child]].representative.clone(),
                    x,
                    y,
                })
            }
        }
    }

    fn pam_sum(
        &self,
        target: SaliencyTarget,
        set: &PixelSet,
        h: Option<&InducedHierarchy>,
        variant: PamVariant,
    ) -> Result<SaliencyMap> {
        for &(x, y) in set.pixels() {
            self.check_pixel(x, y)?;
        }
        let (_, height, width) = self.activation().dim();
        // Fixed-size chunks summed in order keep the result independent of
        // the number of worker threads.
        let partial: Vec<Array2<f64>> = set
            .pixels()
            .par_chunks(32)
            .map(|chunk| {
                let mut acc = Array2::<f64>::zeros((height, width));
                for &(x, y) in chunk {
                    let grad = self.gradient(&self.pixel_selector(&target, x, y, h)?)?;
                    let pre = self.weighted_sum(&grad);
                    Zip::from(&mut acc).and(&pre).for_each(|a, &p| *a += variant.apply(p));
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut values = Array2::<f64>::zeros((height, width));
        for p in &partial {
            values += p;
        }
        Ok(SaliencyMap {
            values,
            target,
            layer: self.layer.clone(),
            pixels: set.len(),
        })
    }

    pub fn grad_pam(&self, class: usize, x: usize, y: usize, variant: PamVariant) -> Result<SaliencyMap> {
        self.check_class(class)?;
        self.pam_sum(SaliencyTarget::Class { class }, &PixelSet::new(vec![(x, y)])?, None, variant)
    }

    /// Sum of the per-pixel Grad-PAM maps over `set`.
    pub fn grad_pam_group(&self, class: usize, set: &PixelSet, variant: PamVariant) -> Result<SaliencyMap> {
        self.check_class(class)?;
        self.pam_sum(SaliencyTarget::Class { class }, set, None, variant)
    }

    /// Grad-PAM of node `node`'s score for child `child`, summed over `set`.
    pub fn node_grad_pam(
        &self,
        h: &InducedHierarchy,
        node: usize,
        child: usize,
        set: &PixelSet,
        variant: PamVariant,
    ) -> Result<SaliencyMap> {
        let n = h.nodes.get(node).ok_or(Error::InvalidArgument(format!("no node {node}")))?;
        if n.is_leaf() {
            return Err(Error::LeafHasNoChildren(node));
        }
        if child >= n.children.len() {
            return Err(Error::InvalidArgument(format!("node {node} has no child {child}")));
        }
        if h.d != self.net.feature_dim() {
            return Err(Error::HierarchyDimensionMismatch {
                hierarchy: h.d,
                model: self.net.feature_dim(),
            });
        }
        self.pam_sum(SaliencyTarget::Node { node, child }, set, Some(h), variant)
    }

    /// Mean Grad-PAM over the pixels where `label_map == class`, targeting
    /// either the class score or a node's child score.
    pub fn class_average(
        &self,
        target: &SaliencyTarget,
        h: Option<&InducedHierarchy>,
        label_map: ArrayView2<u16>,
        class: usize,
        variant: PamVariant,
    ) -> Result<SaliencyMap> {
        let mask = label_map.mapv(|l| l as usize == class);
        let set = PixelSet::from_mask(mask.view()).map_err(|_| Error::NoPixelsOfClass(class))?;
        let sum = match target {
            SaliencyTarget::Class { class } => self.grad_pam_group(*class, &set, variant)?,
            SaliencyTarget::Node { node, child } => {
                let h = h.ok_or(Error::InvalidArgument("node target needs a hierarchy".into()))?;
                self.node_grad_pam(h, *node, *child, &set, variant)?
            }
        };
        Ok(sum.scaled(1.0 / set.len() as f64))
    }
}

/// `alpha_k`: spatial mean of each gradient channel.
pub fn channel_weights<T: Scalar>(grad: &Array3<T>) -> Vec<f64> {
    let (_, h, w) = grad.dim();
    grad.axis_iter(Axis(0))
        .map(|g| g.iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
        .collect()
}

pub fn grad_cam<T: Scalar>(net: &Network<T>, image: ArrayView3<f32>, class: usize, layer: &str) -> Result<SaliencyMap> {
    SaliencyContext::new(net, image, layer)?.grad_cam(class)
}

pub fn grad_pam<T: Scalar>(
    net: &Network<T>,
    image: ArrayView3<f32>,
    class: usize,
    (x, y): (usize, usize),
    layer: &str,
) -> Result<SaliencyMap> {
    SaliencyContext::new(net, image, layer)?.grad_pam(class, x, y, PamVariant::Relu)
}

pub fn grad_pam_group<T: Scalar>(
    net: &Network<T>,
    image: ArrayView3<f32>,
    class: usize,
    set: &PixelSet,
    layer: &str,
) -> Result<SaliencyMap> {
    SaliencyContext::new(net, image, layer)?.grad_pam_group(class, set, PamVariant::Relu)
}

pub fn node_grad_pam<T: Scalar>(
    net: &Network<T>,
    h: &InducedHierarchy,
    node: usize,
    child: usize,
    image: ArrayView3<f32>,
    set: &PixelSet,
    layer: &str,
) -> Result<SaliencyMap> {
    SaliencyContext::new(net, image, layer)?.node_grad_pam(h, node, child, set, PamVariant::Relu)
}

/// Writes raw maps into a safetensors file, one `F64` tensor per name.
pub fn save_maps(maps: &[(String, &SaliencyMap)], path: &Path) -> Result<()> {
    use safetensors::tensor::{Dtype, TensorView};
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = maps
        .iter()
        .map(|(name, m)| {
            let shape = m.values.shape().to_vec();
            let bytes = m.values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), shape, bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(n, s, b)| {
            TensorView::new(Dtype::F64, s.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::InvalidArgument(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta: Option<HashMap<String, String>> = None;
    let bytes = safetensors::tensor::serialize(views, &meta).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
