//! A small fully-convolutional segmentation network.
//!
//! Stacked 3x3 dilated convolutions with ReLU keep the input resolution end
//! to end; a bias-free 1x1 classifier maps the last activation (the
//! "features") to per-class scores. Because the classifier is a bank of 1x1
//! filters, `scores[c, y, x] = <W[c], features[:, y, x]>` exactly, which is
//! what lets a decision tree over the rows of `W` stand in for it.

mod checkpoint;
mod conv;
mod metrics;
mod train;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use conv::{ConvGrad, ConvLayer, Window};
pub use metrics::{confusion_matrix, evaluate, evaluate_predictions, Metrics};
pub use train::{
    cross_entropy_grad, train, train_with_loss, Adam, CrossEntropy, EpochStats, Gradients, LossGrad, TrainConfig,
    TrainingLoss,
};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;

/// Name accepted by [`Network::layer_index`] for the last convolution.
pub const FEATURES_LAYER: &str = "features";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// One entry per convolution.
    pub dilations: Vec<usize>,
    pub conv_bias: bool,
    /// Smallest legal input side.
    pub min_input: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(num_classes: usize, init_seed: u64) -> Self {
        Self {
            in_channels: 3,
            feature_dim: 16,
            num_classes,
            dilations: vec![1, 2, 4, 8, 4, 1],
            conv_bias: true,
            min_input: 8,
            init_seed,
        }
    }

    /// Radius (in pixels) of the receptive field of one output pixel.
    pub fn receptive_radius(&self) -> usize {
        self.dilations.iter().sum()
    }
}

/// A named activation tensor `(K, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack<T> {
    pub layer: String,
    pub values: Array3<T>,
}

/// Reduces model outputs to one scalar for [`Network::grad_query`].
#[derive(Debug, Clone)]
pub enum Selector {
    /// Segmentation score of one class at one pixel.
    ClassScore { class: usize, x: usize, y: usize },
    /// Spatial mean of one class's score map.
    ClassMean { class: usize },
    /// `<features[:, y, x], direction>`, e.g. a tree node's score for a child.
    FeatureDot { direction: Vec<f64>, x: usize, y: usize },
    /// Sum of one channel of a named activation layer.
    ChannelSum { layer: String, channel: usize },
    /// `<seed, scores>` for a seed shaped like the score map `(C, H, W)`.
    ScoreSeed(Array3<f64>),
}

/// Output of a cached forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub input: Array3<T>,
    pub cols: Vec<Array2<T>>,
    /// Post-ReLU output of every convolution; the last one is the features.
    pub activations: Vec<Array3<T>>,
    pub scores: Array3<T>,
}

impl<T> ForwardCache<T> {
    pub fn features(&self) -> &Array3<T> {
        self.activations.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    config: ModelConfig,
    convs: Vec<ConvLayer<T>>,
    /// `(C, d)`: one row per class.
    classifier: Array2<T>,
}

/// Converts an `(H, W, 3)` image into a channel-first network input.
pub fn image_to_input<T: Scalar>(image: ArrayView3<f32>) -> Array3<T> {
    image
        .permuted_axes([2, 0, 1])
        .mapv(|v| T::from_f64(v as f64))
        .as_standard_layout()
        .into_owned()
}

/// Anything that maps an `(H, W, 3)` image to a class map of the same size.
pub trait Segmenter: Sync {
    fn segment(&self, image: ArrayView3<f32>) -> Result<Array2<u16>>;
}

impl<T: Scalar> Segmenter for Network<T> {
    fn segment(&self, image: ArrayView3<f32>) -> Result<Array2<u16>> {
        self.predict(image)
    }
}

/// Per-pixel argmax over the channel axis, ties to the lowest index.
pub fn argmax_map<T: Scalar>(scores: ArrayView3<T>) -> Array2<u16> {
    let (c, h, w) = scores.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for k in 1..c {
            if scores[[k, y, x]] > scores[[best, y, x]] {
                best = k;
            }
        }
        best as u16
    })
}

impl<T: Scalar> Network<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.dilations.is_empty() || config.feature_dim == 0 || config.num_classes == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model config {config:?}")));
        }
        let mut rng = rng_for(config.init_seed, &[0x6d6f_64656c]);
        let mut convs = Vec::with_capacity(config.dilations.len());
        let mut in_ch = config.in_channels;
        for &dil in &config.dilations {
            convs.push(ConvLayer::init(in_ch, config.feature_dim, dil, config.conv_bias, &mut rng));
            in_ch = config.feature_dim;
        }
        let std = (1.0 / config.feature_dim as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let classifier = Array2::from_shape_simple_fn((config.num_classes, config.feature_dim), || {
            T::from_f64(rand_distr::Distribution::sample(&normal, &mut rng))
        });
        Ok(Self {
            config,
            convs,
            classifier,
        })
    }

    /// Assembles a network from explicit parameters.
    pub fn from_parts(config: ModelConfig, convs: Vec<ConvLayer<T>>, classifier: Array2<T>) -> Result<Self> {
        if convs.len() != config.dilations.len() {
            return Err(Error::InvalidArgument("layer count does not match config".into()));
        }
        let mut in_ch = config.in_channels;
        for (layer, &dil) in convs.iter().zip(&config.dilations) {
            if layer.in_channels() != in_ch || layer.out_channels() != config.feature_dim || layer.dilation != dil {
                return Err(Error::InvalidArgument("layer shape does not match config".into()));
            }
            if layer.bias.is_some() != config.conv_bias {
                return Err(Error::InvalidArgument("bias presence does not match config".into()));
            }
            in_ch = config.feature_dim;
        }
        if classifier.dim() != (config.num_classes, config.feature_dim) {
            return Err(Error::InvalidArgument("classifier shape does not match config".into()));
        }
        Ok(Self {
            config,
            convs,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn convs(&self) -> &[ConvLayer<T>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.convs
    }

    /// The live classifier weights `(C, d)`.
    pub fn final_layer_weights(&self) -> ArrayView2<'_, T> {
        self.classifier.view()
    }

    pub fn final_layer_weights_mut(&mut self) -> &mut Array2<T> {
        &mut self.classifier
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.convs.len()).map(|i| format!("conv{i}")).collect()
    }

    /// Resolves `conv1..convN` or `features` (alias of the last layer).
    pub fn layer_index(&self, name: &str) -> Result<usize> {
        if name == FEATURES_LAYER {
            return Ok(self.convs.len() - 1);
        }
        name.strip_prefix("conv")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.convs.len())
            .map(|n| n - 1)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            convs: self.convs.iter().map(ConvLayer::cast).collect(),
            classifier: self.classifier.mapv(|v| U::from_f64(v.as_f64())),
        }
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h < self.config.min_input || w < self.config.min_input {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                min: self.config.min_input,
            });
        }
        Ok(())
    }

    fn check_image(&self, image: ArrayView3<f32>) -> Result<Array3<T>> {
        let (h, w, c) = image.dim();
        if c != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "image has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        self.check_input(h, w)?;
        Ok(image_to_input(image))
    }

    /// Applies the classifier to a feature map.
    pub fn classify(&self, features: &Array3<T>) -> Array3<T> {
        let (d, h, w) = features.dim();
        let flat = features.view().into_shape_with_order((d, h * w)).expect("contiguous features");
        self.classifier
            .dot(&flat)
            .into_shape_with_order((self.num_classes(), h, w))
            .expect("score shape")
    }

    /// Runs every layer, keeping what the backward pass needs.
    pub fn forward_cached(&self, image: ArrayView3<f32>) -> Result<ForwardCache<T>> {
        let input = self.check_image(image)?;
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut activations: Vec<Array3<T>> = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let x = activations.last().unwrap_or(&input);
            let (col, out) = layer.forward(x.view());
            cols.push(col);
            activations.push(out);
        }
        let scores = self.classify(activations.last().expect("nonempty"));
        Ok(ForwardCache {
            input,
            cols,
            activations,
            scores,
        })
    }

    /// All post-ReLU activations, without im2col buffers.
    pub fn activations(&self, image: ArrayView3<f32>) -> Result<Vec<Array3<T>>> {
        let input = self.check_image(image)?;
        let mut acts: Vec<Array3<T>> = Vec::with_capacity(self.convs.len());
        for layer in &self.convs {
            let x = acts.last().unwrap_or(&input);
            let (_, out) = layer.forward(x.view());
            acts.push(out);
        }
        Ok(acts)
    }

    /// Per-pixel class scores `(C, H, W)`.
    pub fn forward(&self, image: ArrayView3<f32>) -> Result<Array3<T>> {
        Ok(self.classify(&self.features(image)?))
    }

    /// Per-pixel features `(d, H, W)` feeding the 1x1 classifier.
    pub fn features(&self, image: ArrayView3<f32>) -> Result<Array3<T>> {
        Ok(self.activations(image)?.pop().expect("nonempty"))
    }

    pub fn activation(&self, image: ArrayView3<f32>, layer: &str) -> Result<ActivationStack<T>> {
        let idx = self.layer_index(layer)?;
        let mut acts = self.activations(image)?;
        acts.truncate(idx + 1);
        Ok(ActivationStack {
            layer: layer.to_string(),
            values: acts.pop().expect("nonempty"),
        })
    }

    /// Hard per-pixel prediction of the plain network.
    pub fn predict(&self, image: ArrayView3<f32>) -> Result<Array2<u16>> {
        Ok(argmax_map(self.forward(image)?.view()))
    }

    /// Recomputes features and scores from a replacement activation of
    /// `layer`, running only the layers above it.
    pub fn forward_from(&self, layer: &str, activation: &Array3<T>) -> Result<(Array3<T>, Array3<T>)> {
        let idx = self.layer_index(layer)?;
        let mut x = activation.clone();
        for conv in &self.convs[idx + 1..] {
            x = conv.forward(x.view()).1;
        }
        let scores = self.classify(&x);
        Ok((x, scores))
    }

    /// Evaluates the scalar a selector picks out, given features and scores.
    pub fn select(&self, selector: &Selector, acts: &[Array3<T>], scores: &Array3<T>) -> Result<f64> {
        let features = acts.last().expect("nonempty");
        let (_, h, w) = features.dim();
        match selector {
            Selector::ClassScore { class, x, y } => {
                self.check_selector_pixel(*x, *y, h, w)?;
                self.check_class(*class)?;
                Ok(scores[[*class, *y, *x]].as_f64())
            }
            Selector::ClassMean { class } => {
                self.check_class(*class)?;
                Ok(scores.index_axis(Axis(0), *class).iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64)
            }
            Selector::FeatureDot { direction, x, y } => {
                self.check_selector_pixel(*x, *y, h, w)?;
                self.check_direction(direction)?;
                Ok(features
                    .slice(s![.., *y, *x])
                    .iter()
                    .zip(direction)
                    .map(|(f, d)| f.as_f64() * d)
                    .sum())
            }
            Selector::ChannelSum { layer, channel } => {
                let idx = self.layer_index(layer)?;
                if *channel >= acts[idx].dim().0 {
                    return Err(Error::NonScalarSelector(format!("channel {channel} out of range")));
                }
                Ok(acts[idx].index_axis(Axis(0), *channel).iter().map(|v| v.as_f64()).sum())
            }
            Selector::ScoreSeed(seed) => {
                if seed.dim() != scores.dim() {
                    return Err(Error::NonScalarSelector(format!(
                        "seed shape {:?} does not match scores {:?}",
                        seed.dim(),
                        scores.dim()
                    )));
                }
                Ok(seed.iter().zip(scores.iter()).map(|(a, b)| a * b.as_f64()).sum())
            }
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::UnknownClass(class));
        }
        Ok(())
    }

    fn check_direction(&self, direction: &[f64]) -> Result<()> {
        if direction.len() != self.feature_dim() {
            return Err(Error::NonScalarSelector(format!(
                "direction has {} entries, features have {}",
                direction.len(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    fn check_selector_pixel(&self, x: usize, y: usize, h: usize, w: usize) -> Result<()> {
        if x >= w || y >= h {
            return Err(Error::OutOfBounds { x, y });
        }
        Ok(())
    }

    /// Gradient of the selected scalar with respect to the post-ReLU output
    /// of `layer`, shaped like that layer's activation.
    pub fn grad_query(&self, image: ArrayView3<f32>, layer: &str, selector: &Selector) -> Result<ActivationStack<T>> {
        let acts = self.activations(image)?;
        let values = self.grad_query_with(&acts, layer, selector)?;
        Ok(ActivationStack {
            layer: layer.to_string(),
            values,
        })
    }

    /// [`Self::grad_query`] over precomputed activations.
    pub fn grad_query_with(&self, acts: &[Array3<T>], layer: &str, selector: &Selector) -> Result<Array3<T>> {
        let target = self.layer_index(layer)?;
        let last = self.convs.len() - 1;
        let (d, h, w) = acts[last].dim();
        let (seed_layer, seed, window) = match selector {
            Selector::ChannelSum { layer: seed_name, channel } => {
                let seed_layer = self.layer_index(seed_name)?;
                let (k, sh, sw) = acts[seed_layer].dim();
                if *channel >= k {
                    return Err(Error::NonScalarSelector(format!("channel {channel} out of range")));
                }
                if seed_layer < target {
                    // The scalar is computed before the target layer, so it does not depend on it.
                    return Ok(Array3::zeros(acts[target].dim()));
                }
                let mut g = Array3::<T>::zeros((k, sh, sw));
                g.index_axis_mut(Axis(0), *channel).fill(T::one());
                (seed_layer, g, Window::full(sh, sw))
            }
            _ => {
                let (g, window) = self.feature_seed(selector, d, h, w)?;
                (last, g, window)
            }
        };
        let mut grad = seed;
        let mut window = window;
        for l in (target + 1..=seed_layer).rev() {
            let (g, win) = self.convs[l].backward_input_windowed(&acts[l], &grad, window);
            grad = g;
            window = win;
        }
        Ok(grad)
    }

    /// Gradient of the selector with respect to the features, and the window
    /// outside which it vanishes.
    fn feature_seed(&self, selector: &Selector, d: usize, h: usize, w: usize) -> Result<(Array3<T>, Window)> {
        let mut g = Array3::<T>::zeros((d, h, w));
        let window = match selector {
            Selector::ClassScore { class, x, y } => {
                self.check_class(*class)?;
                self.check_selector_pixel(*x, *y, h, w)?;
                g.slice_mut(s![.., *y, *x]).assign(&self.classifier.row(*class));
                Window::pixel(*y, *x)
            }
            Selector::ClassMean { class } => {
                self.check_class(*class)?;
                let n = T::from_f64((h * w) as f64);
                let row = self.classifier.row(*class).mapv(|v| v / n);
                for y in 0..h {
                    for x in 0..w {
                        g.slice_mut(s![.., y, x]).assign(&row);
                    }
                }
                Window::full(h, w)
            }
            Selector::FeatureDot { direction, x, y } => {
                self.check_direction(direction)?;
                self.check_selector_pixel(*x, *y, h, w)?;
                for (k, &v) in direction.iter().enumerate() {
                    g[[k, *y, *x]] = T::from_f64(v);
                }
                Window::pixel(*y, *x)
            }
            Selector::ScoreSeed(seed) => {
                if seed.dim() != (self.num_classes(), h, w) {
                    return Err(Error::NonScalarSelector(format!(
                        "seed shape {:?} does not match scores {:?}",
                        seed.dim(),
                        (self.num_classes(), h, w)
                    )));
                }
                let c = self.num_classes();
                let seed_t = seed.mapv(T::from_f64).into_shape_with_order((c, h * w)).expect("contiguous");
                g = self
                    .classifier
                    .t()
                    .dot(&seed_t)
                    .into_shape_with_order((d, h, w))
                    .expect("feature shape");
                Window::full(h, w)
            }
            Selector::ChannelSum { .. } => unreachable!("handled by caller"),
        };
        Ok((g, window))
    }

    /// Backpropagates a feature-gradient through every convolution.
    pub fn backward(&self, cache: &ForwardCache<T>, d_features: Array3<T>) -> Vec<ConvGrad<T>> {
        let mut grads = Vec::with_capacity(self.convs.len());
        let mut d_out = d_features;
        for l in (0..self.convs.len()).rev() {
            let (g, d_in) = self.convs[l].backward(&cache.cols[l], &cache.activations[l], d_out, l > 0);
            grads.push(g);
            if let Some(d_in) = d_in {
                d_out = d_in;
            } else {
                break;
            }
        }
        grads.reverse();
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image(h: usize, w: usize, seed: u64) -> Array3<f32> {
        use rand::Rng;
        let mut rng = rng_for(seed, &[]);
        Array3::from_shape_simple_fn((h, w, 3), || rng.gen::<f32>())
    }

    #[test]
    fn forward_preserves_resolution() {
        let net = Network::<f32>::new(ModelConfig::new(6, 1)).unwrap();
        assert_eq!(net.forward(image(64, 64, 0).view()).unwrap().dim(), (6, 64, 64));
        assert_eq!(net.forward(image(25, 25, 0).view()).unwrap().dim(), (6, 25, 25));
        assert_eq!(net.features(image(9, 12, 0).view()).unwrap().dim(), (16, 9, 12));
    }

    #[test]
    fn rejects_small_inputs() {
        let net = Network::<f32>::new(ModelConfig::new(6, 1)).unwrap();
        assert!(matches!(
            net.forward(image(7, 20, 0).view()),
            Err(Error::InputTooSmall { height: 7, width: 20, min: 8 })
        ));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = Network::<f32>::new(ModelConfig::new(6, 1)).unwrap();
        let img = image(20, 20, 4);
        assert_eq!(net.forward(img.view()).unwrap(), net.forward(img.view()).unwrap());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = Network::<f32>::new(ModelConfig::new(6, 11)).unwrap();
        let b = Network::<f32>::new(ModelConfig::new(6, 11)).unwrap();
        let c = Network::<f32>::new(ModelConfig::new(6, 12)).unwrap();
        assert_eq!(a.final_layer_weights(), b.final_layer_weights());
        assert_ne!(a.final_layer_weights(), c.final_layer_weights());
        assert_eq!(a.final_layer_weights().dim(), (6, 16));
    }

    #[test]
    fn scores_equal_features_times_weights() {
        let net = Network::<f32>::new(ModelConfig::new(6, 2)).unwrap();
        let img = image(16, 16, 3);
        let scores = net.forward(img.view()).unwrap();
        let feats = net.features(img.view()).unwrap();
        let w = net.final_layer_weights();
        let mut worst = 0.0f32;
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..6 {
                    let dot: f32 = (0..16).map(|k| feats[[k, y, x]] * w[[c, k]]).sum();
                    worst = worst.max((dot - scores[[c, y, x]]).abs());
                }
            }
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn zero_image_bias_free_gives_zero_features() {
        let mut cfg = ModelConfig::new(6, 5);
        cfg.conv_bias = false;
        let net = Network::<f32>::new(cfg).unwrap();
        let feats = net.features(Array3::zeros((12, 12, 3)).view()).unwrap();
        assert!(feats.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_names_resolve() {
        let net = Network::<f32>::new(ModelConfig::new(3, 5)).unwrap();
        assert_eq!(net.layer_index("conv1").unwrap(), 0);
        assert_eq!(net.layer_index("features").unwrap(), 5);
        assert_eq!(net.layer_index("conv6").unwrap(), 5);
        assert!(matches!(net.layer_index("conv7"), Err(Error::UnknownLayer(_))));
        assert!(matches!(net.layer_index("fc"), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn channel_sum_gradient_is_indicator() {
        let net = Network::<f64>::new(ModelConfig::new(3, 5)).unwrap();
        let img = image(10, 10, 1);
        let sel = Selector::ChannelSum {
            layer: "conv3".into(),
            channel: 2,
        };
        let g = net.grad_query(img.view(), "conv3", &sel).unwrap().values;
        for ((k, _, _), &v) in g.indexed_iter() {
            assert_eq!(v, if k == 2 { 1.0 } else { 0.0 });
        }
        // A scalar computed below the target layer is constant in it.
        let below = Selector::ChannelSum {
            layer: "conv1".into(),
            channel: 0,
        };
        let g = net.grad_query(img.view(), "conv3", &below).unwrap().values;
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn malformed_selectors_are_rejected() {
        let net = Network::<f64>::new(ModelConfig::new(3, 5)).unwrap();
        let img = image(10, 10, 1);
        let bad = Selector::FeatureDot {
            direction: vec![1.0; 3],
            x: 0,
            y: 0,
        };
        assert!(matches!(net.grad_query(img.view(), "conv2", &bad), Err(Error::NonScalarSelector(_))));
        let bad_seed = Selector::ScoreSeed(Array3::zeros((3, 4, 4)));
        assert!(matches!(
            net.grad_query(img.view(), "conv2", &bad_seed),
            Err(Error::NonScalarSelector(_))
        ));
        let unknown = Selector::ClassScore { class: 0, x: 0, y: 0 };
        assert!(matches!(net.grad_query(img.view(), "pool", &unknown), Err(Error::UnknownLayer(_))));
    }
}
