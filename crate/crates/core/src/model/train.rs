use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, ConvGrad, ModelConfig, Network};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::scalar::Scalar;
use crate::synth::SegmentationSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 0,
            cosine_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Loss of one sample with its gradients with respect to the features and
/// the classifier weights.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub loss: f64,
    pub d_features: Array3<T>,
    pub d_weights: Array2<T>,
}

pub trait TrainingLoss<T: Scalar>: Sync {
    fn loss_grad(
        &self,
        net: &Network<T>,
        features: &Array3<T>,
        scores: &Array3<T>,
        sample: &SegmentationSample,
    ) -> Result<LossGrad<T>>;

    /// Called after every epoch with the updated network.
    fn end_epoch(&self, _net: &Network<T>) -> Result<()> {
        Ok(())
    }
}

/// Per-pixel softmax cross-entropy, averaged over non-ignore pixels.
pub struct CrossEntropy;

impl<T: Scalar> TrainingLoss<T> for CrossEntropy {
    fn loss_grad(
        &self,
        net: &Network<T>,
        features: &Array3<T>,
        scores: &Array3<T>,
        sample: &SegmentationSample,
    ) -> Result<LossGrad<T>> {
        cross_entropy_grad(net.final_layer_weights(), features, scores, &sample.label, &sample.ignore)
    }
}

/// Cross-entropy of `scores = W . features` against `label`, with its
/// gradients. Fails when every pixel is ignored.
pub fn cross_entropy_grad<T: Scalar>(
    weights: ArrayView2<T>,
    features: &Array3<T>,
    scores: &Array3<T>,
    label: &Array2<u16>,
    ignore: &Array2<bool>,
) -> Result<LossGrad<T>> {
    let (c, h, w) = scores.dim();
    let d = features.dim().0;
    let n = ignore.iter().filter(|&&i| !i).count();
    if n == 0 {
        return Err(Error::AllPixelsIgnored);
    }
    let inv_n = 1.0 / n as f64;
    let mut d_scores = Array2::<T>::zeros((c, h * w));
    let mut loss = 0.0;
    let mut probs = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            if ignore[[y, x]] {
                continue;
            }
            let max = (0..c).map(|k| scores[[k, y, x]].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p = (scores[[k, y, x]].as_f64() - max).exp();
                z += *p;
            }
            let t = label[[y, x]] as usize;
            loss -= (probs[t] / z).ln() * inv_n;
            let col = y * w + x;
            for (k, p) in probs.iter().enumerate() {
                let g = p / z - if k == t { 1.0 } else { 0.0 };
                d_scores[[k, col]] = T::from_f64(g * inv_n);
            }
        }
    }
    let feats = features.view().into_shape_with_order((d, h * w)).expect("contiguous features");
    let d_weights = d_scores.dot(&feats.t());
    let d_features = weights
        .t()
        .dot(&d_scores)
        .into_shape_with_order((d, h, w))
        .expect("feature shape");
    Ok(LossGrad {
        loss,
        d_features,
        d_weights,
    })
}

/// Parameter gradients of a whole [`Network`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub convs: Vec<ConvGrad<T>>,
    pub classifier: Array2<T>,
}

impl<T: Scalar> Gradients<T> {
    fn add(&mut self, other: &Gradients<T>) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.weight += &b.weight;
            if let (Some(x), Some(y)) = (a.bias.as_mut(), b.bias.as_ref()) {
                *x += y;
            }
        }
        self.classifier += &other.classifier;
    }

    fn scale(&mut self, s: T) {
        for g in &mut self.convs {
            g.weight.mapv_inplace(|v| v * s);
            if let Some(b) = g.bias.as_mut() {
                b.mapv_inplace(|v| v * s);
            }
        }
        self.classifier.mapv_inplace(|v| v * s);
    }

    fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for g in &self.convs {
            out.push(g.weight.as_slice().expect("standard layout"));
            if let Some(b) = &g.bias {
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        out.push(self.classifier.as_slice().expect("standard layout"));
        out
    }
}

fn param_slices_mut<T: Scalar>(net: &mut Network<T>) -> Vec<&mut [T]> {
    let mut out: Vec<&mut [T]> = Vec::new();
    let (convs, classifier) = (&mut net.convs, &mut net.classifier);
    for layer in convs.iter_mut() {
        out.push(layer.weight.as_slice_mut().expect("standard layout"));
        if let Some(b) = layer.bias.as_mut() {
            out.push(b.as_slice_mut().expect("standard layout"));
        }
    }
    out.push(classifier.as_slice_mut().expect("standard layout"));
    out
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64) {
        let gs = grads.slices();
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one, eps) = (T::one(), T::from_f64(self.eps));
        let step_size = T::from_f64(lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        for (((p, g), m), v) in param_slices_mut(net).into_iter().zip(gs).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

fn sample_gradients<T: Scalar>(
    net: &Network<T>,
    sample: &SegmentationSample,
    loss: &dyn TrainingLoss<T>,
) -> Result<Option<(f64, Gradients<T>)>> {
    let cache = net.forward_cached(sample.image.view())?;
    let lg = match loss.loss_grad(net, cache.features(), &cache.scores, sample) {
        Ok(lg) => lg,
        Err(Error::AllPixelsIgnored) => return Ok(None),
        Err(e) => return Err(e),
    };
    let convs = net.backward(&cache, lg.d_features);
    Ok(Some((
        lg.loss,
        Gradients {
            convs,
            classifier: lg.d_weights,
        },
    )))
}

/// Minibatch Adam over `samples` with an arbitrary loss. Per-sample
/// gradients are summed in sample order, so the result does not depend on
/// the number of worker threads.
pub fn train_with_loss<T: Scalar>(
    net: &mut Network<T>,
    samples: &[SegmentationSample],
    config: &TrainConfig,
    loss: &dyn TrainingLoss<T>,
) -> Result<Vec<EpochStats>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = config.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut global_step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng_for(config.seed, &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            let shared: &Network<T> = net;
            let results: Vec<Option<(f64, Gradients<T>)>> = chunk
                .par_iter()
                .map(|&i| sample_gradients(shared, &samples[i], loss))
                .collect::<Result<_>>()?;
            let mut acc: Option<Gradients<T>> = None;
            let mut batch_loss = 0.0;
            let mut n = 0;
            for (l, g) in results.into_iter().flatten() {
                batch_loss += l;
                n += 1;
                match acc.as_mut() {
                    Some(a) => a.add(&g),
                    None => acc = Some(g),
                }
            }
            let Some(mut grads) = acc else { continue };
            if !batch_loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, step });
            }
            grads.scale(T::from_f64(1.0 / n as f64));
            let lr = if config.cosine_decay {
                let progress = global_step as f64 / total_steps as f64;
                config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            } else {
                config.learning_rate
            };
            adam.step(net, &grads, lr);
            global_step += 1;
            epoch_loss += batch_loss;
            epoch_count += n;
        }
        loss.end_epoch(net)?;
        let mean_loss = epoch_loss / epoch_count.max(1) as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.5}");
        history.push(EpochStats { epoch, mean_loss });
    }
    Ok(history)
}

/// Trains a fresh network with plain cross-entropy.
pub fn train(samples: &[SegmentationSample], model: &ModelConfig, config: &TrainConfig) -> Result<Checkpoint> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = Network::<f32>::new(model.clone())?;
    let history = train_with_loss(&mut net, samples, config, &CrossEntropy)?;
    Ok(Checkpoint {
        network: net,
        stage: "train".into(),
        training: serde_json::to_value(config)?,
        seed: config.seed,
        history,
    })
}
