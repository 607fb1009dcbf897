//! Rate-distortion training steps and the pretraining loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{mse_255, Network, PathKind};
use crate::ops::Optimizer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One step's loss terms, all in bits-per-pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    /// Rate in bits per pixel.
    pub rate: f64,
    /// `lambda * D`.
    pub distortion: f64,
    /// `beta * sum of compactor row norms`.
    pub penalty: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.rate + self.distortion + self.penalty
    }
}

/// Main latent of one training patch, cached while the main path is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent<T> {
    pub y: Tensor<T>,
    pub num_pixels: usize,
    /// Distortion of the patch under the (frozen) main path, 0..255 scale.
    pub mse: T,
}

/// A training batch: images, or cached latents when only the hyper path
/// trains (the distortion term is then constant).
#[derive(Debug, Clone)]
pub enum Batch<T> {
    Images(Tensor<T>),
    Latents(Latent<T>),
}

/// Forward + backward on one batch; gradients accumulate into `net`.
pub fn accumulate_gradients<T: Scalar>(net: &mut Network<T>, batch: &Batch<T>, lambda: f64, seed: u64) -> Result<LossBreakdown> {
    match batch {
        Batch::Images(x) => {
            let pass = net.forward_train(x, seed)?;
            net.backward(&pass, T::of(lambda))?;
            Ok(LossBreakdown { rate: pass.bpp().as_f64(), distortion: lambda * pass.mse.as_f64(), penalty: 0.0 })
        }
        Batch::Latents(l) => {
            if [PathKind::MainEncoder, PathKind::MainDecoder].iter().any(|&p| net.path(p).iter().any(|l| l.has_params() && !l.spec.frozen)) {
                return Err(Error::invalid("latent batch", "cached latents require a frozen main path"));
            }
            let pass = net.forward_train_latent(&l.y, l.num_pixels, seed)?;
            net.backward_latent(&pass)?;
            Ok(LossBreakdown { rate: pass.bpp().as_f64(), distortion: lambda * l.mse.as_f64(), penalty: 0.0 })
        }
    }
}

/// Applies the optimizer to all trainable parameters, restores constraints
/// and clears gradients.
pub fn apply_update<T: Scalar>(net: &mut Network<T>, opt: &mut Optimizer<T>) -> Result<()> {
    let params = net.trainable_params();
    if !params.is_empty() {
        opt.step(params)?;
    }
    net.post_update();
    net.zero_grad();
    Ok(())
}

/// One plain rate-distortion update.
pub fn rd_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    batch: &Batch<T>,
    lambda: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    net.zero_grad();
    let loss = accumulate_gradients(net, batch, lambda, seed)?;
    apply_update(net, opt)?;
    Ok(loss)
}

/// Draws batches without replacement, reshuffling each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..len).collect(), cursor: len, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let batch = batch.min(self.order.len());
        if self.cursor + batch > self.order.len() {
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        out
    }
}

pub fn image_batch<T: Scalar>(patches: &[Tensor<T>], indices: &[usize]) -> Result<Batch<T>> {
    let items: Vec<Tensor<T>> = indices.iter().map(|&i| patches[i].clone()).collect();
    Ok(Batch::Images(Tensor::stack(&items)?))
}

pub fn latent_batch<T: Scalar>(latents: &[Latent<T>], indices: &[usize]) -> Result<Batch<T>> {
    let ys: Vec<Tensor<T>> = indices.iter().map(|&i| latents[i].y.clone()).collect();
    let n = indices.len().max(1);
    let mse = indices.iter().map(|&i| latents[i].mse).fold(T::zero(), |a, b| a + b) / T::of(n as f64);
    let num_pixels = indices.iter().map(|&i| latents[i].num_pixels).sum();
    Ok(Batch::Latents(Latent { y: Tensor::stack(&ys)?, num_pixels, mse }))
}

/// Runs the main encoder/decoder once per patch (no noise) and caches `y`.
pub fn cache_latents<T: Scalar>(net: &Network<T>, patches: &[Tensor<T>]) -> Result<Vec<Latent<T>>> {
    patches
        .iter()
        .map(|x| {
            let y = net.forward_path(PathKind::MainEncoder, x)?;
            let x_hat = net.forward_path(PathKind::MainDecoder, &crate::entropy::quantize_round(&y))?;
            let s = x.shape();
            Ok(Latent { mse: mse_255(x, &x_hat)?, num_pixels: s.n * s.h * s.w, y })
        })
        .collect()
}

/// A progress record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLog {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Plain rate-distortion training of every unfrozen parameter on fixed
/// patches, with one step decay of the learning rate. Step `s` uses noise
/// seed `seed + s`; logged losses are averages over each `log_interval`
/// window.
pub fn pretrain<T: Scalar>(
    net: &mut Network<T>,
    patches: &[Tensor<T>],
    cfg: &crate::config::TrainConfig,
    lambda: f64,
    seed: u64,
    mut log: impl FnMut(TrainLog),
) -> Result<Vec<TrainLog>> {
    if patches.is_empty() {
        return Err(Error::invalid("pretrain", "no training patches"));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut sampler = BatchSampler::new(patches.len(), seed);
    let mut history = Vec::new();
    let mut window = (LossBreakdown::default(), 0usize);
    let decay_step = (cfg.decay_at * cfg.steps as f64).round() as usize;
    for step in 0..cfg.steps {
        if step == decay_step && step > 0 {
            opt.lr *= cfg.lr_decay;
        }
        let batch = image_batch(patches, &sampler.next_indices(cfg.batch_size))?;
        let l = rd_step(net, &mut opt, &batch, lambda, seed.wrapping_add(step as u64))?;
        window.0.rate += l.rate;
        window.0.distortion += l.distortion;
        window.1 += 1;
        if cfg.log_interval > 0 && (step + 1) % cfg.log_interval == 0 || step + 1 == cfg.steps {
            let k = window.1 as f64;
            let rec = TrainLog {
                step: step + 1,
                loss: LossBreakdown { rate: window.0.rate / k, distortion: window.0.distortion / k, penalty: 0.0 },
            };
            log(rec);
            history.push(rec);
            window = (LossBreakdown::default(), 0);
        }
    }
    Ok(history)
}
