//! The four-path scale-hyperprior codec.
//!
//! `g_a` maps the image to the latent `y`, `g_s` maps it back; `h_a` maps `y`
//! to the side latent `z` and `h_s` maps `z` to the scales of `y`'s entropy
//! model. Each layer owns its weights and optionally a compactor on its
//! output.

mod topology;

pub use topology::{validate, LayerId, LayerKind, LayerSpec, PathKind, PathSpecs, Preset, Topology};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compactor::{channel_mix, Compactor, Placement};
use crate::entropy::{add_uniform_noise, quantize_round, FactorizedModel, GaussianConditional};
use crate::error::{ensure_dim, Error, Result};
use crate::ops::{
    activation, activation_backward, conv2d, conv2d_backward, deconv2d, deconv2d_backward, pixel_shuffle,
    pixel_unshuffle, ConvWeights, WeightLayout,
};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Pixel values are in `[0, 1]`; distortion is reported on the 0..255 scale.
pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    /// `None` for activations.
    pub weights: Option<ConvWeights<T>>,
    pub compactor: Option<Compactor<T>>,
}

impl<T: Scalar> Layer<T> {
    fn init(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let weights = match spec.kind {
            LayerKind::Activation => None,
            kind => {
                let (cin, cout, ks, s) = (spec.in_channels, spec.conv_out_channels(), spec.ks, spec.stride);
                let (shape, layout, fan_in) = if kind == LayerKind::Deconv {
                    let fan = (cin * ks * ks) as f64 / (s * s) as f64;
                    (Shape::new(cin, cout, ks, ks), WeightLayout::Deconv, fan)
                } else {
                    (Shape::new(cout, cin, ks, ks), WeightLayout::Conv, (cin * ks * ks) as f64)
                };
                let std = T::of((1.0 / fan_in.max(1.0)).sqrt());
                let weight = Tensor::randn(shape, std, rng);
                let bias = Tensor::vector(vec![T::zero(); cout]);
                Some(ConvWeights::with_output_padding(weight, bias, layout, s, spec.padding, spec.output_padding)?)
            }
        };
        Ok(Self { spec, weights, compactor: None })
    }

    pub fn has_params(&self) -> bool {
        self.weights.is_some()
    }

    pub fn num_params(&self) -> usize {
        self.weights.as_ref().map_or(0, |w| w.num_params())
    }

    pub fn placement(&self) -> Option<Placement> {
        match self.spec.kind {
            LayerKind::Conv => Some(Placement::AfterConv),
            LayerKind::Deconv => Some(Placement::AfterDeconv),
            LayerKind::PixelshuffleConv => Some(Placement::AfterShuffle),
            LayerKind::Activation => None,
        }
    }

    /// Host output (after the shuffle for pixel-shuffle layers), before any
    /// compactor.
    fn host_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = match &self.weights {
            Some(w) => w,
            None => return Ok(activation(x, self.spec.function)),
        };
        match self.spec.kind {
            LayerKind::Conv => conv2d(x, w),
            LayerKind::Deconv => deconv2d(x, w),
            LayerKind::PixelshuffleConv => pixel_shuffle(&conv2d(x, w)?, self.spec.alpha),
            LayerKind::Activation => unreachable!("activations carry no weights"),
        }
    }

    /// Returns the layer output and, when a compactor is attached, the host
    /// output it was applied to.
    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let host = self.host_forward(x)?;
        match &self.compactor {
            Some(c) => Ok((channel_mix(&host, &c.r)?, Some(host))),
            None => Ok((host, None)),
        }
    }

    fn backward(
        &mut self,
        cache: &LayerCache<T>,
        grad_out: Tensor<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let train = !self.spec.frozen;
        let grad_host = match (&mut self.compactor, &cache.host) {
            (Some(c), Some(host)) => c.backward(host, &grad_out, train),
            _ => grad_out,
        };
        let Some(w) = self.weights.as_mut() else {
            return Ok(need_input.then(|| activation_backward(&cache.input, &grad_host, self.spec.function)));
        };
        let grads = match self.spec.kind {
            LayerKind::Conv => conv2d_backward(&cache.input, w, &grad_host, need_input)?,
            LayerKind::Deconv => deconv2d_backward(&cache.input, w, &grad_host, need_input)?,
            LayerKind::PixelshuffleConv => {
                let g = pixel_unshuffle(&grad_host, self.spec.alpha)?;
                conv2d_backward(&cache.input, w, &g, need_input)?
            }
            LayerKind::Activation => unreachable!("activations carry no weights"),
        };
        if train {
            w.weight.accumulate_grad(&grads.weight);
            w.bias.accumulate_grad(&grads.bias);
        }
        Ok(grads.input)
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Tensor<T>,
    host: Option<Tensor<T>>,
}

/// Parameter-count scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Total,
    MainPath,
    HyperPath,
    Path(PathKind),
    Layer(LayerId),
    /// The side-latent prior.
    EntropyModel,
}

/// Hyper-path part of a training pass: noisy latents, scales and rates.
/// Can be run on its own from a cached latent when the main path is frozen.
#[derive(Debug, Clone)]
pub struct HyperPass<T> {
    pub y_tilde: Tensor<T>,
    pub z_tilde: Tensor<T>,
    pub sigma: Tensor<T>,
    pub rate_y_bits: T,
    pub rate_z_bits: T,
    pub num_pixels: usize,
    h: Tensor<T>,
    ha: Vec<LayerCache<T>>,
    hs: Vec<LayerCache<T>>,
}

impl<T: Scalar> HyperPass<T> {
    pub fn bpp(&self) -> T {
        (self.rate_y_bits + self.rate_z_bits) / T::of(self.num_pixels as f64)
    }
}

/// Outputs of a training forward pass plus the tape for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct TrainPass<T> {
    pub hyper: HyperPass<T>,
    pub x_tilde: Tensor<T>,
    /// Mean squared error on the 0..255 scale.
    pub mse: T,
    x: Tensor<T>,
    ga: Vec<LayerCache<T>>,
    gs: Vec<LayerCache<T>>,
}

impl<T: Scalar> TrainPass<T> {
    pub fn bpp(&self) -> T {
        self.hyper.bpp()
    }

    pub fn loss(&self, lambda: T) -> T {
        self.bpp() + lambda * self.mse
    }
}

/// Outputs of a deterministic evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPass<T> {
    pub x_hat: Tensor<T>,
    pub y_hat: Tensor<T>,
    pub z_hat: Tensor<T>,
    pub sigma: Tensor<T>,
    pub rate_y_bits: T,
    pub rate_z_bits: T,
    /// Mean squared error on the 0..255 scale.
    pub mse: T,
    pub num_pixels: usize,
}

impl<T: Scalar> EvalPass<T> {
    pub fn bpp(&self) -> T {
        (self.rate_y_bits + self.rate_z_bits) / T::of(self.num_pixels as f64)
    }

    pub fn loss(&self, lambda: T) -> T {
        self.bpp() + lambda * self.mse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub n: usize,
    pub m: usize,
    paths: [Vec<Layer<T>>; 4],
    pub gaussian: GaussianConditional<T>,
    pub factorized: FactorizedModel<T>,
    /// Freezes the side-latent prior's mean and scale.
    pub entropy_frozen: bool,
}

/// Who reads a layer's output channels.
enum Consumer {
    Layer(LayerId),
    /// The side latent: its prior plus the first hyper-decoder layer.
    SideLatent(LayerId),
}

fn noise_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(2).wrapping_add(stream)
}

impl<T: Scalar> Network<T> {
    /// Validates `specs` and draws fresh weights from `seed`.
    pub fn new(n: usize, m: usize, mut specs: PathSpecs, seed: u64) -> Result<Self> {
        validate(&mut specs, m)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut build = |list: &[LayerSpec]| -> Result<Vec<Layer<T>>> {
            list.iter().map(|s| Layer::init(s.clone(), &mut rng)).collect()
        };
        let paths = [
            build(&specs.main_encoder)?,
            build(&specs.main_decoder)?,
            build(&specs.hyper_encoder)?,
            build(&specs.hyper_decoder)?,
        ];
        let z_channels = specs.hyper_encoder.iter().rev().find(|s| s.has_params()).map_or(0, |s| s.out_channels);
        Ok(Self {
            n,
            m,
            paths,
            gaussian: GaussianConditional::default(),
            factorized: FactorizedModel::new(z_channels),
            entropy_frozen: false,
        })
    }

    /// Rebuilds a network from per-layer parts; used by checkpoint loading.
    pub fn from_layers(
        n: usize,
        m: usize,
        paths: [Vec<Layer<T>>; 4],
        gaussian: GaussianConditional<T>,
        factorized: FactorizedModel<T>,
    ) -> Result<Self> {
        let mut net = Self { n, m, paths, gaussian, factorized, entropy_frozen: false };
        net.refresh_widths();
        net.check()?;
        Ok(net)
    }

    pub fn path(&self, path: PathKind) -> &[Layer<T>] {
        &self.paths[path.slot()]
    }

    pub fn layer(&self, id: LayerId) -> Result<&Layer<T>> {
        self.paths[id.path.slot()].get(id.index).ok_or_else(|| Error::topology(id.to_string(), "no such layer"))
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Result<&mut Layer<T>> {
        self.paths[id.path.slot()].get_mut(id.index).ok_or_else(|| Error::topology(id.to_string(), "no such layer"))
    }

    pub fn layers(&self) -> impl Iterator<Item = (LayerId, &Layer<T>)> {
        PathKind::ALL
            .into_iter()
            .flat_map(move |p| self.paths[p.slot()].iter().enumerate().map(move |(i, l)| (LayerId::new(p, i), l)))
    }

    pub fn specs(&self) -> PathSpecs {
        let get = |p: PathKind| self.paths[p.slot()].iter().map(|l| l.spec.clone()).collect();
        PathSpecs {
            main_encoder: get(PathKind::MainEncoder),
            main_decoder: get(PathKind::MainDecoder),
            hyper_encoder: get(PathKind::HyperEncoder),
            hyper_decoder: get(PathKind::HyperDecoder),
        }
    }

    /// Layers with weights in `path`, in order.
    pub fn param_layers(&self, path: PathKind) -> Vec<LayerId> {
        self.paths[path.slot()]
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .map(|(i, _)| LayerId::new(path, i))
            .collect()
    }

    pub fn prunable_layers(&self) -> Vec<LayerId> {
        self.layers().filter(|(_, l)| l.spec.prunable).map(|(id, _)| id).collect()
    }

    pub fn compactor_layers(&self) -> Vec<LayerId> {
        self.layers().filter(|(_, l)| l.compactor.is_some()).map(|(id, _)| id).collect()
    }

    pub fn compactors(&self) -> impl Iterator<Item = (LayerId, &Compactor<T>)> {
        self.layers().filter_map(|(id, l)| l.compactor.as_ref().map(|c| (id, c)))
    }

    pub fn compactors_mut(&mut self) -> impl Iterator<Item = (LayerId, &mut Compactor<T>)> {
        self.paths.iter_mut().zip(PathKind::ALL).flat_map(|(layers, p)| {
            layers.iter_mut().enumerate().filter_map(move |(i, l)| l.compactor.as_mut().map(|c| (LayerId::new(p, i), c)))
        })
    }

    pub fn set_path_frozen(&mut self, path: PathKind, frozen: bool) {
        for l in &mut self.paths[path.slot()] {
            l.spec.frozen = frozen;
        }
    }

    pub fn freeze_main(&mut self) {
        self.set_path_frozen(PathKind::MainEncoder, true);
        self.set_path_frozen(PathKind::MainDecoder, true);
    }

    pub fn freeze_all(&mut self) {
        for p in PathKind::ALL {
            self.set_path_frozen(p, true);
        }
        self.entropy_frozen = true;
    }

    pub fn unfreeze_all(&mut self) {
        for p in PathKind::ALL {
            self.set_path_frozen(p, false);
        }
        self.entropy_frozen = false;
    }

    fn path_trainable(&self, path: PathKind) -> bool {
        self.paths[path.slot()].iter().any(|l| l.has_params() && !l.spec.frozen)
    }

    /// Weight + bias element count; compactors are not counted since they are
    /// absorbed at merge time.
    pub fn count_parameters(&self, scope: Scope) -> usize {
        let path = |p: PathKind| self.paths[p.slot()].iter().map(Layer::num_params).sum::<usize>();
        match scope {
            Scope::Total => PathKind::ALL.into_iter().map(path).sum::<usize>() + self.factorized.num_params(),
            Scope::MainPath => path(PathKind::MainEncoder) + path(PathKind::MainDecoder),
            Scope::HyperPath => path(PathKind::HyperEncoder) + path(PathKind::HyperDecoder),
            Scope::Path(p) => path(p),
            Scope::Layer(id) => self.layer(id).map_or(0, Layer::num_params),
            Scope::EntropyModel => self.factorized.num_params(),
        }
    }

    /// Spatial size multiple the input must have.
    pub fn downsampling_factor(&self) -> usize {
        let strides = |p: PathKind| -> usize {
            self.paths[p.slot()].iter().filter(|l| l.spec.kind == LayerKind::Conv).map(|l| l.spec.stride).product()
        };
        strides(PathKind::MainEncoder) * strides(PathKind::HyperEncoder)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        ensure_dim("network input", "channels", s.c, 3)?;
        let f = self.downsampling_factor();
        if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
            return Err(Error::invalid("network input", format!("spatial size {}x{} is not a multiple of {f}", s.h, s.w)));
        }
        Ok(())
    }

    fn run_path(&self, path: PathKind, x: &Tensor<T>, mut tape: Option<&mut Vec<LayerCache<T>>>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.paths[path.slot()] {
            let (out, host) = layer.forward(&cur)?;
            if let Some(t) = tape.as_deref_mut() {
                t.push(LayerCache { input: cur, host });
            }
            cur = out;
        }
        Ok(cur)
    }

    /// Runs one path on its own (no quantization).
    pub fn forward_path(&self, path: PathKind, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run_path(path, x, None)
    }

    fn scales(&self, h: &Tensor<T>) -> Tensor<T> {
        let floor = self.gaussian.scale_floor;
        h.map(|v| v.abs() + floor)
    }

    fn check_outputs(&self, x: &Tensor<T>, y: &Tensor<T>, sigma: &Tensor<T>, x_rec: &Tensor<T>) -> Result<()> {
        if sigma.shape() != y.shape() {
            return Err(Error::topology("h_s", format!("scale shape {} differs from latent {}", sigma.shape(), y.shape())));
        }
        if x_rec.shape() != x.shape() {
            return Err(Error::topology("g_s", format!("reconstruction {} differs from input {}", x_rec.shape(), x.shape())));
        }
        Ok(())
    }

    /// Noisy-surrogate forward pass recording everything needed by
    /// [`Network::backward`].
    pub fn forward_train(&self, x: &Tensor<T>, seed: u64) -> Result<TrainPass<T>> {
        self.check_input(x)?;
        let (mut ga, mut gs) = (Vec::new(), Vec::new());
        let y = self.run_path(PathKind::MainEncoder, x, Some(&mut ga))?;
        let s = x.shape();
        let hyper = self.forward_train_latent(&y, s.n * s.h * s.w, seed)?;
        let x_tilde = self.run_path(PathKind::MainDecoder, &hyper.y_tilde, Some(&mut gs))?;
        self.check_outputs(x, &y, &hyper.sigma, &x_tilde)?;
        Ok(TrainPass { mse: mse_255(x, &x_tilde)?, hyper, x_tilde, x: x.clone(), ga, gs })
    }

    /// Hyper-path training pass from a precomputed latent `y`; `num_pixels`
    /// is the image pixel count the rates are normalised by.
    pub fn forward_train_latent(&self, y: &Tensor<T>, num_pixels: usize, seed: u64) -> Result<HyperPass<T>> {
        ensure_dim("latent", "channels", y.shape().c, self.m)?;
        let (mut ha, mut hs) = (Vec::new(), Vec::new());
        let y_tilde = add_uniform_noise(y, noise_seed(seed, 0));
        let z = self.run_path(PathKind::HyperEncoder, y, Some(&mut ha))?;
        let side = self.side_mask();
        let mut z_tilde = add_uniform_noise(&z, noise_seed(seed, 1));
        if let Some(mask) = &side {
            zero_channels(&mut z_tilde, mask);
        }
        let h = self.run_path(PathKind::HyperDecoder, &z_tilde, Some(&mut hs))?;
        let sigma = self.scales(&h);
        if sigma.shape() != y.shape() {
            return Err(Error::topology("h_s", format!("scale shape {} differs from latent {}", sigma.shape(), y.shape())));
        }
        let rate_y = self.gaussian.rate(&y_tilde, &sigma)?;
        let rate_z = self.factorized.rate_masked(&z_tilde, side.as_deref())?;
        Ok(HyperPass {
            y_tilde,
            z_tilde,
            sigma,
            rate_y_bits: rate_y.total,
            rate_z_bits: rate_z.total,
            num_pixels,
            h,
            ha,
            hs,
        })
    }

    /// Hard-rounded, noise-free forward pass.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<EvalPass<T>> {
        self.check_input(x)?;
        let y = self.run_path(PathKind::MainEncoder, x, None)?;
        let y_hat = quantize_round(&y);
        let z = self.run_path(PathKind::HyperEncoder, &y, None)?;
        let z_hat = quantize_round(&z);
        let sigma = self.scales(&self.run_path(PathKind::HyperDecoder, &z_hat, None)?);
        let x_hat = self.run_path(PathKind::MainDecoder, &y_hat, None)?;
        self.check_outputs(x, &y, &sigma, &x_hat)?;
        let rate_y = self.gaussian.rate(&y_hat, &sigma)?;
        let rate_z = self.factorized.rate_masked(&z_hat, self.side_mask().as_deref())?;
        let s = x.shape();
        Ok(EvalPass {
            mse: mse_255(x, &x_hat)?,
            rate_y_bits: rate_y.total,
            rate_z_bits: rate_z.total,
            num_pixels: s.n * s.h * s.w,
            x_hat,
            y_hat,
            z_hat,
            sigma,
        })
    }

    /// Rates `(bits_y, bits_z)` of a latent under hard rounding; the
    /// distortion does not depend on the hyper path.
    pub fn forward_eval_latent(&self, y: &Tensor<T>) -> Result<(T, T)> {
        ensure_dim("latent", "channels", y.shape().c, self.m)?;
        let y_hat = quantize_round(y);
        let z_hat = quantize_round(&self.run_path(PathKind::HyperEncoder, y, None)?);
        let sigma = self.scales(&self.run_path(PathKind::HyperDecoder, &z_hat, None)?);
        if sigma.shape() != y.shape() {
            return Err(Error::topology("h_s", format!("scale shape {} differs from latent {}", sigma.shape(), y.shape())));
        }
        let rate_z = self.factorized.rate_masked(&z_hat, self.side_mask().as_deref())?;
        Ok((self.gaussian.rate(&y_hat, &sigma)?.total, rate_z.total))
    }

    fn backward_path(
        &mut self,
        path: PathKind,
        caches: &[LayerCache<T>],
        grad_out: Tensor<T>,
        need_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        let layers = &mut self.paths[path.slot()];
        // trainable_before[i]: some layer before i still wants gradients.
        let mut trainable_before = vec![false; layers.len() + 1];
        for i in 0..layers.len() {
            trainable_before[i + 1] = trainable_before[i] || (layers[i].has_params() && !layers[i].spec.frozen);
        }
        let mut grad = grad_out;
        for i in (0..layers.len()).rev() {
            let need_in = need_input || trainable_before[i];
            if !need_in && (layers[i].spec.frozen || !layers[i].has_params()) {
                return Ok(None);
            }
            match layers[i].backward(&caches[i], grad, need_in)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
        }
        Ok(Some(grad))
    }

    /// Accumulates rate gradients of a hyper pass into the hyper path and
    /// the prior; returns the latent gradient when `need_dy`.
    fn backward_hyper(&mut self, pass: &HyperPass<T>, need_dy: bool) -> Result<Option<Tensor<T>>> {
        let ha = self.path_trainable(PathKind::HyperEncoder);
        let hs = self.path_trainable(PathKind::HyperDecoder);
        let rate_scale = T::one() / T::of(pass.num_pixels as f64);
        let (dv, ds) = self.gaussian.rate_backward(&pass.y_tilde, &pass.sigma, rate_scale)?;
        let need_dz = ha || need_dy;
        let mut dz = None;
        if hs || need_dz {
            let dh = ds.zip_map(&pass.h, |g, h| {
                if h > T::zero() {
                    g
                } else if h < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })?;
            dz = self.backward_path(PathKind::HyperDecoder, &pass.hs, dh, need_dz)?;
        }
        let fg = self.factorized.rate_backward_masked(&pass.z_tilde, rate_scale, self.side_mask().as_deref())?;
        if !self.entropy_frozen {
            self.factorized.mean.accumulate_grad(&fg.mean);
            self.factorized.scale.accumulate_grad(&fg.scale);
        }
        if !need_dz {
            return Ok(None);
        }
        let dz = match dz {
            Some(d) => d.zip_map(&fg.input, |a, b| a + b)?,
            None => fg.input,
        };
        let dy_hyper = self.backward_path(PathKind::HyperEncoder, &pass.ha, dz, need_dy)?;
        Ok(match (need_dy, dy_hyper) {
            (false, _) => None,
            (true, Some(g)) => Some(g.zip_map(&dv, |a, b| a + b)?),
            (true, None) => Some(dv),
        })
    }

    /// Accumulates gradients of the rate of a latent-only pass.
    pub fn backward_latent(&mut self, pass: &HyperPass<T>) -> Result<()> {
        self.backward_hyper(pass, false).map(|_| ())
    }

    /// Accumulates gradients of `pass.loss(lambda)` into every non-frozen
    /// parameter. Paths whose gradients nobody needs are skipped.
    pub fn backward(&mut self, pass: &TrainPass<T>, lambda: T) -> Result<()> {
        let ga = self.path_trainable(PathKind::MainEncoder);
        let gs = self.path_trainable(PathKind::MainDecoder);
        let mut dy = self.backward_hyper(&pass.hyper, ga)?;
        if gs || ga {
            let count = T::of(pass.x.len() as f64);
            let k = lambda * T::of(2.0 * PIXEL_SCALE * PIXEL_SCALE) / count;
            let dx = pass.x_tilde.zip_map(&pass.x, |a, b| k * (a - b))?;
            if let Some(g) = self.backward_path(PathKind::MainDecoder, &pass.gs, dx, ga)? {
                dy = Some(match dy {
                    Some(d) => d.zip_map(&g, |a, b| a + b)?,
                    None => g,
                });
            }
        }
        if let Some(dy) = dy {
            self.backward_path(PathKind::MainEncoder, &pass.ga, dy, false)?;
        }
        Ok(())
    }

    /// Kept side-latent channels while the last hyper-encoder layer carries a
    /// compactor with a partial mask. Soft-pruned channels are exactly zero
    /// and are neither coded nor fed noise, matching the physically pruned
    /// network.
    fn side_mask(&self) -> Option<Vec<bool>> {
        let last = *self.param_layers(PathKind::HyperEncoder).last()?;
        let c = self.path(last.path)[last.index].compactor.as_ref()?;
        c.mask.iter().any(|&k| !k).then(|| c.mask.clone())
    }

    /// Drops every gradient buffer.
    pub fn zero_grad(&mut self) {
        for layers in &mut self.paths {
            for l in layers {
                if let Some(w) = &mut l.weights {
                    w.weight.clear_grad();
                    w.bias.clear_grad();
                }
                if let Some(c) = &mut l.compactor {
                    c.r.clear_grad();
                }
            }
        }
        self.factorized.mean.clear_grad();
        self.factorized.scale.clear_grad();
    }

    /// Named trainable tensors: weights and biases of unfrozen layers, their
    /// compactors, and the side-latent prior unless frozen.
    pub fn trainable_params(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (layers, p) in self.paths.iter_mut().zip(PathKind::ALL) {
            for (i, l) in layers.iter_mut().enumerate() {
                if l.spec.frozen {
                    continue;
                }
                let id = LayerId::new(p, i);
                if let Some(w) = &mut l.weights {
                    out.push((format!("{id}.weight"), &mut w.weight));
                    out.push((format!("{id}.bias"), &mut w.bias));
                }
                if let Some(c) = &mut l.compactor {
                    out.push((format!("{id}.compactor"), &mut c.r));
                }
            }
        }
        if !self.entropy_frozen {
            out.push(("entropy_z.mean".to_string(), &mut self.factorized.mean));
            out.push(("entropy_z.scale".to_string(), &mut self.factorized.scale));
        }
        out
    }

    /// Restores constraints after an optimizer update: masked compactor rows
    /// stay zero and prior scales stay above the floor.
    pub fn post_update(&mut self) {
        for (_, c) in self.compactors_mut() {
            c.enforce_mask();
        }
        self.factorized.clamp_scales();
    }

    /// Appends an identity compactor to a prunable layer.
    pub fn attach_compactor(&mut self, id: LayerId) -> Result<()> {
        let layer = self.layer_mut(id)?;
        if !layer.spec.prunable {
            return Err(Error::Unprunable(id.to_string()));
        }
        if layer.compactor.is_some() {
            return Err(Error::AlreadyAttached(id.to_string()));
        }
        let placement = layer.placement().ok_or_else(|| Error::Unprunable(id.to_string()))?;
        layer.compactor = Some(Compactor::init_identity(layer.spec.out_channels, placement)?);
        Ok(())
    }

    fn consumer(&self, id: LayerId) -> Result<Consumer> {
        let layer = self.layer(id)?;
        if !layer.has_params() {
            return Err(Error::topology(id.to_string(), "activation layers have no output channels to prune"));
        }
        let next = self.paths[id.path.slot()]
            .iter()
            .enumerate()
            .skip(id.index + 1)
            .find(|(_, l)| l.has_params())
            .map(|(i, _)| LayerId::new(id.path, i));
        match (next, id.path) {
            (Some(next), p) if p.is_hyper() => Ok(Consumer::Layer(next)),
            (None, PathKind::HyperEncoder) => {
                let first = self.param_layers(PathKind::HyperDecoder);
                let first = first.first().ok_or_else(|| Error::topology("h_s", "hyper decoder has no weights"))?;
                Ok(Consumer::SideLatent(*first))
            }
            _ => Err(Error::Unprunable(id.to_string())),
        }
    }

    /// Drops input-channel slices of every consumer of `id`'s output; `mask`
    /// indexes the consumer's current input channels.
    pub fn rewire_downstream(&mut self, id: LayerId, mask: &[bool]) -> Result<()> {
        let consumer = self.consumer(id)?;
        let kept: Vec<usize> = mask.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect();
        if kept.is_empty() {
            return Err(Error::invalid("rewire_downstream", format!("mask for {id} keeps no channels")));
        }
        let target = match consumer {
            Consumer::Layer(c) => c,
            Consumer::SideLatent(c) => {
                ensure_dim("rewire_downstream", "mask length", mask.len(), self.factorized.channels())?;
                c
            }
        };
        ensure_dim("rewire_downstream", "mask length", mask.len(), self.layer(target)?.spec.in_channels)?;
        if kept.len() == mask.len() {
            return Ok(());
        }
        if let Consumer::SideLatent(_) = consumer {
            self.factorized = self.factorized.select(&kept);
        }
        let layer = self.layer_mut(target)?;
        let w = layer.weights.as_mut().expect("consumers carry weights");
        w.weight = match w.layout {
            WeightLayout::Conv => w.weight.select_channels(&kept),
            WeightLayout::Deconv => w.weight.select_outer(&kept),
        };
        layer.spec.in_channels = kept.len();
        self.refresh_widths();
        Ok(())
    }

    /// Replaces a layer's weights with a narrower version (merged or sliced)
    /// and drops its compactor.
    pub(crate) fn replace_host(&mut self, id: LayerId, weights: ConvWeights<T>) -> Result<()> {
        let layer = self.layer_mut(id)?;
        let a2 = layer.spec.alpha * layer.spec.alpha;
        layer.spec.out_channels = match layer.spec.kind {
            LayerKind::PixelshuffleConv => weights.out_channels() / a2,
            _ => weights.out_channels(),
        };
        layer.weights = Some(weights);
        layer.compactor = None;
        self.refresh_widths();
        Ok(())
    }

    fn refresh_widths(&mut self) {
        for layers in &mut self.paths {
            let mut width = 0;
            for l in layers {
                if l.has_params() {
                    width = l.spec.out_channels;
                } else {
                    l.spec.in_channels = width;
                    l.spec.out_channels = width;
                }
            }
        }
        if let Some(l) = self.paths[PathKind::MainEncoder.slot()].first_mut() {
            if !l.has_params() {
                l.spec.in_channels = 3;
            }
        }
    }

    /// Re-validates channel chaining of the current weights.
    pub fn check(&self) -> Result<()> {
        let mut specs = self.specs();
        validate(&mut specs, self.m)?;
        for (id, l) in self.layers() {
            if let Some(w) = &l.weights {
                w.validate()?;
                if w.in_channels() != l.spec.in_channels || w.out_channels() != l.spec.conv_out_channels() {
                    return Err(Error::topology(id.to_string(), "weights disagree with the layer spec"));
                }
            }
        }
        let z = self.param_layers(PathKind::HyperEncoder).last().map_or(0, |id| self.path(id.path)[id.index].spec.out_channels);
        ensure_dim("network", "side-latent prior channels", self.factorized.channels(), z)?;
        Ok(())
    }
}

fn zero_channels<T: Scalar>(t: &mut Tensor<T>, keep: &[bool]) {
    let c = t.shape().c;
    let plane = t.shape().plane();
    for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        if !keep[i % c] {
            chunk.iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Mean squared error on the 0..255 scale.
pub fn mse_255<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::invalid("mse", format!("shapes {} and {} differ", a.shape(), b.shape())));
    }
    let k = T::of(PIXEL_SCALE);
    let sum: T = a.data().iter().zip(b.data()).map(|(&p, &q)| ((p - q) * k) * ((p - q) * k)).sum();
    Ok(sum / T::of(a.len().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Optimizer;

    fn desk(n: usize, m: usize, seed: u64) -> Network<f64> {
        Network::new(n, m, PathSpecs::desk(n, m), seed).unwrap()
    }

    fn image(n: usize, size: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(Shape::new(n, 3, size, size), 0.0, 1.0, &mut rng)
    }

    #[test]
    fn desk_shapes() {
        let net = desk(4, 6, 0);
        let pass = net.forward_train(&image(1, 64, 1), 3).unwrap();
        let hp = &pass.hyper;
        assert_eq!(hp.y_tilde.shape(), Shape::new(1, 6, 4, 4));
        assert_eq!(hp.z_tilde.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(hp.sigma.shape(), hp.y_tilde.shape());
        assert_eq!(pass.x_tilde.shape(), Shape::new(1, 3, 64, 64));
        assert!(hp.sigma.data().iter().all(|&s| s >= 0.11));
        assert_eq!(net.downsampling_factor(), 64);
    }

    #[test]
    fn indivisible_input_rejected() {
        let net = desk(4, 6, 0);
        assert!(net.forward_eval(&image(1, 48, 1)).is_err());
        assert!(net.forward_train(&Tensor::zeros(Shape::new(1, 1, 64, 64)), 0).is_err());
    }

    #[test]
    fn zero_head_gives_bias_image() {
        let mut net = desk(4, 6, 0);
        let last = net.paths[1].len() - 1;
        let w = net.paths[1][last].weights.as_mut().unwrap();
        w.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.bias = Tensor::vector(vec![0.25, 0.5, 0.75]);
        let pass = net.forward_eval(&image(1, 64, 2)).unwrap();
        for c in 0..3 {
            assert!((0..64).all(|i| pass.x_hat.at(0, c, i, i) == 0.25 * (c + 1) as f64));
        }
        assert!(pass.mse.is_finite());
    }

    #[test]
    fn eval_is_deterministic() {
        let net = desk(4, 6, 5);
        let x = image(2, 64, 3);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.rate_z_bits >= 0.0 && a.rate_z_bits.is_finite());
    }

    #[test]
    fn parameter_counts() {
        let net = desk(32, 48, 0);
        let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
        let main = conv(3, 32, 5) + 2 * conv(32, 32, 5) + conv(32, 48, 5) + conv(48, 32, 5) + 2 * conv(32, 32, 5) + conv(32, 3, 5);
        let hyper = conv(48, 32, 3) + 2 * conv(32, 32, 5) + conv(32, 32, 5) + conv(32, 128, 3) + conv(32, 48, 3);
        assert_eq!(net.count_parameters(Scope::MainPath), main);
        assert_eq!(net.count_parameters(Scope::HyperPath), hyper);
        assert_eq!(net.count_parameters(Scope::Total), main + hyper + 64);
        assert_eq!(net.count_parameters(Scope::Layer(LayerId::new(PathKind::MainEncoder, 1))), 0);
        assert_eq!(LayerSpec::conv(3, 64, 5, 2).num_params(), 4864);
    }

    #[test]
    fn frozen_everything_changes_nothing() {
        let mut net = desk(4, 6, 0);
        net.freeze_all();
        let before = net.clone();
        let pass = net.forward_train(&image(1, 64, 4), 0).unwrap();
        net.backward(&pass, 0.01).unwrap();
        assert!(net.trainable_params().is_empty());
        let mut opt = Optimizer::adam(1e-2);
        opt.step(net.trainable_params()).unwrap();
        net.post_update();
        net.zero_grad();
        assert_eq!(net, before);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut net = desk(2, 3, 11);
        for id in net.prunable_layers() {
            net.attach_compactor(id).unwrap();
        }
        // Perturb compactors away from identity so their gradients are generic.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (_, c) in net.compactors_mut() {
            let noise = Tensor::randn(c.r.shape(), 0.1, &mut rng);
            c.r = c.r.zip_map(&noise, |a, b| a + b).unwrap();
        }
        let x = image(1, 64, 13);
        let lambda = 0.01;
        let pass = net.forward_train(&x, 7).unwrap();
        net.backward(&pass, lambda).unwrap();
        let names: Vec<String> = net.trainable_params().into_iter().map(|(n, _)| n).collect();
        let h = 1e-6;
        for name in names.iter().step_by(3) {
            let (len, grad) = {
                let mut params = net.trainable_params();
                let (_, t) = params.iter_mut().find(|(n, _)| n == name).unwrap();
                (t.len(), t.grad().unwrap().to_vec())
            };
            for idx in [0, len / 2, len - 1] {
                let probe = |delta: f64| {
                    let mut n2 = net.clone();
                    let mut params = n2.trainable_params();
                    let (_, t) = params.iter_mut().find(|(n, _)| n == name).unwrap();
                    t.data_mut()[idx] += delta;
                    n2.forward_train(&x, 7).unwrap().loss(lambda)
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let an = grad[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-4, "{name}[{idx}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn frozen_main_path_gets_no_gradient() {
        let mut net = desk(4, 6, 0);
        net.freeze_main();
        let pass = net.forward_train(&image(1, 64, 4), 0).unwrap();
        net.backward(&pass, 0.01).unwrap();
        for p in [PathKind::MainEncoder, PathKind::MainDecoder] {
            for l in net.path(p) {
                if let Some(w) = &l.weights {
                    assert!(w.weight.grad().is_none());
                }
            }
        }
        let names: Vec<_> = net.trainable_params().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| n.starts_with("h_") || n.starts_with("entropy_z")));
    }

    #[test]
    fn attach_rules() {
        let mut net = desk(4, 6, 0);
        let ids = net.prunable_layers();
        assert_eq!(ids.len(), 5);
        net.attach_compactor(ids[0]).unwrap();
        assert!(matches!(net.attach_compactor(ids[0]), Err(Error::AlreadyAttached(_))));
        assert!(net.attach_compactor(LayerId::new(PathKind::HyperDecoder, 4)).is_err());
        assert!(net.attach_compactor(LayerId::new(PathKind::MainEncoder, 0)).is_err());
        let placement = |i: usize| net.layer(ids[i]).unwrap().placement().unwrap();
        assert_eq!(placement(3), Placement::AfterDeconv);
        assert_eq!(placement(4), Placement::AfterShuffle);
    }

    #[test]
    fn rewire_slices_consumer_inputs() {
        let mut net = desk(8, 6, 0);
        let before = net.count_parameters(Scope::HyperPath);
        let id = LayerId::new(PathKind::HyperEncoder, 4);
        let mask = [true, false, true, false, false, true, false, false];
        net.rewire_downstream(id, &mask).unwrap();
        let consumer = net.layer(LayerId::new(PathKind::HyperDecoder, 0)).unwrap();
        assert_eq!(consumer.spec.in_channels, 3);
        assert_eq!(net.factorized.channels(), 3);
        // deconv 8->8 ks5 loses five input slices of 8*25 weights
        assert_eq!(before - net.count_parameters(Scope::HyperPath), 5 * 8 * 25);
        assert!(net.rewire_downstream(LayerId::new(PathKind::HyperDecoder, 4), &[true; 6]).is_err());
        assert!(net.rewire_downstream(LayerId::new(PathKind::MainEncoder, 0), &[true; 8]).is_err());
    }

    #[test]
    fn all_true_rewire_is_a_no_op() {
        let mut net = desk(4, 6, 0);
        let before = net.clone();
        net.rewire_downstream(LayerId::new(PathKind::HyperEncoder, 0), &[true; 4]).unwrap();
        assert_eq!(net, before);
    }
}
