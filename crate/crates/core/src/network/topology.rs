//! Declarative description of the four codec paths.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    MainEncoder,
    MainDecoder,
    HyperEncoder,
    HyperDecoder,
}

impl PathKind {
    pub const ALL: [PathKind; 4] = [PathKind::MainEncoder, PathKind::MainDecoder, PathKind::HyperEncoder, PathKind::HyperDecoder];

    pub const fn short(self) -> &'static str {
        match self {
            PathKind::MainEncoder => "g_a",
            PathKind::MainDecoder => "g_s",
            PathKind::HyperEncoder => "h_a",
            PathKind::HyperDecoder => "h_s",
        }
    }

    pub fn from_short(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.short() == s)
    }

    pub const fn is_hyper(self) -> bool {
        matches!(self, PathKind::HyperEncoder | PathKind::HyperDecoder)
    }

    pub(crate) const fn slot(self) -> usize {
        self as usize
    }
}

/// Position of a layer: path plus index within that path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub path: PathKind,
    pub index: usize,
}

impl LayerId {
    pub const fn new(path: PathKind, index: usize) -> Self {
        Self { path, index }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.path.short(), self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Deconv,
    /// Convolution to `alpha^2 * out_channels` followed by a pixel shuffle.
    PixelshuffleConv,
    Activation,
}

fn one() -> usize {
    1
}

fn default_activation() -> Activation {
    Activation::LeakyRelu
}

/// One layer of a path. For activation layers only `kind` and `function`
/// matter; channel counts are inherited from the previous layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default = "default_activation")]
    pub function: Activation,
    #[serde(default)]
    pub in_channels: usize,
    #[serde(default)]
    pub out_channels: usize,
    #[serde(default = "one")]
    pub ks: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
    #[serde(default = "one")]
    pub alpha: usize,
    #[serde(skip, default = "placeholder_path")]
    pub path: PathKind,
    #[serde(default)]
    pub prunable: bool,
    #[serde(default)]
    pub frozen: bool,
}

fn placeholder_path() -> PathKind {
    PathKind::MainEncoder
}

impl LayerSpec {
    fn base(kind: LayerKind, in_channels: usize, out_channels: usize, ks: usize, stride: usize) -> Self {
        Self {
            kind,
            function: Activation::LeakyRelu,
            in_channels,
            out_channels,
            ks,
            stride,
            padding: ks / 2,
            output_padding: 0,
            alpha: 1,
            path: PathKind::MainEncoder,
            prunable: false,
            frozen: false,
        }
    }

    /// "Same"-style padded convolution.
    pub fn conv(in_channels: usize, out_channels: usize, ks: usize, stride: usize) -> Self {
        Self::base(LayerKind::Conv, in_channels, out_channels, ks, stride)
    }

    /// Transposed convolution that upsamples exactly by `stride`.
    pub fn deconv(in_channels: usize, out_channels: usize, ks: usize, stride: usize) -> Self {
        let mut s = Self::base(LayerKind::Deconv, in_channels, out_channels, ks, stride);
        s.output_padding = stride - 1;
        s
    }

    pub fn pixelshuffle_conv(in_channels: usize, out_channels: usize, ks: usize, alpha: usize) -> Self {
        let mut s = Self::base(LayerKind::PixelshuffleConv, in_channels, out_channels, ks, 1);
        s.alpha = alpha;
        s
    }

    pub fn activation(function: Activation) -> Self {
        let mut s = Self::base(LayerKind::Activation, 0, 0, 1, 1);
        s.function = function;
        s.padding = 0;
        s
    }

    pub fn has_params(&self) -> bool {
        self.kind != LayerKind::Activation
    }

    /// Output channels of the underlying convolution (before any shuffle).
    pub fn conv_out_channels(&self) -> usize {
        match self.kind {
            LayerKind::PixelshuffleConv => self.alpha * self.alpha * self.out_channels,
            _ => self.out_channels,
        }
    }

    /// Weight + bias element count at the given channel widths.
    pub fn params_at(&self, in_channels: usize, out_channels: usize) -> usize {
        let k2 = self.ks * self.ks;
        match self.kind {
            LayerKind::Conv | LayerKind::Deconv => out_channels * in_channels * k2 + out_channels,
            LayerKind::PixelshuffleConv => {
                let a2 = self.alpha * self.alpha;
                a2 * out_channels * in_channels * k2 + a2 * out_channels
            }
            LayerKind::Activation => 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params_at(self.in_channels, self.out_channels)
    }

    fn prunable(mut self) -> Self {
        self.prunable = true;
        self
    }
}

/// Layer lists of all four paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSpecs {
    pub main_encoder: Vec<LayerSpec>,
    pub main_decoder: Vec<LayerSpec>,
    pub hyper_encoder: Vec<LayerSpec>,
    pub hyper_decoder: Vec<LayerSpec>,
}

impl PathSpecs {
    pub fn get(&self, path: PathKind) -> &[LayerSpec] {
        match path {
            PathKind::MainEncoder => &self.main_encoder,
            PathKind::MainDecoder => &self.main_decoder,
            PathKind::HyperEncoder => &self.hyper_encoder,
            PathKind::HyperDecoder => &self.hyper_decoder,
        }
    }

    pub fn get_mut(&mut self, path: PathKind) -> &mut Vec<LayerSpec> {
        match path {
            PathKind::MainEncoder => &mut self.main_encoder,
            PathKind::MainDecoder => &mut self.main_decoder,
            PathKind::HyperEncoder => &mut self.hyper_encoder,
            PathKind::HyperDecoder => &mut self.hyper_decoder,
        }
    }

    /// Desk-scale layout: four stride-2 convolutions each way on the main
    /// path; the hyper decoder upsamples once with a transposed convolution
    /// and once with a pixel-shuffle convolution.
    pub fn desk(n: usize, m: usize) -> Self {
        let act = || LayerSpec::activation(Activation::LeakyRelu);
        Self {
            main_encoder: vec![
                LayerSpec::conv(3, n, 5, 2),
                act(),
                LayerSpec::conv(n, n, 5, 2),
                act(),
                LayerSpec::conv(n, n, 5, 2),
                act(),
                LayerSpec::conv(n, m, 5, 2),
            ],
            main_decoder: vec![
                LayerSpec::deconv(m, n, 5, 2),
                act(),
                LayerSpec::deconv(n, n, 5, 2),
                act(),
                LayerSpec::deconv(n, n, 5, 2),
                act(),
                LayerSpec::deconv(n, 3, 5, 2),
            ],
            hyper_encoder: vec![
                LayerSpec::conv(m, n, 3, 1).prunable(),
                act(),
                LayerSpec::conv(n, n, 5, 2).prunable(),
                act(),
                LayerSpec::conv(n, n, 5, 2).prunable(),
            ],
            hyper_decoder: vec![
                LayerSpec::deconv(n, n, 5, 2).prunable(),
                act(),
                LayerSpec::pixelshuffle_conv(n, n, 3, 2).prunable(),
                act(),
                LayerSpec::conv(n, m, 3, 1),
            ],
        }
    }

    /// Layout of the widely used scale-hyperprior reference model (two
    /// transposed convolutions in the hyper decoder); used for parameter
    /// accounting at published widths.
    pub fn reference(n: usize, m: usize) -> Self {
        let mut s = Self::desk(n, m);
        s.hyper_decoder[2] = LayerSpec::deconv(n, n, 5, 2).prunable();
        s
    }
}

/// Preset name or explicit layer lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Topology {
    Preset(Preset),
    Explicit(PathSpecs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Reference,
}

impl Default for Topology {
    fn default() -> Self {
        Topology::Preset(Preset::Desk)
    }
}

impl Topology {
    pub fn resolve(&self, n: usize, m: usize) -> PathSpecs {
        match self {
            Topology::Preset(Preset::Desk) => PathSpecs::desk(n, m),
            Topology::Preset(Preset::Reference) => PathSpecs::reference(n, m),
            Topology::Explicit(p) => p.clone(),
        }
    }
}

/// Checks channel chaining and the pruning rules, filling in path tags and
/// activation widths.
pub fn validate(specs: &mut PathSpecs, m: usize) -> Result<()> {
    let chain = |specs: &mut Vec<LayerSpec>, path: PathKind, input: usize| -> Result<usize> {
        let mut width = input;
        for (i, s) in specs.iter_mut().enumerate() {
            let id = LayerId::new(path, i);
            s.path = path;
            if s.kind == LayerKind::Activation {
                s.in_channels = width;
                s.out_channels = width;
                if s.prunable {
                    return Err(Error::topology(id.to_string(), "activation layers have no channels to prune"));
                }
                continue;
            }
            if s.in_channels != width {
                return Err(Error::topology(
                    id.to_string(),
                    format!("expects {} input channels but receives {width}", s.in_channels),
                ));
            }
            if s.out_channels == 0 || s.ks == 0 || s.stride == 0 || s.alpha == 0 {
                return Err(Error::topology(id.to_string(), "channels, kernel, stride and alpha must be positive"));
            }
            if s.kind != LayerKind::PixelshuffleConv && s.alpha != 1 {
                return Err(Error::topology(id.to_string(), "alpha only applies to pixel-shuffle convolutions"));
            }
            if s.kind != LayerKind::Deconv && s.output_padding != 0 {
                return Err(Error::topology(id.to_string(), "output padding only applies to transposed convolutions"));
            }
            if s.prunable && !path.is_hyper() {
                return Err(Error::topology(id.to_string(), "only hyper-path layers may be prunable"));
            }
            width = s.out_channels;
        }
        Ok(width)
    };

    let latent = chain(&mut specs.main_encoder, PathKind::MainEncoder, 3)?;
    if latent != m {
        return Err(Error::topology("g_a", format!("produces {latent} latent channels, expected M = {m}")));
    }
    let image = chain(&mut specs.main_decoder, PathKind::MainDecoder, m)?;
    if image != 3 {
        return Err(Error::topology("g_s", format!("produces {image} channels, expected 3")));
    }
    let z = chain(&mut specs.hyper_encoder, PathKind::HyperEncoder, m)?;
    let scales = chain(&mut specs.hyper_decoder, PathKind::HyperDecoder, z)?;
    if scales != m {
        return Err(Error::topology("h_s", format!("produces {scales} scale channels, expected M = {m}")));
    }
    if let Some((i, last)) = specs.hyper_decoder.iter().enumerate().rev().find(|(_, s)| s.has_params()) {
        if last.prunable {
            return Err(Error::topology(
                LayerId::new(PathKind::HyperDecoder, i).to_string(),
                "the last hyper-decoder layer fixes the scale width and cannot be pruned",
            ));
        }
    }
    if specs.hyper_encoder.iter().all(|s| !s.has_params()) {
        return Err(Error::topology("h_a", "hyper encoder needs at least one convolution"));
    }
    Ok(())
}
