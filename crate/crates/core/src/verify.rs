//! Randomised checks that folding a compactor into its host gives the same
//! output as running the host followed by the compactor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compactor::{channel_mix, merge_conv, merge_deconv, merge_pixelshuffle};
use crate::error::Result;
use crate::ops::{conv2d, deconv2d, pixel_shuffle, ConvWeights, WeightLayout};
use crate::scalar::Scalar;
use crate::tensor::{max_relative_error, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeKind {
    Conv,
    PixelShuffle { alpha: usize },
    Deconv { stride: usize },
}

impl std::fmt::Display for MergeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MergeKind::Conv => write!(f, "merge_conv"),
            MergeKind::PixelShuffle { alpha } => write!(f, "merge_pixelshuffle(alpha={alpha})"),
            MergeKind::Deconv { stride } => write!(f, "merge_deconv(stride={stride})"),
        }
    }
}

/// The merge variants exercised by [`verify_all`].
pub const MERGE_KINDS: [MergeKind; 5] = [
    MergeKind::Conv,
    MergeKind::PixelShuffle { alpha: 2 },
    MergeKind::PixelShuffle { alpha: 3 },
    MergeKind::Deconv { stride: 1 },
    MergeKind::Deconv { stride: 2 },
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeSummary {
    pub kind: MergeKind,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Random `(rows, C)` matrix whose rows come from a random nonempty subset of
/// the `C` channels of a dense random compactor.
fn random_pruned_matrix<T: Scalar>(c: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let mut keep: Vec<usize> = (0..c).filter(|_| rng.gen_bool(0.6)).collect();
    if keep.is_empty() {
        keep.push(rng.gen_range(0..c));
    }
    let r = Tensor::<T>::uniform(Shape::new(c, c, 1, 1), T::of(-1.0), T::of(1.0), rng);
    r.select_outer(&keep)
}

fn random_input<T: Scalar>(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::uniform(Shape::new(rng.gen_range(1..=2), c, h, w), T::of(-1.0), T::of(1.0), rng)
}

/// One random instance; returns the max relative error between the merged
/// layer and host-then-compactor.
pub fn merge_trial<T: Scalar>(kind: MergeKind, rng: &mut ChaCha8Rng) -> Result<f64> {
    let ks = [1usize, 2, 3, 4, 5][rng.gen_range(0..5)];
    let cin = rng.gen_range(1..=4);
    let cout = rng.gen_range(1..=6);
    let padding = rng.gen_range(0..=ks / 2);
    let (h, w) = (rng.gen_range(ks.max(3)..=8), rng.gen_range(ks.max(3)..=8));
    let x = random_input::<T>(cin, h, w, rng);
    let rp = random_pruned_matrix::<T>(cout, rng);
    let (reference, merged) = match kind {
        MergeKind::Conv => {
            let stride = rng.gen_range(1..=2);
            let host = random_weights(WeightLayout::Conv, cout, cin, ks, stride, padding, 0, rng)?;
            (channel_mix(&conv2d(&x, &host)?, &rp)?, conv2d(&x, &merge_conv(&host, &rp)?)?)
        }
        MergeKind::PixelShuffle { alpha } => {
            let a2 = alpha * alpha;
            let host = random_weights(WeightLayout::Conv, cout * a2, cin, ks, 1, padding, 0, rng)?;
            let unmerged = channel_mix(&pixel_shuffle(&conv2d(&x, &host)?, alpha)?, &rp)?;
            let folded = merge_pixelshuffle(&host, &rp, alpha)?;
            (unmerged, pixel_shuffle(&conv2d(&x, &folded)?, alpha)?)
        }
        MergeKind::Deconv { stride } => {
            let output_padding = rng.gen_range(0..stride);
            let host = random_weights(WeightLayout::Deconv, cout, cin, ks, stride, padding, output_padding, rng)?;
            (channel_mix(&deconv2d(&x, &host)?, &rp)?, deconv2d(&x, &merge_deconv(&host, &rp)?)?)
        }
    };
    Ok(max_relative_error(reference.data(), merged.data()))
}

#[allow(clippy::too_many_arguments)]
fn random_weights<T: Scalar>(
    layout: WeightLayout,
    cout: usize,
    cin: usize,
    ks: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvWeights<T>> {
    let shape = match layout {
        WeightLayout::Conv => Shape::new(cout, cin, ks, ks),
        WeightLayout::Deconv => Shape::new(cin, cout, ks, ks),
    };
    let weight = Tensor::uniform(shape, T::of(-1.0), T::of(1.0), rng);
    let bias = Tensor::vector((0..cout).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect());
    ConvWeights::with_output_padding(weight, bias, layout, stride, padding, output_padding)
}

pub fn verify_merge<T: Scalar>(kind: MergeKind, trials: usize, seed: u64) -> Result<MergeSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        worst = worst.max(merge_trial::<T>(kind, &mut rng)?);
    }
    Ok(MergeSummary { kind, trials, max_rel_err: worst })
}

/// Runs every kind in [`MERGE_KINDS`], each from its own seed stream.
pub fn verify_all<T: Scalar>(trials: usize, seed: u64) -> Result<Vec<MergeSummary>> {
    MERGE_KINDS
        .iter()
        .enumerate()
        .map(|(i, &k)| verify_merge::<T>(k, trials, seed.wrapping_mul(16).wrapping_add(i as u64)))
        .collect()
}
