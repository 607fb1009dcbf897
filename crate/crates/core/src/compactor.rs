//! Compactors: identity-initialised 1x1 channel mixers appended to a host
//! layer, the group-Lasso penalty that sparsifies their rows, and the exact
//! folding of a pruned compactor back into its host.
//!
//! A compactor `R` of shape `(C', C)` maps host output channels to
//! `out[j] = sum_m R[j, m] * host[m]`. Folding it into the host means mixing
//! the host's output-channel slices (and biases) with the same matrix:
//!
//! * convolution `(C_out, C_in, k, k)`: mix along axis 0;
//! * transposed convolution `(C_in, C_out, k, k)`: mix along axis 1;
//! * pixel-shuffle convolution `(a^2 C, C_in, k, k)`: the compactor sits after
//!   the shuffle, so each sub-pixel phase `p` (the channels `p, p + a^2, ...`)
//!   is mixed separately and written back to channels `j * a^2 + p`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::network::{LayerId, Network};
use crate::ops::{ConvWeights, WeightLayout};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Row norms at or below this are treated as exactly zero by the
/// subgradient.
pub const NORM_DEAD_ZONE: f64 = 1e-12;

/// Where the compactor sits relative to its host layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AfterConv,
    /// After the pixel shuffle of a pixel-shuffle convolution, never between
    /// the convolution and the shuffle.
    AfterShuffle,
    AfterDeconv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compactor<T> {
    /// `(rows, C, 1, 1)`; rows is `C` until physically pruned.
    pub r: Tensor<T>,
    pub placement: Placement,
    /// `true` = channel kept.
    pub mask: Vec<bool>,
}

impl<T: Scalar> Compactor<T> {
    pub fn init_identity(channels: usize, placement: Placement) -> Result<Self> {
        if channels < 1 {
            return Err(Error::invalid("init_identity", "compactor needs at least one channel"));
        }
        let mut r = Tensor::zeros(Shape::new(channels, channels, 1, 1));
        for c in 0..channels {
            *r.at_mut(c, c, 0, 0) = T::one();
        }
        Ok(Self { r, placement, mask: vec![true; channels] })
    }

    pub fn channels(&self) -> usize {
        self.r.shape().c
    }

    pub fn rows(&self) -> usize {
        self.r.shape().n
    }

    pub fn kept(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter_map(|(i, &k)| k.then_some(i)).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count()
    }

    pub fn row_norms(&self) -> Vec<T> {
        row_norms(&self.r)
    }

    /// Zeroes deselected rows (and their gradient) so soft-pruned channels
    /// stay dead while training continues.
    pub fn enforce_mask(&mut self) {
        let c = self.channels();
        if self.rows() != self.mask.len() {
            return;
        }
        for (j, &keep) in self.mask.iter().enumerate() {
            if !keep {
                self.r.data_mut()[j * c..(j + 1) * c].iter_mut().for_each(|v| *v = T::zero());
                if let Some(g) = self.r.grad_mut() {
                    g[j * c..(j + 1) * c].iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    /// `R'`: the kept rows in ascending channel order.
    pub fn pruned_matrix(&self) -> Tensor<T> {
        if self.rows() != self.mask.len() {
            return self.r.clone();
        }
        self.r.select_outer(&self.kept())
    }

    /// Reverse pass of [`apply_compactor`]: input gradient plus accumulation
    /// into `R`'s gradient buffer.
    pub fn backward(&mut self, input: &Tensor<T>, grad_out: &Tensor<T>, accumulate_param: bool) -> Tensor<T> {
        let (rows, c) = (self.rows(), self.channels());
        let s = input.shape();
        let plane = s.plane();
        let mut gin = Tensor::zeros(s);
        let mut gr = accumulate_param.then(|| vec![T::zero(); rows * c]);
        let rdat = self.r.data();
        for n in 0..s.n {
            for j in 0..rows {
                let go = &grad_out.data()[(n * rows + j) * plane..(n * rows + j + 1) * plane];
                for m in 0..c {
                    let x = &input.data()[(n * c + m) * plane..(n * c + m + 1) * plane];
                    let rjm = rdat[j * c + m];
                    let gi = &mut gin.data_mut()[(n * c + m) * plane..(n * c + m + 1) * plane];
                    for (g, &o) in gi.iter_mut().zip(go) {
                        *g += rjm * o;
                    }
                    if let Some(gr) = gr.as_mut() {
                        gr[j * c + m] += x.iter().zip(go).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
        }
        if let Some(gr) = gr {
            self.r.accumulate_grad(&gr);
        }
        gin
    }
}

fn row_norms<T: Scalar>(r: &Tensor<T>) -> Vec<T> {
    let c = r.shape().c;
    r.data().chunks(c).map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt()).collect()
}

/// `out[n, j, h, w] = sum_c R[j, c] * t[n, c, h, w]`.
pub fn apply_compactor<T: Scalar>(t: &Tensor<T>, c: &Compactor<T>) -> Result<Tensor<T>> {
    channel_mix(t, &c.r)
}

pub(crate) fn channel_mix<T: Scalar>(t: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    let (rows, cols) = (r.shape().n, r.shape().c);
    ensure_dim("apply_compactor", "tensor channels", s.c, cols)?;
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n, rows, s.h, s.w));
    for n in 0..s.n {
        for j in 0..rows {
            let dst = out.shape().index(n, j, 0, 0);
            for m in 0..cols {
                let rjm = r.data()[j * cols + m];
                if rjm == T::zero() {
                    continue;
                }
                let src = s.index(n, m, 0, 0);
                for p in 0..plane {
                    let v = t.data()[src + p];
                    out.data_mut()[dst + p] += rjm * v;
                }
            }
        }
    }
    Ok(out)
}

/// Plain L1 penalty `sum |w|`.
pub fn lasso_penalty<T: Scalar>(w: &[T]) -> T {
    w.iter().map(|v| v.abs()).sum()
}

/// `sum_i sum_j ||R_i[j, :]||_2` over the given compactors.
pub fn group_lasso_penalty<'a, T: Scalar>(compactors: impl IntoIterator<Item = &'a Compactor<T>>) -> T {
    compactors.into_iter().map(|c| c.row_norms().into_iter().sum::<T>()).sum()
}

/// Gradient of the row-norm sum: each row's unit vector, or zero inside the
/// dead zone.
pub fn group_lasso_gradient<T: Scalar>(r: &Tensor<T>) -> Vec<T> {
    let c = r.shape().c;
    let eps = T::of(NORM_DEAD_ZONE);
    let mut g = vec![T::zero(); r.len()];
    for (j, norm) in row_norms(r).into_iter().enumerate() {
        if norm > eps {
            for m in 0..c {
                g[j * c + m] = r.data()[j * c + m] / norm;
            }
        }
    }
    g
}

/// Keeps rows whose norm reaches `threshold`; if fewer than `min_keep`
/// survive, keeps the `min_keep` largest instead (ties to the lower index).
pub fn select_channels<T: Scalar>(c: &Compactor<T>, threshold: T, min_keep: usize) -> Vec<bool> {
    let norms = c.row_norms();
    let mut mask: Vec<bool> = norms.iter().map(|&n| n >= threshold).collect();
    let min_keep = min_keep.max(1).min(norms.len());
    if mask.iter().filter(|&&k| k).count() < min_keep {
        let mut order: Vec<usize> = (0..norms.len()).collect();
        order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        mask = vec![false; norms.len()];
        for &i in &order[..min_keep] {
            mask[i] = true;
        }
    }
    mask
}

fn check_rp<T: Scalar>(op: &'static str, rp: &Tensor<T>, host_channels: usize) -> Result<(usize, usize)> {
    let s = rp.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::invalid(op, "compactor must be 1x1"));
    }
    ensure_dim(op, "compactor columns", s.c, host_channels)?;
    if s.n == 0 {
        return Err(Error::invalid(op, "compactor keeps no channels"));
    }
    Ok((s.n, s.c))
}

fn mix_bias<T: Scalar>(rp: &Tensor<T>, bias: &[T], pick: impl Fn(usize) -> usize) -> Vec<T> {
    let (rows, cols) = (rp.shape().n, rp.shape().c);
    (0..rows).map(|j| (0..cols).map(|m| rp.data()[j * cols + m] * bias[pick(m)]).sum()).collect()
}

/// Folds a compactor into the convolution it follows.
pub fn merge_conv<T: Scalar>(w: &ConvWeights<T>, rp: &Tensor<T>) -> Result<ConvWeights<T>> {
    if w.layout != WeightLayout::Conv {
        return Err(Error::invalid("merge_conv", "host is not a convolution"));
    }
    let (rows, cols) = check_rp("merge_conv", rp, w.out_channels())?;
    let s = w.weight.shape();
    let slice = s.item();
    let mut weight = Tensor::zeros(Shape::new(rows, s.c, s.h, s.w));
    for j in 0..rows {
        for m in 0..cols {
            let r = rp.data()[j * cols + m];
            let src = &w.weight.data()[m * slice..(m + 1) * slice];
            for (d, &v) in weight.data_mut()[j * slice..(j + 1) * slice].iter_mut().zip(src) {
                *d += r * v;
            }
        }
    }
    let bias = Tensor::vector(mix_bias(rp, w.bias.data(), |m| m));
    ConvWeights::new(weight, bias, WeightLayout::Conv, w.stride, w.padding)
}

/// Folds a compactor into the transposed convolution it follows; output
/// channels live on the second weight axis.
pub fn merge_deconv<T: Scalar>(w: &ConvWeights<T>, rp: &Tensor<T>) -> Result<ConvWeights<T>> {
    if w.layout != WeightLayout::Deconv {
        return Err(Error::invalid("merge_deconv", "host is not a transposed convolution"));
    }
    let (rows, cols) = check_rp("merge_deconv", rp, w.out_channels())?;
    let s = w.weight.shape();
    let k2 = s.plane();
    let mut weight = Tensor::zeros(Shape::new(s.n, rows, s.h, s.w));
    for c in 0..s.n {
        for j in 0..rows {
            let dst = weight.shape().index(c, j, 0, 0);
            for m in 0..cols {
                let r = rp.data()[j * cols + m];
                let src = s.index(c, m, 0, 0);
                for p in 0..k2 {
                    let v = w.weight.data()[src + p];
                    weight.data_mut()[dst + p] += r * v;
                }
            }
        }
    }
    let bias = Tensor::vector(mix_bias(rp, w.bias.data(), |m| m));
    ConvWeights::with_output_padding(weight, bias, WeightLayout::Deconv, w.stride, w.padding, w.output_padding)
}

/// Folds a post-shuffle compactor into a pixel-shuffle convolution.
pub fn merge_pixelshuffle<T: Scalar>(w: &ConvWeights<T>, rp: &Tensor<T>, alpha: usize) -> Result<ConvWeights<T>> {
    if w.layout != WeightLayout::Conv {
        return Err(Error::invalid("merge_pixelshuffle", "host is not a convolution"));
    }
    if alpha == 0 {
        return Err(Error::invalid("merge_pixelshuffle", "alpha must be positive"));
    }
    let a2 = alpha * alpha;
    if !w.out_channels().is_multiple_of(a2) {
        return Err(Error::invalid(
            "merge_pixelshuffle",
            format!("{} output channels not divisible by alpha^2 = {a2}", w.out_channels()),
        ));
    }
    let (rows, cols) = check_rp("merge_pixelshuffle", rp, w.out_channels() / a2)?;
    let s = w.weight.shape();
    let slice = s.item();
    let mut weight = Tensor::zeros(Shape::new(rows * a2, s.c, s.h, s.w));
    let mut bias = vec![T::zero(); rows * a2];
    for phase in 0..a2 {
        for j in 0..rows {
            let dst = j * a2 + phase;
            for m in 0..cols {
                let src = m * a2 + phase;
                let r = rp.data()[j * cols + m];
                let from = &w.weight.data()[src * slice..(src + 1) * slice];
                for (d, &v) in weight.data_mut()[dst * slice..(dst + 1) * slice].iter_mut().zip(from) {
                    *d += r * v;
                }
            }
        }
        let phase_bias = mix_bias(rp, w.bias.data(), |m| m * a2 + phase);
        for (j, b) in phase_bias.into_iter().enumerate() {
            bias[j * a2 + phase] = b;
        }
    }
    ConvWeights::new(weight, Tensor::vector(bias), WeightLayout::Conv, w.stride, w.padding)
}

/// Removes, from every consumer of `layer`'s output, the input slices of
/// channels the mask drops. The layer's own output width is not touched;
/// pair this with a merge or an output slice.
pub fn rewire_downstream<T: Scalar>(net: &mut Network<T>, layer: LayerId, mask: &[bool]) -> Result<()> {
    net.rewire_downstream(layer, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, deconv2d, pixel_shuffle};
    use crate::tensor::max_relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(rows, cols, 1, 1), v.to_vec()).unwrap()
    }

    fn compactor_with(r: Tensor<f64>) -> Compactor<f64> {
        let c = r.shape().n;
        Compactor { r, placement: Placement::AfterConv, mask: vec![true; c] }
    }

    #[test]
    fn identity_init() {
        let c = Compactor::<f64>::init_identity(3, Placement::AfterConv).unwrap();
        assert_eq!(c.r.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(group_lasso_penalty([&c]), 3.0);
        assert!(Compactor::<f64>::init_identity(0, Placement::AfterConv).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f64>::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng);
        assert_eq!(apply_compactor(&t, &c).unwrap(), t);
    }

    #[test]
    fn row_sum_compactor() {
        let c = compactor_with(mat(1, 2, &[1.0, 1.0]));
        let t = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        assert_eq!(apply_compactor(&t, &c).unwrap().data(), &[11.0, 22.0]);
        let bad = Tensor::<f64>::zeros(Shape::new(1, 3, 1, 1));
        assert!(apply_compactor(&bad, &c).is_err());
    }

    #[test]
    fn apply_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Tensor::randn(Shape::new(3, 4, 1, 1), 1.0, &mut rng);
        let t = Tensor::<f64>::randn(Shape::new(2, 4, 3, 5), 1.0, &mut rng);
        let out = apply_compactor(&t, &compactor_with(r.clone())).unwrap();
        for n in 0..2 {
            for j in 0..3 {
                for h in 0..3 {
                    for w in 0..5 {
                        let mut acc = 0.0;
                        for c in 0..4 {
                            acc += r.at(j, c, 0, 0) * t.at(n, c, h, w);
                        }
                        assert!((out.at(n, j, h, w) - acc).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn penalties() {
        assert_eq!(group_lasso_penalty([&compactor_with(mat(2, 2, &[3.0, 4.0, 0.0, 0.0]))]), 5.0);
        assert_eq!(group_lasso_penalty([&compactor_with(mat(2, 2, &[0.0; 4]))]), 0.0);
        assert_eq!(lasso_penalty(&[1.0f64, -2.0, 0.5]), 3.5);
    }

    #[test]
    fn penalty_gradient() {
        let g = group_lasso_gradient(&mat(2, 2, &[3.0, 4.0, 0.0, 0.0]));
        assert_eq!(g, vec![0.6, 0.8, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Tensor::<f64>::randn(Shape::new(4, 5, 1, 1), 1.0, &mut rng);
        let g = group_lasso_gradient(&r);
        let h = 1e-6;
        for i in 0..r.len() {
            let mut p = r.clone();
            p.data_mut()[i] += h;
            let mut m = r.clone();
            m.data_mut()[i] -= h;
            let fd = (group_lasso_penalty([&compactor_with(p)]) - group_lasso_penalty([&compactor_with(m)])) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn selection_rules() {
        let c = compactor_with(mat(3, 1, &[0.0001, 0.5, 0.001]));
        assert_eq!(select_channels(&c, 0.01, 1), vec![false, true, false]);
        let c = compactor_with(mat(4, 1, &[0.001, 0.003, 0.002, 0.0]));
        assert_eq!(select_channels(&c, 0.01, 2), vec![false, true, true, false]);
        let c = compactor_with(mat(4, 1, &[0.001, 0.001, 0.001, 0.001]));
        assert_eq!(select_channels(&c, 0.01, 2), vec![true, true, false, false]);
        let c = compactor_with(mat(2, 1, &[0.0, 0.0]));
        assert_eq!(select_channels(&c, 0.0, 1), vec![true, true]);
    }

    #[test]
    fn identity_merges_are_no_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let id = Compactor::<f64>::init_identity(3, Placement::AfterConv).unwrap().r;
        let w = ConvWeights::new(
            Tensor::randn(Shape::new(3, 2, 3, 3), 1.0, &mut rng),
            Tensor::randn(Shape::new(1, 3, 1, 1), 1.0, &mut rng),
            WeightLayout::Conv,
            1,
            1,
        )
        .unwrap();
        assert_eq!(merge_conv(&w, &id).unwrap(), w);
        let d = ConvWeights::with_output_padding(
            Tensor::randn(Shape::new(2, 3, 5, 5), 1.0, &mut rng),
            Tensor::randn(Shape::new(1, 3, 1, 1), 1.0, &mut rng),
            WeightLayout::Deconv,
            2,
            2,
            1,
        )
        .unwrap();
        assert_eq!(merge_deconv(&d, &id).unwrap(), d);
        let ps = ConvWeights::new(
            Tensor::randn(Shape::new(12, 2, 3, 3), 1.0, &mut rng),
            Tensor::randn(Shape::new(1, 12, 1, 1), 1.0, &mut rng),
            WeightLayout::Conv,
            1,
            1,
        )
        .unwrap();
        assert_eq!(merge_pixelshuffle(&ps, &id, 2).unwrap(), ps);
    }

    #[test]
    fn scalar_conv_merge() {
        let w = ConvWeights::new(
            Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![1.0, 2.0]).unwrap(),
            Tensor::vector(vec![0.5, -0.5]),
            WeightLayout::Conv,
            1,
            0,
        )
        .unwrap();
        let rp = mat(1, 2, &[1.0, 1.0]);
        let merged = merge_conv(&w, &rp).unwrap();
        assert_eq!(merged.weight.data(), &[3.0]);
        assert_eq!(merged.bias.data(), &[0.0]);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![1.7]).unwrap();
        let a = conv2d(&x, &merged).unwrap();
        let b = channel_mix(&conv2d(&x, &w).unwrap(), &rp).unwrap();
        assert!((a.data()[0] - 3.0 * 1.7).abs() < 1e-15);
        assert!((b.data()[0] - 3.0 * 1.7).abs() < 1e-15);
    }

    #[test]
    fn pixelshuffle_merge_sums_shuffled_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // alpha 2, C = 2 -> C' = 1, ks 1, C_in 1, 1x1 input
        let w = ConvWeights::new(
            Tensor::randn(Shape::new(8, 1, 1, 1), 1.0, &mut rng),
            Tensor::randn(Shape::new(1, 8, 1, 1), 1.0, &mut rng),
            WeightLayout::Conv,
            1,
            0,
        )
        .unwrap();
        let rp = mat(1, 2, &[1.0, 1.0]);
        let merged = merge_pixelshuffle(&w, &rp, 2).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.8]).unwrap();
        let shuffled = pixel_shuffle(&conv2d(&x, &w).unwrap(), 2).unwrap();
        let merged_out = pixel_shuffle(&conv2d(&x, &merged).unwrap(), 2).unwrap();
        assert_eq!(merged_out.shape(), Shape::new(1, 1, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                let expect = shuffled.at(0, 0, i, j) + shuffled.at(0, 1, i, j);
                assert!((merged_out.at(0, 0, i, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn deconv_merge_adds_output_channel_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = ConvWeights::new(
            Tensor::randn(Shape::new(1, 2, 1, 1), 1.0, &mut rng),
            Tensor::randn(Shape::new(1, 2, 1, 1), 1.0, &mut rng),
            WeightLayout::Deconv,
            1,
            0,
        )
        .unwrap();
        let merged = merge_deconv(&w, &mat(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(merged.weight.data()[0], w.weight.data()[0] + w.weight.data()[1]);
        let x = Tensor::randn(Shape::new(1, 1, 3, 3), 1.0, &mut rng);
        let a = deconv2d(&x, &merged).unwrap();
        let b = channel_mix(&deconv2d(&x, &w).unwrap(), &mat(1, 2, &[1.0, 1.0])).unwrap();
        assert!(max_relative_error(b.data(), a.data()) < 1e-14);
    }

    #[test]
    fn merge_rejects_mismatched_compactor() {
        let w = ConvWeights::<f64>::new(
            Tensor::zeros(Shape::new(3, 1, 1, 1)),
            Tensor::vector(vec![0.0; 3]),
            WeightLayout::Conv,
            1,
            0,
        )
        .unwrap();
        assert!(merge_conv(&w, &mat(1, 2, &[1.0, 1.0])).is_err());
        assert!(merge_pixelshuffle(&w, &mat(1, 1, &[1.0]), 2).is_err());
        assert!(merge_deconv(&w, &mat(1, 3, &[1.0; 3])).is_err());
    }

    #[test]
    fn compactor_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = compactor_with(Tensor::randn(Shape::new(3, 4, 1, 1), 1.0, &mut rng));
        let t = Tensor::<f64>::randn(Shape::new(2, 4, 2, 3), 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(Shape::new(2, 3, 2, 3), 1.0, &mut rng);
        let loss = |c: &Compactor<f64>, t: &Tensor<f64>| -> f64 {
            apply_compactor(t, c).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let gin = c.backward(&t, &probe, true);
        let h = 1e-6;
        for i in 0..c.r.len() {
            let mut p = c.clone();
            p.r.data_mut()[i] += h;
            let mut m = c.clone();
            m.r.data_mut()[i] -= h;
            let fd = (loss(&p, &t) - loss(&m, &t)) / (2.0 * h);
            assert!((fd - c.r.grad().unwrap()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in 0..t.len() {
            let mut p = t.clone();
            p.data_mut()[i] += h;
            let mut m = t.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&c, &p) - loss(&c, &m)) / (2.0 * h);
            assert!((fd - gin.data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn pure_penalty_sgd_shrinks_norm_by_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut c = compactor_with(Tensor::randn(Shape::new(4, 4, 1, 1), 1.0, &mut rng));
        let (lr, beta) = (0.01, 0.3);
        let mut prev = c.row_norms();
        for _ in 0..20 {
            let g = group_lasso_gradient(&c.r);
            for (w, gv) in c.r.data_mut().iter_mut().zip(g) {
                *w -= lr * beta * gv;
            }
            let now = c.row_norms();
            for (a, b) in prev.iter().zip(&now) {
                assert!(b <= a);
                if *a > lr * beta {
                    assert!(((a - b) - lr * beta).abs() < 1e-12);
                }
            }
            prev = now;
        }
    }
}
