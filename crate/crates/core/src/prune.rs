//! The pruning pipeline: attach compactors to the hyper path, train with
//! the group-Lasso penalty while the main path is frozen, deselect weak
//! channels toward a parameter target, fold compactors into their hosts and
//! finetune.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::compactor::{group_lasso_gradient, group_lasso_penalty, merge_conv, merge_deconv, merge_pixelshuffle, Placement};
use crate::error::{Error, Result};
use crate::network::{LayerId, LayerKind, Network, PathKind, Scope};
use crate::ops::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::train::{accumulate_gradients, apply_update, latent_batch, Batch, BatchSampler, Latent, LossBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub beta: f64,
    pub lambda: f64,
    /// Fraction of hyper-path parameters to remove.
    pub prune_target: f64,
    /// Rows with a smaller norm are deselection candidates.
    pub threshold: f64,
    pub selection_interval: usize,
    /// Upper bound on penalized training steps.
    pub max_steps: usize,
    /// Learning rate of the penalized training phase.
    pub lr: f64,
    pub min_keep: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    /// Finetune steps between checkpoint evaluations.
    pub eval_interval: usize,
    /// Sweeps without deselection (after the first one) that end the phase.
    pub plateau_sweeps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            beta: 1e-9,
            lambda: 0.01,
            prune_target: 0.7,
            threshold: 1e-4,
            selection_interval: 500,
            max_steps: 20_000,
            lr: 1e-4,
            min_keep: 1,
            finetune_steps: 2000,
            finetune_lr: 1e-4,
            eval_interval: 100,
            plateau_sweeps: 3,
            batch_size: 8,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_target > 0.0 && self.prune_target <= 1.0) {
            return Err(Error::Config("prune_target must lie in (0, 1]".into()));
        }
        if self.beta < 0.0 || self.min_keep == 0 || self.selection_interval == 0 || self.eval_interval == 0 {
            return Err(Error::Config("beta must be nonnegative; min_keep and intervals positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PenalizedTraining,
    Pruned,
    Merged,
    Finetuned,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PenalizedTraining => "penalized_training",
            Phase::Pruned => "pruned",
            Phase::Merged => "merged",
            Phase::Finetuned => "finetuned",
        }
    }
}

/// One history record.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown,
    /// Hyper-path parameters as if physically pruned.
    pub hyper_params: usize,
    /// Kept channels per compactor, in `PruneState::layers` order.
    pub kept: Vec<usize>,
    /// Row norms per compactor at this record.
    pub norms: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    pub step: usize,
    pub phase: Phase,
    pub layers: Vec<LayerId>,
    pub original_hyper_params: usize,
    pub hyper_params: usize,
    pub sweeps: usize,
    pub quiet_sweeps: usize,
    pub deselected_any: bool,
    /// A candidate was refused because it would overshoot the target.
    pub target_reached: bool,
    pub history: Vec<HistoryRow>,
}

impl PruneState {
    pub fn new<T: Scalar>(net: &Network<T>) -> Self {
        let hyper = net.count_parameters(Scope::HyperPath);
        Self {
            step: 0,
            phase: Phase::PenalizedTraining,
            layers: net.compactor_layers(),
            original_hyper_params: hyper,
            hyper_params: hyper,
            sweeps: 0,
            quiet_sweeps: 0,
            deselected_any: false,
            target_reached: false,
            history: Vec::new(),
        }
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.hyper_params as f64 / self.original_hyper_params.max(1) as f64
    }

    fn record<T: Scalar>(&mut self, net: &Network<T>, loss: LossBreakdown) {
        let (kept, norms) = self
            .layers
            .iter()
            .map(|&id| match net.layer(id).ok().and_then(|l| l.compactor.as_ref()) {
                Some(c) => (c.kept_count(), c.row_norms().iter().map(|v| v.as_f64()).collect()),
                None => (net.layer(id).map_or(0, |l| l.spec.out_channels), Vec::new()),
            })
            .unzip();
        self.history.push(HistoryRow { step: self.step, phase: self.phase, loss, hyper_params: self.hyper_params, kept, norms });
    }

    /// History as CSV: step, phase, loss terms, projected hyper parameters
    /// and kept channels per pruned layer.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,phase,rate_bpp,lambda_d,beta_lasso,hyper_params");
        for id in &self.layers {
            write!(out, ",kept_{id}").unwrap();
        }
        out.push('\n');
        for r in &self.history {
            write!(
                out,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.step,
                r.phase.as_str(),
                r.loss.rate,
                r.loss.distortion,
                r.loss.penalty,
                r.hyper_params
            )
            .unwrap();
            for k in &r.kept {
                write!(out, ",{k}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Attaches identity compactors to every prunable layer and freezes the
/// main path. Returns the number of compactors attached.
pub fn attach_and_freeze<T: Scalar>(net: &mut Network<T>) -> Result<usize> {
    if let Some((id, _)) = net.compactors().next() {
        return Err(Error::AlreadyAttached(id.to_string()));
    }
    let ids = net.prunable_layers();
    for &id in &ids {
        net.attach_compactor(id)?;
    }
    net.freeze_main();
    Ok(ids.len())
}

/// `beta * sum of compactor row norms`.
pub fn penalty_value<T: Scalar>(net: &Network<T>, beta: f64) -> f64 {
    beta * group_lasso_penalty(net.compactors().map(|(_, c)| c)).as_f64()
}

/// One update on `R + lambda D + beta * group Lasso`.
pub fn penalized_step<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    batch: &Batch<T>,
    cfg: &PruneConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    penalized_step_scaled(net, opt, batch, cfg, seed, 1.0)
}

/// [`penalized_step`] with the data gradient multiplied by `data_scale`
/// before the penalty gradient is added (0 isolates the penalty).
pub fn penalized_step_scaled<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut Optimizer<T>,
    batch: &Batch<T>,
    cfg: &PruneConfig,
    seed: u64,
    data_scale: f64,
) -> Result<LossBreakdown> {
    net.zero_grad();
    let mut loss = accumulate_gradients(net, batch, cfg.lambda, seed)?;
    loss.penalty = penalty_value(net, cfg.beta);
    let scale = T::of(data_scale);
    for (_, t) in net.trainable_params() {
        let len = t.len();
        let g = t.grad_or_init();
        debug_assert_eq!(g.len(), len);
        g.iter_mut().for_each(|v| *v *= scale);
    }
    let beta = T::of(cfg.beta);
    for (_, c) in net.compactors_mut() {
        let g = group_lasso_gradient(&c.r);
        let buf = c.r.grad_or_init();
        for (b, v) in buf.iter_mut().zip(g) {
            *b += beta * v;
        }
    }
    apply_update(net, opt)?;
    Ok(loss)
}

/// Hyper-path parameters if every compactor were folded in with its
/// current mask.
pub fn projected_hyper_params<T: Scalar>(net: &Network<T>) -> usize {
    let width = |id: LayerId| -> usize {
        let l = &net.path(id.path)[id.index];
        l.compactor.as_ref().map_or(l.spec.out_channels, |c| c.kept_count())
    };
    let mut total = 0;
    let mut input = net.m;
    for path in [PathKind::HyperEncoder, PathKind::HyperDecoder] {
        for id in net.param_layers(path) {
            let spec = &net.path(path)[id.index].spec;
            let out = width(id);
            total += spec.params_at(input, out);
            input = out;
        }
    }
    total
}

/// Result of one selection sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SweepOutcome {
    pub deselected: usize,
    pub refused_by_target: bool,
}

/// Soft-prunes weak compactor rows, weakest first, while the projected
/// hyper-path reduction stays within the target.
pub fn selection_sweep<T: Scalar>(net: &mut Network<T>, state: &mut PruneState, cfg: &PruneConfig) -> Result<SweepOutcome> {
    let threshold = T::of(cfg.threshold);
    let mut candidates: Vec<(T, usize, usize)> = Vec::new();
    let ids = net.compactor_layers();
    for (li, (_, c)) in net.compactors().enumerate() {
        for (row, norm) in c.row_norms().into_iter().enumerate() {
            if c.mask[row] && norm < threshold {
                candidates.push((norm, li, row));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then((a.1, a.2).cmp(&(b.1, b.2))));
    let limit = (1.0 - cfg.prune_target) * state.original_hyper_params as f64;
    let mut outcome = SweepOutcome::default();
    for (_, li, row) in candidates {
        let id = ids[li];
        let c = net.layer_mut(id)?.compactor.as_mut().expect("listed compactor");
        if c.kept_count() <= cfg.min_keep {
            continue;
        }
        c.mask[row] = false;
        let projected = projected_hyper_params(net);
        if (projected as f64) < limit - 1e-9 {
            net.layer_mut(id)?.compactor.as_mut().expect("listed compactor").mask[row] = true;
            outcome.refused_by_target = true;
            continue;
        }
        outcome.deselected += 1;
    }
    net.post_update();
    state.sweeps += 1;
    state.hyper_params = projected_hyper_params(net);
    if outcome.deselected > 0 {
        state.deselected_any = true;
        state.quiet_sweeps = 0;
    } else if state.deselected_any {
        state.quiet_sweeps += 1;
    }
    state.target_reached |= outcome.refused_by_target;
    Ok(outcome)
}

/// Folds every compactor into its host with its mask applied and narrows
/// the consumers; the output equals the soft-pruned network's.
pub fn physical_prune_and_merge<T: Scalar>(net: &mut Network<T>) -> Result<()> {
    for id in net.compactor_layers() {
        let layer = net.layer(id)?;
        let c = layer.compactor.as_ref().expect("listed compactor");
        let mask = c.mask.clone();
        if c.kept_count() == 0 {
            return Err(Error::invalid("physical_prune_and_merge", format!("mask for {id} keeps no channels")));
        }
        let rp = c.pruned_matrix();
        let w = layer.weights.as_ref().expect("compactor hosts carry weights");
        let merged = match c.placement {
            Placement::AfterConv => merge_conv(w, &rp)?,
            Placement::AfterDeconv => merge_deconv(w, &rp)?,
            Placement::AfterShuffle => merge_pixelshuffle(w, &rp, layer.spec.alpha)?,
        };
        net.replace_host(id, merged)?;
        net.rewire_downstream(id, &mask)?;
    }
    net.check()
}

/// Keeps the `ceil(ratio * C)` lowest-index output channels of every
/// prunable layer, slicing weights and consumers.
pub fn manual_uniform_prune<T: Scalar>(net: &mut Network<T>, ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("manual_uniform_prune", format!("ratio {ratio} outside (0, 1]")));
    }
    if let Some((id, _)) = net.compactors().next() {
        return Err(Error::invalid("manual_uniform_prune", format!("compactor still attached to {id}")));
    }
    for id in net.prunable_layers() {
        let layer = net.layer(id)?;
        let c = layer.spec.out_channels;
        let keep = (ratio * c as f64 - 1e-9).ceil() as usize;
        if keep == 0 {
            return Err(Error::invalid("manual_uniform_prune", format!("ratio {ratio} leaves {id} without channels")));
        }
        if keep == c {
            continue;
        }
        let mut sel = Tensor::zeros(Shape::new(keep, c, 1, 1));
        for j in 0..keep {
            *sel.at_mut(j, j, 0, 0) = T::one();
        }
        let w = layer.weights.as_ref().expect("prunable layers carry weights");
        let sliced = match layer.spec.kind {
            LayerKind::Conv => merge_conv(w, &sel)?,
            LayerKind::Deconv => merge_deconv(w, &sel)?,
            LayerKind::PixelshuffleConv => merge_pixelshuffle(w, &sel, layer.spec.alpha)?,
            LayerKind::Activation => unreachable!("activations are never prunable"),
        };
        net.replace_host(id, sliced)?;
        let mask: Vec<bool> = (0..c).map(|j| j < keep).collect();
        net.rewire_downstream(id, &mask)?;
    }
    net.check()
}

/// Eval-mode loss on cached latents: hard-rounded rate plus the constant
/// distortion term.
pub fn latent_eval_loss<T: Scalar>(net: &Network<T>, latents: &[Latent<T>], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for l in latents {
        let (by, bz) = net.forward_eval_latent(&l.y)?;
        total += (by + bz).as_f64() / l.num_pixels as f64 + lambda * l.mse.as_f64();
    }
    Ok(total / latents.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneOutcome {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
}

/// Plain rate training of the unfrozen (hyper) parameters; the network is
/// left at the checkpoint with the lowest monitored loss.
pub fn finetune<T: Scalar>(
    net: &mut Network<T>,
    latents: &[Latent<T>],
    monitor: &[Latent<T>],
    cfg: &PruneConfig,
    mut state: Option<&mut PruneState>,
) -> Result<FinetuneOutcome> {
    let initial = latent_eval_loss(net, monitor, cfg.lambda)?;
    let mut best = (initial, 0usize, net.clone());
    if cfg.finetune_steps == 0 || latents.is_empty() {
        return Ok(FinetuneOutcome { initial_loss: initial, best_loss: initial, best_step: 0 });
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.finetune_lr);
    let mut sampler = BatchSampler::new(latents.len(), cfg.seed ^ 0xF1E7);
    let mut window = (LossBreakdown::default(), 0usize);
    for step in 1..=cfg.finetune_steps {
        let batch = latent_batch(latents, &sampler.next_indices(cfg.batch_size))?;
        net.zero_grad();
        let l = accumulate_gradients(net, &batch, cfg.lambda, cfg.seed.wrapping_add(0x5EED_0000 + step as u64))?;
        apply_update(net, &mut opt)?;
        window.0.rate += l.rate;
        window.0.distortion += l.distortion;
        window.1 += 1;
        if step % cfg.eval_interval == 0 || step == cfg.finetune_steps {
            let loss = latent_eval_loss(net, monitor, cfg.lambda)?;
            if loss < best.0 {
                best = (loss, step, net.clone());
            }
            if let Some(s) = state.as_deref_mut() {
                s.step += window.1;
                let k = window.1 as f64;
                let avg = LossBreakdown { rate: window.0.rate / k, distortion: window.0.distortion / k, penalty: 0.0 };
                s.record(net, avg);
            }
            window = (LossBreakdown::default(), 0);
        }
    }
    *net = best.2;
    Ok(FinetuneOutcome { initial_loss: initial, best_loss: best.0, best_step: best.1 })
}

/// Penalized training with periodic selection sweeps until the target is
/// met, the deselections plateau, or `max_steps` runs out.
pub fn penalized_training<T: Scalar>(
    net: &mut Network<T>,
    latents: &[Latent<T>],
    cfg: &PruneConfig,
    state: &mut PruneState,
) -> Result<()> {
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut sampler = BatchSampler::new(latents.len(), cfg.seed);
    let mut window = (LossBreakdown::default(), 0usize);
    for step in 1..=cfg.max_steps {
        let batch = latent_batch(latents, &sampler.next_indices(cfg.batch_size))?;
        let l = penalized_step(net, &mut opt, &batch, cfg, cfg.seed.wrapping_add(step as u64))?;
        state.step += 1;
        window.0.rate += l.rate;
        window.0.distortion += l.distortion;
        window.0.penalty += l.penalty;
        window.1 += 1;
        if step % cfg.selection_interval == 0 || step == cfg.max_steps {
            selection_sweep(net, state, cfg)?;
            let k = window.1 as f64;
            let avg = LossBreakdown { rate: window.0.rate / k, distortion: window.0.distortion / k, penalty: window.0.penalty / k };
            state.record(net, avg);
            window = (LossBreakdown::default(), 0);
            if state.target_reached || state.quiet_sweeps >= cfg.plateau_sweeps {
                break;
            }
        }
    }
    Ok(())
}

/// Full pipeline on a (pretrained) network: attach and freeze, penalized
/// training with sweeps, physical prune and merge, finetune.
pub fn run_erhp<T: Scalar>(
    net: &mut Network<T>,
    latents: &[Latent<T>],
    monitor: &[Latent<T>],
    cfg: &PruneConfig,
) -> Result<(PruneState, FinetuneOutcome)> {
    cfg.validate()?;
    if latents.is_empty() {
        return Err(Error::invalid("run_erhp", "no training latents"));
    }
    attach_and_freeze(net)?;
    let mut state = PruneState::new(net);
    state.record(net, LossBreakdown::default());
    penalized_training(net, latents, cfg, &mut state)?;
    state.phase = Phase::Pruned;
    physical_prune_and_merge(net)?;
    state.phase = Phase::Merged;
    state.hyper_params = net.count_parameters(Scope::HyperPath);
    state.record(net, LossBreakdown::default());
    state.phase = Phase::Finetuned;
    let outcome = finetune(net, latents, monitor, cfg, Some(&mut state))?;
    Ok((state, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_image;
    use crate::network::PathSpecs;
    use crate::tensor::max_relative_error;
    use crate::train::cache_latents;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network<f64> {
        Network::new(8, 6, PathSpecs::desk(8, 6), 3).unwrap()
    }

    #[test]
    fn attach_counts_and_rejects_double() {
        let mut n = net();
        assert_eq!(attach_and_freeze(&mut n).unwrap(), 5);
        assert!(matches!(attach_and_freeze(&mut n), Err(Error::AlreadyAttached(_))));
        assert!(n.path(PathKind::MainEncoder).iter().all(|l| l.spec.frozen));
    }

    #[test]
    fn projected_count_matches_physical_prune() {
        let mut n = net();
        attach_and_freeze(&mut n).unwrap();
        assert_eq!(projected_hyper_params(&n), n.count_parameters(Scope::HyperPath));
        for (i, (_, c)) in n.compactors_mut().enumerate() {
            for j in 0..=i {
                c.mask[j] = false;
            }
        }
        n.post_update();
        let projected = projected_hyper_params(&n);
        physical_prune_and_merge(&mut n).unwrap();
        assert_eq!(n.count_parameters(Scope::HyperPath), projected);
        assert!(n.compactors().next().is_none());
    }

    #[test]
    fn soft_and_hard_pruning_agree_on_rates() {
        let mut soft = net();
        attach_and_freeze(&mut soft).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (i, (_, c)) in soft.compactors_mut().enumerate() {
            c.r.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
            let len = c.mask.len();
            c.mask[i % len] = false;
            c.mask[(i + 3) % len] = false;
        }
        soft.post_update();
        let mut hard = soft.clone();
        physical_prune_and_merge(&mut hard).unwrap();
        let x = synthetic_image::<f64>(64, 64, 1);
        let (a, b) = (soft.forward_eval(&x).unwrap(), hard.forward_eval(&x).unwrap());
        assert!(max_relative_error(a.sigma.data(), b.sigma.data()) < 1e-12);
        assert!((a.rate_z_bits - b.rate_z_bits).abs() < 1e-9 * a.rate_z_bits.abs().max(1.0));
        assert!((a.rate_y_bits - b.rate_y_bits).abs() < 1e-9 * a.rate_y_bits.abs().max(1.0));
        let y = &cache_latents(&soft, &[x]).unwrap()[0].y;
        let (sa, sb) = (soft.forward_eval_latent(y).unwrap(), hard.forward_eval_latent(y).unwrap());
        assert!((sa.0 - sb.0).abs() < 1e-9 * sa.0 && (sa.1 - sb.1).abs() < 1e-9 * sa.1.max(1.0));
    }

    #[test]
    fn zero_threshold_deselects_nothing() {
        let mut n = net();
        attach_and_freeze(&mut n).unwrap();
        let mut state = PruneState::new(&n);
        let cfg = PruneConfig { threshold: 0.0, ..PruneConfig::default() };
        assert_eq!(selection_sweep(&mut n, &mut state, &cfg).unwrap().deselected, 0);
        let cfg = PruneConfig { threshold: 0.5, ..PruneConfig::default() };
        assert_eq!(selection_sweep(&mut n, &mut state, &cfg).unwrap().deselected, 0);
    }

    #[test]
    fn sweep_respects_target_and_min_keep() {
        let mut n = net();
        attach_and_freeze(&mut n).unwrap();
        for (_, c) in n.compactors_mut() {
            c.r.data_mut().iter_mut().for_each(|v| *v *= 1e-3);
        }
        let mut state = PruneState::new(&n);
        let cfg = PruneConfig { threshold: 1.0, prune_target: 0.5, min_keep: 2, ..PruneConfig::default() };
        let out = selection_sweep(&mut n, &mut state, &cfg).unwrap();
        assert!(out.deselected > 0 && out.refused_by_target);
        assert!(state.reduction() <= 0.5 + 1e-12, "{}", state.reduction());
        assert!(n.compactors().all(|(_, c)| c.kept_count() >= 2));
        let masked: Vec<_> = n.compactors().flat_map(|(_, c)| c.mask.iter().zip(c.row_norms()).filter(|(k, _)| !**k).map(|(_, v)| v).collect::<Vec<_>>()).collect();
        assert!(masked.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manual_uniform_slices() {
        let mut n = net();
        let before = n.count_parameters(Scope::HyperPath);
        let mut same = n.clone();
        manual_uniform_prune(&mut same, 1.0).unwrap();
        assert_eq!(same, n);
        manual_uniform_prune(&mut n, 0.5).unwrap();
        for id in n.prunable_layers() {
            assert_eq!(n.layer(id).unwrap().spec.out_channels, 4);
        }
        let k = 4;
        let expect = (6 * k * 9 + k) + 2 * (k * k * 25 + k) + (k * k * 25 + k) + (4 * k * k * 9 + 4 * k) + (k * 6 * 9 + 6);
        assert_eq!(n.count_parameters(Scope::HyperPath), expect);
        assert!(expect < before);
        assert!(manual_uniform_prune(&mut net(), 0.0).is_err());
    }

    #[test]
    fn penalty_only_step_shrinks_rows_by_lr_beta() {
        let mut n = net();
        attach_and_freeze(&mut n).unwrap();
        let patches = vec![synthetic_image::<f64>(64, 64, 0)];
        let latents = cache_latents(&n, &patches).unwrap();
        let batch = latent_batch(&latents, &[0]).unwrap();
        let cfg = PruneConfig { beta: 0.3, ..PruneConfig::default() };
        let before: Vec<Vec<f64>> = n.compactors().map(|(_, c)| c.row_norms()).collect();
        let mut opt = Optimizer::sgd(0.01);
        penalized_step_scaled(&mut n, &mut opt, &batch, &cfg, 0, 0.0).unwrap();
        let after: Vec<Vec<f64>> = n.compactors().map(|(_, c)| c.row_norms()).collect();
        for (b, a) in before.iter().zip(&after) {
            for (x, y) in b.iter().zip(a) {
                assert!(((x - y) - 0.003).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_finetune_steps_is_identity() {
        let mut n = net();
        n.freeze_main();
        let latents = cache_latents(&n, &[synthetic_image::<f64>(64, 64, 1)]).unwrap();
        let before = n.clone();
        let cfg = PruneConfig { finetune_steps: 0, ..PruneConfig::default() };
        finetune(&mut n, &latents, &latents, &cfg, None).unwrap();
        assert_eq!(n, before);
    }

    #[test]
    fn finetune_never_ends_worse() {
        let mut n = net();
        n.freeze_main();
        let patches: Vec<_> = (0..4).map(|i| synthetic_image::<f64>(64, 64, i)).collect();
        let latents = cache_latents(&n, &patches).unwrap();
        let cfg = PruneConfig { finetune_steps: 30, eval_interval: 10, batch_size: 2, finetune_lr: 1e-2, ..PruneConfig::default() };
        let out = finetune(&mut n, &latents, &latents, &cfg, None).unwrap();
        assert!(out.best_loss <= out.initial_loss);
        assert_eq!(latent_eval_loss(&n, &latents, cfg.lambda).unwrap(), out.best_loss);
    }
}
