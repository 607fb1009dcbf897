//! End-to-end steps shared by the command line tool and the tests: dataset
//! loading, pretraining, structured pruning and the manual baseline.

use std::path::Path;

use crate::config::Config;
use crate::data::{load_images, sample_patches, synthetic_image, write_ppm, Image};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::prune::{finetune, manual_uniform_prune, run_erhp, FinetuneOutcome, PruneState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{cache_latents, pretrain, Latent, TrainLog};

/// Patches held out of training to pick the best finetuning checkpoint.
pub const MONITOR_PATCHES: usize = 32;

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub train: Vec<Image<T>>,
    pub val: Vec<Image<T>>,
}

/// Loads `dir/train` and `dir/val` when both exist; otherwise every eighth
/// image of `dir` (in name order) goes to validation.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Dataset<T>> {
    let (train_dir, val_dir) = (dir.join("train"), dir.join("val"));
    if train_dir.is_dir() && val_dir.is_dir() {
        return Ok(Dataset { train: load_images(&train_dir)?, val: load_images(&val_dir)? });
    }
    let all = load_images::<T>(dir)?;
    if all.len() < 2 {
        return Err(Error::invalid("load_dataset", format!("{} needs at least two images", dir.display())));
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, im) in all.into_iter().enumerate() {
        if i % 8 == 7 {
            val.push(im);
        } else {
            train.push(im);
        }
    }
    if val.is_empty() {
        val.push(train.pop().expect("at least two images"));
    }
    Ok(Dataset { train, val })
}

/// Writes a synthetic dataset laid out for [`load_dataset`].
pub fn write_synthetic_split(dir: &Path, train: usize, val: usize, train_size: usize, val_size: usize, seed: u64) -> Result<()> {
    for (sub, count, size, salt) in [("train", train, train_size, 0u64), ("val", val, val_size, 1)] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d)?;
        for i in 0..count {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(salt << 32).wrapping_add(i as u64);
            write_ppm(&d.join(format!("img_{i:04}.ppm")), &synthetic_image::<f64>(size, size, s))?;
        }
    }
    Ok(())
}

/// Training and monitor patches drawn from the training images.
pub fn training_patches<T: Scalar>(ds: &Dataset<T>, cfg: &Config) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let train = sample_patches(&ds.train, cfg.train.patch, cfg.train.patches, cfg.seed)?;
    let monitor = sample_patches(&ds.train, cfg.train.patch, MONITOR_PATCHES, cfg.seed ^ 0x00AB_CDEF)?;
    Ok((train, monitor))
}

/// Builds the configured network and trains it end to end.
pub fn pretrain_model<T: Scalar>(cfg: &Config, patches: &[Tensor<T>], log: impl FnMut(TrainLog)) -> Result<(Network<T>, Vec<TrainLog>)> {
    let mut net = cfg.build::<T>()?;
    let history = pretrain(&mut net, patches, &cfg.train, cfg.lambda, cfg.seed, log)?;
    Ok((net, history))
}

/// Latents of the training and monitor patches under the (frozen) main path.
pub fn latents<T: Scalar>(net: &Network<T>, patches: &[Tensor<T>], monitor: &[Tensor<T>]) -> Result<(Vec<Latent<T>>, Vec<Latent<T>>)> {
    Ok((cache_latents(net, patches)?, cache_latents(net, monitor)?))
}

/// Structured pruning of a pretrained network in place.
pub fn prune_model<T: Scalar>(
    net: &mut Network<T>,
    cfg: &Config,
    patches: &[Tensor<T>],
    monitor: &[Tensor<T>],
) -> Result<(PruneState, FinetuneOutcome)> {
    let (train, mon) = latents(net, patches, monitor)?;
    run_erhp(net, &train, &mon, &cfg.prune_config())
}

/// Manual baseline: uniform channel slicing followed by the same finetuning
/// as the structured pruning.
pub fn manual_prune_model<T: Scalar>(
    net: &mut Network<T>,
    cfg: &Config,
    ratio: f64,
    patches: &[Tensor<T>],
    monitor: &[Tensor<T>],
) -> Result<FinetuneOutcome> {
    let (train, mon) = latents(net, patches, monitor)?;
    manual_uniform_prune(net, ratio)?;
    net.freeze_main();
    finetune(net, &train, &mon, &cfg.prune_config(), None)
}

/// Finetunes whatever is unfrozen after freezing the main path.
pub fn finetune_model<T: Scalar>(
    net: &mut Network<T>,
    cfg: &Config,
    patches: &[Tensor<T>],
    monitor: &[Tensor<T>],
) -> Result<FinetuneOutcome> {
    let (train, mon) = latents(net, patches, monitor)?;
    net.freeze_main();
    finetune(net, &train, &mon, &cfg.prune_config(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Scope;

    #[test]
    fn split_layouts() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_split(dir.path(), 3, 2, 16, 16, 1).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (3, 2));

        let flat = tempfile::tempdir().unwrap();
        crate::data::write_synthetic_dataset(flat.path(), 9, 16, 2).unwrap();
        let ds = load_dataset::<f64>(flat.path()).unwrap();
        assert_eq!((ds.train.len(), ds.val.len()), (8, 1));
        assert_eq!(ds.val[0].name, "img_0007");
    }

    #[test]
    fn tiny_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic_split(dir.path(), 2, 1, 64, 64, 3).unwrap();
        let ds = load_dataset::<f64>(dir.path()).unwrap();
        let cfg = Config::from_json(r#"{"N": 4, "M": 6, "beta": 1e-2, "prune_target": 0.3,
            "train": {"steps": 3, "batch_size": 2, "patch": 64, "patches": 4},
            "prune": {"max_steps": 20, "selection_interval": 5, "threshold": 1.0, "finetune_steps": 4, "eval_interval": 2, "lr": 0.05}}"#)
        .unwrap();
        cfg.validate().unwrap();
        let (train, monitor) = training_patches(&ds, &cfg).unwrap();
        let (mut net, log) = pretrain_model::<f64>(&cfg, &train, |_| {}).unwrap();
        assert!(!log.is_empty());
        let before = net.count_parameters(Scope::HyperPath);
        let (state, out) = prune_model(&mut net, &cfg, &train, &monitor[..2]).unwrap();
        assert!(out.best_loss <= out.initial_loss);
        assert_eq!(state.hyper_params, net.count_parameters(Scope::HyperPath));
        assert!(net.count_parameters(Scope::HyperPath) < before);
        assert!(net.compactors().next().is_none());
    }
}
