//! SGD with momentum under the poly schedule, the deep-supervision training
//! loop, multi-scale inference and evaluation metrics.

mod infer;
mod metrics;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use infer::{argmax_labels, parse_scales, predict_multiscale, InferenceOptions, Prediction};
pub use metrics::{compute_metrics, evaluate_pairs, trimap_mask, trimap_miou, ConfusionMatrix, MetricsReport, TrimapPoint};
pub use optim::{poly_lr, sgd_step, OptimizerState, SgdStep};

use crate::bands::band_partition;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{random_crop_flip, sample_rng, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::Mode;
use crate::loss::{deep_supervision_loss, LossConfig};
use crate::network::Network;
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "iter,lr,loss,eval_miou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many iterations (0: only at the end).
    pub checkpoint_interval: usize,
    /// Evaluate mIoU on the evaluation set every this many iterations (0: never).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.00025,
            power: 0.9,
            max_iter: 300,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            crop: 64,
            seed: 0,
            checkpoint_interval: 0,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |n: &str| format!("train.{}", n);
        let positive = |n: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(f(n), "must be positive"))
            }
        };
        positive("base_lr", self.base_lr)?;
        positive("power", self.power)?;
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::validation(f("momentum"), "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation(f("weight_decay"), "must be >= 0"));
        }
        for (n, v) in [("max_iter", self.max_iter), ("batch_size", self.batch_size), ("crop", self.crop)] {
            if v == 0 {
                return Err(Error::validation(f(n), "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        poly_lr(iter, self.base_lr, self.max_iter, self.power)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let eval = r.eval_miou.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.iter, r.lr, r.loss, eval);
    }
    s
}

/// Optional artifacts and evaluation data for [`train`].
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainHooks<'a> {
    /// Directory receiving `train_log.csv` and checkpoints.
    pub out_dir: Option<&'a Path>,
    pub eval_set: Option<&'a Dataset>,
}

// Stream tags keep the batch-order and augmentation generators independent.
const ORDER_STREAM: u64 = 0x6f72_6465_7200_0000;
const AUGMENT_STREAM: u64 = 0x6175_676d_0000_0000;

/// Index of the samples in iteration `iter`'s batch: epoch-wise shuffles of the dataset.
pub fn batch_indices(n: usize, batch: usize, iter: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for k in 0..batch {
        let pos = iter * batch + k;
        if pos / n != epoch {
            epoch = pos / n;
            perm = (0..n).collect();
            perm.shuffle(&mut sample_rng(seed ^ ORDER_STREAM, epoch as u64));
        }
        out.push(perm[pos % n]);
    }
    out
}

/// Single-scale mIoU of `net` over `data`.
pub fn evaluate_miou(net: &Network, data: &Dataset) -> Result<f64> {
    let opts = InferenceOptions::single_scale(data.channel_means.clone());
    let pairs = data
        .samples
        .iter()
        .map(|s| Ok((predict_multiscale(net, &s.image, &opts)?.labels, s.labels.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_pairs(&pairs, data.class_count, data.ignore, &[])?.mean_iou)
}

/// One forward/backward/update transaction; returns the loss before the update.
pub fn train_step(
    net: &mut Network,
    state: &mut OptimizerState,
    image: &Tensor,
    labels: &[crate::raster::LabelMap],
    loss_cfg: &LossConfig,
    ignore: u8,
    step: SgdStep,
) -> Result<f64> {
    let bands = labels
        .iter()
        .map(|l| band_partition(l, &loss_cfg.kernels, ignore))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let x = g.try_input(image.clone())?;
    let out = net.forward(&mut g, x, Mode::Train)?;
    let stages = if net.spec.deep_supervision { out.stage_logits.clone() } else { vec![out.logits()] };
    let (loss, _) = deep_supervision_loss(&mut g, &stages, labels, &bands, loss_cfg, ignore)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {}", value)));
    }
    g.backward(loss)?;
    net.params.zero_grads();
    g.accumulate_param_grads(&mut net.params)?;
    net.commit_stats(&g);
    sgd_step(&mut net.params, state, step)?;
    Ok(value)
}

/// Trains `net` in place. Deterministic given the network, data and config.
pub fn train(net: &mut Network, data: &Dataset, cfg: &TrainConfig, loss_cfg: &LossConfig, hooks: TrainHooks) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("data", "training set is empty"));
    }
    if data.class_count != net.spec.class_count || loss_cfg.class_count != net.spec.class_count {
        return Err(Error::validation(
            "network.class_count",
            format!("network has {} classes, data {}, loss {}", net.spec.class_count, data.class_count, loss_cfg.class_count),
        ));
    }
    if cfg.crop % net.spec.required_multiple() != 0 {
        return Err(Error::validation("train.crop", format!("must be a multiple of {}", net.spec.required_multiple())));
    }
    if let Some(dir) = hooks.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = OptimizerState::new(&net.params);
    let mut log = Vec::with_capacity(cfg.max_iter);
    let meta = |iteration| CheckpointMeta {
        iteration,
        channel_means: data.channel_means.clone(),
        ignore: data.ignore,
    };
    for iter in 0..cfg.max_iter {
        let lr = cfg.lr_at(iter);
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for (k, idx) in batch_indices(data.len(), cfg.batch_size, iter, cfg.seed).into_iter().enumerate() {
            let mut rng = sample_rng(cfg.seed ^ AUGMENT_STREAM, (iter * cfg.batch_size + k) as u64);
            let (s, _) = random_crop_flip(&data.samples[idx], cfg.crop, &data.channel_means, data.ignore, &mut rng)?;
            images.push(s.image);
            labels.push(s.labels);
        }
        let batch = Tensor::stack(&images)?;
        let step = SgdStep {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let loss = match train_step(net, &mut state, &batch, &labels, loss_cfg, data.ignore, step) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iter, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        let done = iter + 1;
        let eval_miou = match hooks.eval_set {
            Some(eval) if cfg.eval_interval > 0 && (done % cfg.eval_interval == 0 || done == cfg.max_iter) => Some(evaluate_miou(net, eval)?),
            _ => None,
        };
        log.push(LogRow { iter, lr, loss, eval_miou });
        if let Some(dir) = hooks.out_dir {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.max_iter {
                save_checkpoint(net, &meta(done), dir.join(format!("checkpoint_{:06}.fdckpt", done)))?;
            }
        }
    }
    let mut final_checkpoint = None;
    if let Some(dir) = hooks.out_dir {
        let path = dir.join("train_log.csv");
        fs::write(&path, log_csv(&log)).map_err(|e| Error::io(&path, e))?;
        let ckpt = dir.join("checkpoint.fdckpt");
        save_checkpoint(net, &meta(cfg.max_iter), &ckpt)?;
        final_checkpoint = Some(ckpt);
    }
    Ok(TrainOutcome { log, final_checkpoint })
}
