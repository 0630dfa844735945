//! SGD training loop, evaluation and inference.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{no_grad, Var};
use crate::config::TrainConfig;
use crate::data::{augment, epoch_order, image_to_tensor, make_batch, normalize, resize_image, write_gray, Sample};
use crate::error::{Error, Result};
use crate::loss::{bce_with_logits, total_loss_logits, LossConfig};
use crate::metrics::{ImageMetrics, MetricReport, DEFAULT_THRESHOLD};
use crate::model::{save_checkpoint, MgNet};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::ops::resize_bilinear;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Linear warmup from 0 to `lr0` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: u64, warmup: u64, total: u64, lr0: f64) -> f64 {
    if step < warmup {
        return lr0 * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    (lr0 * total.saturating_sub(step) as f64 / span as f64).clamp(0.0, lr0)
}

/// SGD with momentum and coupled weight decay: `b = m b + (g + wd p)`, `p -= lr b`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, buffers: HashMap::new() }
    }

    /// Updates every parameter that holds a gradient and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step_scaled(store, lr, 1.0);
    }

    /// As [`Sgd::step`] with every gradient multiplied by `grad_scale` first.
    pub fn step_scaled(&mut self, store: &mut ParamStore<T>, lr: f64, grad_scale: f64) {
        let (m, wd, lr, gs): (T, T, T, T) = (cast(self.momentum), cast(self.weight_decay), cast(lr), cast(grad_scale));
        for (name, var) in store.params_mut() {
            let Some(grad) = var.take_grad() else { continue };
            let buf = self.buffers.entry(name.to_string()).or_insert_with(|| Tensor::zeros(grad.shape()));
            let value = var.leaf_value_mut();
            for ((b, &g), p) in buf.data_mut().iter_mut().zip(grad.data()).zip(value.data_mut()) {
                *b = m * *b + gs * g + wd * *p;
                *p -= lr * *b;
            }
        }
    }

    /// Momentum buffers sorted by parameter name.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut v: Vec<_> = self.buffers.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn load_state(&mut self, state: Vec<(String, Tensor<T>)>) {
        self.buffers = state.into_iter().collect();
    }
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .params()
        .filter_map(|(_, v)| v.grad().map(|g| g.data().iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>()))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub bce: f64,
    pub ual: f64,
    pub lambda: f64,
    pub lr: f64,
}

pub struct TrainOutcome<T: Scalar> {
    pub net: MgNet,
    pub store: ParamStore<T>,
    pub optimizer: Sgd<T>,
    pub history: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// Steps per epoch and total steps for a dataset of `n` samples;
/// `max_steps`, when set, replaces `epochs · steps_per_epoch`.
pub fn schedule(cfg: &TrainConfig, n: usize) -> (u64, u64) {
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    (per_epoch, cfg.max_steps.unwrap_or(cfg.epochs * per_epoch))
}

/// Trains from scratch. Checkpoints go to `out/epoch_NNN.ckpt` and
/// `out/last.ckpt` when `out` is given.
pub fn train<T: Scalar>(cfg: &TrainConfig, samples: &[Sample], out: Option<&Path>) -> Result<TrainOutcome<T>> {
    let (net, store) = MgNet::build::<T>(cfg)?;
    train_from(cfg, samples, out, net, store)
}

pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    samples: &[Sample],
    out: Option<&Path>,
    net: MgNet,
    mut store: ParamStore<T>,
) -> Result<TrainOutcome<T>> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let (per_epoch, total) = schedule(cfg, samples.len());
    log::info!("{}: {} parameters, {} steps ({} per epoch)", cfg.label(), store.param_count(), total, per_epoch);
    let loss_cfg = LossConfig { use_ual: cfg.ual, ..LossConfig::new(total) };
    let mode = Mode { training: true, freeze_bn: cfg.freeze_bn };
    let mut optimizer = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(total as usize);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < total {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| if cfg.augment { augment(&samples[i], &mut aug_rng) } else { samples[i].clone() })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (images, masks) = make_batch::<T>(&refs);
            let lr = lr_at(step, per_epoch, total, cfg.lr0);
            let log_entry = {
                let ctx = Ctx::new(&store, mode);
                let fwd = net.forward(&ctx, &Var::constant(images))?;
                let parts = total_loss_logits(&fwd.logits, &masks, step, &loss_cfg)?;
                let mut loss = parts.total;
                if cfg.supervise_trace {
                    let (_, _, h, w) = fwd.logits.dims4();
                    for m in &fwd.trace[..fwd.trace.len() - 1] {
                        loss = loss.add(&bce_with_logits(&m.resize_bilinear(h, w), &masks)?);
                    }
                }
                let value = loss.value().item().to_f64().unwrap();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { step: step as usize });
                }
                loss.backward();
                StepLog {
                    step,
                    epoch,
                    loss: value,
                    bce: parts.bce.to_f64().unwrap(),
                    ual: parts.ual.to_f64().unwrap(),
                    lambda: parts.lambda,
                    lr,
                }
            };
            let grad_scale = match cfg.grad_clip {
                Some(c) => (c / grad_norm(&store)).min(1.0),
                None => 1.0,
            };
            optimizer.step_scaled(&mut store, lr, grad_scale);
            log::info!(
                "step {} epoch {} loss {:.5} bce {:.5} ual {:.5} lambda {:.4} lr {:.6}",
                log_entry.step,
                log_entry.epoch,
                log_entry.loss,
                log_entry.bce,
                log_entry.ual,
                log_entry.lambda,
                log_entry.lr
            );
            history.push(log_entry);
            step += 1;
        }
        epoch += 1;
        if let Some(dir) = out {
            let path = dir.join(format!("epoch_{epoch:03}.ckpt"));
            save_checkpoint(&path, &store, cfg, step, &optimizer.state())?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out {
        let path = dir.join("last.ckpt");
        save_checkpoint(&path, &store, cfg, step, &optimizer.state())?;
        checkpoints.push(path);
    }
    Ok(TrainOutcome { net, store, optimizer, history, checkpoints })
}

/// Probability maps for a batch of samples in eval mode, one `Vec` per sample.
pub fn predict<T: Scalar>(net: &MgNet, store: &ParamStore<T>, samples: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    no_grad(|| {
        let (images, _) = make_batch::<T>(samples);
        let ctx = Ctx::new(store, Mode::EVAL);
        let fwd = net.forward(&ctx, &Var::constant(images))?;
        let probs = fwd.logits.sigmoid();
        let n = samples.len();
        let per = probs.value().numel() / n;
        Ok(probs.value().to_f64_vec().chunks(per).map(<[f64]>::to_vec).collect())
    })
}

/// Evaluates in eval mode, `batch_size` images at a time.
pub fn evaluate<T: Scalar>(net: &MgNet, store: &ParamStore<T>, samples: &[Sample], batch_size: usize) -> Result<MetricReport> {
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let probs = predict(net, store, &refs)?;
        for (s, p) in chunk.iter().zip(probs) {
            per_image.push(ImageMetrics::compute(&s.id, &p, &s.mask_bools(), DEFAULT_THRESHOLD)?);
        }
    }
    Ok(MetricReport::from_images(per_image))
}

/// Prediction for one image at its original resolution.
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub prob: Vec<f32>,
    /// Probability of every refinement map, coarse first.
    pub trace: Vec<Vec<f32>>,
}

fn to_original<T: Scalar>(logits: &Var<T>, h: usize, w: usize) -> Vec<f32> {
    let probs = logits.sigmoid();
    resize_bilinear(probs.value(), h, w).data().iter().map(|v| v.to_f32().unwrap()).collect()
}

/// Runs one `[3, H, W]` image (values in `[0, 1]`) through the network at
/// `input_size` and maps the result back to `H × W`.
pub fn predict_image<T: Scalar>(net: &MgNet, store: &ParamStore<T>, image: &Tensor<f32>, input_size: usize) -> Result<Prediction> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    no_grad(|| {
        let x = normalize::<T>(&resize_image(image, input_size)).reshape(&[1, 3, input_size, input_size]);
        let ctx = Ctx::new(store, Mode::EVAL);
        let fwd = net.forward(&ctx, &Var::constant(x))?;
        Ok(Prediction {
            height: h,
            width: w,
            prob: to_original(&fwd.logits, h, w),
            trace: fwd.trace.iter().map(|m| to_original(m, h, w)).collect(),
        })
    })
}

/// Writes `<stem>_prob.png`, `<stem>_mask.png` and optionally
/// `<stem>_trace_<t>.png` for every refinement map. Returns the files written.
pub fn infer<T: Scalar>(
    net: &MgNet,
    store: &ParamStore<T>,
    input_size: usize,
    images: &[PathBuf],
    out: &Path,
    dump_trace: bool,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for path in images {
        let img = image::open(path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
        let pred = predict_image(net, store, &image_to_tensor(&img), input_size)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let (h, w) = (pred.height, pred.width);
        let prob_path = out.join(format!("{stem}_prob.png"));
        write_gray(&prob_path, &pred.prob, h, w)?;
        let binary: Vec<f32> = pred.prob.iter().map(|&p| if p as f64 >= DEFAULT_THRESHOLD { 1.0 } else { 0.0 }).collect();
        let mask_path = out.join(format!("{stem}_mask.png"));
        write_gray(&mask_path, &binary, h, w)?;
        written.extend([prob_path, mask_path]);
        if dump_trace {
            for (t, m) in pred.trace.iter().enumerate() {
                let p = out.join(format!("{stem}_trace_{t}.png"));
                write_gray(&p, m, h, w)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
