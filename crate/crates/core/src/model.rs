//! Network assembly: shared backbone over three input scales, per-level scale
//! fusion, top-down decoding and iterative refinement.

use std::path::Path;

use crate::autograd::Var;
use crate::checkpoint::{read_container, write_container, Container, EntryKind};
use crate::config::TrainConfig;
use crate::encoder::{load_pretrained, Encoder, FeaturePyramid, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::frm::{make_scale_set, Frm};
use crate::hcdd::{plan_for, Hcdd};
use crate::nn::{Ctx, ParamStore};
use crate::ppg::Ppg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outputs of one forward pass.
pub struct ForwardOutput<T: Scalar> {
    /// Final logits at input resolution.
    pub logits: Var<T>,
    /// Decoder logits at stride 2.
    pub coarse_logits: Var<T>,
    /// Decoder feature at stride 2.
    pub feature: Var<T>,
    /// Refinement maps at stride 2, starting with the coarse logits.
    pub trace: Vec<Var<T>>,
    /// Per-level scale attention (empty without fusion).
    pub attention: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct MgNet {
    pub encoder: Encoder,
    pub frm: Frm,
    pub hcdd: Hcdd,
    pub ppg: Option<Ppg>,
    pub scales: Vec<f64>,
    pub t_refine: usize,
}

impl MgNet {
    /// Registers all parameters in a fresh store seeded by `cfg.seed`. A
    /// configured backbone weight file is loaded afterwards.
    pub fn build<T: Scalar>(cfg: &TrainConfig) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let spec = cfg.backbone();
        let mut store = ParamStore::new();
        let net = {
            let mut root = store.root(cfg.seed);
            let encoder = Encoder::build(&mut root.sub(ENCODER_PREFIX), &spec)?;
            let frm = Frm::new(&mut root.sub("frm"), &spec.level_channels, cfg.frm);
            let hcdd = Hcdd::new(&mut root.sub("hcdd"), &spec.level_channels, &plan_for(&spec.level_channels), cfg.wiring)?;
            let ppg = cfg.ppg.then(|| Ppg::new(&mut root.sub("ppg")));
            Self { encoder, frm, hcdd, ppg, scales: cfg.scales.clone(), t_refine: cfg.t_refine }
        };
        if let Some(path) = &spec.weights_source {
            let manifest = load_pretrained(&net.encoder, &mut store, path)?;
            log::info!("loaded {} backbone tensors from {}", manifest.loaded.len(), path.display());
        }
        Ok((net, store))
    }

    fn pyramid<T: Scalar>(&self, ctx: &Ctx<'_, T>, image: &Var<T>, scale: f64) -> Result<FeaturePyramid<T>> {
        self.encoder.extract_features(ctx, image, scale)
    }

    /// Runs the network on a normalized `[N, 3, H, W]` batch.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, image: &Var<T>) -> Result<ForwardOutput<T>> {
        let (_, _, h, w) = image.dims4();
        let fused = if self.frm.multi_scale() {
            let set = make_scale_set(image, &self.scales)?;
            let p07 = self.pyramid(ctx, &set[0], self.scales[0])?;
            let p10 = self.pyramid(ctx, &set[1], self.scales[1])?;
            let p12 = self.pyramid(ctx, &set[2], self.scales[2])?;
            self.frm.forward(ctx, &p07, &p10, &p12)?
        } else {
            let p10 = self.pyramid(ctx, image, 1.0)?;
            self.frm.forward_single(ctx, &p10)
        };
        let decoded = self.hcdd.decode(ctx, &fused.fused)?;
        let (refined, trace) = match &self.ppg {
            Some(ppg) => {
                let r = ppg.refine(ctx, &decoded.x, &decoded.coarse_logits, self.t_refine)?;
                (r.logits, r.trace)
            }
            None => (decoded.coarse_logits.clone(), vec![decoded.coarse_logits.clone()]),
        };
        Ok(ForwardOutput {
            logits: refined.resize_bilinear(h, w),
            coarse_logits: decoded.coarse_logits,
            feature: decoded.x,
            trace,
            attention: fused.attention,
        })
    }
}

/// Writes parameters, buffers, optimizer state, step and configuration.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    cfg: &TrainConfig,
    step: u64,
    optimizer: &[(String, Tensor<T>)],
) -> Result<()> {
    let mut c = Container::new(step, serde_json::to_value(cfg)?);
    for (name, v) in store.params() {
        c.push(name, EntryKind::Param, v.value().clone());
    }
    for (name, b) in store.buffers() {
        c.push(name, EntryKind::Buffer, b.clone());
    }
    for (name, t) in optimizer {
        c.push(name, EntryKind::Optimizer, t.clone());
    }
    write_container(path, &c)
}

/// A network restored from a checkpoint.
pub struct Loaded<T: Scalar> {
    pub net: MgNet,
    pub store: ParamStore<T>,
    pub cfg: TrainConfig,
    pub step: u64,
    pub optimizer: Vec<(String, Tensor<T>)>,
}

/// Rebuilds the network from the stored configuration and restores every
/// tensor. Missing or extra tensors are errors.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Loaded<T>> {
    let c = read_container::<T>(path)?;
    let mut cfg: TrainConfig = serde_json::from_value(c.config).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
    // Weights come from the checkpoint itself.
    cfg.weights_source = None;
    let (net, mut store) = MgNet::build::<T>(&cfg)?;
    let expected = store.len() + store.buffer_names().count();
    if c.tensors.len() != expected {
        return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, network has {expected}", c.tensors.len())));
    }
    for (name, tensor) in c.tensors {
        store.set(&name, tensor)?;
    }
    Ok(Loaded { net, store, cfg, step: c.step, optimizer: c.optimizer })
}
