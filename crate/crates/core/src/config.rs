//! Training configuration: a flat TOML or JSON document. Unknown keys are
//! rejected; `MGNET_SEED` overrides `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{BackboneSpec, Profile, DEFAULT_TINY_CHANNELS};
use crate::error::{Error, Result};
use crate::frm::{DEFAULT_SCALES, SIZE_QUANTUM};
use crate::hcdd::PairWiring;
use crate::ppg::DEFAULT_T_REFINE;

pub const SEED_ENV: &str = "MGNET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub input_size: usize,
    pub scales: Vec<f64>,
    pub t_refine: usize,
    /// Multi-scale fusion.
    pub frm: bool,
    /// Iterative refinement.
    pub ppg: bool,
    /// Uncertainty term in the loss.
    pub ual: bool,
    pub seed: u64,
    pub profile: Profile,
    pub tiny_channels: Vec<usize>,
    pub wiring: PairWiring,
    pub augment: bool,
    pub freeze_bn: bool,
    /// Also supervise every intermediate refinement map.
    pub supervise_trace: bool,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Stop after this many optimizer steps; the schedules span this horizon.
    pub max_steps: Option<u64>,
    /// Pretrained backbone container (full profile only).
    pub weights_source: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.08,
            momentum: 0.9,
            weight_decay: 0.0005,
            epochs: 32,
            batch_size: 12,
            input_size: 384,
            scales: DEFAULT_SCALES.to_vec(),
            t_refine: DEFAULT_T_REFINE,
            frm: true,
            ppg: true,
            ual: true,
            seed: 0,
            profile: Profile::Full,
            tiny_channels: DEFAULT_TINY_CHANNELS.to_vec(),
            wiring: PairWiring::Carry,
            augment: true,
            freeze_bn: false,
            supervise_trace: false,
            grad_clip: None,
            max_steps: None,
            weights_source: None,
        }
    }
}

impl TrainConfig {
    /// Small-network defaults for CPU runs.
    pub fn tiny() -> Self {
        Self { profile: Profile::Tiny, input_size: 96, batch_size: 4, ..Self::default() }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a `.json` or `.toml` file (anything else is parsed as TOML),
    /// applies the seed override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json { Self::from_json_str(&text)? } else { Self::from_toml_str(&text)? };
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr0 must be positive, momentum and weight_decay nonnegative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.input_size < 64 || self.input_size % SIZE_QUANTUM != 0 {
            return bad(format!("input_size {} must be a multiple of {SIZE_QUANTUM} and at least 64", self.input_size));
        }
        if self.scales.len() != 3 || self.scales[1] != 1.0 || !(self.scales[0] < 1.0 && self.scales[2] > 1.0) {
            return bad(format!("scales must be [low < 1, 1.0, high > 1], got {:?}", self.scales));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) || self.max_steps == Some(0) {
            return bad("grad_clip and max_steps must be positive when set".into());
        }
        self.backbone().validate()
    }

    pub fn backbone(&self) -> BackboneSpec {
        let mut spec = match self.profile {
            Profile::Full => BackboneSpec::full(),
            Profile::Tiny => BackboneSpec::tiny(&self.tiny_channels),
        };
        spec.weights_source = self.weights_source.clone();
        spec
    }

    /// Ablation label in the B/H/F/P/U notation.
    pub fn label(&self) -> String {
        let mut s = String::from("B+H");
        for (on, tag) in [(self.frm, "+F"), (self.ppg, "+P"), (self.ual, "+U")] {
            if on {
                s.push_str(tag);
            }
        }
        s
    }
}
