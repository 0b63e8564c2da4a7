//! Four-tap convolutional trunk.
//!
//! ```text
//! image ─ stem conv (stride 2) ─ relu ─ avgpool(stride_at_tap / 4)
//!       ─ conv a1 ─ relu ─┬─ avgpool 2 ─────────────── f1
//!         conv a2 ─ relu ─┴─ avgpool 2 ─┬─────────────── f2
//!                                       conv b1 ─ relu ─ f3
//!                                       conv b2 ─ relu ─ f4
//! ```
//!
//! Taps 1–2 are pooled after their ReLU. All four taps come out as
//! `[N, channels, S, S]` with `S = input_size / stride_at_tap`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: usize,
    pub stem_channels: usize,
    pub input_size: usize,
    pub stride_at_tap: usize,
    pub init: TrunkInit,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            channels: 32,
            stem_channels: 16,
            input_size: 96,
            stride_at_tap: 16,
            init: TrunkInit::default(),
        }
    }
}

/// Weight initialization for the trunk convolutions. Biases start at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum TrunkInit {
    /// Zero-mean Gaussian with a fixed standard deviation.
    Gaussian { std: f64 },
    /// Zero-mean Gaussian with `std = sqrt(2 / fan_in)`.
    #[default]
    He,
}


impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("backbone channel counts must be >= 1".into()));
        }
        if self.stride_at_tap < 4 || !self.stride_at_tap.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "backbone stride_at_tap must be a positive multiple of 4, got {}",
                self.stride_at_tap
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride_at_tap) {
            return Err(Error::Config(format!(
                "backbone input_size {} must be divisible by stride_at_tap = {}",
                self.input_size, self.stride_at_tap
            )));
        }
        Ok(())
    }

    /// Side length of every tap.
    pub fn tap_size(&self) -> usize {
        self.input_size / self.stride_at_tap
    }

    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        conv(3, self.stem_channels)
            + conv(self.stem_channels, self.channels)
            + 3 * conv(self.channels, self.channels)
    }
}

/// The four aligned taps `f_1..f_4`.
#[derive(Debug, Clone, Copy)]
pub struct TapSet {
    pub f: [Var; 4],
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        init: TrunkInit,
        rng: &mut Rng,
    ) -> Self {
        let std = match init {
            TrunkInit::Gaussian { std } => std,
            TrunkInit::He => (2.0 / (cin * 9) as f64).sqrt(),
        };
        Conv {
            w: store.gaussian(format!("{name}.weight"), [cout, cin, 3, 3], std, rng),
            b: store.zeros(format!("{name}.bias"), [cout]),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var, stride: usize) -> Result<Var> {
        let y = tape.conv2d(x, p.get(self.w), p.get(self.b), stride, 1)?;
        Ok(tape.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: Conv,
    a1: Conv,
    a2: Conv,
    b1: Conv,
    b2: Conv,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (s, c, init) = (cfg.stem_channels, cfg.channels, cfg.init);
        Ok(Backbone {
            cfg: cfg.clone(),
            stem: Conv::new(store, "backbone.stem", 3, s, init, rng),
            a1: Conv::new(store, "backbone.a1", s, c, init, rng),
            a2: Conv::new(store, "backbone.a2", c, c, init, rng),
            b1: Conv::new(store, "backbone.b1", c, c, init, rng),
            b2: Conv::new(store, "backbone.b2", c, c, init, rng),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<TapSet> {
        let shape = tape.shape(image).to_vec();
        let n = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != n || shape[3] != n {
            return Err(Error::Shape(format!(
                "backbone expects [N, 3, {n}, {n}] input, got {shape:?}"
            )));
        }
        let x = self.stem.apply(tape, p, image, 2)?;
        let x = tape.avgpool2d(x, self.cfg.stride_at_tap / 4)?;
        let a1 = self.a1.apply(tape, p, x, 1)?;
        let a2 = self.a2.apply(tape, p, a1, 1)?;
        let f1 = tape.avgpool2d(a1, 2)?;
        let f2 = tape.avgpool2d(a2, 2)?;
        let f3 = self.b1.apply(tape, p, f2, 1)?;
        let f4 = self.b2.apply(tape, p, f3, 1)?;
        Ok(TapSet {
            f: [f1, f2, f3, f4],
        })
    }
}

/// Adds the batch axis to a `[3, H, W]` image.
pub fn image_batch(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    image.clone().reshape([1, s[0], s[1], s[2]])
}
