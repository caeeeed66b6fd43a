//! Multi-scale channel attention.
//!
//! A 3×3 conv reduces `C` to `r` channels. Four depthwise branches read
//! adaptive average pools of size 1, 3, 3 and 5 with matching unpadded kernels,
//! so each yields `1×1×r`. The concatenated `4r` vector is expanded back to `C`
//! and passed through a sigmoid to gate the input channels.

use serde::{Deserialize, Serialize};

use super::conv::{conv_macs, Conv2d, ConvBnAct};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use loopseg_core::{Error, Result};

pub const POOLED_SIZES: [usize; 4] = [1, 3, 3, 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MscaConfig {
    pub channels: usize,
    pub alpha: f64,
    /// SiLU after each depthwise branch.
    pub dw_activation: bool,
    /// Normalization and SiLU after the reducing conv.
    pub reduce_norm: bool,
    pub expand_bias: bool,
}

impl Default for MscaConfig {
    fn default() -> Self {
        Self {
            channels: 136,
            alpha: 1.0 / 32.0,
            dw_activation: false,
            reduce_norm: false,
            expand_bias: false,
        }
    }
}

impl MscaConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            ..Self::default()
        }
    }

    pub fn reduced(&self) -> usize {
        ((self.alpha * self.channels as f64).round() as usize).max(1)
    }

    pub fn param_count(&self) -> usize {
        let (c, r) = (self.channels, self.reduced());
        let reduce = 9 * c * r + if self.reduce_norm { 2 * r } else { 0 };
        let dw: usize = POOLED_SIZES.iter().map(|k| k * k * r).sum();
        let expand = 4 * r * c + if self.expand_bias { c } else { 0 };
        reduce + dw + expand
    }
}

#[derive(Clone, Debug)]
enum Reduce {
    Plain(Conv2d),
    Normed(ConvBnAct),
}

#[derive(Clone, Debug)]
pub struct Msca {
    pub cfg: MscaConfig,
    reduce: Reduce,
    branches: Vec<Conv2d>,
    expand: Conv2d,
}

impl Msca {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MscaConfig) -> Result<Self> {
        if cfg.channels == 0 || !(cfg.alpha > 0.0) {
            return Err(Error::Config(format!("{name}: msca needs channels ≥ 1 and alpha > 0")));
        }
        let (c, r) = (cfg.channels, cfg.reduced());
        let reduce = if cfg.reduce_norm {
            Reduce::Normed(ConvBnAct::new(store, &format!("{name}.reduce"), c, r, 3, 1))
        } else {
            Reduce::Plain(Conv2d::new(store, &format!("{name}.reduce"), c, r, 3, 1, 1, 1, false))
        };
        let branches = POOLED_SIZES
            .iter()
            .enumerate()
            .map(|(i, &k)| Conv2d::new(store, &format!("{name}.branch{i}"), r, r, k, 1, 0, r, false))
            .collect();
        let expand = Conv2d::new(store, &format!("{name}.expand"), 4 * r, c, 1, 1, 0, 1, cfg.expand_bias);
        Ok(Self {
            cfg,
            reduce,
            branches,
            expand,
        })
    }

    /// The `[B, C, 1, 1]` attention weights.
    pub fn attention(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::Config(format!(
                "msca expects {} channels, got shape {s:?}",
                self.cfg.channels
            )));
        }
        let max_pool = POOLED_SIZES[3];
        if s[2] < max_pool || s[3] < max_pool {
            return Err(Error::Config(format!("msca needs spatial size ≥ {max_pool}, got {}×{}", s[2], s[3])));
        }
        let z = match &self.reduce {
            Reduce::Plain(c) => c.forward(tape, store, x),
            Reduce::Normed(c) => c.forward(tape, store, x),
        };
        let mut gs = Vec::with_capacity(4);
        for (conv, &p) in self.branches.iter().zip(&POOLED_SIZES) {
            let pooled = ops::adaptive_avg_pool(tape, z, p);
            let g = conv.forward(tape, store, pooled);
            gs.push(if self.cfg.dw_activation { ops::silu(tape, g) } else { g });
        }
        let cat = ops::concat(tape, &gs);
        let e = self.expand.forward(tape, store, cat);
        Ok(ops::sigmoid(tape, e))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.attention(tape, store, x)?;
        Ok(ops::mul_channel(tape, x, h))
    }

    /// Convolution multiply-accumulates at spatial size `h×w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (c, r) = (self.cfg.channels, self.cfg.reduced());
        let reduce = conv_macs(c, r, 3, 1, h, w);
        let dw: u64 = POOLED_SIZES.iter().map(|&k| (k * k * r) as u64).sum();
        reduce + dw + (4 * r * c) as u64
    }
}
