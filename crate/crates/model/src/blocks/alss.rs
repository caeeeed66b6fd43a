//! Channel split, bottleneck and shuffle block.
//!
//! The input is split into a cheap part and a main part. The cheap part passes
//! through (a strided depthwise conv when downsampling, then a 1×1 conv when the
//! width changes). The main part runs 1×1 reduce, 3×3, 1×1 expand. Outputs are
//! concatenated and channel-shuffled.

use serde::{Deserialize, Serialize};

use super::conv::{conv_bn_act_params, ConvBnAct};
use crate::ops;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use loopseg_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlssConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Share of input channels routed through the bottleneck.
    #[serde(default = "default_split")]
    pub split: f64,
    pub stride: usize,
    /// Bottleneck width.
    pub hidden: usize,
    #[serde(default = "default_groups")]
    pub shuffle_groups: usize,
}

fn default_split() -> f64 {
    0.5
}

fn default_groups() -> usize {
    2
}

/// Channel bookkeeping derived from an [`AlssConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlssWidths {
    pub main_in: usize,
    pub cheap_in: usize,
    pub main_out: usize,
    pub cheap_out: usize,
}

impl AlssConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, hidden: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            split: default_split(),
            stride,
            hidden,
            shuffle_groups: default_groups(),
        }
    }

    pub fn widths(&self) -> Result<AlssWidths> {
        let bad = |m: String| Err(Error::Config(format!("alss {}→{}: {m}", self.in_channels, self.out_channels)));
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split {} outside (0, 1)", self.split));
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("stride {} not in {{1, 2}}", self.stride));
        }
        if self.hidden == 0 {
            return bad("hidden width 0".into());
        }
        let main_in = (self.split * self.in_channels as f64).round() as usize;
        if main_in == 0 || main_in >= self.in_channels {
            return bad(format!("split leaves an empty branch ({main_in} of {})", self.in_channels));
        }
        let cheap_out = self.out_channels / 2;
        let main_out = self.out_channels - cheap_out;
        if cheap_out == 0 {
            return bad("output too narrow to split".into());
        }
        if self.shuffle_groups == 0 || self.out_channels % self.shuffle_groups != 0 {
            return bad(format!("{} channels not divisible by {} groups", self.out_channels, self.shuffle_groups));
        }
        Ok(AlssWidths {
            main_in,
            cheap_in: self.in_channels - main_in,
            main_out,
            cheap_out,
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        let w = self.widths()?;
        let h = self.hidden;
        let mut n = conv_bn_act_params(w.main_in, h, 1) + conv_bn_act_params(h, h, 3) + conv_bn_act_params(h, w.main_out, 1);
        if self.stride == 2 {
            n += 9 * w.cheap_in + 2 * w.cheap_in;
        }
        if w.cheap_in != w.cheap_out {
            n += conv_bn_act_params(w.cheap_in, w.cheap_out, 1);
        }
        Ok(n)
    }
}

/// Smallest bottleneck width whose parameter count is closest to `target`.
pub fn calibrate_alss(in_channels: usize, out_channels: usize, stride: usize, split: f64, target: usize) -> Result<AlssConfig> {
    let mut cfg = AlssConfig {
        split,
        ..AlssConfig::new(in_channels, out_channels, stride, 1)
    };
    let mut best: Option<(usize, usize)> = None;
    // the count grows monotonically with the width, so stop once past the target
    for h in 1..=4 * (in_channels + out_channels).max(target) {
        cfg.hidden = h;
        let n = cfg.param_count()?;
        let gap = n.abs_diff(target);
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((h, gap));
        }
        if n > target {
            break;
        }
    }
    cfg.hidden = best.expect("at least one width tried").0;
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct Alss {
    pub cfg: AlssConfig,
    widths: AlssWidths,
    cheap_dw: Option<ConvBnAct>,
    cheap_pw: Option<ConvBnAct>,
    reduce: ConvBnAct,
    spatial: ConvBnAct,
    expand: ConvBnAct,
}

impl Alss {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AlssConfig) -> Result<Self> {
        let w = cfg.widths()?;
        let h = cfg.hidden;
        let cheap_dw = (cfg.stride == 2).then(|| ConvBnAct::depthwise(store, &format!("{name}.cheap.dw"), w.cheap_in, 3, 2));
        let cheap_pw = (w.cheap_in != w.cheap_out)
            .then(|| ConvBnAct::new(store, &format!("{name}.cheap.pw"), w.cheap_in, w.cheap_out, 1, 1));
        let reduce = ConvBnAct::new(store, &format!("{name}.main.reduce"), w.main_in, h, 1, 1);
        let spatial = ConvBnAct::new(store, &format!("{name}.main.spatial"), h, h, 3, cfg.stride);
        let expand = ConvBnAct::new(store, &format!("{name}.main.expand"), h, w.main_out, 1, 1);
        Ok(Self {
            cfg,
            widths: w,
            cheap_dw,
            cheap_pw,
            reduce,
            spatial,
            expand,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x)[1];
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!("alss expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let w = self.widths;
        let mut cheap = ops::slice_channels(tape, x, 0, w.cheap_in);
        let main = ops::slice_channels(tape, x, w.cheap_in, c);
        if let Some(dw) = &self.cheap_dw {
            cheap = dw.forward(tape, store, cheap);
        }
        if let Some(pw) = &self.cheap_pw {
            cheap = pw.forward(tape, store, cheap);
        }
        let m = self.reduce.forward(tape, store, main);
        let m = self.spatial.forward(tape, store, m);
        let m = self.expand.forward(tape, store, m);
        let cat = ops::concat(tape, &[cheap, m]);
        Ok(ops::channel_shuffle(tape, cat, self.cfg.shuffle_groups))
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.spatial.out_hw(h, w)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        let mut n = self.reduce.macs(h, w) + self.spatial.macs(h, w) + self.expand.macs(ho, wo);
        if let Some(dw) = &self.cheap_dw {
            n += dw.macs(h, w);
        }
        if let Some(pw) = &self.cheap_pw {
            n += pw.macs(ho, wo);
        }
        n
    }
}
