//! Convolution layers with and without normalization.

use crate::ops::{self, ConvGeom};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use ndarray::{ArrayD, IxDyn};

pub const BN_EPS: f64 = 1e-3;

/// Closed-form parameter count of a bias-free conv followed by a two-value
/// per-channel normalization.
pub const fn conv_bn_act_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + 2 * cout
}

/// Multiply-accumulates of a `k×k` convolution producing `cout×ho×wo`.
pub fn conv_macs(cin: usize, cout: usize, k: usize, groups: usize, ho: usize, wo: usize) -> u64 {
    (cin / groups * k * k * cout * ho * wo) as u64
}

pub fn out_size(n: usize, k: usize, s: usize) -> usize {
    (n + 2 * (k / 2) - k) / s + 1
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, groups: usize, bias: bool) -> Self {
        let fan_in = cin / groups * k * k;
        let weight = store.uniform(&format!("{name}.weight"), ParamKind::Weight, &[cout, cin / groups, k, k], fan_in);
        let bias = bias.then(|| store.uniform(&format!("{name}.bias"), ParamKind::Bias, &[cout], fan_in));
        Self {
            cin,
            cout,
            k,
            geom: ConvGeom { stride, pad, groups },
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        ops::conv2d(tape, x, w, b, self.geom)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (self.geom.out_size(h, self.k), self.geom.out_size(w, self.k))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.out_hw(h, w);
        conv_macs(self.cin, self.cout, self.k, self.geom.groups, ho, wo)
    }
}

/// Bias-free convolution, normalization, then SiLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub scale: ParamId,
    pub shift: ParamId,
    mean: usize,
    var: usize,
    pub act: bool,
}

impl ConvBnAct {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::grouped(store, name, cin, cout, k, stride, 1)
    }

    pub fn depthwise(store: &mut ParamStore, name: &str, c: usize, k: usize, stride: usize) -> Self {
        Self::grouped(store, name, c, c, k, stride, c)
    }

    pub fn grouped(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, groups: usize) -> Self {
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2, groups, false);
        let scale = store.constant(&format!("{name}.bn.weight"), ParamKind::NormScale, ArrayD::ones(IxDyn(&[cout])));
        let shift = store.constant(&format!("{name}.bn.bias"), ParamKind::NormShift, ArrayD::zeros(IxDyn(&[cout])));
        let mean = store.buffer(&format!("{name}.bn.running_mean"), ArrayD::zeros(IxDyn(&[cout])));
        let var = store.buffer(&format!("{name}.bn.running_var"), ArrayD::ones(IxDyn(&[cout])));
        Self {
            conv,
            scale,
            shift,
            mean,
            var,
            act: true,
        }
    }

    pub fn without_activation(mut self) -> Self {
        self.act = false;
        self
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(tape, store, x);
        let s = tape.param(store, self.scale);
        let b = tape.param(store, self.shift);
        let y = ops::batch_norm(tape, y, s, b, store.buffer_value(self.mean), store.buffer_value(self.var), BN_EPS);
        if self.act {
            ops::silu(tape, y)
        } else {
            y
        }
    }

    pub fn cout(&self) -> usize {
        self.conv.cout
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.conv.out_hw(h, w)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}
