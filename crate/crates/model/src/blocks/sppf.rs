//! Spatial pyramid pooling, fast variant.

use super::conv::ConvBnAct;
use crate::ops;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use loopseg_core::{Error, Result};

pub const POOL_KERNEL: usize = 5;

#[derive(Clone, Debug)]
pub struct Sppf {
    pub cin: usize,
    pub cout: usize,
    reduce: ConvBnAct,
    expand: ConvBnAct,
}

impl Sppf {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        if cin < 2 || cin % 2 != 0 {
            return Err(Error::Config(format!("{name}: sppf input channels must be even, got {cin}")));
        }
        let hidden = cin / 2;
        Ok(Self {
            cin,
            cout,
            reduce: ConvBnAct::new(store, &format!("{name}.cv1"), cin, hidden, 1, 1),
            expand: ConvBnAct::new(store, &format!("{name}.cv2"), 4 * hidden, cout, 1, 1),
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        let h = cin / 2;
        super::conv::conv_bn_act_params(cin, h, 1) + super::conv::conv_bn_act_params(4 * h, cout, 1)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let a = self.reduce.forward(tape, store, x);
        let b = ops::max_pool_same(tape, a, POOL_KERNEL);
        let c = ops::max_pool_same(tape, b, POOL_KERNEL);
        let d = ops::max_pool_same(tape, c, POOL_KERNEL);
        let cat = ops::concat(tape, &[a, b, c, d]);
        self.expand.forward(tape, store, cat)
    }

    /// Convolution MACs; pooling is not counted.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.reduce.macs(h, w) + self.expand.macs(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn counts_and_shape() {
        let mut store = ParamStore::new(0);
        let s = Sppf::new(&mut store, "s", 16, 16).unwrap();
        assert_eq!(store.total(), 16 * 8 + 2 * 8 + 32 * 16 + 2 * 16);
        assert_eq!(Sppf::param_count(176, 176), 77968);
        let mut tape = Tape::inference();
        let x = tape.input(ArrayD::ones(IxDyn(&[1, 16, 7, 6])));
        let y = s.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[1, 16, 7, 6]);
    }

    #[test]
    fn odd_input_rejected() {
        let mut store = ParamStore::new(0);
        assert!(Sppf::new(&mut store, "s", 15, 16).is_err());
    }
}
