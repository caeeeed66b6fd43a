//! Anchor-free segmentation head with prototype masks.
//!
//! Each scale has three conv towers: box side distributions over `reg_max`
//! bins, class logits, and `tanh`-bounded mask coefficients. Prototypes come
//! from the finest scale, upsampled once. An instance mask is the sigmoid of
//! the coefficient-weighted prototype sum, cropped to the box.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvBnAct};
use crate::ops::{self, sigmoid_scalar};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Tensor, Var};
use loopseg_core::geometry::box_to_bitmap;
use loopseg_core::{BBox, Bitmap, Error, MaskInstance, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentHeadConfig {
    pub num_classes: usize,
    pub num_prototypes: usize,
    /// Width of the prototype branch.
    pub proto_channels: usize,
    pub reg_max: usize,
}

impl Default for SegmentHeadConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            num_prototypes: 32,
            proto_channels: 48,
            reg_max: 24,
        }
    }
}

impl SegmentHeadConfig {
    /// Tower widths `(box, class, coefficient)` for the given finest input width.
    pub fn tower_widths(&self, c0: usize) -> (usize, usize, usize) {
        let box_w = 16.max(c0 / 4).max(4 * self.reg_max);
        let cls_w = c0.max(self.num_classes.min(100));
        let coef_w = (c0 / 4).max(self.num_prototypes);
        (box_w, cls_w, coef_w)
    }
}

#[derive(Clone, Debug)]
struct Tower {
    a: ConvBnAct,
    b: ConvBnAct,
    out: Conv2d,
}

impl Tower {
    fn new(store: &mut ParamStore, name: &str, cin: usize, width: usize, cout: usize) -> Self {
        Self {
            a: ConvBnAct::new(store, &format!("{name}.0"), cin, width, 3, 1),
            b: ConvBnAct::new(store, &format!("{name}.1"), width, width, 3, 1),
            out: Conv2d::new(store, &format!("{name}.2"), width, cout, 1, 1, 0, 1, true),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.a.forward(tape, store, x);
        let y = self.b.forward(tape, store, y);
        self.out.forward(tape, store, y)
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        self.a.macs(h, w) + self.b.macs(h, w) + self.out.macs(h, w)
    }
}

#[derive(Clone, Debug)]
struct Proto {
    cv1: ConvBnAct,
    up_w: ParamId,
    up_b: ParamId,
    cv2: ConvBnAct,
    cv3: ConvBnAct,
    c: usize,
}

#[derive(Clone, Debug)]
pub struct SegmentHead {
    pub cfg: SegmentHeadConfig,
    pub in_channels: Vec<usize>,
    box_towers: Vec<Tower>,
    cls_towers: Vec<Tower>,
    coef_towers: Vec<Tower>,
    proto: Proto,
    dfl: ParamId,
}

/// Raw head outputs, one entry per scale.
pub struct HeadOutput {
    pub box_dist: Vec<Var>,
    pub cls_logits: Vec<Var>,
    pub coeffs: Vec<Var>,
    pub protos: Var,
}

impl SegmentHead {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: &[usize], cfg: SegmentHeadConfig) -> Result<Self> {
        if in_channels.is_empty() || cfg.num_prototypes == 0 || cfg.reg_max == 0 || cfg.num_classes == 0 {
            return Err(Error::Config(format!("{name}: head needs inputs, prototypes, classes and reg_max ≥ 1")));
        }
        let (bw, cw, kw) = cfg.tower_widths(in_channels[0]);
        let mut box_towers = Vec::new();
        let mut cls_towers = Vec::new();
        let mut coef_towers = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            box_towers.push(Tower::new(store, &format!("{name}.box{i}"), c, bw, 4 * cfg.reg_max));
            cls_towers.push(Tower::new(store, &format!("{name}.cls{i}"), c, cw, cfg.num_classes));
            coef_towers.push(Tower::new(store, &format!("{name}.coef{i}"), c, kw, cfg.num_prototypes));
        }
        let p = cfg.proto_channels;
        let fan = p * 4;
        let proto = Proto {
            cv1: ConvBnAct::new(store, &format!("{name}.proto.cv1"), in_channels[0], p, 3, 1),
            up_w: store.uniform(&format!("{name}.proto.up.weight"), ParamKind::Weight, &[p, p, 2, 2], fan),
            up_b: store.uniform(&format!("{name}.proto.up.bias"), ParamKind::Bias, &[p], fan),
            cv2: ConvBnAct::new(store, &format!("{name}.proto.cv2"), p, p, 3, 1),
            cv3: ConvBnAct::new(store, &format!("{name}.proto.cv3"), p, cfg.num_prototypes, 1, 1),
            c: p,
        };
        let bins = ArrayD::from_shape_fn(IxDyn(&[cfg.reg_max]), |i| i[0] as f64);
        let dfl = store.constant(&format!("{name}.dfl.weight"), ParamKind::Fixed, bins);
        Ok(Self {
            cfg,
            in_channels: in_channels.to_vec(),
            box_towers,
            cls_towers,
            coef_towers,
            proto,
            dfl,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xs: &[Var]) -> Result<HeadOutput> {
        if xs.len() != self.in_channels.len() {
            return Err(Error::Config(format!("head expects {} scales, got {}", self.in_channels.len(), xs.len())));
        }
        for (i, (&x, &c)) in xs.iter().zip(&self.in_channels).enumerate() {
            if tape.shape(x)[1] != c {
                return Err(Error::Config(format!("head scale {i} expects {c} channels, got {:?}", tape.shape(x))));
            }
        }
        let mut out = HeadOutput {
            box_dist: Vec::new(),
            cls_logits: Vec::new(),
            coeffs: Vec::new(),
            protos: xs[0],
        };
        for (i, &x) in xs.iter().enumerate() {
            out.box_dist.push(self.box_towers[i].forward(tape, store, x));
            out.cls_logits.push(self.cls_towers[i].forward(tape, store, x));
            let k = self.coef_towers[i].forward(tape, store, x);
            out.coeffs.push(ops::tanh(tape, k));
        }
        let p = &self.proto;
        let y = p.cv1.forward(tape, store, xs[0]);
        let w = tape.param(store, p.up_w);
        let b = tape.param(store, p.up_b);
        let y = ops::conv_transpose_2x2(tape, y, w, Some(b));
        let y = p.cv2.forward(tape, store, y);
        out.protos = p.cv3.forward(tape, store, y);
        Ok(out)
    }

    /// Bin values used to turn side distributions into distances.
    pub fn bins<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.value(self.dfl)
    }

    /// MACs for inputs of the given spatial sizes (finest first).
    pub fn macs(&self, sizes: &[(usize, usize)]) -> u64 {
        let mut n = 0;
        let mut anchors = 0;
        for (i, &(h, w)) in sizes.iter().enumerate() {
            n += self.box_towers[i].macs(h, w) + self.cls_towers[i].macs(h, w) + self.coef_towers[i].macs(h, w);
            anchors += h * w;
        }
        let (h0, w0) = sizes[0];
        let p = &self.proto;
        n += p.cv1.macs(h0, w0);
        n += (p.c * p.c * 4 * h0 * w0) as u64;
        n += p.cv2.macs(2 * h0, 2 * w0) + p.cv3.macs(2 * h0, 2 * w0);
        n + (self.cfg.reg_max * 4 * anchors) as u64
    }
}

/// Expected distance under a softmax over `logits`, with bin values `bins`.
pub fn dfl_expectation(logits: &[f64], bins: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut e = 0.0;
    for (&l, &b) in logits.iter().zip(bins) {
        let p = (l - m).exp();
        z += p;
        e += p * b;
    }
    e / z
}

/// One decoded anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
    pub coeffs: Vec<f64>,
}

/// Decode anchors of image `b` whose best class probability reaches
/// `min_score`. Boxes are in input pixels; anchor centers sit at cell centers.
pub fn decode(tape: &Tape, out: &HeadOutput, strides: &[usize], bins: &[f64], b: usize, min_score: f64) -> Vec<Detection> {
    let reg = bins.len();
    let mut dets = Vec::new();
    for (i, &s) in strides.iter().enumerate() {
        let bd = tape.value(out.box_dist[i]);
        let cl = tape.value(out.cls_logits[i]);
        let co = tape.value(out.coeffs[i]);
        let (nc, k) = (cl.shape()[1], co.shape()[1]);
        let (h, w) = (cl.shape()[2], cl.shape()[3]);
        for y in 0..h {
            for x in 0..w {
                let (class_id, logit) = (0..nc)
                    .map(|c| (c, cl[[b, c, y, x]]))
                    .fold((0, f64::NEG_INFINITY), |a, v| if v.1 > a.1 { v } else { a });
                let score = sigmoid_scalar(logit);
                if score < min_score {
                    continue;
                }
                let side = |j: usize| {
                    let l: Vec<f64> = (0..reg).map(|r| bd[[b, j * reg + r, y, x]]).collect();
                    dfl_expectation(&l, bins) * s as f64
                };
                let (cx, cy) = ((x as f64 + 0.5) * s as f64, (y as f64 + 0.5) * s as f64);
                let bbox = BBox::new(cx - side(0), cy - side(1), cx + side(2), cy + side(3)).with_confidence(score);
                dets.push(Detection {
                    bbox,
                    class_id: class_id as u32,
                    score,
                    coeffs: (0..k).map(|c| co[[b, c, y, x]]).collect(),
                });
            }
        }
    }
    dets
}

/// `sigmoid(Σ_k c_k · P_k)` over the prototype grid.
pub fn soft_mask(protos: &Array3<f64>, coeffs: &[f64]) -> Result<Array2<f64>> {
    let k = protos.len_of(Axis(0));
    if coeffs.len() != k {
        return Err(Error::Domain(format!("{} coefficients for {k} prototypes", coeffs.len())));
    }
    let (h, w) = (protos.shape()[1], protos.shape()[2]);
    let flat = protos.to_shape((k, h * w)).expect("contiguous prototypes");
    let c = ndarray::Array1::from(coeffs.to_vec());
    let z = c.dot(&flat);
    Ok(z.mapv(sigmoid_scalar).into_shape_with_order((h, w)).expect("h·w values"))
}

/// Threshold the soft mask at 0.5 inside `bbox` (prototype pixel coordinates).
pub fn assemble_instance_mask(protos: &Array3<f64>, coeffs: &[f64], bbox: &BBox, image_id: &str, class_id: u32) -> Result<MaskInstance> {
    let soft = soft_mask(protos, coeffs)?;
    let (h, w) = (soft.shape()[0] as u32, soft.shape()[1] as u32);
    let crop = box_to_bitmap(bbox, w, h);
    let bits = Bitmap::from_fn(w, h, |x, y| crop.get(x, y) && soft[[y as usize, x as usize]] > 0.5);
    let mut inst = MaskInstance::from_bitmap(image_id, class_id, bits);
    inst.confidence = bbox.confidence;
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_head_count() {
        let mut store = ParamStore::new(0);
        SegmentHead::new(&mut store, "h", &[48, 88, 176], SegmentHeadConfig::default()).unwrap();
        assert_eq!(store.total(), 918_811);
    }

    #[test]
    fn zero_coefficients_give_half() {
        let p = Array3::from_shape_fn((3, 4, 5), |(k, y, x)| (k + y * x) as f64);
        let m = soft_mask(&p, &[0.0; 3]).unwrap();
        assert!(m.iter().all(|&v| v == 0.5));
        assert_eq!(m.shape(), &[4, 5]);
    }

    #[test]
    fn count_mismatch_is_domain_error() {
        let p = Array3::zeros((3, 4, 4));
        assert!(matches!(soft_mask(&p, &[1.0; 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn expectation_of_peaked_distribution() {
        let bins: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let mut l = vec![-50.0; 8];
        l[5] = 50.0;
        assert!((dfl_expectation(&l, &bins) - 5.0).abs() < 1e-12);
    }
}
