//! Config-driven training harness for toy data.
//!
//! Anchors whose cell center falls inside a ground-truth box are positives for
//! that box (the smallest one on overlap). The loss sums class BCE over all
//! anchors, distribution focal loss on positive box sides and per-instance mask
//! BCE inside the box on the prototype grid. Optimization is momentum SGD with
//! weight decay on conv weights, linear warmup and cosine decay.

use ndarray::{ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::network::Network;
use crate::ops;
use crate::params::{ParamId, ParamKind};
use crate::tape::{Tape, Tensor};
use loopseg_core::geometry::box_to_bitmap;
use loopseg_core::{BBox, Bitmap, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lrf: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
    pub warmup_momentum: f64,
    pub weight_decay: f64,
    pub cls_weight: f64,
    pub dfl_weight: f64,
    pub mask_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 120,
            lr0: 1e-3,
            lrf: 1e-2,
            momentum: 0.937,
            warmup_epochs: 3,
            warmup_momentum: 0.8,
            weight_decay: 5e-4,
            cls_weight: 0.5,
            dfl_weight: 1.5,
            mask_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `(lr, momentum)` for a zero-based epoch.
    pub fn schedule(&self, epoch: usize) -> (f64, f64) {
        if epoch < self.warmup_epochs {
            let f = (epoch + 1) as f64 / (self.warmup_epochs + 1) as f64;
            return (self.lr0 * f, self.warmup_momentum + (self.momentum - self.warmup_momentum) * f);
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        let lo = self.lr0 * self.lrf;
        (lo + 0.5 * (self.lr0 - lo) * (1.0 + (std::f64::consts::PI * t).cos()), self.momentum)
    }
}

#[derive(Clone, Debug)]
pub struct TrainInstance {
    pub bbox: BBox,
    pub mask: Bitmap,
    pub class_id: u32,
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    /// `[C, H, W]`.
    pub image: Tensor,
    pub instances: Vec<TrainInstance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub cls: f64,
    pub dfl: f64,
    pub mask: f64,
    pub total: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    velocity: Vec<(ParamId, Tensor)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// Loss of a batch on a fresh tape, plus parameter gradients when `grad`.
    fn loss(&self, net: &Network, batch: &[TrainSample], grad: bool) -> Result<(LossParts, Vec<(ParamId, Tensor)>)> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let dims = batch[0].image.shape().to_vec();
        if batch.iter().any(|s| s.image.shape() != dims.as_slice()) {
            return Err(Error::Domain("batch images differ in size".into()));
        }
        let views: Vec<_> = batch.iter().map(|s| s.image.view().insert_axis(Axis(0))).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Domain(e.to_string()))?;
        let mut tape = if grad { Tape::new() } else { Tape::inference() };
        let out = net.forward(&mut tape, x)?;
        let strides = net.strides();
        let head = net.head();
        let nc = head.cfg.num_classes;

        let mut cls_terms = Vec::new();
        let mut dfl_terms = Vec::new();
        let mut anchors: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut anchor_inst: Vec<(usize, usize)> = Vec::new();
        let mut n_pos = 0usize;
        for (si, &s) in strides.iter().enumerate() {
            let cs = tape.shape(out.cls_logits[si]).to_vec();
            let mut target = ArrayD::zeros(IxDyn(&cs));
            let mut sides = Vec::new();
            for (b, sample) in batch.iter().enumerate() {
                for y in 0..cs[2] {
                    for x in 0..cs[3] {
                        let (cx, cy) = ((x as f64 + 0.5) * s as f64, (y as f64 + 0.5) * s as f64);
                        let hit = sample
                            .instances
                            .iter()
                            .enumerate()
                            .filter(|(_, i)| cx > i.bbox.x_min && cx < i.bbox.x_max && cy > i.bbox.y_min && cy < i.bbox.y_max)
                            .min_by(|a, b| a.1.bbox.area().total_cmp(&b.1.bbox.area()));
                        if let Some((ii, inst)) = hit {
                            let c = inst.class_id as usize;
                            if c >= nc {
                                return Err(Error::Domain(format!("class {c} outside {nc} classes")));
                            }
                            target[[b, c, y, x]] = 1.0;
                            let d = [cx - inst.bbox.x_min, cy - inst.bbox.y_min, inst.bbox.x_max - cx, inst.bbox.y_max - cy];
                            sides.push((b, y, x, d.map(|v| v / s as f64)));
                            anchors.push((si, b, y, x));
                            anchor_inst.push((b, ii));
                            n_pos += 1;
                        }
                    }
                }
            }
            let weights = ArrayD::ones(IxDyn(&cs));
            cls_terms.push(ops::bce_with_logits(&mut tape, out.cls_logits[si], target, weights));
            if !sides.is_empty() {
                dfl_terms.push(ops::dfl_loss(&mut tape, out.box_dist[si], sides));
            }
        }
        let cls = ops::add_scalars(&mut tape, &cls_terms);
        let cls = ops::scale(&mut tape, cls, 1.0 / strides.len() as f64);
        let mut parts = vec![ops::scale(&mut tape, cls, self.cfg.cls_weight)];
        let dfl_v = if dfl_terms.is_empty() {
            0.0
        } else {
            let d = ops::add_scalars(&mut tape, &dfl_terms);
            let d = ops::scale(&mut tape, d, 1.0 / dfl_terms.len() as f64);
            parts.push(ops::scale(&mut tape, d, self.cfg.dfl_weight));
            tape.value(d)[[0]]
        };
        let mut mask_v = 0.0;
        if n_pos > 0 {
            let ps = tape.shape(out.protos).to_vec();
            let (ph, pw) = (ps[2], ps[3]);
            let pstride = net.proto_stride() as f64;
            let mut logits = Vec::new();
            for si in 0..strides.len() {
                let a: Vec<(usize, usize, usize)> = anchors.iter().filter(|a| a.0 == si).map(|a| (a.1, a.2, a.3)).collect();
                if !a.is_empty() {
                    logits.push(ops::mask_logits(&mut tape, out.protos, out.coeffs[si], a));
                }
            }
            let ml = ops::concat_batch(&mut tape, &logits);
            // anchors are already scale-major, matching the concatenation order
            let mut target = ArrayD::zeros(IxDyn(&[n_pos, 1, ph, pw]));
            let mut weight = ArrayD::zeros(IxDyn(&[n_pos, 1, ph, pw]));
            for (row, &(b, ii)) in anchor_inst.iter().enumerate() {
                let inst = &batch[b].instances[ii];
                let scaled = BBox::new(
                    inst.bbox.x_min / pstride,
                    inst.bbox.y_min / pstride,
                    inst.bbox.x_max / pstride,
                    inst.bbox.y_max / pstride,
                );
                let crop = box_to_bitmap(&scaled, pw as u32, ph as u32);
                let area = crop.count().max(1) as f64;
                for y in 0..ph {
                    for x in 0..pw {
                        if crop.get(x as u32, y as u32) {
                            weight[[row, 0, y, x]] = 1.0 / area;
                            let (sx, sy) = (((x as f64 + 0.5) * pstride) as u32, ((y as f64 + 0.5) * pstride) as u32);
                            if sx < inst.mask.width() && sy < inst.mask.height() && inst.mask.get(sx, sy) {
                                target[[row, 0, y, x]] = 1.0;
                            }
                        }
                    }
                }
            }
            let m = ops::bce_with_logits(&mut tape, ml, target, weight);
            mask_v = tape.value(m)[[0]];
            parts.push(ops::scale(&mut tape, m, self.cfg.mask_weight));
        }
        let total = ops::add_scalars(&mut tape, &parts);
        let lp = LossParts {
            cls: tape.value(cls)[[0]],
            dfl: dfl_v,
            mask: mask_v,
            total: tape.value(total)[[0]],
        };
        let grads = if grad { tape.backward(total).params() } else { Vec::new() };
        Ok((lp, grads))
    }

    pub fn evaluate(&self, net: &Network, batch: &[TrainSample]) -> Result<LossParts> {
        Ok(self.loss(net, batch, false)?.0)
    }

    /// One SGD update on `batch` at the given epoch's schedule.
    pub fn step(&mut self, net: &mut Network, batch: &[TrainSample], epoch: usize) -> Result<LossParts> {
        let (lp, grads) = self.loss(net, batch, true)?;
        let (lr, mom) = self.cfg.schedule(epoch);
        for (id, mut g) in grads {
            let kind = net.store.get(id).kind;
            if kind == ParamKind::Fixed {
                continue;
            }
            if kind == ParamKind::Weight {
                g.scaled_add(self.cfg.weight_decay, net.store.value(id));
            }
            let v = match self.velocity.iter_mut().find(|(p, _)| *p == id) {
                Some((_, v)) => {
                    *v *= mom;
                    *v += &g;
                    v
                }
                None => {
                    self.velocity.push((id, g));
                    &mut self.velocity.last_mut().expect("just pushed").1
                }
            };
            net.store.value_mut(id).scaled_add(-lr, v);
        }
        Ok(lp)
    }

    /// Train for `cfg.epochs` over `samples` in order-preserving batches;
    /// returns the mean loss per epoch.
    pub fn fit(&mut self, net: &mut Network, samples: &[TrainSample]) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::Domain("no training samples".into()));
        }
        let bs = self.cfg.batch_size.max(1);
        let mut history = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let mut sum = 0.0;
            let mut n = 0;
            for batch in samples.chunks(bs) {
                sum += self.step(net, batch, epoch)?.total;
                n += 1;
            }
            history.push(sum / n as f64);
        }
        Ok(history)
    }
}
