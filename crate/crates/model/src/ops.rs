//! Differentiable tensor operations recorded on a [`Tape`].

use ndarray::{s, Array2, ArrayView4, ArrayViewMut4, Axis, Ix4, IxDyn};

use crate::tape::{zeros, Tape, Tensor, Var};

fn v4(t: &Tensor) -> ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

fn v4m(t: &mut Tensor) -> ArrayViewMut4<'_, f64> {
    t.view_mut().into_dimensionality::<Ix4>().expect("4-d tensor")
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_size(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad - k) / self.stride + 1
    }
}

/// Unfold one group of one image into `[cg·kh·kw, ho·wo]`.
fn im2col(x: ArrayView4<f64>, b: usize, c0: usize, cg: usize, kh: usize, kw: usize, g: ConvGeom, ho: usize, wo: usize) -> Array2<f64> {
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let mut cols = Array2::zeros((cg * kh * kw, ho * wo));
    for c in 0..cg {
        for i in 0..kh {
            for j in 0..kw {
                let row = (c * kh + i) * kw + j;
                let mut r = cols.row_mut(row);
                for oy in 0..ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < w {
                            r[oy * wo + ox] = x[[b, c0 + c, y as usize, xx as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &Array2<f64>, mut dx: ArrayViewMut4<f64>, b: usize, c0: usize, cg: usize, kh: usize, kw: usize, g: ConvGeom, ho: usize, wo: usize) {
    let (h, w) = (dx.shape()[2] as isize, dx.shape()[3] as isize);
    for c in 0..cg {
        for i in 0..kh {
            for j in 0..kw {
                let r = cols.row((c * kh + i) * kw + j);
                for oy in 0..ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < w {
                            dx[[b, c0 + c, y as usize, xx as usize]] += r[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-d convolution. `w` is `[out, in/groups, kh, kw]`; `bias` is `[out]`.
pub fn conv2d(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>, g: ConvGeom) -> Var {
    let (xs, ws) = (tape.shape(x).to_vec(), tape.shape(w).to_vec());
    let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(cin, cg * g.groups, "conv input channels {cin} vs weight {cg}×{}", g.groups);
    assert_eq!(cout % g.groups, 0);
    let og = cout / g.groups;
    let (ho, wo) = (g.out_size(h, kh), g.out_size(wd, kw));
    let mut out = zeros(&[bn, cout, ho, wo]);
    {
        let xv = v4(tape.value(x));
        let wv = v4(tape.value(w));
        let mut ov = v4m(&mut out);
        for b in 0..bn {
            for gi in 0..g.groups {
                let cols = im2col(xv, b, gi * cg, cg, kh, kw, g, ho, wo);
                let wg = wv
                    .slice(s![gi * og..(gi + 1) * og, .., .., ..])
                    .to_shape((og, cg * kh * kw))
                    .unwrap()
                    .to_owned();
                let y = wg.dot(&cols);
                ov.slice_mut(s![b, gi * og..(gi + 1) * og, .., ..])
                    .assign(&y.to_shape((og, ho, wo)).unwrap());
            }
        }
        if let Some(bv) = bias {
            let bb = tape.value(bv);
            for o in 0..cout {
                ov.slice_mut(s![.., o, .., ..]).mapv_inplace(|v| v + bb[[o]]);
            }
        }
    }
    let mut parents = vec![x, w];
    parents.extend(bias);
    tape.push_op(out, &parents, move |gout, inp, _| {
        let xv = v4(inp[0]);
        let wv = v4(inp[1]);
        let gv = v4(gout);
        let mut dx = zeros(&[bn, cin, h, wd]);
        let mut dw = zeros(&[cout, cg, kh, kw]);
        for b in 0..bn {
            for gi in 0..g.groups {
                let cols = im2col(xv, b, gi * cg, cg, kh, kw, g, ho, wo);
                let go = gv
                    .slice(s![b, gi * og..(gi + 1) * og, .., ..])
                    .to_shape((og, ho * wo))
                    .unwrap()
                    .to_owned();
                let wg = wv
                    .slice(s![gi * og..(gi + 1) * og, .., .., ..])
                    .to_shape((og, cg * kh * kw))
                    .unwrap()
                    .to_owned();
                let dwg = go.dot(&cols.t());
                let mut dwv = v4m(&mut dw);
                let mut slot = dwv.slice_mut(s![gi * og..(gi + 1) * og, .., .., ..]);
                slot += &dwg.to_shape((og, cg, kh, kw)).unwrap();
                let dcols = wg.t().dot(&go);
                col2im(&dcols, v4m(&mut dx), b, gi * cg, cg, kh, kw, g, ho, wo);
            }
        }
        let mut grads = vec![dx, dw];
        if inp.len() == 3 {
            let db = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            grads.push(db.into_dyn());
        }
        grads
    })
}

/// Transposed convolution with kernel 2 and stride 2. `w` is `[in, out, 2, 2]`.
pub fn conv_transpose_2x2(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Var {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    assert_eq!(ws[0], cin);
    assert_eq!(&ws[2..], &[2, 2]);
    let cout = ws[1];
    let mut out = zeros(&[bn, cout, 2 * h, 2 * wd]);
    {
        let xv = v4(tape.value(x));
        let wv = v4(tape.value(w));
        let mut ov = v4m(&mut out);
        for b in 0..bn {
            let xf = xv.slice(s![b, .., .., ..]).to_shape((cin, h * wd)).unwrap().to_owned();
            for a in 0..2 {
                for c in 0..2 {
                    let wk: Array2<f64> = wv.slice(s![.., .., a, c]).to_owned();
                    let y = wk.t().dot(&xf);
                    let y = y.to_shape((cout, h, wd)).unwrap();
                    ov.slice_mut(s![b, .., a..;2, c..;2]).assign(&y);
                }
            }
        }
        if let Some(bv) = bias {
            let bb = tape.value(bv);
            for o in 0..cout {
                ov.slice_mut(s![.., o, .., ..]).mapv_inplace(|v| v + bb[[o]]);
            }
        }
    }
    let mut parents = vec![x, w];
    parents.extend(bias);
    tape.push_op(out, &parents, move |gout, inp, _| {
        let xv = v4(inp[0]);
        let wv = v4(inp[1]);
        let gv = v4(gout);
        let mut dx = zeros(&[bn, cin, h, wd]);
        let mut dw = zeros(&[cin, cout, 2, 2]);
        {
            let mut dxv = v4m(&mut dx);
            let mut dwv = v4m(&mut dw);
            for b in 0..bn {
                let xf = xv.slice(s![b, .., .., ..]).to_shape((cin, h * wd)).unwrap().to_owned();
                for a in 0..2 {
                    for c in 0..2 {
                        let go = gv
                            .slice(s![b, .., a..;2, c..;2])
                            .to_shape((cout, h * wd))
                            .unwrap()
                            .to_owned();
                        let wk: Array2<f64> = wv.slice(s![.., .., a, c]).to_owned();
                        let dxf = wk.dot(&go);
                        let mut slot = dxv.slice_mut(s![b, .., .., ..]);
                        slot += &dxf.to_shape((cin, h, wd)).unwrap();
                        let mut dwk = dwv.slice_mut(s![.., .., a, c]);
                        dwk += &xf.dot(&go.t());
                    }
                }
            }
        }
        let mut grads = vec![dx, dw];
        if inp.len() == 3 {
            grads.push(gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
        }
        grads
    })
}

/// Per-channel `scale · (x − mean) / sqrt(var + eps) + shift` with fixed statistics.
pub fn batch_norm(tape: &mut Tape, x: Var, scale: Var, shift: Var, mean: &Tensor, var: &Tensor, eps: f64) -> Var {
    let c = tape.shape(x)[1];
    let inv: Vec<f64> = (0..c).map(|i| 1.0 / (var[[i]] + eps).sqrt()).collect();
    let mu: Vec<f64> = (0..c).map(|i| mean[[i]]).collect();
    let mut out = tape.value(x).clone();
    {
        let sc = tape.value(scale);
        let sh = tape.value(shift);
        let mut ov = v4m(&mut out);
        for i in 0..c {
            let (a, m, bb) = (sc[[i]] * inv[i], mu[i], sh[[i]]);
            ov.slice_mut(s![.., i, .., ..]).mapv_inplace(|v| a * (v - m) + bb);
        }
    }
    tape.push_op(out, &[x, scale, shift], move |gout, inp, _| {
        let gv = v4(gout);
        let xv = v4(inp[0]);
        let sc = inp[1];
        let mut dx = gout.clone();
        let mut ds = zeros(&[c]);
        let mut dsh = zeros(&[c]);
        let mut dxv = v4m(&mut dx);
        for i in 0..c {
            let a = sc[[i]] * inv[i];
            dxv.slice_mut(s![.., i, .., ..]).mapv_inplace(|g| g * a);
            let gi = gv.slice(s![.., i, .., ..]);
            let xi = xv.slice(s![.., i, .., ..]);
            dsh[[i]] = gi.sum();
            ds[[i]] = gi.iter().zip(xi.iter()).map(|(g, x)| g * (x - mu[i]) * inv[i]).sum();
        }
        vec![dx, ds, dsh]
    })
}

fn unary(tape: &mut Tape, x: Var, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
    let out = tape.value(x).mapv(f);
    tape.push_op(out, &[x], move |g, inp, out| {
        let mut d = g.clone();
        ndarray::Zip::from(&mut d)
            .and(inp[0])
            .and(out)
            .for_each(|d, &x, &y| *d *= df(x, y));
        vec![d]
    })
}

pub fn silu(tape: &mut Tape, x: Var) -> Var {
    unary(
        tape,
        x,
        |x| x * sigmoid_scalar(x),
        |x, _| {
            let s = sigmoid_scalar(x);
            s * (1.0 + x * (1.0 - s))
        },
    )
}

pub fn sigmoid(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, sigmoid_scalar, |_, y| y * (1.0 - y))
}

pub fn tanh(tape: &mut Tape, x: Var) -> Var {
    unary(tape, x, f64::tanh, |_, y| 1.0 - y * y)
}

/// `x[b, c, :, :] · gate[b, c, 0, 0]`.
pub fn mul_channel(tape: &mut Tape, x: Var, gate: Var) -> Var {
    let xs = tape.shape(x).to_vec();
    let gs = tape.shape(gate).to_vec();
    assert_eq!(&gs, &[xs[0], xs[1], 1, 1], "gate shape {gs:?} for input {xs:?}");
    let mut out = tape.value(x).clone();
    {
        let gv = v4(tape.value(gate));
        let mut ov = v4m(&mut out);
        for b in 0..xs[0] {
            for c in 0..xs[1] {
                let k = gv[[b, c, 0, 0]];
                ov.slice_mut(s![b, c, .., ..]).mapv_inplace(|v| v * k);
            }
        }
    }
    tape.push_op(out, &[x, gate], move |gout, inp, _| {
        let gv = v4(gout);
        let xv = v4(inp[0]);
        let kv = v4(inp[1]);
        let mut dx = gout.clone();
        let mut dg = zeros(&gs);
        {
            let mut dxv = v4m(&mut dx);
            let mut dgv = v4m(&mut dg);
            for b in 0..xs[0] {
                for c in 0..xs[1] {
                    let k = kv[[b, c, 0, 0]];
                    dxv.slice_mut(s![b, c, .., ..]).mapv_inplace(|v| v * k);
                    dgv[[b, c, 0, 0]] = gv
                        .slice(s![b, c, .., ..])
                        .iter()
                        .zip(xv.slice(s![b, c, .., ..]).iter())
                        .map(|(g, x)| g * x)
                        .sum();
                }
            }
        }
        vec![dx, dg]
    })
}

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Var {
    assert_eq!(tape.shape(a), tape.shape(b));
    let out = tape.value(a) + tape.value(b);
    tape.push_op(out, &[a, b], |g, _, _| vec![g.clone(), g.clone()])
}

/// Max pool with square kernel `k`, stride 1 and padding `k / 2`; output keeps
/// the spatial size. Ties route the gradient to the first maximum.
pub fn max_pool_same(tape: &mut Tape, x: Var, k: usize) -> Var {
    let xs = tape.shape(x).to_vec();
    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let p = (k / 2) as isize;
    let mut out = zeros(&xs);
    let mut arg = vec![0usize; bn * c * h * w];
    {
        let xv = v4(tape.value(x));
        let mut ov = v4m(&mut out);
        for b in 0..bn {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for dy in -p..=p {
                            for dx in -p..=p {
                                let (yy, xq) = (y as isize + dy, xx as isize + dx);
                                if yy < 0 || xq < 0 || yy >= h as isize || xq >= w as isize {
                                    continue;
                                }
                                let v = xv[[b, ch, yy as usize, xq as usize]];
                                if v > best {
                                    best = v;
                                    at = yy as usize * w + xq as usize;
                                }
                            }
                        }
                        ov[[b, ch, y, xx]] = best;
                        arg[((b * c + ch) * h + y) * w + xx] = at;
                    }
                }
            }
        }
    }
    tape.push_op(out, &[x], move |gout, _, _| {
        let gv = v4(gout);
        let mut dx = zeros(&[bn, c, h, w]);
        {
            let mut dv = v4m(&mut dx);
            for b in 0..bn {
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let at = arg[((b * c + ch) * h + y) * w + xx];
                            dv[[b, ch, at / w, at % w]] += gv[[b, ch, y, xx]];
                        }
                    }
                }
            }
        }
        vec![dx]
    })
}

/// Bin `i` of an adaptive pool over `n` inputs into `o` outputs.
pub fn adaptive_bin(i: usize, n: usize, o: usize) -> (usize, usize) {
    let start = (i * n) / o;
    let end = ((i + 1) * n).div_ceil(o);
    (start, end)
}

/// Adaptive average pooling to `o × o`.
pub fn adaptive_avg_pool(tape: &mut Tape, x: Var, o: usize) -> Var {
    let xs = tape.shape(x).to_vec();
    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    assert!(h >= o && w >= o, "adaptive pool to {o} needs input at least {o}×{o}, got {h}×{w}");
    let mut out = zeros(&[bn, c, o, o]);
    {
        let xv = v4(tape.value(x));
        let mut ov = v4m(&mut out);
        for i in 0..o {
            let (y0, y1) = adaptive_bin(i, h, o);
            for j in 0..o {
                let (x0, x1) = adaptive_bin(j, w, o);
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                for b in 0..bn {
                    for ch in 0..c {
                        ov[[b, ch, i, j]] = xv.slice(s![b, ch, y0..y1, x0..x1]).sum() / n;
                    }
                }
            }
        }
    }
    tape.push_op(out, &[x], move |gout, _, _| {
        let gv = v4(gout);
        let mut dx = zeros(&[bn, c, h, w]);
        {
            let mut dv = v4m(&mut dx);
            for i in 0..o {
                let (y0, y1) = adaptive_bin(i, h, o);
                for j in 0..o {
                    let (x0, x1) = adaptive_bin(j, w, o);
                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                    for b in 0..bn {
                        for ch in 0..c {
                            let g = gv[[b, ch, i, j]] / n;
                            dv.slice_mut(s![b, ch, y0..y1, x0..x1]).mapv_inplace(|v| v + g);
                        }
                    }
                }
            }
        }
        vec![dx]
    })
}

pub fn upsample_nearest2x(tape: &mut Tape, x: Var) -> Var {
    let xs = tape.shape(x).to_vec();
    let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let mut out = zeros(&[bn, c, 2 * h, 2 * w]);
    {
        let xv = v4(tape.value(x));
        let mut ov = v4m(&mut out);
        for a in 0..2 {
            for b in 0..2 {
                ov.slice_mut(s![.., .., a..;2, b..;2]).assign(&xv);
            }
        }
    }
    tape.push_op(out, &[x], move |gout, _, _| {
        let gv = v4(gout);
        let mut dx = zeros(&[bn, c, h, w]);
        {
            let mut dv = v4m(&mut dx);
            for a in 0..2 {
                for b in 0..2 {
                    dv += &gv.slice(s![.., .., a..;2, b..;2]);
                }
            }
        }
        vec![dx]
    })
}

/// Concatenate along channels.
pub fn concat(tape: &mut Tape, xs: &[Var]) -> Var {
    let shapes: Vec<Vec<usize>> = xs.iter().map(|&v| tape.shape(v).to_vec()).collect();
    let (bn, h, w) = (shapes[0][0], shapes[0][2], shapes[0][3]);
    for s in &shapes {
        assert_eq!((s[0], s[2], s[3]), (bn, h, w), "concat shape mismatch {shapes:?}");
    }
    let views: Vec<_> = xs.iter().map(|&v| tape.value(v).view()).collect();
    let out = ndarray::concatenate(Axis(1), &views).expect("same shapes");
    let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
    tape.push_op(out, xs, move |gout, _, _| {
        let mut at = 0;
        widths
            .iter()
            .map(|&c| {
                let g = gout.slice_axis(Axis(1), (at..at + c).into()).to_owned();
                at += c;
                g
            })
            .collect()
    })
}

/// Channel index mapping of a shuffle: output channel `i` reads input `perm[i]`.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    assert_eq!(c % groups, 0, "{c} channels not divisible into {groups} groups");
    let per = c / groups;
    (0..c).map(|i| (i % groups) * per + i / groups).collect()
}

/// Reshape channels to `[groups, c/groups]`, transpose and flatten.
pub fn channel_shuffle(tape: &mut Tape, x: Var, groups: usize) -> Var {
    let xs = tape.shape(x).to_vec();
    let perm = shuffle_permutation(xs[1], groups);
    let out = tape.value(x).select(Axis(1), &perm);
    tape.push_op(out, &[x], move |gout, _, _| {
        let mut dx = zeros(&xs);
        for (i, &p) in perm.iter().enumerate() {
            dx.index_axis_mut(Axis(1), p).assign(&gout.index_axis(Axis(1), i));
        }
        vec![dx]
    })
}

/// Sum of all elements.
pub fn sum(tape: &mut Tape, x: Var) -> Var {
    let v = tape.value(x).sum();
    let shape = tape.shape(x).to_vec();
    tape.push_op(Tensor::from_elem(IxDyn(&[1]), v), &[x], move |g, _, _| {
        vec![Tensor::from_elem(IxDyn(&shape), g[[0]])]
    })
}

/// Sum of `x ⊙ weights` for a constant `weights` tensor.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: Tensor) -> Var {
    assert_eq!(tape.shape(x), weights.shape());
    let v = (tape.value(x) * &weights).sum();
    tape.push_op(Tensor::from_elem(IxDyn(&[1]), v), &[x], move |g, _, _| vec![&weights * g[[0]]])
}

pub fn scale(tape: &mut Tape, x: Var, k: f64) -> Var {
    let out = tape.value(x) * k;
    tape.push_op(out, &[x], move |g, _, _| vec![g * k])
}

/// Add scalars (shape `[1]`).
pub fn add_scalars(tape: &mut Tape, xs: &[Var]) -> Var {
    let v: f64 = xs.iter().map(|&x| tape.value(x)[[0]]).sum();
    tape.push_op(Tensor::from_elem(IxDyn(&[1]), v), xs, |g, inp, _| inp.iter().map(|_| g.clone()).collect())
}

/// Mean binary cross-entropy with logits against constant targets, weighted
/// per element; the weights' sum is the denominator.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, targets: Tensor, weights: Tensor) -> Var {
    assert_eq!(tape.shape(logits), targets.shape());
    assert_eq!(targets.shape(), weights.shape());
    let denom = weights.sum().max(1e-12);
    let z = tape.value(logits);
    let mut loss = 0.0;
    ndarray::Zip::from(z).and(&targets).and(&weights).for_each(|&z, &t, &w| {
        // max(z,0) - z t + log(1 + e^{-|z|})
        loss += w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p());
    });
    tape.push_op(Tensor::from_elem(IxDyn(&[1]), loss / denom), &[logits], move |g, inp, _| {
        let mut d = inp[0].mapv(sigmoid_scalar);
        ndarray::Zip::from(&mut d).and(&targets).and(&weights).for_each(|d, &t, &w| {
            *d = (*d - t) * w / denom;
        });
        vec![d * g[[0]]]
    })
}

/// Slice channels `[start, end)`.
pub fn slice_channels(tape: &mut Tape, x: Var, start: usize, end: usize) -> Var {
    let shape = tape.shape(x).to_vec();
    let out = tape.value(x).slice_axis(Axis(1), (start..end).into()).to_owned();
    tape.push_op(out, &[x], move |g, _, _| {
        let mut dx = zeros(&shape);
        dx.slice_axis_mut(Axis(1), (start..end).into()).assign(g);
        vec![dx]
    })
}

/// Distribution focal loss: for each `(b, y, x, sides)` entry, cross-entropy of
/// the four side distributions of `box_dist` (`[B, 4·reg, H, W]`) against
/// targets split between the two neighbouring bins. Returns the mean over
/// entries and sides.
pub fn dfl_loss(tape: &mut Tape, box_dist: Var, targets: Vec<(usize, usize, usize, [f64; 4])>) -> Var {
    let shape = tape.shape(box_dist).to_vec();
    let reg = shape[1] / 4;
    let n = (targets.len() * 4).max(1) as f64;
    let v = v4(tape.value(box_dist));
    let mut loss = 0.0;
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(targets.len() * 4);
    for &(b, y, x, sides) in &targets {
        for (j, &t) in sides.iter().enumerate() {
            let l: Vec<f64> = (0..reg).map(|r| v[[b, j * reg + r, y, x]]).collect();
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|&a| (a - m).exp()).sum();
            let lse = m + z.ln();
            let (lo, wl, wr) = split_target(t, reg);
            loss += wl * (lse - l[lo]) + wr * (lse - l[lo + 1]);
            probs.push(l.iter().map(|&a| (a - lse).exp()).collect());
        }
    }
    tape.push_op(Tensor::from_elem(IxDyn(&[1]), loss / n), &[box_dist], move |g, _, _| {
        let mut d = zeros(&shape);
        let mut dv = v4m(&mut d);
        let k = g[[0]] / n;
        for (e, &(b, y, x, sides)) in targets.iter().enumerate() {
            for (j, &t) in sides.iter().enumerate() {
                let p = &probs[e * 4 + j];
                let (lo, wl, wr) = split_target(t, reg);
                for r in 0..reg {
                    let mut q = p[r];
                    if r == lo {
                        q -= wl;
                    }
                    if r == lo + 1 {
                        q -= wr;
                    }
                    dv[[b, j * reg + r, y, x]] += k * q;
                }
            }
        }
        vec![d]
    })
}

/// Lower bin and the two interpolation weights for a continuous target.
fn split_target(t: f64, reg: usize) -> (usize, f64, f64) {
    let t = t.clamp(0.0, reg as f64 - 1.0 - 1e-3);
    let lo = t.floor() as usize;
    let wr = t - lo as f64;
    (lo, 1.0 - wr, wr)
}

/// Per-instance mask logits `Σ_k coeffs[b, k, y, x] · protos[b, k]`, one
/// `[h, w]` map per anchor, stacked as `[n, 1, h, w]`.
pub fn mask_logits(tape: &mut Tape, protos: Var, coeffs: Var, anchors: Vec<(usize, usize, usize)>) -> Var {
    let ps = tape.shape(protos).to_vec();
    let cs = tape.shape(coeffs).to_vec();
    let (k, h, w) = (ps[1], ps[2], ps[3]);
    assert_eq!(cs[1], k, "coefficient and prototype counts differ");
    let mut out = zeros(&[anchors.len(), 1, h, w]);
    {
        let pv = v4(tape.value(protos));
        let cv = v4(tape.value(coeffs));
        let mut ov = v4m(&mut out);
        for (i, &(b, y, x)) in anchors.iter().enumerate() {
            let mut o = ov.slice_mut(s![i, 0, .., ..]);
            for j in 0..k {
                o.scaled_add(cv[[b, j, y, x]], &pv.slice(s![b, j, .., ..]));
            }
        }
    }
    tape.push_op(out, &[protos, coeffs], move |g, inp, _| {
        let pv = v4(inp[0]);
        let cv = v4(inp[1]);
        let gv = v4(g);
        let mut dp = zeros(&ps);
        let mut dc = zeros(&cs);
        {
            let mut dpv = v4m(&mut dp);
            let mut dcv = v4m(&mut dc);
            for (i, &(b, y, x)) in anchors.iter().enumerate() {
                let gi = gv.slice(s![i, 0, .., ..]);
                for j in 0..k {
                    dpv.slice_mut(s![b, j, .., ..]).scaled_add(cv[[b, j, y, x]], &gi);
                    dcv[[b, j, y, x]] += (&gi * &pv.slice(s![b, j, .., ..])).sum();
                }
            }
        }
        vec![dp, dc]
    })
}

/// Concatenate along the batch axis.
pub fn concat_batch(tape: &mut Tape, xs: &[Var]) -> Var {
    let views: Vec<_> = xs.iter().map(|&v| tape.value(v).view()).collect();
    let out = ndarray::concatenate(Axis(0), &views).expect("same trailing shapes");
    let sizes: Vec<usize> = xs.iter().map(|&v| tape.shape(v)[0]).collect();
    tape.push_op(out, xs, move |g, _, _| {
        let mut at = 0;
        sizes
            .iter()
            .map(|&n| {
                let part = g.slice_axis(Axis(0), (at..at + n).into()).to_owned();
                at += n;
                part
            })
            .collect()
    })
}
