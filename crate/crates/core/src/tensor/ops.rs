//! Differentiable operations. Each op validates shapes, computes its output
//! eagerly, and (when recording and any input needs gradients) pushes one
//! backward closure onto the tape.
//!
//! Convolutions operate on single samples shaped [channels, height, width];
//! batching is done by accumulating gradients over consecutive samples.

use super::{Tape, Tensor, TensorError};

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            context,
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Whether the op involving `inputs` should produce a gradient-tracking
/// output and a tape record.
fn tracking(tape: &Tape, inputs: &[&Tensor]) -> bool {
    tape.is_recording() && inputs.iter().any(|t| t.requires_grad())
}

fn fresh(shape: &[usize], data: Vec<f64>, track: bool) -> Tensor {
    let t = Tensor::new(shape, data).expect("op output shape is consistent");
    if track {
        t.set_requires_grad(true);
    }
    t
}

/// Elementwise a + b.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("add", a, b)?;
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| p + q).collect()));
    let track = tracking(tape, &[a, b]);
    let out = fresh(&a.shape(), data, track);
    if track {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            if a.requires_grad() {
                a.accumulate_grad(&og);
            }
            if b.requires_grad() {
                b.accumulate_grad(&og);
            }
        });
    }
    Ok(out)
}

/// Elementwise a - b.
pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("sub", a, b)?;
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| p - q).collect()));
    let track = tracking(tape, &[a, b]);
    let out = fresh(&a.shape(), data, track);
    if track {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            if a.requires_grad() {
                a.accumulate_grad(&og);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = og.iter().map(|v| -v).collect();
                b.accumulate_grad(&neg);
            }
        });
    }
    Ok(out)
}

/// Elementwise a * b.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("mul", a, b)?;
    let data = a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| p * q).collect()));
    let track = tracking(tape, &[a, b]);
    let out = fresh(&a.shape(), data, track);
    if track {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            if a.requires_grad() {
                let ga: Vec<f64> = b.with_data(|y| og.iter().zip(y).map(|(g, q)| g * q).collect());
                a.accumulate_grad(&ga);
            }
            if b.requires_grad() {
                let gb: Vec<f64> = a.with_data(|x| og.iter().zip(x).map(|(g, p)| g * p).collect());
                b.accumulate_grad(&gb);
            }
        });
    }
    Ok(out)
}

/// x * s for a constant s.
pub fn scale(tape: &Tape, x: &Tensor, s: f64) -> Tensor {
    let data = x.with_data(|d| d.iter().map(|v| v * s).collect());
    let track = tracking(tape, &[x]);
    let out = fresh(&x.shape(), data, track);
    if track {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            let gx: Vec<f64> = og.iter().map(|v| v * s).collect();
            x.accumulate_grad(&gx);
        });
    }
    out
}

/// Elementwise max(x, 0). The subgradient at exactly 0 is taken as 0.
pub fn relu(tape: &Tape, x: &Tensor) -> Tensor {
    let data = x.with_data(|d| d.iter().map(|v| v.max(0.0)).collect());
    let track = tracking(tape, &[x]);
    let out = fresh(&x.shape(), data, track);
    if track {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            let gx: Vec<f64> =
                x.with_data(|d| og.iter().zip(d).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect());
            x.accumulate_grad(&gx);
        });
    }
    out
}

/// Same data, new shape with equal element count.
pub fn reshape(tape: &Tape, x: &Tensor, shape: &[usize]) -> Result<Tensor, TensorError> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(TensorError::ShapeMismatch {
            context: "reshape",
            details: format!("{:?} cannot view as {shape:?}", x.shape()),
        });
    }
    let track = tracking(tape, &[x]);
    let out = fresh(shape, x.to_vec(), track);
    if track {
        let (x, o) = (x.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            x.accumulate_grad(&og);
        });
    }
    Ok(out)
}

/// Fully connected layer w x + b; x is [n_in], w is [n_out, n_in], b [n_out].
pub fn dense(tape: &Tape, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
        return Err(TensorError::ShapeMismatch {
            context: "dense",
            details: format!("x {xs:?} vs w {ws:?}"),
        });
    }
    let (n_out, n_in) = (ws[0], ws[1]);
    if let Some(bias) = b {
        if bias.shape() != vec![n_out] {
            return Err(TensorError::ShapeMismatch {
                context: "dense bias",
                details: format!("bias {:?}, expected [{n_out}]", bias.shape()),
            });
        }
    }
    let mut data = vec![0.0; n_out];
    x.with_data(|xv| {
        w.with_data(|wv| {
            for o in 0..n_out {
                let mut acc = 0.0;
                let row = &wv[o * n_in..(o + 1) * n_in];
                for (wi, xi) in row.iter().zip(xv) {
                    acc += wi * xi;
                }
                data[o] = acc;
            }
        })
    });
    if let Some(bias) = b {
        bias.with_data(|bv| {
            for (d, bi) in data.iter_mut().zip(bv) {
                *d += bi;
            }
        });
    }
    let mut inputs = vec![x, w];
    if let Some(bias) = b {
        inputs.push(bias);
    }
    let track = tracking(tape, &inputs);
    let out = fresh(&[n_out], data, track);
    if track {
        let (x, w, b, o) = (x.clone(), w.clone(), b.cloned(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            if x.requires_grad() {
                let gx: Vec<f64> = w.with_data(|wv| {
                    (0..n_in)
                        .map(|i| (0..n_out).map(|o_| og[o_] * wv[o_ * n_in + i]).sum())
                        .collect()
                });
                x.accumulate_grad(&gx);
            }
            if w.requires_grad() {
                let gw: Vec<f64> = x.with_data(|xv| {
                    let mut g = vec![0.0; n_out * n_in];
                    for o_ in 0..n_out {
                        for (i, xi) in xv.iter().enumerate() {
                            g[o_ * n_in + i] = og[o_] * xi;
                        }
                    }
                    g
                });
                w.accumulate_grad(&gw);
            }
            if let Some(bias) = &b {
                if bias.requires_grad() {
                    bias.accumulate_grad(&og);
                }
            }
        });
    }
    Ok(out)
}

fn conv_shapes(x: &Tensor, k: &Tensor) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 3 || ks.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d",
            details: format!("x {xs:?} must be [C,H,W]; k {ks:?} must be [Co,Ci,kh,kw]"),
        });
    }
    let (ci, h, w) = (xs[0], xs[1], xs[2]);
    let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kci != ci {
        return Err(TensorError::ShapeMismatch {
            context: "conv2d",
            details: format!("kernel expects {kci} input channels, x has {ci}"),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::Invalid(format!(
            "conv2d kernel must be odd and square, got {kh}x{kw}"
        )));
    }
    Ok((ci, h, w, co, kh))
}

/// 2D cross-correlation with same-size zero padding, stride 1, no bias.
/// x: [C_in, H, W], k: [C_out, C_in, s, s] with s odd; output [C_out, H, W].
pub fn conv2d(tape: &Tape, x: &Tensor, k: &Tensor) -> Result<Tensor, TensorError> {
    let (ci, h, w, co, ks) = conv_shapes(x, k)?;
    let pad = ks / 2;
    let mut data = vec![0.0; co * h * w];
    x.with_data(|xv| {
        k.with_data(|kv| {
            for oc in 0..co {
                for icn in 0..ci {
                    let kbase = ((oc * ci) + icn) * ks * ks;
                    let xbase = icn * h * w;
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut acc = data[(oc * h + oy) * w + ox];
                            for dy in 0..ks {
                                let iy = oy + dy;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for dx in 0..ks {
                                    let ix = ox + dx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    acc += kv[kbase + dy * ks + dx] * xv[xbase + iy * w + ix];
                                }
                            }
                            data[(oc * h + oy) * w + ox] = acc;
                        }
                    }
                }
            }
        })
    });
    let track = tracking(tape, &[x, k]);
    let out = fresh(&[co, h, w], data, track);
    if track {
        let (x, k, o) = (x.clone(), k.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            if x.requires_grad() {
                let gx: Vec<f64> = k.with_data(|kv| {
                    let mut g = vec![0.0; ci * h * w];
                    for oc in 0..co {
                        for icn in 0..ci {
                            let kbase = ((oc * ci) + icn) * ks * ks;
                            for oy in 0..h {
                                for ox in 0..w {
                                    let go = og[(oc * h + oy) * w + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for dy in 0..ks {
                                        let iy = oy + dy;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for dx in 0..ks {
                                            let ix = ox + dx;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            g[(icn * h + iy) * w + ix] +=
                                                go * kv[kbase + dy * ks + dx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    g
                });
                x.accumulate_grad(&gx);
            }
            if k.requires_grad() {
                let gk: Vec<f64> = x.with_data(|xv| {
                    let mut g = vec![0.0; co * ci * ks * ks];
                    for oc in 0..co {
                        for icn in 0..ci {
                            let kbase = ((oc * ci) + icn) * ks * ks;
                            let xbase = icn * h * w;
                            for oy in 0..h {
                                for ox in 0..w {
                                    let go = og[(oc * h + oy) * w + ox];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for dy in 0..ks {
                                        let iy = oy + dy;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for dx in 0..ks {
                                            let ix = ox + dx;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            g[kbase + dy * ks + dx] +=
                                                go * xv[xbase + iy * w + ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    g
                });
                k.accumulate_grad(&gk);
            }
        });
    }
    Ok(out)
}

/// 2x2 max pooling with stride 2 (floor semantics: a trailing odd row or
/// column is dropped). Ties go to the first maximum in row-major window
/// order, which keeps the backward pass deterministic.
pub fn maxpool2d(tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            context: "maxpool2d",
            details: format!("expected [C,H,W], got {xs:?}"),
        });
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(TensorError::Invalid(format!(
            "maxpool2d input {h}x{w} too small to pool"
        )));
    }
    let mut data = vec![0.0; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    x.with_data(|xv| {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    });
    let track = tracking(tape, &[x]);
    let out = fresh(&[c, oh, ow], data, track);
    if track {
        let (x, o) = (x.clone(), out.clone());
        let n_in = x.numel();
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            let mut gx = vec![0.0; n_in];
            for (oi, &ii) in argmax.iter().enumerate() {
                gx[ii] += og[oi];
            }
            x.accumulate_grad(&gx);
        });
    }
    Ok(out)
}

/// Stride-2 transposed convolution with a 2x2 kernel, upsampling
/// [C_in, H, W] to [C_out, out_h, out_w] where out_h is 2H or 2H+1 (same
/// for width). The odd-target extra row/column stays zero and is filled in
/// by subsequent convolutions.
///
/// Kernel layout: [C_in, C_out, 2, 2].
pub fn transposed_conv2d(
    tape: &Tape,
    x: &Tensor,
    k: &Tensor,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 3 || ks.len() != 4 || ks[2] != 2 || ks[3] != 2 {
        return Err(TensorError::ShapeMismatch {
            context: "transposed_conv2d",
            details: format!("x {xs:?} must be [C,H,W]; k {ks:?} must be [Ci,Co,2,2]"),
        });
    }
    let (ci, h, w) = (xs[0], xs[1], xs[2]);
    let co = ks[1];
    if ks[0] != ci {
        return Err(TensorError::ShapeMismatch {
            context: "transposed_conv2d",
            details: format!("kernel expects {} input channels, x has {ci}", ks[0]),
        });
    }
    if !(out_h == 2 * h || out_h == 2 * h + 1) || !(out_w == 2 * w || out_w == 2 * w + 1) {
        return Err(TensorError::Invalid(format!(
            "transposed_conv2d target {out_h}x{out_w} must be 2H(+1) x 2W(+1) for input {h}x{w}"
        )));
    }
    let mut data = vec![0.0; co * out_h * out_w];
    x.with_data(|xv| {
        k.with_data(|kv| {
            for icn in 0..ci {
                for oc in 0..co {
                    let kbase = ((icn * co) + oc) * 4;
                    for iy in 0..h {
                        for ix in 0..w {
                            let xval = xv[(icn * h + iy) * w + ix];
                            if xval == 0.0 {
                                continue;
                            }
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let oy = 2 * iy + dy;
                                    let ox = 2 * ix + dx;
                                    data[(oc * out_h + oy) * out_w + ox] +=
                                        xval * kv[kbase + dy * 2 + dx];
                                }
                            }
                        }
                    }
                }
            }
        })
    });
    let track = tracking(tape, &[x, k]);
    let out = fresh(&[co, out_h, out_w], data, track);
    if track {
        let (x, k, o) = (x.clone(), k.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            if x.requires_grad() {
                let gx: Vec<f64> = k.with_data(|kv| {
                    let mut g = vec![0.0; ci * h * w];
                    for icn in 0..ci {
                        for oc in 0..co {
                            let kbase = ((icn * co) + oc) * 4;
                            for iy in 0..h {
                                for ix in 0..w {
                                    let mut acc = 0.0;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            let oy = 2 * iy + dy;
                                            let ox = 2 * ix + dx;
                                            acc += og[(oc * out_h + oy) * out_w + ox]
                                                * kv[kbase + dy * 2 + dx];
                                        }
                                    }
                                    g[(icn * h + iy) * w + ix] += acc;
                                }
                            }
                        }
                    }
                    g
                });
                x.accumulate_grad(&gx);
            }
            if k.requires_grad() {
                let gk: Vec<f64> = x.with_data(|xv| {
                    let mut g = vec![0.0; ci * co * 4];
                    for icn in 0..ci {
                        for oc in 0..co {
                            let kbase = ((icn * co) + oc) * 4;
                            for iy in 0..h {
                                for ix in 0..w {
                                    let xval = xv[(icn * h + iy) * w + ix];
                                    if xval == 0.0 {
                                        continue;
                                    }
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            let oy = 2 * iy + dy;
                                            let ox = 2 * ix + dx;
                                            g[kbase + dy * 2 + dx] +=
                                                xval * og[(oc * out_h + oy) * out_w + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    g
                });
                k.accumulate_grad(&gk);
            }
        });
    }
    Ok(out)
}

/// Mean squared error over all elements: mean((a - b)^2), a rank-0 scalar.
pub fn mse(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    same_shape("mse", a, b)?;
    let n = a.numel() as f64;
    let val = a.with_data(|x| {
        b.with_data(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
    });
    let track = tracking(tape, &[a, b]);
    let out = fresh(&[], vec![val], track);
    if track {
        let (a, b, o) = (a.clone(), b.clone(), out.clone());
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            let g = og[0] * 2.0 / n;
            let diff: Vec<f64> =
                a.with_data(|x| b.with_data(|y| x.iter().zip(y).map(|(p, q)| g * (p - q)).collect()));
            if a.requires_grad() {
                a.accumulate_grad(&diff);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                b.accumulate_grad(&neg);
            }
        });
    }
    Ok(out)
}

/// Linear combination sum_i c_i t_i of same-shaped tensors.
pub fn weighted_sum(tape: &Tape, terms: &[(f64, &Tensor)]) -> Result<Tensor, TensorError> {
    let Some(((_, first), rest)) = terms.split_first() else {
        return Err(TensorError::Invalid("weighted_sum of no terms".into()));
    };
    for (_, t) in rest {
        same_shape("weighted_sum", first, t)?;
    }
    let mut data = vec![0.0; first.numel()];
    for (c, t) in terms {
        t.with_data(|tv| {
            for (d, v) in data.iter_mut().zip(tv) {
                *d += c * v;
            }
        });
    }
    let inputs: Vec<&Tensor> = terms.iter().map(|(_, t)| *t).collect();
    let track = tracking(tape, &inputs);
    let out = fresh(&first.shape(), data, track);
    if track {
        let owned: Vec<(f64, Tensor)> = terms.iter().map(|(c, t)| (*c, (*t).clone())).collect();
        let o = out.clone();
        tape.record(move || {
            let Some(og) = o.grad_snapshot() else { return };
            for (c, t) in &owned {
                if t.requires_grad() {
                    let g: Vec<f64> = og.iter().map(|v| c * v).collect();
                    t.accumulate_grad(&g);
                }
            }
        });
    }
    Ok(out)
}

/// Parameters of one residual convolution block.
///
/// `conv1` is [C_out, C_in, 3, 3], `conv2` is [C_out, C_out, 3, 3]; `skip`
/// must be a [C_out, C_in, 1, 1] projection exactly when the channel count
/// changes, and `None` otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlockParams {
    pub conv1: Tensor,
    pub conv2: Tensor,
    pub skip: Option<Tensor>,
}

impl ResidualBlockParams {
    pub fn init(rng: &mut impl rand::Rng, c_in: usize, c_out: usize) -> ResidualBlockParams {
        ResidualBlockParams {
            conv1: super::fan_in_uniform(rng, &[c_out, c_in, 3, 3], c_in * 9),
            conv2: super::fan_in_uniform(rng, &[c_out, c_out, 3, 3], c_out * 9),
            skip: (c_in != c_out)
                .then(|| super::fan_in_uniform(rng, &[c_out, c_in, 1, 1], c_in)),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut p = vec![self.conv1.clone(), self.conv2.clone()];
        if let Some(s) = &self.skip {
            p.push(s.clone());
        }
        p
    }

    fn validate(&self, c_in: usize) -> Result<usize, TensorError> {
        let s1 = self.conv1.shape();
        let s2 = self.conv2.shape();
        if s1.len() != 4 || s1[1] != c_in {
            return Err(TensorError::ShapeMismatch {
                context: "residual_block conv1",
                details: format!("{s1:?} for input channels {c_in}"),
            });
        }
        let c_out = s1[0];
        if s2 != vec![c_out, c_out, 3, 3] {
            return Err(TensorError::ShapeMismatch {
                context: "residual_block conv2",
                details: format!("{s2:?}, expected [{c_out}, {c_out}, 3, 3]"),
            });
        }
        match (&self.skip, c_in == c_out) {
            (None, true) => {}
            (Some(sk), false) => {
                if sk.shape() != vec![c_out, c_in, 1, 1] {
                    return Err(TensorError::ShapeMismatch {
                        context: "residual_block skip",
                        details: format!("{:?}, expected [{c_out}, {c_in}, 1, 1]", sk.shape()),
                    });
                }
            }
            (None, false) => {
                return Err(TensorError::Invalid(
                    "residual_block changes channels but has no skip projection".into(),
                ))
            }
            (Some(_), true) => {
                return Err(TensorError::Invalid(
                    "residual_block keeps channels; skip projection must be None".into(),
                ))
            }
        }
        Ok(c_out)
    }
}

/// conv -> relu -> conv, plus the identity (or 1x1-projected) shortcut,
/// then a final relu: y = relu(conv2(relu(conv1(x))) + skip(x)).
pub fn residual_block(
    tape: &Tape,
    x: &Tensor,
    params: &ResidualBlockParams,
) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            context: "residual_block",
            details: format!("expected [C,H,W], got {xs:?}"),
        });
    }
    params.validate(xs[0])?;
    let h = relu(tape, &conv2d(tape, x, &params.conv1)?);
    let h = conv2d(tape, &h, &params.conv2)?;
    let shortcut = match &params.skip {
        Some(proj) => conv2d(tape, x, proj)?,
        None => x.clone(),
    };
    Ok(relu(tape, &add(tape, &h, &shortcut)?))
}
