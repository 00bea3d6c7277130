//! Layer primitives: 3D convolution, max pooling, transposed convolution,
//! ReLU, per-voxel softmax, and channel concatenation, each with an exact
//! backward pass.
//!
//! Volume tensors are order 4 with layout depth x height x width x channels.
//! All functions are pure and sequential with a fixed reduction order, so
//! results are bit-deterministic.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding mode for `conv3d_forward`. `Same` zero-pads so stride-1 output
/// keeps the input's spatial extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    None,
}

/// Cubic convolution kernel of spatial size k in {1, 2, 3} with shape
/// (k, k, k, c_in, c_out) plus one bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 5 || s[0] != s[1] || s[1] != s[2] {
            return Err(Error::shape_mismatch(
                "conv kernel weights",
                "(k, k, k, c_in, c_out)",
                s,
            ));
        }
        if !(1..=3).contains(&s[0]) {
            return Err(Error::config(format!(
                "conv kernel size must be 1, 2 or 3, got {}",
                s[0]
            )));
        }
        if bias.len() != s[4] {
            return Err(Error::shape_mismatch("conv kernel bias", s[4], bias.len()));
        }
        if !weights.all_finite() || !bias.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite {
                context: "conv kernel".into(),
            });
        }
        Ok(ConvKernel { weights, bias })
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[3]
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[4]
    }

    /// Number of scalar parameters (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradient of a scalar loss with respect to one kernel's parameters.
#[derive(Debug, Clone)]
pub struct KernelGrad {
    pub d_weights: Tensor,
    pub d_bias: Vec<f64>,
}

impl KernelGrad {
    pub fn zeros_like(kernel: &ConvKernel) -> Self {
        KernelGrad {
            d_weights: Tensor::zeros(kernel.weights.shape().to_vec()),
            d_bias: vec![0.0; kernel.bias.len()],
        }
    }
}

fn dims4(t: &Tensor, context: &str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape_mismatch(context, "(d, h, w, c)", s));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn conv_output_dims(
    (d, h, w): (usize, usize, usize),
    k: usize,
    padding: Padding,
    stride: usize,
) -> Result<(usize, usize, usize)> {
    match padding {
        Padding::Same => Ok((d, h, w)),
        Padding::None => {
            if d < k || h < k || w < k {
                return Err(Error::shape_mismatch(
                    "conv3d without padding",
                    format!("spatial extents >= kernel size {k}"),
                    (d, h, w),
                ));
            }
            Ok(((d - k) / stride + 1, (h - k) / stride + 1, (w - k) / stride + 1))
        }
    }
}

fn check_conv_args(
    input: &Tensor,
    kernel: &ConvKernel,
    padding: Padding,
    stride: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (d, h, w, c_in) = dims4(input, "conv3d input")?;
    if c_in != kernel.c_in() {
        return Err(Error::shape_mismatch(
            "conv3d channels",
            format!("input with {} channels for kernel {:?}", kernel.c_in(), kernel.weights.shape()),
            input.shape(),
        ));
    }
    if stride == 0 {
        return Err(Error::config("conv3d stride must be >= 1"));
    }
    if padding == Padding::Same && stride != 1 {
        return Err(Error::config(format!(
            "same padding requires stride 1, got {stride}"
        )));
    }
    Ok((d, h, w, c_in))
}

/// 3D convolution. With `Same` padding the border is zero-padded and the
/// spatial extents are preserved; each output voxel is the bias plus the dot
/// product of the kernel with its receptive field.
pub fn conv3d_forward(
    input: &Tensor,
    kernel: &ConvKernel,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    let (d, h, w, c_in) = check_conv_args(input, kernel, padding, stride)?;
    let k = kernel.size();
    let (od, oh, ow) = conv_output_dims((d, h, w), k, padding, stride)?;
    let c_out = kernel.c_out();
    // front pad per axis; back pad is whatever remains of k - 1
    let pad = match padding {
        Padding::Same => (k - 1) / 2,
        Padding::None => 0,
    };

    let idat = input.data();
    let wdat = kernel.weights.data();
    let mut out = vec![0.0; od * oh * ow * c_out];

    for oz in 0..od {
        let z0 = (oz * stride) as isize - pad as isize;
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let acc = &mut out[((oz * oh + oy) * ow + ox) * c_out..][..c_out];
                acc.copy_from_slice(&kernel.bias);
                for kz in 0..k {
                    let z = z0 + kz as isize;
                    if z < 0 || z >= d as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let in_base =
                                ((z as usize * h + y as usize) * w + x as usize) * c_in;
                            let w_base = ((kz * k + ky) * k + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = idat[in_base + ci];
                                let wrow = &wdat[w_base + ci * c_out..][..c_out];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![od, oh, ow, c_out], out)
}

/// Exact gradients of a scalar loss through `conv3d_forward`, given the
/// upstream gradient with respect to the convolution output.
pub fn conv3d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_out: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<(Tensor, KernelGrad)> {
    let (d, h, w, c_in) = check_conv_args(input, kernel, padding, stride)?;
    let k = kernel.size();
    let (od, oh, ow) = conv_output_dims((d, h, w), k, padding, stride)?;
    let c_out = kernel.c_out();
    let expected = [od, oh, ow, c_out];
    if grad_out.shape() != expected {
        return Err(Error::shape_mismatch(
            "conv3d grad_out",
            expected,
            grad_out.shape(),
        ));
    }
    let pad = match padding {
        Padding::Same => (k - 1) / 2,
        Padding::None => 0,
    };

    let idat = input.data();
    let wdat = kernel.weights.data();
    let gdat = grad_out.data();
    let mut d_in = vec![0.0; idat.len()];
    let mut d_w = vec![0.0; wdat.len()];
    let mut d_b = vec![0.0; c_out];

    for oz in 0..od {
        let z0 = (oz * stride) as isize - pad as isize;
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - pad as isize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pad as isize;
                let g = &gdat[((oz * oh + oy) * ow + ox) * c_out..][..c_out];
                for (b, &gv) in d_b.iter_mut().zip(g) {
                    *b += gv;
                }
                for kz in 0..k {
                    let z = z0 + kz as isize;
                    if z < 0 || z >= d as isize {
                        continue;
                    }
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let in_base =
                                ((z as usize * h + y as usize) * w + x as usize) * c_in;
                            let w_base = ((kz * k + ky) * k + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = idat[in_base + ci];
                                let wrow = &wdat[w_base + ci * c_out..][..c_out];
                                let dwrow = &mut d_w[w_base + ci * c_out..][..c_out];
                                let mut acc = 0.0;
                                for ((dw, &wv), &gv) in
                                    dwrow.iter_mut().zip(wrow).zip(g.iter())
                                {
                                    *dw += v * gv;
                                    acc += wv * gv;
                                }
                                d_in[in_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor::new(input.shape().to_vec(), d_in)?,
        KernelGrad {
            d_weights: Tensor::new(kernel.weights.shape().to_vec(), d_w)?,
            d_bias: d_b,
        },
    ))
}

/// Argmax record from a max-pooling forward pass; one flat input index per
/// output element.
#[derive(Debug, Clone)]
pub struct ArgmaxMap {
    pub input_shape: Vec<usize>,
    pub indices: Vec<usize>,
}

/// 2x2x2 max pooling with stride 2. Spatial extents must be even; the
/// returned map records the winning input index per output element (first
/// occurrence wins on ties).
pub fn maxpool3d_forward(input: &Tensor) -> Result<(Tensor, ArgmaxMap)> {
    let (d, h, w, c) = dims4(input, "maxpool3d input")?;
    for (axis, extent) in [("depth", d), ("height", h), ("width", w)] {
        if extent % 2 != 0 {
            return Err(Error::NonDivisible {
                what: "maxpool3d".into(),
                axis: axis.into(),
                extent,
                divisor: 2,
            });
        }
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let idat = input.data();
    let mut out = vec![0.0; od * oh * ow * c];
    let mut indices = vec![0usize; out.len()];

    for oz in 0..od {
        for oy in 0..oh {
            for ox in 0..ow {
                let out_base = ((oz * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for kz in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                let idx = (((2 * oz + kz) * h + 2 * oy + ky) * w
                                    + 2 * ox
                                    + kx)
                                    * c
                                    + ch;
                                if idat[idx] > best {
                                    best = idat[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out[out_base + ch] = best;
                    indices[out_base + ch] = best_idx;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![od, oh, ow, c], out)?,
        ArgmaxMap {
            input_shape: input.shape().to_vec(),
            indices,
        },
    ))
}

/// Routes the upstream gradient back to the argmax positions; all other
/// input positions receive zero, so total gradient mass is conserved.
pub fn maxpool3d_backward(argmax: &ArgmaxMap, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.indices.len() {
        return Err(Error::shape_mismatch(
            "maxpool3d grad_out",
            argmax.indices.len(),
            grad_out.len(),
        ));
    }
    let mut d_in = vec![0.0; argmax.input_shape.iter().product()];
    for (&idx, &g) in argmax.indices.iter().zip(grad_out.data()) {
        d_in[idx] += g;
    }
    Tensor::new(argmax.input_shape.clone(), d_in)
}

fn check_tconv_args(input: &Tensor, kernel: &ConvKernel) -> Result<(usize, usize, usize, usize)> {
    let (d, h, w, c_in) = dims4(input, "transposed_conv3d input")?;
    if kernel.size() != 2 {
        return Err(Error::config(format!(
            "transposed conv kernel must be 2x2x2, got size {}",
            kernel.size()
        )));
    }
    if c_in != kernel.c_in() {
        return Err(Error::shape_mismatch(
            "transposed_conv3d channels",
            format!("input with {} channels", kernel.c_in()),
            input.shape(),
        ));
    }
    Ok((d, h, w, c_in))
}

/// 2x2x2 transposed convolution with stride 2: every input voxel scatters
/// kernel-weighted contributions into its own 2x2x2 output block, exactly
/// doubling the spatial extents. The adjoint of a stride-2 convolution.
pub fn transposed_conv3d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let (d, h, w, c_in) = check_tconv_args(input, kernel)?;
    let c_out = kernel.c_out();
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let idat = input.data();
    let wdat = kernel.weights.data();
    let mut out = vec![0.0; od * oh * ow * c_out];
    for voxel in out.chunks_exact_mut(c_out) {
        voxel.copy_from_slice(&kernel.bias);
    }

    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let in_base = ((z * h + y) * w + x) * c_in;
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let out_base = (((2 * z + kz) * oh + 2 * y + ky) * ow
                                + 2 * x
                                + kx)
                                * c_out;
                            let w_base = ((kz * 2 + ky) * 2 + kx) * c_in * c_out;
                            let acc = &mut out[out_base..out_base + c_out];
                            for ci in 0..c_in {
                                let v = idat[in_base + ci];
                                let wrow = &wdat[w_base + ci * c_out..][..c_out];
                                for (a, &wv) in acc.iter_mut().zip(wrow) {
                                    *a += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![od, oh, ow, c_out], out)
}

/// Exact gradients through `transposed_conv3d_forward`.
pub fn transposed_conv3d_backward(
    input: &Tensor,
    kernel: &ConvKernel,
    grad_out: &Tensor,
) -> Result<(Tensor, KernelGrad)> {
    let (d, h, w, c_in) = check_tconv_args(input, kernel)?;
    let c_out = kernel.c_out();
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let expected = [od, oh, ow, c_out];
    if grad_out.shape() != expected {
        return Err(Error::shape_mismatch(
            "transposed_conv3d grad_out",
            expected,
            grad_out.shape(),
        ));
    }
    let idat = input.data();
    let wdat = kernel.weights.data();
    let gdat = grad_out.data();
    let mut d_in = vec![0.0; idat.len()];
    let mut d_w = vec![0.0; wdat.len()];
    let mut d_b = vec![0.0; c_out];

    for g in gdat.chunks_exact(c_out) {
        for (b, &gv) in d_b.iter_mut().zip(g) {
            *b += gv;
        }
    }
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let in_base = ((z * h + y) * w + x) * c_in;
                for kz in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            let out_base = (((2 * z + kz) * oh + 2 * y + ky) * ow
                                + 2 * x
                                + kx)
                                * c_out;
                            let w_base = ((kz * 2 + ky) * 2 + kx) * c_in * c_out;
                            let g = &gdat[out_base..out_base + c_out];
                            for ci in 0..c_in {
                                let v = idat[in_base + ci];
                                let wrow = &wdat[w_base + ci * c_out..][..c_out];
                                let dwrow = &mut d_w[w_base + ci * c_out..][..c_out];
                                let mut acc = 0.0;
                                for ((dw, &wv), &gv) in
                                    dwrow.iter_mut().zip(wrow).zip(g.iter())
                                {
                                    *dw += v * gv;
                                    acc += wv * gv;
                                }
                                d_in[in_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((
        Tensor::new(input.shape().to_vec(), d_in)?,
        KernelGrad {
            d_weights: Tensor::new(kernel.weights.shape().to_vec(), d_w)?,
            d_bias: d_b,
        },
    ))
}

/// Elementwise max(0, x).
pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape_mismatch(
            "relu_backward",
            input.shape(),
            grad_out.shape(),
        ));
    }
    Ok(Tensor::from_fn(input.shape().to_vec(), |i| {
        if input.data()[i] > 0.0 {
            grad_out.data()[i]
        } else {
            0.0
        }
    }))
}

/// Per-voxel softmax along the last (channel) axis, stabilized by
/// subtracting the per-voxel channel maximum before exponentiation.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let c = *input.shape().last().expect("tensor has at least one axis");
    if c < 2 {
        return Err(Error::config(format!(
            "softmax needs at least 2 channels, got {c}"
        )));
    }
    if !input.all_finite() {
        return Err(Error::NonFinite {
            context: "softmax input".into(),
        });
    }
    let mut out = vec![0.0; input.len()];
    for (o, logits) in out.chunks_exact_mut(c).zip(input.data().chunks_exact(c)) {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (e, &v) in o.iter_mut().zip(logits) {
            *e = (v - m).exp();
            sum += *e;
        }
        for e in o.iter_mut() {
            *e /= sum;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

/// Gradient with respect to the logits, given the softmax output `p` and the
/// upstream gradient with respect to `p`.
pub fn softmax_backward(p: &Tensor, grad_p: &Tensor) -> Result<Tensor> {
    if p.shape() != grad_p.shape() {
        return Err(Error::shape_mismatch(
            "softmax_backward",
            p.shape(),
            grad_p.shape(),
        ));
    }
    let c = *p.shape().last().expect("tensor has at least one axis");
    let mut out = vec![0.0; p.len()];
    for ((dz, pv), gv) in out
        .chunks_exact_mut(c)
        .zip(p.data().chunks_exact(c))
        .zip(grad_p.data().chunks_exact(c))
    {
        let inner: f64 = pv.iter().zip(gv).map(|(&pj, &gj)| pj * gj).sum();
        for k in 0..c {
            dz[k] = pv[k] * (gv[k] - inner);
        }
    }
    Tensor::new(p.shape().to_vec(), out)
}

/// Concatenates two volumes along the channel axis; `a`'s channels come
/// first. Spatial extents must agree.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, h, w, ca) = dims4(a, "concat lhs")?;
    let (db, hb, wb, cb) = dims4(b, "concat rhs")?;
    if (d, h, w) != (db, hb, wb) {
        return Err(Error::shape_mismatch("concat spatial extents", a.shape(), b.shape()));
    }
    let c = ca + cb;
    let mut out = vec![0.0; d * h * w * c];
    for (i, voxel) in out.chunks_exact_mut(c).enumerate() {
        voxel[..ca].copy_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        voxel[ca..].copy_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Tensor::new(vec![d, h, w, c], out)
}

/// Adjoint of `concat_channels`: splits a gradient back into the two channel
/// ranges unchanged.
pub fn split_channels(t: &Tensor, c_first: usize) -> Result<(Tensor, Tensor)> {
    let (d, h, w, c) = dims4(t, "split input")?;
    if c_first == 0 || c_first >= c {
        return Err(Error::config(format!(
            "split at {c_first} outside 1..{c}"
        )));
    }
    let cb = c - c_first;
    let mut a = vec![0.0; d * h * w * c_first];
    let mut b = vec![0.0; d * h * w * cb];
    for (i, voxel) in t.data().chunks_exact(c).enumerate() {
        a[i * c_first..(i + 1) * c_first].copy_from_slice(&voxel[..c_first]);
        b[i * cb..(i + 1) * cb].copy_from_slice(&voxel[c_first..]);
    }
    Ok((
        Tensor::new(vec![d, h, w, c_first], a)?,
        Tensor::new(vec![d, h, w, cb], b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, k: usize, c_in: usize, c_out: usize) -> ConvKernel {
        let weights = random_tensor(rng, vec![k, k, k, c_in, c_out]);
        let bias = (0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect();
        ConvKernel::new(weights, bias).unwrap()
    }

    /// Textbook quadruple-loop convolution, kept deliberately independent of
    /// the production loop order.
    fn conv3d_reference(input: &Tensor, kernel: &ConvKernel, padding: Padding) -> Tensor {
        let s = input.shape();
        let (d, h, w, c_in) = (s[0], s[1], s[2], s[3]);
        let k = kernel.size();
        let c_out = kernel.c_out();
        assert_eq!(padding, Padding::Same);
        let pad = (k - 1) / 2;
        let mut out = Tensor::zeros(vec![d, h, w, c_out]);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for co in 0..c_out {
                        let mut acc = kernel.bias[co];
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    for ci in 0..c_in {
                                        let zi = z as isize + kz as isize - pad as isize;
                                        let yi = y as isize + ky as isize - pad as isize;
                                        let xi = x as isize + kx as isize - pad as isize;
                                        if zi < 0
                                            || yi < 0
                                            || xi < 0
                                            || zi >= d as isize
                                            || yi >= h as isize
                                            || xi >= w as isize
                                        {
                                            continue;
                                        }
                                        acc += input.at(&[
                                            zi as usize,
                                            yi as usize,
                                            xi as usize,
                                            ci,
                                        ]) * kernel.weights.at(&[kz, ky, kx, ci, co]);
                                    }
                                }
                            }
                        }
                        out.set(&[z, y, x, co], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_same_padding_counts_receptive_field() {
        let input = Tensor::filled(vec![3, 3, 3, 1], 1.0);
        let kernel =
            ConvKernel::new(Tensor::filled(vec![3, 3, 3, 1, 1], 1.0), vec![0.0]).unwrap();
        let out = conv3d_forward(&input, &kernel, Padding::Same, 1).unwrap();
        assert_eq!(out.at(&[1, 1, 1, 0]), 27.0);
        assert_eq!(out.at(&[0, 0, 0, 0]), 8.0);
        assert_eq!(out.at(&[2, 2, 2, 0]), 8.0);
        assert_eq!(out.at(&[0, 1, 1, 0]), 18.0);
    }

    #[test]
    fn conv_zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, vec![4, 4, 4, 3]);
        let kernel =
            ConvKernel::new(Tensor::zeros(vec![3, 3, 3, 3, 2]), vec![0.0, 0.0]).unwrap();
        let out = conv3d_forward(&input, &kernel, Padding::Same, 1).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_1x1x1_is_per_voxel_affine() {
        let input = Tensor::from_fn(vec![2, 2, 2, 1], |i| i as f64);
        let kernel =
            ConvKernel::new(Tensor::filled(vec![1, 1, 1, 1, 1], 3.0), vec![0.5]).unwrap();
        let out = conv3d_forward(&input, &kernel, Padding::Same, 1).unwrap();
        for i in 0..8 {
            assert_eq!(out.data()[i], 3.0 * i as f64 + 0.5);
        }
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let input = Tensor::zeros(vec![2, 2, 2, 3]);
        let kernel =
            ConvKernel::new(Tensor::zeros(vec![3, 3, 3, 2, 2]), vec![0.0, 0.0]).unwrap();
        let err = conv3d_forward(&input, &kernel, Padding::Same, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "got: {msg}");
    }

    #[test]
    fn conv_matches_reference_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, c_in, c_out) in &[(1, 2, 3), (3, 2, 2), (3, 3, 1)] {
            let input = random_tensor(&mut rng, vec![4, 5, 3, c_in]);
            let kernel = random_kernel(&mut rng, k, c_in, c_out);
            let fast = conv3d_forward(&input, &kernel, Padding::Same, 1).unwrap();
            let slow = conv3d_reference(&input, &kernel, Padding::Same);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_same_padding_preserves_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &k in &[1usize, 2, 3] {
            let input = random_tensor(&mut rng, vec![5, 4, 6, 2]);
            let kernel = random_kernel(&mut rng, k, 2, 3);
            let out = conv3d_forward(&input, &kernel, Padding::Same, 1).unwrap();
            assert_eq!(&out.shape()[..3], &[5, 4, 6]);
            assert_eq!(out.shape()[3], 3);
        }
    }

    #[test]
    fn conv_backward_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_tensor(&mut rng, vec![3, 3, 3, 2]);
        let kernel = random_kernel(&mut rng, 3, 2, 2);
        let gout = Tensor::zeros(vec![3, 3, 3, 2]);
        let (d_in, d_k) = conv3d_backward(&input, &kernel, &gout, Padding::Same, 1).unwrap();
        assert!(d_in.iter().all(|&v| v == 0.0));
        assert!(d_k.d_weights.iter().all(|&v| v == 0.0));
        assert!(d_k.d_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_voxel_grad_copies_receptive_field() {
        let input = Tensor::filled(vec![3, 3, 3, 1], 1.0);
        let kernel =
            ConvKernel::new(Tensor::zeros(vec![3, 3, 3, 1, 1]), vec![0.0]).unwrap();
        let mut gout = Tensor::zeros(vec![3, 3, 3, 1]);
        gout.set(&[1, 1, 1, 0], 1.0);
        let (_, d_k) = conv3d_backward(&input, &kernel, &gout, Padding::Same, 1).unwrap();
        // center voxel sees the full all-ones receptive field
        assert!(d_k.d_weights.iter().all(|&v| v == 1.0));
        assert_eq!(d_k.d_bias[0], 1.0);
    }

    #[test]
    fn maxpool_block_of_1_to_8_picks_8() {
        let input = Tensor::from_fn(vec![2, 2, 2, 1], |i| (i + 1) as f64);
        let (out, map) = maxpool3d_forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data()[0], 8.0);
        assert_eq!(map.indices[0], 7);
    }

    #[test]
    fn maxpool_constant_input_stays_constant() {
        let input = Tensor::filled(vec![4, 4, 4, 2], 2.5);
        let (out, _) = maxpool3d_forward(&input).unwrap();
        assert!(out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_odd_extent_names_axis() {
        let input = Tensor::zeros(vec![4, 3, 4, 1]);
        let err = maxpool3d_forward(&input).unwrap_err();
        assert!(err.to_string().contains("height"), "got: {err}");
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = random_tensor(&mut rng, vec![4, 4, 4, 3]);
        let (out, map) = maxpool3d_forward(&input).unwrap();
        let gout = random_tensor(&mut rng, out.shape().to_vec());
        let d_in = maxpool3d_backward(&map, &gout).unwrap();
        assert!((d_in.sum() - gout.sum()).abs() < 1e-12);
        // gradient lands only on argmax positions
        let nonzero = d_in.iter().filter(|&&v| v != 0.0).count();
        assert!(nonzero <= map.indices.len());
    }

    #[test]
    fn tconv_single_voxel_scatters_value() {
        let input = Tensor::filled(vec![1, 1, 1, 1], 3.5);
        let kernel =
            ConvKernel::new(Tensor::filled(vec![2, 2, 2, 1, 1], 1.0), vec![0.0]).unwrap();
        let out = transposed_conv3d_forward(&input, &kernel).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2, 1]);
        assert!(out.iter().all(|&v| v == 3.5));
    }

    #[test]
    fn tconv_zero_kernel_leaves_bias() {
        let input = Tensor::filled(vec![2, 2, 2, 2], 1.0);
        let kernel =
            ConvKernel::new(Tensor::zeros(vec![2, 2, 2, 2, 3]), vec![0.1, 0.2, 0.3]).unwrap();
        let out = transposed_conv3d_forward(&input, &kernel).unwrap();
        for voxel in out.data().chunks_exact(3) {
            assert_eq!(voxel, &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn tconv_doubles_spatial_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = random_tensor(&mut rng, vec![2, 3, 4, 2]);
        let kernel = random_kernel(&mut rng, 2, 2, 5);
        let out = transposed_conv3d_forward(&input, &kernel).unwrap();
        assert_eq!(out.shape(), &[4, 6, 8, 5]);
    }

    #[test]
    fn tconv_is_adjoint_of_stride2_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // single-channel: same kernel on both sides
        let x = random_tensor(&mut rng, vec![4, 4, 4, 1]);
        let y = random_tensor(&mut rng, vec![2, 2, 2, 1]);
        let mut kernel = random_kernel(&mut rng, 2, 1, 1);
        kernel.bias = vec![0.0];
        let cx = conv3d_forward(&x, &kernel, Padding::None, 2).unwrap();
        let ty = transposed_conv3d_forward(&y, &kernel).unwrap();
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");

        // multi-channel: transpose the channel axes of the kernel
        let x = random_tensor(&mut rng, vec![4, 6, 4, 3]);
        let y = random_tensor(&mut rng, vec![2, 3, 2, 2]);
        let w = random_tensor(&mut rng, vec![2, 2, 2, 3, 2]);
        let kernel = ConvKernel::new(w.clone(), vec![0.0, 0.0]).unwrap();
        let mut wt = Tensor::zeros(vec![2, 2, 2, 2, 3]);
        for kz in 0..2 {
            for ky in 0..2 {
                for kx in 0..2 {
                    for ci in 0..3 {
                        for co in 0..2 {
                            wt.set(&[kz, ky, kx, co, ci], w.at(&[kz, ky, kx, ci, co]));
                        }
                    }
                }
            }
        }
        let kernel_t = ConvKernel::new(wt, vec![0.0; 3]).unwrap();
        let cx = conv3d_forward(&x, &kernel, Padding::None, 2).unwrap();
        let ty = transposed_conv3d_forward(&y, &kernel_t).unwrap();
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn relu_clamps_negative_and_routes_gradient() {
        let input = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let out = relu_forward(&input);
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let gout = Tensor::filled(vec![3], 1.0);
        let din = relu_backward(&input, &gout).unwrap();
        assert_eq!(din.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_dead() {
        let input = Tensor::filled(vec![2, 2], -3.0);
        assert!(relu_forward(&input).iter().all(|&v| v == 0.0));
        let gout = Tensor::filled(vec![2, 2], 5.0);
        assert!(relu_backward(&input, &gout).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_symmetric_logits_give_half() {
        let input = Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let p = softmax_channels(&input).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_known_value() {
        let input = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let p = softmax_channels(&input).unwrap();
        assert!((p.data()[0] - 0.73106).abs() < 1e-5);
        assert!((p.data()[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = random_tensor(&mut rng, vec![2, 2, 2, 2]);
        let shifted = logits.map(|v| v + 123.456);
        let p1 = softmax_channels(&logits).unwrap();
        let p2 = softmax_channels(&shifted).unwrap();
        for (a, b) in p1.iter().zip(p2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for voxel in p1.data().chunks_exact(2) {
            let s: f64 = voxel.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(voxel.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let input = Tensor::new(vec![1, 1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            softmax_channels(&input),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn concat_sums_channels_and_splits_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = random_tensor(&mut rng, vec![2, 2, 2, 2]);
        let b = random_tensor(&mut rng, vec![2, 2, 2, 3]);
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 2, 2, 5]);
        let (ra, rb) = split_channels(&cat, 2).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }

    #[test]
    fn concat_spatial_mismatch_is_error() {
        let a = Tensor::zeros(vec![2, 2, 2, 1]);
        let b = Tensor::zeros(vec![2, 2, 4, 1]);
        assert!(concat_channels(&a, &b).is_err());
    }
}
