//! Pure tensor kernels. The tape records these and calls the matching
//! `*_backward` kernels during backpropagation.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Entrywise single-input operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Exp,
    LeakyRelu(f64),
    Relu,
    Abs,
    Scale(f64),
    Offset(f64),
}

impl Unary {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Unary::Sigmoid => sigmoid(v),
            Unary::Exp => v.exp(),
            Unary::LeakyRelu(slope) => {
                if v < T::zero() {
                    v * T::from_f64(slope)
                } else {
                    v
                }
            }
            Unary::Relu => v.max(T::zero()),
            Unary::Abs => v.abs(),
            Unary::Scale(c) => v * T::from_f64(c),
            Unary::Offset(c) => v + T::from_f64(c),
        }
    }

    /// Derivative at input `x`, given the forward output `y`.
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Exp => y,
            Unary::LeakyRelu(slope) => {
                if x < T::zero() {
                    T::from_f64(slope)
                } else {
                    T::one()
                }
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Scale(c) => T::from_f64(c),
            Unary::Offset(_) => T::one(),
        }
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    // split by sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// The elementwise operation set, unary or binary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Unary(Unary),
    Add,
    Sub,
    Mul,
}

pub fn elementwise<T: Scalar>(op: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if let Elementwise::Unary(u) = op {
        return Ok(a.map(|v| u.apply(v)));
    }
    let b = b.ok_or_else(|| Error::shape("elementwise", "binary operation needs two operands"))?;
    match op {
        Elementwise::Add => a.zip_map(b, "add", |x, y| x + y),
        Elementwise::Sub => a.zip_map(b, "sub", |x, y| x - y),
        Elementwise::Mul => a.zip_map(b, "mul", |x, y| x * y),
        Elementwise::Unary(_) => unreachable!(),
    }
}

/// Row-major `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is
/// `k x n`. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; c is exclusively borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if (kh, kw) != (3, 3) {
        return Err(Error::shape("conv2d", format!("kernel must be 3x3, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("weight expects {wcin} input channels, input has {cin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {cout} output channels", bias.shape()),
        ));
    }
    Ok((b, cin, cout, h, w))
}

/// Unrolls the 3x3 neighbourhoods (zero padded) of one sample into a
/// `(cin * 9) x (h * w)` matrix.
fn im2col<T: Scalar>(src: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &src[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[(sy - 1) * w..sy * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the image.
fn col2im_add<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dst[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y + ky;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let prow = &mut plane[(sy - 1) * w..sy * w];
                    match kx {
                        0 => prow[..w - 1].iter_mut().zip(&src[1..]).for_each(|(p, &g)| *p = *p + g),
                        1 => prow.iter_mut().zip(src).for_each(|(p, &g)| *p = *p + g),
                        _ => prow[1..].iter_mut().zip(&src[..w - 1]).for_each(|(p, &g)| *p = *p + g),
                    }
                }
            }
        }
    }
}

/// 3x3 cross-correlation with zero padding of one pixel, so the spatial
/// size is preserved.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, cin, cout, h, w) = check_conv(input, weight, bias)?;
    let hw = h * w;
    let mut out = vec![T::zero(); b * cout * hw];
    if hw == 0 {
        return Tensor::new(&[b, cout, h, w], out);
    }
    let mut cols = vec![T::zero(); cin * 9 * hw];
    for n in 0..b {
        let dst = &mut out[n * cout * hw..(n + 1) * cout * hw];
        for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[co]);
        }
        if cin == 0 {
            continue;
        }
        im2col(&input.data()[n * cin * hw..(n + 1) * cin * hw], cin, h, w, &mut cols);
        matmul(cout, cin * 9, hw, weight.data(), false, &cols, false, dst, true);
    }
    Tensor::new(&[b, cout, h, w], out)
}

/// Gradients of [`conv2d`] with respect to its input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, _, _, _) = weight.dims4()?;
    if grad_out.shape() != [b, cout, h, w] {
        return Err(Error::shape("conv2d_backward", "gradient shape does not match output"));
    }
    let hw = h * w;
    let k9 = cin * 9;
    let mut gin = need_input.then(|| vec![T::zero(); b * cin * hw]);
    let mut gw = need_params.then(|| vec![T::zero(); cout * k9]);
    let mut gb = need_params.then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); k9 * hw];
    for n in 0..b {
        let g = &grad_out.data()[n * cout * hw..(n + 1) * cout * hw];
        if let (Some(gw), Some(gb)) = (gw.as_mut(), gb.as_mut()) {
            for (co, plane) in g.chunks_exact(hw).enumerate() {
                gb[co] = plane.iter().fold(gb[co], |acc, &v| acc + v);
            }
            if k9 > 0 && hw > 0 {
                im2col(&input.data()[n * cin * hw..(n + 1) * cin * hw], cin, h, w, &mut cols);
                matmul(cout, hw, k9, g, false, &cols, true, gw, true);
            }
        }
        if let Some(gin) = gin.as_mut() {
            if k9 > 0 && hw > 0 {
                matmul(k9, cout, hw, weight.data(), true, g, false, &mut cols, false);
                col2im_add(&cols, cin, h, w, &mut gin[n * cin * hw..(n + 1) * cin * hw]);
            }
        }
    }
    Ok((
        gin.map(|d| Tensor::new(&[b, cin, h, w], d)).transpose()?,
        gw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        gb.map(|d| Tensor::new(&[cout], d)).transpose()?,
    ))
}

/// Channel-wise concatenation of (B, C_i, H, W) tensors.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * total * hw);
    for n in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[n * pc * hw..(n + 1) * pc * hw]);
        }
    }
    Tensor::new(&[b, total, h, w], data)
}

/// Copies channels `[start, start + count)` out of a (B, C, H, W) tensor.
pub fn slice_channels<T: Scalar>(t: &Tensor<T>, start: usize, count: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    if start + count > c {
        return Err(Error::shape(
            "slice_channels",
            format!("channels {start}..{} out of {c}", start + count),
        ));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * count * hw);
    for n in 0..b {
        data.extend_from_slice(&t.data()[(n * c + start) * hw..(n * c + start + count) * hw]);
    }
    Tensor::new(&[b, count, h, w], data)
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("avg_pool2 needs even sides, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in t.data().chunks_exact(h * w) {
        for y in 0..oh {
            for x in 0..ow {
                let i = 2 * y * w + 2 * x;
                out.push((plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter);
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

pub fn avg_pool2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, oh, ow) = grad_out.dims4()?;
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); b * c * h * w];
    for (gplane, plane) in grad_out.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..oh {
            for x in 0..ow {
                let g = gplane[y * ow + x] * quarter;
                let i = 2 * y * w + 2 * x;
                plane[i] = g;
                plane[i + 1] = g;
                plane[i + w] = g;
                plane[i + w + 1] = g;
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Horizontal and vertical Sobel responses over the valid region. Output is
/// (B, 2C, H-2, W-2) with channel `2c` the x-gradient and `2c+1` the
/// y-gradient of input channel `c`.
pub fn sobel<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let (oh, ow) = (h - 2, w - 2);
    let two = T::from_f64(2.0);
    let mut out = Vec::with_capacity(b * 2 * c * oh * ow);
    // written as differences of opposite taps so flat regions give exact zeros
    for plane in t.data().chunks_exact(h * w) {
        let p = |y: usize, x: usize| plane[y * w + x];
        for y in 0..oh {
            for x in 0..ow {
                out.push(
                    (p(y, x + 2) - p(y, x))
                        + two * (p(y + 1, x + 2) - p(y + 1, x))
                        + (p(y + 2, x + 2) - p(y + 2, x)),
                );
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                out.push(
                    (p(y + 2, x) - p(y, x))
                        + two * (p(y + 2, x + 1) - p(y, x + 1))
                        + (p(y + 2, x + 2) - p(y, x + 2)),
                );
            }
        }
    }
    Tensor::new(&[b, 2 * c, oh, ow], out)
}

pub fn sobel_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c2, oh, ow) = grad_out.dims4()?;
    let (c, h, w) = (c2 / 2, oh + 2, ow + 2);
    let mut out = vec![T::zero(); b * c * h * w];
    for (i, plane) in out.chunks_exact_mut(h * w).enumerate() {
        for (j, kernel) in [&SOBEL_X, &SOBEL_Y].into_iter().enumerate() {
            let g = &grad_out.data()[(2 * i + j) * oh * ow..][..oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let gv = g[y * ow + x];
                    for (ky, krow) in kernel.iter().enumerate() {
                        for (kx, &k) in krow.iter().enumerate() {
                            if k != 0.0 {
                                let p = &mut plane[(y + ky) * w + x + kx];
                                *p = *p + T::from_f64(k) * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Mean of all entries, as a one-element tensor.
pub fn mean<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    if t.is_empty() {
        return Err(Error::shape("mean", "empty tensor"));
    }
    let sum = t.data().iter().fold(T::zero(), |a, &v| a + v);
    Ok(Tensor::scalar(sum / T::from_f64(t.len() as f64)))
}

/// Mean over every axis except the leading one: (B, ...) -> (B).
pub fn mean_per_sample<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let lead = *t.shape().first().ok_or_else(|| Error::shape("mean_per_sample", "empty shape"))?;
    if lead == 0 || t.is_empty() {
        return Err(Error::shape("mean_per_sample", "empty tensor"));
    }
    let n = t.len() / lead;
    let inv = T::from_f64(1.0 / n as f64);
    let data = t
        .data()
        .chunks_exact(n)
        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new(&[lead], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_single_pixel_center_weight() {
        let input = t(&[1, 1, 1, 1], &[2.0]);
        let mut w = vec![0.0; 9];
        w[4] = 3.0;
        let out = conv2d(&input, &t(&[1, 1, 3, 3], &w), &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel_is_bit_exact() {
        let input = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f32 * 0.37).sin());
        let mut w = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            w[c * 27 + c * 9 + 4] = 1.0;
        }
        let out = conv2d(&input, &t(&[3, 3, 3, 3], &w), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_zero_weights_give_zero() {
        let input = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32);
        let out = conv2d(&input, &Tensor::zeros(&[5, 2, 3, 3]), &Tensor::zeros(&[5])).unwrap();
        assert_eq!(out.shape(), &[1, 5, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let input = Tensor::from_fn(&[2, 2, 4, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let weight = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5) % 7) as f64 - 3.0);
        let bias = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d(&input, &weight, &bias).unwrap();
        let at = |n: usize, c: usize, y: isize, x: isize| -> f64 {
            if y < 0 || x < 0 || y >= 4 || x >= 5 {
                0.0
            } else {
                input.data()[((n * 2 + c) * 4 + y as usize) * 5 + x as usize]
            }
        };
        for n in 0..2 {
            for co in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        let mut acc = bias.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += weight.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * at(n, ci, y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                }
                            }
                        }
                        assert_eq!(out.data()[((n * 3 + co) * 4 + y) * 5 + x], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let err = conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
        let err = conv2d(&input, &Tensor::zeros(&[1, 2, 5, 5]), &Tensor::zeros(&[1])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor::<f32>::zeros(&[1]);
        let e = |op, a: &Tensor| elementwise(op, a, None).unwrap().item().unwrap();
        assert_eq!(e(Elementwise::Unary(Unary::Sigmoid), &z), 0.5);
        assert_eq!(e(Elementwise::Unary(Unary::Exp), &z), 1.0);
        let m1 = Tensor::scalar(-1.0f32);
        assert!((e(Elementwise::Unary(Unary::LeakyRelu(0.2)), &m1) + 0.2).abs() < 1e-7);
        assert!(elementwise(Elementwise::Add, &z, Some(&Tensor::zeros(&[2]))).is_err());
        assert!(elementwise(Elementwise::Mul, &z, None).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(Unary::Sigmoid.apply(-1000.0f32), 0.0);
        assert_eq!(Unary::Sigmoid.apply(1000.0f32), 1.0);
    }

    #[test]
    fn concat_layout() {
        let a = Tensor::from_fn(&[1, 12, 56, 56], |i| i as f32);
        let b = Tensor::from_fn(&[1, 4, 56, 56], |i| -(i as f32));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 16, 56, 56]);
        assert_eq!(slice_channels(&c, 12, 1).unwrap(), slice_channels(&b, 0, 1).unwrap());
        let empty = Tensor::zeros(&[1, 0, 56, 56]);
        assert_eq!(concat_channels(&[&a, &empty]).unwrap(), a);
        assert!(concat_channels(&[&a, &Tensor::zeros(&[1, 4, 28, 56])]).is_err());
    }

    #[test]
    fn sobel_of_constant_is_zero() {
        let c = Tensor::full(&[1, 3, 6, 6], 0.7f64);
        let s = sobel(&c).unwrap();
        assert_eq!(s.shape(), &[1, 6, 4, 4]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }
}
