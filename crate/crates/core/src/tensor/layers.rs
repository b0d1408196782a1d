use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a parameterised layer: one tensor per parameter plus the
/// gradient with respect to the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
    pub input: Tensor,
}

const K: usize = 3;

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four fixed accumulators so the summation order does not
/// depend on the target.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output indices `o` whose tap `k` lands inside `[0, n)` (padding 1).
#[inline]
fn tap_range(k: usize, n: usize) -> std::ops::Range<usize> {
    let lo = 1usize.saturating_sub(k);
    let hi = (n + 1 - k).min(n);
    lo..hi
}

fn conv_dims(
    input: &Tensor,
    weights: &Tensor,
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    let (h, w, cin) = input.dims3(op)?;
    match weights.shape()[..] {
        [K, K, wc, cout] if wc == cin => Ok((h, w, cin, cout)),
        _ => Err(Error::shape(
            op,
            format!(
                "weights {:?} incompatible with input {:?} (want [3, 3, {cin}, Cout])",
                weights.shape(),
                input.shape()
            ),
        )),
    }
}

/// 3x3 convolution, stride 1, zero padding 1 ("same"). Layouts: input
/// `[H, W, Cin]`, weights `[3, 3, Cin, Cout]`, bias `[Cout]`.
pub fn conv2d(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, cin, cout) = conv_dims(input, weights, "conv2d")?;
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?}, expected [{cout}]", bias.shape()),
        ));
    }
    let x = input.data();
    let wd = weights.data();
    let mut out = vec![0.0; h * w * cout];
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(bias.data());
    }
    for di in 0..K {
        for dj in 0..K {
            for ci in 0..cin {
                let wrow = &wd[((di * K + dj) * cin + ci) * cout..][..cout];
                for i in tap_range(di, h) {
                    let ii = i + di - 1;
                    for j in tap_range(dj, w) {
                        let jj = j + dj - 1;
                        let xv = x[(ii * w + jj) * cin + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        axpy(&mut out[(i * w + j) * cout..][..cout], xv, wrow);
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

pub fn conv2d_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrads> {
    let mut dw = Tensor::zeros_like(weights);
    let mut db = Tensor::zeros(&[weights.shape()[3]]);
    let mut dx = Tensor::zeros_like(input);
    conv2d_backward_acc(
        input,
        weights,
        upstream,
        dw.data_mut(),
        db.data_mut(),
        dx.data_mut(),
        InputGrad::Full,
    )?;
    Ok(LayerGrads {
        weights: dw,
        bias: db,
        input: dx,
    })
}

/// What [`conv2d_backward_acc`] writes into the input gradient.
#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum InputGrad {
    Skip,
    Full,
    /// Only entries whose input is non-zero; enough when the result is
    /// immediately masked by the ReLU that produced the input.
    NonZeroOnly,
}

/// Adds the conv gradients into the given buffers.
pub(crate) fn conv2d_backward_acc(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
    mode: InputGrad,
) -> Result<()> {
    let (h, w, cin, cout) = conv_dims(input, weights, "conv2d_backward")?;
    if upstream.shape() != [h, w, cout] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream {:?}, expected [{h}, {w}, {cout}]",
                upstream.shape()
            ),
        ));
    }
    let x = input.data();
    let wd = weights.data();
    let up = upstream.data();
    for urow in up.chunks_exact(cout) {
        for (b, u) in db.iter_mut().zip(urow) {
            *b += u;
        }
    }
    for di in 0..K {
        for dj in 0..K {
            for ci in 0..cin {
                let base = ((di * K + dj) * cin + ci) * cout;
                let wrow = &wd[base..base + cout];
                let dwrow = &mut dw[base..base + cout];
                for i in tap_range(di, h) {
                    let ii = i + di - 1;
                    for j in tap_range(dj, w) {
                        let jj = j + dj - 1;
                        let xi = (ii * w + jj) * cin + ci;
                        let urow = &up[(i * w + j) * cout..][..cout];
                        let xv = x[xi];
                        if xv != 0.0 {
                            axpy(dwrow, xv, urow);
                        }
                        if mode == InputGrad::Full || (mode == InputGrad::NonZeroOnly && xv != 0.0)
                        {
                            dx[xi] += dot(wrow, urow);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes `upstream` where `input > 0`; the gradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!(
                "input {:?} vs upstream {:?}",
                input.shape(),
                upstream.shape()
            ),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Global average pooling `[H, W, C] -> [C]`.
pub fn gap(input: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.dims3("gap")?;
    let mut out = vec![0.0; c];
    for row in input.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(Tensor::vector(out))
}

pub fn gap_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match input_shape[..] {
        [h, w, c] => (h, w, c),
        _ => {
            return Err(Error::shape(
                "gap_backward",
                format!("input shape {input_shape:?}"),
            ))
        }
    };
    if upstream.shape() != [c] {
        return Err(Error::shape(
            "gap_backward",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let n = (h * w) as f64;
    let row: Vec<f64> = upstream.data().iter().map(|u| u / n).collect();
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        data.extend_from_slice(&row);
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Per-channel position (row-major spatial index) of the first maximum.
fn argmax_positions(input: &Tensor) -> Result<Vec<usize>> {
    let (_, _, c) = input.dims3("gmp")?;
    let mut best = vec![0usize; c];
    let mut best_val = input.data()[..c].to_vec();
    for (pos, row) in input.data().chunks_exact(c).enumerate().skip(1) {
        for ch in 0..c {
            if row[ch] > best_val[ch] {
                best_val[ch] = row[ch];
                best[ch] = pos;
            }
        }
    }
    Ok(best)
}

/// Global max pooling `[H, W, C] -> [C]`.
pub fn gmp(input: &Tensor) -> Result<Tensor> {
    let (_, _, c) = input.dims3("gmp")?;
    let pos = argmax_positions(input)?;
    let out = pos
        .iter()
        .enumerate()
        .map(|(ch, &p)| input.data()[p * c + ch])
        .collect();
    Ok(Tensor::vector(out))
}

/// Routes each channel's upstream value to the first maximal position in
/// row-major order.
pub fn gmp_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let (_, _, c) = input.dims3("gmp_backward")?;
    if upstream.shape() != [c] {
        return Err(Error::shape(
            "gmp_backward",
            format!("upstream {:?}", upstream.shape()),
        ));
    }
    let mut out = Tensor::zeros_like(input);
    for (ch, p) in argmax_positions(input)?.into_iter().enumerate() {
        out.data_mut()[p * c + ch] = upstream.data()[ch];
    }
    Ok(out)
}

pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.dim1("concat")?;
    b.dim1("concat")?;
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::vector(data))
}

/// Splits the upstream gradient of `concat` back into its two halves.
pub fn concat_backward(len_a: usize, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = upstream.dim1("concat_backward")?;
    if len_a == 0 || len_a >= n {
        return Err(Error::shape(
            "concat_backward",
            format!("cannot split {n} values at {len_a}"),
        ));
    }
    let (a, b) = upstream.data().split_at(len_a);
    Ok((Tensor::vector(a.to_vec()), Tensor::vector(b.to_vec())))
}

fn fc_dims(input: &Tensor, weights: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let n = input.dim1(op)?;
    match weights.shape()[..] {
        [wn, m] if wn == n => Ok((n, m)),
        _ => Err(Error::shape(
            op,
            format!(
                "weights {:?} incompatible with input [{n}]",
                weights.shape()
            ),
        )),
    }
}

/// Fully connected layer: `out = input^T W + b` with `W: [N, M]`.
pub fn fc(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, m) = fc_dims(input, weights, "fc")?;
    if bias.shape() != [m] {
        return Err(Error::shape(
            "fc",
            format!("bias {:?}, expected [{m}]", bias.shape()),
        ));
    }
    let mut out = bias.data().to_vec();
    for (&xv, wrow) in input.data().iter().zip(weights.data().chunks_exact(m)) {
        if xv != 0.0 {
            axpy(&mut out, xv, wrow);
        }
    }
    Ok(Tensor::vector(out))
}

pub fn fc_backward(input: &Tensor, weights: &Tensor, upstream: &Tensor) -> Result<LayerGrads> {
    let mut dw = Tensor::zeros_like(weights);
    let mut db = Tensor::zeros(&[weights.shape()[1]]);
    let mut dx = Tensor::zeros_like(input);
    fc_backward_acc(
        input,
        weights,
        upstream,
        dw.data_mut(),
        db.data_mut(),
        dx.data_mut(),
    )?;
    Ok(LayerGrads {
        weights: dw,
        bias: db,
        input: dx,
    })
}

pub(crate) fn fc_backward_acc(
    input: &Tensor,
    weights: &Tensor,
    upstream: &Tensor,
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) -> Result<()> {
    let (_, m) = fc_dims(input, weights, "fc_backward")?;
    if upstream.shape() != [m] {
        return Err(Error::shape(
            "fc_backward",
            format!("upstream {:?}, expected [{m}]", upstream.shape()),
        ));
    }
    let up = upstream.data();
    for (b, u) in db.iter_mut().zip(up) {
        *b += u;
    }
    for (n, (&xv, wrow)) in input
        .data()
        .iter()
        .zip(weights.data().chunks_exact(m))
        .enumerate()
    {
        if xv != 0.0 {
            axpy(&mut dw[n * m..(n + 1) * m], xv, up);
        }
        dx[n] += dot(wrow, up);
    }
    Ok(())
}
