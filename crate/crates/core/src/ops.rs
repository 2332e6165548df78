//! Forward passes and analytic backward passes for every primitive the two
//! streams are built from: 3D convolution, 3D max pooling, the affine head,
//! relu, per-slice spatial softmax, KL divergence, and cross-entropy.
//!
//! Backpropagation is a set of explicit per-layer backward functions over a
//! recorded forward pass; there is no general tape. Every backward here is
//! validated against central finite differences (see `gradcheck`).

use crate::error::{Error, Result};
use crate::tensor::{Dims4, Scalar, Tensor4};

/// Floor applied to probabilities before logs in the KL term.
pub const KL_EPSILON: f64 = 1e-8;
/// A per-slice distribution may deviate from unit mass by at most this much.
pub const KL_NORMALIZATION_TOL: f64 = 1e-4;

/// Kernel dims for [`conv3d`]: C_out x C_in x kD x kH x kW.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelDims {
    pub c_out: usize,
    pub c_in: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl KernelDims {
    pub fn len(&self) -> usize {
        self.c_out * self.c_in * self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline(always)]
    fn index(&self, oc: usize, ic: usize, kd: usize, kh: usize, kw: usize) -> usize {
        (((oc * self.c_in + ic) * self.d + kd) * self.h + kh) * self.w + kw
    }
}

/// Stride/padding triple over (D, H, W).
pub type Triple = (usize, usize, usize);

fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::Config(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv3d_output_dims(input: Dims4, kd: KernelDims, stride: Triple, pad: Triple) -> Result<Dims4> {
    if input.channels != kd.c_in {
        return Err(Error::Config(format!(
            "conv3d input has {} channels but kernel expects {}",
            input.channels, kd.c_in
        )));
    }
    Ok(Dims4::new(
        conv_out_extent(input.frames, kd.d, stride.0, pad.0)?,
        kd.c_out,
        conv_out_extent(input.height, kd.h, stride.1, pad.1)?,
        conv_out_extent(input.width, kd.w, stride.2, pad.2)?,
    ))
}

/// Output column interval [lo, hi) for kernel tap `kx` such that every read
/// `ow * stride + kx - pad` lands inside [0, extent).
#[inline(always)]
fn col_range(kx: usize, stride: usize, pad: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx + stride - 1) / stride };
    let hi = if extent + pad > kx {
        (((extent + pad - kx - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(out_extent), hi.max(lo.min(out_extent)))
}

/// Cross-correlation over (D, H, W) with zero padding. The inner loop runs
/// along output rows so the width dimension reduces to contiguous
/// multiply-accumulates.
pub fn conv3d<S: Scalar>(
    input: &Tensor4<S>,
    weights: &[S],
    kd: KernelDims,
    bias: &[S],
    stride: Triple,
    pad: Triple,
) -> Result<Tensor4<S>> {
    if weights.len() != kd.len() {
        return Err(Error::Config(format!(
            "conv3d weights length {} does not match kernel dims {kd:?}",
            weights.len()
        )));
    }
    if bias.len() != kd.c_out {
        return Err(Error::Config(format!(
            "conv3d bias length {} does not match c_out {}",
            bias.len(),
            kd.c_out
        )));
    }
    let idm = input.dims();
    let out_dims = conv3d_output_dims(idm, kd, stride, pad)?;
    let mut out = Tensor4::zeros(out_dims);
    let ow_n = out_dims.width;

    let x = input.data();
    for od in 0..out_dims.frames {
        let (kd_lo, kd_hi) = tap_range(od * stride.0, kd.d, pad.0, idm.frames);
        for oc in 0..kd.c_out {
            for oh in 0..out_dims.height {
                let (kh_lo, kh_hi) = tap_range(oh * stride.1, kd.h, pad.1, idm.height);
                let orow_start = out_dims.index(od, oc, oh, 0);
                let out_row = &mut out.data_mut()[orow_start..orow_start + ow_n];
                out_row.iter_mut().for_each(|v| *v = bias[oc]);
                for ic in 0..kd.c_in {
                    for kz in kd_lo..kd_hi {
                        let id = od * stride.0 + kz - pad.0;
                        for ky in kh_lo..kh_hi {
                            let ih = oh * stride.1 + ky - pad.1;
                            let xrow_start = idm.index(id, ic, ih, 0);
                            let xrow = &x[xrow_start..xrow_start + idm.width];
                            let wrow_start = kd.index(oc, ic, kz, ky, 0);
                            let wrow = &weights[wrow_start..wrow_start + kd.w];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let (lo, hi) = col_range(kx, stride.2, pad.2, idm.width, ow_n);
                                if lo >= hi {
                                    continue;
                                }
                                let base = lo * stride.2 + kx - pad.2;
                                if stride.2 == 1 {
                                    for (o, &xv) in
                                        out_row[lo..hi].iter_mut().zip(xrow[base..].iter())
                                    {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (i, o) in out_row[lo..hi].iter_mut().enumerate() {
                                        *o += wv * xrow[base + i * stride.2];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel tap interval [lo, hi) that lands inside the unpadded input.
#[inline(always)]
fn tap_range(origin: usize, kernel: usize, pad: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(origin);
    let hi = kernel.min(extent + pad - origin);
    (lo, hi.max(lo))
}

/// Cotangents of conv3d for input, weights, and bias.
pub struct Conv3dGrads<S> {
    pub input: Tensor4<S>,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

pub fn conv3d_backward<S: Scalar>(
    input: &Tensor4<S>,
    weights: &[S],
    kd: KernelDims,
    stride: Triple,
    pad: Triple,
    grad_out: &Tensor4<S>,
) -> Result<Conv3dGrads<S>> {
    let idm = input.dims();
    let out_dims = conv3d_output_dims(idm, kd, stride, pad)?;
    if grad_out.dims() != out_dims {
        return Err(Error::Config(format!(
            "conv3d_backward grad dims {} do not match output dims {out_dims}",
            grad_out.dims()
        )));
    }
    let mut gi = Tensor4::zeros(idm);
    let mut gw = vec![S::zero(); kd.len()];
    let mut gb = vec![S::zero(); kd.c_out];
    let ow_n = out_dims.width;

    let x = input.data();
    let g = grad_out.data();
    for od in 0..out_dims.frames {
        let (kd_lo, kd_hi) = tap_range(od * stride.0, kd.d, pad.0, idm.frames);
        for oc in 0..kd.c_out {
            for oh in 0..out_dims.height {
                let (kh_lo, kh_hi) = tap_range(oh * stride.1, kd.h, pad.1, idm.height);
                let grow_start = out_dims.index(od, oc, oh, 0);
                let grow = &g[grow_start..grow_start + ow_n];
                gb[oc] += grow.iter().cloned().sum::<S>();
                for ic in 0..kd.c_in {
                    for kz in kd_lo..kd_hi {
                        let id = od * stride.0 + kz - pad.0;
                        for ky in kh_lo..kh_hi {
                            let ih = oh * stride.1 + ky - pad.1;
                            let xrow_start = idm.index(id, ic, ih, 0);
                            let wrow_start = kd.index(oc, ic, kz, ky, 0);
                            for kx in 0..kd.w {
                                let (lo, hi) = col_range(kx, stride.2, pad.2, idm.width, ow_n);
                                if lo >= hi {
                                    continue;
                                }
                                let base = xrow_start + lo * stride.2 + kx - pad.2;
                                let wv = weights[wrow_start + kx];
                                if stride.2 == 1 {
                                    let xrow = &x[base..base + (hi - lo)];
                                    let girow = &mut gi.data_mut()[base..base + (hi - lo)];
                                    let mut wg = S::zero();
                                    for ((gv, &go), &xv) in
                                        girow.iter_mut().zip(grow[lo..hi].iter()).zip(xrow.iter())
                                    {
                                        wg += go * xv;
                                        *gv += go * wv;
                                    }
                                    gw[wrow_start + kx] += wg;
                                } else {
                                    let mut wg = S::zero();
                                    for (i, &go) in grow[lo..hi].iter().enumerate() {
                                        let xi = base + i * stride.2;
                                        wg += go * x[xi];
                                        gi.data_mut()[xi] += go * wv;
                                    }
                                    gw[wrow_start + kx] += wg;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Conv3dGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

/// Max pooling output plus the flat input index of each window's argmax.
pub struct MaxPool3d<S> {
    pub output: Tensor4<S>,
    pub argmax: Vec<usize>,
}

/// Per-window maximum over (D, H, W); ties broken by first index in scan
/// order so results are deterministic.
pub fn maxpool3d<S: Scalar>(input: &Tensor4<S>, window: Triple, stride: Triple) -> Result<MaxPool3d<S>> {
    let idm = input.dims();
    if window.0 > idm.frames || window.1 > idm.height || window.2 > idm.width {
        return Err(Error::Config(format!(
            "maxpool window {window:?} larger than input dims {idm}"
        )));
    }
    if window.0 == 0 || window.1 == 0 || window.2 == 0 {
        return Err(Error::Config("maxpool window must be >= 1".into()));
    }
    if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
        return Err(Error::Config("maxpool stride must be >= 1".into()));
    }
    let out_dims = Dims4::new(
        (idm.frames - window.0) / stride.0 + 1,
        idm.channels,
        (idm.height - window.1) / stride.1 + 1,
        (idm.width - window.2) / stride.2 + 1,
    );
    let mut output = Tensor4::zeros(out_dims);
    let mut argmax = vec![0usize; out_dims.len()];
    for od in 0..out_dims.frames {
        for c in 0..idm.channels {
            for oh in 0..out_dims.height {
                for ow in 0..out_dims.width {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for zd in 0..window.0 {
                        for zh in 0..window.1 {
                            for zw in 0..window.2 {
                                let idx = idm.index(
                                    od * stride.0 + zd,
                                    c,
                                    oh * stride.1 + zh,
                                    ow * stride.2 + zw,
                                );
                                let v = input.data()[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = out_dims.index(od, c, oh, ow);
                    output.data_mut()[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
    }
    Ok(MaxPool3d { output, argmax })
}

/// Routes each output cotangent to its window's argmax cell.
pub fn maxpool3d_backward<S: Scalar>(
    input_dims: Dims4,
    argmax: &[usize],
    grad_out: &Tensor4<S>,
) -> Tensor4<S> {
    let mut gi = Tensor4::zeros(input_dims);
    for (o, &src) in argmax.iter().enumerate() {
        gi.data_mut()[src] += grad_out.data()[o];
    }
    gi
}

/// Affine map: out = W x + b with W stored row-major (out_len x in_len).
pub fn dense<S: Scalar>(input: &[S], weights: &[S], bias: &[S]) -> Result<Vec<S>> {
    let out_len = bias.len();
    if out_len == 0 || weights.len() != out_len * input.len() {
        return Err(Error::Config(format!(
            "dense shape mismatch: {} weights for {} inputs and {} outputs",
            weights.len(),
            input.len(),
            out_len
        )));
    }
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let row = &weights[k * input.len()..(k + 1) * input.len()];
        let mut acc = bias[k];
        for (w, x) in row.iter().zip(input.iter()) {
            acc += *w * *x;
        }
        out.push(acc);
    }
    Ok(out)
}

pub struct DenseGrads<S> {
    pub input: Vec<S>,
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

pub fn dense_backward<S: Scalar>(input: &[S], weights: &[S], grad_out: &[S]) -> DenseGrads<S> {
    let n = input.len();
    let mut gi = vec![S::zero(); n];
    let mut gw = vec![S::zero(); weights.len()];
    let gb = grad_out.to_vec();
    for (k, &go) in grad_out.iter().enumerate() {
        for j in 0..n {
            gw[k * n + j] += go * input[j];
            gi[j] += go * weights[k * n + j];
        }
    }
    DenseGrads {
        input: gi,
        weights: gw,
        bias: gb,
    }
}

pub fn relu<S: Scalar>(input: &Tensor4<S>) -> Tensor4<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward<S: Scalar>(input: &Tensor4<S>, grad_out: &Tensor4<S>) -> Tensor4<S> {
    debug_assert_eq!(input.dims(), grad_out.dims());
    let mut gi = Tensor4::zeros(input.dims());
    for ((g, &x), &go) in gi
        .data_mut()
        .iter_mut()
        .zip(input.data().iter())
        .zip(grad_out.data().iter())
    {
        if x > S::zero() {
            *g = go;
        }
    }
    gi
}

/// Normalizes each (frame, channel) slice into a distribution over H x W,
/// stabilized by max subtraction. Every output entry is strictly positive
/// and each slice sums to 1.
pub fn spatial_softmax<S: Scalar>(input: &Tensor4<S>) -> Result<Tensor4<S>> {
    input.validate_finite("spatial_softmax input")?;
    let dims = input.dims();
    let mut out = Tensor4::zeros(dims);
    for d in 0..dims.frames {
        for c in 0..dims.channels {
            let src = input.slice(d, c);
            let m = src.iter().cloned().fold(S::neg_infinity(), S::max);
            let dst = out.slice_mut(d, c);
            let mut sum = S::zero();
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                let e = (v - m).exp();
                *o = e;
                sum += e;
            }
            for o in dst.iter_mut() {
                *o /= sum;
            }
        }
    }
    Ok(out)
}

/// Backward through [`spatial_softmax`] given the forward output.
pub fn spatial_softmax_backward<S: Scalar>(output: &Tensor4<S>, grad_out: &Tensor4<S>) -> Tensor4<S> {
    debug_assert_eq!(output.dims(), grad_out.dims());
    let dims = output.dims();
    let mut gi = Tensor4::zeros(dims);
    for d in 0..dims.frames {
        for c in 0..dims.channels {
            let y = output.slice(d, c);
            let g = grad_out.slice(d, c);
            let dot: S = y.iter().zip(g.iter()).map(|(&a, &b)| a * b).sum();
            let dst = gi.slice_mut(d, c);
            for ((o, &yi), &gi_) in dst.iter_mut().zip(y.iter()).zip(g.iter()) {
                *o = yi * (gi_ - dot);
            }
        }
    }
    gi
}

fn check_normalized<S: Scalar>(t: &Tensor4<S>, what: &str) -> Result<()> {
    let dims = t.dims();
    for d in 0..dims.frames {
        for c in 0..dims.channels {
            let sum: f64 = t.slice(d, c).iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > KL_NORMALIZATION_TOL {
                return Err(Error::Contract(format!(
                    "{what} slice (frame {d}, channel {c}) sums to {sum}, not 1"
                )));
            }
        }
    }
    Ok(())
}

/// KL divergence between per-slice distributions, averaged over slices:
/// sum_slices sum p * (log p - log q) / n_slices. Inputs are floored at
/// [`KL_EPSILON`] before logs. Gradient flows into `q` only (the reference
/// side is frozen).
pub fn kl_divergence<S: Scalar>(p_ref: &Tensor4<S>, q: &Tensor4<S>) -> Result<S> {
    if p_ref.dims() != q.dims() {
        return Err(Error::Contract(format!(
            "kl_divergence dims mismatch: {} vs {}",
            p_ref.dims(),
            q.dims()
        )));
    }
    check_normalized(p_ref, "kl reference")?;
    check_normalized(q, "kl candidate")?;
    let eps = S::from_f64(KL_EPSILON);
    let dims = p_ref.dims();
    let n_slices = S::from_f64((dims.frames * dims.channels) as f64);
    let mut total = S::zero();
    for (&p, &qv) in p_ref.data().iter().zip(q.data().iter()) {
        let pf = p.max(eps);
        let qf = qv.max(eps);
        total += pf * (pf.ln() - qf.ln());
    }
    Ok(total / n_slices)
}

/// d KL / d q, with the floored q in the denominator everywhere. Using the
/// clamped denominator below the floor (instead of a zero subgradient) keeps
/// the composed softmax -> KL gradient bounded at (q - p) / n_slices; a zero
/// there unbalances the softmax backward and blows up where the candidate
/// assigns vanishing mass.
pub fn kl_divergence_backward<S: Scalar>(p_ref: &Tensor4<S>, q: &Tensor4<S>) -> Tensor4<S> {
    debug_assert_eq!(p_ref.dims(), q.dims());
    let eps = S::from_f64(KL_EPSILON);
    let dims = p_ref.dims();
    let n_slices = S::from_f64((dims.frames * dims.channels) as f64);
    let mut gq = Tensor4::zeros(dims);
    for ((g, &p), &qv) in gq
        .data_mut()
        .iter_mut()
        .zip(p_ref.data().iter())
        .zip(q.data().iter())
    {
        *g = -(p.max(eps) / qv.max(eps)) / n_slices;
    }
    gq
}

/// Softmax + negative log likelihood of the true class.
pub fn cross_entropy<S: Scalar>(logits: &[S], label: usize, class_count: usize) -> Result<S> {
    if logits.len() != class_count {
        return Err(Error::Config(format!(
            "cross_entropy expected {class_count} logits, got {}",
            logits.len()
        )));
    }
    if label >= class_count {
        return Err(Error::Input(format!(
            "label {label} out of range for {class_count} classes"
        )));
    }
    let m = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<S>().ln();
    Ok(lse - (logits[label] - m))
}

/// Gradient softmax(logits) - one_hot(label); sums to zero across classes.
pub fn cross_entropy_backward<S: Scalar>(logits: &[S], label: usize) -> Vec<S> {
    let m = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.iter()
        .enumerate()
        .map(|(k, &e)| {
            let p = e / sum;
            if k == label {
                p - S::one()
            } else {
                p
            }
        })
        .collect()
}

/// Softmax of a logit vector (used by inference and reporting).
pub fn softmax_vec<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent brute-force convolution oracle: iterates the definition
    /// directly over a padded copy of the input.
    fn conv3d_oracle(
        input: &Tensor4<f64>,
        weights: &[f64],
        kd: KernelDims,
        bias: &[f64],
        stride: Triple,
        pad: Triple,
    ) -> Tensor4<f64> {
        let idm = input.dims();
        let padded_dims = Dims4::new(
            idm.frames + 2 * pad.0,
            idm.channels,
            idm.height + 2 * pad.1,
            idm.width + 2 * pad.2,
        );
        let mut padded = Tensor4::zeros(padded_dims);
        for d in 0..idm.frames {
            for c in 0..idm.channels {
                for h in 0..idm.height {
                    for w in 0..idm.width {
                        *padded.at_mut(d + pad.0, c, h + pad.1, w + pad.2) = input.at(d, c, h, w);
                    }
                }
            }
        }
        let od = Dims4::new(
            (padded_dims.frames - kd.d) / stride.0 + 1,
            kd.c_out,
            (padded_dims.height - kd.h) / stride.1 + 1,
            (padded_dims.width - kd.w) / stride.2 + 1,
        );
        Tensor4::from_fn(od, |d, oc, h, w| {
            let mut acc = bias[oc];
            for ic in 0..kd.c_in {
                for kz in 0..kd.d {
                    for ky in 0..kd.h {
                        for kx in 0..kd.w {
                            acc += padded.at(d * stride.0 + kz, ic, h * stride.1 + ky, w * stride.2 + kx)
                                * weights[(((oc * kd.c_in + ic) * kd.d + kz) * kd.h + ky) * kd.w + kx];
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo_random_tensor(dims: Dims4, seed: u64) -> Tensor4<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Tensor4::from_fn(dims, |_, _, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn conv3d_identity_kernel_is_identity() {
        let input = pseudo_random_tensor(Dims4::new(2, 3, 4, 4), 7);
        let kd = KernelDims { c_out: 3, c_in: 3, d: 1, h: 1, w: 1 };
        // 1x1x1 kernel with identity channel mixing.
        let mut weights = vec![0.0; kd.len()];
        for c in 0..3 {
            weights[c * 3 + c] = 1.0;
        }
        let out = conv3d(&input, &weights, kd, &[0.0; 3], (1, 1, 1), (0, 0, 0)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv3d_all_ones_padded_matches_overlap_count() {
        // All-ones 3x3x3 kernel on an all-ones 1x1x3x3 input with padding 1:
        // the center output counts the in-bounds taps: 1 * 3 * 3 = 9 = 27/3.
        let input = Tensor4::filled(Dims4::new(1, 1, 3, 3), 1.0_f64);
        let kd = KernelDims { c_out: 1, c_in: 1, d: 3, h: 3, w: 3 };
        let weights = vec![1.0; kd.len()];
        let out = conv3d(&input, &weights, kd, &[0.0], (1, 1, 1), (1, 1, 1)).unwrap();
        assert_eq!(out.dims(), Dims4::new(1, 1, 3, 3));
        assert_eq!(out.at(0, 0, 1, 1), 27.0 * (1.0 / 3.0));
        let oracle = conv3d_oracle(&input, &weights, kd, &[0.0], (1, 1, 1), (1, 1, 1));
        assert_eq!(out, oracle);
    }

    #[test]
    fn conv3d_matches_oracle_on_random_cases() {
        for (seed, stride, pad) in [
            (1u64, (1, 1, 1), (0, 0, 0)),
            (2, (1, 1, 1), (1, 1, 1)),
            (3, (1, 2, 2), (1, 1, 1)),
            (4, (2, 1, 2), (0, 1, 0)),
        ] {
            let input = pseudo_random_tensor(Dims4::new(3, 2, 5, 6), seed);
            let kd = KernelDims { c_out: 4, c_in: 2, d: 2, h: 3, w: 3 };
            let weights = pseudo_random_tensor(Dims4::new(1, 1, 1, kd.len()), seed + 100)
                .data()
                .to_vec();
            let bias = vec![0.3, -0.1, 0.0, 0.7];
            let got = conv3d(&input, &weights, kd, &bias, stride, pad).unwrap();
            let want = conv3d_oracle(&input, &weights, kd, &bias, stride, pad);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.data().iter().zip(want.data().iter()) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv3d_rejects_channel_mismatch() {
        let input = Tensor4::zeros(Dims4::new(1, 2, 3, 3));
        let kd = KernelDims { c_out: 1, c_in: 3, d: 1, h: 1, w: 1 };
        let err = conv3d(&input, &vec![0.0_f64; kd.len()], kd, &[0.0], (1, 1, 1), (0, 0, 0));
        assert!(err.is_err());
    }

    #[test]
    fn maxpool_global_window_yields_global_max() {
        let input = pseudo_random_tensor(Dims4::new(2, 2, 3, 3), 11);
        let pooled = maxpool3d(&input, (2, 3, 3), (2, 3, 3)).unwrap();
        assert_eq!(pooled.output.dims(), Dims4::new(1, 2, 1, 1));
        for c in 0..2 {
            let want = (0..2)
                .flat_map(|d| input.slice(d, c).to_vec())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(pooled.output.at(0, c, 0, 0), want);
        }
    }

    #[test]
    fn maxpool_ramp_takes_last_element_of_each_window() {
        // Strictly increasing ramp: the max of each window is its last cell
        // in scan order (direct enumeration over window contents).
        let dims = Dims4::new(2, 1, 4, 4);
        let input = Tensor4::from_fn(dims, |d, _, h, w| (d * 16 + h * 4 + w) as f64);
        let pooled = maxpool3d(&input, (1, 2, 2), (1, 2, 2)).unwrap();
        for od in 0..2 {
            for oh in 0..2 {
                for ow in 0..2 {
                    let want = input.at(od, 0, oh * 2 + 1, ow * 2 + 1);
                    assert_eq!(pooled.output.at(od, 0, oh, ow), want);
                }
            }
        }
    }

    #[test]
    fn maxpool_backward_routes_to_argmax_only() {
        let dims = Dims4::new(1, 1, 2, 2);
        let input = Tensor4::from_vec(dims, vec![0.1, 0.9, 0.4, 0.2]).unwrap();
        let pooled = maxpool3d(&input, (1, 2, 2), (1, 2, 2)).unwrap();
        let grad_out = Tensor4::filled(pooled.output.dims(), 2.5_f64);
        let gi = maxpool3d_backward(dims, &pooled.argmax, &grad_out);
        assert_eq!(gi.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_window_larger_than_input_rejected() {
        let input = Tensor4::<f64>::zeros(Dims4::new(1, 1, 2, 2));
        assert!(maxpool3d(&input, (1, 3, 2), (1, 1, 1)).is_err());
    }

    #[test]
    fn maxpool_tie_takes_first_in_scan_order() {
        let dims = Dims4::new(1, 1, 1, 4);
        let input = Tensor4::from_vec(dims, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let pooled = maxpool3d(&input, (1, 1, 2), (1, 1, 2)).unwrap();
        assert_eq!(pooled.argmax, vec![0, 2]);
    }

    #[test]
    fn dense_identity_and_zero_weights() {
        let x = vec![1.0, -2.0, 3.0];
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(dense(&x, &eye, &[0.0, 0.0, 0.0]).unwrap(), x);
        let zeros = vec![0.0; 6];
        assert_eq!(dense(&x, &zeros, &[0.4, -0.6]).unwrap(), vec![0.4, -0.6]);
    }

    #[test]
    fn relu_clamps_negative() {
        let t = Tensor4::from_vec(Dims4::new(1, 1, 1, 4), vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0, 0.0]);
        let neg = Tensor4::filled(Dims4::new(1, 2, 2, 2), -3.0_f64);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor4::filled(Dims4::new(1, 2, 2, 2), 3.0_f64);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn spatial_softmax_constant_slice_is_uniform() {
        let t = Tensor4::filled(Dims4::new(2, 3, 4, 5), 7.25_f64);
        let y = spatial_softmax(&t).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_softmax_large_logit_takes_nearly_all_mass() {
        let mut t = Tensor4::zeros(Dims4::new(1, 1, 2, 2));
        *t.at_mut(0, 0, 1, 0) = 50.0;
        let y = spatial_softmax(&t).unwrap();
        assert!(y.at(0, 0, 1, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn spatial_softmax_slices_sum_to_one_and_positive() {
        let t = pseudo_random_tensor(Dims4::new(3, 2, 4, 4), 21).map(|v| v * 10.0);
        let y = spatial_softmax(&t).unwrap();
        let dims = y.dims();
        for d in 0..dims.frames {
            for c in 0..dims.channels {
                let sum: f64 = y.slice(d, c).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(y.slice(d, c).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let p = spatial_softmax(&pseudo_random_tensor(Dims4::new(2, 2, 3, 3), 5)).unwrap();
        let v = kl_divergence(&p, &p).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn kl_matches_hand_evaluated_scalar_case() {
        // p uniform over 4 cells, q = (0.7, 0.1, 0.1, 0.1):
        // KL = 0.25 * sum log(0.25 / q_i), evaluated directly here.
        let dims = Dims4::new(1, 1, 2, 2);
        let p = Tensor4::filled(dims, 0.25_f64);
        let q = Tensor4::from_vec(dims, vec![0.7, 0.1, 0.1, 0.1]).unwrap();
        let want: f64 = [0.7_f64, 0.1, 0.1, 0.1]
            .iter()
            .map(|qi| 0.25 * (0.25 / qi).ln())
            .sum();
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn kl_rejects_unnormalized_input() {
        let dims = Dims4::new(1, 1, 2, 2);
        let p = Tensor4::filled(dims, 0.25_f64);
        let q = Tensor4::filled(dims, 0.3_f64);
        let err = kl_divergence(&p, &q).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        for k in [2usize, 5, 8] {
            let logits = vec![0.37_f64; k];
            for label in 0..k {
                let v = cross_entropy(&logits, label, k).unwrap();
                assert!((v - (k as f64).ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_confident_correct_is_tiny() {
        // logits (10, -10), label 0: loss = ln(1 + e^-20) ~ 2.06e-9.
        let v = cross_entropy(&[10.0_f64, -10.0], 0, 2).unwrap();
        let want = (1.0 + (-20.0_f64).exp()).ln();
        assert!((v - want).abs() < 1e-15);
        assert!(v < 3e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let err = cross_entropy(&[0.0_f64, 0.0], 2, 2).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = [1.5_f64, -0.3, 0.2, 2.0];
        let g = cross_entropy_backward(&logits, 2);
        let sum: f64 = g.iter().sum();
        assert!(sum.abs() < 1e-12);
    }
}
