//! Guided transformer module: a 3D localization network emits one row of
//! unbounded transform parameters per frame, a grid generator turns each row
//! into a dense target-to-source sampling grid, and a bilinear sampler warps
//! the feature maps. The whole chain is differentiable with respect to both
//! the input features and the localization weights.
//!
//! Parameters are intentionally never squashed: there is no bounding
//! nonlinearity anywhere on the output path, so large corrective warps stay
//! representable. Samples that would read outside the normalized square are
//! zero-filled and masked rather than clamped.

use crate::error::{Error, Result};
use crate::ops::{self, KernelDims};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{Dims4, Scalar, Tensor4};
use rand::Rng;

/// Shape of the per-frame transform realized by the grid generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformFamily {
    /// 2x3 matrix: source = A * target + b.
    Affine,
    /// 3x3 homogeneous map with the last row (p7, p8, 1).
    Projective,
    /// Affine composed with radial scaling (1 + k1 r^2 + k2 r^4).
    Radial,
}

impl TransformFamily {
    pub fn param_count(&self) -> usize {
        match self {
            TransformFamily::Affine => 6,
            TransformFamily::Projective => 8,
            TransformFamily::Radial => 8,
        }
    }

    /// Parameter row realizing the identity map.
    pub fn identity_row<S: Scalar>(&self) -> Vec<S> {
        let one = S::one();
        let zero = S::zero();
        match self {
            TransformFamily::Affine => vec![one, zero, zero, zero, one, zero],
            TransformFamily::Projective | TransformFamily::Radial => {
                vec![one, zero, zero, zero, one, zero, zero, zero]
            }
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "affine" => Ok(TransformFamily::Affine),
            "projective" => Ok(TransformFamily::Projective),
            "radial" => Ok(TransformFamily::Radial),
            other => Err(Error::Config(format!("unknown transform family '{other}'"))),
        }
    }
}

impl std::fmt::Display for TransformFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TransformFamily::Affine => "affine",
            TransformFamily::Projective => "projective",
            TransformFamily::Radial => "radial",
        };
        f.write_str(s)
    }
}

/// One unbounded parameter row per frame.
#[derive(Clone, Debug)]
pub struct TransformParams<S> {
    pub family: TransformFamily,
    pub frames: usize,
    /// frames x param_count, row-major.
    pub values: Vec<S>,
}

impl<S: Scalar> TransformParams<S> {
    pub fn identity(family: TransformFamily, frames: usize) -> Self {
        let row = family.identity_row::<S>();
        let mut values = Vec::with_capacity(frames * row.len());
        for _ in 0..frames {
            values.extend_from_slice(&row);
        }
        TransformParams {
            family,
            frames,
            values,
        }
    }

    pub fn row(&self, frame: usize) -> &[S] {
        let p = self.family.param_count();
        &self.values[frame * p..(frame + 1) * p]
    }
}

/// Per-frame grid of source coordinates in the normalized [-1, 1]^2
/// convention, plus a validity mask. The same grid row serves every channel
/// of its frame.
#[derive(Clone, Debug)]
pub struct SampleGrid<S> {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// frames x height x width x 2 (x, y interleaved).
    pub coords: Vec<S>,
    /// False exactly where sampling would read outside [-1, 1]^2.
    pub mask: Vec<bool>,
}

impl<S: Scalar> SampleGrid<S> {
    #[inline(always)]
    fn offset(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.height + h) * self.width + w
    }
}

/// Normalized coordinate of index i along an axis of the given extent
/// (align-corners convention; a singleton axis sits at 0).
#[inline(always)]
pub fn normalized_coord(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (extent - 1) as f64
    }
}

const PROJECTIVE_DENOM_MIN: f64 = 1e-6;

/// Evaluates the family map for one target point. Returns (x_s, y_s, valid);
/// an invalid point keeps zero coords and never divides by a tiny
/// denominator.
fn apply_row<S: Scalar>(family: TransformFamily, row: &[S], x: S, y: S) -> (S, S, bool) {
    match family {
        TransformFamily::Affine => {
            let xs = row[0] * x + row[1] * y + row[2];
            let ys = row[3] * x + row[4] * y + row[5];
            (xs, ys, true)
        }
        TransformFamily::Radial => {
            let r2 = x * x + y * y;
            let scale = S::one() + row[6] * r2 + row[7] * r2 * r2;
            let xr = x * scale;
            let yr = y * scale;
            let xs = row[0] * xr + row[1] * yr + row[2];
            let ys = row[3] * xr + row[4] * yr + row[5];
            (xs, ys, true)
        }
        TransformFamily::Projective => {
            let den = row[6] * x + row[7] * y + S::one();
            if den.abs().as_f64() < PROJECTIVE_DENOM_MIN {
                return (S::zero(), S::zero(), false);
            }
            let xs = (row[0] * x + row[1] * y + row[2]) / den;
            let ys = (row[3] * x + row[4] * y + row[5]) / den;
            (xs, ys, true)
        }
    }
}

/// Realizes the transform on the regular target grid: for every target
/// position the grid holds the source coordinate to sample from. Coordinates
/// outside [-1, 1]^2 are recorded unclamped but masked invalid.
pub fn generate_grid<S: Scalar>(params: &TransformParams<S>, height: usize, width: usize) -> SampleGrid<S> {
    let frames = params.frames;
    let mut coords = Vec::with_capacity(frames * height * width * 2);
    let mut mask = Vec::with_capacity(frames * height * width);
    let one = S::one();
    for d in 0..frames {
        let row = params.row(d);
        for h in 0..height {
            let y = S::from_f64(normalized_coord(h, height));
            for w in 0..width {
                let x = S::from_f64(normalized_coord(w, width));
                let (xs, ys, finite) = apply_row(params.family, row, x, y);
                let inside = finite && xs.abs() <= one && ys.abs() <= one;
                coords.push(xs);
                coords.push(ys);
                mask.push(inside);
            }
        }
    }
    SampleGrid {
        frames,
        height,
        width,
        coords,
        mask,
    }
}

/// Accumulates d(loss)/d(params) from d(loss)/d(coords). Masked points carry
/// no gradient (their output is the constant fill).
pub fn generate_grid_backward<S: Scalar>(
    params: &TransformParams<S>,
    height: usize,
    width: usize,
    grad_coords: &[S],
) -> Vec<S> {
    let p = params.family.param_count();
    let mut grads = vec![S::zero(); params.frames * p];
    let one = S::one();
    for d in 0..params.frames {
        let row = params.row(d);
        let g = &mut grads[d * p..(d + 1) * p];
        for h in 0..height {
            let y = S::from_f64(normalized_coord(h, height));
            for w in 0..width {
                let x = S::from_f64(normalized_coord(w, width));
                let base = 2 * ((d * height + h) * width + w);
                let gx = grad_coords[base];
                let gy = grad_coords[base + 1];
                if gx == S::zero() && gy == S::zero() {
                    continue;
                }
                match params.family {
                    TransformFamily::Affine => {
                        g[0] += gx * x;
                        g[1] += gx * y;
                        g[2] += gx;
                        g[3] += gy * x;
                        g[4] += gy * y;
                        g[5] += gy;
                    }
                    TransformFamily::Radial => {
                        let r2 = x * x + y * y;
                        let scale = one + row[6] * r2 + row[7] * r2 * r2;
                        let xr = x * scale;
                        let yr = y * scale;
                        g[0] += gx * xr;
                        g[1] += gx * yr;
                        g[2] += gx;
                        g[3] += gy * xr;
                        g[4] += gy * yr;
                        g[5] += gy;
                        // d(x_s)/d(k) = (a11 x + a12 y) * r^(2|4), likewise y.
                        let ax = row[0] * x + row[1] * y;
                        let ay = row[3] * x + row[4] * y;
                        g[6] += (gx * ax + gy * ay) * r2;
                        g[7] += (gx * ax + gy * ay) * r2 * r2;
                    }
                    TransformFamily::Projective => {
                        let den = row[6] * x + row[7] * y + one;
                        if den.abs().as_f64() < PROJECTIVE_DENOM_MIN {
                            continue;
                        }
                        let nx = row[0] * x + row[1] * y + row[2];
                        let ny = row[3] * x + row[4] * y + row[5];
                        g[0] += gx * x / den;
                        g[1] += gx * y / den;
                        g[2] += gx / den;
                        g[3] += gy * x / den;
                        g[4] += gy * y / den;
                        g[5] += gy / den;
                        let den2 = den * den;
                        g[6] += -(gx * nx + gy * ny) * x / den2;
                        g[7] += -(gx * nx + gy * ny) * y / den2;
                    }
                }
            }
        }
    }
    grads
}

/// Bilinear sampling of `input` at the grid's source coordinates. The grid
/// is shared across the channels of each frame; masked positions output 0.
pub fn sample<S: Scalar>(input: &Tensor4<S>, grid: &SampleGrid<S>) -> Result<Tensor4<S>> {
    let dims = input.dims();
    if grid.frames != dims.frames || grid.height != dims.height || grid.width != dims.width {
        return Err(Error::Config(format!(
            "sample grid {}x{}x{} does not match input {}",
            grid.frames, grid.height, grid.width, dims
        )));
    }
    let mut out = Tensor4::zeros(dims);
    let half_w = S::from_f64((dims.width - 1) as f64 / 2.0);
    let half_h = S::from_f64((dims.height - 1) as f64 / 2.0);
    let one = S::one();
    for d in 0..dims.frames {
        for h in 0..dims.height {
            for w in 0..dims.width {
                let o = grid.offset(d, h, w);
                if !grid.mask[o] {
                    continue;
                }
                let xs = grid.coords[2 * o];
                let ys = grid.coords[2 * o + 1];
                let px = (xs + one) * half_w;
                let py = (ys + one) * half_h;
                let x0 = px.floor().as_f64() as usize;
                let y0 = py.floor().as_f64() as usize;
                let x0 = x0.min(dims.width - 1);
                let y0 = y0.min(dims.height - 1);
                let x1 = (x0 + 1).min(dims.width - 1);
                let y1 = (y0 + 1).min(dims.height - 1);
                let fx = px - S::from_f64(x0 as f64);
                let fy = py - S::from_f64(y0 as f64);
                for c in 0..dims.channels {
                    let v00 = input.at(d, c, y0, x0);
                    let v01 = input.at(d, c, y0, x1);
                    let v10 = input.at(d, c, y1, x0);
                    let v11 = input.at(d, c, y1, x1);
                    let top = v00 * (one - fx) + v01 * fx;
                    let bot = v10 * (one - fx) + v11 * fx;
                    *out.at_mut(d, c, h, w) = top * (one - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Cotangents of [`sample`] for the input features and the grid coordinates.
pub struct SampleGrads<S> {
    pub input: Tensor4<S>,
    /// Same layout as `SampleGrid::coords`.
    pub coords: Vec<S>,
}

pub fn sample_backward<S: Scalar>(
    input: &Tensor4<S>,
    grid: &SampleGrid<S>,
    grad_out: &Tensor4<S>,
) -> SampleGrads<S> {
    let dims = input.dims();
    debug_assert_eq!(grad_out.dims(), dims);
    let mut gi = Tensor4::zeros(dims);
    let mut gc = vec![S::zero(); grid.coords.len()];
    let half_w = S::from_f64((dims.width - 1) as f64 / 2.0);
    let half_h = S::from_f64((dims.height - 1) as f64 / 2.0);
    let one = S::one();
    for d in 0..dims.frames {
        for h in 0..dims.height {
            for w in 0..dims.width {
                let o = grid.offset(d, h, w);
                if !grid.mask[o] {
                    continue;
                }
                let xs = grid.coords[2 * o];
                let ys = grid.coords[2 * o + 1];
                let px = (xs + one) * half_w;
                let py = (ys + one) * half_h;
                let x0 = (px.floor().as_f64() as usize).min(dims.width - 1);
                let y0 = (py.floor().as_f64() as usize).min(dims.height - 1);
                let x1 = (x0 + 1).min(dims.width - 1);
                let y1 = (y0 + 1).min(dims.height - 1);
                let fx = px - S::from_f64(x0 as f64);
                let fy = py - S::from_f64(y0 as f64);
                let mut dpx = S::zero();
                let mut dpy = S::zero();
                for c in 0..dims.channels {
                    let go = grad_out.at(d, c, h, w);
                    if go == S::zero() {
                        continue;
                    }
                    let v00 = input.at(d, c, y0, x0);
                    let v01 = input.at(d, c, y0, x1);
                    let v10 = input.at(d, c, y1, x0);
                    let v11 = input.at(d, c, y1, x1);
                    // Feature cotangents: bilinear weights times go.
                    *gi.at_mut(d, c, y0, x0) += go * (one - fx) * (one - fy);
                    *gi.at_mut(d, c, y0, x1) += go * fx * (one - fy);
                    *gi.at_mut(d, c, y1, x0) += go * (one - fx) * fy;
                    *gi.at_mut(d, c, y1, x1) += go * fx * fy;
                    // Coordinate cotangents: value differences.
                    dpx += go * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                    dpy += go * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                }
                gc[2 * o] = dpx * half_w;
                gc[2 * o + 1] = dpy * half_h;
            }
        }
    }
    SampleGrads { input: gi, coords: gc }
}

/// Architecture of the 3D localization network: two strided conv layers, a
/// spatial average pool, and a per-frame affine head emitting one parameter
/// row per frame. In `per_frame` mode the conv kernels have temporal extent
/// 1, so each frame's row depends only on that frame.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocNetConfig {
    pub hidden1: usize,
    pub hidden2: usize,
    pub family: TransformFamily,
    pub per_frame: bool,
    /// Fixed gain on the pooled features feeding the parameter head. The
    /// warp must respond to guidance faster than the backbone drifts, and
    /// this scales its effective learning speed without bounding the
    /// emitted parameters.
    pub feature_gain: f64,
}

impl Default for LocNetConfig {
    fn default() -> Self {
        LocNetConfig {
            hidden1: 4,
            hidden2: 8,
            family: TransformFamily::Radial,
            per_frame: false,
            feature_gain: 4.0,
        }
    }
}

/// Parameter handles of one localization network inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct LocNet {
    pub cfg: LocNetConfig,
    pub in_channels: usize,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
}

fn he_uniform<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

impl LocNet {
    /// Registers the localization weights under `prefix`. The head is
    /// initialized to zero weights with an identity-row bias, so a fresh
    /// module realizes the identity transform exactly.
    pub fn register<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_channels: usize,
        cfg: LocNetConfig,
        rng: &mut R,
    ) -> Result<LocNet> {
        let kt = if cfg.per_frame { 1 } else { 3 };
        let k1 = KernelDims {
            c_out: cfg.hidden1,
            c_in: in_channels,
            d: kt,
            h: 3,
            w: 3,
        };
        let k2 = KernelDims {
            c_out: cfg.hidden2,
            c_in: cfg.hidden1,
            d: kt,
            h: 3,
            w: 3,
        };
        let p = cfg.family.param_count();
        let conv1_w = store.add(
            format!("{prefix}.conv1.w"),
            vec![k1.c_out, k1.c_in, k1.d, k1.h, k1.w],
            he_uniform(rng, k1.c_in * k1.d * k1.h * k1.w, k1.len()),
        )?;
        let conv1_b = store.add(format!("{prefix}.conv1.b"), vec![k1.c_out], vec![S::zero(); k1.c_out])?;
        let conv2_w = store.add(
            format!("{prefix}.conv2.w"),
            vec![k2.c_out, k2.c_in, k2.d, k2.h, k2.w],
            he_uniform(rng, k2.c_in * k2.d * k2.h * k2.w, k2.len()),
        )?;
        let conv2_b = store.add(format!("{prefix}.conv2.b"), vec![k2.c_out], vec![S::zero(); k2.c_out])?;
        let dense_w = store.add(
            format!("{prefix}.head.w"),
            vec![p, cfg.hidden2],
            vec![S::zero(); p * cfg.hidden2],
        )?;
        let dense_b = store.add(format!("{prefix}.head.b"), vec![p], cfg.family.identity_row::<S>())?;
        Ok(LocNet {
            cfg,
            in_channels,
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            dense_w,
            dense_b,
        })
    }

    fn kernel1(&self) -> KernelDims {
        let kt = if self.cfg.per_frame { 1 } else { 3 };
        KernelDims {
            c_out: self.cfg.hidden1,
            c_in: self.in_channels,
            d: kt,
            h: 3,
            w: 3,
        }
    }

    fn kernel2(&self) -> KernelDims {
        let kt = if self.cfg.per_frame { 1 } else { 3 };
        KernelDims {
            c_out: self.cfg.hidden2,
            c_in: self.cfg.hidden1,
            d: kt,
            h: 3,
            w: 3,
        }
    }

    fn stride_pad(&self) -> ((usize, usize, usize), (usize, usize, usize)) {
        let kt = if self.cfg.per_frame { 1 } else { 3 };
        ((1, 2, 2), (kt / 2, 1, 1))
    }
}

/// Recorded forward pass of [`localize`], consumed by the backward pass.
pub struct LocTrace<S> {
    conv1_out: Tensor4<S>,
    relu1: Tensor4<S>,
    conv2_out: Tensor4<S>,
    relu2: Tensor4<S>,
    /// Per-frame pooled features, frames x hidden2.
    pooled: Vec<S>,
}

/// Runs the localization network: one unbounded parameter row per frame.
pub fn localize<S: Scalar>(
    store: &ParamStore<S>,
    net: &LocNet,
    features: &Tensor4<S>,
) -> Result<(TransformParams<S>, LocTrace<S>)> {
    let dims = features.dims();
    if dims.channels != net.in_channels {
        return Err(Error::Config(format!(
            "localization network expects {} channels, got {}",
            net.in_channels, dims.channels
        )));
    }
    let (stride, pad) = net.stride_pad();
    let conv1_out = ops::conv3d(
        features,
        store.value(net.conv1_w),
        net.kernel1(),
        store.value(net.conv1_b),
        stride,
        pad,
    )?;
    let relu1 = ops::relu(&conv1_out);
    let conv2_out = ops::conv3d(
        &relu1,
        store.value(net.conv2_w),
        net.kernel2(),
        store.value(net.conv2_b),
        stride,
        pad,
    )?;
    let relu2 = ops::relu(&conv2_out);

    // Spatial average pool, one feature vector per frame, amplified by the
    // fixed head gain.
    let rd = relu2.dims();
    let area = S::from_f64((rd.height * rd.width) as f64);
    let gain = S::from_f64(net.cfg.feature_gain);
    let mut pooled = vec![S::zero(); rd.frames * rd.channels];
    for d in 0..rd.frames {
        for c in 0..rd.channels {
            let sum: S = relu2.slice(d, c).iter().cloned().sum();
            pooled[d * rd.channels + c] = sum / area * gain;
        }
    }

    let p = net.cfg.family.param_count();
    let mut values = Vec::with_capacity(dims.frames * p);
    for d in 0..dims.frames {
        let feat = &pooled[d * rd.channels..(d + 1) * rd.channels];
        let row = ops::dense(feat, store.value(net.dense_w), store.value(net.dense_b))?;
        values.extend(row);
    }
    Ok((
        TransformParams {
            family: net.cfg.family,
            frames: dims.frames,
            values,
        },
        LocTrace {
            conv1_out,
            relu1,
            conv2_out,
            relu2,
            pooled,
        },
    ))
}

/// Backward through [`localize`]: accumulates weight gradients into `gbuf`
/// and returns the cotangent for the input features.
pub fn localize_backward<S: Scalar>(
    store: &ParamStore<S>,
    net: &LocNet,
    features: &Tensor4<S>,
    trace: &LocTrace<S>,
    grad_params: &[S],
    gbuf: &mut GradBuffer<S>,
) -> Result<Tensor4<S>> {
    let rd = trace.relu2.dims();
    let p = net.cfg.family.param_count();

    // Head (shared weights across frames).
    let mut grad_pooled = vec![S::zero(); trace.pooled.len()];
    for d in 0..rd.frames {
        let feat = &trace.pooled[d * rd.channels..(d + 1) * rd.channels];
        let g = &grad_params[d * p..(d + 1) * p];
        let dg = ops::dense_backward(feat, store.value(net.dense_w), g);
        gbuf.add(net.dense_w, &dg.weights);
        gbuf.add(net.dense_b, &dg.bias);
        grad_pooled[d * rd.channels..(d + 1) * rd.channels].copy_from_slice(&dg.input);
    }

    // Average pool spreads each frame/channel gradient uniformly; the head
    // gain scales it back up.
    let area = S::from_f64((rd.height * rd.width) as f64);
    let gain = S::from_f64(net.cfg.feature_gain);
    let mut grad_relu2 = Tensor4::zeros(rd);
    for d in 0..rd.frames {
        for c in 0..rd.channels {
            let g = grad_pooled[d * rd.channels + c] / area * gain;
            for v in grad_relu2.slice_mut(d, c) {
                *v = g;
            }
        }
    }

    let (stride, pad) = net.stride_pad();
    let grad_conv2 = ops::relu_backward(&trace.conv2_out, &grad_relu2);
    let g2 = ops::conv3d_backward(
        &trace.relu1,
        store.value(net.conv2_w),
        net.kernel2(),
        stride,
        pad,
        &grad_conv2,
    )?;
    gbuf.add(net.conv2_w, &g2.weights);
    gbuf.add(net.conv2_b, &g2.bias);

    let grad_conv1 = ops::relu_backward(&trace.conv1_out, &g2.input);
    let g1 = ops::conv3d_backward(
        features,
        store.value(net.conv1_w),
        net.kernel1(),
        stride,
        pad,
        &grad_conv1,
    )?;
    gbuf.add(net.conv1_w, &g1.weights);
    gbuf.add(net.conv1_b, &g1.bias);
    Ok(g1.input)
}

/// Recorded forward pass of [`gt_forward`].
pub struct GtTrace<S> {
    pub loc: LocTrace<S>,
    pub params: TransformParams<S>,
    pub grid: SampleGrid<S>,
}

/// Full module: localize -> generate grid -> sample. Output dims equal input
/// dims; a freshly registered module is the identity map.
pub fn gt_forward<S: Scalar>(
    store: &ParamStore<S>,
    net: &LocNet,
    features: &Tensor4<S>,
) -> Result<(Tensor4<S>, GtTrace<S>)> {
    let dims = features.dims();
    let (params, loc) = localize(store, net, features)?;
    let grid = generate_grid(&params, dims.height, dims.width);
    let warped = sample(features, &grid)?;
    debug_assert_eq!(warped.dims(), dims);
    Ok((warped, GtTrace { loc, params, grid }))
}

/// Backward through the full module. The input cotangent merges the sampler
/// path (through the feature values) and the localization path (through the
/// transform parameters).
pub fn gt_backward<S: Scalar>(
    store: &ParamStore<S>,
    net: &LocNet,
    features: &Tensor4<S>,
    trace: &GtTrace<S>,
    grad_out: &Tensor4<S>,
    gbuf: &mut GradBuffer<S>,
) -> Result<Tensor4<S>> {
    let dims = features.dims();
    let sg = sample_backward(features, &trace.grid, grad_out);
    let grad_params = generate_grid_backward(&trace.params, dims.height, dims.width, &sg.coords);
    let mut grad_input = localize_backward(store, net, features, &trace.loc, &grad_params, gbuf)?;
    grad_input.add_assign(&sg.input);
    Ok(grad_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: Dims4, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_params_reproduce_target_grid() {
        let params = TransformParams::<f64>::identity(TransformFamily::Affine, 2);
        let grid = generate_grid(&params, 5, 7);
        for d in 0..2 {
            for h in 0..5 {
                for w in 0..7 {
                    let o = grid.offset(d, h, w);
                    assert!(grid.mask[o]);
                    assert_eq!(grid.coords[2 * o], normalized_coord(w, 7));
                    assert_eq!(grid.coords[2 * o + 1], normalized_coord(h, 5));
                }
            }
        }
    }

    #[test]
    fn affine_scale_two_doubles_coords_and_masks_corners() {
        let mut params = TransformParams::<f64>::identity(TransformFamily::Affine, 1);
        params.values[0] = 2.0;
        params.values[4] = 2.0;
        let grid = generate_grid(&params, 3, 3);
        // Center maps to center and stays valid.
        let center = grid.offset(0, 1, 1);
        assert!(grid.mask[center]);
        assert_eq!(grid.coords[2 * center], 0.0);
        // Corners map to (+-2, +-2): recorded unclamped, masked invalid.
        let corner = grid.offset(0, 0, 0);
        assert!(!grid.mask[corner]);
        assert_eq!(grid.coords[2 * corner], -2.0);
        assert_eq!(grid.coords[2 * corner + 1], -2.0);
    }

    #[test]
    fn radial_with_zero_coefficients_matches_affine() {
        let mut affine = TransformParams::<f64>::identity(TransformFamily::Affine, 1);
        affine.values.copy_from_slice(&[0.9, 0.1, 0.05, -0.1, 0.8, -0.02]);
        let mut radial = TransformParams::<f64>::identity(TransformFamily::Radial, 1);
        radial.values[..6].copy_from_slice(&affine.values);
        let ga = generate_grid(&affine, 4, 4);
        let gr = generate_grid(&radial, 4, 4);
        assert_eq!(ga.coords, gr.coords);
        assert_eq!(ga.mask, gr.mask);
    }

    #[test]
    fn unbounded_rows_pass_through_without_clamping() {
        let mut params = TransformParams::<f64>::identity(TransformFamily::Affine, 1);
        params.values[0] = 10.0;
        params.values[2] = 10.0;
        let grid = generate_grid(&params, 3, 3);
        let o = grid.offset(0, 0, 2);
        assert_eq!(grid.coords[2 * o], 20.0);
        assert!(!grid.mask[o]);
        assert!(grid.coords.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn projective_small_denominator_marks_invalid() {
        let mut params = TransformParams::<f64>::identity(TransformFamily::Projective, 1);
        // den = p7 x + p8 y + 1 = 0 at x = 1 with p7 = -1.
        params.values[6] = -1.0;
        let grid = generate_grid(&params, 3, 3);
        let right_mid = grid.offset(0, 1, 2);
        assert!(!grid.mask[right_mid]);
        assert_eq!(grid.coords[2 * right_mid], 0.0);
    }

    #[test]
    fn identity_grid_sampling_is_identity() {
        let input = rand_tensor(Dims4::new(3, 2, 6, 5), 9);
        let params = TransformParams::<f64>::identity(TransformFamily::Radial, 3);
        let grid = generate_grid(&params, 6, 5);
        let out = sample(&input, &grid).unwrap();
        for (a, b) in out.data().iter().zip(input.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn integer_site_grid_permutes_values() {
        // 2x2 single-channel frame, grid pointing at exact cell centers:
        // output is a permutation of the input values.
        let input = Tensor4::from_vec(Dims4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Swap horizontally: target (h, w) samples source (h, 1 - w).
        let coords = vec![
            1.0, -1.0, // (0,0) <- (0,1)
            -1.0, -1.0, // (0,1) <- (0,0)
            1.0, 1.0, // (1,0) <- (1,1)
            -1.0, 1.0, // (1,1) <- (1,0)
        ];
        let grid = SampleGrid {
            frames: 1,
            height: 2,
            width: 2,
            coords,
            mask: vec![true; 4],
        };
        let out = sample(&input, &grid).unwrap();
        assert_eq!(out.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn channel_consistency_preserves_scalar_multiples() {
        // Channels that are scalar multiples of one another stay exact
        // multiples after sampling, because every channel shares the grid.
        let base = rand_tensor(Dims4::new(2, 1, 5, 5), 33);
        let dims = Dims4::new(2, 3, 5, 5);
        let multi = Tensor4::from_fn(dims, |d, c, h, w| base.at(d, 0, h, w) * (c as f64 + 1.0));
        let mut params = TransformParams::<f64>::identity(TransformFamily::Radial, 2);
        for d in 0..2 {
            params.values[d * 8 + 6] = -0.2; // mild barrel warp
            params.values[d * 8 + 2] = 0.1 * d as f64;
        }
        let grid = generate_grid(&params, 5, 5);
        let out = sample(&multi, &grid).unwrap();
        for d in 0..2 {
            for h in 0..5 {
                for w in 0..5 {
                    let c0 = out.at(d, 0, h, w);
                    for c in 1..3 {
                        let want = c0 * (c as f64 + 1.0);
                        assert!((out.at(d, c, h, w) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn fresh_locnet(
        per_frame: bool,
        in_channels: usize,
        seed: u64,
    ) -> (ParamStore<f64>, LocNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LocNetConfig {
            per_frame,
            ..LocNetConfig::default()
        };
        let net = LocNet::register(&mut store, "gt0", in_channels, cfg, &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn fresh_localization_emits_identity_rows() {
        let (store, net) = fresh_locnet(false, 3, 1);
        let input = rand_tensor(Dims4::new(4, 3, 8, 8), 2);
        let (params, _) = localize(&store, &net, &input).unwrap();
        let identity = TransformFamily::Radial.identity_row::<f64>();
        for d in 0..4 {
            assert_eq!(params.row(d), &identity[..], "frame {d}");
        }
    }

    #[test]
    fn identical_frames_yield_identical_rows_in_per_frame_mode() {
        let (mut store, net) = fresh_locnet(true, 2, 3);
        // Give the head nonzero weights so rows actually depend on content.
        let id = store.id_by_name("gt0.head.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in store.value_mut(id) {
            *v = rng.gen_range(-0.5..0.5);
        }
        let frame = rand_tensor(Dims4::new(1, 2, 6, 6), 5);
        let input = Tensor4::from_fn(Dims4::new(3, 2, 6, 6), |_, c, h, w| frame.at(0, c, h, w));
        let (params, _) = localize(&store, &net, &input).unwrap();
        for d in 1..3 {
            for (a, b) in params.row(0).iter().zip(params.row(d).iter()) {
                assert_eq!(a, b);
            }
        }
        // And distinct frame contents give rows that are not all equal.
        let varied = rand_tensor(Dims4::new(3, 2, 6, 6), 6);
        let (pv, _) = localize(&store, &net, &varied).unwrap();
        assert!(pv.row(0) != pv.row(1) || pv.row(1) != pv.row(2));
    }

    #[test]
    fn fresh_gt_module_is_identity_within_tolerance() {
        let (store, net) = fresh_locnet(false, 3, 7);
        let input = rand_tensor(Dims4::new(2, 3, 7, 7), 8);
        let (out, _) = gt_forward(&store, &net, &input).unwrap();
        assert_eq!(out.dims(), input.dims());
        for (a, b) in out.data().iter().zip(input.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn per_frame_mode_keeps_frames_independent() {
        let (mut store, net) = fresh_locnet(true, 2, 11);
        // Leave identity start but enable content dependence in the head.
        let id = store.id_by_name("gt0.head.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for v in store.value_mut(id) {
            *v = rng.gen_range(-0.05..0.05);
        }
        let input = rand_tensor(Dims4::new(3, 2, 6, 6), 13);
        let (base, _) = gt_forward(&store, &net, &input).unwrap();
        // Perturb frame 1 only.
        let mut perturbed = input.clone();
        for v in perturbed.slice_mut(1, 0) {
            *v += 0.25;
        }
        let (out, _) = gt_forward(&store, &net, &perturbed).unwrap();
        for d in [0usize, 2] {
            for c in 0..2 {
                assert_eq!(base.slice(d, c), out.slice(d, c), "frame {d} changed");
            }
        }
        assert_ne!(base.slice(1, 0), out.slice(1, 0));
    }
}
