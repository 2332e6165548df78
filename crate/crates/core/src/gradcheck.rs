//! Central finite-difference verification of every analytic backward pass.
//!
//! Each registered operation builds a randomized small scenario, projects its
//! output through a fixed random functional to get a scalar, and compares the
//! analytic gradient against (f(x+h) - f(x-h)) / 2h element-wise. Everything
//! here runs at 64-bit precision; kinks (relu at 0, maxpool ties, samples on
//! cell boundaries) are kept out of the sweep by construction.

use crate::error::Result;
use crate::gt::{self, LocNet, LocNetConfig, SampleGrid, TransformFamily, TransformParams};
use crate::model::{self, Ablation, NetworkSpec, StreamKind, StreamWeights};
use crate::ops::{self, KernelDims};
use crate::params::{GradBuffer, ParamStore};
use crate::tensor::{Dims4, Tensor4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Maximum relative error accepted for any differentiable operation.
pub const TOLERANCE: f64 = 1e-4;

/// Every operation the suite verifies, in report order.
pub const CHECKED_OPS: [&str; 11] = [
    "conv3d",
    "maxpool3d",
    "dense",
    "relu",
    "spatial_softmax",
    "kl_divergence",
    "cross_entropy",
    "generate_grid",
    "sample",
    "gt_forward",
    "guided_loss",
];

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Element-wise relative error with an absolute floor in the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-6, analytic.abs().max(numeric.abs()))
}

/// Up to `max_n` indices evenly spread over a vector of length `len`.
fn probe_indices(len: usize, max_n: usize) -> Vec<usize> {
    if len <= max_n {
        (0..len).collect()
    } else {
        (0..max_n).map(|i| i * len / max_n).collect()
    }
}

/// Central-difference gradient over the probed indices of one argument.
/// `eval` must treat its slice argument as the current value of that
/// argument and return the scalar objective.
fn numeric_gradient(
    values: &mut [f64],
    subset: &[usize],
    step: f64,
    eval: &mut dyn FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    subset
        .iter()
        .map(|&i| {
            let orig = values[i];
            let h = step * orig.abs().max(1.0);
            values[i] = orig + h;
            let plus = eval(values);
            values[i] = orig - h;
            let minus = eval(values);
            values[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Compares an analytic gradient vector against finite differences on a
/// probed subset, returning the worst relative error.
fn compare(
    analytic: &[f64],
    values: &mut [f64],
    step: f64,
    eval: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let subset = probe_indices(values.len(), 48);
    let numeric = numeric_gradient(values, &subset, step, eval);
    subset
        .iter()
        .zip(numeric.iter())
        .map(|(&i, &n)| relative_error(analytic[i], n))
        .fold(0.0, f64::max)
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: Dims4, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.gen_range(lo..hi))
}

fn weighted_sum(out: &Tensor4<f64>, weights: &Tensor4<f64>) -> f64 {
    out.data()
        .iter()
        .zip(weights.data().iter())
        .map(|(&a, &b)| a * b)
        .sum()
}

const STEP: f64 = 1e-5;

fn check_conv3d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 3, 5, 5);
    let kd = KernelDims { c_out: 4, c_in: 3, d: 2, h: 3, w: 3 };
    let stride = (1, 2, 2);
    let pad = (1, 1, 1);
    let input = rand_tensor(rng, dims, -1.0, 1.0);
    let weights: Vec<f64> = (0..kd.len()).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bias: Vec<f64> = (0..kd.c_out).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let out = ops::conv3d(&input, &weights, kd, &bias, stride, pad)?;
    let r = rand_tensor(rng, out.dims(), -1.0, 1.0);
    let grads = ops::conv3d_backward(&input, &weights, kd, stride, pad, &r)?;

    let mut worst: f64 = 0.0;
    let mut x = input.data().to_vec();
    worst = worst.max(compare(grads.input.data(), &mut x, STEP, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        weighted_sum(&ops::conv3d(&t, &weights, kd, &bias, stride, pad).unwrap(), &r)
    }));
    let mut w = weights.clone();
    worst = worst.max(compare(&grads.weights, &mut w, STEP, &mut |v| {
        weighted_sum(&ops::conv3d(&input, v, kd, &bias, stride, pad).unwrap(), &r)
    }));
    let mut b = bias.clone();
    worst = worst.max(compare(&grads.bias, &mut b, STEP, &mut |v| {
        weighted_sum(&ops::conv3d(&input, &weights, kd, v, stride, pad).unwrap(), &r)
    }));
    Ok(worst)
}

fn check_maxpool3d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 2, 4, 4);
    // Continuous random values: ties and near-ties are measure zero.
    let input = rand_tensor(rng, dims, -1.0, 1.0);
    let pooled = ops::maxpool3d(&input, (1, 2, 2), (1, 2, 2))?;
    let r = rand_tensor(rng, pooled.output.dims(), -1.0, 1.0);
    let analytic = ops::maxpool3d_backward(dims, &pooled.argmax, &r);
    let mut x = input.data().to_vec();
    Ok(compare(analytic.data(), &mut x, 1e-6, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        let p = ops::maxpool3d(&t, (1, 2, 2), (1, 2, 2)).unwrap();
        weighted_sum(&p.output, &r)
    }))
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<f64> {
    let input: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let weights: Vec<f64> = (0..24).map(|_| rng.gen_range(-0.7..0.7)).collect();
    let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dot = |out: &[f64]| -> f64 { out.iter().zip(r.iter()).map(|(a, b)| a * b).sum() };
    let grads = ops::dense_backward(&input, &weights, &r);

    let mut worst: f64 = 0.0;
    let mut x = input.clone();
    worst = worst.max(compare(&grads.input, &mut x, STEP, &mut |v| {
        dot(&ops::dense(v, &weights, &bias).unwrap())
    }));
    let mut w = weights.clone();
    worst = worst.max(compare(&grads.weights, &mut w, STEP, &mut |v| {
        dot(&ops::dense(&input, v, &bias).unwrap())
    }));
    let mut b = bias.clone();
    worst = worst.max(compare(&grads.bias, &mut b, STEP, &mut |v| {
        dot(&ops::dense(&input, &weights, v).unwrap())
    }));
    Ok(worst)
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 2, 3, 3);
    // Keep the sweep away from the kink at exactly 0.
    let input = rand_tensor(rng, dims, -1.0, 1.0).map(|v| {
        if v.abs() < 0.05 {
            v + 0.1 * v.signum()
        } else {
            v
        }
    });
    let r = rand_tensor(rng, dims, -1.0, 1.0);
    let analytic = ops::relu_backward(&input, &r);
    let mut x = input.data().to_vec();
    Ok(compare(analytic.data(), &mut x, 1e-6, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        weighted_sum(&ops::relu(&t), &r)
    }))
}

fn check_spatial_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 2, 3, 3);
    let input = rand_tensor(rng, dims, -2.0, 2.0);
    let r = rand_tensor(rng, dims, -1.0, 1.0);
    let y = ops::spatial_softmax(&input)?;
    let analytic = ops::spatial_softmax_backward(&y, &r);
    let mut x = input.data().to_vec();
    Ok(compare(analytic.data(), &mut x, STEP, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        weighted_sum(&ops::spatial_softmax(&t).unwrap(), &r)
    }))
}

fn check_kl_divergence(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 2, 3, 3);
    let p = ops::spatial_softmax(&rand_tensor(rng, dims, -1.5, 1.5))?;
    let q = ops::spatial_softmax(&rand_tensor(rng, dims, -1.5, 1.5))?;
    let analytic = ops::kl_divergence_backward(&p, &q);
    // Perturbing q directly keeps each slice within the normalization
    // tolerance because the step is far below it.
    let mut x = q.data().to_vec();
    Ok(compare(analytic.data(), &mut x, 1e-6, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        ops::kl_divergence(&p, &t).unwrap()
    }))
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = 5;
    let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let label = 2;
    let analytic = ops::cross_entropy_backward(&logits, label);
    let mut x = logits.clone();
    Ok(compare(&analytic, &mut x, STEP, &mut |v| {
        ops::cross_entropy(v, label, k).unwrap()
    }))
}

fn noisy_params(rng: &mut ChaCha8Rng, family: TransformFamily, frames: usize) -> TransformParams<f64> {
    let mut params = TransformParams::identity(family, frames);
    for v in params.values.iter_mut() {
        *v += rng.gen_range(-0.08..0.08);
    }
    params
}

fn check_generate_grid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for family in [
        TransformFamily::Affine,
        TransformFamily::Projective,
        TransformFamily::Radial,
    ] {
        let (h, w) = (5usize, 5usize);
        let params = noisy_params(rng, family, 2);
        let grid = gt::generate_grid(&params, h, w);
        // Weight only points that stay safely inside the valid square, so
        // the mask cannot flip under the finite-difference step.
        let mut r = vec![0.0f64; grid.coords.len()];
        for (i, chunk) in grid.coords.chunks(2).enumerate() {
            if grid.mask[i] && chunk[0].abs() <= 0.9 && chunk[1].abs() <= 0.9 {
                r[2 * i] = rng.gen_range(-1.0..1.0);
                r[2 * i + 1] = rng.gen_range(-1.0..1.0);
            }
        }
        let analytic = gt::generate_grid_backward(&params, h, w, &r);
        let mut x = params.values.clone();
        let err = compare(&analytic, &mut x, STEP, &mut |v| {
            let p = TransformParams {
                family,
                frames: 2,
                values: v.to_vec(),
            };
            let g = gt::generate_grid(&p, h, w);
            g.coords.iter().zip(r.iter()).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(err);
    }
    Ok(worst)
}

/// True when a pixel-space coordinate sits safely inside one bilinear cell.
fn off_cell_boundary(px: f64) -> bool {
    let frac = px - px.floor();
    (0.05..=0.95).contains(&frac)
}

fn check_sample(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 2, 5, 5);
    let input = rand_tensor(rng, dims, -1.0, 1.0);
    let (hh, ww) = (dims.height, dims.width);
    let mut coords = Vec::with_capacity(dims.frames * hh * ww * 2);
    for _ in 0..(dims.frames * hh * ww) {
        // Stay inside the square and away from cell boundaries.
        loop {
            let x = rng.gen_range(-0.85..0.85);
            let y = rng.gen_range(-0.85..0.85);
            let px = (x + 1.0) / 2.0 * (ww - 1) as f64;
            let py = (y + 1.0) / 2.0 * (hh - 1) as f64;
            if off_cell_boundary(px) && off_cell_boundary(py) {
                coords.push(x);
                coords.push(y);
                break;
            }
        }
    }
    let grid = SampleGrid {
        frames: dims.frames,
        height: hh,
        width: ww,
        coords,
        mask: vec![true; dims.frames * hh * ww],
    };
    let out = gt::sample(&input, &grid)?;
    let r = rand_tensor(rng, out.dims(), -1.0, 1.0);
    let grads = gt::sample_backward(&input, &grid, &r);

    let mut worst: f64 = 0.0;
    let mut x = input.data().to_vec();
    worst = worst.max(compare(grads.input.data(), &mut x, STEP, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        weighted_sum(&gt::sample(&t, &grid).unwrap(), &r)
    }));
    let mut c = grid.coords.clone();
    worst = worst.max(compare(&grads.coords, &mut c, 1e-6, &mut |v| {
        let g = SampleGrid {
            frames: grid.frames,
            height: grid.height,
            width: grid.width,
            coords: v.to_vec(),
            mask: grid.mask.clone(),
        };
        weighted_sum(&gt::sample(&input, &g).unwrap(), &r)
    }));
    Ok(worst)
}

/// Builds a small localization network whose head is nudged off the exact
/// identity, so sampled coordinates sit between grid sites rather than on
/// them.
fn nudged_locnet(
    rng: &mut ChaCha8Rng,
    in_channels: usize,
) -> Result<(ParamStore<f64>, LocNet)> {
    let mut store = ParamStore::new();
    let cfg = LocNetConfig {
        hidden1: 3,
        hidden2: 4,
        family: TransformFamily::Radial,
        per_frame: false,
        feature_gain: 2.0,
    };
    let net = LocNet::register(&mut store, "gt0", in_channels, cfg, rng)?;
    for name in ["gt0.head.w", "gt0.head.b"] {
        let id = store.id_by_name(name).unwrap();
        let scale = if name.ends_with(".w") { 0.1 } else { 0.03 };
        for v in store.value_mut(id) {
            *v += rng.gen_range(-scale..scale);
        }
    }
    Ok((store, net))
}

/// Zero weight tensor entries whose sampled coordinate is close to a cell
/// boundary, where bilinear interpolation kinks.
fn safe_projection(rng: &mut ChaCha8Rng, grid: &SampleGrid<f64>, dims: Dims4) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |d, _, h, w| {
        let o = (d * dims.height + h) * dims.width + w;
        if !grid.mask[o] {
            return 0.0;
        }
        let px = (grid.coords[2 * o] + 1.0) / 2.0 * (dims.width - 1) as f64;
        let py = (grid.coords[2 * o + 1] + 1.0) / 2.0 * (dims.height - 1) as f64;
        if off_cell_boundary(px) && off_cell_boundary(py) {
            rng.gen_range(-1.0..1.0)
        } else {
            0.0
        }
    })
}

fn check_gt_forward(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dims = Dims4::new(2, 2, 6, 6);
    let (store, net) = nudged_locnet(rng, dims.channels)?;
    let input = rand_tensor(rng, dims, 0.05, 1.0);
    let (_, trace) = gt::gt_forward(&store, &net, &input)?;
    let r = safe_projection(rng, &trace.grid, dims);

    let mut gbuf = GradBuffer::zeros_like(&store);
    let grad_input = gt::gt_backward(&store, &net, &input, &trace, &r, &mut gbuf)?;

    let mut worst: f64 = 0.0;
    let mut x = input.data().to_vec();
    worst = worst.max(compare(grad_input.data(), &mut x, STEP, &mut |v| {
        let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
        let (out, _) = gt::gt_forward(&store, &net, &t).unwrap();
        weighted_sum(&out, &r)
    }));
    for p in store.iter() {
        let id = store.id_by_name(&p.name).unwrap();
        let mut values = p.value.clone();
        let mut probe_store = store.clone();
        let err = compare(gbuf.grad(id), &mut values, STEP, &mut |v| {
            probe_store.value_mut(id).copy_from_slice(v);
            let (out, _) = gt::gt_forward(&probe_store, &net, &input).unwrap();
            weighted_sum(&out, &r)
        });
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_guided_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let spec = NetworkSpec {
        classes: 3,
        gt_modules: 2,
        stem_channels: 2,
        block_channels: vec![2, 3],
        frames: 2,
        channels: 1,
        height: 8,
        width: 8,
        locnet_hidden1: 2,
        locnet_hidden2: 3,
        ..NetworkSpec::default()
    };
    let rgb = StreamWeights::<f64>::init(StreamKind::Rgb, &spec, rng.gen())?;
    let mut fish = StreamWeights::<f64>::init(StreamKind::Fisheye, &spec, rng.gen())?;
    // Nudge every transformer head off the exact identity.
    for j in 0..spec.gt_modules {
        for (suffix, scale) in [("head.w", 0.05), ("head.b", 0.02)] {
            let id = fish.store.id_by_name(&format!("gt{j}.{suffix}")).unwrap();
            for v in fish.store.value_mut(id) {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
    let flat_clip = rand_tensor(rng, spec.input_dims(), 0.0, 1.0);
    let fish_clip = rand_tensor(rng, spec.input_dims(), 0.0, 1.0);
    let label = 1usize;
    let (_, rgb_taps) = model::rgb_forward(&rgb, &flat_clip)?;

    let loss_of = |store_override: &ParamStore<f64>| -> f64 {
        let mut probe = fish.clone();
        probe.store = store_override.clone();
        let fwd = model::fisheye_forward(&probe, &fish_clip, Ablation::Full).unwrap();
        let (report, _, _) = model::guided_loss(
            &rgb_taps,
            &fwd.transformed,
            &fwd.logits,
            label,
            spec.classes,
            Ablation::Full,
        )
        .unwrap();
        report.total
    };

    let fwd = model::fisheye_forward(&fish, &fish_clip, Ablation::Full)?;
    let (_, grad_logits, tap_grads) = model::guided_loss(
        &rgb_taps,
        &fwd.transformed,
        &fwd.logits,
        label,
        spec.classes,
        Ablation::Full,
    )?;
    let mut gbuf = GradBuffer::zeros_like(&fish.store);
    model::stream_backward(&fish, &fwd, &grad_logits, &tap_grads, &mut gbuf)?;

    // Probe a representative set: a fisheye conv weight, the stem, the
    // classifier head, and transformer weights on both modules.
    let mut worst: f64 = 0.0;
    for name in [
        "block0.conv.w",
        "block1.conv.b",
        "stem.w",
        "head.w",
        "gt0.head.b",
        "gt0.conv1.w",
        "gt1.head.w",
    ] {
        let id = fish.store.id_by_name(name).unwrap();
        let mut values = fish.store.value(id).to_vec();
        let mut probe_store = fish.store.clone();
        let err = compare(gbuf.grad(id), &mut values, STEP, &mut |v| {
            probe_store.value_mut(id).copy_from_slice(v);
            loss_of(&probe_store)
        });
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Runs the whole suite. `corrupt` deliberately breaks the named operation's
/// analytic gradient (harness self-test fixture).
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<OpReport>> {
    let mut reports = Vec::with_capacity(CHECKED_OPS.len());
    for op in CHECKED_OPS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(op));
        let mut err = match op {
            "conv3d" => check_conv3d(&mut rng)?,
            "maxpool3d" => check_maxpool3d(&mut rng)?,
            "dense" => check_dense(&mut rng)?,
            "relu" => check_relu(&mut rng)?,
            "spatial_softmax" => check_spatial_softmax(&mut rng)?,
            "kl_divergence" => check_kl_divergence(&mut rng)?,
            "cross_entropy" => check_cross_entropy(&mut rng)?,
            "generate_grid" => check_generate_grid(&mut rng)?,
            "sample" => check_sample(&mut rng)?,
            "gt_forward" => check_gt_forward(&mut rng)?,
            "guided_loss" => check_guided_loss(&mut rng)?,
            _ => unreachable!(),
        };
        if corrupt == Some(op) {
            err += 1.0;
        }
        reports.push(OpReport { op, max_rel_err: err });
    }
    Ok(reports)
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_machine_epsilon_error() {
        // d/dx of 3x + 1 is exactly 3 under central differences.
        let mut x = vec![0.7f64];
        let numeric = numeric_gradient(&mut x, &[0], 1e-5, &mut |v| 3.0 * v[0] + 1.0);
        assert!(relative_error(3.0, numeric[0]) < 1e-9);
    }

    #[test]
    fn relative_error_floors_denominator() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        // Tiny absolute differences near zero are measured against the floor.
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn suite_passes_all_ops() {
        let reports = run_suite(17, None).unwrap();
        assert_eq!(reports.len(), CHECKED_OPS.len());
        for r in &reports {
            assert!(r.passed(), "{} failed: max rel err {:.3e}", r.op, r.max_rel_err);
        }
    }

    #[test]
    fn suite_lists_every_op_exactly_once() {
        let reports = run_suite(17, None).unwrap();
        let mut names: Vec<&str> = reports.iter().map(|r| r.op).collect();
        names.sort_unstable();
        let mut expected = CHECKED_OPS.to_vec();
        expected.sort_unstable();
        assert_eq!(names, expected);
    }

    #[test]
    fn corrupted_backward_fails_naming_the_op() {
        let reports = run_suite(17, Some("sample")).unwrap();
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
        assert_eq!(failed, vec!["sample"]);
    }
}
