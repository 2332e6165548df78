//! The two-stream network at desk scale: a miniature 3D-conv backbone with a
//! guided transformer module inserted immediately before every maxpool layer
//! of the fisheye stream, plus the guidance / classification losses.
//!
//! Both streams share an identical backbone topology, so the reference tap
//! and the transformed tap have matching shapes at every insertion point.
//! The flat stream is trained once with cross-entropy and then frozen; only
//! the fisheye stream ever receives gradients from the combined objective.

use crate::error::{Error, Result};
use crate::gt::{self, GtTrace, LocNet, LocNetConfig, TransformFamily};
use crate::ops::{self, KernelDims, Triple};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{Dims4, GradPair, Scalar, Tensor4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Architecture description shared by both streams.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Number of action classes (K).
    pub classes: usize,
    /// Number of conv blocks, each ending in a maxpool; equals the number of
    /// guided transformer modules on the fisheye stream (J).
    pub gt_modules: usize,
    pub stem_channels: usize,
    /// Spatial stride of the stem conv; 2 moves every insertion point to
    /// half resolution.
    pub stem_stride: usize,
    /// One output width per block; length must equal `gt_modules`.
    pub block_channels: Vec<usize>,
    /// Input clip dims: frames sampled per clip, channels, height, width.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub family: TransformFamily,
    /// RMS of each conv layer's pre-relu output after calibration. Softer
    /// taps give flatter per-slice distributions, which keeps the guidance
    /// gradient commensurate with the classification path.
    pub activation_target: f64,
    pub locnet_hidden1: usize,
    pub locnet_hidden2: usize,
    pub locnet_gain: f64,
    pub per_frame_locnet: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            classes: 8,
            gt_modules: 3,
            stem_channels: 4,
            stem_stride: 2,
            block_channels: vec![6, 8, 12],
            frames: 8,
            channels: 1,
            height: 32,
            width: 32,
            family: TransformFamily::Radial,
            activation_target: 0.35,
            locnet_hidden1: 4,
            locnet_hidden2: 8,
            locnet_gain: 4.0,
            per_frame_locnet: false,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.gt_modules < 1 {
            return Err(Error::Config("need at least one conv/pool block".into()));
        }
        if self.block_channels.len() != self.gt_modules {
            return Err(Error::Config(format!(
                "block_channels has {} entries but gt_modules is {}",
                self.block_channels.len(),
                self.gt_modules
            )));
        }
        if self.frames < 1 || self.channels < 1 {
            return Err(Error::Config("input frames and channels must be >= 1".into()));
        }
        if !(self.stem_stride == 1 || self.stem_stride == 2) {
            return Err(Error::Config(format!("stem_stride must be 1 or 2, got {}", self.stem_stride)));
        }
        let shrink = 1usize << self.gt_modules;
        let (sh, sw) = self.stem_output_extent();
        if sh % shrink != 0 || sw % shrink != 0 || sh < shrink || sw < shrink {
            return Err(Error::Config(format!(
                "stem output {sh}x{sw} not divisible by 2^{} for the pooling ladder",
                self.gt_modules
            )));
        }
        Ok(())
    }

    pub fn input_dims(&self) -> Dims4 {
        Dims4::new(self.frames, self.channels, self.height, self.width)
    }

    /// Spatial extent after the stem conv (kernel 3, pad 1).
    fn stem_output_extent(&self) -> (usize, usize) {
        (
            (self.height - 1) / self.stem_stride + 1,
            (self.width - 1) / self.stem_stride + 1,
        )
    }

    fn locnet_config(&self) -> LocNetConfig {
        LocNetConfig {
            hidden1: self.locnet_hidden1,
            hidden2: self.locnet_hidden2,
            family: self.family,
            per_frame: self.per_frame_locnet,
            feature_gain: self.locnet_gain,
        }
    }
}

/// Which stream a weight set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Rgb,
    Fisheye,
}

impl std::fmt::Display for StreamKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StreamKind::Rgb => "rgb",
            StreamKind::Fisheye => "fisheye",
        })
    }
}

/// Ablation modes of the fisheye stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Plain backbone: no transformer modules, no guidance.
    Plain,
    /// KL constraint applied directly between the final stream taps.
    Guidance,
    /// Transformer modules active, guidance off.
    Transformer,
    /// Transformer modules plus per-module guidance.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Plain,
        Ablation::Guidance,
        Ablation::Transformer,
        Ablation::Full,
    ];

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "plain" => Ok(Ablation::Plain),
            "guidance" => Ok(Ablation::Guidance),
            "transformer" => Ok(Ablation::Transformer),
            "full" => Ok(Ablation::Full),
            other => Err(Error::Config(format!("unknown ablation tag '{other}'"))),
        }
    }

    pub fn uses_transformer(&self) -> bool {
        matches!(self, Ablation::Transformer | Ablation::Full)
    }

    pub fn uses_guidance(&self) -> bool {
        matches!(self, Ablation::Guidance | Ablation::Full)
    }

    /// Insertion points whose taps enter the guidance loss. The final-tap
    /// choice for the guidance-only mode matches applying the constraint
    /// directly between the two encoded feature maps.
    pub fn guided_taps(&self, gt_modules: usize) -> Vec<usize> {
        match self {
            Ablation::Full => (0..gt_modules).collect(),
            Ablation::Guidance => vec![gt_modules - 1],
            _ => Vec::new(),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Plain => "plain",
            Ablation::Guidance => "guidance",
            Ablation::Transformer => "transformer",
            Ablation::Full => "full",
        })
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kd: KernelDims,
    stride: Triple,
    pad: Triple,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: ConvLayer,
    blocks: Vec<ConvLayer>,
    head: DenseLayer,
}

const POOL: Triple = (1, 2, 2);

/// All weights of one stream: the backbone store plus, for the fisheye
/// stream, one localization network per insertion point.
#[derive(Clone, Debug)]
pub struct StreamWeights<S> {
    pub kind: StreamKind,
    pub spec: NetworkSpec,
    pub store: ParamStore<S>,
    backbone: Backbone,
    pub locnets: Vec<LocNet>,
}

fn he_uniform<S: Scalar, R: Rng>(rng: &mut R, fan_in: usize, len: usize) -> Vec<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect()
}

fn register_conv<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<ConvLayer> {
    let kd = KernelDims {
        c_out,
        c_in,
        d: 3,
        h: 3,
        w: 3,
    };
    let w = store.add(
        format!("{name}.w"),
        vec![c_out, c_in, 3, 3, 3],
        he_uniform(rng, c_in * 27, kd.len()),
    )?;
    let b = store.add(format!("{name}.b"), vec![c_out], vec![S::zero(); c_out])?;
    Ok(ConvLayer {
        kd,
        stride: (1, 1, 1),
        pad: (1, 1, 1),
        w,
        b,
    })
}

impl<S: Scalar> StreamWeights<S> {
    /// Builds a freshly initialized stream. The same seed yields identical
    /// backbone weights for both streams, so ablations share their starting
    /// point.
    pub fn init(kind: StreamKind, spec: &NetworkSpec, seed: u64) -> Result<StreamWeights<S>> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stem = register_conv(&mut store, "stem", spec.channels, spec.stem_channels, &mut rng)?;
        stem.stride = (1, spec.stem_stride, spec.stem_stride);
        let mut blocks = Vec::with_capacity(spec.gt_modules);
        let mut c_in = spec.stem_channels;
        for (j, &c_out) in spec.block_channels.iter().enumerate() {
            blocks.push(register_conv(&mut store, &format!("block{j}.conv"), c_in, c_out, &mut rng)?);
            c_in = c_out;
        }
        let feat = *spec.block_channels.last().unwrap();
        let head_w = store.add(
            "head.w",
            vec![spec.classes, feat],
            he_uniform(&mut rng, feat, spec.classes * feat),
        )?;
        let head_b = store.add("head.b", vec![spec.classes], vec![S::zero(); spec.classes])?;
        let mut locnets = Vec::new();
        if kind == StreamKind::Fisheye {
            for (j, &c) in spec.block_channels.iter().enumerate() {
                locnets.push(LocNet::register(
                    &mut store,
                    &format!("gt{j}"),
                    c,
                    spec.locnet_config(),
                    &mut rng,
                )?);
            }
        }
        Ok(StreamWeights {
            kind,
            spec: spec.clone(),
            store,
            backbone: Backbone {
                stem,
                blocks,
                head: DenseLayer { w: head_w, b: head_b },
            },
            locnets,
        })
    }

    /// Copies backbone and head values from another stream's store (used to
    /// start the fisheye stream from the pretrained flat weights).
    pub fn adopt_backbone_from(&mut self, other: &StreamWeights<S>) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Config("cannot adopt backbone across differing specs".into()));
        }
        for p in other.store.iter() {
            if let Some(id) = self.store.id_by_name(&p.name) {
                self.store.value_mut(id).copy_from_slice(&p.value);
            }
        }
        Ok(())
    }
}

struct BlockTrace<S> {
    /// Input to this block's conv: the previous pool output (or stem output).
    conv_input: Tensor4<S>,
    conv_pre: Tensor4<S>,
    relu_out: Tensor4<S>,
    gt: Option<GtTrace<S>>,
    pool_argmax: Vec<usize>,
    pool_in_dims: Dims4,
}

struct StreamTrace<S> {
    input: Tensor4<S>,
    stem_pre: Tensor4<S>,
    blocks: Vec<BlockTrace<S>>,
    gap_in_dims: Dims4,
    head_input: Vec<S>,
}

/// One recorded forward pass of a stream.
pub struct StreamForward<S> {
    pub logits: Vec<S>,
    /// Pre-transformer, pre-maxpool activations at every insertion point.
    pub taps: Vec<Tensor4<S>>,
    /// Post-transformer activations (identical to `taps` where the
    /// transformer is inactive). These feed both the maxpool and the
    /// guidance loss.
    pub transformed: Vec<Tensor4<S>>,
    trace: StreamTrace<S>,
}

/// Runs one stream. `use_gt` switches the transformer modules on; the plain
/// code path never touches them.
pub fn stream_forward<S: Scalar>(
    weights: &StreamWeights<S>,
    frames: &Tensor4<S>,
    use_gt: bool,
) -> Result<StreamForward<S>> {
    let spec = &weights.spec;
    if frames.dims() != spec.input_dims() {
        return Err(Error::Input(format!(
            "clip dims {} do not match network input {}",
            frames.dims(),
            spec.input_dims()
        )));
    }
    if use_gt && weights.locnets.is_empty() {
        return Err(Error::Config("this stream carries no transformer modules".into()));
    }
    let store = &weights.store;
    let bb = &weights.backbone;

    let stem_pre = ops::conv3d(
        frames,
        store.value(bb.stem.w),
        bb.stem.kd,
        store.value(bb.stem.b),
        bb.stem.stride,
        bb.stem.pad,
    )?;
    let stem_out = ops::relu(&stem_pre);

    let mut taps = Vec::with_capacity(spec.gt_modules);
    let mut transformed = Vec::with_capacity(spec.gt_modules);
    let mut blocks = Vec::with_capacity(spec.gt_modules);
    let mut x = stem_out;
    for (j, conv) in bb.blocks.iter().enumerate() {
        let conv_pre = ops::conv3d(
            &x,
            store.value(conv.w),
            conv.kd,
            store.value(conv.b),
            conv.stride,
            conv.pad,
        )?;
        let relu_out = ops::relu(&conv_pre);
        let (pool_feed, gt_trace) = if use_gt {
            let (warped, trace) = gt::gt_forward(store, &weights.locnets[j], &relu_out)?;
            (warped, Some(trace))
        } else {
            (relu_out.clone(), None)
        };
        let pooled = ops::maxpool3d(&pool_feed, POOL, POOL)?;
        taps.push(relu_out.clone());
        blocks.push(BlockTrace {
            conv_input: x,
            conv_pre,
            relu_out,
            gt: gt_trace,
            pool_argmax: pooled.argmax,
            pool_in_dims: pool_feed.dims(),
        });
        transformed.push(pool_feed);
        x = pooled.output;
    }

    // Global average pool over frames and space, then the classifier head.
    let gap_in_dims = x.dims();
    let volume = S::from_f64((gap_in_dims.frames * gap_in_dims.height * gap_in_dims.width) as f64);
    let mut head_input = vec![S::zero(); gap_in_dims.channels];
    for d in 0..gap_in_dims.frames {
        for c in 0..gap_in_dims.channels {
            head_input[c] += x.slice(d, c).iter().cloned().sum::<S>();
        }
    }
    for v in head_input.iter_mut() {
        *v /= volume;
    }
    let logits = ops::dense(&head_input, store.value(bb.head.w), store.value(bb.head.b))?;

    Ok(StreamForward {
        logits,
        taps,
        transformed,
        trace: StreamTrace {
            input: frames.clone(),
            stem_pre,
            blocks,
            gap_in_dims,
            head_input,
        },
    })
}

/// Backward through a recorded stream pass. `tap_grads[j]` is the guidance
/// cotangent arriving at the transformed tensor of block j; it fans in with
/// the gradient flowing back from the maxpool.
pub fn stream_backward<S: Scalar>(
    weights: &StreamWeights<S>,
    fwd: &StreamForward<S>,
    grad_logits: &[S],
    tap_grads: &[Option<Tensor4<S>>],
    gbuf: &mut GradBuffer<S>,
) -> Result<()> {
    let store = &weights.store;
    let bb = &weights.backbone;
    let trace = &fwd.trace;
    if tap_grads.len() != trace.blocks.len() {
        return Err(Error::Contract(format!(
            "expected {} tap gradients, got {}",
            trace.blocks.len(),
            tap_grads.len()
        )));
    }

    let dg = ops::dense_backward(&trace.head_input, store.value(bb.head.w), grad_logits);
    gbuf.add(bb.head.w, &dg.weights);
    gbuf.add(bb.head.b, &dg.bias);

    // Average pool backward: spread each channel gradient uniformly. The
    // result is the gradient at the final block's pool output.
    let gd = trace.gap_in_dims;
    let volume = S::from_f64((gd.frames * gd.height * gd.width) as f64);
    let mut grad_pool_out = Tensor4::zeros(gd);
    for d in 0..gd.frames {
        for c in 0..gd.channels {
            let g = dg.input[c] / volume;
            for v in grad_pool_out.slice_mut(d, c) {
                *v = g;
            }
        }
    }

    for (j, block) in trace.blocks.iter().enumerate().rev() {
        // Fan-in at the transformed tap: maxpool path plus guidance path.
        let mut node = GradPair::new(fwd.transformed[j].clone());
        node.grad.add_assign(&ops::maxpool3d_backward(
            block.pool_in_dims,
            &block.pool_argmax,
            &grad_pool_out,
        ));
        if let Some(tg) = &tap_grads[j] {
            if tg.dims() != node.dims() {
                return Err(Error::Contract(format!(
                    "tap gradient {} does not match tap dims {}",
                    tg.dims(),
                    node.dims()
                )));
            }
            node.grad.add_assign(tg);
        }
        let grad_relu = match &block.gt {
            Some(gt_trace) => gt::gt_backward(
                store,
                &weights.locnets[j],
                &block.relu_out,
                gt_trace,
                &node.grad,
                gbuf,
            )?,
            None => node.grad,
        };
        let grad_conv = ops::relu_backward(&block.conv_pre, &grad_relu);
        let conv = &bb.blocks[j];
        let g = ops::conv3d_backward(
            &block.conv_input,
            store.value(conv.w),
            conv.kd,
            conv.stride,
            conv.pad,
            &grad_conv,
        )?;
        gbuf.add(conv.w, &g.weights);
        gbuf.add(conv.b, &g.bias);
        grad_pool_out = g.input;
    }

    // grad_pool_out now sits at the stem's relu output.
    let grad_stem = ops::relu_backward(&trace.stem_pre, &grad_pool_out);
    let g = ops::conv3d_backward(
        &trace.input,
        store.value(bb.stem.w),
        bb.stem.kd,
        bb.stem.stride,
        bb.stem.pad,
        &grad_stem,
    )?;
    gbuf.add(bb.stem.w, &g.weights);
    gbuf.add(bb.stem.b, &g.bias);
    Ok(())
}

/// Rescales freshly initialized conv and head weights so that each layer's
/// pre-relu output has unit RMS over a probe batch and the logits start
/// near unit spread. Sparse inputs otherwise leave activations orders of
/// magnitude too small for the fixed learning rate. Deterministic given the
/// probe clips; runs once before training.
pub fn calibrate_activation_scales<S: Scalar>(
    weights: &mut StreamWeights<S>,
    probe: &[Tensor4<S>],
) -> Result<()> {
    if probe.is_empty() {
        return Err(Error::Input("activation calibration needs at least one probe clip".into()));
    }
    let layers: Vec<(ParamId, ParamId)> = {
        let bb = &weights.backbone;
        std::iter::once((bb.stem.w, bb.stem.b))
            .chain(bb.blocks.iter().map(|c| (c.w, c.b)))
            .collect()
    };
    // One pass per layer: measure this layer's pre-relu RMS with every
    // earlier layer already rescaled.
    let target = weights.spec.activation_target;
    for (depth, (w_id, b_id)) in layers.iter().enumerate() {
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for clip in probe {
            let pre = forward_to_conv(weights, clip, depth)?;
            sum_sq += pre.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            count += pre.dims().len();
        }
        let rms = (sum_sq / count as f64).sqrt();
        if rms > 1e-12 {
            let gain = S::from_f64(target / rms);
            weights.store.value_mut(*w_id).iter_mut().for_each(|v| *v *= gain);
            weights.store.value_mut(*b_id).iter_mut().for_each(|v| *v *= gain);
        }
    }
    // Head: aim for unit logit spread.
    let mut sum_sq = 0.0f64;
    let mut count = 0usize;
    for clip in probe {
        let fwd = stream_forward(weights, clip, false)?;
        sum_sq += fwd.logits.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        count += fwd.logits.len();
    }
    let rms = (sum_sq / count as f64).sqrt();
    if rms > 1e-12 {
        let gain = S::from_f64(1.0 / rms);
        let head_w = weights.backbone.head.w;
        weights.store.value_mut(head_w).iter_mut().for_each(|v| *v *= gain);
    }
    Ok(())
}

/// Pre-relu output of conv layer `depth` (0 = stem) under the current
/// weights, following the plain pooling path.
fn forward_to_conv<S: Scalar>(
    weights: &StreamWeights<S>,
    frames: &Tensor4<S>,
    depth: usize,
) -> Result<Tensor4<S>> {
    let store = &weights.store;
    let bb = &weights.backbone;
    let stem_pre = ops::conv3d(
        frames,
        store.value(bb.stem.w),
        bb.stem.kd,
        store.value(bb.stem.b),
        bb.stem.stride,
        bb.stem.pad,
    )?;
    if depth == 0 {
        return Ok(stem_pre);
    }
    let mut x = ops::relu(&stem_pre);
    for (j, conv) in bb.blocks.iter().enumerate() {
        let pre = ops::conv3d(
            &x,
            store.value(conv.w),
            conv.kd,
            store.value(conv.b),
            conv.stride,
            conv.pad,
        )?;
        if depth == j + 1 {
            return Ok(pre);
        }
        x = ops::maxpool3d(&ops::relu(&pre), POOL, POOL)?.output;
    }
    Err(Error::Config(format!("no conv layer at depth {depth}")))
}

/// Frozen reference pass: logits plus the pre-maxpool activations at every
/// insertion point.
pub fn rgb_forward<S: Scalar>(
    weights: &StreamWeights<S>,
    frames: &Tensor4<S>,
) -> Result<(Vec<S>, Vec<Tensor4<S>>)> {
    if weights.kind != StreamKind::Rgb {
        return Err(Error::Config("rgb_forward called on a non-rgb stream".into()));
    }
    let fwd = stream_forward(weights, frames, false)?;
    Ok((fwd.logits, fwd.taps))
}

/// Fisheye pass under an ablation mode. `transformed` holds the tensors the
/// guidance loss reads: post-transformer features where the transformer is
/// active, raw taps otherwise.
pub fn fisheye_forward<S: Scalar>(
    weights: &StreamWeights<S>,
    frames: &Tensor4<S>,
    ablation: Ablation,
) -> Result<StreamForward<S>> {
    if weights.kind != StreamKind::Fisheye {
        return Err(Error::Config("fisheye_forward called on a non-fisheye stream".into()));
    }
    stream_forward(weights, frames, ablation.uses_transformer())
}

/// Loss decomposition of one sample: guidance term, classification term,
/// their sum, and the per-insertion-point KL breakdown.
#[derive(Clone, Debug)]
pub struct LossReport<S> {
    pub guidance: S,
    pub class_loss: S,
    pub total: S,
    pub per_module: Vec<S>,
}

/// Combined objective: guidance KL summed over the ablation's guided taps
/// plus cross-entropy, with unit weights. Returns the report together with
/// the logit gradient and the per-tap cotangents for the fisheye stream; the
/// reference taps never receive gradients.
pub fn guided_loss<S: Scalar>(
    rgb_taps: &[Tensor4<S>],
    transformed: &[Tensor4<S>],
    logits: &[S],
    label: usize,
    class_count: usize,
    ablation: Ablation,
) -> Result<(LossReport<S>, Vec<S>, Vec<Option<Tensor4<S>>>)> {
    let j = transformed.len();
    let guided = ablation.guided_taps(j);
    if ablation.uses_guidance() && rgb_taps.len() != j {
        return Err(Error::Contract(format!(
            "reference tap count {} does not match fisheye tap count {j}",
            rgb_taps.len()
        )));
    }
    let mut per_module = vec![S::zero(); j];
    let mut tap_grads: Vec<Option<Tensor4<S>>> = vec![None; j];
    let mut guidance = S::zero();
    for &idx in &guided {
        let reference = &rgb_taps[idx];
        let candidate = &transformed[idx];
        if reference.dims() != candidate.dims() {
            return Err(Error::Contract(format!(
                "tap {idx} shape mismatch: reference {} vs transformed {}",
                reference.dims(),
                candidate.dims()
            )));
        }
        let p = ops::spatial_softmax(reference)?;
        let q = ops::spatial_softmax(candidate)?;
        let kl = ops::kl_divergence(&p, &q)?;
        let grad_q = ops::kl_divergence_backward(&p, &q);
        tap_grads[idx] = Some(ops::spatial_softmax_backward(&q, &grad_q));
        per_module[idx] = kl;
        guidance += kl;
    }
    let class_loss = ops::cross_entropy(logits, label, class_count)?;
    let grad_logits = ops::cross_entropy_backward(logits, label);
    let report = LossReport {
        guidance,
        class_loss,
        total: guidance + class_loss,
        per_module,
    };
    Ok((report, grad_logits, tap_grads))
}

/// Predicted class of a fisheye clip: argmax of the fisheye-stream logits,
/// ties broken by the lowest class index. This entry point deliberately
/// admits no reference-stream input.
pub fn infer<S: Scalar>(frames: &Tensor4<S>, weights: &StreamWeights<S>, ablation: Ablation) -> Result<usize> {
    let fwd = fisheye_forward(weights, frames, ablation)?;
    Ok(argmax_lowest(&fwd.logits))
}

pub fn argmax_lowest<S: Scalar>(logits: &[S]) -> usize {
    let mut best = 0usize;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            classes: 3,
            gt_modules: 2,
            stem_channels: 2,
            block_channels: vec![3, 4],
            frames: 2,
            channels: 1,
            height: 8,
            width: 8,
            ..NetworkSpec::default()
        }
    }

    fn rand_clip(spec: &NetworkSpec, seed: u64) -> Tensor4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(spec.input_dims(), |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_weight_head_gives_uniform_logits() {
        let spec = tiny_spec();
        let mut w = StreamWeights::<f64>::init(StreamKind::Rgb, &spec, 1).unwrap();
        let id = w.store.id_by_name("head.w").unwrap();
        w.store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        let (logits, taps) = rgb_forward(&w, &rand_clip(&spec, 2)).unwrap();
        assert_eq!(logits.len(), spec.classes);
        assert_eq!(taps.len(), spec.gt_modules);
        let sm = ops::softmax_vec(&logits);
        for p in sm {
            assert!((p - 1.0 / spec.classes as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn tap_shapes_match_across_streams() {
        let spec = tiny_spec();
        let rgb = StreamWeights::<f64>::init(StreamKind::Rgb, &spec, 1).unwrap();
        let fish = StreamWeights::<f64>::init(StreamKind::Fisheye, &spec, 1).unwrap();
        let clip = rand_clip(&spec, 3);
        let (_, taps) = rgb_forward(&rgb, &clip).unwrap();
        let fwd = fisheye_forward(&fish, &clip, Ablation::Full).unwrap();
        assert_eq!(taps.len(), fwd.transformed.len());
        for (r, t) in taps.iter().zip(fwd.transformed.iter()) {
            assert_eq!(r.dims(), t.dims());
        }
    }

    #[test]
    fn fresh_full_model_transforms_are_identity() {
        let spec = tiny_spec();
        let fish = StreamWeights::<f64>::init(StreamKind::Fisheye, &spec, 5).unwrap();
        let clip = rand_clip(&spec, 6);
        let fwd = fisheye_forward(&fish, &clip, Ablation::Full).unwrap();
        for (tap, warped) in fwd.taps.iter().zip(fwd.transformed.iter()) {
            for (a, b) in tap.data().iter().zip(warped.data().iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn plain_mode_matches_backbone_only_forward() {
        let spec = tiny_spec();
        let fish = StreamWeights::<f64>::init(StreamKind::Fisheye, &spec, 7).unwrap();
        let clip = rand_clip(&spec, 8);
        let plain = fisheye_forward(&fish, &clip, Ablation::Plain).unwrap();
        let bare = stream_forward(&fish, &clip, false).unwrap();
        assert_eq!(plain.logits, bare.logits);
        for (a, b) in plain.transformed.iter().zip(plain.taps.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn guided_loss_zero_when_taps_equal_and_prediction_confident() {
        let dims = Dims4::new(1, 1, 2, 2);
        let tap = Tensor4::from_vec(dims, vec![0.4, 0.1, -0.2, 0.9]).unwrap();
        let taps = vec![tap.clone(), tap.clone()];
        let logits = vec![30.0_f64, 0.0, 0.0];
        let (report, _, _) = guided_loss(&taps, &taps, &logits, 0, 3, Ablation::Full).unwrap();
        assert!(report.guidance.abs() < 1e-12);
        assert!(report.class_loss < 1e-9);
        assert!((report.total - (report.guidance + report.class_loss)).abs() < 1e-15);
    }

    #[test]
    fn guided_loss_matches_hand_built_kl_sum() {
        // Two insertion points with hand-built 1x1x2x2 feature maps: the
        // guidance term equals the sum of the two directly evaluated KLs.
        let dims = Dims4::new(1, 1, 2, 2);
        let r0 = Tensor4::from_vec(dims, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r1 = Tensor4::from_vec(dims, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let t0 = Tensor4::from_vec(dims, vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        let t1 = Tensor4::from_vec(dims, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let kl_of = |a: &Tensor4<f64>, b: &Tensor4<f64>| {
            let p = ops::spatial_softmax(a).unwrap();
            let q = ops::spatial_softmax(b).unwrap();
            p.data()
                .iter()
                .zip(q.data().iter())
                .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
                .sum::<f64>()
        };
        let want = kl_of(&r0, &t0) + kl_of(&r1, &t1);
        let (report, _, grads) = guided_loss(
            &[r0, r1],
            &[t0, t1],
            &[0.0, 0.0],
            1,
            2,
            Ablation::Full,
        )
        .unwrap();
        assert!((report.guidance - want).abs() < 1e-12);
        assert_eq!(report.per_module.len(), 2);
        assert!(grads.iter().all(|g| g.is_some()));
    }

    #[test]
    fn guidance_only_uses_final_tap() {
        let dims = Dims4::new(1, 1, 2, 2);
        let r = Tensor4::from_vec(dims, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let t = Tensor4::from_vec(dims, vec![3.0, 2.0, 1.0, 0.0]).unwrap();
        let (report, _, grads) = guided_loss(
            &[r.clone(), r],
            &[t.clone(), t],
            &[0.0, 0.0],
            0,
            2,
            Ablation::Guidance,
        )
        .unwrap();
        assert_eq!(report.per_module[0], 0.0);
        assert!(report.per_module[1] > 0.0);
        assert!(grads[0].is_none() && grads[1].is_some());
    }

    #[test]
    fn plain_mode_reports_zero_guidance() {
        let (report, _, grads) =
            guided_loss::<f64>(&[], &[], &[1.0, 2.0], 0, 2, Ablation::Plain).unwrap();
        assert_eq!(report.guidance, 0.0);
        assert!(grads.is_empty());
        assert_eq!(report.total, report.class_loss);
    }

    #[test]
    fn mismatched_tap_shapes_rejected() {
        let a = Tensor4::<f64>::zeros(Dims4::new(1, 1, 2, 2));
        let b = Tensor4::<f64>::zeros(Dims4::new(1, 1, 4, 4));
        let err = guided_loss(&[a], &[b], &[0.0, 0.0], 0, 2, Ablation::Full).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn infer_breaks_ties_by_lowest_index() {
        assert_eq!(argmax_lowest(&[0.5_f64, 0.5, 0.1]), 0);
        assert_eq!(argmax_lowest(&[0.1_f64, 0.7, 0.7]), 1);
    }

    #[test]
    fn clip_dim_mismatch_is_input_error() {
        let spec = tiny_spec();
        let w = StreamWeights::<f64>::init(StreamKind::Rgb, &spec, 1).unwrap();
        let bad = Tensor4::<f64>::zeros(Dims4::new(2, 1, 4, 4));
        let err = rgb_forward(&w, &bad).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn spec_validation_catches_bad_configs() {
        let mut s = tiny_spec();
        s.classes = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.block_channels = vec![3];
        assert!(s.validate().is_err());
        let mut s = tiny_spec();
        s.height = 10; // not divisible by 2^2
        assert!(s.validate().is_err());
    }
}
