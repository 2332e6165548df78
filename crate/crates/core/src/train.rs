//! Training and evaluation procedures for the two streams.
//!
//! The flat stream is pretrained with cross-entropy alone. The fisheye
//! stream then optimizes the combined objective against the frozen flat
//! reference: batch members run forward/backward in parallel, their
//! gradients are merged in sample order, and one SGD step follows, so every
//! run is bit-deterministic for a given seed.

use crate::data::{sample_frames, Dataset, Modality, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{
    self, Ablation, NetworkSpec, StreamForward, StreamKind, StreamWeights,
};
use crate::params::{sgd_step, GradBuffer};
use crate::tensor::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Optimization hyperparameters. `Default` carries the full-scale values
/// (learning rate 4e-3, batch 16, 64 input frames, 30k iterations); the
/// config-file schema defaults each field to its desk-scale value instead
/// (see `desk_default`).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Frames sampled uniformly from each stored clip (n).
    #[serde(default = "defaults::frames")]
    pub frames: usize,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// Uniform sampling keeps a fixed phase unless this is set.
    #[serde(default)]
    pub random_phase: bool,
    /// Start the fisheye backbone from the pretrained flat weights when a
    /// reference stream is supplied (plain never does).
    #[serde(default = "defaults::init_from_rgb")]
    pub init_from_rgb: bool,
}

mod defaults {
    pub fn learning_rate() -> f64 {
        4e-3
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn frames() -> usize {
        8
    }
    pub fn iterations() -> usize {
        1200
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn init_from_rgb() -> bool {
        true
    }
}

impl TrainConfig {
    /// Desk-scale configuration: the paper's learning rate with batch,
    /// frame count, and iteration budget sized for CPU minutes.
    pub fn desk_default() -> Self {
        TrainConfig {
            learning_rate: defaults::learning_rate(),
            batch_size: defaults::batch_size(),
            frames: defaults::frames(),
            iterations: defaults::iterations(),
            seed: defaults::seed(),
            random_phase: false,
            init_from_rgb: defaults::init_from_rgb(),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 4e-3,
            batch_size: 16,
            frames: 64,
            iterations: 30_000,
            seed: 1,
            random_phase: false,
            init_from_rgb: false,
        }
    }
}

/// One logged training iteration (batch means).
#[derive(Clone, Debug, PartialEq)]
pub struct IterRow {
    pub iteration: usize,
    pub guidance: f64,
    pub class_loss: f64,
    pub total: f64,
    pub per_module: Vec<f64>,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome<S> {
    pub weights: StreamWeights<S>,
    pub rows: Vec<IterRow>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Deterministic epoch-shuffling batch sampler.
struct BatchSampler {
    ids: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(ids: &[usize], seed: u64) -> Self {
        BatchSampler {
            ids: ids.to_vec(),
            cursor: usize::MAX, // forces a shuffle on first draw
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.ids.len() {
                for i in (1..self.ids.len()).rev() {
                    let j = self.rng.gen_range(0..=i);
                    self.ids.swap(i, j);
                }
                self.cursor = 0;
            }
            batch.push(self.ids[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

fn spec_with_frames(spec: &NetworkSpec, frames: usize) -> NetworkSpec {
    let mut s = spec.clone();
    s.frames = frames;
    s
}

fn check_frame_budget(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if cfg.frames > ds.manifest.config.frames {
        return Err(Error::Config(format!(
            "cannot sample {} frames from {}-frame clips",
            cfg.frames, ds.manifest.config.frames
        )));
    }
    if cfg.batch_size == 0 || cfg.iterations == 0 {
        return Err(Error::Config("batch size and iterations must be >= 1".into()));
    }
    Ok(())
}

/// Per-sample work product, merged in sample order.
struct SampleResult<S> {
    gbuf: GradBuffer<S>,
    guidance: f64,
    class_loss: f64,
    per_module: Vec<f64>,
}

/// First few training clips, used to calibrate activation scales.
fn probe_clips<S: Scalar>(
    ds: &Dataset,
    split: &SplitSpec,
    modality: Modality,
    cfg: &TrainConfig,
) -> Result<Vec<crate::tensor::Tensor4<S>>> {
    split
        .train_clips
        .iter()
        .take(cfg.batch_size.min(8))
        .map(|&id| {
            let clip = ds.load_clip::<S>(id, modality)?;
            sample_frames(&clip.frames, cfg.frames, 0)
        })
        .collect()
}

/// Trains the flat reference stream with cross-entropy only.
pub fn pretrain_rgb<S: Scalar>(
    ds: &Dataset,
    split: &SplitSpec,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    check_frame_budget(ds, cfg)?;
    if split.train_clips.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let run_spec = spec_with_frames(spec, cfg.frames);
    run_spec.validate()?;
    let mut weights = StreamWeights::<S>::init(StreamKind::Rgb, &run_spec, cfg.seed)?;
    let probe = probe_clips(ds, split, Modality::Flat, cfg)?;
    model::calibrate_activation_scales(&mut weights, &probe)?;
    let mut sampler = BatchSampler::new(&split.train_clips, cfg.seed ^ 0x5eed);
    let mut phase_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a5e);
    let mut rows = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let phases: Vec<usize> = batch
            .iter()
            .map(|_| if cfg.random_phase { phase_rng.gen_range(0..4096) } else { 0 })
            .collect();
        let results: Vec<SampleResult<S>> = batch
            .par_iter()
            .zip(phases.par_iter())
            .map(|(&id, &phase)| -> Result<SampleResult<S>> {
                let clip = ds.load_clip::<S>(id, Modality::Flat)?;
                let frames = sample_frames(&clip.frames, cfg.frames, phase)?;
                let fwd = model::stream_forward(&weights, &frames, false)?;
                let (report, grad_logits, tap_grads) = model::guided_loss::<S>(
                    &[],
                    &fwd.transformed,
                    &fwd.logits,
                    clip.label,
                    run_spec.classes,
                    Ablation::Plain,
                )?;
                let mut gbuf = GradBuffer::zeros_like(&weights.store);
                model::stream_backward(&weights, &fwd, &grad_logits, &tap_grads, &mut gbuf)?;
                Ok(SampleResult {
                    gbuf,
                    guidance: 0.0,
                    class_loss: report.class_loss.as_f64(),
                    per_module: vec![0.0; run_spec.gt_modules],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let row = apply_step(&mut weights, results, cfg, iteration)?;
        rows.push(row);
    }

    let train_accuracy = evaluate(ds, &split.train_clips, &weights, cfg.frames, Ablation::Plain)?;
    let test_accuracy = evaluate(ds, &split.test_clips, &weights, cfg.frames, Ablation::Plain)?;
    Ok(TrainOutcome {
        weights,
        rows,
        train_accuracy,
        test_accuracy,
    })
}

/// Trains the fisheye stream under an ablation mode against a frozen flat
/// reference. The reference weights are read-only throughout; plain and
/// transformer-only modes never touch them.
pub fn train_fisheye<S: Scalar>(
    ds: &Dataset,
    split: &SplitSpec,
    reference: Option<&StreamWeights<S>>,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    ablation: Ablation,
) -> Result<TrainOutcome<S>> {
    check_frame_budget(ds, cfg)?;
    if split.train_clips.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let run_spec = spec_with_frames(spec, cfg.frames);
    run_spec.validate()?;
    if ablation.uses_guidance() && reference.is_none() {
        return Err(Error::Config(format!(
            "ablation '{ablation}' needs a pretrained reference stream"
        )));
    }
    if let Some(r) = reference {
        if r.kind != StreamKind::Rgb {
            return Err(Error::Config("reference stream must be the flat stream".into()));
        }
        if r.spec != run_spec {
            return Err(Error::Config(
                "reference stream spec does not match the fisheye spec".into(),
            ));
        }
    }

    let mut weights = StreamWeights::<S>::init(StreamKind::Fisheye, &run_spec, cfg.seed)?;
    if cfg.init_from_rgb {
        match reference {
            Some(r) => weights.adopt_backbone_from(r)?,
            None => {
                return Err(Error::Config(
                    "init_from_rgb requires a pretrained reference stream".into(),
                ))
            }
        }
    } else {
        let probe = probe_clips(ds, split, Modality::Fisheye, cfg)?;
        model::calibrate_activation_scales(&mut weights, &probe)?;
    }
    let use_reference = ablation.uses_guidance();
    let mut sampler = BatchSampler::new(&split.train_clips, cfg.seed ^ 0x5eed);
    let mut phase_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9a5e);
    let mut rows = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let phases: Vec<usize> = batch
            .iter()
            .map(|_| if cfg.random_phase { phase_rng.gen_range(0..4096) } else { 0 })
            .collect();
        let results: Vec<SampleResult<S>> = batch
            .par_iter()
            .zip(phases.par_iter())
            .map(|(&id, &phase)| -> Result<SampleResult<S>> {
                // Every sample must supply the pair even when the flat side
                // goes unused; a missing twin is an input error naming it.
                let (flat_clip, fish_clip) = ds.load_pair::<S>(id)?;
                let fish_frames = sample_frames(&fish_clip.frames, cfg.frames, phase)?;
                let fwd = model::fisheye_forward(&weights, &fish_frames, ablation)?;
                let rgb_taps = if use_reference {
                    let flat_frames = sample_frames(&flat_clip.frames, cfg.frames, phase)?;
                    let (_, taps) = model::rgb_forward(reference.unwrap(), &flat_frames)?;
                    taps
                } else {
                    Vec::new()
                };
                let (report, grad_logits, tap_grads) = model::guided_loss(
                    &rgb_taps,
                    &fwd.transformed,
                    &fwd.logits,
                    fish_clip.label,
                    run_spec.classes,
                    ablation,
                )?;
                let mut gbuf = GradBuffer::zeros_like(&weights.store);
                model::stream_backward(&weights, &fwd, &grad_logits, &tap_grads, &mut gbuf)?;
                Ok(SampleResult {
                    gbuf,
                    guidance: report.guidance.as_f64(),
                    class_loss: report.class_loss.as_f64(),
                    per_module: report.per_module.iter().map(|v| v.as_f64()).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let row = apply_step(&mut weights, results, cfg, iteration)?;
        rows.push(row);
    }

    let train_accuracy = evaluate(ds, &split.train_clips, &weights, cfg.frames, ablation)?;
    let test_accuracy = evaluate(ds, &split.test_clips, &weights, cfg.frames, ablation)?;
    Ok(TrainOutcome {
        weights,
        rows,
        train_accuracy,
        test_accuracy,
    })
}

/// Merges per-sample gradients in order, averages, steps, and logs. The
/// logged total is guidance + class by construction.
fn apply_step<S: Scalar>(
    weights: &mut StreamWeights<S>,
    results: Vec<SampleResult<S>>,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<IterRow> {
    let b = results.len();
    let mut merged = GradBuffer::zeros_like(&weights.store);
    let mut guidance = 0.0;
    let mut class_loss = 0.0;
    let mut per_module = vec![0.0; results[0].per_module.len()];
    for r in &results {
        merged.merge(&r.gbuf);
        guidance += r.guidance;
        class_loss += r.class_loss;
        for (acc, v) in per_module.iter_mut().zip(r.per_module.iter()) {
            *acc += v;
        }
    }
    merged.scale(S::from_f64(1.0 / b as f64));
    weights.store.accumulate(&merged);
    sgd_step(&mut weights.store, cfg.learning_rate)?;
    guidance /= b as f64;
    class_loss /= b as f64;
    per_module.iter_mut().for_each(|v| *v /= b as f64);
    Ok(IterRow {
        iteration,
        guidance,
        class_loss,
        total: guidance + class_loss,
        per_module,
    })
}

/// Classification accuracy of a stream over the given clip ids. The flat
/// stream reads flat clips; the fisheye stream reads fisheye clips and its
/// own ablation path.
pub fn evaluate<S: Scalar>(
    ds: &Dataset,
    ids: &[usize],
    weights: &StreamWeights<S>,
    n_frames: usize,
    ablation: Ablation,
) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let modality = match weights.kind {
        StreamKind::Rgb => Modality::Flat,
        StreamKind::Fisheye => Modality::Fisheye,
    };
    let correct: usize = ids
        .par_iter()
        .map(|&id| -> Result<usize> {
            let clip = ds.load_clip::<S>(id, modality)?;
            let frames = sample_frames(&clip.frames, n_frames, 0)?;
            let fwd: StreamForward<S> = match weights.kind {
                StreamKind::Rgb => model::stream_forward(weights, &frames, false)?,
                StreamKind::Fisheye => model::fisheye_forward(weights, &frames, ablation)?,
            };
            Ok((model::argmax_lowest(&fwd.logits) == clip.label) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / ids.len() as f64)
}
