//! Procedural generator and loader for paired flat/fisheye labeled clips.
//!
//! Each clip shows one textured sprite moving along a class-specific
//! direction; the subject id controls sprite appearance (size, texture,
//! brightness) as a nuisance factor, so the class signal is purely
//! geometric and fisheye distortion genuinely attacks it. The fisheye twin
//! of every clip is exactly the declared warp of its flat twin.
//!
//! Generation always runs at 32-bit precision: the on-disk blobs are f32,
//! and warping quantized frames keeps the pairing property bit-exact under
//! recomputation.

use crate::blob;
use crate::error::{Error, Result};
use crate::fisheye::{warp_frame, FisheyeIntrinsics, PinholeIntrinsics, WarpDirection};
use crate::tensor::{Dims4, Scalar, Tensor4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// RNG stream ids: clip streams are offset by instance id, subject-trait
/// streams by subject id.
const CLIP_STREAM_BASE: u64 = 1;
const SUBJECT_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Flat,
    Fisheye,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Flat => "flat",
            Modality::Fisheye => "fisheye",
        })
    }
}

/// A labeled video sample.
#[derive(Clone, Debug)]
pub struct Clip<S> {
    pub frames: Tensor4<S>,
    pub label: usize,
    pub subject_id: usize,
    pub instance_id: usize,
    pub modality: Modality,
}

/// Generator configuration; fully determines every byte of the dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub classes: usize,
    pub subjects: usize,
    pub clips_per_subject: usize,
    /// Frames stored per clip (training samples a subset).
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Pinhole focal length in pixels; small values mean a wide flat view
    /// and therefore strong fisheye compression at the periphery.
    pub pinhole_focal: f64,
    /// Full fisheye view angle in radians.
    pub fov: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 1,
            classes: 8,
            subjects: 32,
            clips_per_subject: 8,
            frames: 16,
            channels: 1,
            height: 32,
            width: 32,
            pinhole_focal: 6.0,
            fov: std::f64::consts::PI,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Input(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.subjects < 2 {
            return Err(Error::Input(format!("need at least 2 subjects, got {}", self.subjects)));
        }
        if self.clips_per_subject < 1 || self.frames < 2 {
            return Err(Error::Input("need at least 1 clip per subject and 2 frames".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("frames must be at least 8x8".into()));
        }
        self.pinhole().validate()?;
        self.fisheye().validate()
    }

    pub fn pinhole(&self) -> PinholeIntrinsics {
        PinholeIntrinsics::centered(self.pinhole_focal, self.width, self.height)
    }

    pub fn fisheye(&self) -> FisheyeIntrinsics {
        FisheyeIntrinsics::disc_filling(self.fov, self.width, self.height)
    }

    pub fn total_clips(&self) -> usize {
        self.subjects * self.clips_per_subject
    }
}

/// One clip pair in the manifest.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClipRecord {
    pub instance_id: usize,
    pub subject_id: usize,
    pub label: usize,
    pub flat: String,
    pub fisheye: String,
}

/// On-disk dataset description: generator config echo plus per-clip records.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub config: GenConfig,
    pub pinhole: PinholeIntrinsics,
    pub fisheye: FisheyeIntrinsics,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn record(&self, instance_id: usize) -> Result<&ClipRecord> {
        self.clips
            .get(instance_id)
            .filter(|r| r.instance_id == instance_id)
            .ok_or_else(|| Error::Input(format!("instance {instance_id} not in manifest")))
    }
}

/// Subject traits act as appearance nuisance: sprite size, angular texture,
/// and brightness vary per subject, never with the class.
struct SubjectTraits {
    sigma: f64,
    tex_freq: f64,
    tex_phase: f64,
    amplitude: f64,
}

fn subject_traits(seed: u64, subject: usize) -> SubjectTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SUBJECT_STREAM_BASE + subject as u64);
    SubjectTraits {
        sigma: rng.gen_range(1.5..2.3),
        tex_freq: rng.gen_range(2.0..5.0),
        tex_phase: rng.gen_range(0.0..std::f64::consts::TAU),
        amplitude: rng.gen_range(0.7..1.0),
    }
}

/// Renders the flat frames of one clip. The class determines the motion
/// direction; everything else is nuisance drawn from the clip's own RNG
/// stream. A static distractor sprite of the same texture family forces the
/// classifier to read motion, not position or appearance.
fn render_flat_clip(cfg: &GenConfig, instance_id: usize, subject: usize, label: usize) -> Tensor4<f32> {
    let traits = subject_traits(cfg.seed, subject);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(CLIP_STREAM_BASE + instance_id as u64);

    let scale = cfg.width.min(cfg.height) as f64 / 32.0;
    let cx = (cfg.width as f64 - 1.0) / 2.0;
    let cy = (cfg.height as f64 - 1.0) / 2.0;

    // Trajectory midpoint anywhere in a centered disc, so classes must be
    // separated at every eccentricity, including the heavily compressed
    // periphery of the fisheye twin.
    let mid_r = rng.gen_range(0.0..9.0 * scale);
    let mid_a = rng.gen_range(0.0..std::f64::consts::TAU);
    let mid = (cx + mid_r * mid_a.cos(), cy + mid_r * mid_a.sin());
    let angle = std::f64::consts::TAU * label as f64 / cfg.classes as f64
        + rng.gen_range(-0.2..0.2);
    let speed = rng.gen_range(0.7..1.1) * scale;
    let (vx, vy) = (speed * angle.cos(), speed * angle.sin());

    // Static distractor away from the trajectory midpoint.
    let dis_r = rng.gen_range(4.0 * scale..11.0 * scale);
    let dis_a = mid_a + rng.gen_range(1.5..4.8);
    let dis = (cx + dis_r * dis_a.cos(), cy + dis_r * dis_a.sin());
    let dis_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let sigma = traits.sigma * scale;
    let t_half = (cfg.frames - 1) as f64 / 2.0;
    let dims = Dims4::new(cfg.frames, cfg.channels, cfg.height, cfg.width);
    let blob = |x: usize, y: usize, px: f64, py: f64, amp: f64, phase: f64| -> f64 {
        let dx = x as f64 - px;
        let dy = y as f64 - py;
        let d2 = dx * dx + dy * dy;
        if d2 > (4.0 * sigma) * (4.0 * sigma) {
            return 0.0;
        }
        let bump = (-d2 / (2.0 * sigma * sigma)).exp();
        let tex = 0.65 + 0.35 * (traits.tex_freq * dy.atan2(dx) + phase).cos();
        amp * bump * tex
    };
    Tensor4::from_fn(dims, |t, _, y, x| {
        let px = mid.0 + vx * (t as f64 - t_half);
        let py = mid.1 + vy * (t as f64 - t_half);
        let target = blob(x, y, px, py, traits.amplitude, traits.tex_phase);
        let distractor = blob(x, y, dis.0, dis.1, traits.amplitude * 0.85, dis_phase);
        (target + distractor).clamp(0.0, 1.0) as f32
    })
}

/// Generates the whole dataset under `root`: blobs in `flat/` and
/// `fisheye/`, plus `manifest.toml`. Labels are assigned round-robin, so
/// class counts are balanced within one clip.
pub fn generate(cfg: &GenConfig, root: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root.join("flat"))?;
    std::fs::create_dir_all(root.join("fisheye"))?;
    let pinhole = cfg.pinhole();
    let fisheye = cfg.fisheye();

    let records: Vec<ClipRecord> = (0..cfg.total_clips())
        .into_par_iter()
        .map(|instance_id| -> Result<ClipRecord> {
            let subject_id = instance_id / cfg.clips_per_subject;
            let label = instance_id % cfg.classes;
            let flat = render_flat_clip(cfg, instance_id, subject_id, label);
            let warped = warp_frame(&flat, WarpDirection::FlatToFisheye, &pinhole, &fisheye, 0.0)?;
            let flat_rel = format!("flat/{instance_id:06}.uvht");
            let fish_rel = format!("fisheye/{instance_id:06}.uvht");
            blob::write_tensor4(&root.join(&flat_rel), &flat)?;
            blob::write_tensor4(&root.join(&fish_rel), &warped)?;
            Ok(ClipRecord {
                instance_id,
                subject_id,
                label,
                flat: flat_rel,
                fisheye: fish_rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        config: cfg.clone(),
        pinhole,
        fisheye,
        clips: records,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    std::fs::write(root.join("manifest.toml"), text)?;
    Ok(manifest)
}

/// Train/test split keyed purely by subject identity: no subject ever
/// appears on both sides.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub train_subjects: Vec<usize>,
    pub test_subjects: Vec<usize>,
    pub train_clips: Vec<usize>,
    pub test_clips: Vec<usize>,
}

pub fn split_cross_subject(
    manifest: &DatasetManifest,
    train_subject_count: usize,
    seed: u64,
) -> Result<SplitSpec> {
    let subjects = manifest.config.subjects;
    if train_subject_count == 0 || train_subject_count >= subjects {
        return Err(Error::Input(format!(
            "train_subject_count must be in [1, {}), got {train_subject_count}",
            subjects
        )));
    }
    let mut order: Vec<usize> = (0..subjects).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates with the split's own seed, independent of generation.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut train_subjects: Vec<usize> = order[..train_subject_count].to_vec();
    let mut test_subjects: Vec<usize> = order[train_subject_count..].to_vec();
    train_subjects.sort_unstable();
    test_subjects.sort_unstable();
    let in_train: Vec<bool> = {
        let mut v = vec![false; subjects];
        for &s in &train_subjects {
            v[s] = true;
        }
        v
    };
    let mut train_clips = Vec::new();
    let mut test_clips = Vec::new();
    for rec in &manifest.clips {
        if in_train[rec.subject_id] {
            train_clips.push(rec.instance_id);
        } else {
            test_clips.push(rec.instance_id);
        }
    }
    Ok(SplitSpec {
        seed,
        train_subjects,
        test_subjects,
        train_clips,
        test_clips,
    })
}

/// An opened dataset directory with its validated manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let path = root.join("manifest.toml");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::corrupt(&path, format!("cannot read manifest: {e}")))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::corrupt(&path, format!("bad manifest: {e}")))?;
        for (i, rec) in manifest.clips.iter().enumerate() {
            if rec.instance_id != i {
                return Err(Error::corrupt(&path, format!("clip record {i} out of order")));
            }
            if rec.flat.is_empty() || rec.fisheye.is_empty() {
                return Err(Error::corrupt(&path, format!("instance {i} lacks a paired blob path")));
            }
            if rec.label >= manifest.config.classes {
                return Err(Error::corrupt(&path, format!("instance {i} label out of range")));
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Loads one clip, validating blob header, dims, and value range.
    pub fn load_clip<S: Scalar>(&self, instance_id: usize, modality: Modality) -> Result<Clip<S>> {
        let rec = self.manifest.record(instance_id)?;
        let rel = match modality {
            Modality::Flat => &rec.flat,
            Modality::Fisheye => &rec.fisheye,
        };
        let path = self.root.join(rel);
        if !path.is_file() {
            return Err(Error::Input(format!(
                "instance {instance_id}: missing {modality} twin at {}",
                path.display()
            )));
        }
        let frames: Tensor4<S> = blob::read_tensor4(&path)?;
        let cfg = &self.manifest.config;
        let want = Dims4::new(cfg.frames, cfg.channels, cfg.height, cfg.width);
        if frames.dims() != want {
            return Err(Error::corrupt(
                &path,
                format!("blob dims {} disagree with manifest {want}", frames.dims()),
            ));
        }
        let (lo, hi) = frames.min_max();
        if lo.as_f64() < 0.0 || hi.as_f64() > 1.0 {
            return Err(Error::Contract(format!(
                "clip {instance_id} ({modality}) has values outside [0, 1]: [{lo}, {hi}]"
            )));
        }
        Ok(Clip {
            frames,
            label: rec.label,
            subject_id: rec.subject_id,
            instance_id,
            modality,
        })
    }

    /// Loads the paired flat and fisheye clips of one instance.
    pub fn load_pair<S: Scalar>(&self, instance_id: usize) -> Result<(Clip<S>, Clip<S>)> {
        Ok((
            self.load_clip(instance_id, Modality::Flat)?,
            self.load_clip(instance_id, Modality::Fisheye)?,
        ))
    }
}

/// Uniformly samples `n` frames with a fixed phase: frame i of the output is
/// source frame floor(i * stored / n) + phase.
pub fn sample_frames<S: Scalar>(clip: &Tensor4<S>, n: usize, phase: usize) -> Result<Tensor4<S>> {
    let dims = clip.dims();
    if n == 0 || n > dims.frames {
        return Err(Error::Config(format!(
            "cannot sample {n} frames from a {}-frame clip",
            dims.frames
        )));
    }
    let stride = dims.frames / n;
    let max_phase = dims.frames - stride * (n - 1) - 1;
    let phase = phase.min(max_phase);
    let out_dims = Dims4::new(n, dims.channels, dims.height, dims.width);
    let mut out = Tensor4::zeros(out_dims);
    for i in 0..n {
        let src = i * stride + phase;
        for c in 0..dims.channels {
            out.slice_mut(i, c).copy_from_slice(clip.slice(src, c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GenConfig {
        GenConfig {
            seed,
            classes: 4,
            subjects: 4,
            clips_per_subject: 2,
            frames: 6,
            height: 16,
            width: 16,
            pinhole_focal: 4.0,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = small_cfg(7);
        generate(&cfg, dir_a.path()).unwrap();
        generate(&cfg, dir_b.path()).unwrap();
        for rel in ["manifest.toml", "flat/000003.uvht", "fisheye/000005.uvht"] {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical runs");
        }
    }

    #[test]
    fn labels_are_balanced_within_one_clip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(9);
        let manifest = generate(&cfg, dir.path()).unwrap();
        let mut counts = vec![0usize; cfg.classes];
        for rec in &manifest.clips {
            counts[rec.label] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "class counts {counts:?}");
    }

    #[test]
    fn fisheye_twin_is_exact_warp_of_flat_twin() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(11);
        let manifest = generate(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let (flat, fish) = ds.load_pair::<f32>(3).unwrap();
        let recomputed = warp_frame(
            &flat.frames,
            WarpDirection::FlatToFisheye,
            &manifest.pinhole,
            &manifest.fisheye,
            0.0,
        )
        .unwrap();
        assert_eq!(recomputed.data(), fish.frames.data());
    }

    #[test]
    fn roundtrip_load_is_bit_identical_and_validated() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(13);
        generate(&cfg, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let clip = ds.load_clip::<f32>(0, Modality::Flat).unwrap();
        assert_eq!(clip.label, 0);
        assert_eq!(clip.subject_id, 0);
        let (lo, hi) = clip.frames.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
    }

    #[test]
    fn truncated_blob_is_corrupt_data() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small_cfg(15), dir.path()).unwrap();
        let path = dir.path().join("flat/000001.uvht");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let err = ds.load_clip::<f32>(1, Modality::Flat).unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn header_dims_disagreeing_with_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small_cfg(17), dir.path()).unwrap();
        // Overwrite with a valid blob of the wrong shape.
        let path = dir.path().join("flat/000002.uvht");
        blob::write_file(&path, &[2, 1, 4, 4], &vec![0.5; 32]).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let err = ds.load_clip::<f32>(2, Modality::Flat).unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn missing_twin_names_the_instance() {
        let dir = tempfile::tempdir().unwrap();
        generate(&small_cfg(19), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("fisheye/000004.uvht")).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let err = ds.load_pair::<f32>(4).unwrap_err();
        assert!(err.to_string().contains("instance 4"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cross_subject_split_is_disjoint_and_sized() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            subjects: 32,
            clips_per_subject: 1,
            frames: 4,
            height: 16,
            width: 16,
            pinhole_focal: 4.0,
            ..GenConfig::default()
        };
        let manifest = generate(&cfg, dir.path()).unwrap();
        let split = split_cross_subject(&manifest, 24, 5).unwrap();
        assert_eq!(split.train_subjects.len(), 24);
        assert_eq!(split.test_subjects.len(), 8);
        for s in &split.train_subjects {
            assert!(!split.test_subjects.contains(s));
        }
        assert_eq!(split.train_clips.len() + split.test_clips.len(), manifest.clips.len());
        // Different seeds partition differently but keep the sizes.
        let other = split_cross_subject(&manifest, 24, 6).unwrap();
        assert_eq!(other.train_subjects.len(), 24);
        assert_ne!(other.train_subjects, split.train_subjects);
    }

    #[test]
    fn split_rejects_degenerate_counts() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&small_cfg(23), dir.path()).unwrap();
        assert!(split_cross_subject(&manifest, 4, 1).is_err());
        assert!(split_cross_subject(&manifest, 0, 1).is_err());
    }

    #[test]
    fn frame_sampling_takes_uniform_stride() {
        let clip = Tensor4::<f64>::from_fn(Dims4::new(8, 1, 2, 2), |d, _, _, _| d as f64);
        let picked = sample_frames(&clip, 4, 0).unwrap();
        assert_eq!(picked.dims().frames, 4);
        for (i, want) in [0.0, 2.0, 4.0, 6.0].iter().enumerate() {
            assert_eq!(picked.at(i, 0, 0, 0), *want);
        }
        let phased = sample_frames(&clip, 4, 1).unwrap();
        assert_eq!(phased.at(0, 0, 0, 0), 1.0);
    }
}
