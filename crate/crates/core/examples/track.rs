use gti3d::data::{generate, split_cross_subject, Dataset, GenConfig};
use gti3d::model::{Ablation, NetworkSpec};
use gti3d::train::{pretrain_rgb, train_fisheye, TrainConfig};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(1200);
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig::default();
    generate(&gen, dir.path()).unwrap();
    let manifest = gti3d::data::Dataset::open(dir.path()).unwrap().manifest;
    let split = split_cross_subject(&manifest, 24, 1).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let spec = NetworkSpec::default();
    let cfg = TrainConfig { batch_size: 8, frames: 8, iterations: iters, seed: 1, init_from_rgb: std::env::args().nth(3).map(|v| v == "adopt").unwrap_or(false), ..TrainConfig::default() };
    let rgb_cfg = TrainConfig { iterations: std::env::args().nth(2).and_then(|v| v.parse().ok()).unwrap_or(iters), ..cfg.clone() };
    let rgb = pretrain_rgb::<f32>(&ds, &split, &spec, &rgb_cfg).unwrap();
    println!("rgb test {:.3}", rgb.test_accuracy);
    // tap sharpness after pretraining
    let clip = ds.load_clip::<f32>(split.train_clips[0], gti3d::data::Modality::Flat).unwrap();
    let frames = gti3d::data::sample_frames(&clip.frames, cfg.frames, 0).unwrap();
    let (_, taps) = gti3d::model::rgb_forward(&rgb.weights, &frames).unwrap();
    for (j, t) in taps.iter().enumerate() {
        let rms = (t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / t.data().len() as f64).sqrt();
        println!("rgb tap{j} rms {:.3}", rms);
    }
    let out = train_fisheye::<f32>(&ds, &split, Some(&rgb.weights), &spec, &cfg, Ablation::Full).unwrap();
    for row in out.rows.iter().step_by(50) {
        println!("it {:4}  L_G {:7.3}  L_C {:7.3}  kl: {}", row.iteration, row.guidance, row.class_loss,
            row.per_module.iter().map(|v| format!("{:6.3}", v)).collect::<Vec<_>>().join(" "));
    }
    let last = out.rows.last().unwrap();
    println!("final it {} L_G {:.3} L_C {:.3}  train {:.3} test {:.3}", last.iteration, last.guidance, last.class_loss, out.train_accuracy, out.test_accuracy);
}
