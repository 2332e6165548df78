use gti3d::data::{generate, split_cross_subject, Dataset, GenConfig};
use gti3d::model::{Ablation, NetworkSpec};
use gti3d::train::{pretrain_rgb, train_fisheye, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(1);
    let init_from_rgb = args.get(3).map(|v| v == "adopt").unwrap_or(false);

    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig { seed, ..GenConfig::default() };
    let t0 = Instant::now();
    let manifest = generate(&gen, dir.path()).unwrap();
    println!("gen: {} clips in {:?}", manifest.clips.len(), t0.elapsed());
    let split = split_cross_subject(&manifest, 24, seed).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let spec = NetworkSpec::default();
    let cfg = TrainConfig { batch_size: 8, frames: 8, iterations: iters, seed, ..TrainConfig::default() };

    let t0 = Instant::now();
    let rgb = pretrain_rgb::<f32>(&ds, &split, &spec, &cfg).unwrap();
    println!("rgb:         train {:.3} test {:.3}  loss {:.3}->{:.3}  ({:?})",
        rgb.train_accuracy, rgb.test_accuracy,
        rgb.rows.first().unwrap().total, rgb.rows.last().unwrap().total, t0.elapsed());

    for ablation in [Ablation::Plain, Ablation::Guidance, Ablation::Transformer, Ablation::Full] {
        let t0 = Instant::now();
        // Plain always runs reference-free; the others adopt when asked.
        let adopt_this = init_from_rgb && ablation != Ablation::Plain;
        let fcfg = TrainConfig { init_from_rgb: adopt_this, ..cfg.clone() };
        let reference = if ablation.uses_guidance() || adopt_this { Some(&rgb.weights) } else { None };
        let out = train_fisheye::<f32>(&ds, &split, reference, &spec, &fcfg, ablation).unwrap();
        let lg_first: f64 = out.rows.iter().take(10).map(|r| r.guidance).sum::<f64>() / 10.0;
        let lg_last = out.rows.last().unwrap().guidance;
        println!("{:12} train {:.3} test {:.3}  loss {:.3}->{:.3}  L_G {:.4}->{:.4}  ({:?})",
            ablation.to_string(), out.train_accuracy, out.test_accuracy,
            out.rows.first().unwrap().total, out.rows.last().unwrap().total,
            lg_first, lg_last, t0.elapsed());
    }
}
