use gti3d::data::{generate, split_cross_subject, Dataset, GenConfig};
use gti3d::model::NetworkSpec;
use gti3d::train::{pretrain_rgb, TrainConfig};

fn main() {
    let iters: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(2400);
    let wide: bool = std::env::args().nth(2).map(|v| v == "wide").unwrap_or(false);
    let mut accs = Vec::new();
    for seed in [1u64, 2, 3] {
        let dir = tempfile::tempdir().unwrap();
        let gen = GenConfig { seed, ..GenConfig::default() };
        generate(&gen, dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let split = split_cross_subject(&ds.manifest, 24, seed).unwrap();
        let mut spec = NetworkSpec::default();
        if wide { spec.block_channels = vec![6, 10, 16]; }
        let cfg = TrainConfig { batch_size: 8, frames: 8, iterations: iters, seed, ..TrainConfig::default() };
        let out = pretrain_rgb::<f32>(&ds, &split, &spec, &cfg).unwrap();
        println!("seed {seed}: rgb train {:.3} test {:.3}", out.train_accuracy, out.test_accuracy);
        accs.push(out.test_accuracy);
    }
    println!("mean rgb test: {:.4}", accs.iter().sum::<f64>() / accs.len() as f64);
}
