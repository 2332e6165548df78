use gti3d::data::{generate, split_cross_subject, Dataset, GenConfig, Modality, sample_frames};
use gti3d::model::{NetworkSpec, StreamKind, StreamWeights, stream_forward};
use gti3d::train::{pretrain_rgb, TrainConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GenConfig::default();
    let manifest = generate(&gen, dir.path()).unwrap();
    let split = split_cross_subject(&manifest, 24, 1).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let spec = NetworkSpec::default();

    // Feature magnitude probe
    let w = StreamWeights::<f32>::init(StreamKind::Rgb, &spec, 1).unwrap();
    let clip = ds.load_clip::<f32>(split.train_clips[0], Modality::Flat).unwrap();
    let frames = sample_frames(&clip.frames, 8, 0).unwrap();
    let fwd = stream_forward(&w, &frames, false).unwrap();
    let mean_abs = |v: &[f32]| v.iter().map(|x| x.abs() as f64).sum::<f64>() / v.len() as f64;
    let inp_act = clip.frames.data().iter().filter(|&&v| v > 0.01).count() as f64 / clip.frames.data().len() as f64;
    println!("input: active frac {:.3}", inp_act);
    for (j, t) in fwd.taps.iter().enumerate() {
        println!("tap{j}: mean|x| {:.4}", mean_abs(t.data()));
    }
    println!("logits: {:?}", fwd.logits.iter().map(|v| format!("{:.4}", v)).collect::<Vec<_>>());

    // Learnability at diagnostic lr
    for lr in [4e-3, 0.05, 0.2] {
        let cfg = TrainConfig { learning_rate: lr, batch_size: 8, frames: 8, iterations: 200, seed: 1, ..TrainConfig::default() };
        let out = pretrain_rgb::<f32>(&ds, &split, &spec, &cfg).unwrap();
        println!("lr {:.3}: train {:.3} test {:.3} loss {:.3}->{:.3}", lr,
            out.train_accuracy, out.test_accuracy,
            out.rows.first().unwrap().total, out.rows.last().unwrap().total);
    }
}
