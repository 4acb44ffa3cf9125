//! Full model against the no-PGA ablation on synthetic data, with the
//! least-squares baseline for scale.
//!
//! cargo run --release -p pgformer --example ablation -- [samples] [epochs] [seeds] [flip]

use std::time::Instant;

use pgformer::data::{synth_generate, LinearBaseline, SynthConfig};
use pgformer::eval::mpjpe;
use pgformer::training::{evaluate, train_pgformer};
use pgformer::{PgFormer, PgFormerConfig, Tensor, TrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> pgformer::Result<()> {
    let (samples, epochs, seeds) = (arg(1, 5000), arg(2, 20), arg(3, 3) as u64);
    let flip = std::env::args().nth(4).is_some_and(|a| a == "flip");
    let data = synth_generate(&SynthConfig { samples, ..SynthConfig::default() })?;
    let (train, val) = data.split(0, 0.9);
    let lb = LinearBaseline::fit(&train.inputs(), &train.targets(0))?;
    let p = lb.predict(&val.inputs())?;
    let p = Tensor::from_fn(p.shape(), |i| p.data()[i] * 1000.0);
    println!("linear baseline {:.2} mm", mpjpe(&p, &val.joints3d_mm(), 0)?);
    for seed in 0..seeds {
        for use_pga in [true, false] {
            let cfg = PgFormerConfig { use_pga, ..PgFormerConfig::toy(64, 3) };
            let tc = TrainConfig { epochs, flip_augment: flip, seed, ..TrainConfig::gt() };
            let mut m = PgFormer::build(&cfg, seed)?;
            let t = Instant::now();
            train_pgformer(&mut m, &train, None, &tc, None)?;
            println!("seed {seed} pga {use_pga}: {:.2} mm in {:.0} s", evaluate(&m, &val)?, t.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
