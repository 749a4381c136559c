//! Standard toy run: `cargo run --release --example toy_run -- [epochs] [train] [test]`.
//! `LR` overrides the starting learning rate, `PE` the position embedding
//! (`Sine2D`, `Learnable`, `None`), `OUT` names an output directory.

use transpose::model::ModelConfig;
use transpose::synth;
use transpose::training::{self, TrainConfig, TrainOptions};

fn main() -> transpose::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let epochs = args.first().copied().unwrap_or(30);
    let n_train = args.get(1).copied().unwrap_or(2000);
    let n_test = args.get(2).copied().unwrap_or(200);
    let data = synth::make_dataset(n_train + n_test, 1, 64, 48, 0.0)?;
    let (train, test) = data.split_at(n_train);
    let mut config = TrainConfig {
        epochs,
        ..TrainConfig::toy()
    };
    if let Ok(lr) = std::env::var("LR") {
        config.lr_start = lr.parse().expect("LR");
        config.lr_end = config.lr_start / 10.0;
    }
    let options = TrainOptions {
        out_dir: std::env::var_os("OUT").map(Into::into),
        verbose: true,
    };
    let mut model = ModelConfig::toy();
    if let Ok(pe) = std::env::var("PE") {
        model.pe_kind = serde_json::from_value(serde_json::Value::String(pe)).expect("PE");
    }
    let (_, report) = training::train::<f32>(&model, &config, train, test, &options)?;
    println!(
        "final pck {:.4} in {:.0}s",
        report.final_pck(),
        report.wall_seconds
    );
    Ok(())
}
