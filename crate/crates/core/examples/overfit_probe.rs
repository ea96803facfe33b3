use std::time::Instant;

use candle_core::DType;
use prefill_core::config::Variant;
use prefill_core::fixture::overfit_fixture;
use prefill_core::model::{DecodeMode, LongitudinalModel};
use prefill_core::training::{generate_all, train};

fn main() -> prefill_core::Result<()> {
    let variant: Variant = std::env::args().nth(1).unwrap_or_else(|| "full".into()).parse()?;
    let fx = overfit_fixture(variant)?;
    let lens: Vec<usize> = fx.prepared.iter().map(|s| s.target.ids.len()).collect();
    println!("samples {} vocab {} target lens {:?}", fx.prepared.len(), fx.vocab.len(), lens);
    let model = LongitudinalModel::new(&fx.model, variant, fx.vocab.len(), DType::F32, fx.train.seed)?;
    let start = Instant::now();
    let report = train(&model, &fx.prepared, &[], &fx.train, Some(&mut std::io::stderr()))?;
    println!("epochs {} loss {:.4} in {:.1}s", report.epochs_run, report.final_train_loss, start.elapsed().as_secs_f64());
    let gen = generate_all(&model, &fx.prepared, DecodeMode::Greedy, fx.model.max_target_len, 8)?;
    let exact = fx
        .prepared
        .iter()
        .zip(&gen)
        .filter(|(s, g)| s.target.ids[1..s.target.ids.len() - 1] == g.ids[..])
        .count();
    println!("exact {exact}/{}", gen.len());
    Ok(())
}
