//! Train a small bagged stack of reference segmenters and predict one
//! held-out image with every member.

use beds::ensemble::{predict_image_many, sample_subsets, train_stack, PredictConfig, TrainConfig};
use beds::harness::{gen_synthetic, SyntheticSpec};
use beds::metrics::dsc;

fn main() -> beds::Result<()> {
    let spec = SyntheticSpec { images: 14, seed: 3, ..SyntheticSpec::default() };
    let mut data: Vec<_> = gen_synthetic(&spec).into_iter().map(|s| (s.image, s.mask)).collect();
    let test = data.pop().unwrap();
    let val = data.split_off(10);

    let plan = sample_subsets(data.len(), 5, 2.0 / 3.0, 42)?;
    for (q, s) in plan.subsets.iter().enumerate() {
        println!("subset {q}: {s:?}");
    }
    let hyper = TrainConfig { pixels_per_patch: 256, ..TrainConfig::default() };
    let stack = train_stack(&data, &val, &plan, &hyper)?;

    let masks = predict_image_many(&stack.segmenters(), &test.0, &PredictConfig::default())?;
    for (q, m) in masks.iter().enumerate() {
        println!("model {q}: val dsc {:.4}, test dsc {:.4}", stack.selection_scores[q], dsc(m, &test.1)?);
    }
    if let Some(dir) = std::env::args().nth(1) {
        stack.save(&dir)?;
        println!("saved to {dir}");
    }
    Ok(())
}
