//! Fuse and score masks produced elsewhere: no models or stain fits needed,
//! only grid/<image_id>/stain{p}_model{q}.png and ground truth.

use beds::ensemble::grid_mask_name;
use beds::harness::{report, run_experiment, ExperimentConfig, ExperimentKind, ExternalGrids, ResultTable};
use beds::image::save_mask;
use beds::rng::keyed_rng;
use beds::BinaryMask;
use rand::Rng;

fn main() -> beds::Result<()> {
    let root = std::env::temp_dir().join("beds-external");
    let (stains, models, images) = (7, 33, 6);
    for i in 0..images {
        let id = format!("case{i}");
        let truth = BinaryMask::from_fn(48, 48, |x, y| (x / 12 + y / 12) % 2 == 0);
        save_mask(&truth, root.join("gt").join(format!("{id}.png")))?;
        let mut rng = keyed_rng(9, i, "noise");
        for p in 0..stains {
            for q in 0..models {
                // each mask flips every pixel with probability 0.3
                let m = BinaryMask::from_fn(48, 48, |x, y| truth.get(x, y) ^ rng.random_bool(0.3));
                save_mask(&m, root.join("grid").join(&id).join(grid_mask_name(p, q)))?;
            }
        }
    }

    let source = ExternalGrids::open(root.join("grid"), root.join("gt"))?;
    let mut table = ResultTable::default();
    for kind in ["model-1", "beds-33", "beds-33-model-stain", "beds-33-stain-model", "beds-33-all"] {
        let kind: ExperimentKind = kind.parse()?;
        table.extend(run_experiment(&ExperimentConfig::new(kind, 0), &source)?);
    }
    print!("{}", report(&table, "beds-33-all")?.to_markdown());
    Ok(())
}
