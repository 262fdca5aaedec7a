//! Ensemble-size sweep over all fusion strategies; every grid cell is
//! predicted once and reused.

use beds::harness::{gen_synthetic, run_pipeline, Datasets, PipelineConfig, SyntheticSpec};

fn main() -> beds::Result<()> {
    let spec = SyntheticSpec {
        width: 256,
        height: 256,
        images: 20,
        sites: 3,
        site_spread: 0.4,
        stain_jitter: 0.05,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let mut train = gen_synthetic(&spec);
    let test = train.split_off(16);
    let val = train.split_off(13);
    let mut config = PipelineConfig {
        n: 9,
        m: 2,
        ablation_n: vec![1, 3, 5, 9],
        experiments: vec!["benchmark".parse()?],
        ..PipelineConfig::default()
    };
    config.train.pixels_per_patch = 64;
    let out = run_pipeline(&config, &Datasets { train, val, test }, None)?;

    println!("n  strategy      mean dsc");
    for p in &out.report.plot {
        println!("{:<2} {:<13} {:.4}", p.n, p.strategy, p.mean_dsc);
    }
    println!("{} masks predicted", out.predictions);
    Ok(())
}
