//! End to end on a synthetic corpus: templates, stain fits, stack training,
//! the prediction grid, fusion, scoring and the report. Artifacts go to the
//! directory given as the first argument.

use beds::harness::{gen_synthetic, run_pipeline, Datasets, PipelineConfig, SyntheticSpec};

fn main() -> beds::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("beds-run"), Into::into);

    let spec = SyntheticSpec {
        images: 28,
        sites: 4,
        site_spread: 0.25,
        stain_jitter: 0.05,
        noise: 0.05,
        density: (0.1, 1.0),
        seed: 1,
        ..SyntheticSpec::default()
    };
    let mut train = gen_synthetic(&spec);
    let test = train.split_off(24);
    let val = train.split_off(20);
    let mut config = PipelineConfig { master_seed: 1, n: 7, m: 3, ..PipelineConfig::default() };
    config.train.pixels_per_patch = 16;

    let result = run_pipeline(&config, &Datasets { train, val, test }, Some(&out))?;
    print!("{}", result.report.to_markdown());
    println!("artifacts in {}", out.display());
    Ok(())
}
