//! Fit stain models to two differently stained images and re-render one in
//! the other's style.

use beds::harness::{gen_synthetic, SyntheticSpec};
use beds::image::save_image;
use beds::stain::{fit_stain_model, normalize_stain, StainFitConfig};

fn main() -> beds::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("beds-stain"), Into::into);
    std::fs::create_dir_all(&out).map_err(|e| beds::Error::Io { path: out.clone(), source: e })?;

    let spec =
        SyntheticSpec { width: 256, height: 256, images: 2, stain_jitter: 0.3, seed: 4, ..SyntheticSpec::default() };
    let corpus = gen_synthetic(&spec);
    let (source, template) = (&corpus[0], &corpus[1]);

    let config = StainFitConfig::default();
    let source_model = fit_stain_model(&source.image, &config, 0)?;
    let template_model = fit_stain_model(&template.image, &config, 1)?;
    for (name, m) in [("source", &source_model), ("template", &template_model)] {
        println!("{name}: hematoxylin {:.3?} eosin {:.3?} c99 {:.3?}", m.w[0], m.w[1], m.c_percentile);
    }

    let normalized = normalize_stain(&source.image, &source_model, &template_model)?;
    save_image(&source.image, out.join("source.png"))?;
    save_image(&template.image, out.join("template.png"))?;
    save_image(&normalized, out.join("normalized.png"))?;
    template_model.save(out.join("template.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}
