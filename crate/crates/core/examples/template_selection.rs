//! Pick representative style templates from a corpus with three stain
//! sites.

use beds::harness::{gen_synthetic, SyntheticSpec};
use beds::templates::{extract_corpus_features, kmeans, select_templates};

fn main() -> beds::Result<()> {
    let spec = SyntheticSpec {
        width: 128,
        height: 128,
        images: 30,
        sites: 3,
        site_spread: 0.4,
        stain_jitter: 0.03,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let corpus: Vec<_> = gen_synthetic(&spec).into_iter().map(|s| (s.id, s.image)).collect();
    let features = extract_corpus_features(&corpus);

    let clusters = kmeans(&features, 3, 0, 300)?;
    println!("inertia {:.5}", clusters.final_inertia());
    for k in 0..3 {
        let members: Vec<&str> = features
            .iter()
            .zip(&clusters.assignments)
            .filter(|(_, &a)| a == k)
            .map(|(f, _)| f.image_id.as_str())
            .collect();
        println!("cluster {k}: {} images", members.len());
    }

    let set = select_templates(&features, 3, 0)?;
    println!("templates {:?}", set.template_ids);
    Ok(())
}
