//! Flat and hierarchical majority vote over a (stain x model) grid where
//! the topologies disagree.

use beds::fusion::{fuse_all, fuse_model_stain, fuse_stain_model};
use beds::{BinaryMask, MaskGrid, Topology};

fn main() -> beds::Result<()> {
    // one pixel; rows are stains, columns models
    let votes = [[1, 1, 0], [1, 1, 0], [0, 0, 0]];
    let rows = votes
        .iter()
        .map(|r| r.iter().map(|&v| BinaryMask::new(1, 1, vec![v])).collect())
        .collect::<beds::Result<Vec<Vec<_>>>>()?;
    let grid = MaskGrid::from_rows(rows)?;

    println!("all          -> {}", fuse_all(&grid)?.data()[0]);
    println!("model-stain  -> {}", fuse_model_stain(&grid)?.data()[0]);
    println!("stain-model  -> {}", fuse_stain_model(&grid)?.data()[0]);
    for t in [Topology::All, Topology::ModelStain, Topology::StainModel] {
        println!("{:12} -> {}", t.name(), t.fuse(&grid)?.count_ones());
    }
    Ok(())
}
