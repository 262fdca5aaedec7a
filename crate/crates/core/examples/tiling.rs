//! Overlapping tile planning and AND-merge, checked against whole-image
//! prediction with a per-pixel color rule.

use beds::image::BinaryMask;
use beds::tiling::{extract_patch, merge_tiles, plan_tiles};
use beds::RgbImage;

fn dark(img: &RgbImage) -> BinaryMask {
    BinaryMask::from_fn(img.width(), img.height(), |x, y| {
        let p = img.pixel(x, y);
        (p[0] as u32 + p[1] as u32 + p[2] as u32) < 300
    })
}

fn main() -> beds::Result<()> {
    let grid = plan_tiles(1000, 1000, 256, 20)?;
    println!("x origins {:?}", grid.x_origins());
    println!("{} patches", grid.len());

    let img = RgbImage::from_fn(1000, 1000, |x, y| {
        let v = ((x * 7 + y * 13) % 256) as u8;
        [v, v.wrapping_mul(3), 255 - v]
    });
    let patches =
        (0..grid.len()).map(|i| extract_patch(&img, &grid, i).map(|p| dark(&p))).collect::<beds::Result<Vec<_>>>()?;
    let merged = merge_tiles(&patches, &grid)?;
    println!("tiled == whole image: {}", merged == dark(&img));
    Ok(())
}
