mod common;

use beds::fusion::{fuse_all, fuse_model_stain, fuse_stain_model, majority_vote};
use beds::rng::keyed_rng;
use beds::{BinaryMask, MaskGrid, Topology};
use rand::Rng;

fn random_grid(seed: u64) -> MaskGrid {
    let mut rng = keyed_rng(seed, 0, "grid");
    let (s, m) = (rng.random_range(1..=4), rng.random_range(1..=5));
    let masks = (0..s * m).map(|_| BinaryMask::from_fn(4, 4, |_, _| rng.random_bool(0.5))).collect();
    MaskGrid::new(s, m, masks).unwrap()
}

#[test]
fn topologies_match_literal_counting() {
    for seed in 0..300 {
        let grid = random_grid(seed);
        for t in [Topology::All, Topology::ModelStain, Topology::StainModel] {
            let fused = t.fuse(&grid).unwrap();
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(fused.get(x, y), common::literal_vote(&grid, t, x, y), "seed {seed} {t:?} ({x},{y})");
                }
            }
        }
    }
}

#[test]
fn vote_threshold_at_231() {
    for (ones, expected) in [(116, true), (115, false)] {
        let masks: Vec<BinaryMask> = (0..231).map(|k| BinaryMask::new(1, 1, vec![(k < ones) as u8]).unwrap()).collect();
        let grid = MaskGrid::new(7, 33, masks).unwrap();
        assert_eq!(fuse_all(&grid).unwrap().get(0, 0), expected, "{ones} votes");
    }
}

#[test]
fn hand_counted_grid_separates_topologies() {
    let votes = [[1u8, 1, 0], [1, 1, 0], [0, 0, 0]];
    let rows = votes.iter().map(|r| r.iter().map(|&v| BinaryMask::new(1, 1, vec![v]).unwrap()).collect()).collect();
    let grid = MaskGrid::from_rows(rows).unwrap();
    assert!(fuse_model_stain(&grid).unwrap().get(0, 0));
    assert!(fuse_stain_model(&grid).unwrap().get(0, 0));
    assert!(!fuse_all(&grid).unwrap().get(0, 0));
}

#[test]
fn single_mask_fuses_to_itself() {
    let m = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 3 == 0);
    assert_eq!(majority_vote([&m]).unwrap(), m);
    let grid = MaskGrid::new(1, 1, vec![m.clone()]).unwrap();
    for t in [Topology::All, Topology::ModelStain, Topology::StainModel] {
        assert_eq!(t.fuse(&grid).unwrap(), m);
    }
}
