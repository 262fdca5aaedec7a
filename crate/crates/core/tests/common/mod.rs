#![allow(dead_code)]

use beds::ensemble::{Segmenter, SegmenterMeta};
use beds::image::ProbabilityMap;
use beds::rng::keyed_rng;
use beds::{MaskGrid, RgbImage, Topology};
use rand::Rng;

pub fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

pub fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    let a = unit(a);
    let b = unit(b);
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Two non-negative unit stain vectors whose angle is at least
/// `min_degrees`, the first with the larger blue weight.
pub fn random_stains(seed: u64, min_degrees: f64) -> [[f64; 3]; 2] {
    let mut rng = keyed_rng(seed, 0, "stains");
    loop {
        let a = unit([rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)]);
        let b = unit([rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)]);
        let angle = cosine(a, b).clamp(-1.0, 1.0).acos().to_degrees();
        if angle >= min_degrees {
            return if a[2] >= b[2] { [a, b] } else { [b, a] };
        }
    }
}

/// Concentrations with each stain absent from 30% of pixels.
pub fn random_concentrations(seed: u64, pixels: usize) -> Vec<[f64; 2]> {
    let mut rng = keyed_rng(seed, 0, "concentrations");
    (0..pixels)
        .map(|_| std::array::from_fn(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.05..1.5) }))
        .collect()
}

/// `I = (i0 + 1) exp(-W h) - 1`, rounded to 8 bits.
pub fn render(w: &[[f64; 3]; 2], h: &[[f64; 2]], width: usize, height: usize) -> RgbImage {
    assert_eq!(h.len(), width * height);
    let mut k = 0;
    RgbImage::from_fn(width, height, |_, _| {
        let c = h[k];
        k += 1;
        std::array::from_fn(|ch| {
            let od = w[0][ch] * c[0] + w[1][ch] * c[1];
            (256.0 * (-od).exp() - 1.0).round().clamp(0.0, 255.0) as u8
        })
    })
}

pub fn random_image(seed: u64, width: usize, height: usize) -> RgbImage {
    let mut rng = keyed_rng(seed, 0, "image");
    RgbImage::from_fn(width, height, |_, _| rng.random())
}

pub fn strict_majority(bits: &[bool]) -> bool {
    2 * bits.iter().filter(|&&b| b).count() > bits.len()
}

/// Per-pixel vote of one topology, counted literally.
pub fn literal_vote(grid: &MaskGrid, topology: Topology, x: usize, y: usize) -> bool {
    let (s, m) = (grid.stains(), grid.models());
    let v = |p: usize, q: usize| grid.get(p, q).get(x, y);
    match topology {
        Topology::All => {
            strict_majority(&(0..s).flat_map(|p| (0..m).map(move |q| (p, q))).map(|(p, q)| v(p, q)).collect::<Vec<_>>())
        }
        // models fused within each stain first
        Topology::ModelStain => strict_majority(
            &(0..s).map(|p| strict_majority(&(0..m).map(|q| v(p, q)).collect::<Vec<_>>())).collect::<Vec<_>>(),
        ),
        Topology::StainModel => strict_majority(
            &(0..m).map(|q| strict_majority(&(0..s).map(|p| v(p, q)).collect::<Vec<_>>())).collect::<Vec<_>>(),
        ),
    }
}

/// Two-sided p by enumerating all 2^n sign assignments of the average
/// ranks of |d|, zeros dropped.
pub fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks: Vec<f64> = d
        .iter()
        .map(|v| {
            let less = d.iter().filter(|u| u.abs() < v.abs()).count() as f64;
            let equal = d.iter().filter(|u| u.abs() == v.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let observed = plus.min(total - plus);
    let mut extreme = 0u64;
    for signs in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s.min(total - s) <= observed + 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

/// Foreground probability is the blue channel; a pixel-color-only predictor.
pub struct Blueish(SegmenterMeta);

impl Segmenter for Blueish {
    fn predict_proba(&self, patch: &RgbImage) -> ProbabilityMap {
        ProbabilityMap {
            width: patch.width(),
            height: patch.height(),
            data: patch.pixels().map(|p| p[2] as f32 / 255.0).collect(),
        }
    }

    fn meta(&self) -> &SegmenterMeta {
        &self.0
    }
}

pub fn blueish() -> Blueish {
    Blueish(SegmenterMeta { seed: 0, subset_id: None, val_dsc: 0.0, epochs_run: 0, best_epoch: 0 })
}
