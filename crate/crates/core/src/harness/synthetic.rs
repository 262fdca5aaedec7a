//! Desk-scale synthetic H&E-like corpora with exact nuclei masks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, RgbImage};
use crate::rng::keyed_rng;

use super::Sample;

/// Reference hematoxylin and eosin optical-density directions.
pub const HEMATOXYLIN_OD: [f64; 3] = [0.650, 0.704, 0.286];
pub const EOSIN_OD: [f64; 3] = [0.072, 0.990, 0.105];

/// Least blue-channel lead of hematoxylin over eosin in generated styles.
const MIN_BLUE_MARGIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub images: usize,
    /// Inclusive range of nuclei per image.
    pub nuclei: (usize, usize),
    /// Range of ellipse semi-axes, pixels.
    pub radius: (f64, f64),
    /// Number of lab styles images are drawn from; 0 gives every image an
    /// independent style around the reference stains.
    #[serde(default)]
    pub sites: usize,
    /// Relative spread of site styles around the reference stains.
    #[serde(default)]
    pub site_spread: f64,
    /// Relative per-image perturbation of stain vectors and intensities.
    pub stain_jitter: f64,
    /// Spacing of the background value-noise lattice, pixels.
    pub texture_scale: f64,
    /// Standard deviation of additive optical-density noise.
    pub noise: f64,
    /// Range of nucleus hematoxylin density; low values give faint nuclei.
    pub density: (f64, f64),
    /// Peak hematoxylin density of the background haze.
    #[serde(default = "default_background_hematoxylin")]
    pub background_hematoxylin: f64,
    /// Fraction of the local eosin density kept inside nuclei.
    #[serde(default = "default_nuclear_eosin")]
    pub nuclear_eosin: f64,
    pub seed: u64,
    /// Prefix of generated image ids.
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_background_hematoxylin() -> f64 {
    0.08
}

fn default_nuclear_eosin() -> f64 {
    0.5
}

fn default_prefix() -> String {
    "img".into()
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            images: 8,
            nuclei: (40, 70),
            radius: (6.0, 12.0),
            sites: 0,
            site_spread: 0.0,
            stain_jitter: 0.25,
            texture_scale: 32.0,
            noise: 0.04,
            density: (0.45, 1.0),
            background_hematoxylin: default_background_hematoxylin(),
            nuclear_eosin: default_nuclear_eosin(),
            seed: 0,
            id_prefix: default_prefix(),
        }
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / n)
}

fn jitter_vector<R: Rng>(rng: &mut R, v: [f64; 3], amount: f64) -> [f64; 3] {
    unit(v.map(|x| x * (1.0 + amount * rng.random_range(-1.0..=1.0))).map(|x| x.max(1e-3)))
}

#[derive(Clone, Copy)]
struct Style {
    hem: [f64; 3],
    eos: [f64; 3],
    hem_scale: f64,
    eos_scale: f64,
}

impl Style {
    const REFERENCE: Style = Style { hem: HEMATOXYLIN_OD, eos: EOSIN_OD, hem_scale: 1.0, eos_scale: 1.0 };

    /// Perturbed copy. Draws that would make eosin at least as blue as
    /// hematoxylin are redrawn so the dyes keep their usual hues.
    fn jitter<R: Rng>(self, rng: &mut R, amount: f64) -> Style {
        let mut last = self;
        for _ in 0..64 {
            last = Style {
                hem: jitter_vector(rng, self.hem, amount),
                eos: jitter_vector(rng, self.eos, amount),
                hem_scale: self.hem_scale * (1.0 + amount * rng.random_range(-1.0..=1.0)),
                eos_scale: self.eos_scale * (1.0 + amount * rng.random_range(-1.0..=1.0)),
            };
            if last.hem[2] >= last.eos[2] + MIN_BLUE_MARGIN {
                return last;
            }
        }
        Style { hem: self.hem, eos: self.eos, ..last }
    }
}

/// Bilinear value noise on a lattice of the given spacing, values in [0,1].
struct ValueNoise {
    cols: usize,
    spacing: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new<R: Rng>(rng: &mut R, width: usize, height: usize, spacing: f64) -> Self {
        let spacing = spacing.max(1.0);
        let cols = (width as f64 / spacing).ceil() as usize + 2;
        let rows = (height as f64 / spacing).ceil() as usize + 2;
        Self { cols, spacing, lattice: (0..cols * rows).map(|_| rng.random::<f64>()).collect() }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let fx = x as f64 / self.spacing;
        let fy = y as f64 / self.spacing;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(tx), s(ty));
        let v = |cx: usize, cy: usize| self.lattice[cy * self.cols + cx];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Nucleus {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    density: f64,
}

impl Nucleus {
    fn inside(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Render one image of the corpus; image `index` depends only on
/// `(spec, index)`.
pub fn render_synthetic(spec: &SyntheticSpec, index: usize) -> Sample {
    let (w, h) = (spec.width, spec.height);
    let mut rng = keyed_rng(spec.seed, index as u64, "synthetic");
    let base = if spec.sites == 0 {
        Style::REFERENCE
    } else {
        let site = rng.random_range(0..spec.sites);
        Style::REFERENCE.jitter(&mut keyed_rng(spec.seed, site as u64, "site"), spec.site_spread)
    };
    let Style { hem, eos, hem_scale, eos_scale } = base.jitter(&mut rng, spec.stain_jitter);

    let count = rng.random_range(spec.nuclei.0..=spec.nuclei.1.max(spec.nuclei.0));
    let (rmin, rmax) = (spec.radius.0.min(spec.radius.1), spec.radius.0.max(spec.radius.1));
    let margin_x = rmax.min(w as f64 / 2.0);
    let margin_y = rmax.min(h as f64 / 2.0);
    let (dmin, dmax) = (spec.density.0.min(spec.density.1), spec.density.0.max(spec.density.1));
    let nuclei: Vec<Nucleus> = (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Nucleus {
                cx: rng.random_range(margin_x..=(w as f64 - margin_x)),
                cy: rng.random_range(margin_y..=(h as f64 - margin_y)),
                a: rng.random_range(rmin..=rmax),
                b: rng.random_range(rmin..=rmax),
                cos: theta.cos(),
                sin: theta.sin(),
                density: rng.random_range(dmin..=dmax),
            }
        })
        .collect();

    let eosin_texture = ValueNoise::new(&mut rng, w, h, spec.texture_scale);
    let hem_texture = ValueNoise::new(&mut rng, w, h, spec.texture_scale / 2.0);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise level");

    let mut image = RgbImage::filled(w, h, [255, 255, 255]);
    let mut mask = BinaryMask::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c_e = 0.15 + 0.45 * eosin_texture.at(x, y);
            let mut c_h = spec.background_hematoxylin * hem_texture.at(x, y);
            if let Some(n) = nuclei.iter().find(|n| n.inside(fx, fy)) {
                mask.set(x, y, true);
                c_h += n.density * (0.8 + 0.4 * hem_texture.at(x, y));
                c_e *= spec.nuclear_eosin;
            }
            c_h *= hem_scale;
            c_e *= eos_scale;
            let px: [u8; 3] = std::array::from_fn(|c| {
                let od = (hem[c] * c_h + eos[c] * c_e + noise.sample(&mut rng)).max(0.0);
                (256.0 * (-od).exp() - 1.0).round().clamp(0.0, 255.0) as u8
            });
            image.set_pixel(x, y, px);
        }
    }
    Sample { id: format!("{}_{index:04}", spec.id_prefix), image, mask }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Vec<Sample> {
    use rayon::prelude::*;
    (0..spec.images).into_par_iter().map(|i| render_synthetic(spec, i)).collect()
}
