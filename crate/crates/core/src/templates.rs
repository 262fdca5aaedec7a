//! Stain-style template selection: per-image feature vectors, k-means
//! clustering, and picking the image nearest each cluster center.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::rng::keyed_rng;
use crate::stain::{rgb_to_od, DEFAULT_I0};

pub const FEATURE_LEN: usize = 72;
pub const DEFAULT_TEMPLATE_COUNT: usize = 6;
pub const DEFAULT_KMEANS_ITERS: usize = 300;

const HIST_BINS: usize = 8;
const GRADIENT_BINS: usize = 12;
const GRADIENT_RANGE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(image_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self { image_id: image_id.into(), values }
    }
}

/// Which feature extractor produced a template set's vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Builtin,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub m: usize,
    pub seed: u64,
    pub template_ids: Vec<String>,
    #[serde(default, skip_serializing)]
    pub centroids: Vec<Vec<f64>>,
    pub feature_kind: FeatureKind,
}

impl TemplateSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("template set serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn bin(value: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = (value - lo) / (hi - lo);
    ((t * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// The built-in 72-dimensional color/texture descriptor, L2-normalized.
///
/// Layout: 8-bin OD histograms (24), 8-bin RGB histograms (24), RGB mean and
/// std scaled to `[0,1]` (6), OD mean and std (6), 12-bin gradient magnitude
/// histogram of the gray level (12). Histograms are pixel fractions.
pub fn extract_features(image: &RgbImage) -> Vec<f64> {
    let n = image.pixel_count() as f64;
    let od = rgb_to_od(image, DEFAULT_I0);
    let od_max = 256f64.ln();
    let mut f = vec![0.0; FEATURE_LEN];

    let mut rgb_sum = [0.0; 3];
    let mut od_sum = [0.0; 3];
    for (px, o) in image.pixels().zip(&od.data) {
        for c in 0..3 {
            f[c * HIST_BINS + bin(o[c], 0.0, od_max, HIST_BINS)] += 1.0;
            f[24 + c * HIST_BINS + px[c] as usize / 32] += 1.0;
            rgb_sum[c] += px[c] as f64 / 255.0;
            od_sum[c] += o[c];
        }
    }
    for v in &mut f[..48] {
        *v /= n;
    }
    let rgb_mean = rgb_sum.map(|s| s / n);
    let od_mean = od_sum.map(|s| s / n);
    let mut rgb_var = [0.0; 3];
    let mut od_var = [0.0; 3];
    for (px, o) in image.pixels().zip(&od.data) {
        for c in 0..3 {
            rgb_var[c] += (px[c] as f64 / 255.0 - rgb_mean[c]).powi(2);
            od_var[c] += (o[c] - od_mean[c]).powi(2);
        }
    }
    for c in 0..3 {
        f[48 + c] = rgb_mean[c];
        f[51 + c] = (rgb_var[c] / n).sqrt();
        f[54 + c] = od_mean[c];
        f[57 + c] = (od_var[c] / n).sqrt();
    }

    let (w, h) = image.dims();
    let gray: Vec<f64> = image.pixels().map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0)).collect();
    for y in 0..h {
        for x in 0..w {
            let gx = (gray[y * w + (x + 1).min(w - 1)] - gray[y * w + x.saturating_sub(1)]) / 2.0;
            let gy = (gray[(y + 1).min(h - 1) * w + x] - gray[y.saturating_sub(1) * w + x]) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            f[60 + bin(mag, 0.0, GRADIENT_RANGE, GRADIENT_BINS)] += 1.0 / n;
        }
    }

    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut f {
            *v /= norm;
        }
    }
    f
}

/// Built-in features for a named corpus, computed in parallel.
pub fn extract_corpus_features(corpus: &[(String, RgbImage)]) -> Vec<FeatureVector> {
    corpus.par_iter().map(|(id, img)| FeatureVector::new(id.clone(), extract_features(img))).collect()
}

/// Read externally computed embeddings from a CSV with header
/// `image_id,f0,f1,...`.
pub fn ingest_embeddings(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    let header_width = reader.headers().map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?.len();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Ingest(format!("row {row}: {e}")))?;
        if record.len() != header_width {
            return Err(Error::Ingest(format!("row {row} has {} columns, header has {header_width}", record.len())));
        }
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::Ingest(format!("duplicate image id {id:?} at row {row}")));
        }
        let values = record
            .iter()
            .enumerate()
            .skip(1)
            .map(|(col, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Ingest(format!("row {row}, column {col}: {cell:?} is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(FeatureVector::new(id, values));
    }
    if out.is_empty() {
        return Err(Error::Ingest(format!("{}: no rows", path.display())));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Inertia after every assignment step.
    pub inertia: Vec<f64>,
}

impl KMeansResult {
    pub fn final_inertia(&self) -> f64 {
        *self.inertia.last().expect("at least one assignment step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus_init(points: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = keyed_rng(seed, 0, "kmeans++");
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            (0..points.len()).find(|i| !chosen.contains(i)).expect("at least k points")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

/// Lloyd's k-means with k-means++ seeding.
///
/// Stops at an assignment fixpoint or after `max_iters` updates. A cluster
/// left empty by an update is re-seeded at the point farthest from its own
/// centroid.
pub fn kmeans(features: &[FeatureVector], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    let points: Vec<&[f64]> = features.iter().map(|f| f.values.as_slice()).collect();
    kmeans_points(&points, k, seed, max_iters)
}

pub(crate) fn kmeans_points(points: &[&[f64]], k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::Config(format!(
            "k-means needs at least k >= 1 points, got {} points for k = {k}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimensions("feature vectors have different lengths".into()));
    }

    let mut centroids = plus_plus_init(points, k, seed);
    let (mut assignments, dists) = assign(points, &centroids);
    let mut inertia = vec![dists.iter().sum::<f64>()];
    for _ in 0..max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut reseeded = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .filter(|i| !reseeded.contains(i))
                    .map(|i| (i, sq_dist(points[i], &centroids[assignments[i]])))
                    .fold((usize::MAX, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                reseeded.insert(far);
                centroids[c] = points[far].to_vec();
            }
        }
        let (next, dists) = assign(points, &centroids);
        inertia.push(dists.iter().sum());
        let done = next == assignments;
        assignments = next;
        if done {
            break;
        }
    }
    Ok(KMeansResult { assignments, centroids, inertia })
}

/// Cluster the corpus into `m` styles and pick, per cluster center, the
/// nearest not-yet-chosen image (ties by smallest id).
pub fn select_templates(corpus: &[FeatureVector], m: usize, seed: u64) -> Result<TemplateSet> {
    select_templates_with(corpus, m, seed, DEFAULT_KMEANS_ITERS, FeatureKind::Builtin)
}

pub fn select_templates_with(
    corpus: &[FeatureVector],
    m: usize,
    seed: u64,
    max_iters: usize,
    feature_kind: FeatureKind,
) -> Result<TemplateSet> {
    if corpus.len() < m {
        return Err(Error::Config(format!("corpus of {} images is smaller than m = {m}", corpus.len())));
    }
    if m == 0 {
        return Ok(TemplateSet { m, seed, template_ids: Vec::new(), centroids: Vec::new(), feature_kind });
    }
    let result = kmeans(corpus, m, seed, max_iters)?;
    let mut used = HashSet::new();
    let mut template_ids = Vec::with_capacity(m);
    for centroid in &result.centroids {
        let mut ranked: Vec<(f64, &str)> =
            corpus.iter().map(|f| (sq_dist(&f.values, centroid), f.image_id.as_str())).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
        let pick = ranked
            .into_iter()
            .find(|(_, id)| !used.contains(*id))
            .expect("corpus has at least m distinct entries")
            .1
            .to_string();
        used.insert(pick.clone());
        template_ids.push(pick);
    }
    Ok(TemplateSet { m, seed, template_ids, centroids: result.centroids, feature_kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn constant_image_features() {
        let f = extract_features(&RgbImage::filled(16, 16, [200, 100, 50]));
        assert_eq!(f.len(), FEATURE_LEN);
        for c in 0..6 {
            let nonzero = f[c * 8..c * 8 + 8].iter().filter(|&&v| v > 0.0).count();
            assert_eq!(nonzero, 1, "channel histogram {c}");
        }
        for i in [51, 52, 53, 57, 58, 59] {
            assert!(f[i].abs() < 1e-12, "std feature {i}: {}", f[i]);
        }
        assert!(f[60] > 0.0 && f[61..].iter().all(|&v| v == 0.0));
        assert!((f.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hue_rotation_changes_features() {
        let a = RgbImage::from_fn(32, 32, |x, y| [200, 80 + (x % 7) as u8 * 10, 150 + (y % 5) as u8 * 5]);
        let b = RgbImage::from_fn(32, 32, |x, y| {
            let p = a.pixel(x, y);
            [p[1], p[2], p[0]]
        });
        let (fa, fb) = (extract_features(&a), extract_features(&b));
        assert_eq!(fa, extract_features(&a));
        assert!(sq_dist(&fa, &fb) > 0.0);
    }

    #[test]
    fn ingest_reads_rows_in_order() {
        let f = write_csv("image_id,f0,f1,f2,f3\na,1,2,3,4\nb,5,6,7,8\nc,0,0,0,0.5\n");
        let v = ingest_embeddings(f.path()).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1].image_id, "b");
        assert!(v.iter().all(|f| f.values.len() == 4));
    }

    #[test]
    fn ingest_errors() {
        let empty = write_csv("");
        assert!(ingest_embeddings(empty.path()).unwrap_err().to_string().contains("no rows"));
        let header_only = write_csv("image_id,f0\n");
        assert!(ingest_embeddings(header_only.path()).unwrap_err().to_string().contains("no rows"));
        let nan = write_csv("image_id,f0,f1\na,1,2\nb,3,NaN\n");
        let msg = ingest_embeddings(nan.path()).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("column 2"), "{msg}");
        let ragged = write_csv("image_id,f0,f1\na,1,2\nb,3\n");
        assert!(ingest_embeddings(ragged.path()).unwrap_err().to_string().contains("row 2"));
        let text = write_csv("image_id,f0\na,x\n");
        assert!(ingest_embeddings(text.path()).is_err());
        let dup = write_csv("image_id,f0\na,1\na,2\n");
        assert!(ingest_embeddings(dup.path()).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn k_equals_one_gives_the_mean() {
        let pts: Vec<FeatureVector> =
            (0..5).map(|i| FeatureVector::new(format!("p{i}"), vec![i as f64, (i * i) as f64])).collect();
        let r = kmeans(&pts, 1, 3, 50).unwrap();
        assert!((r.centroids[0][0] - 2.0).abs() < 1e-12);
        assert!((r.centroids[0][1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let pts: Vec<FeatureVector> =
            (0..7).map(|i| FeatureVector::new(format!("p{i}"), vec![i as f64, (i % 3) as f64])).collect();
        let r = kmeans(&pts, 7, 11, 50).unwrap();
        assert_eq!(r.final_inertia(), 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 7);
    }

    #[test]
    fn too_few_points() {
        let pts = vec![FeatureVector::new("a", vec![1.0])];
        assert!(kmeans(&pts, 2, 0, 10).is_err());
        assert!(select_templates(&pts, 2, 0).is_err());
    }

    #[test]
    fn identical_corpus_still_yields_distinct_templates() {
        let pts: Vec<FeatureVector> =
            ["c", "a", "b"].iter().map(|id| FeatureVector::new(*id, vec![0.5, 0.5])).collect();
        let t = select_templates(&pts, 3, 9).unwrap();
        let mut ids = t.template_ids.clone();
        ids.sort();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(t.template_ids[0], "a");
    }

    #[test]
    fn template_set_json_layout() {
        let t = TemplateSet {
            m: 2,
            seed: 4,
            template_ids: vec!["x".into(), "y".into()],
            centroids: vec![vec![0.0], vec![1.0]],
            feature_kind: FeatureKind::Builtin,
        };
        let json: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert_eq!(json["feature_kind"], "builtin");
        assert_eq!(json["m"], 2);
        assert!(json.get("centroids").is_none());
    }
}
