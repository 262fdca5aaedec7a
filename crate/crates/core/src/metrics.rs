//! Evaluation: pixel Dice, watershed instance extraction, object-level F1 and
//! the Wilcoxon signed-rank test.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::image::BinaryMask;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Largest effective sample size handled by exact enumeration.
pub const EXACT_WILCOXON_MAX_N: usize = 20;

fn same_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimensions(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Dice similarity `2|A n B| / (|A| + |B|)`; two empty masks score 1.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_dims(pred, gt)?;
    let (mut inter, mut total) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += u64::from(p & g);
        total += u64::from(p) + u64::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Squared Euclidean distance transform along one line (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                // an infinite parabola never belongs to the envelope
                v[k] = q;
                z[k + 1] = f64::INFINITY;
                break;
            }
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = if f[p] == f64::INFINITY {
            f64::INFINITY
        } else {
            let d = q as f64 - p as f64;
            d * d + f[p]
        };
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel, treating everything outside the image as background.
pub fn distance_transform(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = mask.dims();
    let (pw, ph) = (w + 2, h + 2);
    let mut grid = vec![0.0; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                grid[(y + 1) * pw + x + 1] = f64::INFINITY;
            }
        }
    }
    let n = pw.max(ph);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        f[..pw].copy_from_slice(&grid[y * pw..(y + 1) * pw]);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut dist = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            dist.push(grid[(y + 1) * pw + x + 1].sqrt());
        }
    }
    dist
}

/// Instance labels; 0 is background and instances are numbered `1..=count`
/// in raster order of their first pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

/// Marker policy for [`instance_labels`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WatershedConfig {
    /// Peaks closer than this (chessboard distance) to a stronger peak are
    /// suppressed.
    pub min_peak_separation: usize,
    /// Smallest distance value that may seed a marker.
    pub min_peak_value: f64,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        Self { min_peak_separation: 5, min_peak_value: 2.0 }
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

fn neighbors(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBORS.iter().filter_map(move |&(dx, dy)| {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h).then_some((nx as usize, ny as usize))
    })
}

fn max_filter(values: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = values[y * w + lo..=y * w + hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// 8-connected component ids (1-based, raster order), 0 for background.
pub fn connected_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = mask.dims();
    let mut comp = vec![0u32; w * h];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if mask.data()[start] == 0 || comp[start] != 0 {
            continue;
        }
        count += 1;
        comp[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for (nx, ny) in neighbors(i % w, i / w, w, h) {
                let j = ny * w + nx;
                if mask.data()[j] == 1 && comp[j] == 0 {
                    comp[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    (comp, count as usize)
}

/// Marker-controlled watershed on the negated distance map, restricted to
/// the foreground.
pub fn instance_labels(mask: &BinaryMask) -> LabelMap {
    instance_labels_with(mask, &WatershedConfig::default())
}

pub fn instance_labels_with(mask: &BinaryMask, config: &WatershedConfig) -> LabelMap {
    let (w, h) = mask.dims();
    let dist = distance_transform(mask);
    let (components, n_components) = connected_components(mask);

    // local maxima of the distance map, strongest first
    let local_max = max_filter(&dist, w, h, config.min_peak_separation);
    let mut candidates: Vec<usize> = (0..w * h)
        .filter(|&i| mask.data()[i] == 1 && dist[i] >= config.min_peak_value && dist[i] >= local_max[i])
        .collect();
    candidates.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let r = config.min_peak_separation;
    let mut blocked = vec![false; w * h];
    let mut markers = Vec::new();
    for i in candidates {
        if blocked[i] {
            continue;
        }
        markers.push(i);
        let (x, y) = (i % w, i / w);
        for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                blocked[yy * w + xx] = true;
            }
        }
    }
    let mut has_marker = vec![false; n_components + 1];
    for &i in &markers {
        has_marker[components[i] as usize] = true;
    }
    let mut best: Vec<Option<usize>> = vec![None; n_components + 1];
    for i in 0..w * h {
        let c = components[i] as usize;
        if c == 0 || has_marker[c] {
            continue;
        }
        if best[c].is_none_or(|b| dist[i] > dist[b]) {
            best[c] = Some(i);
        }
    }
    markers.extend(best.into_iter().flatten());

    let mut labels = vec![0u32; w * h];
    let mut heap = BinaryHeap::new();
    let mut counter = 0u64;
    for (k, &i) in markers.iter().enumerate() {
        labels[i] = k as u32 + 1;
        heap.push((dist[i].to_bits(), Reverse(counter), i));
        counter += 1;
    }
    while let Some((_, _, i)) = heap.pop() {
        let label = labels[i];
        for (nx, ny) in neighbors(i % w, i / w, w, h) {
            let j = ny * w + nx;
            if mask.data()[j] == 1 && labels[j] == 0 {
                labels[j] = label;
                heap.push((dist[j].to_bits(), Reverse(counter), j));
                counter += 1;
            }
        }
    }

    // renumber in raster order of first appearance
    let mut remap: HashMap<u32, u32> = HashMap::new();
    for l in labels.iter_mut().filter(|l| **l != 0) {
        let next = remap.len() as u32 + 1;
        *l = *remap.entry(*l).or_insert(next);
    }
    LabelMap { width: w, height: h, labels, count: remap.len() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `(pred_label, gt_label, iou)` for every accepted match.
    pub pairs: Vec<(u32, u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub matches: MatchResult,
}

/// Greedy one-to-one matching of instances by descending IoU.
pub fn match_instances(pred: &LabelMap, gt: &LabelMap, iou_threshold: f64) -> Result<MatchResult> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimensions("label maps differ in size".into()));
    }
    let mut pred_area = vec![0usize; pred.count + 1];
    let mut gt_area = vec![0usize; gt.count + 1];
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        pred_area[p as usize] += 1;
        gt_area[g as usize] += 1;
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut candidates: Vec<(u32, u32, f64)> = inter
        .into_iter()
        .map(|((p, g), i)| {
            let union = pred_area[p as usize] + gt_area[g as usize] - i;
            (p, g, i as f64 / union as f64)
        })
        .filter(|&(_, _, iou)| iou >= iou_threshold)
        .collect();
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut pred_used = vec![false; pred.count + 1];
    let mut gt_used = vec![false; gt.count + 1];
    let mut pairs = Vec::new();
    for (p, g, iou) in candidates {
        if pred_used[p as usize] || gt_used[g as usize] {
            continue;
        }
        pred_used[p as usize] = true;
        gt_used[g as usize] = true;
        pairs.push((p, g, iou));
    }
    let tp = pairs.len();
    Ok(MatchResult { true_positives: tp, false_positives: pred.count - tp, false_negatives: gt.count - tp, pairs })
}

/// Object-level F1 after watershed instance extraction of both masks.
pub fn object_f1(pred: &BinaryMask, gt: &BinaryMask, iou_threshold: f64) -> Result<ObjectScore> {
    object_f1_with(pred, gt, iou_threshold, &WatershedConfig::default())
}

pub fn object_f1_with(
    pred: &BinaryMask,
    gt: &BinaryMask,
    iou_threshold: f64,
    config: &WatershedConfig,
) -> Result<ObjectScore> {
    same_dims(pred, gt)?;
    let matches =
        match_instances(&instance_labels_with(pred, config), &instance_labels_with(gt, config), iou_threshold)?;
    let tp = matches.true_positives as f64;
    let fp = matches.false_positives as f64;
    let fneg = matches.false_negatives as f64;
    if tp + fp + fneg == 0.0 {
        return Ok(ObjectScore { f1: 1.0, precision: 1.0, recall: 1.0, matches });
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    Ok(ObjectScore {
        f1: 2.0 * tp / (2.0 * tp + fp + fneg),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        matches,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WilcoxonMethod {
    /// Exact below the size cutoff, normal approximation above it.
    Auto,
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

/// Two-sided Wilcoxon signed-rank test of paired samples.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(a, b, WilcoxonMethod::Auto)
}

/// Average ranks of `values` (1-based), doubled so ties stay integral.
fn doubled_ranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0u64; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, average doubled = start + 1 + end
        for &i in &order[start..end] {
            ranks[i] = (start + 1 + end) as u64;
        }
        start = end;
    }
    ranks
}

pub fn wilcoxon_signed_rank_with(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Dimensions(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 5 {
        return Err(Error::Config(format!("signed-rank test needs at least 5 pairs, got {}", a.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { statistic: 0.0, p_value: 1.0, n_effective: 0, method });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus2: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total2: u64 = ranks.iter().sum();
    let stat2 = plus2.min(total2 - plus2);
    let statistic = stat2 as f64 / 2.0;

    let use_exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_WILCOXON_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if use_exact {
        if n > 40 {
            return Err(Error::Config(format!("exact signed-rank enumeration is limited to 40 pairs, got {n}")));
        }
        // counts[s] = number of sign assignments whose doubled positive rank sum is s
        let mut counts = vec![0u64; total2 as usize + 1];
        counts[0] = 1;
        for &r in &ranks {
            let r = r as usize;
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        let extreme: u64 = counts
            .iter()
            .enumerate()
            .filter(|&(s, _)| (s as u64).min(total2 - s as u64) <= stat2)
            .map(|(_, c)| c)
            .sum();
        extreme as f64 / 2f64.powi(n as i32)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0;
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        for chunk in sorted.chunk_by(|x, y| x == y) {
            let t = chunk.len() as f64;
            tie_term += t * t * t - t;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            1.0
        } else {
            let z = (((statistic - mean).abs() - 0.5) / var.sqrt()).max(0.0);
            let normal = Normal::standard();
            (2.0 * normal.sf(z)).min(1.0)
        }
    };
    Ok(WilcoxonResult {
        statistic,
        p_value: p_value.min(1.0),
        n_effective: n,
        method: if use_exact { WilcoxonMethod::Exact } else { WilcoxonMethod::Normal },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, rw: usize, rh: usize) -> BinaryMask {
        BinaryMask::from_fn(w, h, |x, y| x >= x0 && x < x0 + rw && y >= y0 && y < y0 + rh)
    }

    #[test]
    fn dice_cases() {
        let a = rect(10, 10, 2, 2, 3, 3);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &rect(10, 10, 6, 6, 2, 2)).unwrap(), 0.0);
        assert_eq!(dsc(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 4)).unwrap(), 1.0);
        assert!(dsc(&a, &BinaryMask::zeros(9, 10)).is_err());
        // |A| = 4, |B| = 6, |A n B| = 3
        let a = BinaryMask::from_fn(10, 1, |x, _| x < 4);
        let b = BinaryMask::from_fn(10, 1, |x, _| (1..7).contains(&x));
        assert!((dsc(&a, &b).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mask = BinaryMask::from_fn(13, 9, |x, y| (x * 7 + y * 3) % 5 != 0 || (x > 4 && y > 3));
        let d = distance_transform(&mask);
        for y in 0..9i64 {
            for x in 0..13i64 {
                let mut best = f64::INFINITY;
                for by in -1..=9i64 {
                    for bx in -1..=13i64 {
                        let inside = bx >= 0 && by >= 0 && bx < 13 && by < 9;
                        if inside && mask.get(bx as usize, by as usize) {
                            continue;
                        }
                        best = best.min((((bx - x).pow(2) + (by - y).pow(2)) as f64).sqrt());
                    }
                }
                let got = d[(y * 13 + x) as usize];
                let expect = if mask.get(x as usize, y as usize) { best } else { 0.0 };
                assert!((got - expect).abs() < 1e-12, "({x},{y}) {got} vs {expect}");
            }
        }
    }

    #[test]
    fn empty_mask_has_no_labels() {
        let l = instance_labels(&BinaryMask::zeros(20, 20));
        assert_eq!(l.count, 0);
        assert!(l.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn small_component_without_peak_still_labeled() {
        let mask = rect(20, 20, 3, 3, 2, 1);
        let l = instance_labels(&mask);
        assert_eq!(l.count, 1);
    }

    #[test]
    fn f1_empty_prediction() {
        let gt =
            BinaryMask::from_fn(40, 20, |x, y| (5..12).contains(&y) && ((2..9).contains(&x) || (25..32).contains(&x)));
        let s = object_f1(&BinaryMask::zeros(40, 20), &gt, 0.5).unwrap();
        assert_eq!(s.matches.false_negatives, 2);
        assert_eq!(s.matches.true_positives, 0);
        assert_eq!(s.f1, 0.0);
        let both_empty = object_f1(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 4), 0.5).unwrap();
        assert_eq!(both_empty.f1, 1.0);
    }

    #[test]
    fn wilcoxon_identical_samples() {
        let a = [0.1, 0.2, 0.3, 0.4, 0.5];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.n_effective, 0);
    }

    #[test]
    fn wilcoxon_rejects_bad_lengths() {
        assert!(wilcoxon_signed_rank(&[1.0; 5], &[1.0; 6]).is_err());
        assert!(wilcoxon_signed_rank(&[1.0; 4], &[0.0; 4]).is_err());
    }

    #[test]
    fn doubled_ranks_average_ties() {
        assert_eq!(doubled_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![7, 2, 7, 4]);
    }
}
