//! Runs every acceptance criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Tolerances are pinned below. Numeric
//! arguments select criteria by number.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use beds::ensemble::{predict_image, PredictConfig};
use beds::fusion::fuse_all;
use beds::harness::{
    gen_synthetic, report, run_experiment, run_pipeline, Datasets, ExperimentConfig, ExperimentKind, ExternalGrids,
    GridSource, PipelineConfig, ResultTable, Sample, Strategy, SyntheticSpec,
};
use beds::image::save_mask;
use beds::metrics::{dsc, instance_labels, object_f1, wilcoxon_signed_rank_with, WilcoxonMethod};
use beds::rng::keyed_rng;
use beds::stain::{
    fit_stain_model, fit_stain_model_traced, normalize_stain, pixel_objective, rgb_to_od, solve_pixel, StainFitConfig,
};
use beds::templates::{extract_corpus_features, select_templates};
use beds::tiling::plan_tiles;
use beds::{BinaryMask, MaskGrid, RgbImage, Topology};
use common::{brute_force_p, cosine, literal_vote, random_concentrations, random_stains, render};
use rand::Rng;

const FUSION_GRIDS: usize = 1000;
const FUSION_BUDGET: Duration = Duration::from_secs(10);
const RECOVERY_IMAGES: u64 = 20;
const RECOVERY_MIN_ANGLE: f64 = 25.0;
const RECOVERY_MIN_COSINE: f64 = 0.99;
const RECOVERY_BUDGET: Duration = Duration::from_secs(60);
// relative slack on "non-increasing" for floating-point summation order
const OBJECTIVE_SLACK: f64 = 1e-9;
const SELF_NORMALIZATION_MIN_PSNR: f64 = 30.0;
const GRID_ORACLE_PIXELS: u64 = 100;
const GRID_ORACLE_STEP: f64 = 0.01;
const GRID_ORACLE_TOLERANCE: f64 = 1e-4;
const TILING_IMAGES: u64 = 10;
const WILCOXON_EXACT_TOLERANCE: f64 = 1e-12;
const WILCOXON_NORMAL_TOLERANCE: f64 = 0.01;
const BENEFIT_SEEDS: u64 = 5;
const BENEFIT_VS_INDIVIDUAL: usize = 5;
const BENEFIT_VS_BENCHMARK: usize = 4;
const BENEFIT_BUDGET: Duration = Duration::from_secs(15 * 60);

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

fn fusion_oracle() -> Check {
    let start = Instant::now();
    let mut rng = keyed_rng(2024, 0, "acceptance-grids");
    for g in 0..FUSION_GRIDS {
        let (s, m) = (rng.random_range(1..=4), rng.random_range(1..=5));
        let masks = (0..s * m).map(|_| BinaryMask::from_fn(4, 4, |_, _| rng.random_bool(0.5))).collect();
        let grid = MaskGrid::new(s, m, masks).map_err(e)?;
        for t in [Topology::All, Topology::ModelStain, Topology::StainModel] {
            let fused = t.fuse(&grid).map_err(e)?;
            for y in 0..4 {
                for x in 0..4 {
                    ensure(fused.get(x, y) == literal_vote(&grid, t, x, y), || {
                        format!("grid {g} {} at ({x},{y})", t.name())
                    })?;
                }
            }
        }
    }
    let took = start.elapsed();
    ensure(took < FUSION_BUDGET, || format!("took {took:.2?}"))?;
    Ok(format!("{FUSION_GRIDS} grids x 3 topologies bit-exact in {took:.2?}"))
}

fn vote_threshold() -> Check {
    let mut seen = Vec::new();
    for ones in [116, 115] {
        let masks = (0..231).map(|k| BinaryMask::new(1, 1, vec![(k < ones) as u8]).unwrap()).collect();
        let v = fuse_all(&MaskGrid::new(7, 33, masks).map_err(e)?).map_err(e)?.get(0, 0);
        seen.push(v);
    }
    ensure(seen == [true, false], || format!("116 -> {}, 115 -> {}", seen[0], seen[1]))?;
    Ok("116/231 -> 1, 115/231 -> 0".into())
}

fn topology_non_equivalence() -> Check {
    let rows = [[1u8, 1, 0], [1, 1, 0], [0, 0, 0]]
        .iter()
        .map(|r| r.iter().map(|&v| BinaryMask::new(1, 1, vec![v]).unwrap()).collect())
        .collect();
    let grid = MaskGrid::from_rows(rows).map_err(e)?;
    let ms = Topology::ModelStain.fuse(&grid).map_err(e)?.get(0, 0);
    let all = Topology::All.fuse(&grid).map_err(e)?.get(0, 0);
    ensure(ms && !all, || format!("model-stain {ms}, all {all}"))?;
    Ok("model-stain = 1, all = 0".into())
}

fn snmf_recovery() -> Check {
    let start = Instant::now();
    let mut worst = 1.0f64;
    for seed in 0..RECOVERY_IMAGES {
        let w0 = random_stains(500 + seed, RECOVERY_MIN_ANGLE);
        let img = render(&w0, &random_concentrations(500 + seed, 128 * 128), 128, 128);
        let (model, trace) = fit_stain_model_traced(&img, &StainFitConfig::default(), seed).map_err(e)?;
        let direct = cosine(model.w[0], w0[0]).min(cosine(model.w[1], w0[1]));
        let swapped = cosine(model.w[0], w0[1]).min(cosine(model.w[1], w0[0]));
        let c = direct.max(swapped);
        worst = worst.min(c);
        ensure(c >= RECOVERY_MIN_COSINE, || format!("image {seed}: cosine {c:.5}"))?;
        for (k, pair) in trace.objectives.windows(2).enumerate() {
            ensure(pair[1] <= pair[0] + OBJECTIVE_SLACK * pair[0].abs().max(1.0), || {
                format!("image {seed}: objective rose at iteration {}: {} -> {}", k + 1, pair[0], pair[1])
            })?;
        }
    }
    let took = start.elapsed();
    ensure(took < RECOVERY_BUDGET, || format!("took {took:.2?}"))?;
    Ok(format!("worst cosine {worst:.5} over {RECOVERY_IMAGES} images, objectives monotone, {took:.2?}"))
}

fn tissue_psnr(a: &RgbImage, b: &RgbImage, beta: f64, i0: f64) -> f64 {
    let od = rgb_to_od(a, i0);
    let (mut se, mut n) = (0.0, 0.0);
    for (k, (pa, pb)) in a.pixels().zip(b.pixels()).enumerate() {
        if od.data[k].iter().cloned().fold(0.0, f64::max) > beta {
            for c in 0..3 {
                se += (pa[c] as f64 - pb[c] as f64).powi(2);
                n += 1.0;
            }
        }
    }
    if se == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (255.0f64.powi(2) / (se / n)).log10()
    }
}

fn benefit_spec(seed: u64, images: usize) -> SyntheticSpec {
    SyntheticSpec {
        images,
        sites: 4,
        site_spread: 0.25,
        stain_jitter: 0.05,
        noise: 0.05,
        density: (0.1, 1.0),
        seed,
        ..SyntheticSpec::default()
    }
}

fn stain_normalization() -> Check {
    let corpus: Vec<(String, RgbImage)> =
        gen_synthetic(&SyntheticSpec { width: 256, height: 256, images: 24, seed: 77, ..SyntheticSpec::default() })
            .into_iter()
            .map(|s| (s.id, s.image))
            .collect();
    let templates = select_templates(&extract_corpus_features(&corpus), 6, 3).map_err(e)?;
    let mut worst = f64::INFINITY;
    for (t, id) in templates.template_ids.iter().enumerate() {
        let img = &corpus.iter().find(|(i, _)| i == id).unwrap().1;
        let model = fit_stain_model(img, &StainFitConfig::default(), t as u64).map_err(e)?;
        let out = normalize_stain(img, &model, &model).map_err(e)?;
        let psnr = tissue_psnr(img, &out, model.beta, model.i0);
        worst = worst.min(psnr);
        ensure(psnr >= SELF_NORMALIZATION_MIN_PSNR, || format!("template {id}: {psnr:.2} dB"))?;
    }

    let mut rng = keyed_rng(31, 0, "acceptance-pixels");
    let steps = (3.0 / GRID_ORACLE_STEP).round() as usize;
    let mut margin = f64::INFINITY;
    for i in 0..GRID_ORACLE_PIXELS {
        let w = random_stains(900 + i, RECOVERY_MIN_ANGLE);
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0));
        let ours = pixel_objective(&v, &w, 0.1, solve_pixel(&v, &w, 0.1, [0.0, 0.0]));
        let mut grid = f64::INFINITY;
        for a in 0..=steps {
            for b in 0..=steps {
                grid =
                    grid.min(pixel_objective(&v, &w, 0.1, [a as f64 * GRID_ORACLE_STEP, b as f64 * GRID_ORACLE_STEP]));
            }
        }
        margin = margin.min(grid - ours);
        ensure(ours <= grid + GRID_ORACLE_TOLERANCE, || format!("pixel {i}: {ours} vs grid {grid}"))?;
    }
    Ok(format!(
        "worst template PSNR {worst:.2} dB over {}, solve beats grid by >= {margin:.2e} on {GRID_ORACLE_PIXELS} pixels",
        templates.template_ids.len()
    ))
}

fn tiling_commutation() -> Check {
    let grid = plan_tiles(1000, 1000, 256, 20).map_err(e)?;
    let want = vec![0, 236, 472, 708, 744];
    ensure(grid.x_origins() == want && grid.y_origins() == want, || {
        format!("origins {:?} x {:?}", grid.x_origins(), grid.y_origins())
    })?;
    ensure(grid.len() == 25, || format!("{} tiles", grid.len()))?;
    let model = common::blueish();
    let cfg = PredictConfig { patch_size: 256, overlap: 20, threshold: 0.5 };
    for seed in 0..TILING_IMAGES {
        let img = common::random_image(seed, 1000, 1000);
        let tiled = predict_image(&model, &img, &cfg).map_err(e)?;
        let direct = BinaryMask::from_fn(1000, 1000, |x, y| img.pixel(x, y)[2] as f32 / 255.0 >= 0.5);
        ensure(tiled == direct, || format!("image {seed} differs"))?;
    }
    Ok(format!("origins {{0,236,472,708,744}}^2, {TILING_IMAGES} images of 1000x1000 bit-exact"))
}

fn metric_oracles() -> Check {
    let a = BinaryMask::new(10, 1, vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0]).unwrap();
    let b = BinaryMask::new(10, 1, vec![0, 0, 1, 1, 1, 1, 1, 0, 0, 0]).unwrap();
    let d = dsc(&a, &b).map_err(e)?;
    ensure((d - 0.6).abs() < 1e-15, || format!("dsc {d}"))?;

    let disk =
        |cx: f64, cy: f64, r: f64| move |x: usize, y: usize| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
    let (l, r) = (disk(20.0, 25.0, 10.0), disk(44.0, 25.0, 10.0));
    let two =
        BinaryMask::from_fn(64, 50, |x, y| l(x, y) || r(x, y) || ((20..=44).contains(&x) && (24..=26).contains(&y)));
    let labels = instance_labels(&two).count;
    ensure(labels == 2, || format!("watershed gave {labels} labels"))?;

    let rect = |x0: usize| BinaryMask::from_fn(20, 10, move |x, y| (x0..x0 + 5).contains(&x) && (3..6).contains(&y));
    let f1 = object_f1(&rect(4), &rect(2), 0.5).map_err(e)?.f1;
    ensure(f1 == 0.0, || format!("sub-threshold f1 {f1}"))?;

    let mut rng = keyed_rng(12, 0, "acceptance-wilcoxon");
    let mut worst_exact = 0.0f64;
    for trial in 0..400 {
        let n = rng.random_range(5..=12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..7) as f64 / 4.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..7) as f64 / 4.0).collect();
        let p = wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::Exact).map_err(e)?.p_value;
        let gap = (p - brute_force_p(&x, &y)).abs();
        worst_exact = worst_exact.max(gap);
        ensure(gap < WILCOXON_EXACT_TOLERANCE, || format!("trial {trial}: exact off by {gap:e}"))?;
    }
    let mut worst_normal = 0.0f64;
    for trial in 0..100 {
        let x: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.6..0.5)).collect();
        let exact = wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::Exact).map_err(e)?.p_value;
        let normal = wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::Normal).map_err(e)?.p_value;
        worst_normal = worst_normal.max((exact - normal).abs());
        ensure((exact - normal).abs() <= WILCOXON_NORMAL_TOLERANCE, || format!("trial {trial}: {exact} vs {normal}"))?;
    }
    Ok(format!("dsc 0.6, 2 watershed labels, f1 0, exact gap {worst_exact:.1e}, exact-normal gap {worst_normal:.4}"))
}

fn split(mut all: Vec<Sample>, train: usize, val: usize) -> Datasets {
    let test = all.split_off(train + val);
    let val = all.split_off(train);
    Datasets { train: all, val, test }
}

fn ensemble_benefit() -> Check {
    let start = Instant::now();
    let (mut beat_individual, mut beat_benchmark) = (0, 0);
    let mut lines = Vec::new();
    for seed in 0..BENEFIT_SEEDS {
        let data = split(gen_synthetic(&benefit_spec(seed, 56)), 40, 8);
        let mut config = PipelineConfig { master_seed: seed, n: 15, m: 3, ..PipelineConfig::default() };
        config.train.pixels_per_patch = 16;
        config.experiments = vec![ExperimentKind::Benchmark, ExperimentKind::All(15)];
        config.experiments.extend((1..=15).map(ExperimentKind::SingleModel));
        let out = run_pipeline(&config, &data, None).map_err(e)?;
        let mean = |k: ExperimentKind| out.results.aggregate(&k.to_string()).map(|a| a.mean_dsc).unwrap_or(f64::NAN);
        let all = mean(ExperimentKind::All(15));
        let bench = mean(ExperimentKind::Benchmark);
        let individual = (1..=15).map(|k| mean(ExperimentKind::SingleModel(k))).sum::<f64>() / 15.0;
        beat_individual += (all >= individual) as usize;
        beat_benchmark += (all >= bench) as usize;
        let line = format!("seed {seed}: all {all:.4}, individual mean {individual:.4}, benchmark {bench:.4}");
        println!("    {line}");
        lines.push(line);
    }
    let took = start.elapsed();
    let summary = format!(
        "all >= individual in {beat_individual}/{BENEFIT_SEEDS} (need {BENEFIT_VS_INDIVIDUAL}), \
         >= benchmark in {beat_benchmark}/{BENEFIT_SEEDS} (need {BENEFIT_VS_BENCHMARK}), {took:.0?}"
    );
    ensure(
        beat_individual >= BENEFIT_VS_INDIVIDUAL && beat_benchmark >= BENEFIT_VS_BENCHMARK && took < BENEFIT_BUDGET,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut pending = vec![root.to_path_buf()];
    while let Some(dir) = pending.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                pending.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Check {
    let data = split(gen_synthetic(&SyntheticSpec { width: 256, height: 256, ..benefit_spec(40, 14) }), 8, 2);
    let mut config = PipelineConfig { master_seed: 40, n: 5, m: 2, ..PipelineConfig::default() };
    config.train.pixels_per_patch = 64;
    config.ablation_n = vec![1, 3, 5];
    let (a, b) = (tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?);
    run_pipeline(&config, &data, Some(a.path())).map_err(e)?;
    run_pipeline(&config, &data, Some(b.path())).map_err(e)?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names = |t: &[(String, Vec<u8>)]| t.iter().map(|(n, _)| n.clone()).collect::<BTreeSet<_>>();
    ensure(names(&ta) == names(&tb), || "different file sets".into())?;
    if let Some(((name, _), _)) = ta.iter().zip(&tb).find(|(x, y)| x.1 != y.1) {
        return Err(format!("{name} differs"));
    }
    let masks = ta.iter().filter(|(n, _)| n.starts_with("grid") && n.ends_with(".png")).count();
    let csvs = ta.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    ensure(masks > 0 && csvs >= 4, || format!("{masks} grid masks, {csvs} csv files"))?;
    Ok(format!("{} files identical, {masks} grid masks, {csvs} csv files", ta.len()))
}

fn external_grid() -> Check {
    let dir = tempfile::tempdir().map_err(e)?;
    let (grid_root, gt_root) = (dir.path().join("grid"), dir.path().join("gt"));
    fs::create_dir_all(&gt_root).map_err(e)?;
    let mut rng = keyed_rng(10, 0, "acceptance-external");
    for i in 0..8 {
        let id = format!("ext_{i:02}");
        let centers: Vec<(f64, f64)> =
            (0..6).map(|_| (rng.random_range(8.0..56.0), rng.random_range(8.0..56.0))).collect();
        let gt = BinaryMask::from_fn(64, 64, |x, y| {
            centers.iter().any(|(cx, cy)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= 25.0)
        });
        save_mask(&gt, gt_root.join(format!("{id}.png"))).map_err(e)?;
        let cell = grid_root.join(&id);
        fs::create_dir_all(&cell).map_err(e)?;
        for p in 0..7 {
            for q in 0..33 {
                let flip = rng.random_range(0.05..0.35);
                let m = BinaryMask::from_fn(64, 64, |x, y| gt.get(x, y) ^ rng.random_bool(flip));
                save_mask(&m, cell.join(beds::ensemble::grid_mask_name(p, q))).map_err(e)?;
            }
        }
    }
    let source = ExternalGrids::open(&grid_root, &gt_root).map_err(e)?;
    ensure((source.stains(), source.models()) == (7, 33), || format!("shape {}x{}", source.stains(), source.models()))?;
    let mut table = ResultTable::default();
    for s in Strategy::EVERY {
        table.extend(run_experiment(&ExperimentConfig::new(s.kind(33), 0), &source).map_err(e)?);
    }
    let rep = report(&table, "beds-33-all").map_err(e)?;
    ensure(rep.rows.len() == 4, || format!("{} report rows", rep.rows.len()))?;
    for row in &rep.rows {
        ensure(
            row.p_value.is_some() && row.mean_dsc.is_finite() && row.median_dsc.is_finite() && row.mean_f1.is_finite(),
            || format!("incomplete row {row:?}"),
        )?;
    }
    let trained = ["stack", "benchmark", "templates.json"].iter().any(|a| dir.path().join(a).exists());
    ensure(!trained, || "training artifacts present".into())?;
    let all = rep.row("beds-33-all").unwrap();
    Ok(format!("8 images of 7x33 masks, 4 topologies, all mean dsc {:.4} f1 {:.4}", all.mean_dsc, all.mean_f1))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("fusion oracle", fusion_oracle),
        ("vote threshold fidelity", vote_threshold),
        ("topology non-equivalence", topology_non_equivalence),
        ("stain matrix recovery", snmf_recovery),
        ("stain self-normalization", stain_normalization),
        ("tiling commutation", tiling_commutation),
        ("metric oracles", metric_oracles),
        ("end-to-end ensemble benefit", ensemble_benefit),
        ("determinism", determinism),
        ("external grid path", external_grid),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let id = k + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
