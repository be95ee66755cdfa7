//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{array, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use read_core::convnet::{self, ema_update, ConvNetSpec, ParamSet};
use read_core::geo_tiles::select_tiles;
use read_core::imagery_store::{RURAL, UNINHABITED, URBAN};
use read_core::mean_teacher::{
    self, consistency_loss, consistency_loss_grad, rampup_weight, supervised_loss, supervised_loss_grad,
    EvalExample, LabeledExample, MeanTeacherConfig,
};
use read_core::pca;
use read_core::pipeline::{self, render_tile, Command, PipelineConfig, ABLATION_LABELS};
use read_core::regression::{self, gbt_fit, lasso_fit, ridge_fit, GbtParams};
use read_core::spatial_stats::{self, ReducedDistrict};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn tile_selection() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut mismatches, mut bad_hits, mut selected) = (0, 0, 0usize);
    for i in 0..100 {
        for z in [3u8, 8, 15] {
            let poly = common::random_polygon(&mut rng, z, i);
            let sel = select_tiles(&poly, z).expect("valid polygon");
            let oracle = common::brute_force_select(&poly, z);
            if sel.tiles != oracle {
                mismatches += 1;
            }
            bad_hits += sel.vertex_hits.values().filter(|&&h| !(3..=4).contains(&h)).count();
            selected += sel.tiles.len();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && bad_hits == 0 && selected > 0 && secs < 10.0,
        format!("300 polygon/zoom cases, {mismatches} mismatches, {selected} tiles, {secs:.2}s"),
    )
}

fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_val, mut worst_vec, mut worst_sum) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let scales: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..3.0)).collect();
        let rows: Vec<Vec<f64>> =
            (0..50).map(|_| scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = Array2::from_shape_vec((50, 5), rows.iter().flatten().copied().collect()).unwrap();
        let model = pca::fit(x.view(), 5).expect("fit");
        let (vals, vecs) = common::jacobi_eigen(&common::covariance(&rows));
        for j in 0..5 {
            worst_val = worst_val.max((model.eigenvalues[j] - vals[j]).abs());
            for d in 0..5 {
                worst_vec = worst_vec.max((model.components[[j, d]] - vecs[j][d]).abs());
            }
        }
        worst_sum = worst_sum.max((model.full_explained_variance_ratio.sum() - 1.0).abs());
    }
    outcome(
        worst_val <= 1e-8 && worst_vec <= 1e-8 && worst_sum <= 1e-10,
        format!("50 datasets, max |Δλ| {worst_val:.1e}, max |Δv| {worst_vec:.1e}, max |Σratio−1| {worst_sum:.1e}"),
    )
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let spec = ConvNetSpec::new(8, vec![4, 6], 10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut params = ParamSet::init(&spec, &mut rng).unwrap();
    for t in params.tensors.iter_mut().filter(|t| t.name.ends_with(".bias")) {
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(0.05..0.2));
    }
    let batch: Vec<Array3<f64>> = (0..3).map(|_| Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(-1.0..1.0))).collect();
    let labels = array![[0.7, 0.2, 0.1], [0.0, 1.0, 0.0], [0.25, 0.25, 0.5]];
    let teacher = array![[0.2, 0.5, 0.3], [0.6, 0.3, 0.1], [0.1, 0.1, 0.8]];
    let w = 0.7;
    let loss = |p: &ParamSet| {
        let f = convnet::forward(p, &batch).unwrap();
        supervised_loss(f.probs.view(), labels.view()).unwrap()
            + w * consistency_loss(f.probs.view(), teacher.view()).unwrap()
    };
    let f = convnet::forward(&params, &batch).unwrap();
    let dlogits = supervised_loss_grad(f.probs.view(), labels.view())
        + consistency_loss_grad(f.probs.view(), teacher.view()) * w;
    let grads = convnet::backward(&params, &f, dlogits.view(), None).unwrap();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.flat_get(i);
        params.flat_set(i, orig + h);
        let up = loss(&params);
        params.flat_set(i, orig - h);
        let down = loss(&params);
        params.flat_set(i, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.flat_get(i);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && spec.param_count() <= 5000 && secs < 60.0,
        format!("{} parameters, max relative error {worst:.2e}, {secs:.2}s", spec.param_count()),
    )
}

fn ema_closed_form() -> Outcome {
    let spec = ConvNetSpec::new(8, vec![4], 6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let student = ParamSet::init(&spec, &mut rng).unwrap();
    let start = ParamSet::init(&spec, &mut rng).unwrap();
    let mut teacher = start.clone();
    let alpha: f64 = 0.9;
    for _ in 0..20 {
        ema_update(&mut teacher, &student, alpha).unwrap();
    }
    let a20 = alpha.powi(20);
    let worst = (0..teacher.len())
        .map(|i| (teacher.flat_get(i) - (a20 * start.flat_get(i) + (1.0 - a20) * student.flat_get(i))).abs())
        .fold(0.0f64, f64::max);
    outcome(worst <= 1e-12, format!("{} parameters, α = 0.9, max deviation {worst:.1e}", teacher.len()))
}

fn loss_anchors() -> Outcome {
    let e = std::f64::consts::E;
    let one_hot = array![[1.0, 0.0, 0.0]];
    let other = array![[0.0, 1.0, 0.0]];
    let inv_e = array![[1.0 / e, 1.0 - 1.0 / e, 0.0]];
    let uniform = array![[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
    let cfg = MeanTeacherConfig::default();
    let s = |a: &Array2<f64>, b: &Array2<f64>| supervised_loss(a.view(), b.view()).unwrap();
    let c = |a: &Array2<f64>, b: &Array2<f64>| consistency_loss(a.view(), b.view()).unwrap();
    let checks = [
        ("L_sup(one-hot, one-hot) = 0", s(&one_hot, &one_hot) == 0.0),
        ("L_sup(1/e) = 1", s(&inv_e, &one_hot) == 1.0),
        ("L_sup(uniform) = ln 3", (s(&uniform, &uniform) - 3f64.ln()).abs() <= f64::EPSILON * 2.0),
        ("L_cons(a, a) = 0", c(&one_hot, &one_hot) == 0.0),
        ("L_cons(e1, e2) = 2", c(&one_hot, &other) == 2.0),
        ("L_cons symmetric", c(&inv_e, &uniform) == c(&uniform, &inv_e)),
        ("w(0) = 0", rampup_weight(0, &cfg) == 0.0),
        ("w(20) = 6.25", rampup_weight(20, &cfg) == 6.25),
        ("w(40) = 12.5", rampup_weight(40, &cfg) == 12.5),
        ("w(41) = 12.5", rampup_weight(41, &cfg) == 12.5),
    ];
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} anchors exact", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

/// Rendered tiles with planted classes, standardized per channel over the
/// whole set.
fn rendered_set(n: usize, size: usize, seed: u64) -> Vec<(Array3<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<(Array3<f32>, usize)> = (0..n)
        .map(|_| {
            let class = [URBAN, RURAL, UNINHABITED][rng.gen_range(0..3)];
            let u = match class {
                URBAN => rng.gen_range(0.5..1.0),
                RURAL => rng.gen_range(0.05..0.5),
                _ => rng.gen_range(0.0..0.3),
            };
            (render_tile(class, u, size, &mut rng), class)
        })
        .collect();
    let count = (n * size * size) as f64;
    let mean: Vec<f64> = (0..3).map(|c| raw.iter().map(|(p, _)| p.index_axis(Axis(2), c).iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>() / count).collect();
    let sd: Vec<f64> = (0..3)
        .map(|c| {
            let ss: f64 = raw.iter().map(|(p, _)| p.index_axis(Axis(2), c).iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>()).sum();
            (ss / count).sqrt().max(1e-6)
        })
        .collect();
    raw.into_iter()
        .map(|(p, class)| (Array3::from_shape_fn((3, size, size), |(c, y, x)| (p[[y, x, c]] as f64 - mean[c]) / sd[c]), class))
        .collect()
}

fn semi_supervision() -> Outcome {
    let start = Instant::now();
    let size = 16;
    let data = rendered_set(2600, size, 606);
    let (train, test) = data.split_at(2000);
    let n_labeled = train.len() / 10;
    let one_hot = |c: usize| (0..3).map(|i| if i == c { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let labeled: Vec<LabeledExample> = train[..n_labeled]
        .iter()
        .map(|(x, c)| LabeledExample { input: x.clone(), target: one_hot(*c) })
        .collect();
    let unlabeled: Vec<Array3<f64>> = train[n_labeled..].iter().map(|(x, _)| x.clone()).collect();
    let test: Vec<EvalExample> = test.iter().map(|(x, c)| EvalExample { input: x.clone(), class: *c }).collect();
    let spec = ConvNetSpec::new(size, vec![8, 16], 16, 3);
    let cfg = MeanTeacherConfig {
        epochs: 12,
        rampup_epochs: 8,
        seed: 6,
        ..MeanTeacherConfig::default()
    };
    let mt = mean_teacher::train(&spec, &labeled, &unlabeled, &test, &cfg).expect("mean teacher");
    let mt_acc = mean_teacher::accuracy(&mt.teacher, &test).unwrap();
    // The baseline gets as many optimizer steps as the mean-teacher student.
    let mt_steps = cfg.epochs * unlabeled.len().div_ceil(cfg.unlabeled_batch);
    let sup_epochs = mt_steps.div_ceil(labeled.len().div_ceil(cfg.labeled_batch));
    let sup_cfg = MeanTeacherConfig { epochs: sup_epochs, ..cfg.clone() };
    let (sup, _) = mean_teacher::train_supervised(&spec, &labeled, &test, &sup_cfg).expect("supervised");
    let sup_acc = mean_teacher::accuracy(&sup, &test).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mt_acc >= sup_acc && mt_acc >= 0.90 && secs < 300.0,
        format!(
            "{n_labeled} labeled / {} unlabeled, teacher acc {mt_acc:.4}, supervised acc {sup_acc:.4} ({mt_steps} steps each), {secs:.0}s",
            unlabeled.len()
        ),
    )
}

fn spatial_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut problems = Vec::new();
    for i in 0..1000 {
        let k = rng.gen_range(1..=10);
        let n = rng.gen_range(1..=25);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let to_district = |rows: &[Vec<f64>]| ReducedDistrict {
            district_id: format!("r{i}"),
            features: Array2::from_shape_vec((n, k), rows.iter().flatten().copied().collect()).unwrap(),
        };
        let r = spatial_stats::represent(&to_district(&rows)).unwrap();
        let mut shuffled = rows.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let r2 = spatial_stats::represent(&to_district(&shuffled)).unwrap();
        if r.vector() != r2.vector() {
            problems.push(format!("permutation changed district {i}"));
        }
        let m = 2 * k + 1 + k * (k - 1) / 2;
        if r.len() != m + m * (m + 1) / 2 {
            problems.push(format!("length {} for k = {k}", r.len()));
        }
        if r.base[k..2 * k].iter().any(|&s| s < 0.0) || r.base[2 * k + 1..].iter().any(|&p| p.abs() > 1.0) {
            problems.push(format!("σ or ρ out of range in district {i}"));
        }
    }
    let k10 = spatial_stats::repr_len(10);
    if k10 != 2277 {
        problems.push(format!("k = 10 gives {k10}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "1000 districts, k ∈ 1..10: permutation-exact, |ρ| ≤ 1, σ ≥ 0, s(10) = 2277".into()
        } else {
            problems[..problems.len().min(3)].join("; ")
        },
    )
}

fn regression_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let (n, p) = (40, 6);
    let x = Array2::from_shape_fn((n, p), |_| rng.gen_range(-2.0..2.0));
    let y = Array1::from_shape_fn(n, |i| x[[i, 0]] - 2.0 * x[[i, 3]] + 0.3 * rng.gen_range(-1.0..1.0));
    let mut notes = Vec::new();

    // Ridge: normal equations on the standardized, centred design.
    let lambda = 0.5;
    let ridge = ridge_fit(x.view(), y.view(), lambda).unwrap();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let sd = x.std_axis(Axis(0), 0.0);
    let xs = (&x - &mean) / &sd;
    let ws = &Array1::from(ridge.weights.clone()) * &sd;
    let yc = &y - y.mean().unwrap();
    let resid = (xs.t().dot(&xs) + Array2::<f64>::eye(p) * lambda).dot(&ws) - xs.t().dot(&yc);
    let ridge_res = resid.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    notes.push(format!("ridge residual {ridge_res:.1e}"));

    // Lasso KKT on the same standardized problem.
    let (lam, tol) = (0.05, 1e-8);
    let lasso = lasso_fit(x.view(), y.view(), lam, tol).unwrap();
    let wl = &Array1::from(lasso.weights.clone()) * &sd;
    let r = &yc - &xs.dot(&wl);
    let grad = xs.t().dot(&r) / n as f64;
    let mut kkt = 0.0f64;
    for j in 0..p {
        let v = if wl[j] == 0.0 { (grad[j].abs() - lam).max(0.0) } else { (grad[j] - lam * wl[j].signum()).abs() };
        kkt = kkt.max(v);
    }
    notes.push(format!("lasso KKT violation {kkt:.1e}"));

    // GBT train MSE per tree count.
    let gbt = gbt_fit(x.view(), y.view(), GbtParams { trees: 60, max_depth: 3, learning_rate: 0.1 }).unwrap();
    let staged = gbt.staged_predictions(x.view());
    let ys = y.to_vec();
    let mses: Vec<f64> = staged.iter().map(|p| regression::mse(&ys, p).unwrap()).collect();
    let monotone = mses.windows(2).all(|w| w[1] <= w[0]);
    notes.push(format!("GBT MSE {:.3} → {:.3} over {} stages", mses[0], mses[mses.len() - 1], mses.len()));

    let y_mean = vec![y.mean().unwrap(); n];
    let r2_mean = regression::r2(&ys, &y_mean).unwrap();
    let r2_self = regression::r2(&ys, &ys).unwrap();
    notes.push(format!("R²(mean) = {r2_mean}, R²(y) = {r2_self}"));
    outcome(
        ridge_res <= 1e-6 && kkt <= tol + 1e-12 && monotone && r2_mean == 0.0 && r2_self == 1.0,
        notes.join(", "),
    )
}

/// The end-to-end configuration shared by the pipeline criteria.
const PIPELINE_CONFIG: &str = "\
seed = 42
extractor.input_size = 16
extractor.channels = 8, 16
extractor.embedding_dim = 16
teacher.epochs = 15
teacher.rampup_epochs = 10
pruner.epochs = 10
synth.districts_per_side = 14
regress.model = ridge
";

fn write_config(dir: &Path, text: &str) -> PipelineConfig {
    let path = dir.join("pipeline.conf");
    std::fs::write(&path, text).unwrap();
    PipelineConfig::load(&path).unwrap()
}

fn run_pipeline(dir: &Path, text: &str) -> (PipelineConfig, f64) {
    let cfg = write_config(dir, text);
    let start = Instant::now();
    pipeline::run(&cfg, Command::SynthWorld, None).expect("synth-world");
    pipeline::run_all(&cfg, &Command::PIPELINE, None).expect("pipeline");
    (cfg, start.elapsed().as_secs_f64())
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

fn end_to_end(work: &Path, secs: f64) -> Outcome {
    let synth = read_json(work.join("reports/synth.json"));
    let eval = read_json(work.join("reports/evaluate_density.json"));
    let rep = &eval["reports"][0];
    let (r2, sd) = (rep["r2_mean"].as_f64().unwrap(), rep["r2_sd"].as_f64().unwrap());
    let trials = rep["trials"].as_array().unwrap().len();
    let districts = synth["districts"].as_u64().unwrap();
    let tiles = synth["tiles"].as_u64().unwrap();
    outcome(
        r2 >= 0.90 && trials == 20 && districts >= 60 && tiles >= 3000 && secs < 900.0,
        format!("{districts} districts, {tiles} tiles, {trials} trials, R² {r2:.4} ± {sd:.4}, pipeline {secs:.0}s"),
    )
}

fn ablation(work: &Path) -> Outcome {
    let abl = read_json(work.join("reports/ablation_density.json"));
    let reports = abl["reports"].as_array().unwrap();
    let r2: BTreeMap<&str, f64> =
        reports.iter().map(|r| (r["label"].as_str().unwrap(), r["r2_mean"].as_f64().unwrap())).collect();
    let full = r2["READ"];
    let labels_ok = reports.iter().map(|r| r["label"].as_str().unwrap()).eq(ABLATION_LABELS.iter().copied());
    let table = std::fs::read_to_string(work.join("reports/ablation_density.txt")).unwrap();
    let rows_ok = ABLATION_LABELS.iter().all(|l| table.lines().any(|line| line.starts_with(l)));
    let worst = r2.iter().filter(|(l, _)| **l != "READ").map(|(_, v)| v - 0.02).fold(f64::MIN, f64::max);
    let listing: Vec<String> = r2.iter().map(|(l, v)| format!("{l} {v:.4}")).collect();
    outcome(full >= worst && labels_ok && rows_ok, listing.join(", "))
}

fn pruning_share(dir: &Path) -> Outcome {
    let text = format!("{PIPELINE_CONFIG}synth.uninhabited_fraction = 0.5\n");
    let cfg = write_config(dir, &text);
    for c in [Command::SynthWorld, Command::Ingest, Command::SelectTiles, Command::TrainPruner, Command::Prune] {
        pipeline::run(&cfg, c, None).expect("pruning stages");
    }
    let work = cfg.workdir();
    let planted = read_json(work.join("reports/synth.json"))["planted_uninhabited_share"].as_f64().unwrap();
    let removed = read_json(work.join("reports/prune.json"))["removed_fraction"].as_f64().unwrap();
    let acc = read_json(work.join("reports/pruner.json"))["heldout_accuracy"].as_f64().unwrap();
    outcome(
        (removed - planted).abs() <= 0.05 && acc >= 0.95,
        format!("planted {planted:.4}, removed {removed:.4}, pruner held-out accuracy {acc:.4}"),
    )
}

fn report_files(work: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(work.join("reports")).unwrap() {
        let p = entry.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let (ra, rb) = (report_files(a), report_files(b));
    let differing: Vec<&String> = ra.keys().filter(|k| rb.get(*k) != ra.get(*k)).collect();
    outcome(
        differing.is_empty() && ra.len() == rb.len() && !ra.is_empty(),
        if differing.is_empty() {
            format!("{} report files byte-identical across two runs", ra.len())
        } else {
            format!("differing: {differing:?}")
        },
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!("[{:02}] {name}: {} ({})", results.len() + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    record("tile selection matches brute force", tile_selection());
    record("PCA matches Jacobi oracle", pca_oracle());
    record("convnet gradient check", gradient_check());
    record("EMA closed form", ema_closed_form());
    record("loss and ramp anchors", loss_anchors());
    record("mean teacher beats supervised", semi_supervision());
    record("spatial statistics invariants", spatial_invariants());
    record("regression correctness", regression_correctness());

    let run_a = tempfile::tempdir().unwrap();
    let run_b = tempfile::tempdir().unwrap();
    let (cfg_a, secs) = run_pipeline(run_a.path(), PIPELINE_CONFIG);
    record("end-to-end synthetic R²", end_to_end(&cfg_a.workdir(), secs));
    record("ablation direction", ablation(&cfg_a.workdir()));
    let prune_dir = tempfile::tempdir().unwrap();
    record("pruning share and accuracy", pruning_share(prune_dir.path()));
    let (cfg_b, _) = run_pipeline(run_b.path(), PIPELINE_CONFIG);
    record("determinism across runs", determinism(&cfg_a.workdir(), &cfg_b.workdir()));

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
