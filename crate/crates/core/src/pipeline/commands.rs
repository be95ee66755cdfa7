//! One function per pipeline command. Each reads its prerequisites from the
//! work directory, writes lineage-stamped outputs and records them in the
//! manifest.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::{ExtractorMode, PcaK, PipelineConfig};
use super::heatmap::heatmap_grid;
use super::synth::{synth_world, write_world, WorldPaths};
use super::workdir::{stamp, Workdir};
use crate::convnet::{self, load_checkpoint, save_checkpoint, ConvNetSpec, ParamSet};
use crate::error::{Error, Result};
use crate::geo_tiles::{read_selection_csv, select_tiles, write_selection_csv, TileId, TileSelection};
use crate::imagery_store::{
    check_references, load_demographics, load_districts, load_embeddings, load_labels, read_embeddings_csv,
    write_embeddings_csv, EmbeddingRecord, ImageIndex, NormStats, SoftLabel, URBAN,
};
use crate::mean_teacher::{self, EvalExample, LabeledExample, MeanTeacherConfig};
use crate::pca::{self, PcaModel, MAX_COMPONENTS};
use crate::pruning::{self, overall_removed_fraction, BinaryExample, PrunedSelection, PrunerConfig};
use crate::regression::{
    self, evaluate, fit_tuned, format_table, log_targets, read_model, write_model, Dataset, DistrictTiles,
    EvalConfig, EvalReport,
};
use crate::spatial_stats::{self, represent_with, ReducedDistrict, StatSet};

pub const SELECTION: &str = "tiles/selection.csv";
pub const PRUNED: &str = "tiles/pruned.csv";
pub const EMBEDDINGS: &str = "embeddings/embeddings.csv";
pub const EXTRACTOR_NORM: &str = "models/extractor_norm.json";
pub const TEACHER: &str = "models/extractor_teacher.bin";
pub const STUDENT: &str = "models/extractor_student.bin";
pub const PRUNER_NORM: &str = "models/pruner_norm.json";
pub const PRUNER: &str = "models/pruner.bin";
pub const PCA: &str = "pca/pca.csv";
pub const REPR: &str = "repr/representations.csv";
/// Marks an image directory as generated, so `synth-world` may replace it.
pub const SYNTH_MARKER: &str = ".synth-world";

pub fn regressor_path(variable: &str) -> String {
    format!("models/regressor_{}.bin", file_safe(variable))
}

/// Row labels of the ablation table, in output order.
pub const ABLATION_LABELS: [&str; 5] = ["READ w/o μ", "READ w/o σ", "READ w/o n", "READ w/o ρ", "READ"];

pub fn ablation_sets() -> [StatSet; 5] {
    let all = StatSet::ALL;
    [
        StatSet { mean: false, ..all },
        StatSet { std: false, ..all },
        StatSet { count: false, ..all },
        StatSet { corr: false, ..all },
        all,
    ]
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub(super) struct Ctx<'a> {
    pub cfg: &'a PipelineConfig,
    pub wd: Workdir,
    pub lineage: String,
    pub variable: String,
    pub outputs: Vec<String>,
}

impl Ctx<'_> {
    fn write(&mut self, rel: &str, bytes: &[u8], producer: &str, inputs: &[&str]) -> Result<()> {
        self.wd.write_artifact(rel, bytes, producer, &self.lineage, inputs)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn write_json(&mut self, rel: &str, value: serde_json::Value, producer: &str, inputs: &[&str]) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&value).expect("report serializes");
        text.push('\n');
        self.write(rel, text.as_bytes(), producer, inputs)
    }

    fn external(&self, p: &str) -> std::path::PathBuf {
        self.cfg.resolve(p)
    }

    fn selection(&self) -> Result<Vec<TileSelection>> {
        let p = self.wd.require(SELECTION, "select-tiles")?;
        read_selection_csv(std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?)
    }

    fn pruned(&self) -> Result<Vec<TileSelection>> {
        let p = self.wd.require(PRUNED, "prune")?;
        read_selection_csv(std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?)
    }

    fn embeddings(&self) -> Result<BTreeMap<TileId, Vec<f64>>> {
        let p = self.wd.require(EMBEDDINGS, "embed")?;
        let f = std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        Ok(read_embeddings_csv(std::io::BufReader::new(f))?
            .into_iter()
            .map(|r| (r.tile, r.vector.iter().map(|&v| v as f64).collect()))
            .collect())
    }

    fn image_index(&self) -> Result<ImageIndex> {
        ImageIndex::scan(&self.external(&self.cfg.paths.images))
    }

    fn load_model(&self, rel: &str, producer: &'static str) -> Result<ParamSet> {
        let p = self.wd.require(rel, producer)?;
        load_checkpoint(std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?)
    }

    fn norm(&self, rel: &str, producer: &'static str) -> Result<NormStats> {
        NormStats::load(&self.wd.require(rel, producer)?)
    }
}

fn selected_tiles(sel: &[TileSelection]) -> Vec<TileId> {
    let set: BTreeSet<TileId> = sel.iter().flat_map(|s| s.tiles.iter().copied()).collect();
    set.into_iter().collect()
}

fn stats_json(stats: &NormStats, lineage: &str) -> serde_json::Value {
    json!({ "lineage": lineage, "mean": stats.mean, "std": stats.std })
}

/// Standardized network inputs, in `tiles` order.
fn load_inputs(index: &ImageIndex, tiles: &[TileId], stats: &NormStats, size: usize) -> Result<Vec<Array3<f64>>> {
    tiles
        .par_iter()
        .map(|&t| {
            let img = index.load(t)?;
            if img.size() != size {
                return Err(Error::Data(format!("image for tile {t} is {} px, network expects {size}", img.size())));
            }
            Ok(stats.standardize(&img))
        })
        .collect()
}

fn compute_norm(index: &ImageIndex, tiles: &[TileId]) -> Result<NormStats> {
    let images = tiles.par_iter().map(|&t| index.load(t)).collect::<Result<Vec<_>>>()?;
    NormStats::compute(images.iter())
}

fn checkpoint_bytes(p: &ParamSet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    save_checkpoint(&mut buf, p)?;
    Ok(buf)
}

fn split_labels<T: Clone>(items: &[T], fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((items.len() as f64 * fraction).round() as usize).max(1).min(items.len());
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| items[i].clone()).collect()
    };
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

fn labels_in_selection(ctx: &Ctx<'_>, selected: &BTreeSet<TileId>) -> Result<Vec<SoftLabel>> {
    let mut labels = load_labels(&ctx.external(&ctx.cfg.paths.labels))?;
    let before = labels.len();
    labels.retain(|l| selected.contains(&l.tile));
    if labels.len() < before {
        log::warn!("{} labeled tiles lie outside every district and are ignored", before - labels.len());
    }
    labels.sort_by_key(|l| l.tile);
    if labels.is_empty() {
        return Err(Error::Data("no labeled tile lies inside the selected districts".into()));
    }
    Ok(labels)
}

pub(super) fn synth(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let world = synth_world(&cfg.synth, cfg.seed)?;
    let paths = (
        ctx.external(&cfg.paths.districts),
        ctx.external(&cfg.paths.images),
        ctx.external(&cfg.paths.labels),
        ctx.external(&cfg.paths.demographics),
        ctx.external(&cfg.paths.truth),
    );
    let marker = paths.1.join(SYNTH_MARKER);
    if paths.1.exists() {
        if !marker.exists() {
            let occupied = std::fs::read_dir(&paths.1).map_err(|e| Error::io(&paths.1, e))?.next().is_some();
            if occupied {
                return Err(Error::Config(format!(
                    "refusing to overwrite {}: it was not written by synth-world",
                    paths.1.display()
                )));
            }
        }
        std::fs::remove_dir_all(&paths.1).map_err(|e| Error::io(&paths.1, e))?;
    }
    write_world(
        &world,
        &WorldPaths {
            districts: &paths.0,
            images: &paths.1,
            labels: &paths.2,
            demographics: &paths.3,
            truth: &paths.4,
        },
    )?;
    std::fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
    let summary = json!({
        "lineage": ctx.lineage,
        "districts": world.districts.len(),
        "tiles": world.truth.len(),
        "labeled_tiles": world.votes.len(),
        "planted_uninhabited_share": world.planted_uninhabited_share(),
        "noise_sd": world.noise_sd,
    });
    ctx.write_json("reports/synth.json", summary, "synth-world", &[])
}

pub(super) fn ingest(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let districts = load_districts(&ctx.external(&cfg.paths.districts))?;
    let demo = load_demographics(&ctx.external(&cfg.paths.demographics))?;
    let known: BTreeSet<&str> = districts.iter().map(|d| d.district_id.as_str()).collect();
    if let Some(r) = demo.iter().find(|r| !known.contains(r.district_id.as_str())) {
        return Err(Error::Data(format!("demographics reference unknown district {}", r.district_id)));
    }
    let variables: BTreeSet<&str> = demo.iter().flat_map(|r| r.variables.keys().map(String::as_str)).collect();
    let mut summary = json!({
        "lineage": ctx.lineage,
        "districts": districts.len(),
        "demographic_rows": demo.len(),
        "variables": variables,
    });
    ctx.wd.record_external("paths.districts", &ctx.external(&cfg.paths.districts))?;
    ctx.wd.record_external("paths.demographics", &ctx.external(&cfg.paths.demographics))?;
    match cfg.extractor.mode {
        ExtractorMode::BuiltinConvnet => {
            let labels = load_labels(&ctx.external(&cfg.paths.labels))?;
            ctx.wd.record_external("paths.labels", &ctx.external(&cfg.paths.labels))?;
            summary["labeled_tiles"] = json!(labels.len());
            summary["images"] = json!(ctx.image_index()?.paths.len());
        }
        ExtractorMode::ExternalEmbeddings => {
            let p = cfg
                .paths
                .embeddings
                .as_deref()
                .ok_or_else(|| Error::Config("external-embeddings mode needs paths.embeddings".into()))?;
            let recs = load_embeddings(&ctx.external(p))?;
            check_references(&recs, &districts)?;
            ctx.wd.record_external("paths.embeddings", &ctx.external(p))?;
            summary["embedded_tiles"] = json!(recs.len());
        }
    }
    ctx.write_json("reports/ingest.json", summary, "ingest", &[])
}

pub(super) fn select(ctx: &mut Ctx<'_>) -> Result<()> {
    let districts = load_districts(&ctx.external(&ctx.cfg.paths.districts))?;
    let zoom = ctx.cfg.zoom;
    let sels: Vec<TileSelection> = districts.par_iter().map(|d| select_tiles(d, zoom)).collect::<Result<_>>()?;
    let mut body = Vec::new();
    write_selection_csv(&mut body, &sels)?;
    let bytes = stamp(&ctx.lineage, &body);
    ctx.write(SELECTION, &bytes, "select-tiles", &[])
}

fn extractor_spec(cfg: &PipelineConfig) -> Result<ConvNetSpec> {
    let e = &cfg.extractor;
    let spec = ConvNetSpec::new(e.input_size, e.channels.clone(), e.embedding_dim, 3);
    spec.validate()?;
    Ok(spec)
}

fn require_builtin(cfg: &PipelineConfig, command: &str) -> Result<()> {
    if cfg.extractor.mode != ExtractorMode::BuiltinConvnet {
        return Err(Error::Config(format!("`{command}` needs extractor.mode = builtin-convnet")));
    }
    Ok(())
}

pub(super) fn train_extractor(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    require_builtin(cfg, "train-extractor")?;
    let spec = extractor_spec(cfg)?;
    let sel = ctx.selection()?;
    let tiles = selected_tiles(&sel);
    let selected: BTreeSet<TileId> = tiles.iter().copied().collect();
    let labels = labels_in_selection(ctx, &selected)?;
    let index = ctx.image_index()?;
    let stats = compute_norm(&index, &tiles)?;
    let (train, test) = split_labels(&labels, cfg.extractor.train_fraction, cfg.seed ^ 0x4558_5452);
    let labeled_set: BTreeSet<TileId> = labels.iter().map(|l| l.tile).collect();
    let unlabeled_tiles: Vec<TileId> = tiles.iter().copied().filter(|t| !labeled_set.contains(t)).collect();

    let size = spec.input_size;
    let train_x = load_inputs(&index, &train.iter().map(|l| l.tile).collect::<Vec<_>>(), &stats, size)?;
    let test_x = load_inputs(&index, &test.iter().map(|l| l.tile).collect::<Vec<_>>(), &stats, size)?;
    let unlabeled = load_inputs(&index, &unlabeled_tiles, &stats, size)?;
    let labeled: Vec<LabeledExample> = train
        .iter()
        .zip(train_x)
        .map(|(l, input)| LabeledExample { input, target: l.probs.to_vec() })
        .collect();
    let test_set: Vec<EvalExample> = test
        .iter()
        .zip(test_x)
        .map(|(l, input)| EvalExample { input, class: l.majority_class() })
        .collect();
    log::info!(
        "training extractor on {} labeled / {} unlabeled tiles, {} held out",
        labeled.len(),
        unlabeled.len(),
        test_set.len()
    );
    let out = mean_teacher::train(&spec, &labeled, &unlabeled, &test_set, &cfg.teacher)?;
    let student_acc = mean_teacher::accuracy(&out.student, &test_set)?;

    let lineage = ctx.lineage.clone();
    ctx.write_json(EXTRACTOR_NORM, stats_json(&stats, &lineage), "train-extractor", &[SELECTION])?;
    ctx.write(TEACHER, &checkpoint_bytes(&out.teacher)?, "train-extractor", &[SELECTION])?;
    ctx.write(STUDENT, &checkpoint_bytes(&out.student)?, "train-extractor", &[SELECTION])?;
    let mut csv = Vec::new();
    out.report.write_csv(&mut csv, Some(&lineage))?;
    ctx.write("reports/extractor_train.csv", &csv, "train-extractor", &[SELECTION])?;
    let summary = json!({
        "lineage": lineage,
        "labeled_train": labeled.len(),
        "labeled_test": test_set.len(),
        "unlabeled": unlabeled.len(),
        "epochs": cfg.teacher.epochs,
        "teacher_accuracy": out.report.final_accuracy(),
        "student_accuracy": student_acc,
    });
    ctx.write_json("reports/extractor.json", summary, "train-extractor", &[SELECTION])
}

fn pruner_spec(cfg: &PipelineConfig) -> Result<ConvNetSpec> {
    let p = &cfg.pruner;
    let spec = ConvNetSpec::new(cfg.extractor.input_size, p.channels.clone(), p.embedding_dim, 2);
    spec.validate()?;
    Ok(spec)
}

pub(super) fn train_pruner(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    require_builtin(cfg, "train-pruner")?;
    let spec = pruner_spec(cfg)?;
    let sel = ctx.selection()?;
    let tiles = selected_tiles(&sel);
    let selected: BTreeSet<TileId> = tiles.iter().copied().collect();
    let labels = labels_in_selection(ctx, &selected)?;
    let index = ctx.image_index()?;
    let stats = compute_norm(&index, &tiles)?;
    let inputs = load_inputs(&index, &labels.iter().map(|l| l.tile).collect::<Vec<_>>(), &stats, spec.input_size)?;
    let examples: Vec<BinaryExample> = labels
        .iter()
        .zip(inputs)
        .map(|(l, input)| BinaryExample { input, inhabited: l.inhabited_majority })
        .collect();
    let p = &cfg.pruner;
    let pcfg = PrunerConfig {
        train: MeanTeacherConfig {
            epochs: p.epochs,
            labeled_batch: p.batch,
            lr: p.lr,
            momentum: p.momentum,
            augment: p.augment,
            seed: cfg.seed ^ 0x5052_4e52,
            ..MeanTeacherConfig::default()
        },
        train_fraction: p.train_fraction,
        threshold: p.threshold,
    };
    let out = pruning::train_pruner(&spec, &examples, &pcfg)?;
    let lineage = ctx.lineage.clone();
    ctx.write_json(PRUNER_NORM, stats_json(&stats, &lineage), "train-pruner", &[SELECTION])?;
    ctx.write(PRUNER, &checkpoint_bytes(&out.params)?, "train-pruner", &[SELECTION])?;
    let mut csv = Vec::new();
    out.report.write_csv(&mut csv, Some(&lineage))?;
    ctx.write("reports/pruner_train.csv", &csv, "train-pruner", &[SELECTION])?;
    let summary = json!({
        "lineage": lineage,
        "n_train": out.n_train,
        "n_test": out.n_test,
        "heldout_accuracy": out.heldout_accuracy,
    });
    ctx.write_json("reports/pruner.json", summary, "train-pruner", &[SELECTION])
}

pub(super) fn embed(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let sel = ctx.selection()?;
    let owner: Vec<(TileId, String)> =
        sel.iter().flat_map(|s| s.tiles.iter().map(move |t| (*t, s.district_id.clone()))).collect();
    let records: Vec<EmbeddingRecord> = match cfg.extractor.mode {
        ExtractorMode::BuiltinConvnet => {
            let params = ctx.load_model(TEACHER, "train-extractor")?;
            let stats = ctx.norm(EXTRACTOR_NORM, "train-extractor")?;
            let index = ctx.image_index()?;
            let tiles: Vec<TileId> = owner.iter().map(|(t, _)| *t).collect();
            let inputs = load_inputs(&index, &tiles, &stats, params.spec.input_size)?;
            let (emb, _) = convnet::infer(&params, &inputs, 64)?;
            owner
                .iter()
                .zip(emb.rows())
                .map(|((t, d), row)| EmbeddingRecord {
                    tile: *t,
                    district_id: d.clone(),
                    vector: row.iter().map(|&v| v as f32).collect(),
                })
                .collect()
        }
        ExtractorMode::ExternalEmbeddings => {
            let p = cfg
                .paths
                .embeddings
                .as_deref()
                .ok_or_else(|| Error::Config("external-embeddings mode needs paths.embeddings".into()))?;
            let by_tile: BTreeMap<TileId, EmbeddingRecord> =
                load_embeddings(&ctx.external(p))?.into_iter().map(|r| (r.tile, r)).collect();
            owner
                .iter()
                .map(|(t, d)| {
                    let r = by_tile.get(t).ok_or_else(|| Error::Data(format!("no embedding for selected tile {t}")))?;
                    Ok(EmbeddingRecord { tile: *t, district_id: d.clone(), vector: r.vector.clone() })
                })
                .collect::<Result<_>>()?
        }
    };
    let mut buf = Vec::new();
    write_embeddings_csv(&mut buf, &records, Some(&ctx.lineage))?;
    let inputs: &[&str] = match cfg.extractor.mode {
        ExtractorMode::BuiltinConvnet => &[SELECTION, TEACHER],
        ExtractorMode::ExternalEmbeddings => &[SELECTION],
    };
    ctx.write(EMBEDDINGS, &buf, "embed", inputs)
}

pub(super) fn prune(ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let sel = ctx.selection()?;
    let threshold = cfg.pruner.threshold;
    let scores: BTreeMap<TileId, f64> = if cfg.pruner.enabled {
        let params = ctx.load_model(PRUNER, "train-pruner")?;
        let stats = ctx.norm(PRUNER_NORM, "train-pruner")?;
        let index = ctx.image_index()?;
        let tiles = selected_tiles(&sel);
        let inputs = load_inputs(&index, &tiles, &stats, params.spec.input_size)?;
        let p = pruning::inhabited_probability(&params, &inputs)?;
        tiles.into_iter().zip(p).collect()
    } else {
        sel.iter().flat_map(|s| s.tiles.iter().map(|t| (*t, 1.0))).collect()
    };
    let pruned: Vec<PrunedSelection> =
        sel.iter().map(|s| pruning::prune(s, &scores, threshold)).collect::<Result<_>>()?;
    let kept: Vec<TileSelection> = sel
        .iter()
        .zip(&pruned)
        .map(|(s, p)| TileSelection {
            district_id: s.district_id.clone(),
            zoom: s.zoom,
            vertex_hits: p.kept.iter().map(|t| (*t, s.vertex_hits[t])).collect(),
            tiles: p.kept.clone(),
        })
        .collect();
    let mut body = Vec::new();
    write_selection_csv(&mut body, &kept)?;
    let lineage = ctx.lineage.clone();
    let inputs: &[&str] = if cfg.pruner.enabled { &[SELECTION, PRUNER] } else { &[SELECTION] };
    ctx.write(PRUNED, &stamp(&lineage, &body), "prune", inputs)?;
    let mut report = Vec::new();
    pruning::write_report_csv(&mut report, &pruned, Some(&lineage))?;
    ctx.write("reports/prune.csv", &report, "prune", inputs)?;
    let summary = json!({
        "lineage": lineage,
        "enabled": cfg.pruner.enabled,
        "threshold": threshold,
        "tiles_before": pruned.iter().map(PrunedSelection::n_before).sum::<usize>(),
        "tiles_after": pruned.iter().map(|p| p.kept.len()).sum::<usize>(),
        "removed_fraction": overall_removed_fraction(&pruned),
        "fallback_districts": pruned.iter().filter(|p| p.fallback).map(|p| p.district_id.clone()).collect::<Vec<_>>(),
    });
    ctx.write_json("reports/prune.json", summary, "prune", inputs)
}

/// Kept-tile embeddings per district, in pruned-selection order.
fn district_tiles(ctx: &Ctx<'_>) -> Result<Vec<DistrictTiles>> {
    ctx.wd.check_same_lineage(&[EMBEDDINGS, PRUNED])?;
    let emb = ctx.embeddings()?;
    let dim = emb.values().next().map(Vec::len).unwrap_or(0);
    ctx.pruned()?
        .into_iter()
        .filter(|s| !s.tiles.is_empty())
        .map(|s| {
            let mut flat = Vec::with_capacity(s.tiles.len() * dim);
            for t in &s.tiles {
                let v = emb.get(t).ok_or_else(|| Error::Data(format!("no embedding for kept tile {t}")))?;
                flat.extend_from_slice(v);
            }
            Ok(DistrictTiles {
                embeddings: Array2::from_shape_vec((s.tiles.len(), dim), flat)
                    .map_err(|e| Error::Shape(e.to_string()))?,
                district_id: s.district_id,
            })
        })
        .collect()
}

pub(super) fn fit_pca(ctx: &mut Ctx<'_>) -> Result<()> {
    let districts = district_tiles(ctx)?;
    let views: Vec<_> = districts.iter().map(|d| d.embeddings.view()).collect();
    let x = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let cap = MAX_COMPONENTS.min(x.ncols()).min(x.nrows().saturating_sub(1)).max(1);
    let model = match ctx.cfg.pca_k {
        PcaK::Fixed(k) => pca::fit(x.view(), k)?,
        PcaK::Auto => {
            let full = pca::fit(x.view(), cap)?;
            let k = pca::choose_k(&full).min(cap);
            full.truncated(k)?
        }
    };
    log::info!("PCA keeps {} components of {}", model.k(), model.dim());
    let mut buf = Vec::new();
    pca::write_csv(&mut buf, &model, Some(&ctx.lineage))?;
    ctx.write(PCA, &buf, "fit-pca", &[EMBEDDINGS, PRUNED])
}

fn load_pca(ctx: &Ctx<'_>) -> Result<PcaModel> {
    let p = ctx.wd.require(PCA, "fit-pca")?;
    pca::read_csv(std::io::BufReader::new(std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?))
}

pub(super) fn represent(ctx: &mut Ctx<'_>) -> Result<()> {
    let model = load_pca(ctx)?;
    ctx.wd.check_same_lineage(&[PCA, EMBEDDINGS, PRUNED])?;
    let districts = district_tiles(ctx)?;
    let std_kind = ctx.cfg.repr_std;
    let reprs = districts
        .par_iter()
        .map(|d| {
            let reduced = pca::transform_rows(&model, d.embeddings.view())?;
            represent_with(
                &ReducedDistrict { district_id: d.district_id.clone(), features: reduced },
                StatSet::ALL,
                std_kind,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    spatial_stats::write_csv(&mut buf, &reprs, model.k(), Some(&ctx.lineage))?;
    ctx.write(REPR, &buf, "represent", &[PCA, EMBEDDINGS, PRUNED])
}

fn load_repr(ctx: &Ctx<'_>) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let p = ctx.wd.require(REPR, "represent")?;
    spatial_stats::read_csv(std::io::BufReader::new(std::fs::File::open(&p).map_err(|e| Error::io(&p, e))?))
}

fn targets(ctx: &Ctx<'_>) -> Result<regression::LogTargets> {
    log_targets(&load_demographics(&ctx.external(&ctx.cfg.paths.demographics))?, &ctx.variable)
}

pub(super) fn train_regressor(ctx: &mut Ctx<'_>) -> Result<()> {
    let (k, reprs) = load_repr(ctx)?;
    let data = Dataset::join(&reprs, &targets(ctx)?)?;
    let grid = &ctx.cfg.regress.grid;
    let (param, cv_mse, model) = fit_tuned(&data.x, &data.y, grid, ctx.cfg.regress.folds)?;
    let mut buf = Vec::new();
    write_model(&mut buf, &model)?;
    let rel = regressor_path(&ctx.variable);
    ctx.write(&rel, &buf, "train-regressor", &[REPR])?;
    let summary = json!({
        "lineage": ctx.lineage,
        "variable": ctx.variable,
        "regressor": grid.kind,
        "k": k,
        "districts": data.len(),
        "param": param,
        "cv_mse": cv_mse,
    });
    let report = format!("reports/regressor_{}.json", file_safe(&ctx.variable));
    ctx.write_json(&report, summary, "train-regressor", &[REPR])
}

pub(super) fn predict(ctx: &mut Ctx<'_>) -> Result<()> {
    let rel = regressor_path(&ctx.variable);
    let mpath = ctx.wd.require(&rel, "train-regressor")?;
    ctx.wd.check_same_lineage(&[REPR, &rel])?;
    let model = read_model(std::fs::File::open(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let (_, reprs) = load_repr(ctx)?;
    let mut out = format!("# lineage={}\ndistrict_id,log_prediction,prediction\n", ctx.lineage);
    for (id, r) in &reprs {
        let y = model.predict_row(Array1::from(r.clone()).view())?;
        out.push_str(&format!("{id},{y:.6},{:.6}\n", y.exp()));
    }
    let report = format!("reports/predictions_{}.csv", file_safe(&ctx.variable));
    ctx.write(&report, out.as_bytes(), "predict", &[REPR, &rel])
}

fn eval_config(cfg: &PipelineConfig, stats: StatSet) -> EvalConfig {
    let r = &cfg.regress;
    EvalConfig {
        trials: r.trials,
        seed: cfg.seed,
        ks: match cfg.pca_k {
            PcaK::Fixed(k) => vec![k],
            PcaK::Auto => (1..=MAX_COMPONENTS).collect(),
        },
        grid: r.grid.clone(),
        folds: r.folds,
        stats,
        std_kind: cfg.repr_std,
        transductive_pca: cfg.pca_transductive,
    }
}

/// Districts that have both kept tiles and a target value.
fn eval_inputs(ctx: &Ctx<'_>) -> Result<(Vec<DistrictTiles>, Vec<f64>)> {
    let districts = district_tiles(ctx)?;
    let t = targets(ctx)?;
    let mut ds = Vec::new();
    let mut y = Vec::new();
    for d in districts {
        match t.values.get(&d.district_id) {
            Some(v) => {
                y.push(*v);
                ds.push(d);
            }
            None => log::warn!("district {} has no `{}` value and is skipped", d.district_id, ctx.variable),
        }
    }
    Ok((ds, y))
}

#[derive(Serialize)]
struct EvalFile<'a> {
    lineage: &'a str,
    variable: &'a str,
    reports: &'a [EvalReport],
}

fn write_eval(ctx: &mut Ctx<'_>, stem: &str, reports: &[EvalReport], producer: &str) -> Result<()> {
    let lineage = ctx.lineage.clone();
    let file = EvalFile { lineage: &lineage, variable: &ctx.variable, reports };
    let mut text = serde_json::to_string_pretty(&file).expect("report serializes");
    text.push('\n');
    let base = format!("reports/{stem}_{}", file_safe(&ctx.variable));
    ctx.write(&format!("{base}.json"), text.as_bytes(), producer, &[EMBEDDINGS, PRUNED])?;
    let table = format_table(reports);
    ctx.write(&format!("{base}.txt"), table.as_bytes(), producer, &[EMBEDDINGS, PRUNED])
}

pub(super) fn evaluate_cmd(ctx: &mut Ctx<'_>) -> Result<()> {
    let (ds, y) = eval_inputs(ctx)?;
    let report = evaluate(&ds, &y, &ctx.variable, "READ", &eval_config(ctx.cfg, StatSet::ALL))?;
    log::info!("{}: R² {:.4} ± {:.4}", ctx.variable, report.r2_mean, report.r2_sd);
    write_eval(ctx, "evaluate", &[report], "evaluate")
}

pub(super) fn ablate(ctx: &mut Ctx<'_>) -> Result<()> {
    let (ds, y) = eval_inputs(ctx)?;
    let reports = ABLATION_LABELS
        .iter()
        .zip(ablation_sets())
        .map(|(label, stats)| evaluate(&ds, &y, &ctx.variable, label, &eval_config(ctx.cfg, stats)))
        .collect::<Result<Vec<_>>>()?;
    write_eval(ctx, "ablation", &reports, "ablate")
}

pub(super) fn heatmap(ctx: &mut Ctx<'_>) -> Result<()> {
    require_builtin(ctx.cfg, "heatmap")?;
    let params = ctx.load_model(TEACHER, "train-extractor")?;
    let stats = ctx.norm(EXTRACTOR_NORM, "train-extractor")?;
    let sel = ctx.selection()?;
    let chosen: Vec<&TileSelection> = match &ctx.cfg.heatmap_district {
        Some(id) => vec![sel
            .iter()
            .find(|s| &s.district_id == id)
            .ok_or_else(|| Error::Data(format!("heatmap.district {id} has no selected tiles")))?],
        None => sel.iter().filter(|s| !s.tiles.is_empty()).collect(),
    };
    let index = ctx.image_index()?;
    for s in chosen {
        let tiles: Vec<TileId> = s.tiles.iter().copied().collect();
        let inputs = load_inputs(&index, &tiles, &stats, params.spec.input_size)?;
        let (_, probs) = convnet::infer(&params, &inputs, 64)?;
        let p: BTreeMap<TileId, f64> = tiles.iter().copied().zip(probs.column(URBAN).iter().copied()).collect();
        let grid = heatmap_grid(s, &p)?;
        let lineage = ctx.lineage.clone();
        let base = format!("reports/heatmap_{}", file_safe(&s.district_id));
        let mut pgm = Vec::new();
        grid.write_pgm(&mut pgm, Some(&lineage))?;
        ctx.write(&format!("{base}.pgm"), &pgm, "heatmap", &[SELECTION, TEACHER])?;
        let mut csv = Vec::new();
        grid.write_csv(&mut csv, Some(&lineage))?;
        ctx.write(&format!("{base}.csv"), &csv, "heatmap", &[SELECTION, TEACHER])?;
    }
    Ok(())
}
