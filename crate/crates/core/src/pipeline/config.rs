//! Flat `key = value` configuration with dotted section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Relative paths resolve against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::synth::SynthWorldSpec;
use crate::error::{Error, Result};
use crate::geo_tiles::{DEFAULT_ZOOM, MAX_ZOOM};
use crate::mean_teacher::{MeanTeacherConfig, RampShape};
use crate::pca::MAX_COMPONENTS;
use crate::pruning::DEFAULT_THRESHOLD;
use crate::regression::{RegressorGrid, RegressorKind, DEFAULT_FOLDS};
use crate::spatial_stats::StdKind;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Paths {
    pub workdir: String,
    pub districts: String,
    pub images: String,
    pub labels: String,
    pub demographics: String,
    /// Precomputed tile embeddings for `extractor.mode = external-embeddings`.
    pub embeddings: Option<String>,
    /// Ground-truth tile classes written by `synth-world`.
    pub truth: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorMode {
    BuiltinConvnet,
    ExternalEmbeddings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractorSettings {
    pub mode: ExtractorMode,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Share of labeled tiles used for training; the rest measure accuracy.
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrunerSettings {
    pub enabled: bool,
    pub threshold: f64,
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub augment: bool,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PcaK {
    /// Smallest k reaching the explained-variance target.
    Auto,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressSettings {
    pub variable: String,
    pub trials: usize,
    pub folds: usize,
    pub grid: RegressorGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    #[serde(skip)]
    pub base_dir: PathBuf,
    pub seed: u64,
    pub paths: Paths,
    pub zoom: u8,
    pub extractor: ExtractorSettings,
    pub teacher: MeanTeacherConfig,
    pub pruner: PrunerSettings,
    pub pca_k: PcaK,
    pub pca_transductive: bool,
    pub repr_std: StdKind,
    pub regress: RegressSettings,
    pub heatmap_district: Option<String>,
    pub synth: SynthWorldSpec,
}

/// Raw entries with their line numbers; consumed key by key.
struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Entries> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if map.insert(k.to_string(), (v.to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
        }
        Ok(Entries { map })
    }

    fn raw(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e| Error::Config(format!("line {line}: `{key}` = `{v}`: {e}"))),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> String {
        self.raw(key).map(|(v, _)| v).unwrap_or_else(|| default.to_string())
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("line {line}: `{key}` item `{}`: {e}", s.trim())))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.map.iter().next() {
            Some((k, (_, line))) => Err(Error::Config(format!("line {line}: unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl FromStr for ExtractorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin-convnet" => Ok(ExtractorMode::BuiltinConvnet),
            "external-embeddings" => Ok(ExtractorMode::ExternalEmbeddings),
            o => Err(Error::Config(format!("unknown extractor mode `{o}` (builtin-convnet | external-embeddings)"))),
        }
    }
}

impl FromStr for PcaK {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(PcaK::Auto);
        }
        match s.parse::<usize>() {
            Ok(k) if (1..=MAX_COMPONENTS).contains(&k) => Ok(PcaK::Fixed(k)),
            _ => Err(Error::Config(format!("pca.k must be `auto` or 1..={MAX_COMPONENTS}, got `{s}`"))),
        }
    }
}

fn parse_ramp(s: &str) -> Result<RampShape> {
    match s {
        "linear" => Ok(RampShape::Linear),
        "sigmoid" => Ok(RampShape::Sigmoid),
        o => Err(Error::Config(format!("unknown ramp `{o}` (linear | sigmoid)"))),
    }
}

fn parse_std(s: &str) -> Result<StdKind> {
    match s {
        "sample" => Ok(StdKind::Sample),
        "population" => Ok(StdKind::Population),
        o => Err(Error::Config(format!("unknown repr.std `{o}` (sample | population)"))),
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        PipelineConfig::parse(&text, &base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<PipelineConfig> {
        let mut e = Entries::parse(text)?;
        let seed = match e.raw("seed") {
            Some((v, line)) => v
                .parse()
                .map_err(|err| Error::Config(format!("line {line}: `seed` = `{v}`: {err}")))?,
            None => return Err(Error::Config("`seed` is mandatory".into())),
        };
        let paths = Paths {
            workdir: e.string("paths.workdir", "work"),
            districts: e.string("paths.districts", "world/districts.geojson"),
            images: e.string("paths.images", "world/tiles"),
            labels: e.string("paths.labels", "world/labels.csv"),
            demographics: e.string("paths.demographics", "world/demographics.csv"),
            embeddings: e.raw("paths.embeddings").map(|(v, _)| v),
            truth: e.string("paths.truth", "world/truth.csv"),
        };
        let zoom: u8 = e.get("tiles.zoom", DEFAULT_ZOOM)?;
        check(zoom <= MAX_ZOOM, || format!("tiles.zoom {zoom} above {MAX_ZOOM}"))?;

        let extractor = ExtractorSettings {
            mode: e.get("extractor.mode", ExtractorMode::BuiltinConvnet)?,
            input_size: e.get("extractor.input_size", 64)?,
            channels: e.list("extractor.channels", vec![8, 16, 32])?,
            embedding_dim: e.get("extractor.embedding_dim", 32)?,
            train_fraction: e.get("extractor.train_fraction", 0.8)?,
        };
        check(extractor.train_fraction > 0.0 && extractor.train_fraction <= 1.0, || {
            "extractor.train_fraction must lie in (0, 1]".into()
        })?;

        let d = MeanTeacherConfig::default();
        let teacher = MeanTeacherConfig {
            epochs: e.get("teacher.epochs", d.epochs)?,
            rampup_epochs: e.get("teacher.rampup_epochs", d.rampup_epochs)?,
            rampup_target: e.get("teacher.rampup_target", d.rampup_target)?,
            ramp: parse_ramp(&e.string("teacher.ramp", "linear"))?,
            ema_alpha: e.get("teacher.ema_alpha", d.ema_alpha)?,
            labeled_batch: e.get("teacher.labeled_batch", d.labeled_batch)?,
            unlabeled_batch: e.get("teacher.unlabeled_batch", d.unlabeled_batch)?,
            lr: e.get("teacher.lr", d.lr)?,
            momentum: e.get("teacher.momentum", d.momentum)?,
            labeled_consistency: e.get("teacher.labeled_consistency", d.labeled_consistency)?,
            augment: e.get("teacher.augment", d.augment)?,
            seed,
        };
        teacher.validate()?;

        let pruner = PrunerSettings {
            enabled: e.get("pruner.enabled", true)?,
            threshold: e.get("pruner.threshold", DEFAULT_THRESHOLD)?,
            train_fraction: e.get("pruner.train_fraction", 0.8)?,
            epochs: e.get("pruner.epochs", 30)?,
            batch: e.get("pruner.batch", 32)?,
            lr: e.get("pruner.lr", 0.01)?,
            momentum: e.get("pruner.momentum", 0.9)?,
            augment: e.get("pruner.augment", true)?,
            channels: e.list("pruner.channels", extractor.channels.clone())?,
            embedding_dim: e.get("pruner.embedding_dim", extractor.embedding_dim)?,
        };
        check((0.0..=1.0).contains(&pruner.threshold), || "pruner.threshold must lie in [0, 1]".into())?;
        check(pruner.batch > 0, || "pruner.batch must be positive".into())?;

        let pca_k = e.get("pca.k", PcaK::Auto)?;
        let pca_transductive = e.get("pca.transductive", false)?;
        let repr_std = parse_std(&e.string("repr.std", "sample"))?;

        let kind: RegressorKind = e.get("regress.model", RegressorKind::Gbt)?;
        let g = RegressorGrid::new(kind);
        let grid = RegressorGrid {
            kind,
            lambdas: e.list("regress.lambdas", g.lambdas)?,
            depths: e.list("regress.depths", g.depths)?,
            trees: e.get("regress.trees", g.trees)?,
            learning_rate: e.get("regress.learning_rate", g.learning_rate)?,
            lasso_tol: e.get("regress.lasso_tol", g.lasso_tol)?,
        };
        check(grid.lambdas.iter().all(|l| *l >= 0.0), || "regress.lambdas must be >= 0".into())?;
        check(grid.depths.iter().all(|d| *d >= 1), || "regress.depths must be >= 1".into())?;
        let regress = RegressSettings {
            variable: e.string("regress.variable", "density"),
            trials: e.get("regress.trials", 20)?,
            folds: e.get("regress.folds", DEFAULT_FOLDS)?,
            grid,
        };
        check(regress.trials >= 1, || "regress.trials must be >= 1".into())?;
        check(regress.folds >= 2, || "regress.folds must be >= 2".into())?;

        let heatmap_district = e.raw("heatmap.district").map(|(v, _)| v);

        let s = SynthWorldSpec::default();
        let synth = SynthWorldSpec {
            extent: e.get("synth.extent", s.extent)?,
            districts_per_side: e.get("synth.districts_per_side", s.districts_per_side)?,
            origin_lon: e.get("synth.origin_lon", s.origin_lon)?,
            origin_lat: e.get("synth.origin_lat", s.origin_lat)?,
            zoom,
            jitter: e.get("synth.jitter", s.jitter)?,
            image_size: e.get("synth.image_size", extractor.input_size)?,
            bumps: e.get("synth.bumps", s.bumps)?,
            bump_radius: e.get("synth.bump_radius", s.bump_radius)?,
            uninhabited_fraction: e.get("synth.uninhabited_fraction", s.uninhabited_fraction)?,
            labeled_fraction: e.get("synth.labeled_fraction", s.labeled_fraction)?,
            density_a: e.get("synth.density_a", s.density_a)?,
            density_b: e.get("synth.density_b", s.density_b)?,
            achievable_r2: e.get("synth.achievable_r2", s.achievable_r2)?,
            noise_sd: match e.raw("synth.noise_sd") {
                None => None,
                Some((v, line)) => Some(
                    v.parse()
                        .map_err(|err| Error::Config(format!("line {line}: `synth.noise_sd` = `{v}`: {err}")))?,
                ),
            },
            class_annotators: e.get("synth.class_annotators", s.class_annotators)?,
            binary_annotators: e.get("synth.binary_annotators", s.binary_annotators)?,
            annotator_accuracy: e.get("synth.annotator_accuracy", s.annotator_accuracy)?,
        };
        synth.validate()?;
        e.finish()?;

        Ok(PipelineConfig {
            base_dir: base_dir.to_path_buf(),
            seed,
            paths,
            zoom,
            extractor,
            teacher,
            pruner,
            pca_k,
            pca_transductive,
            repr_std,
            regress,
            heatmap_district,
            synth,
        })
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> PipelineConfig {
        self.seed = seed;
        self.teacher.seed = seed;
        self
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn workdir(&self) -> PathBuf {
        self.resolve(&self.paths.workdir)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    /// Paths enter as written, so identical files in different directories
    /// hash the same.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = PipelineConfig::parse("seed = 3\n# c\n\nteacher.epochs = 5\nregress.model = ridge\npca.k = 4\n", Path::new("/x"))
            .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.teacher.epochs, 5);
        assert_eq!(c.teacher.rampup_target, 12.5);
        assert_eq!(c.regress.grid.kind, RegressorKind::Ridge);
        assert_eq!(c.pca_k, PcaK::Fixed(4));
        assert_eq!(c.workdir(), PathBuf::from("/x/work"));
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "teacher.epochs = 5",
            "seed = 1\nbogus.key = 2",
            "seed = 1\nseed = 2",
            "seed = x",
            "seed = 1\npca.k = 11",
            "seed = 1\nteacher.ema_alpha = 1.5",
            "seed = 1\nno equals sign",
        ] {
            let r = PipelineConfig::parse(bad, Path::new("."));
            assert!(matches!(r, Err(Error::Config(_))), "{bad}: {r:?}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::parse("seed = 1", Path::new("/a")).unwrap();
        let b = PipelineConfig::parse("seed = 1", Path::new("/b")).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
        assert_ne!(a.hash(), a.clone().with_seed(2).hash());
    }
}
