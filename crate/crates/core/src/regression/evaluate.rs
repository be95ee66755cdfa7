//! Repeated seeded evaluation: per trial, split districts 80/20, fit PCA on
//! the training districts' tiles, pick (k, hyper-parameter) by k-fold CV on
//! the training districts, refit, and score on the held-out districts.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gbt::{gbt_fit, GbtParams};
use super::linear::{lasso_fit, ridge_path};
use super::metrics::{mean_sd, mse, r2};
use super::split::{kfold, split_80_20};
use super::RegressorModel;
use crate::error::{Error, Result};
use crate::pca::{self, PcaModel, MAX_COMPONENTS};
use crate::spatial_stats::{represent_with, ReducedDistrict, StatSet, StdKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Ridge,
    Lasso,
    Gbt,
}

impl std::str::FromStr for RegressorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(RegressorKind::Ridge),
            "lasso" => Ok(RegressorKind::Lasso),
            "gbt" => Ok(RegressorKind::Gbt),
            other => Err(Error::Config(format!("unknown regressor `{other}` (ridge | lasso | gbt)"))),
        }
    }
}

impl std::fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressorKind::Ridge => "ridge",
            RegressorKind::Lasso => "lasso",
            RegressorKind::Gbt => "gbt",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperParam {
    Lambda(f64),
    Depth(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorGrid {
    pub kind: RegressorKind,
    pub lambdas: Vec<f64>,
    pub depths: Vec<usize>,
    pub trees: usize,
    pub learning_rate: f64,
    pub lasso_tol: f64,
}

impl RegressorGrid {
    pub fn new(kind: RegressorKind) -> Self {
        RegressorGrid {
            kind,
            lambdas: (-3..=3).map(|e| 10f64.powi(e)).collect(),
            depths: vec![2, 3, 4],
            trees: 200,
            learning_rate: 0.1,
            lasso_tol: 1e-8,
        }
    }

    pub fn candidates(&self) -> Vec<HyperParam> {
        match self.kind {
            RegressorKind::Gbt => self.depths.iter().map(|&d| HyperParam::Depth(d)).collect(),
            _ => self.lambdas.iter().map(|&l| HyperParam::Lambda(l)).collect(),
        }
    }

    fn gbt_params(&self, depth: usize) -> GbtParams {
        GbtParams {
            trees: self.trees,
            max_depth: depth,
            learning_rate: self.learning_rate,
        }
    }

    /// One model per candidate, in [`RegressorGrid::candidates`] order.
    fn fit_all(&self, x: &Array2<f64>, y: &Array1<f64>) -> Result<Vec<RegressorModel>> {
        match self.kind {
            RegressorKind::Ridge => Ok(ridge_path(x.view(), y.view(), &self.lambdas)?
                .into_iter()
                .map(RegressorModel::Linear)
                .collect()),
            RegressorKind::Lasso => self
                .lambdas
                .iter()
                .map(|&l| lasso_fit(x.view(), y.view(), l, self.lasso_tol).map(RegressorModel::Linear))
                .collect(),
            RegressorKind::Gbt => self
                .depths
                .iter()
                .map(|&d| gbt_fit(x.view(), y.view(), self.gbt_params(d)).map(RegressorModel::Gbt))
                .collect(),
        }
    }

    fn fit_one(&self, x: &Array2<f64>, y: &Array1<f64>, param: HyperParam) -> Result<RegressorModel> {
        match (self.kind, param) {
            (RegressorKind::Ridge, HyperParam::Lambda(l)) => {
                Ok(RegressorModel::Linear(ridge_path(x.view(), y.view(), &[l])?.remove(0)))
            }
            (RegressorKind::Lasso, HyperParam::Lambda(l)) => {
                Ok(RegressorModel::Linear(lasso_fit(x.view(), y.view(), l, self.lasso_tol)?))
            }
            (RegressorKind::Gbt, HyperParam::Depth(d)) => Ok(RegressorModel::Gbt(gbt_fit(
                x.view(),
                y.view(),
                self.gbt_params(d),
            )?)),
            (kind, p) => Err(Error::Config(format!("hyper-parameter {p:?} does not apply to {kind}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    /// Candidate PCA dimensions.
    pub ks: Vec<usize>,
    pub grid: RegressorGrid,
    pub folds: usize,
    pub stats: StatSet,
    pub std_kind: StdKind,
    /// Fit PCA on every district's tiles instead of the training districts only.
    pub transductive_pca: bool,
}

impl EvalConfig {
    pub fn new(kind: RegressorKind) -> Self {
        EvalConfig {
            trials: 20,
            seed: 0,
            ks: (1..=MAX_COMPONENTS).collect(),
            grid: RegressorGrid::new(kind),
            folds: super::DEFAULT_FOLDS,
            stats: StatSet::ALL,
            std_kind: StdKind::Sample,
            transductive_pca: false,
        }
    }
}

/// Pruned tile embeddings of one district (n_i × E).
#[derive(Debug, Clone, PartialEq)]
pub struct DistrictTiles {
    pub district_id: String,
    pub embeddings: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub k: usize,
    pub param: HyperParam,
    pub cv_mse: f64,
    pub mse: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: String,
    pub label: String,
    pub regressor: RegressorKind,
    pub trials: Vec<TrialResult>,
    pub mse_mean: f64,
    pub mse_sd: f64,
    pub r2_mean: f64,
    pub r2_sd: f64,
}

/// A PCA + representation + regressor chain fitted on one set of districts.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPipeline {
    pub pca: PcaModel,
    pub k: usize,
    pub param: HyperParam,
    pub cv_mse: f64,
    pub stats: StatSet,
    pub std_kind: StdKind,
    pub model: RegressorModel,
}

impl FittedPipeline {
    pub fn represent(&self, tiles: &DistrictTiles) -> Result<Vec<f64>> {
        let reduced = pca::transform_rows(&self.pca, tiles.embeddings.view())?;
        let r = represent_with(
            &ReducedDistrict {
                district_id: tiles.district_id.clone(),
                features: reduced.slice(s![.., ..self.k]).to_owned(),
            },
            self.stats,
            self.std_kind,
        )?;
        Ok(r.vector())
    }

    pub fn predict(&self, tiles: &DistrictTiles) -> Result<f64> {
        let r = self.represent(tiles)?;
        self.model.predict_row(Array1::from(r).view())
    }
}

fn stack_tiles(districts: &[DistrictTiles], idx: &[usize]) -> Result<Array2<f64>> {
    let views: Vec<_> = idx.iter().map(|&i| districts[i].embeddings.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

fn design(
    reduced: &[Array2<f64>],
    ids: &[String],
    rows: &[usize],
    k: usize,
    stats: StatSet,
    std_kind: StdKind,
) -> Result<Array2<f64>> {
    let s = stats.repr_len(k);
    let mut x = Array2::zeros((rows.len(), s));
    for (out_row, &i) in rows.iter().enumerate() {
        let r = represent_with(
            &ReducedDistrict {
                district_id: ids[i].clone(),
                features: reduced[i].slice(s![.., ..k]).to_owned(),
            },
            stats,
            std_kind,
        )?;
        x.row_mut(out_row).assign(&Array1::from(r.vector()));
    }
    Ok(x)
}

/// Fits PCA, chooses (k, hyper-parameter) by k-fold CV and refits on every
/// district in `train`.
pub fn fit_pipeline(
    districts: &[DistrictTiles],
    y: &[f64],
    train: &[usize],
    cfg: &EvalConfig,
) -> Result<FittedPipeline> {
    if districts.len() != y.len() {
        return Err(Error::Shape(format!("{} districts vs {} targets", districts.len(), y.len())));
    }
    if let Some(d) = districts.iter().find(|d| d.embeddings.nrows() == 0) {
        return Err(Error::Data(format!("district {} has no tiles", d.district_id)));
    }
    if cfg.ks.is_empty() || cfg.ks.contains(&0) {
        return Err(Error::Config("PCA candidate list must hold k >= 1".into()));
    }
    let pca_rows: Vec<usize> = if cfg.transductive_pca { (0..districts.len()).collect() } else { train.to_vec() };
    let pca_input = stack_tiles(districts, &pca_rows)?;
    let dim = pca_input.ncols();
    let k_cap = cfg.ks.iter().copied().max().unwrap_or(1).min(dim).min(pca_input.nrows().saturating_sub(1));
    let ks: Vec<usize> = cfg.ks.iter().copied().filter(|&k| k <= k_cap).collect();
    if ks.is_empty() {
        return Err(Error::Data(format!("no candidate k fits {} tiles of dimension {dim}", pca_input.nrows())));
    }
    let full_pca = pca::fit(pca_input.view(), k_cap)?;
    let ids: Vec<String> = districts.iter().map(|d| d.district_id.clone()).collect();
    let reduced: Vec<Array2<f64>> = districts
        .iter()
        .map(|d| pca::transform_rows(&full_pca, d.embeddings.view()))
        .collect::<Result<_>>()?;

    let y_train = Array1::from(train.iter().map(|&i| y[i]).collect::<Vec<_>>());
    let folds = kfold(train.len(), cfg.folds)?;
    let candidates = cfg.grid.candidates();
    let mut best: Option<(f64, usize, HyperParam)> = None;
    for &k in &ks {
        let x = design(&reduced, &ids, train, k, cfg.stats, cfg.std_kind)?;
        let cv = cv_mse(&cfg.grid, &x, &y_train, &folds)?;
        for (c, &param) in candidates.iter().enumerate() {
            if best.is_none_or(|(b, _, _)| cv[c] < b) {
                best = Some((cv[c], k, param));
            }
        }
    }
    let (cv_mse, k, param) = best.ok_or_else(|| Error::Config("empty hyper-parameter grid".into()))?;
    let x = design(&reduced, &ids, train, k, cfg.stats, cfg.std_kind)?;
    let model = cfg.grid.fit_one(&x, &y_train, param)?;
    Ok(FittedPipeline {
        pca: full_pca.truncated(k)?,
        k,
        param,
        cv_mse,
        stats: cfg.stats,
        std_kind: cfg.std_kind,
        model,
    })
}

/// Cross-validated MSE of every grid candidate.
fn cv_mse(
    grid: &RegressorGrid,
    x: &Array2<f64>,
    y: &Array1<f64>,
    folds: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<f64>> {
    let mut sq_err = vec![0.0; grid.candidates().len()];
    for (fit_rows, val_rows) in folds {
        let xf = x.select(Axis(0), fit_rows);
        let yf = y.select(Axis(0), fit_rows);
        let xv = x.select(Axis(0), val_rows);
        let models = grid.fit_all(&xf, &yf)?;
        for (c, m) in models.iter().enumerate() {
            let pred = m.predict(xv.view())?;
            for (p, &v) in pred.iter().zip(val_rows) {
                sq_err[c] += (p - y[v]).powi(2);
            }
        }
    }
    Ok(sq_err.into_iter().map(|e| e / y.len() as f64).collect())
}

/// Chooses the grid candidate by `folds`-fold CV on a fixed design matrix
/// and refits it on all rows. Returns the choice, its CV MSE and the model.
pub fn fit_tuned(
    x: &Array2<f64>,
    y: &Array1<f64>,
    grid: &RegressorGrid,
    folds: usize,
) -> Result<(HyperParam, f64, RegressorModel)> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows vs {} targets", x.nrows(), y.len())));
    }
    let cv = cv_mse(grid, x, y, &kfold(y.len(), folds)?)?;
    let mut best: Option<(f64, HyperParam)> = None;
    for (c, &param) in grid.candidates().iter().enumerate() {
        if best.is_none_or(|(b, _)| cv[c] < b) {
            best = Some((cv[c], param));
        }
    }
    let (cv_mse, param) = best.ok_or_else(|| Error::Config("empty hyper-parameter grid".into()))?;
    Ok((param, cv_mse, grid.fit_one(x, y, param)?))
}

fn run_trial(
    trial: usize,
    districts: &[DistrictTiles],
    y: &[f64],
    cfg: &EvalConfig,
) -> Result<TrialResult> {
    let seed = cfg.seed.wrapping_add(trial as u64);
    let (train, test) = split_80_20(districts.len(), seed)?;
    let fitted = fit_pipeline(districts, y, &train, cfg)?;
    let y_test: Vec<f64> = test.iter().map(|&i| y[i]).collect();
    let pred: Vec<f64> = test.iter().map(|&i| fitted.predict(&districts[i])).collect::<Result<_>>()?;
    Ok(TrialResult {
        trial,
        seed,
        k: fitted.k,
        param: fitted.param,
        cv_mse: fitted.cv_mse,
        mse: mse(&y_test, &pred)?,
        r2: r2(&y_test, &pred)?,
    })
}

/// Runs `cfg.trials` independent seeded trials; trial `t` uses seed
/// `cfg.seed + t` for its split.
pub fn evaluate(
    districts: &[DistrictTiles],
    y: &[f64],
    target: &str,
    label: &str,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    let trials: Vec<TrialResult> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(t, districts, y, cfg))
        .collect::<Result<_>>()?;
    let (mse_mean, mse_sd) = mean_sd(&trials.iter().map(|t| t.mse).collect::<Vec<_>>());
    let (r2_mean, r2_sd) = mean_sd(&trials.iter().map(|t| t.r2).collect::<Vec<_>>());
    Ok(EvalReport {
        target: target.to_string(),
        label: label.to_string(),
        regressor: cfg.grid.kind,
        trials,
        mse_mean,
        mse_sd,
        r2_mean,
        r2_sd,
    })
}

/// Aligned text table with one `label | MSE | R-Squared` row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.label.chars().count()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>17}  {:>17}\n", "Model", "MSE", "R-Squared");
    out.push_str(&format!("{}\n", "-".repeat(width + 38)));
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>17}  {:>17}\n",
            r.label,
            format!("{:.4}±{:.4}", r.mse_mean, r.mse_sd),
            format!("{:.4}±{:.4}", r.r2_mean, r.r2_sd),
        ));
    }
    out
}
