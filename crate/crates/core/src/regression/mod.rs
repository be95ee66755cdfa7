//! Regression of log-scaled economic variables from district
//! representations: ridge, lasso and gradient-boosted trees, seeded
//! 80/20 splits, k-fold model selection and the repeated-trial evaluation.

mod evaluate;
mod gbt;
mod linear;
mod metrics;
mod split;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

pub use evaluate::{
    evaluate, fit_pipeline, fit_tuned, format_table, DistrictTiles, EvalConfig, EvalReport, FittedPipeline, HyperParam,
    RegressorGrid, RegressorKind, TrialResult,
};
pub use gbt::{gbt_fit, GbtModel, GbtParams, Node, Tree};
pub use linear::{
    lasso_fit, lasso_kkt_violation, lasso_solve, ridge_fit, ridge_path, ridge_solve, LinearModel, Penalty,
    Standardizer,
};
pub use metrics::{mean_sd, mse, r2};
pub use split::{kfold, split_80_20, DEFAULT_FOLDS, TEST_FRACTION};

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::imagery_store::DemographicsRow;

/// Natural-log targets keyed by district.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTargets {
    pub variable: String,
    pub values: BTreeMap<String, f64>,
}

/// `y = ln(value)` for every district reporting `variable`.
pub fn log_targets(rows: &[DemographicsRow], variable: &str) -> Result<LogTargets> {
    let mut values = BTreeMap::new();
    for row in rows {
        let raw = row.variables.get(variable).ok_or_else(|| {
            Error::Data(format!("district {} has no value for `{variable}`", row.district_id))
        })?;
        if !(*raw > 0.0) || !raw.is_finite() {
            return Err(Error::Data(format!(
                "district {} variable `{variable}` = {raw} cannot be log-scaled",
                row.district_id
            )));
        }
        values.insert(row.district_id.clone(), raw.ln());
    }
    Ok(LogTargets {
        variable: variable.to_string(),
        values,
    })
}

/// Representations joined with targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub target_name: String,
}

impl Dataset {
    pub fn join(reprs: &[(String, Vec<f64>)], targets: &LogTargets) -> Result<Dataset> {
        let s = reprs.first().map(|r| r.1.len()).unwrap_or(0);
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        let mut y = Vec::new();
        for (id, r) in reprs {
            if r.len() != s {
                return Err(Error::Shape(format!("district {id} has {} features, expected {s}", r.len())));
            }
            let t = targets
                .values
                .get(id)
                .ok_or_else(|| Error::Data(format!("no `{}` target for district {id}", targets.variable)))?;
            ids.push(id.clone());
            flat.extend_from_slice(r);
            y.push(*t);
        }
        let x = Array2::from_shape_vec((ids.len(), s), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Dataset {
            ids,
            x,
            y: Array1::from(y),
            target_name: targets.variable.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RegressorModel {
    Linear(LinearModel),
    Gbt(GbtModel),
}

impl RegressorModel {
    pub fn n_features(&self) -> Option<usize> {
        match self {
            RegressorModel::Linear(m) => Some(m.weights.len()),
            RegressorModel::Gbt(_) => None,
        }
    }

    pub fn predict_row(&self, r: ArrayView1<f64>) -> Result<f64> {
        if let Some(p) = self.n_features() {
            if p != r.len() {
                return Err(Error::Shape(format!("model has {p} weights, representation has {}", r.len())));
            }
        }
        Ok(match self {
            RegressorModel::Linear(m) => m.predict_row(r),
            RegressorModel::Gbt(m) => m.predict_row(r),
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        x.rows().into_iter().map(|r| self.predict_row(r)).collect()
    }
}

const MODEL_MAGIC: &[u8; 8] = b"READREG1";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Versioned little-endian binary encoding of a fitted regressor.
pub fn write_model<W: Write>(mut out: W, model: &RegressorModel) -> Result<()> {
    let mut buf = MODEL_MAGIC.to_vec();
    match model {
        RegressorModel::Linear(m) => {
            buf.push(0);
            buf.push(match m.penalty {
                Penalty::Ridge => 0,
                Penalty::Lasso => 1,
            });
            put_f64(&mut buf, m.lambda);
            put_f64(&mut buf, m.intercept);
            put_u32(&mut buf, m.weights.len());
            m.weights.iter().for_each(|&w| put_f64(&mut buf, w));
        }
        RegressorModel::Gbt(m) => {
            buf.push(1);
            put_u32(&mut buf, m.params.trees);
            put_u32(&mut buf, m.params.max_depth);
            put_f64(&mut buf, m.params.learning_rate);
            put_f64(&mut buf, m.base);
            put_u32(&mut buf, m.trees.len());
            for t in &m.trees {
                put_u32(&mut buf, t.nodes.len());
                for node in &t.nodes {
                    match node {
                        Node::Leaf { value } => {
                            buf.push(0);
                            put_f64(&mut buf, *value);
                        }
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            buf.push(1);
                            put_u32(&mut buf, *feature);
                            put_f64(&mut buf, *threshold);
                            put_u32(&mut buf, *left);
                            put_u32(&mut buf, *right);
                        }
                    }
                }
            }
        }
    }
    out.write_all(&buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_model<R: Read>(mut input: R) -> Result<RegressorModel> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let mut c = ByteReader::new(&buf, "regressor model");
    c.expect_magic(MODEL_MAGIC)?;
    let model = match c.u8()? {
        0 => {
            let penalty = match c.u8()? {
                0 => Penalty::Ridge,
                1 => Penalty::Lasso,
                t => return Err(Error::Format(format!("unknown penalty tag {t}"))),
            };
            let lambda = c.f64()?;
            let intercept = c.f64()?;
            let p = c.usize32()?;
            let weights = (0..p).map(|_| c.f64()).collect::<Result<_>>()?;
            RegressorModel::Linear(LinearModel {
                penalty,
                lambda,
                weights,
                intercept,
            })
        }
        1 => {
            let params = GbtParams {
                trees: c.usize32()?,
                max_depth: c.usize32()?,
                learning_rate: c.f64()?,
            };
            let base = c.f64()?;
            let n_trees = c.usize32()?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let n_nodes = c.usize32()?;
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    nodes.push(match c.u8()? {
                        0 => Node::Leaf { value: c.f64()? },
                        1 => Node::Split {
                            feature: c.usize32()?,
                            threshold: c.f64()?,
                            left: c.usize32()?,
                            right: c.usize32()?,
                        },
                        t => return Err(Error::Format(format!("unknown node tag {t}"))),
                    });
                }
                trees.push(Tree { nodes });
            }
            RegressorModel::Gbt(GbtModel { params, base, trees })
        }
        t => return Err(Error::Format(format!("unknown model tag {t}"))),
    };
    c.finish()?;
    Ok(model)
}
