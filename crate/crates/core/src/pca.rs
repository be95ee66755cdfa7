//! Principal component analysis over tile embeddings.
//!
//! The sample covariance (1/(N-1)) is diagonalised with cyclic Jacobi
//! rotations; components are sorted by decreasing eigenvalue and each is
//! signed so that its largest-magnitude entry is positive.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;

/// Upper bound on the number of components considered downstream.
pub const MAX_COMPONENTS: usize = 10;
/// Cumulative explained-variance target used by [`choose_k`].
pub const VARIANCE_TARGET: f64 = 0.80;

const CSV_VERSION: &str = "read-pca v1";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// k × E, orthonormal rows.
    pub components: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub explained_variance_ratio: Array1<f64>,
    /// Ratios of every one of the E components, not only the first k.
    pub full_explained_variance_ratio: Array1<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Keep only the leading `k` components.
    pub fn truncated(&self, k: usize) -> Result<PcaModel> {
        if k == 0 || k > self.k() {
            return Err(Error::Range(format!("cannot truncate {} components to {k}", self.k())));
        }
        Ok(PcaModel {
            mean: self.mean.clone(),
            components: self.components.slice(ndarray::s![..k, ..]).to_owned(),
            eigenvalues: self.eigenvalues.slice(ndarray::s![..k]).to_owned(),
            explained_variance_ratio: self.explained_variance_ratio.slice(ndarray::s![..k]).to_owned(),
            full_explained_variance_ratio: self.full_explained_variance_ratio.clone(),
        })
    }
}

/// Fits `k` principal components to the rows of `x` (N × E).
pub fn fit(x: ArrayView2<f64>, k: usize) -> Result<PcaModel> {
    let (n, e) = x.dim();
    if n < 2 {
        return Err(Error::Range(format!("PCA needs at least 2 rows, got {n}")));
    }
    if k < 1 || k > (n - 1).min(e) {
        return Err(Error::Range(format!("k = {k} outside [1, {}]", (n - 1).min(e))));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in PCA input".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let total: f64 = cov.diag().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all rows are identical; total variance is zero".into()));
    }

    let (vals, vecs) = jacobi_eigen(&cov)?;
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));

    let mut components = Array2::<f64>::zeros((e, e));
    let mut eigenvalues = Array1::<f64>::zeros(e);
    for (row, &idx) in order.iter().enumerate() {
        let mut v = vecs.column(idx).to_owned();
        let lead = v
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &c)| if c.abs() > best.1.abs() { (i, c) } else { best })
            .0;
        if v[lead] < 0.0 {
            v.mapv_inplace(|c| -c);
        }
        components.row_mut(row).assign(&v);
        eigenvalues[row] = vals[idx].max(0.0);
    }
    let eig_sum: f64 = eigenvalues.sum();
    let full_ratio = eigenvalues.mapv(|l| l / eig_sum);

    Ok(PcaModel {
        mean,
        components: components.slice(ndarray::s![..k, ..]).to_owned(),
        eigenvalues: eigenvalues.slice(ndarray::s![..k]).to_owned(),
        explained_variance_ratio: full_ratio.slice(ndarray::s![..k]).to_owned(),
        full_explained_variance_ratio: full_ratio,
    })
}

/// Projects one embedding: `components · (x - mean)`.
pub fn transform(model: &PcaModel, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    if x.len() != model.dim() {
        return Err(Error::Shape(format!(
            "embedding has {} values, PCA model expects {}",
            x.len(),
            model.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in embedding".into()));
    }
    Ok(model.components.dot(&(&x - &model.mean)))
}

/// Projects every row of `x`.
pub fn transform_rows(model: &PcaModel, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != model.dim() {
        return Err(Error::Shape(format!(
            "embeddings have {} columns, PCA model expects {}",
            x.ncols(),
            model.dim()
        )));
    }
    let centered = &x - &model.mean;
    Ok(centered.dot(&model.components.t()))
}

/// Smallest k whose cumulative explained-variance ratio reaches 80 %,
/// clamped to `[1, 10]` and to the number of fitted components.
pub fn choose_k(model: &PcaModel) -> usize {
    choose_k_from_ratios(model.full_explained_variance_ratio.as_slice().unwrap_or(&[]))
}

pub fn choose_k_from_ratios(ratios: &[f64]) -> usize {
    let limit = MAX_COMPONENTS.min(ratios.len()).max(1);
    let mut cum = 0.0;
    for (i, r) in ratios.iter().take(limit).enumerate() {
        cum += r;
        if cum >= VARIANCE_TARGET - 1e-12 {
            return i + 1;
        }
    }
    limit
}

fn write_row<W: Write>(out: &mut W, label: &str, vals: ArrayView1<f64>) -> std::io::Result<()> {
    write!(out, "{label}")?;
    for v in vals {
        write!(out, ",{v:?}")?;
    }
    writeln!(out)
}

/// Persists a model as CSV blocks: mean, eigenvalues, ratios, components.
pub fn write_csv<W: Write>(mut out: W, model: &PcaModel, lineage: Option<&str>) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(out, "# {CSV_VERSION}").map_err(io)?;
    if let Some(l) = lineage {
        writeln!(out, "# lineage={l}").map_err(io)?;
    }
    writeln!(out, "dims,{},{}", model.k(), model.dim()).map_err(io)?;
    write_row(&mut out, "mean", model.mean.view()).map_err(io)?;
    write_row(&mut out, "eigenvalues", model.eigenvalues.view()).map_err(io)?;
    write_row(&mut out, "ratio", model.explained_variance_ratio.view()).map_err(io)?;
    write_row(&mut out, "full_ratio", model.full_explained_variance_ratio.view()).map_err(io)?;
    for row in model.components.rows() {
        write_row(&mut out, "component", row).map_err(io)?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(input: R) -> Result<PcaModel> {
    let perr = |m: String| Error::parse("pca model", m);
    let mut lines = Vec::new();
    let mut version_ok = false;
    for line in input.lines() {
        let line = line.map_err(|e| perr(e.to_string()))?;
        if let Some(c) = line.strip_prefix('#') {
            if c.trim() == CSV_VERSION {
                version_ok = true;
            }
            continue;
        }
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    if !version_ok {
        return Err(perr(format!("missing `# {CSV_VERSION}` header")));
    }
    let mut rows = lines.iter().map(|l| {
        let mut parts = l.split(',');
        let label = parts.next().unwrap_or("").to_string();
        let vals: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        vals.map(|v| (label, v)).map_err(|e| perr(format!("{e} in `{l}`")))
    });
    let mut next = |want: &str| -> Result<Vec<f64>> {
        let (label, vals) = rows.next().ok_or_else(|| perr(format!("missing `{want}` row")))??;
        if label != want {
            return Err(perr(format!("expected `{want}` row, found `{label}`")));
        }
        Ok(vals)
    };
    let dims = next("dims")?;
    if dims.len() != 2 {
        return Err(perr("dims row needs k and E".into()));
    }
    let (k, e) = (dims[0] as usize, dims[1] as usize);
    let check = |v: Vec<f64>, len: usize, what: &str| -> Result<Array1<f64>> {
        if v.len() != len {
            return Err(perr(format!("{what} has {} values, expected {len}", v.len())));
        }
        Ok(Array1::from(v))
    };
    let mean = check(next("mean")?, e, "mean")?;
    let eigenvalues = check(next("eigenvalues")?, k, "eigenvalues")?;
    let ratio = check(next("ratio")?, k, "ratio")?;
    let full = check(next("full_ratio")?, e, "full_ratio")?;
    let mut components = Array2::zeros((k, e));
    for i in 0..k {
        components.row_mut(i).assign(&check(next("component")?, e, "component")?);
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        explained_variance_ratio: ratio,
        full_explained_variance_ratio: full,
    })
}
