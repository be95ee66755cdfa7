//! Fixed-length district representation from a variable number of reduced
//! tile embeddings.
//!
//! For a district with `n` tiles reduced to `k` dimensions the base vector
//! has `m = 2k + 1 + k(k-1)/2` entries laid out as
//! `[μ_1..μ_k, σ_1..σ_k, n, ρ_(1,2), ρ_(1,3), .., ρ_(k-1,k)]`, and the full
//! representation appends every product `base_a · base_b` with `a <= b`,
//! giving `s = m + m(m+1)/2` values.

use std::io::{BufRead, Write};

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYOUT_VERSION: u32 = 1;

/// Which summary groups enter the base vector. All on for the full
/// representation; ablations switch one group off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatSet {
    pub mean: bool,
    pub std: bool,
    pub count: bool,
    pub corr: bool,
}

impl StatSet {
    pub const ALL: StatSet = StatSet {
        mean: true,
        std: true,
        count: true,
        corr: true,
    };

    pub fn base_len(&self, k: usize) -> usize {
        let mut m = 0;
        if self.mean {
            m += k;
        }
        if self.std {
            m += k;
        }
        if self.count {
            m += 1;
        }
        if self.corr {
            m += k * k.saturating_sub(1) / 2;
        }
        m
    }

    pub fn repr_len(&self, k: usize) -> usize {
        let m = self.base_len(k);
        m + m * (m + 1) / 2
    }
}

impl Default for StatSet {
    fn default() -> Self {
        StatSet::ALL
    }
}

/// Standard deviation normaliser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StdKind {
    /// 1/(n-1); zero when n = 1.
    #[default]
    Sample,
    /// 1/n.
    Population,
}

pub fn base_len(k: usize) -> usize {
    StatSet::ALL.base_len(k)
}

pub fn repr_len(k: usize) -> usize {
    StatSet::ALL.repr_len(k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedDistrict {
    pub district_id: String,
    /// n × k reduced tile features.
    pub features: ndarray::Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistrictRepresentation {
    pub district_id: String,
    pub k: usize,
    pub base: Vec<f64>,
    pub cross: Vec<f64>,
}

impl DistrictRepresentation {
    /// `base ∥ cross`.
    pub fn vector(&self) -> Vec<f64> {
        let mut v = self.base.clone();
        v.extend_from_slice(&self.cross);
        v
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.cross.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// μ, σ, n and pairwise Pearson ρ of the columns of `r` (n × k).
pub fn base_features(r: ArrayView2<f64>) -> Result<Vec<f64>> {
    base_features_with(r, StatSet::ALL, StdKind::Sample)
}

pub fn base_features_with(r: ArrayView2<f64>, stats: StatSet, std_kind: StdKind) -> Result<Vec<f64>> {
    let (n, k) = r.dim();
    if n == 0 {
        return Err(Error::Data("district has no tiles".into()));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite reduced feature".into()));
    }
    // Canonical row order makes the result bitwise independent of tile order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        r.row(a)
            .iter()
            .zip(r.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let r = r.select(Axis(0), &order);
    let mean = r.mean_axis(Axis(0)).expect("n >= 1");
    let centered = &r - &mean;
    // sum of squared deviations per column and cross sums
    let scatter = centered.t().dot(&centered);
    let denom = match std_kind {
        StdKind::Sample => n as f64 - 1.0,
        StdKind::Population => n as f64,
    };
    let std: Array1<f64> = (0..k)
        .map(|d| if n < 2 { 0.0 } else { (scatter[[d, d]] / denom).max(0.0).sqrt() })
        .collect();

    let mut out = Vec::with_capacity(stats.base_len(k));
    if stats.mean {
        out.extend(mean.iter().copied());
    }
    if stats.std {
        out.extend(std.iter().copied());
    }
    if stats.count {
        out.push(n as f64);
    }
    if stats.corr {
        for a in 0..k {
            for b in (a + 1)..k {
                let saa = scatter[[a, a]];
                let sbb = scatter[[b, b]];
                let rho = if n < 2 || saa <= 0.0 || sbb <= 0.0 {
                    0.0
                } else {
                    (scatter[[a, b]] / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
                };
                out.push(rho);
            }
        }
    }
    Ok(out)
}

/// Products `base_a · base_b` for `a <= b` in row-major upper-triangle order.
pub fn cross_products(base: &[f64]) -> Vec<f64> {
    let m = base.len();
    let mut out = Vec::with_capacity(m * (m + 1) / 2);
    for a in 0..m {
        for b in a..m {
            out.push(base[a] * base[b]);
        }
    }
    out
}

pub fn represent(district: &ReducedDistrict) -> Result<DistrictRepresentation> {
    represent_with(district, StatSet::ALL, StdKind::Sample)
}

pub fn represent_with(
    district: &ReducedDistrict,
    stats: StatSet,
    std_kind: StdKind,
) -> Result<DistrictRepresentation> {
    let base = base_features_with(district.features.view(), stats, std_kind)
        .map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("district {}: {m}", district.district_id)),
            other => other,
        })?;
    let cross = cross_products(&base);
    Ok(DistrictRepresentation {
        district_id: district.district_id.clone(),
        k: district.features.ncols(),
        base,
        cross,
    })
}

/// Writes representations as `district_id,r_0,..,r_{s-1}` preceded by a
/// comment header recording k and the layout version.
pub fn write_csv<W: Write>(
    mut out: W,
    reprs: &[DistrictRepresentation],
    k: usize,
    lineage: Option<&str>,
) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    let s = reprs.first().map(|r| r.len()).unwrap_or_else(|| repr_len(k));
    writeln!(out, "# k={k} layout={LAYOUT_VERSION}").map_err(io)?;
    if let Some(l) = lineage {
        writeln!(out, "# lineage={l}").map_err(io)?;
    }
    write!(out, "district_id").map_err(io)?;
    for i in 0..s {
        write!(out, ",r_{i}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for r in reprs {
        if r.len() != s {
            return Err(Error::Shape(format!(
                "district {} has representation length {}, expected {s}",
                r.district_id,
                r.len()
            )));
        }
        write!(out, "{}", r.district_id).map_err(io)?;
        for v in r.vector() {
            write!(out, ",{v:?}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    Ok(())
}

/// Reads `(k, rows)` back; each row is `(district_id, r)`.
pub fn read_csv<R: BufRead>(input: R) -> Result<(usize, Vec<(String, Vec<f64>)>)> {
    let perr = |m: String| Error::parse("representations", m);
    let mut k = None;
    let mut width = None;
    let mut rows = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| perr(e.to_string()))?;
        if let Some(c) = line.strip_prefix('#') {
            for kv in c.split_whitespace() {
                if let Some(v) = kv.strip_prefix("k=") {
                    k = Some(v.parse::<usize>().map_err(|e| perr(e.to_string()))?);
                }
                if let Some(v) = kv.strip_prefix("layout=") {
                    if v != LAYOUT_VERSION.to_string() {
                        return Err(perr(format!("unsupported layout version {v}")));
                    }
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if width.is_none() {
            width = Some(line.split(',').count() - 1);
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or("").to_string();
        let vals: Vec<f64> = parts
            .map(|p| p.parse::<f64>().map_err(|e| perr(format!("line {}: {e}", lineno + 1))))
            .collect::<Result<_>>()?;
        if Some(vals.len()) != width {
            return Err(perr(format!("line {}: {} values, header has {:?}", lineno + 1, vals.len(), width)));
        }
        rows.push((id, vals));
    }
    let k = k.ok_or_else(|| perr("missing `# k=` header".into()))?;
    Ok((k, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_tile_district() {
        let r = array![[0.3, -1.0, 2.0]];
        let b = base_features(r.view()).unwrap();
        assert_eq!(&b[..3], &[0.3, -1.0, 2.0]);
        assert_eq!(&b[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(b[6], 1.0);
        assert_eq!(&b[7..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn perfect_linear_relation() {
        let r = array![[1.0, 4.0], [2.0, 7.0]];
        let b = base_features(r.view()).unwrap();
        assert!((b[5] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_column_has_zero_correlation() {
        let r = array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]];
        let b = base_features(r.view()).unwrap();
        assert_eq!(b[5], 0.0);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn cross_product_enumeration() {
        assert_eq!(cross_products(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(cross_products(&[1.0; 4]), vec![1.0; 10]);
        let c = cross_products(&[0.0, 0.0, 2.0, 0.0]);
        let nz: Vec<usize> = c.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
        // (2,2) sits after rows 0 and 1 (4 + 3 entries)
        assert_eq!(nz, vec![7]);
        assert_eq!(c[7], 4.0);
    }

    #[test]
    fn length_formula() {
        assert_eq!(base_len(10), 66);
        assert_eq!(repr_len(10), 2277);
        assert_eq!(repr_len(1), 3 + 6);
        let no_mean = StatSet { mean: false, ..StatSet::ALL };
        assert_eq!(no_mean.base_len(10), 56);
    }

    #[test]
    fn empty_and_non_finite_rejected() {
        let r = ndarray::Array2::<f64>::zeros((0, 2));
        assert!(base_features(r.view()).is_err());
        let r = array![[1.0, f64::INFINITY]];
        assert!(matches!(base_features(r.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn csv_round_trip() {
        let d = ReducedDistrict {
            district_id: "a".into(),
            features: array![[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]],
        };
        let r = represent(&d).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, std::slice::from_ref(&r), 2, None).unwrap();
        let (k, rows) = read_csv(buf.as_slice()).unwrap();
        assert_eq!(k, 2);
        assert_eq!(rows, vec![("a".to_string(), r.vector())]);
    }
}
