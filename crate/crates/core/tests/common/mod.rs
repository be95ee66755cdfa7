//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's own geometry, eigen-solver or statistics code.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use read_core::geo_tiles::{DistrictPolygon, GeoPoint, PolygonPart, TileId};

/// Slippy-map column and row of a point, straight from the textbook formula.
pub fn tile_frac(lon: f64, lat: f64, z: u8) -> (f64, f64) {
    let n = 2f64.powi(z as i32);
    let phi = lat * PI / 180.0;
    ((lon + 180.0) / 360.0 * n, (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n)
}

pub fn edge_lon(x: u32, z: u8) -> f64 {
    x as f64 / 2f64.powi(z as i32) * 360.0 - 180.0
}

pub fn edge_lat(y: u32, z: u8) -> f64 {
    (PI * (1.0 - 2.0 * y as f64 / 2f64.powi(z as i32))).sinh().atan() * 180.0 / PI
}

/// Winding number of a closed ring around `p`.
pub fn winding_number(ring: &[GeoPoint], p: (f64, f64)) -> i32 {
    let (px, py) = p;
    let mut wn = 0;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        let cross = (b.lon - a.lon) * (py - a.lat) - (px - a.lon) * (b.lat - a.lat);
        if a.lat <= py {
            if b.lat > py && cross > 0.0 {
                wn += 1;
            }
        } else if b.lat <= py && cross < 0.0 {
            wn -= 1;
        }
    }
    wn
}

pub fn inside_by_winding(poly: &DistrictPolygon, p: (f64, f64)) -> bool {
    poly.parts.iter().any(|part| {
        winding_number(&part.shell, p) != 0 && part.holes.iter().all(|h| winding_number(h, p) == 0)
    })
}

/// Every tile in the polygon's tile-space bounding box (plus a margin of
/// two) with at least three corners inside by the winding-number rule.
pub fn brute_force_select(poly: &DistrictPolygon, z: u8) -> BTreeSet<TileId> {
    let n = 1i64 << z;
    let pts = poly.parts.iter().flat_map(|p| p.shell.iter());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in pts {
        let (x, y) = tile_frac(p.lon, p.lat, z);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let lo = |v: f64| (v.floor() as i64 - 2).clamp(0, n - 1) as u32;
    let hi = |v: f64| (v.floor() as i64 + 2).clamp(0, n - 1) as u32;
    let mut out = BTreeSet::new();
    for y in lo(y0)..=hi(y1) {
        for x in lo(x0)..=hi(x1) {
            let corners = [
                (edge_lon(x, z), edge_lat(y, z)),
                (edge_lon(x + 1, z), edge_lat(y, z)),
                (edge_lon(x + 1, z), edge_lat(y + 1, z)),
                (edge_lon(x, z), edge_lat(y + 1, z)),
            ];
            let hits = corners.iter().filter(|&&c| inside_by_winding(poly, c)).count();
            if hits >= 3 {
                out.insert(TileId { z, x, y });
            }
        }
    }
    out
}

/// Point at fractional tile coordinates `(tx, ty)`.
pub fn tile_point(tx: f64, ty: f64, z: u8) -> GeoPoint {
    let n = 2f64.powi(z as i32);
    GeoPoint {
        lon: tx / n * 360.0 - 180.0,
        lat: (PI * (1.0 - 2.0 * ty / n)).sinh().atan() * 180.0 / PI,
    }
}

/// Closed star-shaped ring around `(cx, cy)` in tile units with radii in
/// `[r_min, r_max)`.
pub fn star_ring<R: Rng>(rng: &mut R, z: u8, c: (f64, f64), r_min: f64, r_max: f64, vertices: usize) -> Vec<GeoPoint> {
    let mut angles: Vec<f64> = (0..vertices).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup();
    let mut ring: Vec<GeoPoint> = angles
        .iter()
        .map(|&a| {
            let r = rng.gen_range(r_min..r_max);
            tile_point(c.0 + r * a.cos(), c.1 + r * a.sin(), z)
        })
        .collect();
    ring.push(ring[0]);
    ring
}

/// Random polygon a few tiles across at zoom `z`: star-shaped shells, a hole
/// in about a third of the cases and a second part in another third.
pub fn random_polygon<R: Rng>(rng: &mut R, z: u8, id: usize) -> DistrictPolygon {
    let n = 2f64.powi(z as i32);
    let r_max = rng.gen_range(1.2..4.0f64).min(n / 6.5);
    let r_min = 0.45 * r_max;
    let margin = r_max + 0.2;
    let cx = rng.gen_range(margin..n - 3.0 * r_max - 0.2);
    let cy = rng.gen_range(margin.max(0.15 * n)..(n - margin).min(0.85 * n));
    let nv = rng.gen_range(5..12);
    let shell = star_ring(rng, z, (cx, cy), r_min, r_max, nv);
    let mut holes = Vec::new();
    let kind = rng.gen_range(0..3);
    if kind == 1 {
        holes.push(star_ring(rng, z, (cx, cy), 0.2 * r_min, 0.4 * r_min, 6));
    }
    let mut parts = vec![PolygonPart { shell, holes }];
    if kind == 2 {
        parts.push(PolygonPart {
            shell: star_ring(rng, z, (cx + 2.4 * r_max, cy), 0.25 * r_max, 0.5 * r_max, 7),
            holes: Vec::new(),
        });
    }
    DistrictPolygon { district_id: format!("p{id}"), parts }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and unit eigenvectors as
/// rows with their largest-magnitude entry made positive.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let vals = order.iter().map(|&i| m[i][i]).collect();
    let vecs = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k][i]).collect();
            let lead = col.iter().copied().fold(0.0f64, |b, c| if c.abs() > b.abs() { c } else { b });
            if lead < 0.0 {
                col.iter_mut().for_each(|c| *c = -*c);
            }
            col
        })
        .collect();
    (vals, vecs)
}

/// Sample covariance (1/(n-1)) of the rows of `x`.
pub fn covariance(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, e) = (x.len(), x[0].len());
    let mean: Vec<f64> = (0..e).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    (0..e)
        .map(|a| {
            (0..e)
                .map(|b| x.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / (n as f64 - 1.0))
                .collect()
        })
        .collect()
}

/// Mean, sample deviation and Pearson correlation computed the long way.
pub fn naive_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let k = rows[0].len();
    let mu: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let ss = |a: usize, b: usize| rows.iter().map(|r| (r[a] - mu[a]) * (r[b] - mu[b])).sum::<f64>();
    let sigma: Vec<f64> = (0..k).map(|j| if rows.len() < 2 { 0.0 } else { (ss(j, j) / (n - 1.0)).sqrt() }).collect();
    let mut rho = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let d = (ss(a, a) * ss(b, b)).sqrt();
            rho.push(if rows.len() < 2 || d == 0.0 { 0.0 } else { ss(a, b) / d });
        }
    }
    (mu, sigma, rho)
}

/// Best single split of `(x, y)` by exhaustive search over every feature and
/// every midpoint between distinct sorted values. Returns
/// `(feature, threshold, left_mean, right_mean, sse)`.
pub fn best_stump(x: &[Vec<f64>], y: &[f64]) -> Option<(usize, f64, f64, f64, f64)> {
    let sse = |idx: &[usize]| -> (f64, f64) {
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        (m, idx.iter().map(|&i| (y[i] - m).powi(2)).sum())
    };
    let mut best: Option<(usize, f64, f64, f64, f64)> = None;
    for f in 0..x[0].len() {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let left: Vec<usize> = (0..y.len()).filter(|&i| x[i][f] <= thr).collect();
            let right: Vec<usize> = (0..y.len()).filter(|&i| x[i][f] > thr).collect();
            let (lm, ls) = sse(&left);
            let (rm, rs) = sse(&right);
            if best.is_none_or(|b| ls + rs < b.4 - 1e-12) {
                best = Some((f, thr, lm, rm, ls + rs));
            }
        }
    }
    best
}
