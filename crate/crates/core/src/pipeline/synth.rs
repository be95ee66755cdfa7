//! Procedural stand-in world: a square block of tiles split into jittered
//! quadrilateral districts, a smooth urbanization field, planted uninhabited
//! patches, rendered tile images, noisy annotator votes and demographics
//! derived from the field.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_tiles::{
    lonlat_to_tile_frac, select_tiles, tile_x_to_lon, tile_y_to_lat, DistrictPolygon, GeoPoint, TileId,
    TileSelection,
};
use crate::imagery_store::{
    districts_to_geojson, save_tile_image, tile_image_path, write_demographics, write_votes, DemographicsRow,
    TileImage, VoteRow, RURAL, UNINHABITED, URBAN,
};

/// Urbanization at or above this value renders as urban.
pub const URBAN_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthWorldSpec {
    /// Side of the square tile block.
    pub extent: u32,
    pub districts_per_side: u32,
    /// North-west corner of the block.
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub zoom: u8,
    /// Interior district vertices move by up to this share of a cell.
    pub jitter: f64,
    pub image_size: usize,
    pub bumps: usize,
    /// Typical bump radius in tiles.
    pub bump_radius: f64,
    /// Share of each district's tiles planted uninhabited, taken where the mask field is lowest.
    pub uninhabited_fraction: f64,
    pub labeled_fraction: f64,
    /// `density = exp(a · mean_u + b + noise)`.
    pub density_a: f64,
    pub density_b: f64,
    /// Sets the noise level when `noise_sd` is absent.
    pub achievable_r2: f64,
    pub noise_sd: Option<f64>,
    pub class_annotators: usize,
    pub binary_annotators: usize,
    pub annotator_accuracy: f64,
}

impl Default for SynthWorldSpec {
    fn default() -> Self {
        SynthWorldSpec {
            extent: 70,
            districts_per_side: 10,
            origin_lon: 126.85,
            origin_lat: 37.62,
            zoom: 15,
            jitter: 0.25,
            image_size: 64,
            bumps: 8,
            bump_radius: 7.0,
            uninhabited_fraction: 0.3,
            labeled_fraction: 0.2,
            density_a: 3.0,
            density_b: 5.0,
            achievable_r2: 0.95,
            noise_sd: None,
            class_annotators: 4,
            binary_annotators: 3,
            annotator_accuracy: 0.95,
        }
    }
}

impl SynthWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("uninhabited_fraction", self.uninhabited_fraction),
            ("labeled_fraction", self.labeled_fraction),
            ("annotator_accuracy", self.annotator_accuracy),
            ("jitter", self.jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("synth.{name} = {v} outside [0, 1]"));
            }
        }
        if self.jitter >= 0.5 {
            return bad("synth.jitter must stay below 0.5 to keep districts convex".into());
        }
        if !(self.achievable_r2 > 0.0 && self.achievable_r2 <= 1.0) {
            return bad(format!("synth.achievable_r2 = {} outside (0, 1]", self.achievable_r2));
        }
        if self.districts_per_side == 0 || self.extent < self.districts_per_side {
            return bad(format!(
                "synth.extent {} must be at least synth.districts_per_side {} (> 0)",
                self.extent, self.districts_per_side
            ));
        }
        if self.image_size < 2 {
            return bad("synth.image_size must be at least 2".into());
        }
        if self.class_annotators == 0 || self.binary_annotators == 0 {
            return bad("synth annotator counts must be positive".into());
        }
        if self.noise_sd.is_some_and(|s| !(s >= 0.0)) {
            return bad("synth.noise_sd must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileTruth {
    pub tile: TileId,
    pub district_id: String,
    pub class: usize,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub districts: Vec<DistrictPolygon>,
    pub selections: Vec<TileSelection>,
    /// One entry per selected tile, in district then tile order.
    pub truth: Vec<TileTruth>,
    pub demographics: Vec<DemographicsRow>,
    pub votes: Vec<VoteRow>,
    /// Mean urbanization over each district's inhabited tiles.
    pub mean_u: BTreeMap<String, f64>,
    pub noise_sd: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl SynthWorld {
    /// Share of selected tiles planted uninhabited.
    pub fn planted_uninhabited_share(&self) -> f64 {
        if self.truth.is_empty() {
            return 0.0;
        }
        self.truth.iter().filter(|t| t.class == UNINHABITED).count() as f64 / self.truth.len() as f64
    }

    pub fn render(&self, t: &TileTruth) -> TileImage {
        TileImage {
            tile: t.tile,
            pixels: render_tile(t.class, t.u, self.image_size, &mut tile_rng(self.seed, t.tile)),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn tile_rng(seed: u64, t: TileId) -> ChaCha8Rng {
    stream_rng(seed, (1 << 63) | ((t.x as u64) << 32) | t.y as u64)
}

const STREAM_FIELD: u64 = 1;
const STREAM_MASK: u64 = 2;
const STREAM_JITTER: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_LABELED: u64 = 5;
const STREAM_VOTES: u64 = 6;

/// Sum of Gaussian bumps over tile-grid coordinates.
struct BumpField {
    bumps: Vec<(f64, f64, f64, f64)>,
    base: f64,
}

impl BumpField {
    fn random(rng: &mut ChaCha8Rng, n: usize, extent: f64, radius: f64, base: f64) -> BumpField {
        let bumps = (0..n)
            .map(|_| {
                (
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.0..extent),
                    rng.gen_range(0.4..1.0),
                    radius * rng.gen_range(0.6..1.4),
                )
            })
            .collect();
        BumpField { bumps, base }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.base
            + self
                .bumps
                .iter()
                .map(|&(cx, cy, a, r)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp())
                .sum::<f64>()
    }
}

/// Renders one tile: forest or water for uninhabited tiles, striped fields
/// for rural ones and grey blocks with a road grid for urban ones. Roofs
/// cover 2×2 blocks with probability `0.6·u`.
pub fn render_tile<R: Rng>(class: usize, u: f64, size: usize, rng: &mut R) -> Array3<f32> {
    let mut px = Array3::<f32>::zeros((size, size, 3));
    let jitter = |rng: &mut R, amp: f64| rng.gen_range(-amp..amp);
    match class {
        UNINHABITED => {
            let base = if rng.gen_bool(0.5) { [0.10, 0.38, 0.14] } else { [0.08, 0.22, 0.52] };
            for ((_, _, c), v) in px.indexed_iter_mut() {
                *v = (base[c] + jitter(rng, 0.04)) as f32;
            }
        }
        _ => {
            let urban = class == URBAN;
            let base = if urban { [0.42, 0.42, 0.45] } else { [0.58, 0.52, 0.26] };
            let vertical = rng.gen_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let stripe = if urban {
                        if x % 8 == 0 || y % 8 == 0 {
                            -0.22
                        } else {
                            0.0
                        }
                    } else if (if vertical { x } else { y } / 2) % 2 == 0 {
                        0.07
                    } else {
                        -0.07
                    };
                    for c in 0..3 {
                        px[[y, x, c]] = (base[c] + stripe + jitter(rng, 0.03)) as f32;
                    }
                }
            }
            let f = (0.6 * u).clamp(0.0, 1.0);
            for by in (0..size).step_by(2) {
                for bx in (0..size).step_by(2) {
                    if rng.gen_bool(f) {
                        let roof = [0.88, 0.84, 0.80].map(|v: f64| (v + jitter(rng, 0.03)) as f32);
                        for y in by..(by + 2).min(size) {
                            for x in bx..(bx + 2).min(size) {
                                for c in 0..3 {
                                    px[[y, x, c]] = roof[c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    px
}

fn class_of(u: f64, uninhabited: bool) -> usize {
    if uninhabited {
        UNINHABITED
    } else if u >= URBAN_THRESHOLD {
        URBAN
    } else {
        RURAL
    }
}

fn district_polygons(spec: &SynthWorldSpec, seed: u64) -> Result<(Vec<DistrictPolygon>, (u32, u32))> {
    let origin = GeoPoint::new(spec.origin_lon, spec.origin_lat)?;
    let (fx, fy) = lonlat_to_tile_frac(origin, spec.zoom);
    let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
    let grid = 1u64 << spec.zoom;
    if x0 as u64 + spec.extent as u64 > grid || y0 as u64 + spec.extent as u64 > grid {
        return Err(Error::Config("synthetic block runs past the edge of the tile grid".into()));
    }
    let d = spec.districts_per_side as usize;
    let cell = spec.extent as f64 / d as f64;
    let mut rng = stream_rng(seed, STREAM_JITTER);
    let mut verts = vec![vec![(0.0, 0.0); d + 1]; d + 1];
    for (j, row) in verts.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let (mut x, mut y) = (i as f64 * cell, j as f64 * cell);
            if i > 0 && i < d {
                x += rng.gen_range(-spec.jitter..=spec.jitter) * cell;
            }
            if j > 0 && j < d {
                y += rng.gen_range(-spec.jitter..=spec.jitter) * cell;
            }
            *v = (x, y);
        }
    }
    let geo = |(x, y): (f64, f64)| GeoPoint {
        lon: tile_x_to_lon(x0 as f64 + x, spec.zoom),
        lat: tile_y_to_lat(y0 as f64 + y, spec.zoom),
    };
    let mut out = Vec::with_capacity(d * d);
    for j in 0..d {
        for i in 0..d {
            let ring = [verts[j][i], verts[j][i + 1], verts[j + 1][i + 1], verts[j + 1][i], verts[j][i]];
            out.push(DistrictPolygon::simple(format!("d{j:02}{i:02}"), ring.iter().map(|&p| geo(p)).collect())?);
        }
    }
    Ok((out, (x0, y0)))
}

fn vote<R: Rng>(rng: &mut R, truth: usize, accuracy: f64) -> usize {
    if rng.gen_bool(accuracy) {
        truth
    } else {
        let others: Vec<usize> = (0..3).filter(|&c| c != truth).collect();
        others[rng.gen_range(0..others.len())]
    }
}

pub fn synth_world(spec: &SynthWorldSpec, seed: u64) -> Result<SynthWorld> {
    spec.validate()?;
    let (districts, (x0, y0)) = district_polygons(spec, seed)?;
    let selections: Vec<TileSelection> =
        districts.iter().map(|d| select_tiles(d, spec.zoom)).collect::<Result<_>>()?;

    let extent = spec.extent as f64;
    let field = BumpField::random(&mut stream_rng(seed, STREAM_FIELD), spec.bumps, extent, spec.bump_radius, 0.05);
    let mask = BumpField::random(&mut stream_rng(seed, STREAM_MASK), spec.bumps, extent, spec.bump_radius, 0.0);
    let grid_xy = |t: TileId| ((t.x - x0) as f64 + 0.5, (t.y - y0) as f64 + 0.5);

    let mut truth: Vec<TileTruth> = Vec::new();
    let mut mask_vals = Vec::new();
    for sel in &selections {
        for &t in &sel.tiles {
            let (gx, gy) = grid_xy(t);
            truth.push(TileTruth {
                tile: t,
                district_id: sel.district_id.clone(),
                class: RURAL,
                u: field.at(gx, gy).clamp(0.0, 1.0),
            });
            mask_vals.push(mask.at(gx, gy));
        }
    }
    // Each district plants its own share so none is left without inhabited tiles.
    let mut planted = vec![false; truth.len()];
    let mut start = 0;
    for sel in &selections {
        let n = sel.tiles.len();
        let mut order: Vec<usize> = (start..start + n).collect();
        order.sort_by(|&a, &b| mask_vals[a].total_cmp(&mask_vals[b]).then(a.cmp(&b)));
        let k = (spec.uninhabited_fraction * n as f64).round() as usize;
        order.iter().take(k).for_each(|&i| planted[i] = true);
        start += n;
    }
    for (t, &p) in truth.iter_mut().zip(&planted) {
        t.class = class_of(t.u, p);
    }

    let mut mean_u = BTreeMap::new();
    for sel in &selections {
        let tiles: Vec<&TileTruth> = truth.iter().filter(|t| t.district_id == sel.district_id).collect();
        if tiles.is_empty() {
            continue;
        }
        let inhabited: Vec<f64> = tiles.iter().filter(|t| t.class != UNINHABITED).map(|t| t.u).collect();
        let pool: Vec<f64> = if inhabited.is_empty() { tiles.iter().map(|t| t.u).collect() } else { inhabited };
        mean_u.insert(sel.district_id.clone(), pool.iter().sum::<f64>() / pool.len() as f64);
    }

    let signal: Vec<f64> = mean_u.values().map(|m| spec.density_a * m).collect();
    let noise_sd = spec.noise_sd.unwrap_or_else(|| {
        let n = signal.len().max(1) as f64;
        let mean = signal.iter().sum::<f64>() / n;
        let var = signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        (var * (1.0 - spec.achievable_r2) / spec.achievable_r2).sqrt()
    });
    let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut noise_rng = stream_rng(seed, STREAM_NOISE);
    let demographics: Vec<DemographicsRow> = mean_u
        .iter()
        .map(|(id, m)| {
            let eps = if noise_sd > 0.0 { normal.sample(&mut noise_rng) } else { 0.0 };
            let density = (spec.density_a * m + spec.density_b + eps).exp();
            let inhabited =
                truth.iter().filter(|t| &t.district_id == id && t.class != UNINHABITED).count().max(1) as f64;
            DemographicsRow {
                district_id: id.clone(),
                variables: BTreeMap::from([
                    ("density".to_string(), density),
                    ("population".to_string(), density * inhabited),
                ]),
            }
        })
        .collect();

    let n_labeled = (spec.labeled_fraction * truth.len() as f64).round() as usize;
    let mut pick: Vec<usize> = (0..truth.len()).collect();
    pick.shuffle(&mut stream_rng(seed, STREAM_LABELED));
    let mut pick: Vec<usize> = pick.into_iter().take(n_labeled).collect();
    pick.sort_by_key(|&i| truth[i].tile);
    let mut vrng = stream_rng(seed, STREAM_VOTES);
    let votes = pick
        .iter()
        .map(|&i| {
            let t = &truth[i];
            VoteRow {
                tile: t.tile,
                class_votes: (0..spec.class_annotators).map(|_| vote(&mut vrng, t.class, spec.annotator_accuracy)).collect(),
                inhabited_votes: (0..spec.binary_annotators)
                    .map(|_| (t.class != UNINHABITED) == vrng.gen_bool(spec.annotator_accuracy))
                    .collect(),
            }
        })
        .collect();

    Ok(SynthWorld {
        districts,
        selections,
        truth,
        demographics,
        votes,
        mean_u,
        noise_sd,
        seed,
        image_size: spec.image_size,
    })
}

/// Output locations for [`write_world`].
#[derive(Debug, Clone)]
pub struct WorldPaths<'a> {
    pub districts: &'a Path,
    pub images: &'a Path,
    pub labels: &'a Path,
    pub demographics: &'a Path,
    pub truth: &'a Path,
}

fn create_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn create_file(p: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    create_parent(p)?;
    Ok(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?))
}

pub fn write_truth_csv<W: Write>(mut out: W, truth: &[TileTruth]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(out, "district_id,z,x,y,class,u").map_err(io)?;
    for t in truth {
        writeln!(out, "{},{},{},{},{},{:?}", t.district_id, t.tile.z, t.tile.x, t.tile.y, t.class, t.u).map_err(io)?;
    }
    Ok(())
}

pub fn read_truth_csv<R: std::io::BufRead>(input: R) -> Result<Vec<TileTruth>> {
    let perr = |line: usize, m: String| Error::parse("truth", format!("line {line}: {m}"));
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate().skip(1) {
        let line = line.map_err(|e| perr(i + 1, e.to_string()))?;
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 6 {
            return Err(perr(i + 1, format!("{} fields, expected 6", c.len())));
        }
        let n = |s: &str| s.parse::<u32>().map_err(|e| perr(i + 1, e.to_string()));
        out.push(TileTruth {
            district_id: c[0].to_string(),
            tile: TileId::new(n(c[2])?, n(c[3])?, n(c[1])? as u8)?,
            class: n(c[4])? as usize,
            u: c[5].parse().map_err(|e: std::num::ParseFloatError| perr(i + 1, e.to_string()))?,
        });
    }
    Ok(out)
}

/// Writes polygons, one PNG per selected tile, votes, demographics and
/// the planted tile classes.
pub fn write_world(world: &SynthWorld, paths: &WorldPaths<'_>) -> Result<()> {
    create_parent(paths.districts)?;
    std::fs::write(paths.districts, districts_to_geojson(&world.districts))
        .map_err(|e| Error::io(paths.districts, e))?;
    for t in &world.truth {
        let p = tile_image_path(paths.images, &t.district_id, t.tile);
        create_parent(&p)?;
        save_tile_image(&p, &world.render(t))?;
    }
    let mut f = create_file(paths.labels)?;
    write_votes(&mut f, &world.votes)?;
    f.flush().map_err(|e| Error::io(paths.labels, e))?;
    let mut f = create_file(paths.demographics)?;
    write_demographics(&mut f, &world.demographics)?;
    f.flush().map_err(|e| Error::io(paths.demographics, e))?;
    let mut f = create_file(paths.truth)?;
    write_truth_csv(&mut f, &world.truth)?;
    f.flush().map_err(|e| Error::io(paths.truth, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthWorldSpec {
        SynthWorldSpec {
            extent: 24,
            districts_per_side: 4,
            image_size: 8,
            ..SynthWorldSpec::default()
        }
    }

    #[test]
    fn same_seed_same_world() {
        let a = synth_world(&small(), 4).unwrap();
        let b = synth_world(&small(), 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render(&a.truth[5]), b.render(&b.truth[5]));
        assert_ne!(a.truth, synth_world(&small(), 5).unwrap().truth);
    }

    #[test]
    fn districts_partition_most_of_the_block() {
        let w = synth_world(&small(), 1).unwrap();
        assert_eq!(w.districts.len(), 16);
        let mut seen = std::collections::BTreeSet::new();
        for t in &w.truth {
            assert!(seen.insert(t.tile), "tile {} in two districts", t.tile);
        }
        assert!(w.truth.len() as f64 > 0.75 * 24.0 * 24.0, "{}", w.truth.len());
    }

    #[test]
    fn planted_share_and_noise_free_demographics() {
        let spec = SynthWorldSpec {
            uninhabited_fraction: 0.5,
            noise_sd: Some(0.0),
            ..small()
        };
        let w = synth_world(&spec, 2).unwrap();
        let slack = 0.5 * w.selections.len() as f64 / w.truth.len() as f64;
        assert!((w.planted_uninhabited_share() - 0.5).abs() <= slack);
        for sel in w.selections.iter().filter(|s| s.len() >= 2) {
            assert!(w.truth.iter().any(|t| t.district_id == sel.district_id && t.class != UNINHABITED));
        }
        for row in &w.demographics {
            let m = w.mean_u[&row.district_id];
            let want = (spec.density_a * m + spec.density_b).exp();
            assert_eq!(row.variables["density"], want);
        }
        let none = synth_world(&SynthWorldSpec { uninhabited_fraction: 0.0, ..small() }, 2).unwrap();
        assert_eq!(none.planted_uninhabited_share(), 0.0);
    }

    #[test]
    fn roof_cover_tracks_u() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bright = |u: f64, rng: &mut ChaCha8Rng| {
            let px = render_tile(URBAN, u, 32, rng);
            px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64
        };
        assert!(bright(0.9, &mut rng) > bright(0.55, &mut rng));
    }

    #[test]
    fn truth_round_trip() {
        let w = synth_world(&small(), 3).unwrap();
        let mut buf = Vec::new();
        write_truth_csv(&mut buf, &w.truth).unwrap();
        assert_eq!(read_truth_csv(buf.as_slice()).unwrap(), w.truth);
    }
}
