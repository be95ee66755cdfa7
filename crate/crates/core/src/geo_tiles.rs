//! Web-Mercator slippy-tile arithmetic and the three-corner tile selection
//! rule for district polygons.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ZOOM: u8 = 18;
pub const DEFAULT_ZOOM: u8 = 15;
/// Latitude limit of the square Web-Mercator world.
pub const MAX_LAT: f64 = 85.051_128_779_806_6;

/// Slippy-map tile address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub z: u8,
    pub x: u32,
    pub y: u32,
}

impl TileId {
    pub fn new(x: u32, y: u32, z: u8) -> Result<Self> {
        if z > MAX_ZOOM {
            return Err(Error::Range(format!("zoom {z} exceeds {MAX_ZOOM}")));
        }
        let n = 1u32 << z;
        if x >= n || y >= n {
            return Err(Error::Range(format!(
                "tile ({x}, {y}) outside the {n}x{n} grid at zoom {z}"
            )));
        }
        Ok(TileId { z, x, y })
    }

    pub fn grid_size(&self) -> u32 {
        1u32 << self.z
    }

    /// Geographic center of the tile (midpoint in Mercator space).
    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lon: tile_x_to_lon(self.x as f64 + 0.5, self.z),
            lat: tile_y_to_lat(self.y as f64 + 0.5, self.z),
        }
    }

    /// File stem used for tile images: `z_x_y`.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.z, self.x, self.y)
    }
}

impl std::fmt::Display for TileId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.z, self.x, self.y)
    }
}

/// Longitude / latitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lon: f64,
    pub lat: f64,
}

impl GeoPoint {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        let p = GeoPoint { lon, lat };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(Error::Range(format!("longitude {} outside [-180, 180]", self.lon)));
        }
        if !(self.lat.is_finite() && self.lat.abs() < MAX_LAT) {
            return Err(Error::Range(format!(
                "latitude {} outside the Mercator clamp (+/-{MAX_LAT})",
                self.lat
            )));
        }
        Ok(())
    }
}

/// Longitude of the fractional tile column `tx`.
pub fn tile_x_to_lon(tx: f64, z: u8) -> f64 {
    tx / (1u64 << z) as f64 * 360.0 - 180.0
}

/// Latitude of the fractional tile row `ty` (rows grow southwards).
pub fn tile_y_to_lat(ty: f64, z: u8) -> f64 {
    let n = PI * (1.0 - 2.0 * ty / (1u64 << z) as f64);
    n.sinh().atan().to_degrees()
}

/// Fractional tile coordinates of a point; inverse of the two functions above.
pub fn lonlat_to_tile_frac(p: GeoPoint, z: u8) -> (f64, f64) {
    let n = (1u64 << z) as f64;
    let phi = p.lat.to_radians();
    let x = (p.lon + 180.0) / 360.0 * n;
    let y = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / PI) / 2.0 * n;
    (x, y)
}

/// Tile containing `p` at zoom `z`. Points on a tile edge go to the tile on
/// their south / east side; the result is always consistent with
/// [`tile_corners`] evaluated in floating point.
pub fn lonlat_to_tile(p: GeoPoint, z: u8) -> Result<TileId> {
    if z > MAX_ZOOM {
        return Err(Error::Range(format!("zoom {z} exceeds {MAX_ZOOM}")));
    }
    p.validate()?;
    let n = 1i64 << z;
    let (fx, fy) = lonlat_to_tile_frac(p, z);
    let mut x = (fx.floor() as i64).clamp(0, n - 1);
    let mut y = (fy.floor() as i64).clamp(0, n - 1);

    // Snap against the exact edge values so containment holds bit-for-bit.
    while x > 0 && p.lon < tile_x_to_lon(x as f64, z) {
        x -= 1;
    }
    while x + 1 < n && p.lon >= tile_x_to_lon((x + 1) as f64, z) {
        x += 1;
    }
    while y > 0 && p.lat > tile_y_to_lat(y as f64, z) {
        y -= 1;
    }
    while y + 1 < n && p.lat <= tile_y_to_lat((y + 1) as f64, z) {
        y += 1;
    }
    TileId::new(x as u32, y as u32, z)
}

/// Tile corners in the order NW, NE, SE, SW.
pub fn tile_corners(t: TileId) -> [GeoPoint; 4] {
    let west = tile_x_to_lon(t.x as f64, t.z);
    let east = tile_x_to_lon(t.x as f64 + 1.0, t.z);
    let north = tile_y_to_lat(t.y as f64, t.z);
    let south = tile_y_to_lat(t.y as f64 + 1.0, t.z);
    [
        GeoPoint { lon: west, lat: north },
        GeoPoint { lon: east, lat: north },
        GeoPoint { lon: east, lat: south },
        GeoPoint { lon: west, lat: south },
    ]
}

/// One polygon of a (multi-)polygon: an outer shell and optional holes.
/// Rings are closed (first vertex repeated last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonPart {
    pub shell: Vec<GeoPoint>,
    pub holes: Vec<Vec<GeoPoint>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistrictPolygon {
    pub district_id: String,
    pub parts: Vec<PolygonPart>,
}

impl DistrictPolygon {
    /// Single-part polygon without holes.
    pub fn simple(district_id: impl Into<String>, shell: Vec<GeoPoint>) -> Result<Self> {
        let poly = DistrictPolygon {
            district_id: district_id.into(),
            parts: vec![PolygonPart {
                shell,
                holes: Vec::new(),
            }],
        };
        poly.validate()?;
        Ok(poly)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() {
            return Err(Error::Data(format!("district {} has no polygon parts", self.district_id)));
        }
        for (pi, part) in self.parts.iter().enumerate() {
            check_ring(&part.shell).map_err(|m| {
                Error::Data(format!("district {} part {pi} shell: {m}", self.district_id))
            })?;
            if let Some((a, b)) = first_self_intersection(&part.shell) {
                return Err(Error::Data(format!(
                    "district {} part {pi} shell self-intersects (edges {a} and {b})",
                    self.district_id
                )));
            }
            for (hi, hole) in part.holes.iter().enumerate() {
                check_ring(hole).map_err(|m| {
                    Error::Data(format!("district {} part {pi} hole {hi}: {m}", self.district_id))
                })?;
            }
        }
        Ok(())
    }

    /// (min_lon, min_lat, max_lon, max_lat) over all shells.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.parts.iter().flat_map(|part| part.shell.iter()) {
            b.0 = b.0.min(p.lon);
            b.1 = b.1.min(p.lat);
            b.2 = b.2.max(p.lon);
            b.3 = b.3.max(p.lat);
        }
        b
    }
}

fn check_ring(ring: &[GeoPoint]) -> std::result::Result<(), String> {
    if ring.len() < 4 {
        return Err(format!("ring has {} vertices, need at least 4", ring.len()));
    }
    if ring.first() != ring.last() {
        return Err("ring is not closed (first vertex != last vertex)".into());
    }
    if ring.iter().any(|p| !p.lon.is_finite() || !p.lat.is_finite()) {
        return Err("ring has non-finite coordinates".into());
    }
    Ok(())
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Indices of the first pair of non-adjacent edges that touch, if any.
fn first_self_intersection(ring: &[GeoPoint]) -> Option<(usize, usize)> {
    let m = ring.len() - 1;
    for i in 0..m {
        for j in (i + 1)..m {
            let adjacent = j == i + 1 || (i == 0 && j == m - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Edge endpoints in a canonical order, so every test below gives the same
/// answer whatever the ring orientation.
fn canonical(a: GeoPoint, b: GeoPoint) -> (GeoPoint, GeoPoint) {
    if (a.lat, a.lon) <= (b.lat, b.lon) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Even-odd test for a single closed ring. `None` means the point lies on
/// the ring boundary.
fn ring_crossings(ring: &[GeoPoint], p: GeoPoint) -> Option<bool> {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = canonical(w[0], w[1]);
        if on_segment(a, b, p) && orient(a, b, p) == 0.0 {
            return None;
        }
        // a.lat <= b.lat after canonicalisation: half-open rule on latitude.
        if a.lat <= p.lat && p.lat < b.lat {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    Some(inside)
}

fn inside_part(part: &PolygonPart, p: GeoPoint) -> bool {
    match ring_crossings(&part.shell, p) {
        None => return true,
        Some(false) => return false,
        Some(true) => {}
    }
    for hole in &part.holes {
        match ring_crossings(hole, p) {
            // on a hole boundary: still on the polygon's boundary
            None => return true,
            Some(true) => return false,
            Some(false) => {}
        }
    }
    true
}

/// Edge-inclusive even-odd point-in-polygon test over all parts.
pub fn point_in_polygon(p: GeoPoint, poly: &DistrictPolygon) -> bool {
    poly.parts.iter().any(|part| inside_part(part, p))
}

/// Tiles belonging to one district at one zoom level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSelection {
    pub district_id: String,
    pub zoom: u8,
    pub tiles: BTreeSet<TileId>,
    pub vertex_hits: BTreeMap<TileId, u8>,
}

impl TileSelection {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Minimum number of tile corners inside the polygon for a tile to belong to it.
pub const MIN_CORNER_HITS: u8 = 3;

/// Inclusive tile range `(x0, y0, x1, y1)` covering the polygon bounding
/// box, widened by one tile on each side and clamped to the grid.
pub fn candidate_range(poly: &DistrictPolygon, z: u8) -> (u32, u32, u32, u32) {
    let n = (1i64 << z) as f64;
    let (min_lon, min_lat, max_lon, max_lat) = poly.bbox();
    let clamp_lat = |lat: f64| lat.clamp(-MAX_LAT + 1e-9, MAX_LAT - 1e-9);
    let (fx0, fy0) = lonlat_to_tile_frac(GeoPoint { lon: min_lon, lat: clamp_lat(max_lat) }, z);
    let (fx1, fy1) = lonlat_to_tile_frac(GeoPoint { lon: max_lon, lat: clamp_lat(min_lat) }, z);
    let lo = |f: f64| ((f.floor() - 1.0).max(0.0)) as u32;
    let hi = |f: f64| ((f.floor() + 1.0).min(n - 1.0).max(0.0)) as u32;
    (lo(fx0), lo(fy0), hi(fx1), hi(fy1))
}

/// Select every tile with at least three of its four corners inside `poly`.
///
/// Corners shared by neighbouring tiles are evaluated once. An empty result
/// is allowed (the polygon may be smaller than a tile) and only logged.
pub fn select_tiles(poly: &DistrictPolygon, z: u8) -> Result<TileSelection> {
    if z > MAX_ZOOM {
        return Err(Error::Range(format!("zoom {z} exceeds {MAX_ZOOM}")));
    }
    let (x0, y0, x1, y1) = candidate_range(poly, z);
    let w = (x1 - x0 + 2) as usize;
    let h = (y1 - y0 + 2) as usize;
    let lons: Vec<f64> = (0..w).map(|i| tile_x_to_lon((x0 as usize + i) as f64, z)).collect();
    let lats: Vec<f64> = (0..h).map(|j| tile_y_to_lat((y0 as usize + j) as f64, z)).collect();
    let mut corner_inside = vec![false; w * h];
    for (j, &lat) in lats.iter().enumerate() {
        for (i, &lon) in lons.iter().enumerate() {
            corner_inside[j * w + i] = point_in_polygon(GeoPoint { lon, lat }, poly);
        }
    }

    let mut tiles = BTreeSet::new();
    let mut vertex_hits = BTreeMap::new();
    for j in 0..h - 1 {
        for i in 0..w - 1 {
            let hits = [
                corner_inside[j * w + i],
                corner_inside[j * w + i + 1],
                corner_inside[(j + 1) * w + i + 1],
                corner_inside[(j + 1) * w + i],
            ]
            .iter()
            .filter(|&&b| b)
            .count() as u8;
            if hits >= MIN_CORNER_HITS {
                let t = TileId {
                    z,
                    x: x0 + i as u32,
                    y: y0 + j as u32,
                };
                tiles.insert(t);
                vertex_hits.insert(t, hits);
            }
        }
    }
    if tiles.is_empty() {
        log::warn!("district {} selects no tiles at zoom {z}", poly.district_id);
    }
    Ok(TileSelection {
        district_id: poly.district_id.clone(),
        zoom: z,
        tiles,
        vertex_hits,
    })
}

/// Writes selections as `district_id,z,x,y,vertex_hits`.
pub fn write_selection_csv<W: std::io::Write>(out: W, selections: &[TileSelection]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["district_id", "z", "x", "y", "vertex_hits"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for sel in selections {
        for t in &sel.tiles {
            wtr.write_record([
                sel.district_id.clone(),
                t.z.to_string(),
                t.x.to_string(),
                t.y.to_string(),
                sel.vertex_hits[t].to_string(),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    wtr.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Reads the CSV written by [`write_selection_csv`]; districts keep their
/// first-appearance order.
pub fn read_selection_csv<R: std::io::Read>(input: R) -> Result<Vec<TileSelection>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out: Vec<TileSelection> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse("tile selection", e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| Error::parse("tile selection", format!("row {row}: bad {what}"));
        let id = field(0).to_string();
        let z: u8 = field(1).parse().map_err(|_| bad("z"))?;
        let x: u32 = field(2).parse().map_err(|_| bad("x"))?;
        let y: u32 = field(3).parse().map_err(|_| bad("y"))?;
        let hits: u8 = field(4).parse().map_err(|_| bad("vertex_hits"))?;
        let t = TileId::new(x, y, z)?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            out.push(TileSelection {
                district_id: id.clone(),
                zoom: z,
                tiles: BTreeSet::new(),
                vertex_hits: BTreeMap::new(),
            });
            out.len() - 1
        });
        out[slot].tiles.insert(t);
        out[slot].vertex_hits.insert(t, hits);
    }
    Ok(out)
}
