//! Per-tile probability rasters over a district's tile bounding box.

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::geo_tiles::{TileId, TileSelection};

/// Grey level used for cells outside the selection.
pub const NO_DATA: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub district_id: String,
    pub zoom: u8,
    pub x_min: u32,
    pub y_min: u32,
    pub width: usize,
    pub height: usize,
    /// Row-major (north to south); `None` outside the selection.
    pub values: Vec<Option<f64>>,
}

impl HeatmapGrid {
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        self.values[row * self.width + col]
    }

    pub fn tile_at(&self, col: usize, row: usize) -> TileId {
        TileId {
            z: self.zoom,
            x: self.x_min + col as u32,
            y: self.y_min + row as u32,
        }
    }

    /// Data-cell levels: `1 + round(254·p)`, so 0 stays reserved for no-data.
    pub fn write_pgm<W: Write>(&self, mut out: W, lineage: Option<&str>) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(out, "P2").map_err(io)?;
        if let Some(l) = lineage {
            writeln!(out, "# lineage={l}").map_err(io)?;
        }
        writeln!(out, "{} {}\n255", self.width, self.height).map_err(io)?;
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row
                .iter()
                .map(|v| match v {
                    Some(p) => (1 + (p.clamp(0.0, 1.0) * 254.0).round() as u8).to_string(),
                    None => NO_DATA.to_string(),
                })
                .collect();
            writeln!(out, "{}", line.join(" ")).map_err(io)?;
        }
        Ok(())
    }

    /// `z,x,y,p_urban` for every cell; the probability is empty for no-data.
    pub fn write_csv<W: Write>(&self, mut out: W, lineage: Option<&str>) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        if let Some(l) = lineage {
            writeln!(out, "# lineage={l}").map_err(io)?;
        }
        writeln!(out, "z,x,y,p_urban").map_err(io)?;
        for row in 0..self.height {
            for col in 0..self.width {
                let t = self.tile_at(col, row);
                match self.get(col, row) {
                    Some(p) => writeln!(out, "{},{},{},{p:.6}", t.z, t.x, t.y),
                    None => writeln!(out, "{},{},{},", t.z, t.x, t.y),
                }
                .map_err(io)?;
            }
        }
        Ok(())
    }
}

/// Lays `p` (per selected tile) over the selection's tile bounding box.
pub fn heatmap_grid(selection: &TileSelection, p: &BTreeMap<TileId, f64>) -> Result<HeatmapGrid> {
    let (first, rest) = match selection.tiles.iter().next() {
        Some(t) => (t, &selection.tiles),
        None => return Err(Error::Data(format!("district {} has no selected tiles", selection.district_id))),
    };
    let (mut x0, mut x1, mut y0, mut y1) = (first.x, first.x, first.y, first.y);
    for t in rest {
        x0 = x0.min(t.x);
        x1 = x1.max(t.x);
        y0 = y0.min(t.y);
        y1 = y1.max(t.y);
    }
    let (width, height) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let mut values = vec![None; width * height];
    for t in &selection.tiles {
        let v = *p.get(t).ok_or_else(|| Error::Data(format!("no probability for tile {t}")))?;
        values[(t.y - y0) as usize * width + (t.x - x0) as usize] = Some(v);
    }
    Ok(HeatmapGrid {
        district_id: selection.district_id.clone(),
        zoom: selection.zoom,
        x_min: x0,
        y_min: y0,
        width,
        height,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn l_shape() -> TileSelection {
        let tiles: BTreeSet<TileId> =
            [(10, 20), (10, 21), (10, 22), (11, 22), (12, 22)].iter().map(|&(x, y)| TileId::new(x, y, 8).unwrap()).collect();
        TileSelection {
            district_id: "L".into(),
            zoom: 8,
            vertex_hits: tiles.iter().map(|t| (*t, 4)).collect(),
            tiles,
        }
    }

    #[test]
    fn no_data_is_bbox_minus_selection() {
        let sel = l_shape();
        let p = sel.tiles.iter().map(|t| (*t, 0.5)).collect();
        let g = heatmap_grid(&sel, &p).unwrap();
        assert_eq!((g.width, g.height), (3, 3));
        for row in 0..3 {
            for col in 0..3 {
                let inside = sel.tiles.contains(&g.tile_at(col, row));
                assert_eq!(g.get(col, row).is_some(), inside);
            }
        }
        let mut pgm = Vec::new();
        g.write_pgm(&mut pgm, None).unwrap();
        assert_eq!(String::from_utf8(pgm).unwrap(), "P2\n3 3\n255\n128 0 0\n128 0 0\n128 128 128\n");
    }

    #[test]
    fn missing_probability_is_data_error() {
        let sel = l_shape();
        assert!(matches!(heatmap_grid(&sel, &BTreeMap::new()), Err(Error::Data(_))));
    }
}
