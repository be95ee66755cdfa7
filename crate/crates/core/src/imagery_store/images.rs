//! Tile rasters: PNG codec, [0, 1] tile images and per-channel
//! standardization statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_tiles::TileId;

/// Decoded 8-bit raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRaster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

/// H×W×3 intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TileImage {
    pub tile: TileId,
    pub pixels: Array3<f32>,
}

impl TileImage {
    pub fn from_raster(tile: TileId, raw: &RawRaster) -> Result<TileImage> {
        if raw.channels != 3 {
            return Err(Error::Format(format!("tile {tile}: expected 3 channels, got {}", raw.channels)));
        }
        if raw.width != raw.height || raw.width == 0 {
            return Err(Error::Format(format!("tile {tile}: raster {}x{} is not square", raw.width, raw.height)));
        }
        if raw.data.len() != raw.width * raw.height * 3 {
            return Err(Error::Format(format!("tile {tile}: raster buffer has wrong length")));
        }
        let pixels = Array3::from_shape_vec((raw.height, raw.width, 3), raw.data.iter().map(|&b| b as f32 / 255.0).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(TileImage { tile, pixels })
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    /// Quantizes back to 8 bits.
    pub fn to_raster(&self) -> RawRaster {
        let (h, w, _) = self.pixels.dim();
        RawRaster {
            width: w,
            height: h,
            channels: 3,
            data: self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }
}

pub fn decode_png(bytes: &[u8]) -> Result<RawRaster> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png: image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    Ok(RawRaster {
        width: info.width as usize,
        height: info.height as usize,
        channels: info.color_type.samples(),
        data: buf,
    })
}

pub fn encode_png(raw: &RawRaster) -> Result<Vec<u8>> {
    let color = match raw.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Format(format!("cannot encode {c}-channel raster"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raw.width as u32, raw.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
        w.write_image_data(&raw.data).map_err(|e| Error::Format(format!("png: {e}")))?;
    }
    Ok(out)
}

pub fn load_tile_image(path: &Path, tile: TileId) -> Result<TileImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TileImage::from_raster(tile, &decode_png(&bytes)?)
}

pub fn save_tile_image(path: &Path, img: &TileImage) -> Result<()> {
    let bytes = encode_png(&img.to_raster())?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Per-channel mean and (population) deviation of [0, 1] intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn compute<'a>(images: impl IntoIterator<Item = &'a TileImage>) -> Result<NormStats> {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        let images: Vec<&TileImage> = images.into_iter().collect();
        for img in &images {
            for ((_, _, c), &v) in img.pixels.indexed_iter() {
                sum[c] += v as f64;
            }
            count += img.pixels.len() / 3;
        }
        if count == 0 {
            return Err(Error::Data("no images to compute normalization statistics".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        let mut sq = [0.0f64; 3];
        for img in &images {
            for ((_, _, c), &v) in img.pixels.indexed_iter() {
                sq[c] += (v as f64 - mean[c]).powi(2);
            }
        }
        let std = sq.map(|s| {
            let sd = (s / count as f64).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        });
        Ok(NormStats { mean, std })
    }

    /// Channel-first (3×H×W) standardized network input.
    pub fn standardize(&self, img: &TileImage) -> Array3<f64> {
        standardize_view(self, img.pixels.view())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plain struct serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<NormStats> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

fn standardize_view(stats: &NormStats, px: ArrayView3<f32>) -> Array3<f64> {
    let (h, w, _) = px.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| (px[[y, x, c]] as f64 - stats.mean[c]) / stats.std[c])
}

/// 8-bit RGB raster → standardized channel-first tensor.
pub fn normalize_image(raw: &RawRaster, stats: &NormStats) -> Result<Array3<f64>> {
    let tile = TileId { z: 0, x: 0, y: 0 };
    Ok(stats.standardize(&TileImage::from_raster(tile, raw)?))
}

/// PNG files named `z_x_y.png` under per-district directories.
#[derive(Debug, Clone, Default)]
pub struct ImageIndex {
    /// First path found for each tile, in sorted directory order.
    pub paths: BTreeMap<TileId, PathBuf>,
}

pub fn parse_stem(stem: &str) -> Option<TileId> {
    let mut it = stem.split('_');
    let z = it.next()?.parse().ok()?;
    let x = it.next()?.parse().ok()?;
    let y = it.next()?.parse().ok()?;
    if it.next().is_some() {
        return None;
    }
    TileId::new(x, y, z).ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

impl ImageIndex {
    pub fn scan(root: &Path) -> Result<ImageIndex> {
        let mut paths = BTreeMap::new();
        for dir in sorted_entries(root)? {
            if !dir.is_dir() {
                continue;
            }
            for file in sorted_entries(&dir)? {
                if file.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                if let Some(tile) = file.file_stem().and_then(|s| s.to_str()).and_then(parse_stem) {
                    paths.entry(tile).or_insert(file);
                }
            }
        }
        Ok(ImageIndex { paths })
    }

    pub fn load(&self, tile: TileId) -> Result<TileImage> {
        let path = self
            .paths
            .get(&tile)
            .ok_or_else(|| Error::Data(format!("no image for tile {tile}")))?;
        load_tile_image(path, tile)
    }
}

pub fn tile_image_path(root: &Path, district_id: &str, tile: TileId) -> PathBuf {
    root.join(district_id).join(format!("{}.png", tile.stem()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(fill: u8) -> RawRaster {
        RawRaster {
            width: 4,
            height: 4,
            channels: 3,
            data: vec![fill; 48],
        }
    }

    #[test]
    fn extreme_rasters_normalize_by_formula() {
        let stats = NormStats {
            mean: [0.2, 0.4, 0.6],
            std: [0.5, 0.25, 2.0],
        };
        let z = normalize_image(&raster(0), &stats).unwrap();
        let o = normalize_image(&raster(255), &stats).unwrap();
        for c in 0..3 {
            assert!(z.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == (0.0 - stats.mean[c]) / stats.std[c]));
            assert!(o.index_axis(ndarray::Axis(0), c).iter().all(|&v| v == (1.0 - stats.mean[c]) / stats.std[c]));
        }
    }

    #[test]
    fn wrong_channel_count() {
        let mut r = raster(3);
        r.channels = 4;
        r.data = vec![0; 64];
        assert!(matches!(normalize_image(&r, &NormStats::IDENTITY), Err(Error::Format(_))));
    }

    #[test]
    fn png_round_trip() {
        let mut r = raster(0);
        r.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i * 5) as u8);
        let back = decode_png(&encode_png(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn stats_of_two_images() {
        let t = TileId { z: 1, x: 0, y: 0 };
        let a = TileImage::from_raster(t, &raster(0)).unwrap();
        let b = TileImage::from_raster(t, &raster(255)).unwrap();
        let s = NormStats::compute([&a, &b]).unwrap();
        assert_eq!(s.mean, [0.5; 3]);
        assert_eq!(s.std, [0.5; 3]);
    }

    #[test]
    fn stems() {
        assert_eq!(parse_stem("15_27934_12684"), Some(TileId { z: 15, x: 27934, y: 12684 }));
        assert_eq!(parse_stem("15_1"), None);
        assert_eq!(parse_stem("2_9_0"), None);
    }
}
