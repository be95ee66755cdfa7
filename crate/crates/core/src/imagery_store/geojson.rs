//! District polygons as a GeoJSON FeatureCollection of Polygon /
//! MultiPolygon features carrying a `district_id` property.

use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geo_tiles::{DistrictPolygon, GeoPoint, PolygonPart};

fn feature_err(index: usize, msg: impl std::fmt::Display) -> Error {
    Error::parse("districts GeoJSON", format!("feature {index}: {msg}"))
}

fn parse_ring(v: &Value, index: usize) -> Result<Vec<GeoPoint>> {
    let pts = v.as_array().ok_or_else(|| feature_err(index, "ring is not an array"))?;
    pts.iter()
        .map(|p| {
            let c = p.as_array().filter(|c| c.len() >= 2).ok_or_else(|| feature_err(index, "position needs [lon, lat]"))?;
            let lon = c[0].as_f64().ok_or_else(|| feature_err(index, "non-numeric longitude"))?;
            let lat = c[1].as_f64().ok_or_else(|| feature_err(index, "non-numeric latitude"))?;
            GeoPoint::new(lon, lat).map_err(|e| feature_err(index, e))
        })
        .collect()
}

fn parse_polygon(v: &Value, index: usize) -> Result<PolygonPart> {
    let rings = v.as_array().ok_or_else(|| feature_err(index, "polygon is not an array of rings"))?;
    let mut rings = rings.iter().map(|r| parse_ring(r, index));
    let shell = rings.next().ok_or_else(|| feature_err(index, "polygon has no rings"))??;
    let holes = rings.collect::<Result<_>>()?;
    Ok(PolygonPart { shell, holes })
}

/// Parses a FeatureCollection; every polygon is validated.
pub fn parse_districts(text: &str) -> Result<Vec<DistrictPolygon>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::parse("districts GeoJSON", e.to_string()))?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse("districts GeoJSON", "expected a FeatureCollection with `features`"))?;
    let mut out = Vec::with_capacity(features.len());
    for (index, f) in features.iter().enumerate() {
        let id = match f.get("properties").and_then(|p| p.get("district_id")) {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(feature_err(index, "missing `district_id` property")),
        };
        let geom = f.get("geometry").ok_or_else(|| feature_err(index, "missing geometry"))?;
        let coords = geom.get("coordinates").ok_or_else(|| feature_err(index, "geometry has no coordinates"))?;
        let parts = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords, index)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| feature_err(index, "MultiPolygon coordinates are not an array"))?
                .iter()
                .map(|p| parse_polygon(p, index))
                .collect::<Result<_>>()?,
            other => return Err(feature_err(index, format!("unsupported geometry type {other:?}"))),
        };
        let poly = DistrictPolygon { district_id: id, parts };
        poly.validate().map_err(|e| feature_err(index, e))?;
        out.push(poly);
    }
    Ok(out)
}

pub fn load_districts(path: &Path) -> Result<Vec<DistrictPolygon>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_districts(&text)
}

fn ring_json(ring: &[GeoPoint]) -> Value {
    Value::Array(ring.iter().map(|p| json!([p.lon, p.lat])).collect())
}

/// Serializes districts as a FeatureCollection (Polygon for single-part
/// districts, MultiPolygon otherwise).
pub fn districts_to_geojson(districts: &[DistrictPolygon]) -> String {
    let features: Vec<Value> = districts
        .iter()
        .map(|d| {
            let polys: Vec<Value> = d
                .parts
                .iter()
                .map(|p| {
                    let mut rings = vec![ring_json(&p.shell)];
                    rings.extend(p.holes.iter().map(|h| ring_json(h)));
                    Value::Array(rings)
                })
                .collect();
            let geometry = if polys.len() == 1 {
                json!({"type": "Polygon", "coordinates": polys[0]})
            } else {
                json!({"type": "MultiPolygon", "coordinates": polys})
            };
            json!({"type": "Feature", "properties": {"district_id": d.district_id}, "geometry": geometry})
        })
        .collect();
    let doc = json!({"type": "FeatureCollection", "features": features});
    serde_json::to_string_pretty(&doc).expect("GeoJSON values serialize")
}
