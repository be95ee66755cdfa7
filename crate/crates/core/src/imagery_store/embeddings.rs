//! Per-tile embedding stores: CSV (`z,x,y,district_id,e0..`) and a packed
//! little-endian binary variant starting with `READEMB1`.

use std::collections::BTreeSet;
use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::ByteReader;
use crate::error::{Error, Result};
use crate::geo_tiles::{DistrictPolygon, TileId};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"READEMB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub tile: TileId,
    pub district_id: String,
    pub vector: Vec<f32>,
}

fn common_dim(records: &[EmbeddingRecord]) -> Result<usize> {
    let e = records.first().map(|r| r.vector.len()).unwrap_or(0);
    if let Some(r) = records.iter().find(|r| r.vector.len() != e) {
        return Err(Error::Shape(format!(
            "embedding for tile {} has {} values, store has {e}",
            r.tile,
            r.vector.len()
        )));
    }
    Ok(e)
}

pub fn write_embeddings_csv<W: Write>(mut out: W, records: &[EmbeddingRecord], lineage: Option<&str>) -> Result<()> {
    let e = common_dim(records)?;
    let io = |e: std::io::Error| Error::Format(e.to_string());
    if let Some(l) = lineage {
        writeln!(out, "# lineage={l}").map_err(io)?;
    }
    write!(out, "z,x,y,district_id").map_err(io)?;
    for i in 0..e {
        write!(out, ",e{i}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for r in records {
        if r.district_id.contains([',', '\n', '"']) {
            return Err(Error::Format(format!("district id {:?} cannot be stored in CSV", r.district_id)));
        }
        write!(out, "{},{},{},{}", r.tile.z, r.tile.x, r.tile.y, r.district_id).map_err(io)?;
        for v in &r.vector {
            write!(out, ",{v:?}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    Ok(())
}

pub fn read_embeddings_csv<R: BufRead>(input: R) -> Result<Vec<EmbeddingRecord>> {
    let ferr = |line: usize, m: String| Error::Format(format!("embeddings line {line}: {m}"));
    let mut dim = None;
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| ferr(line_no, e.to_string()))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let Some(e) = dim else {
            if cells.len() < 4 || cells[..4] != ["z", "x", "y", "district_id"] {
                return Err(ferr(line_no, "header must start with z,x,y,district_id".into()));
            }
            dim = Some(cells.len() - 4);
            continue;
        };
        if cells.len() != 4 + e {
            return Err(ferr(line_no, format!("{} values, header declares E={e}", cells.len().saturating_sub(4))));
        }
        let num = |s: &str| s.parse::<u32>().map_err(|err| ferr(line_no, err.to_string()));
        let z = u8::try_from(num(cells[0])?).map_err(|err| ferr(line_no, err.to_string()))?;
        let tile = TileId::new(num(cells[1])?, num(cells[2])?, z)?;
        let vector = cells[4..]
            .iter()
            .map(|s| s.parse::<f32>().map_err(|err| ferr(line_no, err.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            tile,
            district_id: cells[3].to_string(),
            vector,
        });
    }
    Ok(out)
}

pub fn write_embeddings_bin<W: Write>(mut out: W, records: &[EmbeddingRecord]) -> Result<()> {
    let e = common_dim(records)?;
    let mut buf = EMBEDDING_MAGIC.to_vec();
    buf.extend_from_slice(&(e as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        buf.push(r.tile.z);
        buf.extend_from_slice(&r.tile.x.to_le_bytes());
        buf.extend_from_slice(&r.tile.y.to_le_bytes());
        let id = r.district_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| Error::Format("district id longer than 65535 bytes".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id);
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_embeddings_bin<R: Read>(mut input: R) -> Result<Vec<EmbeddingRecord>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    let mut r = ByteReader::new(&buf, "embedding store");
    r.expect_magic(EMBEDDING_MAGIC)?;
    let e = r.usize32()?;
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let z = r.u8()?;
        let x = r.u32()?;
        let y = r.u32()?;
        let len = r.u16()? as usize;
        let district_id = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
        let vector = (0..e).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            tile: TileId::new(x, y, z)?,
            district_id,
            vector,
        });
    }
    r.finish()?;
    Ok(out)
}

/// Reads either store format, chosen by the leading magic bytes.
pub fn load_embeddings(path: &std::path::Path) -> Result<Vec<EmbeddingRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMBEDDING_MAGIC) {
        read_embeddings_bin(bytes.as_slice())
    } else {
        read_embeddings_csv(bytes.as_slice())
    }
}

/// Rejects records whose district is not among `districts`.
pub fn check_references(records: &[EmbeddingRecord], districts: &[DistrictPolygon]) -> Result<()> {
    let known: BTreeSet<&str> = districts.iter().map(|d| d.district_id.as_str()).collect();
    match records.iter().find(|r| !known.contains(r.district_id.as_str())) {
        Some(r) => Err(Error::Data(format!(
            "embedding for tile {} references unknown district {}",
            r.tile, r.district_id
        ))),
        None => Ok(()),
    }
}
