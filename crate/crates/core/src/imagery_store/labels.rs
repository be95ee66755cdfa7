//! Annotator votes averaged into soft labels.
//!
//! Label files are CSV with header `z,x,y,class_votes[,inhabited_votes]`.
//! Votes within a cell are `;`-separated: class tokens are `urban`, `rural`
//! and `uninhabited`; binary tokens are `inhabited` / `uninhabited` (or
//! `1` / `0`). Without the binary column the binary votes are derived from
//! the class votes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo_tiles::TileId;

pub const CLASS_NAMES: [&str; 3] = ["urban", "rural", "uninhabited"];
pub const URBAN: usize = 0;
pub const RURAL: usize = 1;
pub const UNINHABITED: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub tile: TileId,
    /// (urban, rural, uninhabited) vote shares.
    pub probs: [f64; 3],
    pub inhabited_majority: bool,
}

impl SoftLabel {
    /// Class with the largest vote share; ties go to the lower index.
    pub fn majority_class(&self) -> usize {
        let mut best = 0;
        for c in 1..3 {
            if self.probs[c] > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

pub fn parse_class(token: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|c| *c == token)
        .ok_or_else(|| Error::parse("labels", format!("unknown class token `{token}`")))
}

fn parse_binary(token: &str) -> Result<bool> {
    match token {
        "inhabited" | "1" => Ok(true),
        "uninhabited" | "0" => Ok(false),
        other => Err(Error::parse("labels", format!("unknown inhabited token `{other}`"))),
    }
}

fn split_votes(cell: &str) -> impl Iterator<Item = &str> {
    cell.split(';').map(str::trim).filter(|t| !t.is_empty())
}

/// Builds one soft label from raw votes. Binary ties count as inhabited.
pub fn soft_label(tile: TileId, class_votes: &[usize], inhabited_votes: &[bool]) -> Result<SoftLabel> {
    if class_votes.is_empty() {
        return Err(Error::Data(format!("tile {tile} has no class votes")));
    }
    let mut probs = [0.0; 3];
    for &c in class_votes {
        if c >= 3 {
            return Err(Error::Range(format!("class index {c} for tile {tile}")));
        }
        probs[c] += 1.0;
    }
    let n = class_votes.len() as f64;
    probs.iter_mut().for_each(|p| *p /= n);
    let derived: Vec<bool>;
    let votes = if inhabited_votes.is_empty() {
        derived = class_votes.iter().map(|&c| c != UNINHABITED).collect();
        &derived
    } else {
        inhabited_votes
    };
    let yes = votes.iter().filter(|&&v| v).count();
    Ok(SoftLabel {
        tile,
        probs,
        inhabited_majority: 2 * yes >= votes.len(),
    })
}

pub fn read_labels<R: Read>(input: R) -> Result<Vec<SoftLabel>> {
    let perr = |m: String| Error::parse("labels", m);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| perr(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (cz, cx, cy) = match (col("z"), col("x"), col("y")) {
        (Some(z), Some(x), Some(y)) => (z, x, y),
        _ => return Err(perr("header must contain z,x,y".into())),
    };
    let cv = col("class_votes").ok_or_else(|| perr("header must contain class_votes".into()))?;
    let cb = col("inhabited_votes");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let line = i + 2;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<u32> { field(c).parse().map_err(|e| perr(format!("row {line}: {e}"))) };
        let z = num(cz)?;
        let tile = TileId::new(num(cx)?, num(cy)?, u8::try_from(z).map_err(|e| perr(e.to_string()))?)?;
        let class_votes = split_votes(field(cv))
            .map(parse_class)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| perr(format!("row {line}: {e}")))?;
        let binary = match cb {
            Some(c) => split_votes(field(c)).map(parse_binary).collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        out.push(soft_label(tile, &class_votes, &binary).map_err(|e| perr(format!("row {line}: {e}")))?);
    }
    Ok(out)
}

pub fn load_labels(path: &std::path::Path) -> Result<Vec<SoftLabel>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(std::io::BufReader::new(f))
}

/// Raw votes for one tile, as written by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteRow {
    pub tile: TileId,
    pub class_votes: Vec<usize>,
    pub inhabited_votes: Vec<bool>,
}

pub fn write_votes<W: Write>(out: W, rows: &[VoteRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ferr = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["z", "x", "y", "class_votes", "inhabited_votes"]).map_err(ferr)?;
    for r in rows {
        let classes: Vec<&str> = r.class_votes.iter().map(|&c| CLASS_NAMES[c]).collect();
        let binary: Vec<&str> = r.inhabited_votes.iter().map(|&b| if b { "inhabited" } else { "uninhabited" }).collect();
        w.write_record([
            r.tile.z.to_string(),
            r.tile.x.to_string(),
            r.tile.y.to_string(),
            classes.join(";"),
            binary.join(";"),
        ])
        .map_err(ferr)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tile() -> TileId {
        TileId::new(1, 2, 3).unwrap()
    }

    #[test]
    fn vote_averaging() {
        let l = soft_label(tile(), &[URBAN, URBAN, RURAL, URBAN], &[]).unwrap();
        assert_eq!(l.probs, [0.75, 0.25, 0.0]);
        let l = soft_label(tile(), &[UNINHABITED; 4], &[false, false, false]).unwrap();
        assert_eq!(l.probs, [0.0, 0.0, 1.0]);
        assert!(!l.inhabited_majority);
        let l = soft_label(tile(), &[URBAN], &[true, true, false, false]).unwrap();
        assert!(l.inhabited_majority);
    }

    #[test]
    fn parse_file() {
        let text = "z,x,y,class_votes,inhabited_votes\n3,1,2,urban;urban;rural;urban,inhabited;uninhabited;inhabited\n3,0,0,uninhabited,\n";
        let l = read_labels(text.as_bytes()).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l[0].probs, [0.75, 0.25, 0.0]);
        assert!(l[0].inhabited_majority);
        assert!(!l[1].inhabited_majority);
    }

    #[test]
    fn unknown_token_is_parse_error() {
        let text = "z,x,y,class_votes\n3,1,2,urban;forest\n";
        let err = read_labels(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("forest"));
    }

    #[test]
    fn votes_round_trip() {
        let rows = vec![VoteRow {
            tile: tile(),
            class_votes: vec![URBAN, RURAL, RURAL, RURAL],
            inhabited_votes: vec![true, true, false],
        }];
        let mut buf = Vec::new();
        write_votes(&mut buf, &rows).unwrap();
        let l = read_labels(buf.as_slice()).unwrap();
        assert_eq!(l[0].probs, [0.25, 0.75, 0.0]);
        assert!(l[0].inhabited_majority);
    }
}
