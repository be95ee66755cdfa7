//! District demographics: CSV with `district_id` first and one column per
//! variable.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicsRow {
    pub district_id: String,
    pub variables: BTreeMap<String, f64>,
}

/// Empty cells are treated as missing values.
pub fn read_demographics<R: Read>(input: R) -> Result<Vec<DemographicsRow>> {
    let perr = |m: String| Error::parse("demographics", m);
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| perr(e.to_string()))?.clone();
    if headers.get(0) != Some("district_id") {
        return Err(perr("first column must be district_id".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        let mut variables = BTreeMap::new();
        for (name, cell) in names.iter().zip(rec.iter().skip(1)) {
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell.parse().map_err(|e| perr(format!("row {} column {name}: {e}", i + 2)))?;
            variables.insert(name.clone(), v);
        }
        out.push(DemographicsRow {
            district_id: rec.get(0).unwrap_or("").to_string(),
            variables,
        });
    }
    Ok(out)
}

pub fn load_demographics(path: &std::path::Path) -> Result<Vec<DemographicsRow>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_demographics(std::io::BufReader::new(f))
}

/// Columns are the union of variable names, sorted.
pub fn write_demographics<W: Write>(out: W, rows: &[DemographicsRow]) -> Result<()> {
    let names: std::collections::BTreeSet<&String> = rows.iter().flat_map(|r| r.variables.keys()).collect();
    let mut w = csv::Writer::from_writer(out);
    let ferr = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["district_id".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    w.write_record(&header).map_err(ferr)?;
    for r in rows {
        let mut rec = vec![r.district_id.clone()];
        rec.extend(names.iter().map(|n| r.variables.get(*n).map(|v| format!("{v:?}")).unwrap_or_default()));
        w.write_record(&rec).map_err(ferr)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}
