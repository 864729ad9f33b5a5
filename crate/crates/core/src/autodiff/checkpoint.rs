//! Text parameter container.
//!
//! ```text
//! # key = value            (header lines, free-form metadata)
//! name<TAB>d1,d2,...<TAB>v1 v2 ...
//! ```
//!
//! Values use the shortest representation that round-trips, so a
//! write/read cycle is exact.

use std::io::Write;
use std::path::Path;

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub params: ParamStore,
}

pub fn write_checkpoint(path: &Path, header: &[(String, String)], params: &ParamStore) -> Result<()> {
    let mut out = String::new();
    for (k, v) in header {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    for (_, name, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
        out.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), values.join(" ")));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::new();
    let mut params = ParamStore::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(rest) = line.strip_prefix("# ") {
            let (k, v) = rest
                .split_once(" = ")
                .ok_or_else(|| Error::parse(path, lineno, "header line without ' = '"))?;
            header.push((k.to_owned(), v.to_owned()));
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno, "expected name<TAB>shape<TAB>values"));
        }
        let shape = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::parse(path, lineno, format!("bad shape {:?}", fields[1])))?
        };
        let data = fields[2]
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, lineno, "bad parameter value"))?;
        let t = Tensor::new(shape, data).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        params.add(fields[0], t);
    }
    Ok(Checkpoint { header, params })
}
