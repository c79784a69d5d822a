//! Sweep tables as CSV, JSON and gnuplot data.

use std::io::Write;
use std::path::{Path, PathBuf};

use xmadapter_core::eval::SweepTable;

use crate::error::{Error, Result};

/// Columns: swept axes, held values, `accuracy`, `best` (0/1).
pub fn to_csv(table: &SweepTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = table.axes.iter().map(String::as_str).collect();
    header.extend(table.held.iter().map(|(k, _)| k.as_str()));
    header.extend(["accuracy", "best"]);
    w.write_record(&header)?;
    for (i, cell) in table.cells.iter().enumerate() {
        let mut rec: Vec<String> = cell.coords.iter().map(|v| v.to_string()).collect();
        rec.extend(table.held.iter().map(|(_, v)| v.to_string()));
        rec.push(cell.accuracy.to_string());
        rec.push(u8::from(i == table.best).to_string());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Config(e.to_string()))
}

pub fn to_json(table: &SweepTable) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(table)?;
    v.push(b'\n');
    Ok(v)
}

/// Whitespace-separated columns with `#` comments; cells of a two-axis cross
/// product are split into blocks by blank lines for `splot`.
pub fn to_gnuplot(table: &SweepTable) -> Vec<u8> {
    let mut out = Vec::new();
    let held: Vec<String> = table.held.iter().map(|(k, v)| format!("{k}={v}")).collect();
    writeln!(out, "# held: {}", held.join(" ")).unwrap();
    writeln!(out, "# {} accuracy", table.axes.join(" ")).unwrap();
    let mut prev: Option<f64> = None;
    for cell in &table.cells {
        if cell.coords.len() > 1 {
            if prev.is_some_and(|p| p != cell.coords[0]) {
                writeln!(out).unwrap();
            }
            prev = Some(cell.coords[0]);
        }
        let coords: Vec<String> = cell.coords.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{} {}", coords.join(" "), cell.accuracy).unwrap();
    }
    out
}

/// Writes `<stem>.csv`, `<stem>.json` and `<stem>.dat` into `dir`.
pub fn write_all(table: &SweepTable, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let outputs = [
        (format!("{stem}.csv"), to_csv(table)?),
        (format!("{stem}.json"), to_json(table)?),
        (format!("{stem}.dat"), to_gnuplot(table)),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in outputs {
        let p = dir.join(name);
        crate::write_atomic(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}
