//! Plain numeric CSV in and out.

use std::path::Path;

use obsadj::{Error, Result};

/// Reads a numeric table. A first row that does not parse is taken as a header.
pub fn read_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::InvalidInput(format!("{}: row {}: {e}", path.display(), i + 1)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no numeric rows", path.display())));
    }
    let width = rows[0].len();
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::DimensionMismatch { what: "CSV row width", expected: width, got: rows[i].len() });
    }
    Ok(rows)
}

/// A single numeric column, or the last column of a `(j, value)` table.
pub fn read_column(path: &Path) -> Result<Vec<f64>> {
    Ok(read_table(path)?.into_iter().map(|r| *r.last().expect("nonempty row")).collect())
}

pub fn write_table(path: &Path, header: Option<&[&str]>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `(index, value)` pairs with a header.
pub fn write_indexed(path: &Path, names: [&str; 2], values: &[f64]) -> Result<()> {
    write_table(path, Some(&names), values.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]))
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}
