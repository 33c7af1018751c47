//! File formats and atomic writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use precond_core::Matrix;

/// Provenance stamped at the top of every artifact.
#[derive(Debug, Clone)]
pub struct Header {
    pub config_hash: String,
    pub seed: u64,
}

impl Header {
    fn csv_lines(&self) -> String {
        format!("# config-sha256: {}\n# seed: {}\n", self.config_hash, self.seed)
    }
}

/// Writes to a sibling temp file then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().with_context(|| format!("{} has no file name", path.display()))?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = dir.join(tmp_name);
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| {
        let _ = fs::remove_file(&tmp);
        format!("renaming into {}", path.display())
    })
}

/// Plain CSV table with a provenance header.
pub struct CsvTable {
    columns: Vec<String>,
    body: String,
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(columns: &[S]) -> Self {
        Self { columns: columns.iter().map(|c| c.as_ref().to_owned()).collect(), body: String::new() }
    }

    pub fn push<I, C>(&mut self, cells: I)
    where
        I: IntoIterator<Item = C>,
        C: Into<Cell>,
    {
        let row: Vec<String> = cells.into_iter().map(|c| c.into().render()).collect();
        debug_assert_eq!(row.len(), self.columns.len());
        self.body.push_str(&row.join(","));
        self.body.push('\n');
    }

    pub fn render(&self, header: &Header) -> String {
        let mut out = header.csv_lines();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        out.push_str(&self.body);
        out
    }

    pub fn write(&self, path: &Path, header: &Header) -> Result<()> {
        write_atomic(path, self.render(header).as_bytes())
    }
}

pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
    Missing,
}

impl Cell {
    fn render(self) -> String {
        match self {
            // Shortest round-trip form, so reruns are byte-identical.
            Cell::Float(v) => format!("{v:?}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s,
            Cell::Missing => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::Float)
    }
}

/// Writes pretty JSON with the provenance fields merged in at the top.
pub fn write_json(path: &Path, header: &Header, body: serde_json::Value) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("config_sha256".into(), header.config_hash.clone().into());
    doc.insert("seed".into(), header.seed.into());
    match body {
        serde_json::Value::Object(fields) => doc.extend(fields),
        other => {
            doc.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Reads a row-major numeric CSV. Blank lines and `#` comments are skipped.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_matrix(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("line {}: not a numeric row", lineno + 1))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                bail!("line {}: expected {} columns, found {}", lineno + 1, first.len(), row.len());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("no data rows");
    }
    Ok(Matrix::from_rows(&rows)?)
}

/// A single column, or a single row, read as a vector.
pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let m = read_matrix(path)?;
    match m.shape() {
        (_, 1) => Ok(m.column(0)),
        (1, _) => Ok(m.row(0).to_vec()),
        (r, c) => bail!("{}: expected a vector, found a {r}x{c} matrix", path.display()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fmt::Write as _;

    fn format_matrix(m: &Matrix) -> String {
        let mut out = String::new();
        for i in 0..m.rows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    #[test]
    fn matrix_round_trip() {
        let m = Matrix::from_rows(&[[1.0, -0.25, 3e-12], [0.1, 2.0, -7.5]]).unwrap();
        let back = parse_matrix(&format!("# comment\n{}", format_matrix(&m))).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ragged_rows_rejected() {
        assert!(parse_matrix("1,2\n3\n").is_err());
        assert!(parse_matrix("1,x\n").is_err());
        assert!(parse_matrix("# only comments\n").is_err());
    }

    #[test]
    fn table_has_header() {
        let mut t = CsvTable::new(&["t", "value"]);
        t.push([Cell::from(0usize), Cell::from(0.5)]);
        t.push([Cell::from(1usize), Cell::from(None)]);
        let h = Header { config_hash: "ab".into(), seed: 3 };
        assert_eq!(t.render(&h), "# config-sha256: ab\n# seed: 3\nt,value\n0,0.5\n1,\n");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = std::env::temp_dir().join(format!("precond-io-{}", std::process::id()));
        let path = dir.join("a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(&dir).unwrap().count(), 1);
        fs::remove_dir_all(dir).unwrap();
    }
}
