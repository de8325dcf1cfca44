use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QCEAEMB1";

/// Dense float64 vectors of one fixed dimension keyed by integer id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    name: String,
    dim: usize,
    rows: BTreeMap<u64, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(name: impl Into<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        Ok(Self { name: name.into(), dim, rows: BTreeMap::new() })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, id: u64, row: Vec<f64>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                table: self.name.clone(),
                expected: self.dim,
                found: row.len(),
                id,
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding { table: self.name.clone(), id });
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn require(&self, id: u64) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::MissingEmbeddingRow { table: self.name.clone(), id })
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.rows.keys().copied()
    }

    /// Stack the rows for `ids` (in that order) into an `ids.len() × dim` matrix.
    pub fn matrix(&self, ids: impl IntoIterator<Item = u64>) -> Result<DMatrix<f64>> {
        let mut data = Vec::new();
        let mut n = 0;
        for id in ids {
            data.extend_from_slice(self.require(id)?);
            n += 1;
        }
        Ok(DMatrix::from_row_slice(n, self.dim, &data))
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        for (id, row) in &self.rows {
            w.write_all(&id.to_le_bytes())?;
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(name: &str, mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::parse(name, 0, msg);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|_| bad("truncated header"))?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(|_| bad("truncated header"))?;
        let count = u64::from_le_bytes(b8);
        let mut table = EmbeddingTable::new(name, dim)?;
        for rec in 0..count {
            r.read_exact(&mut b8).map_err(|_| bad(&format!("truncated record {rec}")))?;
            let id = u64::from_le_bytes(b8);
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b8).map_err(|_| bad(&format!("truncated record {rec}")))?;
                row.push(f64::from_le_bytes(b8));
            }
            if table.rows.contains_key(&id) {
                return Err(bad(&format!("duplicate row id {id}")));
            }
            table.insert(id, row)?;
        }
        Ok(table)
    }

    /// Text form: a `dim <n>` header, then one `<id> <v1> ... <vn>` line per row.
    /// Floats are printed in shortest round-trip form.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "dim {}", self.dim)?;
        for (id, row) in &self.rows {
            write!(w, "{id}")?;
            for v in row {
                write!(w, " {v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(name: &str, r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let dim = loop {
            let Some((no, line)) = lines.next() else {
                return Err(Error::parse(name, 0, "missing `dim` header"));
            };
            let line = line.map_err(|e| Error::parse(name, no + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("dim"), Some(d)) => {
                    break d.parse::<usize>().map_err(|e| Error::parse(name, no + 1, e.to_string()))?
                }
                _ => return Err(Error::parse(name, no + 1, "expected `dim <n>` header")),
            }
        };
        let mut table = EmbeddingTable::new(name, dim)?;
        for (no, line) in lines {
            let line = line.map_err(|e| Error::parse(name, no + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let id: u64 = parts
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e: std::num::ParseIntError| Error::parse(name, no + 1, e.to_string()))?;
            let row = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(name, no + 1, e.to_string()))?;
            if table.rows.contains_key(&id) {
                return Err(Error::parse(name, no + 1, format!("duplicate row id {id}")));
            }
            table.insert(id, row)?;
        }
        Ok(table)
    }
}
