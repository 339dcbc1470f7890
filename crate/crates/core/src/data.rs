//! Row storage and CSV interchange. The token `NA` encodes the degenerate
//! value.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::schema::{Level, NodeSchema, EMPTY};

pub const NA_TOKEN: &str = "NA";

/// Validated trajectories stored row-major as support positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    width: usize,
    values: Vec<Level>,
}

impl Dataset {
    pub fn new(schema: &NodeSchema, rows: Vec<Vec<Level>>) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * schema.len());
        for (r, row) in rows.iter().enumerate() {
            schema.validate_trajectory(row).map_err(|v| Error::InvalidRow {
                row: r,
                violation: v.to_string(),
            })?;
            values.extend_from_slice(row);
        }
        Ok(Dataset {
            width: schema.len(),
            values,
        })
    }

    /// Builds a dataset from rows already known to be valid.
    pub(crate) fn from_flat(width: usize, values: Vec<Level>) -> Self {
        Dataset { width, values }
    }

    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.values.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[Level] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Level]> {
        self.values.chunks(self.width.max(1))
    }

    pub fn read_csv<R: Read>(schema: &NodeSchema, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header.is_empty() {
            return Err(Error::Data("no rows".into()));
        }
        let expected: Vec<&str> = schema.nodes().iter().map(|n| n.name.as_str()).collect();
        if header != expected {
            let missing: Vec<&str> = expected
                .iter()
                .filter(|e| !header.iter().any(|h| h == *e))
                .copied()
                .collect();
            let extra: Vec<&str> = header
                .iter()
                .filter(|h| !expected.contains(&h.as_str()))
                .map(String::as_str)
                .collect();
            return Err(Error::Data(format!(
                "columns do not match the schema; missing {missing:?}, unexpected {extra:?}, expected order {expected:?}"
            )));
        }
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let lits: Vec<Option<i64>> = rec
                .iter()
                .map(|tok| {
                    if tok == NA_TOKEN {
                        Ok(None)
                    } else {
                        tok.parse::<i64>()
                            .map(Some)
                            .map_err(|_| Error::Data(format!("row {r}: cannot parse `{tok}`")))
                    }
                })
                .collect::<Result<_>>()?;
            rows.push(
                schema
                    .positions_from_literals(&lits)
                    .map_err(|e| Error::Data(format!("row {r}: {e}")))?,
            );
        }
        if rows.is_empty() {
            return Err(Error::Data("no rows".into()));
        }
        Dataset::new(schema, rows)
    }

    pub fn write_csv<W: Write>(&self, schema: &NodeSchema, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(schema.nodes().iter().map(|n| n.name.as_str()))?;
        for row in self.rows() {
            let rec: Vec<String> = row
                .iter()
                .zip(schema.nodes())
                .map(|(&v, n)| {
                    if v == EMPTY {
                        NA_TOKEN.to_string()
                    } else {
                        n.literal(v).unwrap().to_string()
                    }
                })
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-row flat table indices (cfg * m + x) for every stochastic node, and
/// per-node observation counts over table entries.
#[derive(Clone, Debug)]
pub struct RowIndex {
    pub n: usize,
    /// idx[row * width + node], u32::MAX when the node is deterministic.
    idx: Vec<u32>,
    width: usize,
    counts: Vec<Vec<(u32, f64)>>,
}

pub const NO_ENTRY: u32 = u32::MAX;

impl RowIndex {
    pub fn new(schema: &NodeSchema, data: &Dataset) -> Self {
        let width = schema.len();
        let mut idx = Vec::with_capacity(data.len() * width);
        let mut dense: Vec<std::collections::HashMap<u32, f64>> = vec![Default::default(); width];
        for row in data.rows() {
            let mut cfg = Some(0usize);
            let mut st = crate::schema::Absorption::default();
            for (i, &x) in row.iter().enumerate() {
                let entry = match (schema.forced(i, st), cfg) {
                    (None, Some(c)) => (c * schema.node(i).m() + x as usize) as u32,
                    _ => NO_ENTRY,
                };
                if entry != NO_ENTRY {
                    *dense[i].entry(entry).or_insert(0.0) += 1.0;
                }
                idx.push(entry);
                cfg = schema.extend(i, cfg, x);
                st = schema.advance(i, st, x);
            }
        }
        let counts = dense
            .into_iter()
            .map(|m| {
                let mut v: Vec<(u32, f64)> = m.into_iter().collect();
                v.sort_unstable_by_key(|e| e.0);
                v
            })
            .collect();
        RowIndex {
            n: data.len(),
            idx,
            width,
            counts,
        }
    }

    #[inline]
    pub fn entry(&self, row: usize, node: usize) -> u32 {
        self.idx[row * self.width + node]
    }

    /// Observed (entry, count) pairs for a node.
    pub fn counts(&self, node: usize) -> &[(u32, f64)] {
        &self.counts[node]
    }
}
