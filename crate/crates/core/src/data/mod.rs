//! Ingestion of categorical click logs: vocabularies, integer encoding,
//! splitting and mini-batching.

mod batch;
mod schema;
mod split;
pub mod synthetic;

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

pub use batch::{batches, Batch, Batches};
pub use schema::{FeatureSchema, FieldDecl, FieldGroup, FieldSchema};
pub use split::{split, SplitSpec};

use crate::error::{Error, Result};

pub const LABEL_COLUMN: &str = "label";

/// Raw string tokens projected onto the declared fields, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTable {
    pub fields: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub labels: Option<Vec<u8>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Reads a header-bearing comma-separated file. Columns not named in
    /// `fields` (other than `label`) are ignored.
    pub fn read_csv(path: &Path, fields: &[String], require_label: bool) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, fields, require_label)
    }

    pub fn from_reader<R: std::io::Read>(
        reader: R,
        fields: &[String],
        require_label: bool,
    ) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_owned()).collect();
        let col = |name: &str| header.iter().position(|h| h == name);
        let field_cols = fields
            .iter()
            .map(|f| col(f).ok_or_else(|| Error::UnknownColumn(f.clone())))
            .collect::<Result<Vec<_>>>()?;
        let label_col = col(LABEL_COLUMN);
        if require_label && label_col.is_none() {
            return Err(Error::UnknownColumn(LABEL_COLUMN.into()));
        }

        let mut rows = Vec::new();
        let mut labels = label_col.map(|_| Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::RowArity {
                    row: i,
                    expected: header.len(),
                    found: rec.len(),
                });
            }
            rows.push(field_cols.iter().map(|&c| rec[c].trim().to_owned()).collect());
            if let (Some(c), Some(ls)) = (label_col, labels.as_mut()) {
                ls.push(parse_label(&rec[c], i)?);
            }
        }
        Ok(Self {
            fields: fields.to_vec(),
            rows,
            labels,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.fields.clone();
        if self.labels.is_some() {
            header.push(LABEL_COLUMN.into());
        }
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = row.clone();
            if let Some(ls) = &self.labels {
                rec.push(ls[i].to_string());
            }
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io(path, e.into_error()))?;
        crate::io::write_atomic(path, &bytes)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            fields: self.fields.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|ls| indices.iter().map(|&i| ls[i]).collect()),
        }
    }
}

fn parse_label(s: &str, row: usize) -> Result<u8> {
    match s.trim() {
        "0" | "0.0" => Ok(0),
        "1" | "1.0" => Ok(1),
        other => Err(Error::InvalidLabel {
            row,
            value: other.to_owned(),
        }),
    }
}

/// Integer-encoded instances: an `N × M` id matrix plus binary labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDataset {
    ids: Array2<u32>,
    labels: Vec<u8>,
    field_sizes: Vec<usize>,
}

impl EncodedDataset {
    pub fn new(ids: Array2<u32>, labels: Vec<u8>, field_sizes: Vec<usize>) -> Result<Self> {
        if ids.nrows() != labels.len() {
            return Err(Error::shape("dataset labels", &[ids.nrows()], &[labels.len()]));
        }
        if ids.ncols() != field_sizes.len() {
            return Err(Error::shape("dataset fields", &[field_sizes.len()], &[ids.ncols()]));
        }
        for (row, &l) in labels.iter().enumerate() {
            if l > 1 {
                return Err(Error::InvalidLabel {
                    row,
                    value: l.to_string(),
                });
            }
        }
        for (field, (col, &size)) in ids.axis_iter(Axis(1)).zip(&field_sizes).enumerate() {
            if let Some(&id) = col.iter().find(|&&id| id as usize >= size) {
                return Err(Error::IdOutOfRange {
                    field,
                    id: id as usize,
                    size,
                });
            }
        }
        Ok(Self {
            ids,
            labels,
            field_sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.field_sizes.len()
    }

    pub fn ids(&self) -> &Array2<u32> {
        &self.ids
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn field_sizes(&self) -> &[usize] {
        &self.field_sizes
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, u32> {
        self.ids.row(i)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            ids: self.ids.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            field_sizes: self.field_sizes.clone(),
        }
    }
}
