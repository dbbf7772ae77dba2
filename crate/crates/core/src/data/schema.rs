use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{EncodedDataset, RawTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FieldGroup {
    User,
    Item,
    Context,
    #[default]
    Other,
}

impl std::str::FromStr for FieldGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "user" => Ok(FieldGroup::User),
            "item" => Ok(FieldGroup::Item),
            "context" => Ok(FieldGroup::Context),
            "other" => Ok(FieldGroup::Other),
            _ => Err(Error::Config(format!("unknown field group {s:?}"))),
        }
    }
}

impl std::fmt::Display for FieldGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FieldGroup::User => "user",
            FieldGroup::Item => "item",
            FieldGroup::Context => "context",
            FieldGroup::Other => "other",
        })
    }
}

/// Column declaration. Only categorical columns can be embedded; other kinds
/// are recognised so they can be rejected with a useful message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDecl {
    pub name: String,
    #[serde(default)]
    pub group: FieldGroup,
    #[serde(default = "default_kind")]
    pub kind: String,
}

fn default_kind() -> String {
    "categorical".to_owned()
}

impl FieldDecl {
    pub fn new(name: impl Into<String>, group: FieldGroup) -> Self {
        Self {
            name: name.into(),
            group,
            kind: default_kind(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == "categorical" {
            Ok(())
        } else {
            Err(Error::UnsupportedFieldKind {
                field: self.name.clone(),
                kind: self.kind.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub group: FieldGroup,
    pub vocab: BTreeMap<String, u32>,
    pub oov_id: u32,
}

impl FieldSchema {
    /// Number of ids in the field, including the OOV slot.
    pub fn size(&self) -> usize {
        self.oov_id as usize + 1
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.vocab.get(token).copied().unwrap_or(self.oov_id)
    }
}

/// Field metadata and vocabularies for a categorical dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub min_count: usize,
    pub fields: Vec<FieldSchema>,
}

impl FeatureSchema {
    /// Builds per-field vocabularies from token rows. Tokens seen fewer than
    /// `min_count` times share the field's OOV id; kept tokens are numbered in
    /// lexicographic order.
    pub fn build<I, R>(rows: I, decls: &[FieldDecl], min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[String]>,
    {
        if decls.is_empty() {
            return Err(Error::Config("no fields declared".into()));
        }
        for d in decls {
            d.validate()?;
        }
        let m = decls.len();
        let mut counts: Vec<HashMap<String, usize>> = vec![HashMap::new(); m];
        let mut n_rows = 0usize;
        for (row_idx, row) in rows.into_iter().enumerate() {
            let row = row.as_ref();
            if row.len() != m {
                return Err(Error::RowArity {
                    row: row_idx,
                    expected: m,
                    found: row.len(),
                });
            }
            for (c, tok) in counts.iter_mut().zip(row) {
                *c.entry(tok.clone()).or_default() += 1;
            }
            n_rows += 1;
        }
        if n_rows == 0 {
            return Err(Error::EmptyInput);
        }

        let fields = decls
            .iter()
            .zip(counts)
            .map(|(decl, count)| {
                let mut kept: Vec<String> = count
                    .into_iter()
                    .filter(|(_, n)| *n >= min_count.max(1))
                    .map(|(t, _)| t)
                    .collect();
                kept.sort_unstable();
                let vocab: BTreeMap<String, u32> = kept
                    .into_iter()
                    .enumerate()
                    .map(|(i, t)| (t, i as u32))
                    .collect();
                let oov_id = vocab.len() as u32;
                FieldSchema {
                    name: decl.name.clone(),
                    group: decl.group,
                    vocab,
                    oov_id,
                }
            })
            .collect();
        Ok(Self { min_count, fields })
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_sizes(&self) -> Vec<usize> {
        self.fields.iter().map(FieldSchema::size).collect()
    }

    /// Distinct in-vocabulary features across all fields (OOV slots excluded).
    pub fn feature_count(&self) -> usize {
        self.fields.iter().map(|f| f.vocab.len()).sum()
    }

    /// Rows needed in the embedding table (OOV slots included).
    pub fn total_ids(&self) -> usize {
        self.field_sizes().iter().sum()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn groups(&self) -> Vec<FieldGroup> {
        self.fields.iter().map(|f| f.group).collect()
    }

    pub fn decls(&self) -> Vec<FieldDecl> {
        self.fields
            .iter()
            .map(|f| FieldDecl::new(f.name.clone(), f.group))
            .collect()
    }

    /// Encodes token rows into an `N × M` id matrix.
    pub fn encode_rows<I, R>(&self, rows: I) -> Result<Array2<u32>>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[String]>,
    {
        let m = self.num_fields();
        let mut ids = Vec::new();
        let mut n = 0;
        for (row_idx, row) in rows.into_iter().enumerate() {
            let row = row.as_ref();
            if row.len() != m {
                return Err(Error::RowArity {
                    row: row_idx,
                    expected: m,
                    found: row.len(),
                });
            }
            ids.extend(self.fields.iter().zip(row).map(|(f, t)| f.lookup(t)));
            n += 1;
        }
        Ok(Array2::from_shape_vec((n, m), ids).expect("row-major id buffer"))
    }

    pub fn encode(&self, table: &RawTable) -> Result<EncodedDataset> {
        if table.fields != self.field_names() {
            return Err(Error::SchemaMismatch(format!(
                "table columns {:?} do not match schema fields {:?}",
                table.fields,
                self.field_names()
            )));
        }
        let ids = self.encode_rows(&table.rows)?;
        let labels = table
            .labels
            .clone()
            .ok_or_else(|| Error::UnknownColumn("label".into()))?;
        EncodedDataset::new(ids, labels, self.field_sizes())
    }

    /// Checks the structural invariants of a schema loaded from disk.
    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Config("schema has no fields".into()));
        }
        for f in &self.fields {
            let mut ids: Vec<u32> = f.vocab.values().copied().collect();
            ids.sort_unstable();
            let contiguous = ids.iter().enumerate().all(|(i, &id)| i as u32 == id);
            if !contiguous || f.oov_id as usize != f.vocab.len() {
                return Err(Error::Config(format!(
                    "field {:?}: ids must be contiguous from 0 with the OOV id last",
                    f.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(tokens: &[&str]) -> Vec<Vec<String>> {
        tokens.iter().map(|t| vec![t.to_string()]).collect()
    }

    fn one_field() -> Vec<FieldDecl> {
        vec![FieldDecl::new("f", FieldGroup::Other)]
    }

    #[test]
    fn vocab_from_counts() {
        let s = FeatureSchema::build(rows(&["a", "a", "b"]), &one_field(), 1).unwrap();
        let f = &s.fields[0];
        assert_eq!(f.vocab.get("a"), Some(&0));
        assert_eq!(f.vocab.get("b"), Some(&1));
        assert_eq!(f.oov_id, 2);
        assert_eq!(f.size(), 3);
    }

    #[test]
    fn min_count_sends_rare_tokens_to_oov() {
        let s = FeatureSchema::build(rows(&["a", "a", "b"]), &one_field(), 2).unwrap();
        let f = &s.fields[0];
        assert_eq!(f.vocab.len(), 1);
        assert_eq!(f.vocab.get("a"), Some(&0));
        assert_eq!(f.oov_id, 1);
        assert_eq!(f.size(), 2);
        assert_eq!(f.lookup("b"), 1);
    }

    #[test]
    fn lexicographic_ids() {
        let s = FeatureSchema::build(rows(&["zz", "b", "a", "b"]), &one_field(), 1).unwrap();
        let ids: Vec<_> = s.fields[0].vocab.iter().map(|(t, i)| (t.as_str(), *i)).collect();
        assert_eq!(ids, vec![("a", 0), ("b", 1), ("zz", 2)]);
    }

    #[test]
    fn malformed_row_reports_index() {
        let decls = vec![
            FieldDecl::new("a", FieldGroup::User),
            FieldDecl::new("b", FieldGroup::Item),
        ];
        let data = vec![
            vec!["x".to_string(), "y".to_string()],
            vec!["x".to_string()],
        ];
        match FeatureSchema::build(data, &decls, 1) {
            Err(Error::RowArity { row, expected, found }) => {
                assert_eq!((row, expected, found), (1, 2, 1))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_input_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(
            FeatureSchema::build(empty, &one_field(), 1),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn non_categorical_rejected() {
        let mut d = FieldDecl::new("price", FieldGroup::Item);
        d.kind = "numeric".into();
        assert!(matches!(
            FeatureSchema::build(rows(&["1.0"]), &[d], 1),
            Err(Error::UnsupportedFieldKind { .. })
        ));
    }

    #[test]
    fn encode_known_and_oov() {
        let s = FeatureSchema::build(rows(&["a", "a", "b"]), &one_field(), 2).unwrap();
        let ids = s.encode_rows(rows(&["a", "z"])).unwrap();
        assert_eq!(ids.column(0).to_vec(), vec![0, 1]);
    }

    #[test]
    fn encode_wrong_arity() {
        let s = FeatureSchema::build(rows(&["a"]), &one_field(), 1).unwrap();
        let bad = vec![vec!["a".to_string()], vec!["a".to_string(), "b".to_string()]];
        assert!(matches!(s.encode_rows(bad), Err(Error::RowArity { row: 1, .. })));
    }

    #[test]
    fn json_round_trip() {
        let s = FeatureSchema::build(rows(&["a", "b", "c", "a"]), &one_field(), 1).unwrap();
        let back = FeatureSchema::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn load_rejects_gapped_ids() {
        let mut s = FeatureSchema::build(rows(&["a", "b"]), &one_field(), 1).unwrap();
        s.fields[0].vocab.insert("c".into(), 7);
        assert!(FeatureSchema::from_json(&s.to_json().unwrap()).is_err());
    }
}
