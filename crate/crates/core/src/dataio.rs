//! Ingestion, validation and alignment of response tables, feature matrices,
//! MoA maps and scaffold maps.
//!
//! All ids are trimmed of surrounding whitespace and compared case-sensitively.
//! Tables are kept sorted lexicographically by id so downstream output does not
//! depend on input row order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurement units of a response table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "lnIC50")]
    LnIc50,
    #[serde(rename = "AUC")]
    Auc,
}

impl Default for Units {
    fn default() -> Self {
        Units::LnIc50
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub drug_id: String,
    pub cell_id: String,
    pub value: f64,
}

/// Sparse long-format (drug, cell, value) observations.
///
/// Invariants enforced at construction: unique (drug, cell) keys (duplicates
/// averaged), finite values, at least 1 drug and 2 cells. Records are sorted
/// by (drug_id, cell_id) and the table is immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseTable {
    records: Vec<ResponseRecord>,
    units: Units,
    /// Half-open record ranges per drug, aligned with `drugs`.
    #[serde(skip)]
    drug_ranges: Vec<(String, usize, usize)>,
}

impl ResponseTable {
    /// Build a table from raw records: trims ids, averages duplicate
    /// (drug, cell) pairs, sorts, and validates the invariants.
    /// Returns the table and the number of key pairs that had duplicates.
    pub fn from_records(
        records: impl IntoIterator<Item = (String, String, f64)>,
        units: Units,
    ) -> Result<(Self, usize)> {
        let mut grouped: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for (drug, cell, value) in records {
            if !value.is_finite() {
                return Err(Error::data(format!(
                    "non-finite response value for ({drug}, {cell})"
                )));
            }
            let key = (drug.trim().to_owned(), cell.trim().to_owned());
            let slot = grouped.entry(key).or_insert((0.0, 0));
            slot.0 += value;
            slot.1 += 1;
        }
        let duplicates = grouped.values().filter(|(_, n)| *n > 1).count();
        let records: Vec<ResponseRecord> = grouped
            .into_iter()
            .map(|((drug_id, cell_id), (sum, n))| ResponseRecord {
                drug_id,
                cell_id,
                value: sum / n as f64,
            })
            .collect();
        let table = Self::from_sorted_unique(records, units)?;
        Ok((table, duplicates))
    }

    fn from_sorted_unique(records: Vec<ResponseRecord>, units: Units) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::data("response table is empty"));
        }
        let n_cells = records
            .iter()
            .map(|r| r.cell_id.as_str())
            .collect::<BTreeSet<_>>()
            .len();
        if n_cells < 2 {
            return Err(Error::data(format!(
                "response table needs at least 2 distinct cells, found {n_cells}"
            )));
        }
        let mut table = ResponseTable {
            records,
            units,
            drug_ranges: Vec::new(),
        };
        table.rebuild_index();
        Ok(table)
    }

    fn rebuild_index(&mut self) {
        self.drug_ranges.clear();
        let mut start = 0usize;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].drug_id != self.records[start].drug_id {
                self.drug_ranges
                    .push((self.records[start].drug_id.clone(), start, i));
                start = i;
            }
        }
    }

    /// Rebuild the per-drug index after deserialization.
    pub fn reindex(&mut self) {
        self.rebuild_index();
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn records(&self) -> &[ResponseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Unique drug ids in lexicographic order.
    pub fn drugs(&self) -> impl Iterator<Item = &str> {
        self.drug_ranges.iter().map(|(d, _, _)| d.as_str())
    }

    pub fn n_drugs(&self) -> usize {
        self.drug_ranges.len()
    }

    /// Unique cell ids, lexicographically sorted.
    pub fn cell_ids(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.cell_id.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn n_cells(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.cell_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Records of one drug (sorted by cell id); empty slice if absent.
    pub fn records_of(&self, drug_id: &str) -> &[ResponseRecord] {
        match self
            .drug_ranges
            .binary_search_by(|(d, _, _)| d.as_str().cmp(drug_id))
        {
            Ok(i) => {
                let (_, start, end) = self.drug_ranges[i];
                &self.records[start..end]
            }
            Err(_) => &[],
        }
    }

    pub fn contains_drug(&self, drug_id: &str) -> bool {
        !self.records_of(drug_id).is_empty()
    }

    /// Value lookup by exact key.
    pub fn get(&self, drug_id: &str, cell_id: &str) -> Option<f64> {
        let block = self.records_of(drug_id);
        block
            .binary_search_by(|r| r.cell_id.as_str().cmp(cell_id))
            .ok()
            .map(|i| block[i].value)
    }

    /// Iterate (drug, record block) pairs in lexicographic drug order.
    pub fn per_drug(&self) -> impl Iterator<Item = (&str, &[ResponseRecord])> {
        self.drug_ranges
            .iter()
            .map(move |(d, s, e)| (d.as_str(), &self.records[*s..*e]))
    }

    /// Copy of the table without one drug.
    pub fn without_drug(&self, drug_id: &str) -> Result<ResponseTable> {
        let records: Vec<ResponseRecord> = self
            .records
            .iter()
            .filter(|r| r.drug_id != drug_id)
            .cloned()
            .collect();
        Self::from_sorted_unique(records, self.units)
    }

    /// Copy restricted to a drug predicate.
    pub fn filter_drugs(&self, keep: impl Fn(&str) -> bool) -> Result<ResponseTable> {
        let records: Vec<ResponseRecord> = self
            .records
            .iter()
            .filter(|r| keep(&r.drug_id))
            .cloned()
            .collect();
        Self::from_sorted_unique(records, self.units)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Cell,
    Drug,
}

/// Entity-indexed dense real matrix with named columns.
///
/// Rows are sorted by entity id; no non-finite entries survive construction
/// (missing fields are column-mean imputed at load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    entity_ids: Vec<String>,
    feature_names: Vec<String>,
    /// Row-major, `entity_ids.len() x feature_names.len()`.
    values: Vec<f64>,
    kind: EntityKind,
    /// Number of values filled in by imputation at load time.
    imputed_values: usize,
}

impl FeatureMatrix {
    pub fn new(
        entity_ids: Vec<String>,
        feature_names: Vec<String>,
        values: Vec<f64>,
        kind: EntityKind,
    ) -> Result<Self> {
        if values.len() != entity_ids.len() * feature_names.len() {
            return Err(Error::Schema(format!(
                "feature matrix shape mismatch: {} ids x {} features != {} values",
                entity_ids.len(),
                feature_names.len(),
                values.len()
            )));
        }
        let mut ids_seen = BTreeSet::new();
        for id in &entity_ids {
            if !ids_seen.insert(id.as_str()) {
                return Err(Error::DuplicateEntity {
                    id: id.clone(),
                    path: "<memory>".into(),
                });
            }
        }
        let mut names_seen = BTreeSet::new();
        for name in &feature_names {
            if !names_seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{name}`")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite feature value"));
        }
        let mut matrix = FeatureMatrix {
            entity_ids,
            feature_names,
            values,
            kind,
            imputed_values: 0,
        };
        matrix.sort_rows();
        Ok(matrix)
    }

    fn sort_rows(&mut self) {
        let n_features = self.feature_names.len();
        let mut order: Vec<usize> = (0..self.entity_ids.len()).collect();
        order.sort_by(|&a, &b| self.entity_ids[a].cmp(&self.entity_ids[b]));
        let ids = order
            .iter()
            .map(|&i| self.entity_ids[i].clone())
            .collect();
        let mut values = Vec::with_capacity(self.values.len());
        for &i in &order {
            values.extend_from_slice(&self.values[i * n_features..(i + 1) * n_features]);
        }
        self.entity_ids = ids;
        self.values = values;
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn entity_ids(&self) -> &[String] {
        &self.entity_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn imputed_values(&self) -> usize {
        self.imputed_values
    }

    pub fn row(&self, index: usize) -> &[f64] {
        let p = self.feature_names.len();
        &self.values[index * p..(index + 1) * p]
    }

    pub fn row_of(&self, entity_id: &str) -> Option<&[f64]> {
        self.entity_ids
            .binary_search_by(|id| id.as_str().cmp(entity_id))
            .ok()
            .map(|i| self.row(i))
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.row_of(entity_id).is_some()
    }

    /// Copy restricted to the given entity ids (ids absent from the matrix
    /// are ignored). Result rows stay sorted.
    pub fn restrict(&self, keep: &BTreeSet<&str>) -> FeatureMatrix {
        let p = self.feature_names.len();
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (i, id) in self.entity_ids.iter().enumerate() {
            if keep.contains(id.as_str()) {
                ids.push(id.clone());
                values.extend_from_slice(&self.values[i * p..(i + 1) * p]);
            }
        }
        FeatureMatrix {
            entity_ids: ids,
            feature_names: self.feature_names.clone(),
            values,
            kind: self.kind,
            imputed_values: self.imputed_values,
        }
    }

    /// Copy keeping only the feature columns selected by the predicate.
    pub fn select_features(&self, keep: impl Fn(&str) -> bool) -> FeatureMatrix {
        let cols: Vec<usize> = (0..self.feature_names.len())
            .filter(|&j| keep(&self.feature_names[j]))
            .collect();
        let p = self.feature_names.len();
        let mut values = Vec::with_capacity(self.entity_ids.len() * cols.len());
        for i in 0..self.entity_ids.len() {
            for &j in &cols {
                values.push(self.values[i * p + j]);
            }
        }
        FeatureMatrix {
            entity_ids: self.entity_ids.clone(),
            feature_names: cols
                .iter()
                .map(|&j| self.feature_names[j].clone())
                .collect(),
            values,
            kind: self.kind,
            imputed_values: self.imputed_values,
        }
    }

    /// Concatenate feature columns of two matrices over the shared entity set.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<FeatureMatrix> {
        if self.entity_ids != other.entity_ids {
            return Err(Error::Schema(
                "cannot stack feature matrices with different entity ids".into(),
            ));
        }
        let mut names = self.feature_names.clone();
        names.extend(other.feature_names.iter().cloned());
        let mut values = Vec::with_capacity(self.values.len() + other.values.len());
        let p1 = self.feature_names.len();
        let p2 = other.feature_names.len();
        for i in 0..self.entity_ids.len() {
            values.extend_from_slice(&self.values[i * p1..(i + 1) * p1]);
            values.extend_from_slice(&other.values[i * p2..(i + 1) * p2]);
        }
        let mut out = FeatureMatrix::new(self.entity_ids.clone(), names, values, self.kind)?;
        out.imputed_values = self.imputed_values + other.imputed_values;
        Ok(out)
    }
}

/// drug_id -> mechanism-of-action class label, with the closed label
/// vocabulary recorded at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoaMap {
    map: BTreeMap<String, String>,
    classes: Vec<String>,
}

impl MoaMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (drug, class) in pairs {
            let drug = drug.trim().to_owned();
            let class = class.trim().to_owned();
            if let Some(previous) = map.insert(drug.clone(), class.clone()) {
                if previous != class {
                    return Err(Error::Schema(format!(
                        "drug `{drug}` mapped to two MoA classes (`{previous}`, `{class}`)"
                    )));
                }
            }
        }
        if map.is_empty() {
            return Err(Error::data("MoA map is empty"));
        }
        let classes: BTreeSet<String> = map.values().cloned().collect();
        Ok(MoaMap {
            map,
            classes: classes.into_iter().collect(),
        })
    }

    pub fn class_of(&self, drug_id: &str) -> Option<&str> {
        self.map.get(drug_id).map(|s| s.as_str())
    }

    /// Closed vocabulary of class labels, sorted.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn drugs_in_class(&self, class: &str) -> Vec<&str> {
        self.map
            .iter()
            .filter(|(_, c)| c.as_str() == class)
            .map(|(d, _)| d.as_str())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(d, c)| (d.as_str(), c.as_str()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Multiset of class sizes, used by the permutation-control invariant.
    pub fn class_size_census(&self) -> BTreeMap<String, usize> {
        let mut census = BTreeMap::new();
        for class in self.map.values() {
            *census.entry(class.clone()).or_insert(0) += 1;
        }
        census
    }

    /// Copy restricted to a drug set.
    pub fn restrict(&self, keep: &BTreeSet<&str>) -> Option<MoaMap> {
        let pairs: Vec<(String, String)> = self
            .map
            .iter()
            .filter(|(d, _)| keep.contains(d.as_str()))
            .map(|(d, c)| (d.clone(), c.clone()))
            .collect();
        MoaMap::from_pairs(pairs).ok()
    }
}

/// drug_id -> scaffold group id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaffoldMap {
    map: BTreeMap<String, String>,
}

impl ScaffoldMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (drug, scaffold) in pairs {
            map.insert(drug.trim().to_owned(), scaffold.trim().to_owned());
        }
        if map.is_empty() {
            return Err(Error::data("scaffold map is empty"));
        }
        Ok(ScaffoldMap { map })
    }

    pub fn scaffold_of(&self, drug_id: &str) -> Option<&str> {
        self.map.get(drug_id).map(|s| s.as_str())
    }

    pub fn n_scaffolds(&self) -> usize {
        self.map.values().collect::<BTreeSet<_>>().len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(d, s)| (d.as_str(), s.as_str()))
    }

    pub fn restrict(&self, keep: &BTreeSet<&str>) -> Option<ScaffoldMap> {
        let pairs: Vec<(String, String)> = self
            .map
            .iter()
            .filter(|(d, _)| keep.contains(d.as_str()))
            .map(|(d, s)| (d.clone(), s.clone()))
            .collect();
        ScaffoldMap::from_pairs(pairs).ok()
    }
}

/// Intersection-aligned bundle of all inputs an experiment needs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    pub response: ResponseTable,
    pub cell_features: FeatureMatrix,
    pub drug_features: Option<FeatureMatrix>,
    pub moa: Option<MoaMap>,
    pub scaffold: Option<ScaffoldMap>,
}

/// Alignment report. Serialized with exactly the documented keys plus the
/// per-entity drop counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n_drugs: usize,
    pub n_cells: usize,
    pub n_records: usize,
    pub dropped_records: usize,
    pub imputed_values: usize,
    pub dropped_drugs: usize,
    pub dropped_cells: usize,
}

/// Column mapping for response CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseColumns {
    pub drug: String,
    pub cell: String,
    pub value: String,
}

impl Default for ResponseColumns {
    fn default() -> Self {
        ResponseColumns {
            drug: "drug_id".into(),
            cell: "cell_id".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLoadReport {
    pub rows_read: usize,
    pub records: usize,
    pub duplicate_pairs_averaged: usize,
}

/// Load a long-format response CSV. Duplicate (drug, cell) pairs are
/// averaged; any non-numeric value is a parse error naming the row.
pub fn load_response_table(
    path: impl AsRef<Path>,
    columns: &ResponseColumns,
    units: Units,
) -> Result<(ResponseTable, ResponseLoadReport)> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(e, &path_str))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, &path_str))?
        .clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_owned(),
                path: path_str.clone(),
            })
    };
    let drug_idx = idx(&columns.drug)?;
    let cell_idx = idx(&columns.cell)?;
    let value_idx = idx(&columns.value)?;

    let mut raw = Vec::new();
    for (row_number, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(e, &path_str))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_owned();
        let value_text = field(value_idx);
        let value: f64 = value_text.parse().map_err(|_| Error::ParseValue {
            path: path_str.clone(),
            row: row_number + 1,
            value: value_text.clone(),
        })?;
        if !value.is_finite() {
            return Err(Error::ParseValue {
                path: path_str.clone(),
                row: row_number + 1,
                value: value_text,
            });
        }
        raw.push((field(drug_idx), field(cell_idx), value));
    }
    let rows_read = raw.len();
    let (table, duplicate_pairs_averaged) = ResponseTable::from_records(raw, units)?;
    let report = ResponseLoadReport {
        rows_read,
        records: table.len(),
        duplicate_pairs_averaged,
    };
    Ok((table, report))
}

/// Write a response table in the canonical CSV format (sorted rows,
/// `drug_id,cell_id,value` header, shortest round-trip float formatting).
pub fn save_response_table(table: &ResponseTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("drug_id,cell_id,value\n");
    for r in table.records() {
        out.push_str(&format!("{},{},{}\n", r.drug_id, r.cell_id, r.value));
    }
    write_file(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLoadReport {
    pub entities: usize,
    pub features: usize,
    pub imputed_values: usize,
    pub dropped_columns: Vec<String>,
}

/// Load a wide feature CSV (`id,<f1>,<f2>,...`). Empty fields are missing and
/// get column-mean imputation; all-missing columns are dropped with a warning
/// record in the report.
pub fn load_feature_matrix(
    path: impl AsRef<Path>,
    kind: EntityKind,
) -> Result<(FeatureMatrix, FeatureLoadReport)> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(e, &path_str))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, &path_str))?
        .clone();
    if headers.is_empty() {
        return Err(Error::MissingColumn {
            column: "id".into(),
            path: path_str,
        });
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_owned()).collect();
    if feature_names.is_empty() {
        return Err(Error::Schema(format!(
            "feature file {path_str} has no feature columns"
        )));
    }

    let mut ids: Vec<String> = Vec::new();
    let mut cells: Vec<Option<f64>> = Vec::new();
    let mut seen = BTreeSet::new();
    for (row_number, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(e, &path_str))?;
        let id = record.get(0).unwrap_or("").trim().to_owned();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateEntity {
                id,
                path: path_str.clone(),
            });
        }
        for j in 0..feature_names.len() {
            let text = record.get(j + 1).unwrap_or("").trim();
            if text.is_empty() {
                cells.push(None);
            } else {
                let value: f64 = text.parse().map_err(|_| Error::ParseValue {
                    path: path_str.clone(),
                    row: row_number + 1,
                    value: text.to_owned(),
                })?;
                if !value.is_finite() {
                    return Err(Error::ParseValue {
                        path: path_str.clone(),
                        row: row_number + 1,
                        value: text.to_owned(),
                    });
                }
                cells.push(Some(value));
            }
        }
        ids.push(id);
    }
    if ids.is_empty() {
        return Err(Error::data(format!("feature file {path_str} has no rows")));
    }

    let p = feature_names.len();
    // Column means over observed entries; all-missing columns are dropped.
    let mut keep_cols = Vec::new();
    let mut col_means = Vec::new();
    let mut dropped_columns = Vec::new();
    for j in 0..p {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..ids.len() {
            if let Some(v) = cells[i * p + j] {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            dropped_columns.push(feature_names[j].clone());
        } else {
            keep_cols.push(j);
            col_means.push(sum / n as f64);
        }
    }
    if keep_cols.is_empty() {
        return Err(Error::data(format!(
            "feature file {path_str} has no observed values"
        )));
    }

    let mut imputed = 0usize;
    let mut values = Vec::with_capacity(ids.len() * keep_cols.len());
    for i in 0..ids.len() {
        for (slot, &j) in keep_cols.iter().enumerate() {
            match cells[i * p + j] {
                Some(v) => values.push(v),
                None => {
                    values.push(col_means[slot]);
                    imputed += 1;
                }
            }
        }
    }
    let kept_names: Vec<String> = keep_cols
        .iter()
        .map(|&j| feature_names[j].clone())
        .collect();
    let mut matrix = FeatureMatrix::new(ids, kept_names, values, kind)?;
    matrix.imputed_values = imputed;
    let report = FeatureLoadReport {
        entities: matrix.n_entities(),
        features: matrix.n_features(),
        imputed_values: imputed,
        dropped_columns,
    };
    Ok((matrix, report))
}

/// Write a feature matrix in the canonical CSV format.
pub fn save_feature_matrix(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("id");
    for name in matrix.feature_names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, id) in matrix.entity_ids().iter().enumerate() {
        out.push_str(id);
        for v in matrix.row(i) {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    write_file(path.as_ref(), out.as_bytes())
}

/// Load a two-column map CSV with the given header names.
fn load_pair_csv(path: &Path, key_col: &str, value_col: &str) -> Result<Vec<(String, String)>> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(e, &path_str))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, &path_str))?
        .clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_owned(),
                path: path_str.clone(),
            })
    };
    let key_idx = idx(key_col)?;
    let value_idx = idx(value_col)?;
    let mut pairs = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, &path_str))?;
        pairs.push((
            record.get(key_idx).unwrap_or("").trim().to_owned(),
            record.get(value_idx).unwrap_or("").trim().to_owned(),
        ));
    }
    Ok(pairs)
}

pub fn load_moa_map(path: impl AsRef<Path>) -> Result<MoaMap> {
    MoaMap::from_pairs(load_pair_csv(path.as_ref(), "drug_id", "moa_class")?)
}

pub fn save_moa_map(moa: &MoaMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("drug_id,moa_class\n");
    for (drug, class) in moa.iter() {
        out.push_str(&format!("{drug},{class}\n"));
    }
    write_file(path.as_ref(), out.as_bytes())
}

pub fn load_scaffold_map(path: impl AsRef<Path>) -> Result<ScaffoldMap> {
    ScaffoldMap::from_pairs(load_pair_csv(path.as_ref(), "drug_id", "scaffold_id")?)
}

/// Intersection-align a response table with feature matrices and maps.
///
/// Cells absent from the cell features (and, in matrix mode, drugs absent
/// from the drug features) are dropped with counts reported. Resulting ids
/// are lexicographically ordered, so output does not depend on input order.
pub fn align(
    response: &ResponseTable,
    cell_features: &FeatureMatrix,
    drug_features: Option<&FeatureMatrix>,
    moa: Option<&MoaMap>,
    scaffold: Option<&ScaffoldMap>,
) -> Result<(AlignedDataset, AlignmentReport)> {
    let response_cells: BTreeSet<&str> = response.records().iter().map(|r| r.cell_id.as_str()).collect();
    let response_drugs: BTreeSet<&str> = response.drugs().collect();

    let kept_cells: BTreeSet<&str> = response_cells
        .iter()
        .copied()
        .filter(|c| cell_features.contains(c))
        .collect();
    let kept_drugs: BTreeSet<&str> = match drug_features {
        Some(drug_matrix) => response_drugs
            .iter()
            .copied()
            .filter(|d| drug_matrix.contains(d))
            .collect(),
        None => response_drugs.iter().copied().collect(),
    };

    let kept_records: Vec<(String, String, f64)> = response
        .records()
        .iter()
        .filter(|r| kept_cells.contains(r.cell_id.as_str()) && kept_drugs.contains(r.drug_id.as_str()))
        .map(|r| (r.drug_id.clone(), r.cell_id.clone(), r.value))
        .collect();
    if kept_records.is_empty() {
        return Err(Error::data(
            "alignment produced an empty intersection of drugs and cells",
        ));
    }
    let dropped_records = response.len() - kept_records.len();
    let (aligned_response, _) = ResponseTable::from_records(kept_records, response.units())?;

    // Cells may drop out entirely once records on dropped drugs are removed.
    let final_cells: BTreeSet<&str> = aligned_response
        .records()
        .iter()
        .map(|r| r.cell_id.as_str())
        .collect();
    let final_drugs: BTreeSet<&str> = aligned_response.drugs().collect();

    let report = AlignmentReport {
        n_drugs: final_drugs.len(),
        n_cells: final_cells.len(),
        n_records: aligned_response.len(),
        dropped_records,
        imputed_values: cell_features.imputed_values()
            + drug_features.map_or(0, |m| m.imputed_values()),
        dropped_drugs: response_drugs.len() - final_drugs.len(),
        dropped_cells: response_cells.len() - final_cells.len(),
    };

    let aligned_cell_features = cell_features.restrict(&final_cells);
    let aligned_drug_features = drug_features.map(|m| m.restrict(&final_drugs));
    let aligned_moa = moa.and_then(|m| m.restrict(&final_drugs));
    let aligned_scaffold = scaffold.and_then(|s| s.restrict(&final_drugs));
    let dataset = AlignedDataset {
        response: aligned_response,
        cell_features: aligned_cell_features,
        drug_features: aligned_drug_features,
        moa: aligned_moa,
        scaffold: aligned_scaffold,
    };
    Ok((dataset, report))
}

/// Re-align an already aligned dataset (used by the idempotence check).
pub fn realign(dataset: &AlignedDataset) -> Result<(AlignedDataset, AlignmentReport)> {
    align(
        &dataset.response,
        &dataset.cell_features,
        dataset.drug_features.as_ref(),
        dataset.moa.as_ref(),
        dataset.scaffold.as_ref(),
    )
}

fn csv_error(err: csv::Error, path: &str) -> Error {
    match err.kind() {
        csv::ErrorKind::Io(_) => Error::Io {
            path: path.to_owned(),
            source: std::io::Error::other(err.to_string()),
        },
        _ => Error::Schema(format!("{path}: {err}")),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    file.write_all(bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}
