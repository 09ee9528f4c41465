//! CSV ingestion with one-hot categoricals and min-max numericals.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Column typing for [`load_csv`]. Columns not listed as categorical (and not
/// the label) are parsed as numbers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnCode {
    Numeric { name: String, min: f64, max: f64 },
    Categorical { name: String, levels: Vec<String> },
}

impl ColumnCode {
    fn width(&self) -> usize {
        match self {
            ColumnCode::Numeric { .. } => 1,
            ColumnCode::Categorical { levels, .. } => levels.len(),
        }
    }

    fn name(&self) -> &str {
        match self {
            ColumnCode::Numeric { name, .. } | ColumnCode::Categorical { name, .. } => name,
        }
    }
}

/// Fitted column encoding, reusable on other files with the same header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularEncoder {
    pub label_column: String,
    pub columns: Vec<ColumnCode>,
    pub classes: Vec<String>,
}

struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::format("csv", format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format("csv", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() {
        return Err(Error::format("csv", "missing header row"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format("csv", e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(RawTable { header, rows })
}

fn parse_num(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::CsvCell {
            row,
            column: column.to_string(),
            message: format!("cannot parse `{cell}` as a finite number"),
        })
}

/// Loads a labelled CSV, fitting the encoding on this file.
pub fn load_csv(path: &Path, label_column: &str, schema: &CsvSchema) -> Result<LabeledDataset> {
    fit_csv(path, label_column, schema).map(|(d, _)| d)
}

pub fn fit_csv(
    path: &Path,
    label_column: &str,
    schema: &CsvSchema,
) -> Result<(LabeledDataset, TabularEncoder)> {
    let table = read_table(path)?;
    let label_idx = table
        .header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config {
            field: "label_column".into(),
            message: format!("`{label_column}` not in header {:?}", table.header),
        })?;

    let mut columns = Vec::new();
    for (c, name) in table.header.iter().enumerate() {
        if c == label_idx {
            continue;
        }
        if schema.categorical.contains(name) {
            let levels: BTreeSet<&str> = table.rows.iter().map(|r| r[c].as_str()).collect();
            columns.push(ColumnCode::Categorical {
                name: name.clone(),
                levels: levels.into_iter().map(str::to_string).collect(),
            });
        } else {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (r, row) in table.rows.iter().enumerate() {
                let v = parse_num(&row[c], r + 2, name)?;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if table.rows.is_empty() {
                (lo, hi) = (0.0, 1.0);
            }
            columns.push(ColumnCode::Numeric {
                name: name.clone(),
                min: lo,
                max: hi,
            });
        }
    }
    let classes: BTreeSet<&str> = table.rows.iter().map(|r| r[label_idx].as_str()).collect();
    let mut classes: Vec<String> = classes.into_iter().map(str::to_string).collect();
    // integer labels keep their numeric order
    if classes.iter().all(|c| c.parse::<u64>().is_ok()) {
        classes.sort_by_key(|c| c.parse::<u64>().unwrap_or(0));
    }
    let encoder = TabularEncoder {
        label_column: label_column.to_string(),
        columns,
        classes,
    };
    let ds = encoder.encode_table(&table)?;
    Ok((ds, encoder))
}

impl TabularEncoder {
    pub fn width(&self) -> usize {
        self.columns.iter().map(ColumnCode::width).sum()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.width());
        for col in &self.columns {
            match col {
                ColumnCode::Numeric { name, .. } => names.push(name.clone()),
                ColumnCode::Categorical { name, levels } => {
                    names.extend(levels.iter().map(|l| format!("{name}={l}")));
                }
            }
        }
        names
    }

    pub fn normalization(&self) -> Normalization {
        let mut scale = Vec::with_capacity(self.width());
        let mut offset = Vec::with_capacity(self.width());
        for col in &self.columns {
            match col {
                ColumnCode::Numeric { min, max, .. } => {
                    scale.push(if max > min { max - min } else { 1.0 });
                    offset.push(*min);
                }
                ColumnCode::Categorical { levels, .. } => {
                    scale.extend(std::iter::repeat(1.0).take(levels.len()));
                    offset.extend(std::iter::repeat(0.0).take(levels.len()));
                }
            }
        }
        Normalization { scale, offset }
    }

    /// Encodes another file with this fitted encoding. Unseen categories map
    /// to an all-zero block (with a warning); unseen labels are an error.
    pub fn encode_csv(&self, path: &Path) -> Result<LabeledDataset> {
        self.encode_table(&read_table(path)?)
    }

    fn encode_table(&self, table: &RawTable) -> Result<LabeledDataset> {
        let find = |name: &str| {
            table
                .header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config {
                    field: "columns".into(),
                    message: format!("column `{name}` missing from header"),
                })
        };
        let label_idx = find(&self.label_column)?;
        let col_idx: Vec<usize> = self
            .columns
            .iter()
            .map(|c| find(c.name()))
            .collect::<Result<_>>()?;
        let norm = self.normalization();
        let width = self.width();
        let mut data = Vec::with_capacity(table.rows.len() * width);
        let mut labels = Vec::with_capacity(table.rows.len());
        for (r, row) in table.rows.iter().enumerate() {
            let line = r + 2;
            let start = data.len();
            for (col, &c) in self.columns.iter().zip(&col_idx) {
                let cell = row[c].as_str();
                match col {
                    ColumnCode::Numeric { name, .. } => data.push(parse_num(cell, line, name)?),
                    ColumnCode::Categorical { name, levels } => {
                        let hit = levels.iter().position(|l| l == cell);
                        if hit.is_none() {
                            log::warn!(
                                "row {line}: unseen category `{cell}` in column `{name}`; encoded as all zeros"
                            );
                        }
                        data.extend((0..levels.len()).map(|k| if hit == Some(k) { 1.0 } else { 0.0 }));
                    }
                }
            }
            let normalized = norm.normalize(&data[start..]);
            data.truncate(start);
            data.extend(normalized);
            let label = &row[label_idx];
            let y = self
                .classes
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| Error::CsvCell {
                    row: line,
                    column: self.label_column.clone(),
                    message: format!("unknown class `{label}`"),
                })?;
            labels.push(y);
        }
        LabeledDataset::new(
            Tensor::new(vec![table.rows.len(), width], data)?,
            labels,
            self.classes.len(),
            Some(self.feature_names()),
            norm,
        )
    }
}
