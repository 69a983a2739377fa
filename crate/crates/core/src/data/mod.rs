//! Per-party dataset handling: CSV loading, train/test splitting, and
//! experiment partitioners for building multi-party scenarios from one
//! source dataset.
//!
//! Datasets are immutable after load and safe to share read-only. All
//! randomized operations are pure functions of their inputs and a seed.

pub mod toy;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// The label column: its CSV column name and the class-name domain in
/// canonical order. Class ids are indices into `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub name: String,
    pub classes: Vec<String>,
}

/// One categorical feature with its value domain in canonical order.
/// Value ids are indices into `values`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalFeature {
    pub name: String,
    pub values: Vec<String>,
}

/// Schema for datasets with discrete feature values.
///
/// The value-id mapping comes from this schema, never from data
/// discovery order: every party must share identical id maps for their
/// counts to be summable at the aggregator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalSchema {
    pub features: Vec<CategoricalFeature>,
    pub label: LabelSchema,
}

impl CategoricalSchema {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label.classes.len()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(FedError::Format("schema has no features".into()));
        }
        let mut names = BTreeSet::new();
        for f in &self.features {
            if f.values.is_empty() {
                return Err(FedError::Format(format!(
                    "feature {} has an empty value domain",
                    f.name
                )));
            }
            if !names.insert(f.name.as_str()) {
                return Err(FedError::Format(format!("duplicate feature name {}", f.name)));
            }
        }
        if self.label.classes.is_empty() {
            return Err(FedError::Format("label domain is empty".into()));
        }
        Ok(())
    }
}

/// Schema for datasets with numeric features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericSchema {
    pub feature_names: Vec<String>,
    pub label: LabelSchema,
}

impl NumericSchema {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_classes(&self) -> usize {
        self.label.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Schema {
    Numeric(NumericSchema),
    Categorical(CategoricalSchema),
}

impl Schema {
    pub fn n_features(&self) -> usize {
        match self {
            Schema::Numeric(s) => s.n_features(),
            Schema::Categorical(s) => s.n_features(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Schema::Numeric(s) => s.label.classes.len(),
            Schema::Categorical(s) => s.label.classes.len(),
        }
    }

    pub fn label(&self) -> &LabelSchema {
        match self {
            Schema::Numeric(s) => &s.label,
            Schema::Categorical(s) => &s.label,
        }
    }
}

/// Feature values for one row: floats for numeric schemas, value ids
/// for categorical ones.
#[derive(Debug, Clone, PartialEq)]
pub enum Features {
    Numeric(Vec<f64>),
    Categorical(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub features: Features,
    pub label: usize,
}

/// An in-memory dataset: rows plus the schema they conform to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Schema,
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn empty(schema: Schema) -> Self {
        Dataset { schema, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows as numeric feature slices; errors if the schema is categorical.
    pub fn numeric_rows(&self) -> Result<Vec<(&[f64], usize)>> {
        self.rows
            .iter()
            .map(|r| match &r.features {
                Features::Numeric(x) => Ok((x.as_slice(), r.label)),
                Features::Categorical(_) => Err(FedError::Shape(
                    "numeric rows requested from a categorical dataset".into(),
                )),
            })
            .collect()
    }

    /// Rows as categorical value-id slices; errors if the schema is numeric.
    pub fn categorical_rows(&self) -> Result<Vec<(&[usize], usize)>> {
        self.rows
            .iter()
            .map(|r| match &r.features {
                Features::Categorical(x) => Ok((x.as_slice(), r.label)),
                Features::Numeric(_) => Err(FedError::Shape(
                    "categorical rows requested from a numeric dataset".into(),
                )),
            })
            .collect()
    }

    fn validate_row(&self, row: &Row, idx: usize) -> Result<()> {
        match (&self.schema, &row.features) {
            (Schema::Numeric(s), Features::Numeric(x)) => {
                if x.len() != s.n_features() {
                    return Err(FedError::Shape(format!(
                        "row {idx}: expected {} features, got {}",
                        s.n_features(),
                        x.len()
                    )));
                }
            }
            (Schema::Categorical(s), Features::Categorical(x)) => {
                if x.len() != s.n_features() {
                    return Err(FedError::Shape(format!(
                        "row {idx}: expected {} features, got {}",
                        s.n_features(),
                        x.len()
                    )));
                }
                for (f, &v) in x.iter().enumerate() {
                    if v >= s.features[f].values.len() {
                        return Err(FedError::Format(format!(
                            "row {idx}: value id {v} outside domain of feature {}",
                            s.features[f].name
                        )));
                    }
                }
            }
            _ => {
                return Err(FedError::Shape(format!(
                    "row {idx}: feature kind does not match schema"
                )))
            }
        }
        if row.label >= self.schema.n_classes() {
            return Err(FedError::Format(format!(
                "row {idx}: label id {} outside label domain",
                row.label
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            self.validate_row(row, i)?;
        }
        Ok(())
    }
}

/// Loads a CSV file against a schema. The first row must be a header;
/// columns are matched by name, so column order is free. Categorical
/// strings map to value ids via the schema's canonical order.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| FedError::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| FedError::Format(format!("{}: bad header: {e}", path.display())))?
        .clone();

    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FedError::Format(format!("missing column {name}")))
    };

    let label = schema.label();
    let label_col = col_of(&label.name)?;
    let feature_cols: Vec<usize> = match schema {
        Schema::Numeric(s) => s
            .feature_names
            .iter()
            .map(|n| col_of(n))
            .collect::<Result<_>>()?,
        Schema::Categorical(s) => s
            .features
            .iter()
            .map(|f| col_of(&f.name))
            .collect::<Result<_>>()?,
    };

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FedError::Format(format!("row {i}: {e}")))?;
        let get = |col: usize| -> Result<&str> {
            record
                .get(col)
                .ok_or_else(|| FedError::Format(format!("row {i}: too few fields")))
        };

        let features = match schema {
            Schema::Numeric(_) => {
                let mut x = Vec::with_capacity(feature_cols.len());
                for &col in &feature_cols {
                    let raw = get(col)?;
                    let v: f64 = raw.trim().parse().map_err(|_| {
                        FedError::Format(format!(
                            "row {i}: cannot parse {raw:?} as a number in column {}",
                            &headers[col]
                        ))
                    })?;
                    x.push(v);
                }
                Features::Numeric(x)
            }
            Schema::Categorical(s) => {
                let mut x = Vec::with_capacity(feature_cols.len());
                for (f, &col) in feature_cols.iter().enumerate() {
                    let raw = get(col)?.trim();
                    let id = s.features[f]
                        .values
                        .iter()
                        .position(|v| v == raw)
                        .ok_or_else(|| {
                            FedError::Format(format!(
                                "row {i}: unknown value {raw:?} for feature {}",
                                s.features[f].name
                            ))
                        })?;
                    x.push(id);
                }
                Features::Categorical(x)
            }
        };

        let raw_label = get(label_col)?.trim();
        let label_id = label
            .classes
            .iter()
            .position(|c| c == raw_label)
            .ok_or_else(|| {
                FedError::Format(format!("row {i}: unknown label {raw_label:?}"))
            })?;
        rows.push(Row { features, label: label_id });
    }

    let ds = Dataset { schema: schema.clone(), rows };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset back to CSV. `load_csv(save_csv(ds))` reproduces
/// `ds` exactly, row order included.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| FedError::Format(format!("{}: {e}", path.display())))?;
    let label = ds.schema.label().clone();

    let mut header: Vec<String> = match &ds.schema {
        Schema::Numeric(s) => s.feature_names.clone(),
        Schema::Categorical(s) => s.features.iter().map(|f| f.name.clone()).collect(),
    };
    header.push(label.name.clone());
    writer
        .write_record(&header)
        .map_err(|e| FedError::Format(e.to_string()))?;

    for row in &ds.rows {
        let mut record: Vec<String> = match (&ds.schema, &row.features) {
            (Schema::Numeric(_), Features::Numeric(x)) => {
                x.iter().map(|v| v.to_string()).collect()
            }
            (Schema::Categorical(s), Features::Categorical(x)) => x
                .iter()
                .enumerate()
                .map(|(f, &v)| s.features[f].values[v].clone())
                .collect(),
            _ => return Err(FedError::Shape("row kind does not match schema".into())),
        };
        record.push(label.classes[row.label].clone());
        writer
            .write_record(&record)
            .map_err(|e| FedError::Format(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Deterministic shuffled split into (train, test). The test side gets
/// `ceil(n * test_fraction)` rows.
pub fn train_test_split(ds: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    assert!(
        (0.0..1.0).contains(&test_fraction),
        "test_fraction must be in [0, 1)"
    );
    let n = ds.len();
    let n_test = ((n as f64) * test_fraction).ceil() as usize;

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let take = |ids: &[usize]| Dataset {
        schema: ds.schema.clone(),
        rows: ids.iter().map(|&i| ds.rows[i].clone()).collect(),
    };
    (take(&idx[n_test..]), take(&idx[..n_test]))
}

/// How to spread one dataset over several parties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionStrategy {
    /// Shuffle, then deal rows round-robin.
    Iid,
    /// Per-class party proportions drawn from a symmetric Dirichlet.
    /// Small alpha concentrates each class on few parties.
    LabelSkew { alpha: f64 },
}

/// Splits a dataset into `n_parties` disjoint parts whose union is the
/// input (as a multiset of rows).
pub fn partition(
    ds: &Dataset,
    n_parties: usize,
    strategy: PartitionStrategy,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if n_parties == 0 {
        return Err(FedError::Partition("n_parties must be >= 1".into()));
    }
    if n_parties > ds.len() {
        return Err(FedError::Partition(format!(
            "cannot split {} rows across {} parties",
            ds.len(),
            n_parties
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); n_parties];

    match strategy {
        PartitionStrategy::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            for (k, &i) in idx.iter().enumerate() {
                parts[k % n_parties].push(i);
            }
        }
        PartitionStrategy::LabelSkew { alpha } => {
            if !(alpha > 0.0) {
                return Err(FedError::Partition("alpha must be > 0".into()));
            }
            for class in 0..ds.schema.n_classes() {
                let mut idx: Vec<usize> = ds
                    .rows
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.label == class)
                    .map(|(i, _)| i)
                    .collect();
                idx.shuffle(&mut rng);

                let proportions: Vec<f64> = if n_parties == 1 {
                    vec![1.0]
                } else {
                    let dir = Dirichlet::new_with_size(alpha, n_parties)
                        .map_err(|e| FedError::Partition(e.to_string()))?;
                    dir.sample(&mut rng)
                };

                // Cumulative rounding keeps the per-class total exact.
                let n_c = idx.len() as f64;
                let mut cut_prev = 0usize;
                let mut acc = 0.0;
                for (p, &w) in proportions.iter().enumerate() {
                    acc += w;
                    let cut = if p + 1 == n_parties {
                        idx.len()
                    } else {
                        (acc * n_c).round() as usize
                    };
                    let cut = cut.clamp(cut_prev, idx.len());
                    parts[p].extend_from_slice(&idx[cut_prev..cut]);
                    cut_prev = cut;
                }
            }
        }
    }

    Ok(parts
        .into_iter()
        .map(|ids| Dataset {
            schema: ds.schema.clone(),
            rows: ids.into_iter().map(|i| ds.rows[i].clone()).collect(),
        })
        .collect())
}

/// Synthetic Gaussian blob dataset for experiments: unit-variance
/// clusters with class `c` centered at `separation` along axis
/// `c mod dim`. Deterministic per seed.
pub fn synth_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    assert!(n_per_class > 0 && n_classes > 0 && dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_per_class * n_classes);
    for class in 0..n_classes {
        let axis = class % dim;
        for _ in 0..n_per_class {
            let mut x = Vec::with_capacity(dim);
            for d in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let mean = if d == axis { separation } else { 0.0 };
                x.push(mean + noise);
            }
            rows.push(Row { features: Features::Numeric(x), label: class });
        }
    }
    let schema = Schema::Numeric(NumericSchema {
        feature_names: (0..dim).map(|d| format!("x{d}")).collect(),
        label: LabelSchema {
            name: "label".into(),
            classes: (0..n_classes).map(|c| c.to_string()).collect(),
        },
    });
    Dataset { schema, rows }
}
