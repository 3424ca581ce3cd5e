//! Tabular ingestion: type inference, one-hot encoding, date
//! expansion, imputation, and min-max scaling into the tanh range.
//!
//! The flow is split-then-fit: rows are split into train/test first,
//! a [`PreprocessPlan`] is fitted on the training rows only, and the
//! same immutable plan transforms both sides, so test statistics
//! never leak into the encoding. Transforming without a fitted plan
//! is unrepresentable; a plan only exists as the result of `fit`.
//!
//! Missing values are the empty string, `NA`, and `?`. Values are
//! trimmed of surrounding whitespace before any interpretation.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// On-disk plan container version.
pub const PLAN_FORMAT_VERSION: u32 = 1;

/// How a column treats missing values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    DropRow,
    Impute,
}

/// Column role used by schema inference and the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Date,
    Target,
}

/// One column of the input table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub missing_policy: MissingPolicy,
}

pub fn is_missing(value: &str) -> bool {
    matches!(value.trim(), "" | "NA" | "?")
}

fn parse_numeric(value: &str) -> Option<f64> {
    value.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_date(value: &str) -> Option<NaiveDateTime> {
    let v = value.trim();
    NaiveDateTime::parse_from_str(v, "%Y-%m-%d %H:%M:%S")
        .ok()
        .or_else(|| {
            NaiveDate::parse_from_str(v, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// (year, month, day, weekday with Monday = 0), before scaling.
fn date_features(dt: NaiveDateTime) -> [f64; 4] {
    [
        dt.year() as f64,
        dt.month() as f64,
        dt.day() as f64,
        dt.weekday().num_days_from_monday() as f64,
    ]
}

fn scale(value: f64, min: f64, max: f64) -> f64 {
    if max > min {
        (-1.0 + 2.0 * (value - min) / (max - min)).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Decide column kinds from the header and sampled rows. A column is
/// numeric when every non-missing sample parses as a finite number,
/// date when every non-missing sample parses as `YYYY-MM-DD` or
/// `YYYY-MM-DD hh:mm:ss`, otherwise categorical. Entries in
/// `overrides` (by column name) win over inference; this is also how
/// a target column is designated.
pub fn infer_schema(
    header: &[String],
    sample_rows: &[Vec<String>],
    overrides: &BTreeMap<String, ColumnKind>,
) -> Result<Vec<ColumnSchema>> {
    if header.is_empty() {
        return Err(Error::Schema("CSV has no columns".into()));
    }
    if sample_rows.is_empty() {
        return Err(Error::Schema("schema inference needs at least one row".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for name in header {
        if !seen.insert(name.as_str()) {
            return Err(Error::Schema(format!("duplicate column name {name:?}")));
        }
    }
    for name in overrides.keys() {
        if !header.iter().any(|h| h == name) {
            return Err(Error::Schema(format!(
                "override for unknown column {name:?}"
            )));
        }
    }
    let mut schema = Vec::with_capacity(header.len());
    for (idx, name) in header.iter().enumerate() {
        let kind = if let Some(&k) = overrides.get(name) {
            k
        } else {
            let values: Vec<&str> = sample_rows
                .iter()
                .filter_map(|r| r.get(idx).map(|s| s.as_str()))
                .filter(|v| !is_missing(v))
                .collect();
            if values.is_empty() {
                ColumnKind::Categorical
            } else if values.iter().all(|v| parse_numeric(v).is_some()) {
                ColumnKind::Numeric
            } else if values.iter().all(|v| parse_date(v).is_some()) {
                ColumnKind::Date
            } else {
                ColumnKind::Categorical
            }
        };
        schema.push(ColumnSchema {
            name: name.clone(),
            kind,
            missing_policy: MissingPolicy::Impute,
        });
    }
    let targets = schema
        .iter()
        .filter(|c| c.kind == ColumnKind::Target)
        .count();
    if targets > 1 {
        return Err(Error::Schema(format!(
            "{targets} target columns designated; at most one is allowed"
        )));
    }
    Ok(schema)
}

/// Index of the target column, if one is designated.
pub fn target_column_index(schema: &[ColumnSchema]) -> Option<usize> {
    schema.iter().position(|c| c.kind == ColumnKind::Target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NumericColumn {
    name: String,
    source_index: usize,
    min: f64,
    max: f64,
    impute: f64,
    drop_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CategoricalColumn {
    name: String,
    source_index: usize,
    /// Sorted training vocabulary; one output column per entry.
    vocab: Vec<String>,
    /// Most frequent training value (lexicographically smallest on
    /// ties); absent when the column had no non-missing training
    /// values.
    mode: Option<String>,
    drop_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DateColumn {
    name: String,
    source_index: usize,
    /// Median training date, used for imputation.
    impute: Option<String>,
    /// Min/max per derived feature: year, month, day, weekday.
    ranges: [(f64, f64); 4],
    drop_missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum FittedColumn {
    Numeric(NumericColumn),
    Categorical(CategoricalColumn),
    Date(DateColumn),
}

impl FittedColumn {
    fn source_index(&self) -> usize {
        match self {
            FittedColumn::Numeric(c) => c.source_index,
            FittedColumn::Categorical(c) => c.source_index,
            FittedColumn::Date(c) => c.source_index,
        }
    }

    fn drop_missing(&self) -> bool {
        match self {
            FittedColumn::Numeric(c) => c.drop_missing,
            FittedColumn::Categorical(c) => c.drop_missing,
            FittedColumn::Date(c) => c.drop_missing,
        }
    }
}

/// How the target column is interpreted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetKind {
    /// Sorted class vocabulary; targets become class indices.
    Classes { vocab: Vec<String> },
    /// Raw numeric values passed through unscaled.
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub source_index: usize,
    pub kind: TargetKind,
}

/// Immutable fitted preprocessing state: everything needed to turn
/// raw rows into a feature matrix in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    columns: Vec<FittedColumn>,
    target: Option<TargetSpec>,
    feature_names: Vec<String>,
    source_column_count: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    format_version: u32,
    plan: PreprocessPlan,
}

/// Output of [`PreprocessPlan::transform`].
#[derive(Debug, Clone)]
pub struct Transformed {
    pub features: Matrix,
    /// Indices (into the input rows) of the rows that survived.
    pub kept_rows: Vec<usize>,
    /// Target per kept row: class index or raw numeric value.
    pub targets: Option<Vec<f64>>,
    /// Rows dropped because their target class was never seen during
    /// fitting.
    pub unseen_target_rows: usize,
}

impl PreprocessPlan {
    /// Fit per-column statistics on training rows. Rows with a
    /// missing value in a drop-policy column or a missing target are
    /// excluded before any statistic is computed.
    pub fn fit(schema: &[ColumnSchema], rows: &[Vec<String>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("cannot fit a plan on zero rows".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {i} has {} fields but the schema has {} columns",
                    row.len(),
                    schema.len()
                )));
            }
        }
        let target_idx = target_column_index(schema);
        let kept: Vec<&Vec<String>> = rows
            .iter()
            .filter(|row| {
                let target_ok = target_idx.is_none_or(|t| !is_missing(&row[t]));
                let drops_ok = schema.iter().enumerate().all(|(i, col)| {
                    col.kind == ColumnKind::Target
                        || col.missing_policy == MissingPolicy::Impute
                        || !is_missing(&row[i])
                });
                target_ok && drops_ok
            })
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidInput(
                "no training rows survive the drop-row policies".into(),
            ));
        }

        let mut columns = Vec::new();
        let mut feature_names = Vec::new();
        let mut target = None;

        for (idx, col) in schema.iter().enumerate() {
            let drop_missing = col.missing_policy == MissingPolicy::DropRow;
            let present: Vec<&str> = kept
                .iter()
                .map(|r| r[idx].trim())
                .filter(|v| !is_missing(v))
                .collect();
            match col.kind {
                ColumnKind::Numeric => {
                    let mut values = Vec::with_capacity(present.len());
                    for v in &present {
                        match parse_numeric(v) {
                            Some(x) => values.push(x),
                            None => {
                                return Err(Error::Schema(format!(
                                    "column {:?} is numeric but contains {v:?}",
                                    col.name
                                )))
                            }
                        }
                    }
                    let (min, max, impute) = if values.is_empty() {
                        (0.0, 0.0, 0.0)
                    } else {
                        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
                        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        (min, max, median(values))
                    };
                    feature_names.push(col.name.clone());
                    columns.push(FittedColumn::Numeric(NumericColumn {
                        name: col.name.clone(),
                        source_index: idx,
                        min,
                        max,
                        impute,
                        drop_missing,
                    }));
                }
                ColumnKind::Categorical => {
                    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
                    for v in &present {
                        *counts.entry(v).or_insert(0) += 1;
                    }
                    let vocab: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
                    // BTreeMap iterates keys sorted and only a
                    // strictly larger count replaces the champion, so
                    // ties resolve to the lexicographically smallest
                    // mode.
                    let mode = counts
                        .iter()
                        .fold(None::<(&str, usize)>, |best, (&k, &c)| match best {
                            Some((_, bc)) if c <= bc => best,
                            _ => Some((k, c)),
                        })
                        .map(|(k, _)| k.to_string());
                    for v in &vocab {
                        feature_names.push(format!("{}={v}", col.name));
                    }
                    columns.push(FittedColumn::Categorical(CategoricalColumn {
                        name: col.name.clone(),
                        source_index: idx,
                        vocab,
                        mode,
                        drop_missing,
                    }));
                }
                ColumnKind::Date => {
                    let mut dates = Vec::with_capacity(present.len());
                    for v in &present {
                        match parse_date(v) {
                            Some(d) => dates.push(d),
                            None => {
                                return Err(Error::Schema(format!(
                                    "column {:?} is a date but contains {v:?}",
                                    col.name
                                )))
                            }
                        }
                    }
                    dates.sort();
                    let impute = if dates.is_empty() {
                        None
                    } else {
                        Some(
                            dates[dates.len() / 2]
                                .format("%Y-%m-%d %H:%M:%S")
                                .to_string(),
                        )
                    };
                    let mut ranges = [(0.0f64, 0.0f64); 4];
                    for (f, range) in ranges.iter_mut().enumerate() {
                        let mut min = f64::INFINITY;
                        let mut max = f64::NEG_INFINITY;
                        for d in &dates {
                            let v = date_features(*d)[f];
                            min = min.min(v);
                            max = max.max(v);
                        }
                        *range = if dates.is_empty() { (0.0, 0.0) } else { (min, max) };
                    }
                    for part in ["year", "month", "day", "weekday"] {
                        feature_names.push(format!("{}.{part}", col.name));
                    }
                    columns.push(FittedColumn::Date(DateColumn {
                        name: col.name.clone(),
                        source_index: idx,
                        impute,
                        ranges,
                        drop_missing,
                    }));
                }
                ColumnKind::Target => {
                    let numeric = !present.is_empty()
                        && present.iter().all(|v| parse_numeric(v).is_some());
                    let kind = if numeric {
                        TargetKind::Numeric
                    } else {
                        let vocab: Vec<String> = present
                            .iter()
                            .map(|s| s.to_string())
                            .collect::<std::collections::BTreeSet<_>>()
                            .into_iter()
                            .collect();
                        TargetKind::Classes { vocab }
                    };
                    target = Some(TargetSpec {
                        name: col.name.clone(),
                        source_index: idx,
                        kind,
                    });
                }
            }
        }
        if feature_names.is_empty() {
            return Err(Error::Schema(
                "preprocessing produced zero feature columns".into(),
            ));
        }
        Ok(Self {
            columns,
            target,
            feature_names,
            source_column_count: schema.len(),
        })
    }

    /// Output feature names, fixed at fit time; the transformed
    /// width always equals this length regardless of the batch.
    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn target(&self) -> Option<&TargetSpec> {
        self.target.as_ref()
    }

    /// Apply the fitted encoding to rows (train or test alike).
    ///
    /// Rows are dropped when a drop-policy column is missing, the
    /// target is missing, or a classification target value was never
    /// seen during fitting; everything else is imputed. Numeric and
    /// date features are clamped into [-1, 1], so values outside the
    /// training range saturate rather than escape the tanh domain.
    pub fn transform(&self, rows: &[Vec<String>]) -> Result<Transformed> {
        let mut data = Vec::new();
        let mut kept_rows = Vec::new();
        let mut targets = self.target.as_ref().map(|_| Vec::new());
        let mut unseen_target_rows = 0usize;

        'rows: for (i, row) in rows.iter().enumerate() {
            if row.len() != self.source_column_count {
                return Err(Error::Schema(format!(
                    "row {i} has {} fields but the plan expects {}",
                    row.len(),
                    self.source_column_count
                )));
            }
            let target_value = if let Some(spec) = &self.target {
                let raw = row[spec.source_index].trim();
                if is_missing(raw) {
                    continue 'rows;
                }
                match &spec.kind {
                    TargetKind::Numeric => match parse_numeric(raw) {
                        Some(v) => Some(v),
                        None => {
                            return Err(Error::Schema(format!(
                                "target {:?} is numeric but row {i} contains {raw:?}",
                                spec.name
                            )))
                        }
                    },
                    TargetKind::Classes { vocab } => {
                        match vocab.binary_search(&raw.to_string()) {
                            Ok(class) => Some(class as f64),
                            Err(_) => {
                                unseen_target_rows += 1;
                                continue 'rows;
                            }
                        }
                    }
                }
            } else {
                None
            };
            for col in &self.columns {
                if col.drop_missing() && is_missing(&row[col.source_index()]) {
                    continue 'rows;
                }
            }

            for col in &self.columns {
                let raw = row[col.source_index()].trim();
                match col {
                    FittedColumn::Numeric(c) => {
                        let value = if is_missing(raw) {
                            c.impute
                        } else {
                            match parse_numeric(raw) {
                                Some(v) => v,
                                None => {
                                    return Err(Error::Schema(format!(
                                        "column {:?} is numeric but row {i} contains {raw:?}",
                                        c.name
                                    )))
                                }
                            }
                        };
                        data.push(scale(value, c.min, c.max));
                    }
                    FittedColumn::Categorical(c) => {
                        let value = if is_missing(raw) {
                            c.mode.as_deref().unwrap_or("")
                        } else {
                            raw
                        };
                        // Unseen categories encode as all zeros.
                        let hit = c.vocab.binary_search(&value.to_string()).ok();
                        for k in 0..c.vocab.len() {
                            data.push(if hit == Some(k) { 1.0 } else { 0.0 });
                        }
                    }
                    FittedColumn::Date(c) => {
                        let date = if is_missing(raw) {
                            c.impute.as_deref().and_then(parse_date)
                        } else {
                            match parse_date(raw) {
                                Some(d) => Some(d),
                                None => {
                                    return Err(Error::Schema(format!(
                                        "column {:?} is a date but row {i} contains {raw:?}",
                                        c.name
                                    )))
                                }
                            }
                        };
                        match date {
                            Some(d) => {
                                let feats = date_features(d);
                                for (f, &(min, max)) in c.ranges.iter().enumerate() {
                                    data.push(scale(feats[f], min, max));
                                }
                            }
                            // No training dates existed either; emit
                            // neutral midpoints.
                            None => data.extend([0.0; 4]),
                        }
                    }
                }
            }
            kept_rows.push(i);
            if let (Some(ts), Some(v)) = (targets.as_mut(), target_value) {
                ts.push(v);
            }
        }

        if kept_rows.is_empty() {
            return Err(Error::InvalidInput(
                "no rows survived preprocessing".into(),
            ));
        }
        let features = Matrix::new(kept_rows.len(), self.feature_dim(), data)?;
        Ok(Transformed {
            features,
            kept_rows,
            targets,
            unseen_target_rows,
        })
    }

    /// Write the plan as versioned JSON; floats round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::ioutil::write_json(
            path,
            &PlanFile {
                format_version: PLAN_FORMAT_VERSION,
                plan: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PlanFile = crate::ioutil::read_json(path)?;
        if file.format_version != PLAN_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported plan format_version {} (expected {PLAN_FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(file.plan)
    }
}

/// Read an RFC-4180 CSV with a mandatory header row.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                Error::io(path, std::io::Error::other(e.to_string()))
            }
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|s| s.to_string())
        .collect();
    if header.is_empty() {
        return Err(Error::Schema(format!("{} has no header row", path.display())));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok((header, rows))
}

/// Index split produced by [`train_test_split`]. Indices are sorted
/// ascending within each side, so row order from the source file is
/// preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Whether per-class stratification was applied.
    pub stratified: bool,
    /// True when stratification was requested but impossible (some
    /// class has fewer than two rows) and the split fell back to
    /// unstratified.
    pub stratification_fallback: bool,
}

/// Deterministic train/test split. When `class_targets` is given the
/// split is stratified: each class contributes its proportional share
/// of test rows (largest-remainder apportionment, so each class is
/// within one row of its ideal share).
pub fn train_test_split(
    n_rows: usize,
    class_targets: Option<&[String]>,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitResult> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    if let Some(t) = class_targets {
        if t.len() != n_rows {
            return Err(Error::InvalidInput(format!(
                "{} targets for {n_rows} rows",
                t.len()
            )));
        }
    }
    let n_test = (n_rows as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n_rows {
        return Err(Error::InvalidInput(format!(
            "split of {n_rows} rows at fraction {test_fraction} leaves an empty side"
        )));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    let stratifiable = class_targets
        .map(|targets| {
            let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
            for t in targets {
                *counts.entry(t).or_insert(0) += 1;
            }
            counts.values().all(|&c| c >= 2)
        })
        .unwrap_or(false);

    let mut test_indices: Vec<usize>;
    if let (Some(targets), true) = (class_targets, stratifiable) {
        let mut by_class: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
        for (i, t) in targets.iter().enumerate() {
            by_class.entry(t).or_default().push(i);
        }
        // Largest-remainder apportionment of the test quota.
        let mut base_total = 0usize;
        let mut shares: Vec<(&String, usize, f64)> = Vec::new();
        for (class, members) in &by_class {
            let ideal = members.len() as f64 * n_test as f64 / n_rows as f64;
            let base = ideal.floor() as usize;
            base_total += base;
            shares.push((class, base, ideal - base.min(members.len()) as f64));
        }
        let mut remainder = n_test.saturating_sub(base_total);
        shares.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("finite remainders")
                .then_with(|| a.0.cmp(b.0))
        });
        let mut quota: BTreeMap<&String, usize> = BTreeMap::new();
        for (class, base, _) in &shares {
            let extra = if remainder > 0 {
                remainder -= 1;
                1
            } else {
                0
            };
            quota.insert(class, base + extra);
        }
        test_indices = Vec::with_capacity(n_test);
        for (class, members) in by_class.iter_mut() {
            members.shuffle(&mut rng);
            let take = quota[class].min(members.len().saturating_sub(1));
            test_indices.extend(members.iter().take(take));
        }
    } else {
        let mut all: Vec<usize> = (0..n_rows).collect();
        all.shuffle(&mut rng);
        test_indices = all.into_iter().take(n_test).collect();
    }

    test_indices.sort_unstable();
    let test_set: std::collections::BTreeSet<usize> = test_indices.iter().copied().collect();
    let train_indices: Vec<usize> = (0..n_rows).filter(|i| !test_set.contains(i)).collect();

    Ok(SplitResult {
        train_indices,
        test_indices,
        stratified: class_targets.is_some() && stratifiable,
        stratification_fallback: class_targets.is_some() && !stratifiable,
    })
}

/// Pick out the rows at `indices`.
pub fn select_rows(rows: &[Vec<String>], indices: &[usize]) -> Vec<Vec<String>> {
    indices.iter().map(|&i| rows[i].clone()).collect()
}
