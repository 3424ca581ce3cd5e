//! Fit a preprocessing plan on a messy CSV: schema inference,
//! missing-value handling, one-hot encoding, date expansion, and a
//! stratified split -- all without touching the CLI.
//!
//! Run with: cargo run --release --example preprocess_csv

use deepcae::preprocess::{
    infer_schema, select_rows, train_test_split, ColumnKind, PreprocessPlan,
};
use deepcae::Result;
use std::collections::BTreeMap;

fn main() -> Result<()> {
    // A small table with every column kind and some missing cells:
    // "" and "NA" and "?" all count as missing.
    let header: Vec<String> = ["weight", "color", "picked", "ripe"]
        .into_iter()
        .map(String::from)
        .collect();
    let raw = "\
        181,red,2021-09-14,yes\n\
        95,green,2021-08-02,no\n\
        NA,green,2021-08-19,no\n\
        172,red,2021-09-20,yes\n\
        110,?,2021-08-11,no\n\
        164,red,,yes\n\
        101,green,2021-07-30,no\n\
        179,red,2021-09-17,yes\n\
        93,yellow,2021-08-05,no\n\
        158,red,2021-09-09,yes\n";
    let rows: Vec<Vec<String>> = raw
        .lines()
        .map(|l| l.trim().split(',').map(String::from).collect())
        .collect();

    // Everything is inferred except the target designation.
    let mut overrides = BTreeMap::new();
    overrides.insert("ripe".to_string(), ColumnKind::Target);
    let schema = infer_schema(&header, &rows, &overrides)?;
    for column in &schema {
        println!("column {:<8} inferred as {:?}", column.name, column.kind);
    }

    // Split first, then fit on the training rows only, so nothing
    // about the held-out rows leaks into the statistics.
    let targets: Vec<String> = rows.iter().map(|r| r[3].clone()).collect();
    let split = train_test_split(rows.len(), Some(&targets), 0.3, 11)?;
    println!(
        "split: {} train / {} test rows (stratified: {})",
        split.train_indices.len(),
        split.test_indices.len(),
        split.stratified
    );

    let train_rows = select_rows(&rows, &split.train_indices);
    let test_rows = select_rows(&rows, &split.test_indices);
    let plan = PreprocessPlan::fit(&schema, &train_rows)?;
    println!("features: {:?}", plan.feature_names());

    let train = plan.transform(&train_rows)?;
    let test = plan.transform(&test_rows)?;
    println!(
        "transformed: {} train rows, {} test rows, {} feature columns",
        train.features.rows(),
        test.features.rows(),
        train.features.cols()
    );

    // Show what became of the first two training rows: numerics are
    // scaled to [-1, 1], colors are one-hot over the training
    // vocabulary, dates expand to scaled (year, month, day, weekday).
    for i in 0..2 {
        let encoded: Vec<String> = (0..train.features.cols())
            .map(|j| format!("{:+.2}", train.features.get(i, j)))
            .collect();
        println!(
            "row {:?} -> [{}] target {}",
            train_rows[train.kept_rows[i]].join(","),
            encoded.join(", "),
            train.targets.as_ref().expect("target column present")[i]
        );
    }
    Ok(())
}
