//! Loading, validation, augmentation, scaling, and splitting of the
//! 4-node grid stability dataset.
//!
//! The CSV schema follows the public grid-stability layout: 14 columns
//! `tau1..tau4, p1..p4, g1..g4, stab, stabf` with `stabf` serialized as
//! the literal strings `stable` / `unstable`. Node 0 is the producer,
//! nodes 1–3 are consumers. Sign convention: `stab > 0` means unstable.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const N_FEATURES: usize = 12;

pub const FEATURE_NAMES: [&str; 12] = [
    "tau1", "tau2", "tau3", "tau4", "p1", "p2", "p3", "p4", "g1", "g2", "g3", "g4",
];

pub const CSV_HEADER: [&str; 14] = [
    "tau1", "tau2", "tau3", "tau4", "p1", "p2", "p3", "p4", "g1", "g2", "g3", "g4", "stab",
    "stabf",
];

/// Tolerance for the producer/consumer power balance check.
pub const BALANCE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("row {row}: field {field} out of range (value {value})")]
    RangeViolation { row: usize, field: String, value: f64 },
    #[error("row {row}: power balance violated (|sum| = {residual:.3e})")]
    BalanceViolation { row: usize, residual: f64 },
    #[error("row {row}: parse error: {msg}")]
    Parse { row: usize, msg: String },
    #[error("feature {0} has zero variance")]
    ZeroVariance(usize),
    #[error("split would leave an empty side")]
    EmptySplit,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Stable,
    Unstable,
}

impl Label {
    /// Class index; `Stable` is the lower index, used everywhere ties break low.
    pub fn index(self) -> usize {
        match self {
            Label::Stable => 0,
            Label::Unstable => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Stable
        } else {
            Label::Unstable
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Stable => "stable",
            Label::Unstable => "unstable",
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "stable" => Some(Label::Stable),
            "unstable" => Some(Label::Unstable),
            _ => None,
        }
    }
}

/// One observation of the 4-node grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    /// Reaction times, producer first.
    pub tau: [f64; 4],
    /// Node powers; `p[0]` is the producer (positive), `p[1..4]` consumers (negative).
    pub p: [f64; 4],
    /// Price-elasticity coefficients.
    pub g: [f64; 4],
    /// Continuous stability value; positive means unstable.
    pub stab: f64,
    pub stabf: Label,
}

impl GridRecord {
    /// Flatten to the 12 predictive features in column order
    /// (tau1..tau4, p1..p4, g1..g4).
    pub fn features(&self) -> [f64; 12] {
        let mut f = [0.0; 12];
        f[..4].copy_from_slice(&self.tau);
        f[4..8].copy_from_slice(&self.p);
        f[8..].copy_from_slice(&self.g);
        f
    }

    pub fn validate(&self, row: usize) -> Result<(), DataError> {
        for (i, &t) in self.tau.iter().enumerate() {
            if !(0.5..=10.0).contains(&t) {
                return Err(DataError::RangeViolation {
                    row,
                    field: format!("tau{}", i + 1),
                    value: t,
                });
            }
        }
        for i in 1..4 {
            if !(-2.0..=-0.5).contains(&self.p[i]) {
                return Err(DataError::RangeViolation {
                    row,
                    field: format!("p{}", i + 1),
                    value: self.p[i],
                });
            }
        }
        let residual = (self.p[0] + self.p[1] + self.p[2] + self.p[3]).abs();
        if residual > BALANCE_TOL {
            return Err(DataError::BalanceViolation { row, residual });
        }
        for (i, &gi) in self.g.iter().enumerate() {
            if !(0.05..=1.0).contains(&gi) {
                return Err(DataError::RangeViolation {
                    row,
                    field: format!("g{}", i + 1),
                    value: gi,
                });
            }
        }
        Ok(())
    }
}

/// An ordered collection of validated records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<GridRecord>,
}

impl Dataset {
    pub fn new(records: Vec<GridRecord>) -> Self {
        Dataset { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[GridRecord] {
        &self.records
    }

    /// N×12 feature matrix, row i being the flattening of record i.
    pub fn feature_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), N_FEATURES);
        for (i, r) in self.records.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&r.features());
        }
        m
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.stabf).collect()
    }

    /// Labels as 0/1 class indices (1 = unstable).
    pub fn label_indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.stabf.index()).collect()
    }

    pub fn stab_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.stab).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

/// Parse and validate the dataset CSV.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::SchemaMismatch(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::SchemaMismatch(e.to_string()))?
        .clone();
    if headers.len() != CSV_HEADER.len() {
        return Err(DataError::SchemaMismatch(format!(
            "expected {} columns, found {}",
            CSV_HEADER.len(),
            headers.len()
        )));
    }
    for (got, want) in headers.iter().zip(CSV_HEADER.iter()) {
        if got.trim() != *want {
            return Err(DataError::SchemaMismatch(format!(
                "expected column '{want}', found '{got}'"
            )));
        }
    }

    let mut records = Vec::new();
    for (row, result) in reader.records().enumerate() {
        let rec = result.map_err(|e| DataError::Parse { row, msg: e.to_string() })?;
        if rec.len() != 14 {
            return Err(DataError::SchemaMismatch(format!(
                "row {row}: expected 14 fields, found {}",
                rec.len()
            )));
        }
        let num = |idx: usize| -> Result<f64, DataError> {
            rec[idx].trim().parse::<f64>().map_err(|e| DataError::Parse {
                row,
                msg: format!("column {}: {e}", CSV_HEADER[idx]),
            })
        };
        let mut tau = [0.0; 4];
        let mut p = [0.0; 4];
        let mut g = [0.0; 4];
        for i in 0..4 {
            tau[i] = num(i)?;
            p[i] = num(4 + i)?;
            g[i] = num(8 + i)?;
        }
        let stab = num(12)?;
        let stabf = Label::parse(rec[13].trim()).ok_or_else(|| DataError::Parse {
            row,
            msg: format!("invalid stabf value '{}'", &rec[13]),
        })?;
        let record = GridRecord { tau, p, g, stab, stabf };
        record.validate(row)?;
        records.push(record);
    }
    Ok(Dataset::new(records))
}

/// Write a dataset in the same 14-column format `load_csv` reads.
///
/// Floats use the shortest round-trip representation, so
/// `load_csv(write_csv(ds)) == ds` bit-for-bit for finite values.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(io_err)?;
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for r in ds.records() {
        let mut fields: Vec<String> = Vec::with_capacity(14);
        for v in r.tau.iter().chain(r.p.iter()).chain(r.g.iter()) {
            fields.push(format!("{v}"));
        }
        fields.push(format!("{}", r.stab));
        fields.push(r.stabf.as_str().to_string());
        w.write_record(&fields).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> DataError {
    DataError::Parse { row: 0, msg: e.to_string() }
}

/// Count rows violating the convention `stabf = unstable ⇔ stab > 0`.
pub fn check_label_consistency(ds: &Dataset) -> usize {
    ds.records()
        .iter()
        .filter(|r| (r.stab > 0.0) != (r.stabf == Label::Unstable))
        .count()
}

/// The 6 permutations of the consumer slots {1,2,3}, identity first.
const CONSUMER_PERMUTATIONS: [[usize; 3]; 6] =
    [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];

/// 3!-augmentation: each row expands to 6 rows, one per joint permutation of
/// the consumer triples (tau, p, g). Producer fields, stab, and stabf are
/// untouched; the identity permutation comes first so output row 6i equals
/// input row i.
pub fn augment_permutations(ds: &Dataset) -> Dataset {
    let mut out = Vec::with_capacity(ds.len() * 6);
    for r in ds.records() {
        for perm in &CONSUMER_PERMUTATIONS {
            let mut nr = r.clone();
            for (slot, &src) in perm.iter().enumerate() {
                nr.tau[slot + 1] = r.tau[src];
                nr.p[slot + 1] = r.p[src];
                nr.g[slot + 1] = r.g[src];
            }
            out.push(nr);
        }
    }
    Dataset::new(out)
}

/// Per-feature standardization parameters (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn standardize_fit(x: &Matrix) -> Result<ScalerParams, DataError> {
    assert!(x.rows() >= 2, "standardize_fit needs at least 2 rows");
    let n = x.rows() as f64;
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for row in x.iter_rows() {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    let mut std = vec![0.0; d];
    for j in 0..d {
        let s = (var[j] / n).sqrt();
        if s <= 0.0 {
            return Err(DataError::ZeroVariance(j));
        }
        std[j] = s;
    }
    Ok(ScalerParams { mean, std })
}

/// Transform with stored parameters only; never refits.
pub fn standardize_apply(x: &Matrix, params: &ScalerParams) -> Matrix {
    assert_eq!(x.cols(), params.mean.len());
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for j in 0..row.len() {
            row[j] = (row[j] - params.mean[j]) / params.std[j];
        }
    }
    out
}

/// Compute stratified fold assignments: returns a fold id per row in 0..k.
/// Deterministic per seed; each class is shuffled then dealt round-robin.
pub fn stratified_folds(labels: &[Label], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; labels.len()];
    for class in [Label::Stable, Label::Unstable] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            assignment[i] = pos % k;
        }
    }
    assignment
}

/// Deterministic stratified train/test split. Row order within each side
/// follows the original dataset order.
pub fn split(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    assert!(test_fraction > 0.0 && test_fraction < 1.0, "fraction must be in (0,1)");
    let labels = ds.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = Vec::new();
    for class in [Label::Stable, Label::Unstable] {
        let mut idx: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test_idx.extend_from_slice(&idx[..n_test]);
    }
    if test_idx.is_empty() || test_idx.len() == ds.len() {
        return Err(DataError::EmptySplit);
    }
    test_idx.sort_unstable();
    let mut is_test = vec![false; ds.len()];
    for &i in &test_idx {
        is_test[i] = true;
    }
    let train_idx: Vec<usize> = (0..ds.len()).filter(|&i| !is_test[i]).collect();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample_record() -> GridRecord {
        GridRecord {
            tau: [2.0, 3.0, 4.0, 5.0],
            p: [3.3, -1.0, -1.1, -1.2],
            g: [0.2, 0.3, 0.4, 0.5],
            stab: 0.02,
            stabf: Label::Unstable,
        }
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = "tau1,tau2,tau3,tau4,p1,p2,p3,p4,g1,g2,g3,g4,stab,stabf\n";

    #[test]
    fn load_empty_file_with_header() {
        let f = write_temp(HEADER);
        let ds = load_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 0);
    }

    #[test]
    fn load_missing_file() {
        assert!(matches!(load_csv("/no/such/file.csv"), Err(DataError::MissingFile(_))));
    }

    #[test]
    fn load_rejects_out_of_range_tau() {
        let row = "11.0,3.0,4.0,5.0,3.3,-1.0,-1.1,-1.2,0.2,0.3,0.4,0.5,0.02,unstable\n";
        let err = load_csv(write_temp(&format!("{HEADER}{row}")).path()).unwrap_err();
        match err {
            DataError::RangeViolation { row, field, .. } => {
                assert_eq!(row, 0);
                assert_eq!(field, "tau1");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_rejects_wrong_header() {
        let bad = "tau1,tau2,tau3,tau4,p1,p2,p3,p4,g1,g2,g3,g4,stab,label\n";
        assert!(matches!(load_csv(write_temp(bad).path()), Err(DataError::SchemaMismatch(_))));
    }

    #[test]
    fn load_rejects_unbalanced_power() {
        let row = "2.0,3.0,4.0,5.0,3.0,-1.0,-1.1,-1.2,0.2,0.3,0.4,0.5,0.02,unstable\n";
        assert!(matches!(
            load_csv(write_temp(&format!("{HEADER}{row}")).path()),
            Err(DataError::BalanceViolation { row: 0, .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut r1 = sample_record();
        r1.tau[0] = 2.0 + 1e-13; // exercise shortest round-trip formatting
        let mut r2 = sample_record();
        r2.stab = -0.0123456789012345;
        r2.stabf = Label::Stable;
        let ds = Dataset::new(vec![r1, r2]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&ds, f.path()).unwrap();
        let loaded = load_csv(f.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn label_consistency_counts() {
        let mut stable_ok = sample_record();
        stable_ok.stab = -0.01;
        stable_ok.stabf = Label::Stable;
        let mut mismatched = sample_record();
        mismatched.stab = 0.05;
        mismatched.stabf = Label::Stable;
        assert_eq!(check_label_consistency(&Dataset::new(vec![stable_ok.clone()])), 0);
        assert_eq!(check_label_consistency(&Dataset::new(vec![mismatched])), 1);
        assert_eq!(check_label_consistency(&Dataset::new(vec![sample_record()])), 0);
    }

    #[test]
    fn augmentation_expands_sixfold_with_identity_first() {
        let ds = Dataset::new(vec![sample_record()]);
        let aug = augment_permutations(&ds);
        assert_eq!(aug.len(), 6);
        assert_eq!(aug.records()[0], ds.records()[0]);
        // Hand-enumerated permutations of consumer slots for the sample record:
        // consumers are (tau,p,g) triples t=(3,4,5), p=(-1.0,-1.1,-1.2), g=(.3,.4,.5).
        let expected_taus = [
            [3.0, 4.0, 5.0],
            [3.0, 5.0, 4.0],
            [4.0, 3.0, 5.0],
            [4.0, 5.0, 3.0],
            [5.0, 3.0, 4.0],
            [5.0, 4.0, 3.0],
        ];
        for (rec, want) in aug.records().iter().zip(expected_taus.iter()) {
            assert_eq!(&rec.tau[1..4], want);
            assert_eq!(rec.tau[0], 2.0);
            assert_eq!(rec.stab, 0.02);
            assert_eq!(rec.stabf, Label::Unstable);
        }
        // Joint permutation: p and g move with tau.
        assert_eq!(aug.records()[1].p[1..4], [-1.0, -1.2, -1.1]);
        assert_eq!(aug.records()[1].g[1..4], [0.3, 0.5, 0.4]);
    }

    #[test]
    fn augmentation_identical_consumers_yields_identical_rows() {
        let mut r = sample_record();
        r.tau = [2.0, 3.0, 3.0, 3.0];
        r.p = [3.3, -1.1, -1.1, -1.1];
        r.g = [0.2, 0.3, 0.3, 0.3];
        let aug = augment_permutations(&Dataset::new(vec![r.clone()]));
        assert_eq!(aug.len(), 6);
        for rec in aug.records() {
            assert_eq!(rec, &r);
        }
    }

    #[test]
    fn standardize_forced_arithmetic() {
        let x = Matrix::from_rows(&[vec![0.0], vec![2.0]]);
        let params = standardize_fit(&x).unwrap();
        assert_eq!(params.mean[0], 1.0);
        assert_eq!(params.std[0], 1.0); // population convention
        let t = standardize_apply(&x, &params);
        assert_eq!(t.row(0), &[-1.0]);
        assert_eq!(t.row(1), &[1.0]);
        // test-set transform uses train-set params only
        let test = standardize_apply(&Matrix::from_rows(&[vec![4.0]]), &params);
        assert_eq!(test.row(0), &[3.0]);
    }

    #[test]
    fn standardize_zero_variance_rejected() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0]]);
        assert!(matches!(standardize_fit(&x), Err(DataError::ZeroVariance(1))));
    }

    #[test]
    fn standardize_identity_on_already_standardized() {
        let x = Matrix::from_rows(&[vec![-1.0], vec![1.0]]);
        let params = standardize_fit(&x).unwrap();
        let t = standardize_apply(&x, &params);
        assert!((t.get(0, 0) + 1.0).abs() < 1e-9);
        assert!((t.get(1, 0) - 1.0).abs() < 1e-9);
    }

    fn labeled_dataset(n_stable: usize, n_unstable: usize) -> Dataset {
        let mut records = Vec::new();
        for i in 0..(n_stable + n_unstable) {
            let mut r = sample_record();
            r.tau[0] = 1.0 + 0.01 * i as f64;
            if i < n_stable {
                r.stab = -0.01;
                r.stabf = Label::Stable;
            }
            records.push(r);
        }
        Dataset::new(records)
    }

    #[test]
    fn split_is_deterministic_and_stratified() {
        let ds = labeled_dataset(6, 4);
        let (tr1, te1) = split(&ds, 0.5, 42).unwrap();
        let (tr2, te2) = split(&ds, 0.5, 42).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
        let count = |d: &Dataset, l: Label| d.labels().iter().filter(|&&x| x == l).count();
        assert_eq!(count(&te1, Label::Stable), 3);
        assert_eq!(count(&te1, Label::Unstable), 2);
        assert_eq!(tr1.len() + te1.len(), ds.len());
    }

    #[test]
    fn split_sizes() {
        let ds = labeled_dataset(60, 40);
        let (tr, te) = split(&ds, 0.2, 7).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(te.len(), 20);
    }

    #[test]
    fn split_rejects_empty_side() {
        let ds = labeled_dataset(1, 1);
        assert!(matches!(split(&ds, 0.01, 1), Err(DataError::EmptySplit)));
    }
}
