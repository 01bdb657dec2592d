//! Dataset representation, CSV ingestion, and the subgroup partition used
//! throughout the pipeline.
//!
//! The on-disk format is a UTF-8 CSV with header `id,y,z,x0,...,x{d-1}`:
//! one row per sample, an opaque unique `id`, a non-negative integer
//! target label `y`, a binary spurious label `z`, and `d` finite real
//! covariates. Row numbers in error messages count data rows from 1; the
//! header is row 0.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::util::fmt_g17;

/// An immutable feature dataset: covariates `X` (N x d), target labels
/// `y` in `[0, K)`, and a binary spurious attribute `z`.
///
/// `z = 1` is called the treatment group and `z = 0` the control group.
#[derive(Debug, Clone)]
pub struct Dataset {
    ids: Vec<String>,
    x: Array2<f64>,
    y: Vec<usize>,
    z: Vec<u8>,
    n_classes: usize,
    id_to_row: HashMap<String, usize>,
}

impl Dataset {
    /// Build a dataset from parts, validating every invariant. The number
    /// of classes is inferred as `max(y) + 1`.
    pub fn new(ids: Vec<String>, x: Array2<f64>, y: Vec<usize>, z: Vec<u8>) -> Result<Self> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Invalid("dataset must contain at least one sample".into()));
        }
        if x.nrows() != n || y.len() != n || z.len() != n {
            return Err(Error::Invalid(format!(
                "inconsistent lengths: {} ids, {} covariate rows, {} labels, {} attributes",
                n,
                x.nrows(),
                y.len(),
                z.len()
            )));
        }
        if x.ncols() == 0 {
            return Err(Error::Invalid("dataset must have at least one covariate".into()));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite covariate value {v}")));
        }
        if let Some(bad) = z.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("spurious label {bad} outside {{0,1}}")));
        }
        let mut id_to_row = HashMap::with_capacity(n);
        for (row, id) in ids.iter().enumerate() {
            if id_to_row.insert(id.clone(), row).is_some() {
                return Err(Error::Invalid(format!("duplicate id `{id}`")));
            }
        }
        let n_classes = y.iter().copied().max().unwrap_or(0) + 1;
        Ok(Dataset { ids, x, y, z, n_classes, id_to_row })
    }

    /// Parse a dataset from a CSV file. Errors carry the 1-based data row
    /// number where the problem was found.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::header(path, format!("{other:?}")),
            })?;

        let mut records = reader.records();
        let header = match records.next() {
            Some(Ok(rec)) => rec,
            Some(Err(e)) => return Err(Error::header(path, e.to_string())),
            None => return Err(Error::header(path, "empty file")),
        };
        let d = validate_header(path, &header)?;

        let mut ids = Vec::new();
        let mut y = Vec::new();
        let mut z = Vec::new();
        let mut flat = Vec::new();
        let mut id_seen: HashMap<String, usize> = HashMap::new();

        for (i, rec) in records.enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| Error::row(path, row, e.to_string()))?;
            if rec.len() != d + 3 {
                return Err(Error::row(
                    path,
                    row,
                    format!("expected {} fields, found {}", d + 3, rec.len()),
                ));
            }
            let id = rec[0].to_string();
            if let Some(prev) = id_seen.insert(id.clone(), row) {
                return Err(Error::row(
                    path,
                    row,
                    format!("duplicate id `{id}` (first seen on row {prev})"),
                ));
            }
            let y_val: usize = rec[1]
                .parse()
                .map_err(|_| Error::row(path, row, format!("y value `{}` is not a non-negative integer", &rec[1])))?;
            let z_val: u8 = match &rec[2] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::row(path, row, format!("z value `{other}` outside {{0,1}}")));
                }
            };
            for j in 0..d {
                let raw = &rec[3 + j];
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::row(path, row, format!("x{j} value `{raw}` is not a real number")))?;
                if !v.is_finite() {
                    return Err(Error::row(path, row, format!("x{j} value `{raw}` is not finite")));
                }
                flat.push(v);
            }
            ids.push(id);
            y.push(y_val);
            z.push(z_val);
        }

        if ids.is_empty() {
            return Err(Error::header(path, "no data rows"));
        }
        let n = ids.len();
        let x = Array2::from_shape_vec((n, d), flat).expect("shape follows from the parse loop");
        Dataset::new(ids, x, y, z)
    }

    /// Write the dataset back to CSV. Covariates are rendered with 17
    /// significant digits so a reload reproduces the exact bit patterns.
    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
        let mut header = vec!["id".to_string(), "y".to_string(), "z".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        writer
            .write_record(&header)
            .and_then(|_| {
                for row in 0..self.len() {
                    let mut rec = vec![
                        self.ids[row].clone(),
                        self.y[row].to_string(),
                        self.z[row].to_string(),
                    ];
                    rec.extend(self.x.row(row).iter().map(|v| fmt_g17(*v)));
                    writer.write_record(&rec)?;
                }
                writer.flush().map_err(csv::Error::from)
            })
            .map_err(|e| Error::format(path, e))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of covariate columns.
    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Number of target classes, inferred as `max(y) + 1`.
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    /// Row index of a sample id, if present.
    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.id_to_row.get(id).copied()
    }

    /// Row indices of the samples with the given spurious value, in file order.
    pub fn rows_with_z(&self, z: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.z[i] == z).collect()
    }

    /// True when both spurious values occur.
    pub fn has_both_groups(&self) -> bool {
        self.z.contains(&0) && self.z.contains(&1)
    }
}

fn validate_header(path: &Path, header: &csv::StringRecord) -> Result<usize> {
    if header.len() < 4 {
        return Err(Error::header(
            path,
            format!("expected `id,y,z,x0,...`, found {} fields", header.len()),
        ));
    }
    for (pos, expected) in [(0, "id"), (1, "y"), (2, "z")] {
        if &header[pos] != expected {
            return Err(Error::header(
                path,
                format!("field {pos} must be `{expected}`, found `{}`", &header[pos]),
            ));
        }
    }
    let d = header.len() - 3;
    for j in 0..d {
        let expected = format!("x{j}");
        if header[3 + j] != expected {
            return Err(Error::header(
                path,
                format!("field {} must be `{expected}`, found `{}`", 3 + j, &header[3 + j]),
            ));
        }
    }
    Ok(d)
}

/// Partition of the dataset rows by the `(y, z)` subgroup.
///
/// Cells that do not occur in the data are logically present with size 0;
/// only non-empty cells are stored.
#[derive(Debug, Clone)]
pub struct SubgroupIndex {
    n_classes: usize,
    groups: std::collections::BTreeMap<(usize, u8), Vec<usize>>,
}

impl SubgroupIndex {
    pub fn build(ds: &Dataset) -> Self {
        let mut groups: std::collections::BTreeMap<(usize, u8), Vec<usize>> =
            std::collections::BTreeMap::new();
        for row in 0..ds.len() {
            groups.entry((ds.y()[row], ds.z()[row])).or_default().push(row);
        }
        SubgroupIndex { n_classes: ds.n_classes(), groups }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Size of the `(y, z)` cell; 0 for cells with no sample.
    pub fn size(&self, y: usize, z: u8) -> usize {
        self.groups.get(&(y, z)).map_or(0, Vec::len)
    }

    /// Row indices in the `(y, z)` cell, in file order.
    pub fn indices(&self, y: usize, z: u8) -> &[usize] {
        self.groups.get(&(y, z)).map_or(&[], Vec::as_slice)
    }

    /// Iterate over the non-empty cells in `(y, z)` order.
    pub fn nonempty(&self) -> impl Iterator<Item = ((usize, u8), &[usize])> {
        self.groups.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sum of all cell sizes; equals the dataset length by construction.
    pub fn total(&self) -> usize {
        self.groups.values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_minimal_file() {
        let f = write_tmp("id,y,z,x0\na,0,0,1.0\nb,0,1,2.0\n");
        let ds = Dataset::from_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.n_classes(), 1);
        assert_eq!(ds.z(), &[0, 1]);
        assert_eq!(ds.x()[[1, 0]], 2.0);
    }

    #[test]
    fn accepts_crlf() {
        let f = write_tmp("id,y,z,x0\r\na,0,0,1.0\r\nb,1,1,2.0\r\n");
        let ds = Dataset::from_csv(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.n_classes(), 2);
    }

    #[test]
    fn duplicate_id_names_row() {
        let f = write_tmp("id,y,z,x0\na,0,0,1.0\na,0,1,2.0\n");
        let err = Dataset::from_csv(f.path()).unwrap_err();
        match err {
            Error::Row { row, ref msg, .. } => {
                assert_eq!(row, 2);
                assert!(msg.contains("duplicate id `a`"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn z_out_of_domain_names_row() {
        let f = write_tmp("id,y,z,x0\na,0,0,1.0\nb,0,1,2.0\nc,0,2,3.0\n");
        let err = Dataset::from_csv(f.path()).unwrap_err();
        match err {
            Error::Row { row, ref msg, .. } => {
                assert_eq!(row, 3);
                assert!(msg.contains("outside {0,1}"), "{msg}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn rejects_non_finite_covariate() {
        let f = write_tmp("id,y,z,x0\na,0,0,inf\n");
        assert!(matches!(Dataset::from_csv(f.path()), Err(Error::Row { row: 1, .. })));
    }

    #[test]
    fn rejects_bad_header_and_missing_file() {
        let f = write_tmp("id,y,w,x0\na,0,0,1.0\n");
        assert!(matches!(Dataset::from_csv(f.path()), Err(Error::Header { .. })));
        assert!(matches!(Dataset::from_csv("/nonexistent/ds.csv"), Err(Error::Io { .. })));
    }

    #[test]
    fn rejects_field_count_mismatch() {
        let f = write_tmp("id,y,z,x0,x1\na,0,0,1.0\n");
        assert!(matches!(Dataset::from_csv(f.path()), Err(Error::Row { row: 1, .. })));
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ds = Dataset::new(
            vec!["a".into(), "b".into(), "c".into()],
            array![[0.1, f64::MIN_POSITIVE], [1.0 / 3.0, -0.0], [1e300, 2.5]],
            vec![0, 1, 2],
            vec![0, 1, 0],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        ds.to_csv(f.path()).unwrap();
        let back = Dataset::from_csv(f.path()).unwrap();
        assert_eq!(back.ids(), ds.ids());
        assert_eq!(back.y(), ds.y());
        assert_eq!(back.z(), ds.z());
        for (a, b) in ds.x().iter().zip(back.x().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn subgroup_index_singletons() {
        let ds = Dataset::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            array![[0.0], [0.0], [0.0], [0.0]],
            vec![0, 0, 1, 1],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let idx = SubgroupIndex::build(&ds);
        for (y, z) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(idx.size(y, z), 1);
        }
        assert_eq!(idx.total(), 4);
    }

    #[test]
    fn subgroup_index_degenerate_cell() {
        let ds = Dataset::new(
            vec!["a".into(), "b".into()],
            array![[0.0], [0.0]],
            vec![0, 0],
            vec![1, 1],
        )
        .unwrap();
        let idx = SubgroupIndex::build(&ds);
        assert_eq!(idx.size(0, 1), 2);
        assert_eq!(idx.size(0, 0), 0);
        assert!(idx.indices(0, 0).is_empty());
    }

    #[test]
    fn subgroup_index_counts_by_enumeration() {
        // Oracle: count (y, z) pairs directly.
        let y = vec![0, 0, 0, 1, 1, 1];
        let z = vec![0u8, 0, 1, 0, 1, 1];
        let mut expected = std::collections::BTreeMap::new();
        for (a, b) in y.iter().zip(z.iter()) {
            *expected.entry((*a, *b)).or_insert(0usize) += 1;
        }
        let ds = Dataset::new(
            (0..6).map(|i| format!("s{i}")).collect(),
            Array2::zeros((6, 1)),
            y,
            z,
        )
        .unwrap();
        let idx = SubgroupIndex::build(&ds);
        assert_eq!(idx.size(0, 0), expected[&(0, 0)]);
        assert_eq!(idx.size(0, 1), expected[&(0, 1)]);
        assert_eq!(idx.size(1, 0), expected[&(1, 0)]);
        assert_eq!(idx.size(1, 1), expected[&(1, 1)]);
        assert_eq!((idx.size(0, 0), idx.size(0, 1), idx.size(1, 0), idx.size(1, 1)), (2, 1, 1, 2));
    }
}
