//! Embedded datasets and their two on-disk formats.
//!
//! Delimited text is a comma-separated file with a header row
//! `id,f0,..,f{d-1}[,p0,..,p{C-1}]`. A label column may carry a class name as
//! `p3:truck`; either every label column is named or none is.
//!
//! Packed binary is little-endian:
//!
//! ```text
//! magic "SSDS" | version u32 = 1
//! n u64 | d u64 | C u64 | flags u64   (bit 0: truth present, bit 1: class names present)
//! n x (u32 byte length, utf-8 id)
//! n*d f64 features, row-major
//! n*C f64 soft labels, row-major          (if bit 0)
//! C x (u32 byte length, utf-8 class name) (if bit 1)
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

const MAGIC: &[u8; 4] = b"SSDS";
const VERSION: u32 = 1;
const FLAG_TRUTH: u64 = 1;
const FLAG_CLASS_NAMES: u64 = 2;

/// Rows whose sum is off by more than this are rejected.
pub const LABEL_SUM_REJECT: f64 = 1e-6;
/// Rows whose sum is off by more than this (but within the reject bound) are renormalized.
const LABEL_SUM_EXACT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    DelimitedText,
    PackedBinary,
}

impl DatasetFormat {
    /// `.bin`/`.ssds` map to packed binary, anything else to delimited text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("ssds") => DatasetFormat::PackedBinary,
            _ => DatasetFormat::DelimitedText,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" | "text" | "delimited-text" => Ok(DatasetFormat::DelimitedText),
            "bin" | "binary" | "packed-binary" => Ok(DatasetFormat::PackedBinary),
            other => Err(Error::InvalidArgument(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Points in an embedding space, optionally with ground-truth soft labels.
///
/// Immutable once constructed; every constructor validates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedDataset {
    ids: Vec<String>,
    features: RowMatrix,
    truth: Option<RowMatrix>,
    class_names: Option<Vec<String>>,
}

impl EmbeddedDataset {
    pub fn new(
        ids: Vec<String>,
        features: RowMatrix,
        truth: Option<RowMatrix>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Validation {
                row: 0,
                message: "dataset has no points".into(),
            });
        }
        if features.cols() == 0 {
            return Err(Error::Validation {
                row: 0,
                message: "feature dimension is zero".into(),
            });
        }
        if ids.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} ids"),
                actual: format!("{} ids", ids.len()),
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for (row, id) in ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation {
                    row,
                    message: format!("duplicate id '{id}'"),
                });
            }
        }
        for (row, values) in features.iter_rows().enumerate() {
            if let Some(col) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation {
                    row,
                    message: format!("non-finite feature in column {col}"),
                });
            }
        }
        let truth = match truth {
            Some(t) => Some(validate_truth(t, n)?),
            None => None,
        };
        if let Some(names) = &class_names {
            let classes = truth.as_ref().map(|t| t.cols());
            if names.len() < 2 || classes.is_some_and(|c| c != names.len()) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} class names", classes.unwrap_or(2)),
                    actual: format!("{}", names.len()),
                });
            }
        }
        Ok(Self {
            ids,
            features,
            truth,
            class_names,
        })
    }

    /// Dataset with ids `0..n` and no labels.
    pub fn from_features(features: RowMatrix) -> Result<Self> {
        let ids = (0..features.rows()).map(|i| i.to_string()).collect();
        Self::new(ids, features, None, None)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> &RowMatrix {
        &self.features
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn truth(&self) -> Option<&RowMatrix> {
        self.truth.as_ref()
    }

    /// Number of classes when labels or class names are present.
    pub fn classes(&self) -> Option<usize> {
        self.truth
            .as_ref()
            .map(RowMatrix::cols)
            .or_else(|| self.class_names.as_ref().map(Vec::len))
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

fn validate_truth(mut truth: RowMatrix, n: usize) -> Result<RowMatrix> {
    if truth.rows() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} label rows"),
            actual: format!("{}", truth.rows()),
        });
    }
    if truth.cols() < 2 {
        return Err(Error::Validation {
            row: 0,
            message: format!("soft labels need at least 2 classes, got {}", truth.cols()),
        });
    }
    for row in 0..n {
        let values = truth.row_mut(row);
        if let Some(col) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation {
                row,
                message: format!("soft label in column {col} is negative or non-finite"),
            });
        }
        let sum: f64 = values.iter().sum();
        let deviation = (sum - 1.0).abs();
        if deviation > LABEL_SUM_REJECT {
            return Err(Error::Validation {
                row,
                message: format!("soft label row sums to {sum}, expected 1"),
            });
        }
        if deviation > LABEL_SUM_EXACT {
            values.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Ok(truth)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<EmbeddedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        DatasetFormat::DelimitedText => read_delimited(reader),
        DatasetFormat::PackedBinary => read_packed(reader).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(path, source),
            other => other,
        }),
    }
}

pub fn save_dataset(dataset: &EmbeddedDataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    match format {
        DatasetFormat::DelimitedText => write_delimited(dataset, &mut writer),
        DatasetFormat::PackedBinary => write_packed(dataset, &mut writer),
    }
    .map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    writer.flush().map_err(|e| Error::io(path, e))
}

struct Header {
    dim: usize,
    classes: usize,
    class_names: Option<Vec<String>>,
}

fn parse_header(record: &csv::StringRecord) -> Result<Header> {
    let bad = |message: String| Error::Parse { row: 0, message };
    let mut fields = record.iter();
    match fields.next() {
        Some("id") => {}
        other => return Err(bad(format!("first header column must be 'id', got {other:?}"))),
    }
    let mut dim = 0;
    let mut names = Vec::new();
    let mut classes = 0;
    for field in fields {
        if let Some(idx) = field.strip_prefix('f') {
            if classes > 0 || idx.parse::<usize>() != Ok(dim) {
                return Err(bad(format!("unexpected feature column '{field}'")));
            }
            dim += 1;
        } else if let Some(rest) = field.strip_prefix('p') {
            let (idx, name) = match rest.split_once(':') {
                Some((idx, name)) => (idx, Some(name.to_string())),
                None => (rest, None),
            };
            if idx.parse::<usize>() != Ok(classes) {
                return Err(bad(format!("unexpected label column '{field}'")));
            }
            names.push(name);
            classes += 1;
        } else {
            return Err(bad(format!("unrecognized column '{field}'")));
        }
    }
    if dim == 0 {
        return Err(bad("no feature columns".into()));
    }
    let named = names.iter().filter(|n| n.is_some()).count();
    let class_names = if named == 0 {
        None
    } else if named == names.len() {
        Some(names.into_iter().flatten().collect())
    } else {
        return Err(bad("either all or none of the label columns must be named".into()));
    };
    Ok(Header {
        dim,
        classes,
        class_names,
    })
}

fn read_delimited<R: Read>(reader: R) -> Result<EmbeddedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let header = parse_header(&header)?;
    let width = 1 + header.dim + header.classes;

    let mut ids = Vec::new();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        ids.push(record[0].to_string());
        for (col, field) in record.iter().enumerate().skip(1) {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {col}: cannot parse '{field}' as a number"),
            })?;
            if col <= header.dim {
                features.push(value);
            } else {
                labels.push(value);
            }
        }
    }
    let n = ids.len();
    let features = RowMatrix::from_vec(n, header.dim, features)?;
    let truth = if header.classes > 0 {
        Some(RowMatrix::from_vec(n, header.classes, labels)?)
    } else {
        None
    };
    EmbeddedDataset::new(ids, features, truth, header.class_names)
}

fn write_delimited<W: Write>(dataset: &EmbeddedDataset, writer: W) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io("", io),
        other => Error::Unsupported(format!("{other:?}")),
    };
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    if let Some(truth) = dataset.truth() {
        match dataset.class_names() {
            Some(names) => header.extend(names.iter().enumerate().map(|(c, name)| format!("p{c}:{name}"))),
            None => header.extend((0..truth.cols()).map(|c| format!("p{c}"))),
        }
    }
    wtr.write_record(&header).map_err(to_err)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..dataset.len() {
        record.clear();
        record.push(dataset.ids()[i].clone());
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        record.extend(dataset.point(i).iter().map(|v| format!("{v}")));
        if let Some(truth) = dataset.truth() {
            record.extend(truth.row(i).iter().map(|v| format!("{v}")));
        }
        wtr.write_record(&record).map_err(to_err)?;
    }
    wtr.flush().map_err(|e| Error::io("", e))
}

fn write_packed<W: Write>(dataset: &EmbeddedDataset, mut w: W) -> Result<()> {
    let io = |e| Error::io("", e);
    let classes = dataset.truth().map_or(0, RowMatrix::cols);
    let mut flags = 0;
    if dataset.truth().is_some() {
        flags |= FLAG_TRUTH;
    }
    if dataset.class_names().is_some() {
        flags |= FLAG_CLASS_NAMES;
    }
    let header_classes = dataset.classes().unwrap_or(classes);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    for v in [dataset.len() as u64, dataset.dim() as u64, header_classes as u64, flags] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for id in dataset.ids() {
        write_str(&mut w, id)?;
    }
    for v in dataset.features().as_slice() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    if let Some(truth) = dataset.truth() {
        for v in truth.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    if let Some(names) = dataset.class_names() {
        for name in names {
            write_str(&mut w, name)?;
        }
    }
    Ok(())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::InvalidArgument("string too long".into()))?;
    w.write_all(&len.to_le_bytes()).map_err(|e| Error::io("", e))?;
    w.write_all(s.as_bytes()).map_err(|e| Error::io("", e))
}

fn read_packed<R: Read>(mut r: R) -> Result<EmbeddedDataset> {
    let truncated = |what: &str| Error::Parse {
        row: 0,
        message: format!("truncated packed file while reading {what}"),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            row: 0,
            message: "bad magic bytes".into(),
        });
    }
    let version = read_u32(&mut r).map_err(|_| truncated("version"))?;
    if version != VERSION {
        return Err(Error::Parse {
            row: 0,
            message: format!("unsupported version {version}"),
        });
    }
    let mut header = [0u64; 4];
    for h in header.iter_mut() {
        *h = read_u64(&mut r).map_err(|_| truncated("header"))?;
    }
    let [n, d, classes, flags] = header.map(|v| v as usize);
    let flags = flags as u64;
    if flags & !(FLAG_TRUTH | FLAG_CLASS_NAMES) != 0 {
        return Err(Error::Parse {
            row: 0,
            message: format!("unknown flags {flags:#x}"),
        });
    }
    let mut ids = Vec::with_capacity(n.min(1 << 20));
    for row in 0..n {
        ids.push(read_string(&mut r).map_err(|_| Error::Parse {
            row,
            message: "truncated or invalid id".into(),
        })?);
    }
    let features = read_f64s(&mut r, n * d).map_err(|_| truncated("features"))?;
    let features = RowMatrix::from_vec(n, d, features)?;
    let truth = if flags & FLAG_TRUTH != 0 {
        let values = read_f64s(&mut r, n * classes).map_err(|_| truncated("soft labels"))?;
        Some(RowMatrix::from_vec(n, classes, values)?)
    } else {
        None
    };
    let class_names = if flags & FLAG_CLASS_NAMES != 0 {
        let mut names = Vec::with_capacity(classes);
        for _ in 0..classes {
            names.push(read_string(&mut r).map_err(|_| truncated("class names"))?);
        }
        Some(names)
    } else {
        None
    };
    EmbeddedDataset::new(ids, features, truth, class_names)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EmbeddedDataset> {
        read_delimited(text.as_bytes())
    }

    #[test]
    fn three_rows_without_labels() {
        let ds = parse("id,f0,f1\na,0,1\nb,2,3\nc,4,5\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert!(ds.truth().is_none());
        assert_eq!(ds.point(2), &[4.0, 5.0]);
        assert_eq!(ds.ids(), &["a", "b", "c"]);
    }

    #[test]
    fn label_row_summing_to_point_eight_is_rejected() {
        let err = parse("id,f0,p0,p1\na,0,0.5,0.5\nb,1,0.4,0.4\n").unwrap_err();
        match err {
            Error::Validation { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn near_stochastic_rows_are_renormalized() {
        let ds = parse("id,f0,p0,p1\na,0,0.5000004,0.5\n").unwrap();
        let row = ds.truth().unwrap().row(0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_column_count_reports_row() {
        let err = parse("id,f0,f1\na,0,1\nb,2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 1, .. }), "{err:?}");
    }

    #[test]
    fn malformed_number() {
        let err = parse("id,f0\na,zero\n").unwrap_err();
        assert!(matches!(err, Error::Parse { row: 0, .. }));
    }

    #[test]
    fn non_finite_and_duplicates() {
        assert!(matches!(
            parse("id,f0\na,1\nb,inf\n").unwrap_err(),
            Error::Validation { row: 1, .. }
        ));
        assert!(matches!(
            parse("id,f0\na,1\na,2\n").unwrap_err(),
            Error::Validation { row: 1, .. }
        ));
    }

    #[test]
    fn header_must_start_with_id() {
        assert!(parse("f0,id\n1,a\n").is_err());
        assert!(parse("id\na\n").is_err());
        assert!(parse("id,f0,p0:cat,p1\na,1,0.5,0.5\n").is_err());
    }

    #[test]
    fn class_names_in_header() {
        let ds = parse("id,f0,p0:cat,p1:dog\na,1,0.25,0.75\n").unwrap();
        assert_eq!(ds.class_names().unwrap(), &["cat", "dog"]);
        assert_eq!(ds.classes(), Some(2));
    }

    #[test]
    fn packed_rejects_garbage() {
        assert!(read_packed(&b"NOPE\x01\0\0\0"[..]).is_err());
        let mut bytes = Vec::new();
        let ds = EmbeddedDataset::from_features(RowMatrix::from_rows(&[[1.0], [2.0]]).unwrap()).unwrap();
        write_packed(&ds, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read_packed(&bytes[..]).is_err());
    }

    #[test]
    fn single_point_dataset_writes_one_data_row() {
        let ds = EmbeddedDataset::from_features(RowMatrix::from_rows(&[[0.5, -1.0]]).unwrap()).unwrap();
        let mut out = Vec::new();
        write_delimited(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "id,f0,f1\n0,0.5,-1\n");
    }
}
