//! IDX and CSV ingestion.

use std::path::Path;

use super::{DataError, Dataset};
use crate::nn::Tensor;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

/// Parsed IDX header and payload (unsigned-byte data only).
struct Idx<'a> {
    dims: Vec<usize>,
    data: &'a [u8],
}

fn parse_idx<'a>(path: &Path, bytes: &'a [u8]) -> Result<Idx<'a>, DataError> {
    let bad =
        |offset: usize, msg: String| DataError::Malformed { path: path.to_path_buf(), offset: offset as u64, msg };
    if bytes.len() < 4 {
        return Err(bad(bytes.len(), "truncated magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad(0, "magic number must start with two zero bytes".into()));
    }
    if bytes[2] != 0x08 {
        return Err(bad(2, format!("unsupported element type 0x{:02x} (only unsigned bytes)", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(bad(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(bad(bytes.len(), format!("truncated header: expected {ndim} dimensions")));
    }
    let dims: Vec<usize> =
        (0..ndim).map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize).collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(bad(
            header + payload.len().min(expected),
            format!("payload has {} bytes, dimensions {dims:?} need {expected}", payload.len()),
        ));
    }
    Ok(Idx { dims, data: payload })
}

/// Loads an IDX image file `(K, H, W)` or `(K, H, W, C)` with its label file
/// `(K)`. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read(images)?;
    let lbl_bytes = read(labels)?;
    let img = parse_idx(images, &img_bytes)?;
    let lbl = parse_idx(labels, &lbl_bytes)?;
    let shape = match img.dims.as_slice() {
        &[k, h, w] => vec![k, h, w, 1],
        &[k, h, w, c] => vec![k, h, w, c],
        other => {
            return Err(DataError::Malformed {
                path: images.to_path_buf(),
                offset: 3,
                msg: format!("image file must have 3 or 4 dimensions, got {other:?}"),
            })
        }
    };
    if lbl.dims.len() != 1 || lbl.dims[0] != shape[0] {
        return Err(DataError::Malformed {
            path: labels.to_path_buf(),
            offset: 4,
            msg: format!("label dimensions {:?} do not match {} images", lbl.dims, shape[0]),
        });
    }
    let labels: Vec<usize> = lbl.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let inputs = Tensor::new(shape, img.data.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|e| DataError::Argument(e.to_string()))?;
    Dataset::new(inputs, labels, classes)
}

/// Loads `label,p0,p1,...` rows. Values above 1 mark a 0–255 file, which is
/// rescaled to `[0, 1]`. Square pixel counts become `(s, s, 1)` images, other
/// widths `(1, P, 1)`.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let cell_err = |row: u64, column: &str, msg: String| DataError::BadCell {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        msg,
    };
    let headers = reader.headers().map_err(|e| cell_err(1, "", e.to_string()))?.clone();
    if headers.get(0).map(str::trim) != Some("label") {
        return Err(cell_err(1, headers.get(0).unwrap_or(""), "first header must be 'label'".into()));
    }
    let width = headers.len() - 1;
    if width == 0 {
        return Err(cell_err(1, "", "no pixel columns".into()));
    }
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i as u64 + 2;
        let record = record.map_err(|e| cell_err(row, "", e.to_string()))?;
        if record.len() != headers.len() {
            return Err(cell_err(row, "", format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        let label = record[0]
            .trim()
            .parse::<usize>()
            .map_err(|_| cell_err(row, "label", format!("'{}' is not a class index", &record[0])))?;
        labels.push(label);
        for (j, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| cell_err(row, &headers[j], format!("'{cell}' is not a number")))?;
            if !(0.0..=255.0).contains(&v) {
                return Err(cell_err(row, &headers[j], format!("{v} outside 0..=255")));
            }
            values.push(v);
        }
    }
    if labels.is_empty() {
        return Err(cell_err(2, "", "no data rows".into()));
    }
    if values.iter().any(|&v| v > 1.0) {
        values.iter_mut().for_each(|v| *v /= 255.0);
    }
    let side = (width as f64).sqrt().round() as usize;
    let sample = if side * side == width { vec![side, side, 1] } else { vec![1, width, 1] };
    let mut shape = vec![labels.len()];
    shape.extend(sample);
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let inputs = Tensor::new(shape, values).map_err(|e| DataError::Argument(e.to_string()))?;
    Dataset::new(inputs, labels, classes)
}

/// Writes a dataset in the `label,p0,...` layout read by [`load_csv`].
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let io_err = |e: csv::Error| DataError::Io { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    let width = ds.inputs().row_len();
    let mut header = vec!["label".to_string()];
    header.extend((0..width).map(|j| format!("p{j}")));
    w.write_record(&header).map_err(io_err)?;
    for (row, &y) in ds.inputs().rows().zip(ds.labels()) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io_err)?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}
