//! Binary matrix files: magic `LDCM`, version `u16`, rows `u32`, cols `u32`
//! (all little-endian), then `rows·cols` row-major little-endian `f64`.
//! Labels live in an optional UTF-8 sidecar with one label per line.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

pub const MAGIC: [u8; 4] = *b"LDCM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

/// Serializes a matrix to the binary format.
pub fn encode_matrix(m: &DMatrix<f64>) -> io::Result<Vec<u8>> {
    let rows = u32::try_from(m.nrows()).map_err(|_| invalid("too many rows".into()))?;
    let cols = u32::try_from(m.ncols()).map_err(|_| invalid("too many columns".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the binary format; trailing or missing payload bytes are errors.
pub fn decode_matrix(bytes: &[u8]) -> io::Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(invalid(format!("file too short for header ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(invalid("bad magic, expected LDCM".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(invalid(format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| invalid("matrix size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(invalid(format!(
            "payload is {} bytes, expected {expected} for {rows}x{cols}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

/// Path of the label sidecar for `path`.
pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> io::Result<()> {
    let bytes = encode_matrix(m)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()
}

pub fn read_matrix(path: &Path) -> io::Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_matrix(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Writes a column vector as an `n x 1` matrix.
pub fn write_vector(path: &Path, v: &DVector<f64>) -> io::Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

/// Reads an `n x 1` or `1 x n` matrix as a vector.
pub fn read_vector(path: &Path) -> io::Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 && m.nrows() != 1 {
        return Err(invalid(format!(
            "{}: expected a vector, got {}x{}",
            path.display(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(DVector::from_iterator(m.len(), m.transpose().iter().copied()))
}

/// Writes the matrix and, if given, its label sidecar.
pub fn write_labeled(path: &Path, m: &DMatrix<f64>, labels: Option<&[String]>) -> io::Result<()> {
    write_matrix(path, m)?;
    if let Some(labels) = labels {
        if labels.iter().any(|l| l.contains('\n')) {
            return Err(invalid("labels must not contain newlines".into()));
        }
        let mut text = labels.join("\n");
        text.push('\n');
        fs::write(labels_path(path), text)?;
    }
    Ok(())
}

/// Reads the label sidecar of `path`, if present.
pub fn read_labels(path: &Path) -> io::Result<Option<Vec<String>>> {
    match fs::read_to_string(labels_path(path)) {
        Ok(text) => Ok(Some(text.lines().map(str::to_owned).collect())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// Fixed 17-significant-digit scientific formatting.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = encode_matrix(&m).unwrap();
        assert_eq!(&b[..4], b"LDCM");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[2, 0, 0, 0]);
        assert_eq!(&b[10..14], &[3, 0, 0, 0]);
        assert_eq!(b.len(), 14 + 48);
        // row-major: second value is m[(0, 1)]
        assert_eq!(&b[22..30], &2.0f64.to_le_bytes());
    }

    #[test]
    fn malformed_rejected() {
        let m = DMatrix::from_element(2, 2, 1.0);
        let mut b = encode_matrix(&m).unwrap();
        assert!(decode_matrix(&b[..10]).is_err());
        assert!(decode_matrix(&b[..b.len() - 1]).is_err());
        b.push(0);
        assert!(decode_matrix(&b).is_err());
        let mut bad = encode_matrix(&m).unwrap();
        bad[0] = b'X';
        assert!(decode_matrix(&bad).is_err());
        let mut ver = encode_matrix(&m).unwrap();
        ver[4] = 9;
        assert!(decode_matrix(&ver).is_err());
    }

    #[test]
    fn files_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ldcm");
        let v = DVector::from_vec(vec![-0.0, 1.5, f64::MIN_POSITIVE]);
        write_vector(&path, &v).unwrap();
        let back = read_vector(&path).unwrap();
        assert_eq!(back[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, v);
        assert_eq!(read_labels(&path).unwrap(), None);
        let labels = vec!["a".to_string(), "b c".to_string()];
        write_labeled(&path, &DMatrix::zeros(2, 1), Some(&labels)).unwrap();
        assert_eq!(read_labels(&path).unwrap(), Some(labels));
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(0.1).parse::<f64>().unwrap(), 0.1);
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(rows in 0usize..5, cols in 0usize..5, seed in proptest::collection::vec(any::<u64>(), 25)) {
            let m = DMatrix::from_fn(rows, cols, |r, c| {
                let x = f64::from_bits(seed[r * 5 + c]);
                if x.is_finite() { x } else { -0.0 }
            });
            let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
