//! Binary matrix files and their JSON sidecars.
//!
//! Layout (all little-endian): bytes 0-3 magic `WLSD`, 4-7 version `u32` (=1),
//! 8-15 row count `u64`, 16-23 column count `u64`, then `rows*cols` binary64
//! values in row-major order. A sidecar lives next to each file under the
//! same name with `.meta.json` appended.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{ParameterVector, SnapshotMatrix, TimeGrid};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WLSD";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    buf
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt(format!("dimensions {rows}x{cols} overflow")))?;
    if bytes.len() != expected {
        return Err(fmt(format!(
            "payload holds {} bytes, {rows}x{cols} needs {}",
            bytes.len() - HEADER_LEN,
            expected - HEADER_LEN
        )));
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap())),
    ))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_matrix(m))?;
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_matrix(&bytes, path)
}

pub fn write_sidecar<T: Serialize>(path: &Path, meta: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(&mut w, meta)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_sidecar<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let side = sidecar_path(path);
    let file = File::open(&side)?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
        path: side,
        reason: e.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    t_final: f64,
    steps: u64,
    mu: Option<Vec<f64>>,
}

pub fn write_snapshot(snapshots: &SnapshotMatrix, path: &Path) -> Result<()> {
    write_matrix(path, snapshots.data())?;
    let meta = SnapshotMeta {
        t_final: snapshots.grid().t_final(),
        steps: snapshots.grid().steps() as u64,
        mu: snapshots.mu().map(|m| m.as_slice().to_vec()),
    };
    write_sidecar(path, &meta)
}

pub fn read_snapshot(path: &Path) -> Result<SnapshotMatrix> {
    let data = read_matrix(path)?;
    let meta: SnapshotMeta = read_sidecar(path)?;
    let consistency = |reason: String| Error::Consistency {
        path: path.to_path_buf(),
        reason,
    };
    let grid = TimeGrid::new(meta.t_final, meta.steps as usize)
        .map_err(|e| consistency(e.to_string()))?;
    if data.nrows() != grid.len() {
        return Err(consistency(format!(
            "matrix has {} rows but sidecar declares {} steps",
            data.nrows(),
            meta.steps
        )));
    }
    let mu = meta.mu.map(ParameterVector::new).transpose()?;
    SnapshotMatrix::new(data, grid, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SnapshotMatrix {
        let data = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let grid = TimeGrid::new(0.5, 1).unwrap();
        let mu = ParameterVector::new(vec![0.7, 1.1]).unwrap();
        SnapshotMatrix::new(data, grid, Some(mu)).unwrap()
    }

    #[test]
    fn round_trip_small_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.bin");
        let s = small();
        write_snapshot(&s, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = read_snapshot(&path).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn header_layout_is_exact() {
        let bytes = encode_matrix(small().data());
        assert_eq!(&bytes[0..4], b"WLSD");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        // row-major: second value is (0, 1) = 1.0
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 24 + 6 * 8);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = encode_matrix(small().data());
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_version_and_truncation_are_format_errors() {
        let p = Path::new("mem");
        let mut bytes = encode_matrix(small().data());
        bytes[4] = 2;
        assert!(matches!(decode_matrix(&bytes, p), Err(Error::Format { .. })));
        let bytes = encode_matrix(small().data());
        assert!(matches!(
            decode_matrix(&bytes[..bytes.len() - 1], p),
            Err(Error::Format { .. })
        ));
        assert!(matches!(decode_matrix(&bytes[..10], p), Err(Error::Format { .. })));
    }

    #[test]
    fn sidecar_dimension_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.bin");
        write_snapshot(&small(), &path).unwrap();
        let meta = SnapshotMeta {
            t_final: 1.0,
            steps: 5,
            mu: None,
        };
        write_sidecar(&path, &meta).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Consistency { .. })));
    }

    proptest! {
        #[test]
        fn matrix_round_trip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-1e300f64..1e300, 36),
        ) {
            let m = DMatrix::from_fn(rows, cols, |i, j| seed[i * 6 + j]);
            let back = decode_matrix(&encode_matrix(&m), Path::new("mem")).unwrap();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                m.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
