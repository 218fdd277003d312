//! The `VDPG` binary dataset container.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `VDPG`                            |
//! | 4      | 2    | format version (u16)                    |
//! | 6      | 4    | d (u32)                                 |
//! | 10     | 4    | l (u32)                                 |
//! | 14     | 8    | record count (u64)                      |
//! | 22     | 4    | class count (u32, 0 for regression)     |
//! | 26     | 1    | task (0 classification, 1 regression)   |
//! | 27     | 1    | storage (0 f32, 1 f64)                  |
//! | 28     | 4    | header checksum (SHA-256 of bytes 0..28, first 4 bytes) |
//!
//! Each record follows as `[domain u32][label 8 bytes][l·d floats]`. Class
//! labels are i64 with −1 meaning unlabeled; regression targets are f64 with
//! NaN meaning unlabeled.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::record::{Dataset, DatasetHeader, EmbeddingRecord, Label, Storage, Task, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VDPG";
pub const HEADER_LEN: usize = 32;

pub fn record_len(header: &DatasetHeader) -> usize {
    4 + 8 + header.l as usize * header.d as usize * header.storage.width()
}

pub(crate) fn checksum4(bytes: &[u8]) -> [u8; 4] {
    let digest = Sha256::digest(bytes);
    [digest[0], digest[1], digest[2], digest[3]]
}

fn encode_header(h: &DatasetHeader) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&h.format_version.to_le_bytes());
    out.extend_from_slice(&h.d.to_le_bytes());
    out.extend_from_slice(&h.l.to_le_bytes());
    out.extend_from_slice(&h.num_records.to_le_bytes());
    out.extend_from_slice(&h.num_classes.to_le_bytes());
    out.push(match h.task {
        Task::Classification => 0,
        Task::Regression => 1,
    });
    out.push(match h.storage {
        Storage::F32 => 0,
        Storage::F64 => 1,
    });
    let sum = checksum4(&out);
    out.extend_from_slice(&sum);
    out
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let h = &ds.header;
    let mut out = encode_header(h);
    out.reserve(record_len(h) * ds.records.len());
    for r in &ds.records {
        out.extend_from_slice(&r.domain_id.to_le_bytes());
        match (h.task, r.label) {
            (Task::Classification, Label::Class(c)) => {
                out.extend_from_slice(&(c as i64).to_le_bytes())
            }
            (Task::Classification, _) => out.extend_from_slice(&(-1i64).to_le_bytes()),
            (Task::Regression, Label::Value(v)) => out.extend_from_slice(&v.to_le_bytes()),
            (Task::Regression, _) => out.extend_from_slice(&f64::NAN.to_le_bytes()),
        }
        for &v in r.tokens.data() {
            match h.storage {
                Storage::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Storage::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<DatasetHeader> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = u16::from_le_bytes(c.array("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let d = u32::from_le_bytes(c.array("d")?);
    let l = u32::from_le_bytes(c.array("l")?);
    let num_records = u64::from_le_bytes(c.array("record count")?);
    let num_classes = u32::from_le_bytes(c.array("class count")?);
    let task = match c.take(1, "task")?[0] {
        0 => Task::Classification,
        1 => Task::Regression,
        t => return Err(Error::format(26, format!("unknown task tag {t}"))),
    };
    let storage = match c.take(1, "storage")?[0] {
        0 => Storage::F32,
        1 => Storage::F64,
        t => return Err(Error::format(27, format!("unknown storage tag {t}"))),
    };
    let stored = c.take(4, "header checksum")?;
    if stored != checksum4(&bytes[..28]) {
        return Err(Error::format(28, "header checksum mismatch"));
    }
    if d == 0 || l == 0 {
        return Err(Error::format(6, "d and l must be at least 1"));
    }
    Ok(DatasetHeader {
        format_version: version,
        d,
        l,
        num_records,
        num_classes,
        task,
        storage,
    })
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let header = decode_header(bytes)?;
    let rec_len = record_len(&header) as u64;
    let expected = HEADER_LEN as u64 + rec_len * header.num_records;
    if bytes.len() as u64 != expected {
        let offset = (bytes.len() as u64).min(expected);
        return Err(Error::format(
            offset,
            format!(
                "file holds {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let (l, d) = (header.l as usize, header.d as usize);
    let mut c = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let mut records = Vec::with_capacity(header.num_records as usize);
    for _ in 0..header.num_records {
        let start = c.pos as u64;
        let domain_id = u32::from_le_bytes(c.array("domain id")?);
        let raw: [u8; 8] = c.array("label")?;
        let label = match header.task {
            Task::Classification => match i64::from_le_bytes(raw) {
                -1 => Label::Unlabeled,
                v if v >= 0 && (v as u64) < header.num_classes as u64 => Label::Class(v as usize),
                v => return Err(Error::format(start + 4, format!("class label {v} out of range"))),
            },
            Task::Regression => {
                let v = f64::from_le_bytes(raw);
                if v.is_nan() {
                    Label::Unlabeled
                } else {
                    Label::Value(v)
                }
            }
        };
        let mut data = Vec::with_capacity(l * d);
        for _ in 0..l * d {
            data.push(match header.storage {
                Storage::F32 => f32::from_le_bytes(c.array("token")?) as f64,
                Storage::F64 => f64::from_le_bytes(c.array("token")?),
            });
        }
        records.push(EmbeddingRecord::new(domain_id, label, Tensor::matrix(l, d, data)?));
    }
    Ok(Dataset { header, records })
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let tokens = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -7.5]).unwrap();
        Dataset::new(
            DatasetHeader::classification(3, 2, 4),
            vec![EmbeddingRecord::new(7, Label::Class(3), tokens)],
        )
        .unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::new(DatasetHeader::classification(3, 2, 4), vec![]).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn single_record_byte_count() {
        let bytes = encode_dataset(&tiny()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 + 8 + 2 * 3 * 8);
        assert_eq!(decode_dataset(&bytes).unwrap(), tiny());
    }

    #[test]
    fn every_header_byte_is_protected() {
        let bytes = encode_dataset(&tiny()).unwrap();
        for i in 0..HEADER_LEN {
            let mut corrupt = bytes.clone();
            corrupt[i] ^= 0x01;
            assert!(decode_dataset(&corrupt).is_err(), "byte {i} not detected");
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&tiny()).unwrap();
        match decode_dataset(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            decode_dataset(&bytes[..10]),
            Err(Error::Format { offset: 10, .. })
        ));
    }

    #[test]
    fn regression_and_unlabeled_roundtrip() {
        let t = |v: f64| Tensor::matrix(1, 2, vec![v, -v]).unwrap();
        let ds = Dataset::new(
            DatasetHeader::regression(2, 1),
            vec![
                EmbeddingRecord::new(0, Label::Value(1.5), t(1.0)),
                EmbeddingRecord::new(1, Label::Unlabeled, t(2.0)),
            ],
        )
        .unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn f32_storage_roundtrips_in_stored_precision() {
        let mut ds = tiny();
        ds.header.storage = Storage::F32;
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 + 8 + 2 * 3 * 4);
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }
}
