//! `AUGS` binary embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "AUGS" | version u32 = 1 | space u8 | dimension u32 | count u64
//! count x ( id_len u16 | id utf-8 | identity u32 | camera u16 | source u8 | dimension x f32 )
//! ```

use std::fs;
use std::path::Path;

use super::{EmbeddingDataset, EmbeddingRecord, Source, Space, StoreError};

const MAGIC: &[u8; 4] = b"AUGS";
const VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn space_tag(space: Space) -> u8 {
    match space {
        Space::Consistency => 0,
        Space::Diversity => 1,
    }
}

fn source_tag(source: Source) -> u8 {
    match source {
        Source::Real => 0,
        Source::Generated => 1,
    }
}

/// Serializes a dataset. Vectors are narrowed to `f32`.
pub fn encode_binary(ds: &EmbeddingDataset) -> Result<Vec<u8>, StoreError> {
    let per_record = 2 + 4 + 2 + 1 + 4 * ds.dimension;
    let mut out = Vec::with_capacity(21 + ds.len() * (per_record + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(space_tag(ds.space));
    let dim = u32::try_from(ds.dimension)
        .map_err(|_| StoreError::MalformedHeader("dimension exceeds u32".into()))?;
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for r in &ds.records {
        let id = r.image_id.as_bytes();
        let len =
            u16::try_from(id.len()).map_err(|_| StoreError::ImageIdTooLong(r.image_id.clone()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&r.identity_id.to_le_bytes());
        out.extend_from_slice(&r.camera_id.to_le_bytes());
        out.push(source_tag(r.source));
        for &v in &r.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates a complete in-memory file image.
pub fn decode_binary(bytes: &[u8]) -> Result<EmbeddingDataset, StoreError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let header = |what: &str| StoreError::MalformedHeader(format!("truncated at {what}"));

    let magic = cur.take(4).ok_or_else(|| header("magic"))?;
    if magic != MAGIC {
        return Err(StoreError::MalformedHeader(format!(
            "bad magic {magic:02x?}"
        )));
    }
    let version = cur.u32().ok_or_else(|| header("version"))?;
    if version != VERSION {
        return Err(StoreError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let space = match cur.u8().ok_or_else(|| header("space tag"))? {
        0 => Space::Consistency,
        1 => Space::Diversity,
        t => {
            return Err(StoreError::MalformedHeader(format!(
                "unknown space tag {t}"
            )))
        }
    };
    let dimension = cur.u32().ok_or_else(|| header("dimension"))? as usize;
    if dimension == 0 {
        return Err(StoreError::ZeroDimension);
    }
    let declared = cur.u64().ok_or_else(|| header("record count"))?;

    // Every record needs at least this many bytes; caps the allocation on hostile counts.
    let min_record = 2 + 4 + 2 + 1 + 4 * dimension;
    let mut records = Vec::with_capacity((declared as usize).min(cur.remaining() / min_record));
    for index in 0..declared {
        if cur.remaining() == 0 {
            return Err(StoreError::RecordCountMismatch {
                declared,
                actual: index,
            });
        }
        let truncated = || StoreError::RecordCountMismatch {
            declared,
            actual: index,
        };
        let len = cur.u16().ok_or_else(truncated)? as usize;
        let id = cur.take(len).ok_or_else(truncated)?;
        let image_id = std::str::from_utf8(id)
            .map_err(|_| StoreError::MalformedRecord {
                index,
                reason: "image_id is not valid utf-8".into(),
            })?
            .to_string();
        let identity_id = cur.u32().ok_or_else(truncated)?;
        let camera_id = cur.u16().ok_or_else(truncated)?;
        let source = match cur.u8().ok_or_else(truncated)? {
            0 => Source::Real,
            1 => Source::Generated,
            t => {
                return Err(StoreError::MalformedRecord {
                    index,
                    reason: format!("unknown source tag {t}"),
                })
            }
        };
        let raw = cur.take(4 * dimension).ok_or_else(truncated)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push(EmbeddingRecord {
            image_id,
            identity_id,
            camera_id,
            source,
            vector,
        });
    }
    if cur.remaining() != 0 {
        return Err(StoreError::RecordCountMismatch {
            declared,
            actual: declared + 1,
        });
    }
    EmbeddingDataset::new(space, dimension, records)
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<EmbeddingDataset, StoreError> {
    decode_binary(&fs::read(path)?)
}

pub fn write_binary(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<(), StoreError> {
    fs::write(path, encode_binary(ds)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> EmbeddingDataset {
        let rec = |id: &str, identity, source, v: [f64; 4]| EmbeddingRecord {
            image_id: id.into(),
            identity_id: identity,
            camera_id: 3,
            source,
            vector: v.to_vec(),
        };
        EmbeddingDataset::new(
            Space::Diversity,
            4,
            vec![
                rec("a", 1, Source::Real, [0.5, -1.0, 2.25, 0.0]),
                rec("b", 1, Source::Generated, [1.0, 2.0, 3.0, 4.0]),
                rec("c", 2, Source::Real, [-0.125, 8.0, 0.0, 1.5]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn writer_then_reader() {
        let ds = sample();
        let back = decode_binary(&encode_binary(&ds).unwrap()).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.dimension(), 4);
        assert_eq!(back, ds);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_binary(&sample()).unwrap();
        assert_eq!(&bytes[0..4], b"AUGS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &4u32.to_le_bytes());
        assert_eq!(&bytes[13..21], &3u64.to_le_bytes());
        // first record: len 1, "a"
        assert_eq!(&bytes[21..24], &[1, 0, b'a']);
    }

    #[test]
    fn declared_count_larger_than_content() {
        let mut bytes = encode_binary(&sample()).unwrap();
        bytes[13..21].copy_from_slice(&5u64.to_le_bytes());
        let err = decode_binary(&bytes).unwrap_err();
        assert!(err.to_string().contains("record count mismatch"), "{err}");
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_binary(&sample()).unwrap();
        bytes[13..21].copy_from_slice(&2u64.to_le_bytes());
        assert!(matches!(
            decode_binary(&bytes),
            Err(StoreError::RecordCountMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_binary(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_binary(&bytes),
            Err(StoreError::MalformedHeader(_))
        ));
        let mut bytes = encode_binary(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode_binary(&bytes),
            Err(StoreError::MalformedHeader(_))
        ));
    }

    #[test]
    fn non_finite_float_rejected() {
        let mut bytes = encode_binary(&sample()).unwrap();
        // last component of the last record
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_binary(&bytes),
            Err(StoreError::NonFinite { .. })
        ));
    }

    proptest! {
        // Reading then writing any accepted file reproduces it byte for byte;
        // anything the reader accepts satisfies the dataset invariants.
        #[test]
        fn accepted_files_round_trip(
            byte_flips in proptest::collection::vec((0usize..200, any::<u8>()), 0..4),
            truncate in proptest::option::of(0usize..120),
        ) {
            let mut bytes = encode_binary(&sample()).unwrap();
            for (pos, val) in byte_flips {
                if pos < bytes.len() {
                    bytes[pos] = val;
                }
            }
            if let Some(t) = truncate {
                bytes.truncate(t.min(bytes.len()));
            }
            if let Ok(ds) = decode_binary(&bytes) {
                prop_assert!(ds.records().iter().all(|r| r.vector.len() == ds.dimension()
                    && r.vector.iter().all(|v| v.is_finite())));
                prop_assert_eq!(encode_binary(&ds).unwrap(), bytes);
            }
        }
    }
}
