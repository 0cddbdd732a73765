//! Whitespace-separated text fixtures: `image_id identity camera real|fake v1 .. vD`.
//!
//! Blank lines and lines starting with `#` are ignored. The dimension is
//! taken from the first record.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EmbeddingDataset, EmbeddingRecord, Source, Space, StoreError};

pub fn parse_text(input: &str, space: Space) -> Result<EmbeddingDataset, StoreError> {
    let mut records = Vec::new();
    let mut dimension = None;
    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |reason: String| StoreError::Parse {
            line: line_no,
            reason,
        };
        let mut tokens = trimmed.split_whitespace();
        let image_id = tokens.next().unwrap().to_string();
        let identity_id = tokens
            .next()
            .ok_or_else(|| err("missing identity_id".into()))?
            .parse::<u32>()
            .map_err(|e| err(format!("identity_id: {e}")))?;
        let camera_id = tokens
            .next()
            .ok_or_else(|| err("missing camera_id".into()))?
            .parse::<u16>()
            .map_err(|e| err(format!("camera_id: {e}")))?;
        let source = match tokens.next() {
            Some("real") => Source::Real,
            Some("fake") => Source::Generated,
            Some(other) => return Err(err(format!("source must be real or fake, got {other:?}"))),
            None => return Err(err("missing source".into())),
        };
        let vector = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| err(format!("component {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dim = *dimension.get_or_insert(vector.len());
        if vector.len() != dim {
            return Err(StoreError::DimensionMismatch {
                image_id,
                expected: dim,
                found: vector.len(),
            });
        }
        records.push(EmbeddingRecord {
            image_id,
            identity_id,
            camera_id,
            source,
            vector,
        });
    }
    EmbeddingDataset::new(space, dimension.unwrap_or(0), records)
}

pub fn read_text(path: impl AsRef<Path>, space: Space) -> Result<EmbeddingDataset, StoreError> {
    parse_text(&fs::read_to_string(path)?, space)
}

pub fn render_text(ds: &EmbeddingDataset) -> String {
    let mut out = String::new();
    for r in ds.records() {
        let source = match r.source {
            Source::Real => "real",
            Source::Generated => "fake",
        };
        write!(
            out,
            "{} {} {} {}",
            r.image_id, r.identity_id, r.camera_id, source
        )
        .unwrap();
        for v in &r.vector {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_text(ds: &EmbeddingDataset, path: impl AsRef<Path>) -> Result<(), StoreError> {
    fs::write(path, render_text(ds))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_fixture() {
        let ds = parse_text(
            "# fixture\nr0 1 0 real 0 0\n\nr1 1 2 real 2 2\ng0 1 1 fake 1.5 -3e-1\n",
            Space::Consistency,
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dimension(), 2);
        assert_eq!(ds.records()[2].source, Source::Generated);
        assert_eq!(ds.records()[2].vector, vec![1.5, -0.3]);
        let again = parse_text(&render_text(&ds), Space::Consistency).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn nan_token_is_non_finite() {
        let err = parse_text("r0 1 0 real 0 NaN\n", Space::Diversity).unwrap_err();
        assert!(err.to_string().contains("non-finite component"), "{err}");
    }

    #[test]
    fn bad_source_and_ragged_rows() {
        assert!(matches!(
            parse_text("r0 1 0 gan 0\n", Space::Diversity),
            Err(StoreError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_text("r0 1 0 real 0 1\nr1 1 0 real 0\n", Space::Diversity),
            Err(StoreError::DimensionMismatch { .. })
        ));
    }
}
