//! Embedding datasets for the consistency and diversity feature spaces.
//!
//! A dataset is validated once at construction and is immutable afterwards,
//! so it can be shared freely between threads.

mod binary;
mod text;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binary::{decode_binary, encode_binary, read_binary, write_binary};
pub use text::{parse_text, read_text, render_text, write_text};

/// Which feature space a dataset was projected into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Consistency,
    Diversity,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Consistency => f.write_str("consistency"),
            Space::Diversity => f.write_str("diversity"),
        }
    }
}

/// Whether an image is a real capture or a generated augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Generated,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Real => f.write_str("real"),
            Source::Generated => f.write_str("generated"),
        }
    }
}

/// One image projected into one feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub identity_id: u32,
    pub camera_id: u16,
    pub source: Source,
    pub vector: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("record count mismatch: header declares {declared}, file contains {actual}")]
    RecordCountMismatch { declared: u64, actual: u64 },
    #[error("malformed record {index}: {reason}")]
    MalformedRecord { index: u64, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dataset dimension must be positive")]
    ZeroDimension,
    #[error("dimension mismatch for {image_id}: expected {expected}, found {found}")]
    DimensionMismatch {
        image_id: String,
        expected: usize,
        found: usize,
    },
    #[error("duplicate image_id {0}")]
    DuplicateImageId(String),
    #[error("non-finite component {component} in {image_id}")]
    NonFinite { image_id: String, component: usize },
    #[error("identity {0} has no real records")]
    NoRealRecords(u32),
    #[error("image_id {0:?} is too long for the binary format")]
    ImageIdTooLong(String),
    #[error("expected a {expected} dataset, found {found}")]
    SpaceMismatch { expected: Space, found: Space },
    #[error("image ids missing from one space: only in consistency {only_consistency:?}, only in diversity {only_diversity:?}")]
    UnmatchedImageIds {
        only_consistency: Vec<String>,
        only_diversity: Vec<String>,
    },
    #[error("metadata disagreement for {image_id}: {field} differs between spaces")]
    MetadataDisagreement {
        image_id: String,
        field: &'static str,
    },
}

/// On-disk encodings understood by [`load_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Binary,
    /// Text lines carry no header, so the space must be supplied.
    TextLines {
        space: Space,
    },
}

/// A validated, immutable set of embeddings in one space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    space: Space,
    dimension: usize,
    records: Vec<EmbeddingRecord>,
}

impl EmbeddingDataset {
    /// Validates every record invariant and the per-identity real-image requirement.
    pub fn new(
        space: Space,
        dimension: usize,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut identities = BTreeSet::new();
        let mut with_real = BTreeSet::new();
        for record in &records {
            if record.vector.len() != dimension {
                return Err(StoreError::DimensionMismatch {
                    image_id: record.image_id.clone(),
                    expected: dimension,
                    found: record.vector.len(),
                });
            }
            if let Some(component) = record.vector.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite {
                    image_id: record.image_id.clone(),
                    component,
                });
            }
            if !seen.insert(record.image_id.as_str()) {
                return Err(StoreError::DuplicateImageId(record.image_id.clone()));
            }
            identities.insert(record.identity_id);
            if record.source == Source::Real {
                with_real.insert(record.identity_id);
            }
        }
        if let Some(&missing) = identities.difference(&with_real).next() {
            return Err(StoreError::NoRealRecords(missing));
        }
        Ok(Self {
            space,
            dimension,
            records,
        })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn generated(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records
            .iter()
            .filter(|r| r.source == Source::Generated)
    }

    /// Image ids grouped by identity and source, in record order.
    pub fn pools(&self) -> (BTreeMap<u32, Vec<String>>, BTreeMap<u32, Vec<String>>) {
        let mut real: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        let mut generated: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for r in &self.records {
            let pool = match r.source {
                Source::Real => &mut real,
                Source::Generated => &mut generated,
            };
            pool.entry(r.identity_id)
                .or_default()
                .push(r.image_id.clone());
        }
        (real, generated)
    }
}

/// The two projections of the same image collection.
#[derive(Clone, Debug, PartialEq)]
pub struct SpacePair {
    consistency: EmbeddingDataset,
    diversity: EmbeddingDataset,
}

impl SpacePair {
    pub fn consistency(&self) -> &EmbeddingDataset {
        &self.consistency
    }

    pub fn diversity(&self) -> &EmbeddingDataset {
        &self.diversity
    }
}

/// Reads and validates a dataset file.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: Format,
) -> Result<EmbeddingDataset, StoreError> {
    match format {
        Format::Binary => read_binary(path),
        Format::TextLines { space } => read_text(path, space),
    }
}

/// Cross-checks two datasets image by image. Fails on the first kind of
/// inconsistency found: unmatched ids are all listed together.
pub fn align_spaces(
    consistency: EmbeddingDataset,
    diversity: EmbeddingDataset,
) -> Result<SpacePair, StoreError> {
    if consistency.space != Space::Consistency {
        return Err(StoreError::SpaceMismatch {
            expected: Space::Consistency,
            found: consistency.space,
        });
    }
    if diversity.space != Space::Diversity {
        return Err(StoreError::SpaceMismatch {
            expected: Space::Diversity,
            found: diversity.space,
        });
    }

    let by_id: BTreeMap<&str, &EmbeddingRecord> = diversity
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let consistency_ids: BTreeSet<&str> = consistency
        .records
        .iter()
        .map(|r| r.image_id.as_str())
        .collect();

    let only_consistency: Vec<String> = consistency_ids
        .iter()
        .filter(|id| !by_id.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    let only_diversity: Vec<String> = by_id
        .keys()
        .filter(|id| !consistency_ids.contains(*id))
        .map(|id| id.to_string())
        .collect();
    if !only_consistency.is_empty() || !only_diversity.is_empty() {
        return Err(StoreError::UnmatchedImageIds {
            only_consistency,
            only_diversity,
        });
    }

    for c in &consistency.records {
        let d = by_id[c.image_id.as_str()];
        let field = if c.identity_id != d.identity_id {
            Some("identity_id")
        } else if c.camera_id != d.camera_id {
            Some("camera_id")
        } else if c.source != d.source {
            Some("source")
        } else {
            None
        };
        if let Some(field) = field {
            return Err(StoreError::MetadataDisagreement {
                image_id: c.image_id.clone(),
                field,
            });
        }
    }

    Ok(SpacePair {
        consistency,
        diversity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(id: &str, identity: u32, source: Source, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: id.to_string(),
            identity_id: identity,
            camera_id: 0,
            source,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn rejects_identity_without_real() {
        let err = EmbeddingDataset::new(
            Space::Consistency,
            1,
            vec![
                rec("a", 0, Source::Real, &[0.0]),
                rec("b", 1, Source::Generated, &[0.0]),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, StoreError::NoRealRecords(1)));
    }

    #[test]
    fn rejects_duplicates_and_dimension() {
        let dup = EmbeddingDataset::new(
            Space::Consistency,
            1,
            vec![
                rec("a", 0, Source::Real, &[0.0]),
                rec("a", 0, Source::Real, &[1.0]),
            ],
        );
        assert!(matches!(dup, Err(StoreError::DuplicateImageId(_))));
        let dim = EmbeddingDataset::new(
            Space::Consistency,
            2,
            vec![rec("a", 0, Source::Real, &[0.0])],
        );
        assert!(matches!(dim, Err(StoreError::DimensionMismatch { .. })));
        let inf = EmbeddingDataset::new(
            Space::Consistency,
            1,
            vec![rec("a", 0, Source::Real, &[f64::INFINITY])],
        );
        assert!(matches!(inf, Err(StoreError::NonFinite { .. })));
    }

    fn pair_of(c: Vec<EmbeddingRecord>, d: Vec<EmbeddingRecord>) -> Result<SpacePair, StoreError> {
        align_spaces(
            EmbeddingDataset::new(Space::Consistency, 1, c).unwrap(),
            EmbeddingDataset::new(Space::Diversity, 1, d).unwrap(),
        )
    }

    #[test]
    fn align_matching_keys() {
        let c = vec![
            rec("r", 0, Source::Real, &[0.0]),
            rec("g", 0, Source::Generated, &[1.0]),
        ];
        let d = vec![
            rec("g", 0, Source::Generated, &[5.0]),
            rec("r", 0, Source::Real, &[2.0]),
        ];
        let pair = pair_of(c, d).unwrap();
        assert_eq!(pair.consistency().len(), 2);
    }

    #[test]
    fn align_lists_unmatched_id() {
        let c = vec![
            rec("r", 0, Source::Real, &[0.0]),
            rec("img_7", 0, Source::Generated, &[1.0]),
        ];
        let d = vec![rec("r", 0, Source::Real, &[2.0])];
        let err = pair_of(c, d).unwrap_err();
        assert!(err.to_string().contains("img_7"), "{err}");
    }

    #[test]
    fn align_detects_metadata_disagreement() {
        let c = vec![
            rec("r", 0, Source::Real, &[0.0]),
            rec("x", 0, Source::Real, &[1.0]),
        ];
        let d = vec![
            rec("r", 0, Source::Real, &[2.0]),
            rec("x", 0, Source::Generated, &[1.0]),
        ];
        let err = pair_of(c, d).unwrap_err();
        assert!(err.to_string().contains("metadata disagreement"), "{err}");
        assert!(matches!(
            err,
            StoreError::MetadataDisagreement {
                field: "source",
                ..
            }
        ));
    }

    #[test]
    fn align_checks_space_tags() {
        let c = EmbeddingDataset::new(Space::Diversity, 1, vec![rec("r", 0, Source::Real, &[0.0])])
            .unwrap();
        let d = c.clone();
        assert!(matches!(
            align_spaces(c, d),
            Err(StoreError::SpaceMismatch { .. })
        ));
    }
}
