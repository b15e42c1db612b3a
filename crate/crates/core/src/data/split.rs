use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Number of seen classes the COCO ∩ OpenImages-segmentation intersection
/// is expected to produce.
pub const OPENIMAGES_EXPECTED_SEEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Voc,
    Coco,
    Refcoco,
    Openimages,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Membership {
    Seen,
    Unseen,
}

/// Case-fold, trim and collapse internal whitespace.
pub fn normalize_class_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Disjoint seen/unseen partition of a dataset's class names.
///
/// Names are stored normalized; lookups normalize their argument.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSplit")]
pub struct ClassSplit {
    pub dataset_name: DatasetName,
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

#[derive(Deserialize)]
struct RawSplit {
    dataset_name: DatasetName,
    seen: Vec<String>,
    unseen: Vec<String>,
}

impl TryFrom<RawSplit> for ClassSplit {
    type Error = DataError;

    fn try_from(raw: RawSplit) -> Result<Self, Self::Error> {
        ClassSplit::new(raw.dataset_name, raw.seen, raw.unseen)
    }
}

impl ClassSplit {
    pub fn new<S, U>(dataset_name: DatasetName, seen: S, unseen: U) -> Result<Self, DataError>
    where
        S: IntoIterator,
        S::Item: AsRef<str>,
        U: IntoIterator,
        U::Item: AsRef<str>,
    {
        let seen: BTreeSet<String> = seen.into_iter().map(|s| normalize_class_name(s.as_ref())).collect();
        let unseen: BTreeSet<String> =
            unseen.into_iter().map(|s| normalize_class_name(s.as_ref())).collect();
        let overlap: Vec<String> = seen.intersection(&unseen).cloned().collect();
        if !overlap.is_empty() {
            return Err(DataError::OverlappingSplit(overlap));
        }
        Ok(ClassSplit { dataset_name, seen, unseen })
    }

    /// Every class seen: the fully supervised setting.
    pub fn all_seen<I>(dataset_name: DatasetName, classes: I) -> Self
    where
        I: IntoIterator,
        I::Item: AsRef<str>,
    {
        ClassSplit::new(dataset_name, classes, std::iter::empty::<&str>()).expect("no unseen classes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// One of the split files shipped in `splits/`.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "voc" | "voc_5seen" => include_str!("../../../../splits/voc_5seen.json"),
            "voc_15seen" => include_str!("../../../../splits/voc_15seen.json"),
            "coco" => include_str!("../../../../splits/coco.json"),
            "refcoco" => include_str!("../../../../splits/refcoco.json"),
            "openimages" => include_str!("../../../../splits/openimages.json"),
            _ => return None,
        };
        Some(serde_json::from_str(text).expect("shipped split files are valid"))
    }

    pub fn classify(&self, class_name: &str) -> Result<Membership, DataError> {
        let key = normalize_class_name(class_name);
        if self.seen.contains(&key) {
            Ok(Membership::Seen)
        } else if self.unseen.contains(&key) {
            Ok(Membership::Unseen)
        } else {
            Err(DataError::UnknownClass { name: class_name.to_string(), nearest: self.nearest(&key, 3) })
        }
    }

    pub fn is_seen(&self, class_name: &str) -> bool {
        self.seen.contains(&normalize_class_name(class_name))
    }

    /// Check that every dataset class is covered by exactly one side.
    pub fn check_covers<I>(&self, classes: I) -> Result<(), DataError>
    where
        I: IntoIterator,
        I::Item: AsRef<str>,
    {
        let missing: BTreeSet<String> = classes
            .into_iter()
            .map(|c| normalize_class_name(c.as_ref()))
            .filter(|c| !self.seen.contains(c) && !self.unseen.contains(c))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(DataError::UncoveredClasses(missing.into_iter().collect()))
        }
    }

    fn nearest(&self, key: &str, k: usize) -> Vec<String> {
        let mut scored: Vec<(usize, &String)> = self
            .seen
            .iter()
            .chain(self.unseen.iter())
            .map(|c| (strsim::levenshtein(key, c), c))
            .collect();
        scored.sort();
        scored.into_iter().take(k).map(|(_, c)| c.clone()).collect()
    }
}

/// Seen = COCO ∩ OpenImages (after normalization), unseen = the rest of
/// the OpenImages classes.
pub fn build_openimages_split<C, O>(coco_classes: C, oi_classes: O) -> Result<ClassSplit, DataError>
where
    C: IntoIterator,
    C::Item: AsRef<str>,
    O: IntoIterator,
    O::Item: AsRef<str>,
{
    let coco: BTreeSet<String> = coco_classes.into_iter().map(|c| normalize_class_name(c.as_ref())).collect();
    let oi: BTreeSet<String> = oi_classes.into_iter().map(|c| normalize_class_name(c.as_ref())).collect();
    if coco.is_empty() {
        return Err(DataError::EmptyClassList("COCO"));
    }
    if oi.is_empty() {
        return Err(DataError::EmptyClassList("OpenImages"));
    }
    let seen: BTreeSet<String> = coco.intersection(&oi).cloned().collect();
    if seen.is_empty() {
        return Err(DataError::EmptySeenSet);
    }
    let unseen: Vec<String> = oi.difference(&seen).cloned().collect();
    ClassSplit::new(DatasetName::Openimages, seen, unseen)
}

/// Outcome of building the OpenImages split, with enough detail to explain
/// a seen-class count that differs from the expected 64.
#[derive(Clone, Debug, Serialize)]
pub struct OpenImagesSplitReport {
    pub normalization: &'static str,
    pub coco_count: usize,
    pub openimages_count: usize,
    pub seen_count: usize,
    pub expected_seen: usize,
    pub matches_expected: bool,
    pub seen: Vec<String>,
    /// COCO names with no exact normalized counterpart in the OpenImages list.
    pub coco_unmatched: Vec<String>,
}

pub fn openimages_split_report<C, O>(coco_classes: C, oi_classes: O) -> Result<OpenImagesSplitReport, DataError>
where
    C: IntoIterator,
    C::Item: AsRef<str>,
    O: IntoIterator,
    O::Item: AsRef<str>,
{
    let coco: BTreeSet<String> = coco_classes.into_iter().map(|c| normalize_class_name(c.as_ref())).collect();
    let oi: Vec<String> = oi_classes.into_iter().map(|c| c.as_ref().to_string()).collect();
    let split = build_openimages_split(coco.iter(), oi.iter())?;
    Ok(OpenImagesSplitReport {
        normalization: "case-fold, trim, collapse internal whitespace; no stemming or synonyms",
        coco_count: coco.len(),
        openimages_count: split.seen.len() + split.unseen.len(),
        seen_count: split.seen.len(),
        expected_seen: OPENIMAGES_EXPECTED_SEEN,
        matches_expected: split.seen.len() == OPENIMAGES_EXPECTED_SEEN,
        seen: split.seen.iter().cloned().collect(),
        coco_unmatched: coco.difference(&split.seen).cloned().collect(),
    })
}
