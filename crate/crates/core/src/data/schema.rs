use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BoundingBox;
use crate::error::DatasetError;

pub const NO_RELATIONSHIP: &str = "no relationship";

/// Input layout and prediction target of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Subject and object only; the model classifies the predicate.
    #[serde(rename = "doublet-vrd")]
    DoubletVrd,
    /// Subject, predicate and object; the model decides true/false.
    #[serde(rename = "triplet-binary")]
    TripletBinary,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vrd" | "doublet" | "doublet-vrd" => Ok(Mode::DoubletVrd),
            "binary" | "triplet" | "triplet-binary" => Ok(Mode::TripletBinary),
            other => Err(format!("unknown mode '{other}' (expected vrd or binary)")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DoubletVrd => "doublet-vrd",
            Mode::TripletBinary => "triplet-binary",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectInstance {
    pub cls: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default = "default_depth")]
    pub depth: f64,
}

fn default_depth() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relation {
    pub s: usize,
    pub p: String,
    pub o: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectInstance>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub mode: Mode,
    /// In doublet mode, entry 0 is `"no relationship"`.
    pub predicates: Vec<String>,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_version: Option<String>,
    pub splits: Splits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A validated manifest together with its records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ImageRecord>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    /// Validates every invariant; records keep their given order.
    pub fn new(manifest: DatasetManifest, records: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        validate_manifest(&manifest)?;
        let predicates: HashSet<&str> = manifest.predicates.iter().map(String::as_str).collect();
        let classes: HashSet<&str> = manifest.classes.iter().map(String::as_str).collect();
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.image_id, i).is_some() {
                return Err(DatasetError::DuplicateImage {
                    record: r.image_id.to_string(),
                });
            }
            validate_record(r, manifest.mode, &predicates, &classes)?;
        }
        let mut seen = HashSet::new();
        for id in manifest.splits.train.iter().chain(&manifest.splits.test) {
            if !index.contains_key(id) {
                return Err(DatasetError::Manifest(format!("split lists unknown image {id}")));
            }
            if !seen.insert(*id) {
                return Err(DatasetError::Manifest(format!(
                    "image {id} appears in more than one split"
                )));
            }
        }
        Ok(Self {
            manifest,
            records,
            index,
        })
    }

    pub fn mode(&self) -> Mode {
        self.manifest.mode
    }

    pub fn record(&self, image_id: u64) -> Option<&ImageRecord> {
        self.index.get(&image_id).map(|&i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        let ids = match split {
            Split::Train => &self.manifest.splits.train,
            Split::Test => &self.manifest.splits.test,
        };
        ids.iter().map(|id| &self.records[self.index[id]]).collect()
    }

    pub fn predicate_index(&self, label: &str) -> Option<usize> {
        self.manifest.predicates.iter().position(|p| p == label)
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.manifest.classes.iter().position(|c| c == label)
    }

    /// Every class and predicate label, for vocabulary construction.
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.manifest
            .classes
            .iter()
            .chain(&self.manifest.predicates)
            .map(String::as_str)
    }
}

fn validate_manifest(m: &DatasetManifest) -> Result<(), DatasetError> {
    if m.classes.is_empty() {
        return Err(DatasetError::Manifest("empty class list".into()));
    }
    if m.predicates.is_empty() {
        return Err(DatasetError::Manifest("empty predicate list".into()));
    }
    if m.mode == Mode::DoubletVrd && m.predicates[0] != NO_RELATIONSHIP {
        return Err(DatasetError::Manifest(format!(
            "doublet mode requires '{NO_RELATIONSHIP}' as predicate 0"
        )));
    }
    let unique: HashSet<&String> = m.predicates.iter().collect();
    if unique.len() != m.predicates.len() {
        return Err(DatasetError::Manifest("duplicate predicate".into()));
    }
    let unique: HashSet<&String> = m.classes.iter().collect();
    if unique.len() != m.classes.len() {
        return Err(DatasetError::Manifest("duplicate class".into()));
    }
    Ok(())
}

fn validate_record(
    r: &ImageRecord,
    mode: Mode,
    predicates: &HashSet<&str>,
    classes: &HashSet<&str>,
) -> Result<(), DatasetError> {
    let record = || r.image_id.to_string();
    for o in &r.objects {
        if !classes.contains(o.cls.as_str()) {
            return Err(DatasetError::UnknownClass {
                record: record(),
                class: o.cls.clone(),
            });
        }
        if !o.bbox.is_valid_in(r.width as f64, r.height as f64) {
            return Err(DatasetError::MalformedBox {
                record: record(),
                bbox: o.bbox.to_array().to_vec(),
                width: r.width,
                height: r.height,
            });
        }
        if !o.depth.is_finite() {
            return Err(DatasetError::Parse {
                line: 0,
                msg: format!("record {}: non-finite depth", r.image_id),
            });
        }
    }
    if !r.relations.is_empty() && r.objects.len() < 2 {
        return Err(DatasetError::TooFewObjects { record: record() });
    }
    for rel in &r.relations {
        for index in [rel.s, rel.o] {
            if index >= r.objects.len() {
                return Err(DatasetError::DanglingIndex {
                    record: record(),
                    index,
                    count: r.objects.len(),
                });
            }
        }
        if rel.s == rel.o {
            return Err(DatasetError::SelfRelation {
                record: record(),
                index: rel.s,
            });
        }
        let known = predicates.contains(rel.p.as_str()) && !(mode == Mode::DoubletVrd && rel.p == NO_RELATIONSHIP);
        if !known {
            return Err(DatasetError::UnknownPredicate {
                record: record(),
                predicate: rel.p.clone(),
            });
        }
        if mode == Mode::TripletBinary && rel.truth.is_none() {
            return Err(DatasetError::MissingTruth { record: record() });
        }
    }
    Ok(())
}
