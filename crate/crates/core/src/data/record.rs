use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    F32,
    F64,
}

impl Storage {
    pub fn width(self) -> usize {
        match self {
            Storage::F32 => 4,
            Storage::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
    Unlabeled,
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Label::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// One sample: its `l×d` token embeddings, domain and optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub domain_id: u32,
    pub label: Label,
    pub tokens: Tensor,
}

impl EmbeddingRecord {
    pub fn new(domain_id: u32, label: Label, tokens: Tensor) -> Self {
        Self {
            domain_id,
            label,
            tokens,
        }
    }

    /// A copy with the label stripped.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            domain_id: self.domain_id,
            tokens: &self.tokens,
        }
    }
}

/// Record view without access to the label. Code paths that must never read
/// labels (pretraining, adaptation) take this type.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    pub domain_id: u32,
    pub tokens: &'a Tensor,
}

pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u16,
    pub d: u32,
    pub l: u32,
    pub num_records: u64,
    /// Zero for regression.
    pub num_classes: u32,
    pub task: Task,
    pub storage: Storage,
}

impl DatasetHeader {
    pub fn classification(d: usize, l: usize, num_classes: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            d: d as u32,
            l: l as u32,
            num_records: 0,
            num_classes: num_classes as u32,
            task: Task::Classification,
            storage: Storage::F64,
        }
    }

    pub fn regression(d: usize, l: usize) -> Self {
        Self {
            num_classes: 0,
            task: Task::Regression,
            ..Self::classification(d, l, 0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<EmbeddingRecord>,
}

impl Dataset {
    /// Builds a dataset, fixing up `num_records` and validating every record.
    pub fn new(mut header: DatasetHeader, records: Vec<EmbeddingRecord>) -> Result<Self> {
        header.num_records = records.len() as u64;
        let ds = Self { header, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn d(&self) -> usize {
        self.header.d as usize
    }

    pub fn l(&self) -> usize {
        self.header.l as usize
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.d == 0 || h.l == 0 {
            return Err(Error::contract("d and l must be at least 1"));
        }
        if h.num_records != self.records.len() as u64 {
            return Err(Error::contract(format!(
                "header declares {} records, found {}",
                h.num_records,
                self.records.len()
            )));
        }
        if (h.task == Task::Classification) != (h.num_classes > 0) {
            return Err(Error::contract(
                "classification requires num_classes > 0, regression requires 0",
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.tokens.dims() != (h.l as usize, h.d as usize) {
                return Err(Error::Shape {
                    op: "dataset record",
                    lhs: vec![h.l as usize, h.d as usize],
                    rhs: r.tokens.shape().to_vec(),
                });
            }
            match (h.task, r.label) {
                (_, Label::Unlabeled) => {}
                (Task::Classification, Label::Class(c)) if c < h.num_classes as usize => {}
                (Task::Regression, Label::Value(v)) if v.is_finite() => {}
                (_, label) => {
                    return Err(Error::contract(format!(
                        "record {i} has label {label:?} incompatible with {:?}/{} classes",
                        h.task, h.num_classes
                    )))
                }
            }
        }
        Ok(())
    }

    /// Distinct domain IDs in first-seen order.
    pub fn domain_ids(&self) -> Vec<u32> {
        let mut ids = Vec::new();
        for r in &self.records {
            if !ids.contains(&r.domain_id) {
                ids.push(r.domain_id);
            }
        }
        ids
    }
}
