//! Machine-readable check records shared by validators and the CLI.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

/// One check outcome: name, status, worst margin and a witness on failure.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub status: Status,
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, passed: bool, margin: f64) -> Self {
        Self {
            name: name.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            margin,
            witness: None,
            detail: None,
        }
    }

    pub fn skip(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: Status::Skip,
            margin: 0.0,
            witness: None,
            detail: Some(reason.into()),
        }
    }

    pub fn with_witness(mut self, witness: Option<String>) -> Self {
        self.witness = witness;
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }

    pub fn failed(&self) -> bool {
        self.status == Status::Fail
    }
}

/// Tracks the worst value seen so far together with where it was seen.
#[derive(Debug, Clone)]
pub(crate) struct Worst {
    pub value: f64,
    pub witness: Option<String>,
}

impl Worst {
    pub fn min() -> Self {
        Self {
            value: f64::INFINITY,
            witness: None,
        }
    }

    pub fn max() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            witness: None,
        }
    }

    pub fn lower(&mut self, value: f64, witness: impl FnOnce() -> String) {
        if value < self.value || value.is_nan() {
            self.value = value;
            self.witness = Some(witness());
        }
    }

    pub fn raise(&mut self, value: f64, witness: impl FnOnce() -> String) {
        if value > self.value || value.is_nan() {
            self.value = value;
            self.witness = Some(witness());
        }
    }
}
