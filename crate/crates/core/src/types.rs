use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Ground-truth or predicted authenticity label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Real, Label::Fake];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }

    /// Index used by the answer heads: real = 0, fake = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    /// Reads a label out of a free-form answer: trims, lowercases and strips
    /// trailing `.`/`!` before requiring an exact match.
    pub fn from_answer(answer: &str) -> Option<Label> {
        let lowered = answer.trim().to_lowercase();
        let normalized = lowered.trim_end_matches(['.', '!']).trim_end();
        match normalized {
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            other => Err(Error::invalid(format!("unknown label {other:?}"))),
        }
    }
}

/// Which seed bank a query was drawn from. Fixed when the data is built,
/// never inferred from a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryClass {
    #[serde(rename = "simple")]
    SimpleBank,
    #[serde(rename = "hard")]
    HardBank,
}

impl QueryClass {
    pub const ALL: [QueryClass; 2] = [QueryClass::SimpleBank, QueryClass::HardBank];

    pub fn index(self) -> usize {
        match self {
            QueryClass::SimpleBank => 0,
            QueryClass::HardBank => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QueryClass::SimpleBank => "simple",
            QueryClass::HardBank => "hard",
        }
    }
}

impl fmt::Display for QueryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
