use crate::error::{Error, Result};

pub const NUM_LABELS: usize = 8;

/// Age ranges in years, in class-index order.
pub const LABELS: [&str; NUM_LABELS] = ["0-2", "4-6", "8-13", "15-20", "25-32", "38-43", "48-53", "60-"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeLabel(u8);

impl AgeLabel {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_LABELS {
            Ok(AgeLabel(index as u8))
        } else {
            Err(Error::Label(format!("label index {index} outside [0, {NUM_LABELS})")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_str(self) -> &'static str {
        LABELS[self.index()]
    }

    pub fn all() -> impl Iterator<Item = AgeLabel> {
        (0..NUM_LABELS as u8).map(AgeLabel)
    }
}

impl std::fmt::Display for AgeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Exact-match lookup of an age range string. The error carries row 0;
/// callers that know the row replace it.
pub fn label_of(range: &str) -> Result<AgeLabel> {
    LABELS
        .iter()
        .position(|&l| l == range)
        .map(|i| AgeLabel(i as u8))
        .ok_or_else(|| Error::Parse {
            row: 0,
            msg: format!("unknown age label {range:?}"),
        })
}
