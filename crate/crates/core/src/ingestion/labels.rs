use std::fmt;

use serde::{Deserialize, Serialize};

/// Label-set profile. Each profile fixes its class names and their ordinals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSet {
    /// Chest/abdomen/pelvis: venous-phase DCE, T2w, T2FS, DWI, ADC.
    Body,
    /// Brain tumor studies: T1, T1 post-contrast, T2, FLAIR.
    Brain,
}

const BODY_CLASSES: [&str; 5] = ["VDCE", "T2W", "T2FS", "DWI", "ADC"];
const BRAIN_CLASSES: [&str; 4] = ["T1", "T1CE", "T2", "FLAIR"];

impl LabelSet {
    pub fn id(self) -> &'static str {
        match self {
            LabelSet::Body => "body",
            LabelSet::Brain => "brain",
        }
    }

    pub fn classes(self) -> &'static [&'static str] {
        match self {
            LabelSet::Body => &BODY_CLASSES,
            LabelSet::Brain => &BRAIN_CLASSES,
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }

    pub fn label(self, class_index: usize) -> Option<SequenceLabel> {
        (class_index < self.num_classes()).then_some(SequenceLabel {
            label_set: self,
            class_index,
        })
    }

    /// Case-insensitive lookup of a class name (a few common spellings accepted).
    pub fn parse_label(self, name: &str) -> Option<SequenceLabel> {
        let norm: String = name
            .trim()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        let canonical = match (self, norm.as_str()) {
            (LabelSet::Body, "VENOUS" | "VDCE" | "DCEVENOUS" | "DCE") => "VDCE",
            (LabelSet::Body, "T2" | "T2W") => "T2W",
            (LabelSet::Brain, "T1POST" | "T1C" | "T1GD" | "T1CE") => "T1CE",
            (LabelSet::Brain, "T2W" | "T2") => "T2",
            _ => norm.as_str(),
        };
        let idx = self.classes().iter().position(|c| *c == canonical)?;
        self.label(idx)
    }

    pub fn parse(id: &str) -> Option<LabelSet> {
        match id.trim().to_ascii_lowercase().as_str() {
            "body" => Some(LabelSet::Body),
            "brain" => Some(LabelSet::Brain),
            _ => None,
        }
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// A class of a label-set profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawLabel", into = "RawLabel")]
pub struct SequenceLabel {
    label_set: LabelSet,
    class_index: usize,
}

impl SequenceLabel {
    pub fn label_set(&self) -> LabelSet {
        self.label_set
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn value(&self) -> &'static str {
        self.label_set.classes()[self.class_index]
    }
}

impl fmt::Display for SequenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.value())
    }
}

#[derive(Serialize, Deserialize)]
struct RawLabel {
    label_set: LabelSet,
    value: String,
    class_index: usize,
}

impl TryFrom<RawLabel> for SequenceLabel {
    type Error = String;

    fn try_from(raw: RawLabel) -> Result<Self, Self::Error> {
        let label = raw
            .label_set
            .parse_label(&raw.value)
            .ok_or_else(|| format!("'{}' is not a {} class", raw.value, raw.label_set))?;
        if label.class_index != raw.class_index {
            return Err(format!(
                "class_index {} does not match '{}' (expected {})",
                raw.class_index, raw.value, label.class_index
            ));
        }
        Ok(label)
    }
}

impl From<SequenceLabel> for RawLabel {
    fn from(l: SequenceLabel) -> Self {
        RawLabel {
            label_set: l.label_set,
            value: l.value().to_string(),
            class_index: l.class_index,
        }
    }
}
