//! The six WHO hand-hygiene rubbing stages used as classification targets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One of the WHO hand-washing stages 2 through 7.
///
/// Variants are declared in stage order, so the derived `Ord` follows the
/// sequence a participant performs them in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GestureLabel {
    RubPalmToPalm,
    FingersInterlaced,
    P2PFingersInterlaced,
    FingersInterlocked,
    ThumbRub,
    RotationalRub,
}

impl GestureLabel {
    pub const ALL: [GestureLabel; 6] = [
        GestureLabel::RubPalmToPalm,
        GestureLabel::FingersInterlaced,
        GestureLabel::P2PFingersInterlaced,
        GestureLabel::FingersInterlocked,
        GestureLabel::ThumbRub,
        GestureLabel::RotationalRub,
    ];

    /// First experiment subset: Fingers Interlaced, P2PFingersInterlaced, Rotational Rub.
    pub const SET_1: [GestureLabel; 3] = [
        GestureLabel::FingersInterlaced,
        GestureLabel::P2PFingersInterlaced,
        GestureLabel::RotationalRub,
    ];

    /// Second experiment subset: Rub hands Palm to Palm, Fingers Interlocked, Thumb Rub.
    pub const SET_2: [GestureLabel; 3] = [
        GestureLabel::RubPalmToPalm,
        GestureLabel::FingersInterlocked,
        GestureLabel::ThumbRub,
    ];

    pub fn who_stage(self) -> u8 {
        match self {
            GestureLabel::RubPalmToPalm => 2,
            GestureLabel::FingersInterlaced => 3,
            GestureLabel::P2PFingersInterlaced => 4,
            GestureLabel::FingersInterlocked => 5,
            GestureLabel::ThumbRub => 6,
            GestureLabel::RotationalRub => 7,
        }
    }

    pub fn from_who_stage(stage: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.who_stage() == stage)
    }

    /// Human-readable class label.
    pub fn name(self) -> &'static str {
        match self {
            GestureLabel::RubPalmToPalm => "Rub hands Palm to Palm",
            GestureLabel::FingersInterlaced => "Fingers Interlaced",
            GestureLabel::P2PFingersInterlaced => "P2PFingersInterlaced",
            GestureLabel::FingersInterlocked => "Fingers Interlocked",
            GestureLabel::ThumbRub => "Thumb Rub",
            GestureLabel::RotationalRub => "Rotational Rub",
        }
    }

    /// Filesystem- and CSV-safe identifier; also the serialized form.
    pub fn slug(self) -> &'static str {
        match self {
            GestureLabel::RubPalmToPalm => "Palm2Palm",
            GestureLabel::FingersInterlaced => "FingersInterlaced",
            GestureLabel::P2PFingersInterlaced => "P2PFingersInterlaced",
            GestureLabel::FingersInterlocked => "FingersInterlocked",
            GestureLabel::ThumbRub => "ThumbRub",
            GestureLabel::RotationalRub => "RotationalRub",
        }
    }

    /// The expected within-session sequence (stages 2..=7).
    pub fn session_order() -> Vec<GestureLabel> {
        Self::ALL.to_vec()
    }
}

impl fmt::Display for GestureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GestureLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|l| {
                let name: String = l
                    .name()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .collect::<String>()
                    .to_ascii_lowercase();
                norm == l.slug().to_ascii_lowercase() || norm == name
            })
            .ok_or_else(|| Error::Encoding(format!("unknown gesture label {s:?}")))
    }
}

impl Serialize for GestureLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.slug())
    }
}

impl<'de> Deserialize<'de> for GestureLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Index of `label` within `class_order`.
pub fn class_index(label: GestureLabel, class_order: &[GestureLabel]) -> Result<usize> {
    class_order
        .iter()
        .position(|&l| l == label)
        .ok_or_else(|| Error::Encoding(format!("label {label} not in class order")))
}

/// Checks that a class list is non-empty and free of duplicates.
pub fn validate_class_order(class_order: &[GestureLabel]) -> Result<()> {
    if class_order.len() < 2 {
        return Err(Error::Config(format!(
            "class order needs at least 2 classes, got {}",
            class_order.len()
        )));
    }
    for (i, a) in class_order.iter().enumerate() {
        if class_order[..i].contains(a) {
            return Err(Error::Config(format!("class {a} listed twice")));
        }
    }
    Ok(())
}
