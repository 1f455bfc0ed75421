use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Which drawing task an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawingType {
    Spiral,
    Wave,
}

impl DrawingType {
    pub const ALL: [DrawingType; 2] = [DrawingType::Spiral, DrawingType::Wave];

    pub fn as_str(self) -> &'static str {
        match self {
            DrawingType::Spiral => "spiral",
            DrawingType::Wave => "wave",
        }
    }
}

/// Screening class. The discriminant is the class index used by every model
/// output: `[healthy, parkinson]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Healthy = 0,
    Parkinson = 1,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 2] = [ClassLabel::Healthy, ClassLabel::Parkinson];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ClassLabel::Healthy),
            1 => Some(ClassLabel::Parkinson),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "healthy",
            ClassLabel::Parkinson => "parkinson",
        }
    }
}

/// Channel value mapping applied after resizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// `v / 255` in `[0, 1]`.
    UnitInterval,
    /// `v / 127.5 - 1` in `[-1, 1]`.
    SignedUnit,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::UnitInterval => "unit_interval",
            Norm::SignedUnit => "signed_unit",
        }
    }

    #[inline]
    pub fn apply(self, v: f32) -> f32 {
        match self {
            Norm::UnitInterval => v / 255.0,
            Norm::SignedUnit => v / 127.5 - 1.0,
        }
    }
}

macro_rules! str_enum {
    ($ty:ty, $what:literal, [$($v:expr),+]) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                $(if s.eq_ignore_ascii_case($v.as_str()) {
                    return Ok($v);
                })+
                Err(Error::Config(format!(
                    concat!("unknown ", $what, " `{}` (expected one of: {})"),
                    s,
                    [$($v.as_str()),+].join(", ")
                )))
            }
        }
    };
}

str_enum!(DrawingType, "drawing type", [DrawingType::Spiral, DrawingType::Wave]);
str_enum!(ClassLabel, "class", [ClassLabel::Healthy, ClassLabel::Parkinson]);
str_enum!(Norm, "normalization", [Norm::UnitInterval, Norm::SignedUnit]);
