use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Posture classes recorded in the field data.
///
/// | code | posture |
/// |------|---------|
/// | BT | static bending, minor movement |
/// | KN | kneeling |
/// | LB | lifting / bending with load |
/// | MO | moving, carrying |
/// | TR | transition |
/// | SQ | squatting |
/// | ST | standing |
/// | WK | walking |
/// | WO | working overhead |
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PostureLabel {
    BT,
    KN,
    LB,
    MO,
    TR,
    SQ,
    ST,
    WK,
    WO,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comfort {
    Uncomfortable,
    Comfortable,
}

impl PostureLabel {
    pub const ALL: [PostureLabel; 9] = [
        PostureLabel::BT,
        PostureLabel::KN,
        PostureLabel::LB,
        PostureLabel::MO,
        PostureLabel::TR,
        PostureLabel::SQ,
        PostureLabel::ST,
        PostureLabel::WK,
        PostureLabel::WO,
    ];

    pub fn code(self) -> &'static str {
        match self {
            PostureLabel::BT => "BT",
            PostureLabel::KN => "KN",
            PostureLabel::LB => "LB",
            PostureLabel::MO => "MO",
            PostureLabel::TR => "TR",
            PostureLabel::SQ => "SQ",
            PostureLabel::ST => "ST",
            PostureLabel::WK => "WK",
            PostureLabel::WO => "WO",
        }
    }

    /// Position in [`PostureLabel::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// TR has no comfort class.
    pub fn comfort(self) -> Option<Comfort> {
        use PostureLabel::*;
        match self {
            BT | KN | LB | SQ | WO => Some(Comfort::Uncomfortable),
            WK | MO | ST => Some(Comfort::Comfortable),
            TR => None,
        }
    }
}

impl fmt::Display for PostureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PostureLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        PostureLabel::ALL
            .iter()
            .copied()
            .find(|l| l.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown posture label {s:?}")))
    }
}

/// Parses a comma-separated label list such as `BT,KN,ST`.
pub fn parse_label_list(s: &str) -> Result<Vec<PostureLabel>, Error> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect()
}
