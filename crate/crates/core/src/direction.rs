use serde::{Deserialize, Serialize};

/// Aggregate effect direction of a body of trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Effective,
    NoEffect,
    Inconclusive,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Effective, Direction::NoEffect, Direction::Inconclusive];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Effective => "effective",
            Direction::NoEffect => "no_effect",
            Direction::Inconclusive => "inconclusive",
        }
    }

    /// The binary label a summary with this direction should receive.
    pub fn label(self) -> DirectionLabel {
        match self {
            Direction::Effective => DirectionLabel::Significant,
            Direction::NoEffect | Direction::Inconclusive => DirectionLabel::NotSignificant,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| format!("unknown direction `{s}`"))
    }
}

/// Whether a text reports a significant effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionLabel {
    Significant,
    NotSignificant,
}

impl DirectionLabel {
    pub fn name(self) -> &'static str {
        match self {
            DirectionLabel::Significant => "significant",
            DirectionLabel::NotSignificant => "not_significant",
        }
    }
}

impl std::fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
