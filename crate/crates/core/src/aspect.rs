use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Number of structured input channels.
pub const NUM_ASPECTS: usize = 4;

/// One of the structured channels extracted from every trial report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Population,
    Interventions,
    Outcomes,
    Punchline,
}

impl Aspect {
    pub const ALL: [Aspect; NUM_ASPECTS] = [
        Aspect::Population,
        Aspect::Interventions,
        Aspect::Outcomes,
        Aspect::Punchline,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Aspect> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Population => "population",
            Aspect::Interventions => "interventions",
            Aspect::Outcomes => "outcomes",
            Aspect::Punchline => "punchline",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            Aspect::Population => "<population>",
            Aspect::Interventions => "<interventions>",
            Aspect::Outcomes => "<outcomes>",
            Aspect::Punchline => "<punchline>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            Aspect::Population => "</population>",
            Aspect::Interventions => "</interventions>",
            Aspect::Outcomes => "</outcomes>",
            Aspect::Punchline => "</punchline>",
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown aspect `{0}`")]
pub struct UnknownAspect(pub String);

impl FromStr for Aspect {
    type Err = UnknownAspect;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aspect::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| UnknownAspect(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        for a in Aspect::ALL {
            assert_eq!(Aspect::from_index(a.index()), Some(a));
            assert_eq!(a.name().parse::<Aspect>().unwrap(), a);
        }
        assert_eq!(Aspect::from_index(4), None);
        assert!("comparator".parse::<Aspect>().is_err());
    }
}
