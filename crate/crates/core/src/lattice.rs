//! Bell–LaPadula style classification labels.
//!
//! A [`Label`] is a triple of rank, compartment set and releasability caveats.
//! Labels combine with [`Label::join`] and are ordered by
//! [`Label::dominated_by`]. Caveats are contravariant in the order: a label
//! with fewer caveats is *higher*, which makes `join` (that intersects caveats)
//! the least upper bound.
//!
//! The canonical text form is `rank:comp1,comp2:cav1,cav2` with both sets
//! sorted lexicographically; empty sets render as empty segments (`0::`).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default upper bound on label rank.
pub const DEFAULT_MAX_RANK: u32 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("label text must have three ':'-separated segments, got {0:?}")]
    Shape(String),
    #[error("invalid rank {0:?}")]
    Rank(String),
    #[error("rank {rank} exceeds configured maximum {max}")]
    RankAboveMax { rank: u32, max: u32 },
    #[error("invalid identifier {0:?}")]
    Identifier(String),
    #[error("duplicate identifier {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    rank: u32,
    compartments: BTreeSet<String>,
    caveats: BTreeSet<String>,
}

fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn ident_set<I, S>(items: I) -> Result<BTreeSet<String>, LabelError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut out = BTreeSet::new();
    for item in items {
        let item = item.into();
        if !valid_ident(&item) {
            return Err(LabelError::Identifier(item));
        }
        if out.contains(&item) {
            return Err(LabelError::Duplicate(item));
        }
        out.insert(item);
    }
    Ok(out)
}

impl Label {
    pub fn new<C, R, S, T>(rank: u32, compartments: C, caveats: R) -> Result<Self, LabelError>
    where
        C: IntoIterator<Item = S>,
        R: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        Ok(Label {
            rank,
            compartments: ident_set(compartments)?,
            caveats: ident_set(caveats)?,
        })
    }

    /// The bottom-ranked label with no compartments and no caveats.
    pub fn public() -> Self {
        Label {
            rank: 0,
            compartments: BTreeSet::new(),
            caveats: BTreeSet::new(),
        }
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    pub fn compartments(&self) -> &BTreeSet<String> {
        &self.compartments
    }

    pub fn caveats(&self) -> &BTreeSet<String> {
        &self.caveats
    }

    /// Parses the canonical text form and enforces `rank <= max_rank`.
    pub fn parse_bounded(text: &str, max_rank: u32) -> Result<Self, LabelError> {
        let label: Label = text.parse()?;
        label.check_rank(max_rank)?;
        Ok(label)
    }

    pub fn check_rank(&self, max_rank: u32) -> Result<(), LabelError> {
        if self.rank > max_rank {
            return Err(LabelError::RankAboveMax {
                rank: self.rank,
                max: max_rank,
            });
        }
        Ok(())
    }

    /// Least upper bound: `⟨max rank, C_a ∪ C_b, R_a ∩ R_b⟩`.
    pub fn join(&self, other: &Label) -> Label {
        Label {
            rank: self.rank.max(other.rank),
            compartments: self.compartments.union(&other.compartments).cloned().collect(),
            caveats: self.caveats.intersection(&other.caveats).cloned().collect(),
        }
    }

    /// `self ⪯ other`: rank is no higher, compartments are a subset, caveats a
    /// superset.
    pub fn dominated_by(&self, other: &Label) -> bool {
        self.rank <= other.rank
            && self.compartments.is_subset(&other.compartments)
            && self.caveats.is_superset(&other.caveats)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let comps: Vec<&str> = self.compartments.iter().map(String::as_str).collect();
        let cavs: Vec<&str> = self.caveats.iter().map(String::as_str).collect();
        write!(f, "{}:{}:{}", self.rank, comps.join(","), cavs.join(","))
    }
}

fn split_set(segment: &str) -> Vec<&str> {
    if segment.is_empty() {
        Vec::new()
    } else {
        segment.split(',').collect()
    }
}

impl FromStr for Label {
    type Err = LabelError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(LabelError::Shape(text.to_string()));
        }
        let rank_text = parts[0];
        if rank_text.is_empty()
            || !rank_text.bytes().all(|b| b.is_ascii_digit())
            || (rank_text.len() > 1 && rank_text.starts_with('0'))
        {
            return Err(LabelError::Rank(rank_text.to_string()));
        }
        let rank = rank_text
            .parse::<u32>()
            .map_err(|_| LabelError::Rank(rank_text.to_string()))?;
        Label::new(rank, split_set(parts[1]), split_set(parts[2]))
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}
