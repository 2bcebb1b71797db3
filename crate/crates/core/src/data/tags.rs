//! Label spaces: 13 unified tags, 5 boundary tags, binary opinion and domain labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sentiment {
    Pos,
    Neg,
    Neu,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Pos, Sentiment::Neg, Sentiment::Neu];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Pos => "POS",
            Sentiment::Neg => "NEG",
            Sentiment::Neu => "NEU",
        }
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "POS" => Ok(Sentiment::Pos),
            "NEG" => Ok(Sentiment::Neg),
            "NEU" => Ok(Sentiment::Neu),
            other => Err(format!("unknown sentiment `{other}`")),
        }
    }
}

/// Position of a token inside an aspect span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    B,
    I,
    E,
    S,
}

impl Position {
    pub const ALL: [Position; 4] = [Position::B, Position::I, Position::E, Position::S];

    fn as_str(self) -> &'static str {
        match self {
            Position::B => "B",
            Position::I => "I",
            Position::E => "E",
            Position::S => "S",
        }
    }
}

/// Sentiment-free span tag. Encoded as B=0, I=1, E=2, S=3, O=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BoundaryTag {
    B,
    I,
    E,
    S,
    O,
}

impl BoundaryTag {
    pub const COUNT: usize = 5;
    pub const ALL: [BoundaryTag; 5] = [
        BoundaryTag::B,
        BoundaryTag::I,
        BoundaryTag::E,
        BoundaryTag::S,
        BoundaryTag::O,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_position(p: Option<Position>) -> Self {
        match p {
            Some(Position::B) => BoundaryTag::B,
            Some(Position::I) => BoundaryTag::I,
            Some(Position::E) => BoundaryTag::E,
            Some(Position::S) => BoundaryTag::S,
            None => BoundaryTag::O,
        }
    }
}

/// Joint span + sentiment tag. Encoded with O = 0, then
/// B/I/E/S-POS = 1..4, B/I/E/S-NEG = 5..8, B/I/E/S-NEU = 9..12.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnifiedTag {
    O,
    Aspect(Position, Sentiment),
}

impl UnifiedTag {
    pub const COUNT: usize = 13;

    pub fn all() -> impl Iterator<Item = UnifiedTag> {
        (0..Self::COUNT).map(|i| Self::from_index(i).unwrap())
    }

    pub fn index(self) -> usize {
        match self {
            UnifiedTag::O => 0,
            UnifiedTag::Aspect(p, s) => 1 + 4 * (s as usize) + p as usize,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(UnifiedTag::O),
            1..=12 => Some(UnifiedTag::Aspect(
                Position::ALL[(i - 1) % 4],
                Sentiment::ALL[(i - 1) / 4],
            )),
            _ => None,
        }
    }

    pub fn boundary(self) -> BoundaryTag {
        BoundaryTag::from_position(self.position())
    }
}

/// Anything that can be decoded into spans.
pub trait SpanTag: Copy {
    fn position(&self) -> Option<Position>;
    fn sentiment(&self) -> Option<Sentiment>;
}

impl SpanTag for UnifiedTag {
    fn position(&self) -> Option<Position> {
        match *self {
            UnifiedTag::O => None,
            UnifiedTag::Aspect(p, _) => Some(p),
        }
    }

    fn sentiment(&self) -> Option<Sentiment> {
        match *self {
            UnifiedTag::O => None,
            UnifiedTag::Aspect(_, s) => Some(s),
        }
    }
}

impl SpanTag for BoundaryTag {
    fn position(&self) -> Option<Position> {
        match self {
            BoundaryTag::B => Some(Position::B),
            BoundaryTag::I => Some(Position::I),
            BoundaryTag::E => Some(Position::E),
            BoundaryTag::S => Some(Position::S),
            BoundaryTag::O => None,
        }
    }

    fn sentiment(&self) -> Option<Sentiment> {
        None
    }
}

pub fn unified_to_boundary(tags: &[UnifiedTag]) -> Vec<BoundaryTag> {
    tags.iter().map(|t| t.boundary()).collect()
}

impl fmt::Display for UnifiedTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnifiedTag::O => f.write_str("O"),
            UnifiedTag::Aspect(p, s) => write!(f, "{}-{}", p.as_str(), s.as_str()),
        }
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.position() {
            Some(p) => f.write_str(p.as_str()),
            None => f.write_str("O"),
        }
    }
}

impl FromStr for UnifiedTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(UnifiedTag::O);
        }
        let (p, sent) = s
            .split_once('-')
            .ok_or_else(|| format!("unknown tag `{s}`"))?;
        let pos = match p {
            "B" => Position::B,
            "I" => Position::I,
            "E" => Position::E,
            "S" => Position::S,
            _ => return Err(format!("unknown tag `{s}`")),
        };
        let sent = sent
            .parse::<Sentiment>()
            .map_err(|e| format!("unknown tag `{s}`: {e}"))?;
        Ok(UnifiedTag::Aspect(pos, sent))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpinionLabel {
    NotOpinion,
    Opinion,
}

impl OpinionLabel {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    pub fn index(self) -> usize {
        self as usize
    }
}
