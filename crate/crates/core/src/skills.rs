//! The fifteen primitive skills used to segment episodes into clips.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveSkill {
    MoveWithObject,
    Pick,
    Place,
    Press,
    Push,
    Pull,
    Twist,
    Pour,
    Fold,
    Slide,
    Insert,
    Shake,
    Strike,
    Throw,
    Other,
}

impl PrimitiveSkill {
    pub const ALL: [PrimitiveSkill; 15] = [
        PrimitiveSkill::MoveWithObject,
        PrimitiveSkill::Pick,
        PrimitiveSkill::Place,
        PrimitiveSkill::Press,
        PrimitiveSkill::Push,
        PrimitiveSkill::Pull,
        PrimitiveSkill::Twist,
        PrimitiveSkill::Pour,
        PrimitiveSkill::Fold,
        PrimitiveSkill::Slide,
        PrimitiveSkill::Insert,
        PrimitiveSkill::Shake,
        PrimitiveSkill::Strike,
        PrimitiveSkill::Throw,
        PrimitiveSkill::Other,
    ];

    /// Human-readable skill name, as shown in choice lists.
    pub fn display_name(self) -> &'static str {
        match self {
            PrimitiveSkill::MoveWithObject => "Move with Object",
            PrimitiveSkill::Pick => "Pick",
            PrimitiveSkill::Place => "Place",
            PrimitiveSkill::Press => "Press",
            PrimitiveSkill::Push => "Push",
            PrimitiveSkill::Pull => "Pull",
            PrimitiveSkill::Twist => "Twist",
            PrimitiveSkill::Pour => "Pour",
            PrimitiveSkill::Fold => "Fold",
            PrimitiveSkill::Slide => "Slide",
            PrimitiveSkill::Insert => "Insert",
            PrimitiveSkill::Shake => "Shake",
            PrimitiveSkill::Strike => "Strike",
            PrimitiveSkill::Throw => "Throw",
            PrimitiveSkill::Other => "Other",
        }
    }

    /// The clip-description template, with `[object]` / `[position]` slots.
    pub fn template(self) -> &'static str {
        match self {
            PrimitiveSkill::MoveWithObject => "transfer [object] from [position] to [position]",
            PrimitiveSkill::Pick => "pick up [object] [position]",
            PrimitiveSkill::Place => "place [object] [position]",
            PrimitiveSkill::Press => "press [object] [position]",
            PrimitiveSkill::Push => "push [object] [position]",
            PrimitiveSkill::Pull => "pull [object] [position]",
            PrimitiveSkill::Twist => "twist [object] [clockwise/counterclockwise]",
            PrimitiveSkill::Pour => "pour [object] [position]",
            PrimitiveSkill::Fold => "fold [object] [position]",
            PrimitiveSkill::Slide => "slide [object] [position]",
            PrimitiveSkill::Insert => "insert [object] [position]",
            PrimitiveSkill::Shake => "shake [object] [position]",
            PrimitiveSkill::Strike => "strike [object] [position]",
            PrimitiveSkill::Throw => "throw [object] [position]",
            PrimitiveSkill::Other => "manipulate [object] [position]",
        }
    }

    /// Leading verb phrase of the template (`"pick up"`, `"transfer"`, ...).
    pub fn verb(self) -> &'static str {
        let t = self.template();
        &t[..t.find(" [").unwrap_or(t.len())]
    }

    /// Fills the template. `positions` fill `[position]` slots left to right;
    /// the twist direction slot takes the first position. Missing positions
    /// drop their slot.
    pub fn describe(self, object: &str, positions: &[&str]) -> String {
        let mut out = String::new();
        let mut pos = positions.iter();
        for (i, part) in self.template().split(' ').enumerate() {
            let piece = match part {
                "[object]" => Some(object.to_string()),
                "[position]" | "[clockwise/counterclockwise]" => pos.next().map(|p| p.to_string()),
                w => Some(w.to_string()),
            };
            if let Some(piece) = piece.filter(|p| !p.is_empty()) {
                if i > 0 && !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(&piece);
            }
        }
        // "from" / "to" without a following position are dropped
        let trimmed: Vec<&str> = out.split(' ').collect();
        let mut cleaned: Vec<&str> = Vec::with_capacity(trimmed.len());
        for (i, w) in trimmed.iter().enumerate() {
            let dangling = (*w == "from" || *w == "to")
                && trimmed.get(i + 1).map_or(true, |n| *n == "from" || *n == "to");
            if !dangling {
                cleaned.push(w);
            }
        }
        cleaned.join(" ")
    }

    /// Best-effort skill lookup from a free-text phrase by its leading verb.
    pub fn guess_from_phrase(phrase: &str) -> PrimitiveSkill {
        let p = phrase.trim().to_lowercase();
        let first = p.split_whitespace().next().unwrap_or("");
        match first {
            "transfer" | "move" | "carry" | "bring" => PrimitiveSkill::MoveWithObject,
            "pick" | "grab" | "grasp" | "take" | "lift" => PrimitiveSkill::Pick,
            "place" | "put" | "set" | "drop" => PrimitiveSkill::Place,
            "press" => PrimitiveSkill::Press,
            "push" | "close" => PrimitiveSkill::Push,
            "pull" | "open" => PrimitiveSkill::Pull,
            "twist" | "rotate" | "turn" | "unscrew" => PrimitiveSkill::Twist,
            "pour" => PrimitiveSkill::Pour,
            "fold" => PrimitiveSkill::Fold,
            "slide" | "sweep" => PrimitiveSkill::Slide,
            "insert" | "plug" => PrimitiveSkill::Insert,
            "shake" => PrimitiveSkill::Shake,
            "strike" | "hit" | "tap" => PrimitiveSkill::Strike,
            "throw" | "toss" => PrimitiveSkill::Throw,
            _ => PrimitiveSkill::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PrimitiveSkill::MoveWithObject => "move_with_object",
            PrimitiveSkill::Pick => "pick",
            PrimitiveSkill::Place => "place",
            PrimitiveSkill::Press => "press",
            PrimitiveSkill::Push => "push",
            PrimitiveSkill::Pull => "pull",
            PrimitiveSkill::Twist => "twist",
            PrimitiveSkill::Pour => "pour",
            PrimitiveSkill::Fold => "fold",
            PrimitiveSkill::Slide => "slide",
            PrimitiveSkill::Insert => "insert",
            PrimitiveSkill::Shake => "shake",
            PrimitiveSkill::Strike => "strike",
            PrimitiveSkill::Throw => "throw",
            PrimitiveSkill::Other => "other",
        }
    }
}

impl fmt::Display for PrimitiveSkill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown primitive skill {0:?}")]
pub struct UnknownSkill(pub String);

impl FromStr for PrimitiveSkill {
    type Err = UnknownSkill;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_lowercase().replace([' ', '-'], "_");
        PrimitiveSkill::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == norm || k.display_name().to_lowercase().replace(' ', "_") == norm)
            .ok_or_else(|| UnknownSkill(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_distinct_skills() {
        let mut names: Vec<_> = PrimitiveSkill::ALL.iter().map(|s| s.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 15);
    }

    #[test]
    fn describe_fills_slots() {
        assert_eq!(
            PrimitiveSkill::MoveWithObject.describe("the cup", &["the table", "the shelf"]),
            "transfer the cup from the table to the shelf"
        );
        assert_eq!(PrimitiveSkill::Pick.describe("the cup", &["on the table"]), "pick up the cup on the table");
        assert_eq!(PrimitiveSkill::Twist.describe("the cap", &["clockwise"]), "twist the cap clockwise");
        assert_eq!(PrimitiveSkill::Place.describe("the cup", &[]), "place the cup");
        assert_eq!(PrimitiveSkill::MoveWithObject.describe("the cup", &[]), "transfer the cup");
    }

    #[test]
    fn parse_round_trip() {
        for s in PrimitiveSkill::ALL {
            assert_eq!(s.as_str().parse::<PrimitiveSkill>().unwrap(), s);
            assert_eq!(s.display_name().parse::<PrimitiveSkill>().unwrap(), s);
        }
        assert!("jump".parse::<PrimitiveSkill>().is_err());
    }

    #[test]
    fn verbs() {
        assert_eq!(PrimitiveSkill::Pick.verb(), "pick up");
        assert_eq!(PrimitiveSkill::MoveWithObject.verb(), "transfer");
        assert_eq!(PrimitiveSkill::guess_from_phrase("open the drawer"), PrimitiveSkill::Pull);
    }
}
