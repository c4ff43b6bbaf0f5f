//! Event types, slot specifications, and the slot registry file.
//!
//! The registry file is line-delimited JSON, one slot per line:
//!
//! ```text
//! {"event_type":"cure_and_prevention","name":"who","kind":"span_or_author","question":"Who is promoting the cure?"}
//! ```
//!
//! Blank lines are ignored. `(event_type, name)` must be unique.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    TestedPositive,
    TestedNegative,
    CannotTest,
    Death,
    CureAndPrevention,
}

impl EventType {
    pub const ALL: [EventType; 5] = [
        EventType::TestedPositive,
        EventType::TestedNegative,
        EventType::CannotTest,
        EventType::Death,
        EventType::CureAndPrevention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::TestedPositive => "tested_positive",
            EventType::TestedNegative => "tested_negative",
            EventType::CannotTest => "cannot_test",
            EventType::Death => "death",
            EventType::CureAndPrevention => "cure_and_prevention",
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventType::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown event type `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    /// Answer is one or more chunks of the tweet.
    Span,
    /// Like `Span`, but may also be the author of the tweet.
    SpanOrAuthor,
    /// Yes/no answer; never a chunk.
    Binary,
}

/// `event_type/name`, e.g. `cure_and_prevention/who`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SlotId {
    pub event: EventType,
    pub name: String,
}

impl SlotId {
    pub fn new(event: EventType, name: impl Into<String>) -> Self {
        Self {
            event,
            name: name.into(),
        }
    }
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.event, self.name)
    }
}

impl FromStr for SlotId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (event, name) = s
            .split_once('/')
            .ok_or_else(|| Error::Validation(format!("slot id `{s}` is not `event/name`")))?;
        Ok(Self::new(event.parse()?, name))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub event_type: EventType,
    pub name: String,
    pub kind: SlotKind,
    pub question: String,
}

impl SlotSpec {
    pub fn id(&self) -> SlotId {
        SlotId::new(self.event_type, self.name.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotRegistry {
    slots: Vec<SlotSpec>,
}

impl SlotRegistry {
    pub fn new(slots: Vec<SlotSpec>) -> Result<Self> {
        for (i, s) in slots.iter().enumerate() {
            if s.name.is_empty() || s.name.contains('/') {
                return Err(Error::Validation(format!("invalid slot name `{}`", s.name)));
            }
            if slots[..i]
                .iter()
                .any(|o| o.event_type == s.event_type && o.name == s.name)
            {
                return Err(Error::Validation(format!("duplicate slot {}", s.id())));
            }
        }
        Ok(Self { slots })
    }

    /// The slots shipped with the project: the tested-positive and
    /// cure-and-prevention inventories, plus `who`/`where` placeholders for
    /// the remaining event types.
    pub fn default_registry() -> Self {
        use EventType::*;
        use SlotKind::*;
        let spec = |event_type, name: &str, kind, question: &str| SlotSpec {
            event_type,
            name: name.into(),
            kind,
            question: question.into(),
        };
        Self::new(vec![
            spec(TestedPositive, "who", SpanOrAuthor, "Who tested positive?"),
            spec(TestedPositive, "where", Span, "Where did they test positive?"),
            spec(TestedPositive, "when", Span, "When did they test positive?"),
            spec(TestedPositive, "recent_travel", Span, "Where did they travel recently?"),
            spec(TestedPositive, "employer", Span, "Who is their employer?"),
            spec(TestedPositive, "gender_male", Binary, "Is the person male?"),
            spec(TestedPositive, "gender_female", Binary, "Is the person female?"),
            spec(TestedNegative, "who", SpanOrAuthor, "Who tested negative?"),
            spec(TestedNegative, "where", Span, "Where did they test negative?"),
            spec(CannotTest, "who", SpanOrAuthor, "Who cannot get tested?"),
            spec(CannotTest, "where", Span, "Where can they not get tested?"),
            spec(Death, "who", SpanOrAuthor, "Who died?"),
            spec(Death, "where", Span, "Where did they die?"),
            spec(CureAndPrevention, "what", Span, "What is the cure?"),
            spec(CureAndPrevention, "opinion", Binary, "Does the author believe it works?"),
            spec(CureAndPrevention, "who", SpanOrAuthor, "Who is promoting the cure?"),
        ])
        .expect("default registry is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut slots = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let spec: SlotSpec = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            slots.push(spec);
        }
        Self::new(slots)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.slots {
            out.push_str(&serde_json::to_string(s).expect("slot spec serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn ids(&self) -> Vec<SlotId> {
        self.slots.iter().map(SlotSpec::id).collect()
    }

    pub fn get(&self, id: &SlotId) -> Result<&SlotSpec> {
        self.find(id.event, &id.name)
            .ok_or_else(|| Error::UnknownSlot(id.to_string()))
    }

    pub fn find(&self, event: EventType, name: &str) -> Option<&SlotSpec> {
        self.slots
            .iter()
            .find(|s| s.event_type == event && s.name == name)
    }

    pub fn for_event(&self, event: EventType) -> impl Iterator<Item = &SlotSpec> {
        self.slots.iter().filter(move |s| s.event_type == event)
    }
}
