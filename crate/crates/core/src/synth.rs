//! Deterministic templated tweets with known gold, for tests and demos.
//!
//! Every generated tweet carries chunks for all of its fillers plus a
//! distractor chunk, so span answers always resolve to chunks. Events are
//! drawn round-robin over the event types present in the registry.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ChunkRecord, Record, TweetExample};
use crate::error::{Error, Result};
use crate::filler::{AUTHOR_LABEL, NO_LABEL, YES_LABEL};
use crate::slots::{EventType, SlotRegistry};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Sex {
    Male,
    Female,
    Unknown,
}

const PEOPLE: &[(&str, Sex)] = &[
    ("My uncle", Sex::Male),
    ("My aunt", Sex::Female),
    ("Our neighbor", Sex::Unknown),
    ("A local nurse", Sex::Unknown),
    ("The mayor", Sex::Unknown),
    ("Tom Hanks", Sex::Male),
    ("My sister", Sex::Female),
    ("My grandfather", Sex::Male),
    ("A Notre Dame football player", Sex::Male),
    ("Two students", Sex::Unknown),
    ("The governor", Sex::Unknown),
    ("Her mother", Sex::Female),
];
const PLACES: &[&str] = &[
    "Ohio", "New York", "Seattle", "Wuhan", "Milan", "Texas", "London", "Madrid", "Boston", "Florida",
];
const TIMES: &[&str] = &[
    "yesterday", "today", "last week", "on Monday", "this morning", "last night", "on Friday",
];
const TRAVEL: &[&str] = &["Italy", "China", "Iran", "Spain", "Japan", "France", "Korea"];
const EMPLOYERS: &[&str] = &["Amazon", "Walmart", "Tesla", "the NBA", "Google", "Target", "Delta"];
const CURES: &[&str] = &[
    "vaping", "garlic", "hydroxychloroquine", "vitamin c", "zinc", "bleach", "hot tea", "sunlight",
    "ginger", "cow urine",
];
const PROMOTERS: &[&str] = &[
    "French scientists", "a YouTube doctor", "my aunt", "some experts", "Elon Musk", "the president",
    "a local pastor",
];
const DISTRACTORS: &[&str] = &["covid", "COVID-19", "coronavirus", "the virus"];

/// Incrementally assembles tweet text, chunks and gold labels.
#[derive(Default)]
struct Builder {
    text: String,
    chunks: Vec<ChunkRecord>,
    gold: BTreeMap<String, Vec<String>>,
}

impl Builder {
    fn lit(&mut self, s: &str) -> &mut Self {
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        self.text.push_str(s);
        self
    }

    fn chunk(&mut self, s: &str) -> usize {
        self.lit("");
        let start = self.text.len();
        self.text.push_str(s);
        self.chunks.push(ChunkRecord {
            start,
            end: self.text.len(),
        });
        self.chunks.len() - 1
    }

    fn fill(&mut self, slot: &str, s: &str) -> &mut Self {
        let i = self.chunk(s);
        self.label(slot, &format!("chunk:{i}"))
    }

    fn label(&mut self, slot: &str, label: &str) -> &mut Self {
        self.gold.entry(slot.to_string()).or_default().push(label.to_string());
        self
    }

    fn distractor(&mut self, rng: &mut ChaCha8Rng) -> &mut Self {
        let d = DISTRACTORS.choose(rng).expect("non-empty pool");
        self.chunk(d);
        self
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, pool: &'a [T]) -> &'a T {
    pool.choose(rng).expect("non-empty pool")
}

fn tested(rng: &mut ChaCha8Rng, b: &mut Builder, outcome: &str) {
    let author = rng.random_bool(0.2);
    let (who, sex) = *pick(rng, PEOPLE);
    let place = *pick(rng, PLACES);
    let time = *pick(rng, TIMES);
    let with_time = outcome == "positive" && rng.random_bool(0.85);
    if author {
        b.label("who", AUTHOR_LABEL);
        b.lit(&format!("I just tested {outcome} for")).distractor(rng).lit("here in").fill("where", place);
        if with_time {
            b.fill("when", time);
        }
        b.lit("and honestly I am still in shock");
    } else if rng.random_bool(0.5) {
        b.fill("who", who).lit(&format!("tested {outcome} for")).distractor(rng).lit("in").fill("where", place);
        if with_time {
            b.fill("when", time);
        }
    } else {
        if with_time {
            b.fill("when", time).lit(",");
        }
        b.lit("in").fill("where", place).lit(",").fill("who", who);
        b.lit(&format!("tested {outcome} for")).distractor(rng);
    }
    if outcome != "positive" {
        return;
    }
    if rng.random_bool(0.7) {
        b.lit("after a trip to").fill("recent_travel", pick(rng, TRAVEL));
    }
    let sex = if author { Sex::Unknown } else { sex };
    if rng.random_bool(0.7) {
        let pronoun = match sex {
            Sex::Male => "He works at",
            Sex::Female => "She works at",
            Sex::Unknown if author => "I work at",
            Sex::Unknown => "They work at",
        };
        b.lit(".").lit(pronoun).fill("employer", pick(rng, EMPLOYERS));
    }
    b.label("gender_male", if sex == Sex::Male { YES_LABEL } else { NO_LABEL });
    b.label("gender_female", if sex == Sex::Female { YES_LABEL } else { NO_LABEL });
}

fn cannot_test(rng: &mut ChaCha8Rng, b: &mut Builder) {
    let place = *pick(rng, PLACES);
    if rng.random_bool(0.25) {
        b.label("who", AUTHOR_LABEL);
        b.lit("I have every symptom but I still can not get a test for").distractor(rng);
        b.lit("anywhere in").fill("where", place);
    } else if rng.random_bool(0.5) {
        b.fill("who", pick(rng, PEOPLE).0).lit("could not get tested for").distractor(rng);
        b.lit("in").fill("where", place).lit("because there are no kits");
    } else {
        b.lit("No tests left in").fill("where", place).lit(",").fill("who", pick(rng, PEOPLE).0);
        b.lit("was turned away");
    }
}

fn death(rng: &mut ChaCha8Rng, b: &mut Builder) {
    let who = pick(rng, PEOPLE).0;
    let place = *pick(rng, PLACES);
    match rng.random_range(0..3) {
        0 => {
            b.fill("who", who).lit("died of").distractor(rng).lit("in").fill("where", place);
        }
        1 => {
            b.lit("In").fill("where", place).lit(",").fill("who", who).lit("passed away from").distractor(rng);
        }
        _ => {
            b.lit("RIP").fill("who", who).lit(", lost to").distractor(rng).lit("at a hospital in").fill("where", place);
        }
    }
}

/// Every other cure tweet lists three remedies.
fn cure(rng: &mut ChaCha8Rng, b: &mut Builder, list: bool) {
    let promoter = *pick(rng, PROMOTERS);
    let fill_cures = |rng: &mut ChaCha8Rng, b: &mut Builder| {
        if list {
            let mut items: Vec<&str> = CURES.to_vec();
            let mut chosen = Vec::new();
            for _ in 0..3 {
                let i = rng.random_range(0..items.len());
                chosen.push(items.remove(i));
            }
            b.fill("what", chosen[0]).lit(",").fill("what", chosen[1]).lit("and").fill("what", chosen[2]);
        } else {
            b.fill("what", pick(rng, CURES));
        }
    };
    match rng.random_range(0..4) {
        0 => {
            b.lit("No doubt that");
            fill_cures(rng, b);
            b.lit("could have prevented a multitude of").distractor(rng);
            b.lit("deaths as reported by some").fill("who", promoter);
            b.label("opinion", YES_LABEL);
        }
        1 => {
            b.fill("who", promoter).lit("claim");
            fill_cures(rng, b);
            b.lit("cures").distractor(rng).lit("but that is fake news");
            b.label("opinion", NO_LABEL);
        }
        2 => {
            b.label("who", AUTHOR_LABEL);
            b.lit("I swear");
            fill_cures(rng, b);
            b.lit("cures").distractor(rng).lit(", my whole family took it and we recovered fast");
            b.label("opinion", YES_LABEL);
        }
        _ => {
            b.lit("Apparently");
            fill_cures(rng, b);
            b.lit("prevents").distractor(rng).lit("according to").fill("who", promoter);
            b.label("opinion", NO_LABEL);
        }
    }
}

/// `n` synthetic tweets; identical `(seed, n, registry)` give identical
/// output. Gold for slots missing from the registry is dropped.
pub fn gen_synthetic(seed: u64, n: usize, registry: &SlotRegistry) -> Result<Vec<TweetExample>> {
    let events: Vec<EventType> = EventType::ALL
        .into_iter()
        .filter(|e| registry.for_event(*e).next().is_some())
        .collect();
    if events.is_empty() {
        return Err(Error::Validation("slot registry has no slots for any event type".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let event = events[i % events.len()];
        let mut b = Builder::default();
        match event {
            EventType::TestedPositive => tested(&mut rng, &mut b, "positive"),
            EventType::TestedNegative => tested(&mut rng, &mut b, "negative"),
            EventType::CannotTest => cannot_test(&mut rng, &mut b),
            EventType::Death => death(&mut rng, &mut b),
            EventType::CureAndPrevention => cure(&mut rng, &mut b, (i / events.len()) % 2 == 1),
        }
        let gold = b
            .gold
            .into_iter()
            .filter(|(slot, _)| registry.find(event, slot).is_some())
            .collect();
        let record = Record {
            id: format!("syn-{seed}-{i}"),
            text: b.text,
            event_type: event,
            chunks: b.chunks,
            gold,
        };
        out.push(TweetExample::from_record(record, registry)?);
    }
    Ok(out)
}
