//! Slot-level precision/recall/F1, micro and macro aggregation, event-level
//! classification scores.
//!
//! Conventions: a ratio with a zero denominator is 0, so an empty slot scores
//! P = R = F1 = 0. Micro scores pool tp/fp/fn over every slot instance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::TweetExample;
use crate::error::{Error, Result};
use crate::filler::SlotFiller;
use crate::pipeline::classify_event;
use crate::slots::{EventType, SlotId, SlotRegistry};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotScore {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl SlotScore {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

fn check_ids<'a, T>(preds: &'a [(&'a str, T)], golds: &'a [(&'a str, T)], what: &str) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{what}: {} predictions for {} gold examples",
            preds.len(),
            golds.len()
        )));
    }
    for (i, ((p, _), (g, _))) in preds.iter().zip(golds).enumerate() {
        if p != g {
            return Err(Error::Contract(format!(
                "{what}: example {i} is `{p}` in predictions but `{g}` in gold"
            )));
        }
    }
    Ok(())
}

/// Scores one slot. `preds` and `golds` are `(example id, filler)` pairs in
/// the same order.
pub fn slot_prf(preds: &[(&str, &SlotFiller)], golds: &[(&str, &SlotFiller)]) -> Result<SlotScore> {
    check_ids(preds, golds, "slot_prf")?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for ((_, p), (_, g)) in preds.iter().zip(golds) {
        let (p, g) = (p.items(), g.items());
        let hit = p.intersection(&g).count() as u64;
        tp += hit;
        fp += p.len() as u64 - hit;
        fn_ += g.len() as u64 - hit;
    }
    Ok(SlotScore::from_counts(tp, fp, fn_))
}

/// Micro score from pooled counts, and the unweighted mean of slot F1s.
pub fn aggregate(per_slot: &[SlotScore]) -> Result<(SlotScore, f64)> {
    if per_slot.is_empty() {
        return Err(Error::Contract("aggregate needs at least one slot score".into()));
    }
    let (tp, fp, fn_) = per_slot
        .iter()
        .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
    let macro_f1 = per_slot.iter().map(|s| s.f1).sum::<f64>() / per_slot.len() as f64;
    Ok((SlotScore::from_counts(tp, fp, fn_), macro_f1))
}

/// Binary classification score with "event present" as the positive class.
pub fn event_f1(preds: &[(&str, bool)], golds: &[(&str, bool)]) -> Result<SlotScore> {
    check_ids(preds, golds, "event_f1")?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for ((_, p), (_, g)) in preds.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(SlotScore::from_counts(tp, fp, fn_))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    /// Registry order.
    pub slots: Vec<(SlotId, SlotScore)>,
    pub micro: SlotScore,
    pub macro_f1: f64,
    /// Only event types that occur in the gold corpus.
    pub events: Vec<(EventType, SlotScore)>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportRecord<'a> {
    Slot {
        event_type: &'a str,
        slot: &'a str,
        #[serde(flatten)]
        score: &'a SlotScore,
    },
    Event {
        event_type: &'a str,
        #[serde(flatten)]
        score: &'a SlotScore,
    },
    Micro {
        #[serde(flatten)]
        score: &'a SlotScore,
    },
    Macro {
        f1: f64,
    },
}

/// Scores a prediction file against gold. Both are matched by position and
/// must agree on ids and event types. A slot is scored over the examples of
/// its event type.
pub fn evaluate(preds: &[TweetExample], golds: &[TweetExample], registry: &SlotRegistry) -> Result<Report> {
    if preds.len() != golds.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold examples",
            preds.len(),
            golds.len()
        )));
    }
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.id != g.id {
            return Err(Error::Contract(format!(
                "example {i} is `{}` in predictions but `{}` in gold",
                p.id, g.id
            )));
        }
        if p.event_type != g.event_type {
            return Err(Error::Contract(format!(
                "example `{}` has event type {} in predictions but {} in gold",
                p.id, p.event_type, g.event_type
            )));
        }
    }
    let missing = SlotFiller::Missing;
    let mut slots = Vec::new();
    for spec in registry.slots() {
        let mut p_side = Vec::new();
        let mut g_side = Vec::new();
        for (p, g) in preds.iter().zip(golds).filter(|(_, g)| g.event_type == spec.event_type) {
            p_side.push((p.id.as_str(), p.gold.get(&spec.name).unwrap_or(&missing)));
            g_side.push((g.id.as_str(), g.gold.get(&spec.name).unwrap_or(&missing)));
        }
        slots.push((spec.id(), slot_prf(&p_side, &g_side)?));
    }
    let scores: Vec<SlotScore> = slots.iter().map(|(_, s)| *s).collect();
    let (micro, macro_f1) = aggregate(&scores)?;

    let mut flags: BTreeMap<EventType, (Vec<(&str, bool)>, Vec<(&str, bool)>)> = BTreeMap::new();
    for (p, g) in preds.iter().zip(golds) {
        let entry = flags.entry(g.event_type).or_default();
        entry.0.push((p.id.as_str(), classify_event(&p.gold)));
        entry.1.push((g.id.as_str(), classify_event(&g.gold)));
    }
    let events = flags
        .into_iter()
        .map(|(event, (p, g))| Ok((event, event_f1(&p, &g)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        slots,
        micro,
        macro_f1,
        events,
    })
}

impl Report {
    /// One record per slot, then per event type, then micro and macro.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: ReportRecord<'_>| {
            out.push_str(&serde_json::to_string(&r).expect("report record serializes"));
            out.push('\n');
        };
        for (id, score) in &self.slots {
            push(ReportRecord::Slot {
                event_type: id.event.as_str(),
                slot: &id.name,
                score,
            });
        }
        for (event, score) in &self.events {
            push(ReportRecord::Event {
                event_type: event.as_str(),
                score,
            });
        }
        push(ReportRecord::Micro { score: &self.micro });
        push(ReportRecord::Macro { f1: self.macro_f1 });
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let row = |out: &mut String, label: &str, s: &SlotScore| {
            let _ = writeln!(
                out,
                "{label:<32} {:>5} {:>5} {:>5} {:>7.4} {:>7.4} {:>7.4}",
                s.tp, s.fp, s.fn_, s.precision, s.recall, s.f1
            );
        };
        let _ = writeln!(out, "{:<32} {:>5} {:>5} {:>5} {:>7} {:>7} {:>7}", "slot", "tp", "fp", "fn", "P", "R", "F1");
        for (id, s) in &self.slots {
            row(&mut out, &id.to_string(), s);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<32} {:>5} {:>5} {:>5} {:>7} {:>7} {:>7}", "event", "tp", "fp", "fn", "P", "R", "F1");
        for (event, s) in &self.events {
            row(&mut out, event.as_str(), s);
        }
        let _ = writeln!(out);
        row(&mut out, "micro", &self.micro);
        let _ = writeln!(out, "{:<32} {:>31.4}", "macro F1", self.macro_f1);
        out
    }
}
