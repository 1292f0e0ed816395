use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::voigt::{voigt_value, VoigtPeak};
use crate::error::{input_err, Result};
use crate::events::Event;

/// Event label: a class id, or one of the two unassigned outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(u32),
    Ambiguous,
    Unlabeled,
}

impl Label {
    pub fn class(self) -> Option<u32> {
        match self {
            Label::Class(c) => Some(c),
            _ => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Class(c) => s.serialize_u32(*c),
            Label::Ambiguous => s.serialize_str("AMBIGUOUS"),
            Label::Unlabeled => s.serialize_str("UNLABELED"),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(c) => Ok(Label::Class(c)),
            Raw::Name(n) if n == "AMBIGUOUS" => Ok(Label::Ambiguous),
            Raw::Name(n) if n == "UNLABELED" => Ok(Label::Unlabeled),
            Raw::Name(n) => Err(serde::de::Error::custom(format!("unknown label {n:?}"))),
        }
    }
}

/// Resolution for events inside more than one FWHM window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AmbiguityPolicy {
    /// Assign to the peak with the largest Voigt value at the event's blockade.
    #[default]
    MaxDensity,
    /// Mark as ambiguous.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledEvent {
    pub event_id: u64,
    pub mean_rel_blockade: f64,
    pub label: Label,
    pub peak_id: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub labeled: usize,
    /// Subset of `labeled` that fell inside several windows.
    pub resolved_overlaps: usize,
    pub ambiguous: usize,
    pub unlabeled: usize,
}

/// Label by FWHM windows; the label of peak `k` is `k`.
pub fn label_events(
    events: &[Event],
    peaks: &[VoigtPeak],
    policy: AmbiguityPolicy,
) -> Result<(Vec<LabeledEvent>, LabelCounts)> {
    let values: Vec<(u64, f64)> = events.iter().map(|e| (e.id, e.mean_rel_blockade)).collect();
    label_values(&values, peaks, policy)
}

pub fn label_values(
    values: &[(u64, f64)],
    peaks: &[VoigtPeak],
    policy: AmbiguityPolicy,
) -> Result<(Vec<LabeledEvent>, LabelCounts)> {
    if peaks.windows(2).any(|w| w[1].center < w[0].center) {
        return Err(input_err("peaks must be sorted by center"));
    }
    if peaks.iter().any(|p| !(p.fwhm > 0.0)) {
        return Err(input_err("peaks must have positive FWHM"));
    }
    let mut counts = LabelCounts::default();
    let out = values
        .iter()
        .map(|&(event_id, x)| {
            let inside: Vec<usize> = peaks
                .iter()
                .enumerate()
                .filter(|(_, p)| (x - p.center).abs() <= 0.5 * p.fwhm)
                .map(|(k, _)| k)
                .collect();
            let (label, peak_id) = match inside.len() {
                0 => {
                    counts.unlabeled += 1;
                    (Label::Unlabeled, None)
                }
                1 => {
                    counts.labeled += 1;
                    (Label::Class(inside[0] as u32), Some(inside[0]))
                }
                _ => match policy {
                    AmbiguityPolicy::Drop => {
                        counts.ambiguous += 1;
                        (Label::Ambiguous, None)
                    }
                    AmbiguityPolicy::MaxDensity => {
                        let best = inside
                            .iter()
                            .copied()
                            .max_by(|&a, &b| {
                                voigt_value(x, &peaks[a])
                                    .total_cmp(&voigt_value(x, &peaks[b]))
                                    .then(b.cmp(&a))
                            })
                            .unwrap();
                        counts.labeled += 1;
                        counts.resolved_overlaps += 1;
                        (Label::Class(best as u32), Some(best))
                    }
                },
            };
            LabeledEvent {
                event_id,
                mean_rel_blockade: x,
                label,
                peak_id,
            }
        })
        .collect();
    Ok((out, counts))
}
