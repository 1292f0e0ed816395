use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::label::LabeledEvent;
use crate::error::{input_err, Result};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// `(event_id, split)` in input order, for labeled events only.
    pub assignments: Vec<(u64, Split)>,
    pub ratios: [f64; 3],
}

impl SplitAssignment {
    pub fn get(&self, event_id: u64) -> Option<Split> {
        self.assignments
            .iter()
            .find(|(id, _)| *id == event_id)
            .map(|(_, s)| *s)
    }

    pub fn as_map(&self) -> BTreeMap<u64, Split> {
        self.assignments.iter().copied().collect()
    }
}

/// Per-class counts by largest remainder, so each differs from its exact
/// proportion by less than one event.
pub fn proportional_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// Stratified split of the class-labeled events.
///
/// Classes are processed in ascending id order with one seeded generator;
/// within a class, events are shuffled and the first block goes to TRAIN, the
/// next to VALIDATION, the rest to TEST.
pub fn stratified_split(labeled: &[LabeledEvent], ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(input_err("split ratios must be positive and sum to 1"));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, e) in labeled.iter().enumerate() {
        if let Some(c) = e.label.class() {
            by_class.entry(c).or_default().push(i);
        }
    }
    if let Some((c, v)) = by_class.iter().find(|(_, v)| v.len() < 3) {
        return Err(input_err(format!("class {c} has only {} events; at least 3 required", v.len())));
    }
    let mut rng = rng_from_seed(seed);
    let mut split_of = vec![None; labeled.len()];
    for idx in by_class.values() {
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        let [n_train, n_val, _] = proportional_counts(shuffled.len(), ratios);
        for (k, &i) in shuffled.iter().enumerate() {
            split_of[i] = Some(if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            });
        }
    }
    Ok(SplitAssignment {
        assignments: labeled
            .iter()
            .zip(split_of)
            .filter_map(|(e, s)| s.map(|s| (e.event_id, s)))
            .collect(),
        ratios,
    })
}
