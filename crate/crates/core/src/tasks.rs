//! Seeded synthetic classification tasks. Every label is recomputable from
//! the tokens (and segment map) by [`oracle_label`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::SegmentMap;
use crate::tensor::SeededRng;

/// Token that marks the following position in the parity task.
pub const PARITY_MARKER: u32 = 0;
/// Most markers placed in one parity sequence.
pub const PARITY_MAX_MARKERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Which segment holds the largest token id (unique by construction).
    SegmentMaxId,
    /// Whether any token occurs twice.
    DuplicateDetect,
    /// Parity of the sum of tokens that directly follow a marker.
    Parity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub length: usize,
    pub vocab: usize,
    /// Segments per sequence (even split).
    #[serde(default = "default_segments")]
    pub segments: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_segments() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub seg: SegmentMap,
    pub label: usize,
}

impl TaskSpec {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::SegmentMaxId => self.segments,
            TaskKind::DuplicateDetect | TaskKind::Parity => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("task length must be positive"));
        }
        if self.segments == 0 || self.segments > self.length {
            return Err(Error::InvalidK { k: self.segments, n: self.length });
        }
        match self.kind {
            TaskKind::DuplicateDetect if self.vocab < self.length => Err(Error::config(format!(
                "duplicate_detect needs vocab >= length to build duplicate-free negatives ({} < {})",
                self.vocab, self.length
            ))),
            TaskKind::DuplicateDetect if self.length < 2 => Err(Error::config("duplicate_detect needs length >= 2")),
            TaskKind::SegmentMaxId if self.segments < 2 => {
                Err(Error::config("segment_max_id needs at least two segments"))
            }
            TaskKind::SegmentMaxId if self.vocab < 2 => Err(Error::config("segment_max_id needs vocab >= 2")),
            TaskKind::Parity if self.vocab < 3 || self.length < 2 => {
                Err(Error::config("parity needs vocab >= 3 and length >= 2"))
            }
            _ => Ok(()),
        }
    }
}

/// Recomputes the label of a sequence from its content.
pub fn oracle_label(kind: TaskKind, tokens: &[u32], seg: &SegmentMap) -> usize {
    match kind {
        TaskKind::SegmentMaxId => {
            let (pos, _) = tokens.iter().enumerate().fold((0, 0), |best, (i, &t)| if t > best.1 { (i, t) } else { best });
            seg.segment_of(pos)
        }
        TaskKind::DuplicateDetect => {
            let mut seen = std::collections::HashSet::new();
            usize::from(!tokens.iter().all(|t| seen.insert(*t)))
        }
        TaskKind::Parity => {
            let sum: u32 = tokens
                .windows(2)
                .filter(|w| w[0] == PARITY_MARKER && w[1] != PARITY_MARKER)
                .map(|w| w[1])
                .sum();
            (sum % 2) as usize
        }
    }
}

/// Draws one sample with a balanced label.
pub fn sample(spec: &TaskSpec, rng: &mut SeededRng) -> Result<Sample> {
    let n = spec.length;
    let seg = SegmentMap::even(n, spec.segments)?;
    let tokens = match spec.kind {
        TaskKind::SegmentMaxId => {
            // the maximum comes from the upper half of the vocabulary and
            // every other token from the lower half
            let half = spec.vocab / 2;
            let top = (half + rng.below(spec.vocab - half)) as u32;
            let mut t: Vec<u32> = (0..n).map(|_| rng.below(half) as u32).collect();
            t[rng.below(n)] = top;
            t
        }
        TaskKind::DuplicateDetect => {
            let mut pool: Vec<u32> = (0..spec.vocab as u32).collect();
            rng.shuffle(&mut pool);
            let mut t = pool[..n].to_vec();
            // distinct tokens; positives overwrite one position with a copy
            // of another
            if rng.bernoulli(0.5) {
                let src = rng.below(n);
                let mut dst = rng.below(n - 1);
                if dst >= src {
                    dst += 1;
                }
                t[dst] = t[src];
            }
            t
        }
        TaskKind::Parity => {
            // zero markers always give an even sum, so pick the label first
            let odd = rng.bernoulli(0.5);
            let mut t: Vec<u32> = (0..n).map(|_| 1 + rng.below(spec.vocab - 1) as u32).collect();
            let markers = if odd { 1 + rng.below(PARITY_MAX_MARKERS) } else { rng.below(PARITY_MAX_MARKERS + 1) };
            let mut first = None;
            let mut placed = 0;
            while placed < markers {
                let p = rng.below(n - 1);
                let clear = t[p] != PARITY_MARKER
                    && t[p + 1] != PARITY_MARKER
                    && (p == 0 || t[p - 1] != PARITY_MARKER);
                if clear {
                    t[p] = PARITY_MARKER;
                    first.get_or_insert(p + 1);
                    placed += 1;
                }
            }
            if oracle_label(TaskKind::Parity, &t, &seg) != usize::from(odd) {
                let m = first.expect("an odd target always has a marker");
                t[m] = if (t[m] as usize) + 1 < spec.vocab { t[m] + 1 } else { t[m] - 1 };
            }
            t
        }
    };
    let label = oracle_label(spec.kind, &tokens, &seg);
    Ok(Sample { tokens, seg, label })
}

/// `count` samples from the stream seeded by `spec.seed` and `stream`.
pub fn gen_task(spec: &TaskSpec, stream: u64, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed).fork(stream);
    (0..count).map(|_| sample(spec, &mut rng)).collect()
}
