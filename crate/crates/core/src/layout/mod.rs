//! Prompt layout and attention masks.
//!
//! A prompt is laid out as
//!
//! ```text
//! INSTR | EX_SRC(1) EX_TGT(1) ... EX_SRC(k) EX_TGT(k) | MANIP | QUERY | GEN
//! ```
//!
//! The group mask splits it into two causally-masked groups. Group 1 holds
//! the instruction, the exemplar pairs and the manipulation tokens; group 2
//! holds the manipulation tokens, the query image and the generation tokens.
//! Manipulation tokens are the only positions both groups can see.

mod reach;

pub use reach::{reachability_report, ReachabilityReport, SegmentFlow};

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Instr,
    /// Source image of exemplar pair `i` (1-based).
    ExSrc(usize),
    /// Target image of exemplar pair `i` (1-based).
    ExTgt(usize),
    Manip,
    Query,
    Gen,
}

impl SegmentKind {
    /// Member of the instruction/exemplar group.
    pub fn in_group1(self) -> bool {
        !matches!(self, SegmentKind::Query | SegmentKind::Gen)
    }

    /// Member of the query/generation group.
    pub fn in_group2(self) -> bool {
        matches!(self, SegmentKind::Manip | SegmentKind::Query | SegmentKind::Gen)
    }

    /// Instruction or exemplar content: the side the bridge must separate.
    pub fn is_context(self) -> bool {
        matches!(self, SegmentKind::Instr | SegmentKind::ExSrc(_) | SegmentKind::ExTgt(_))
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentKind::Instr => f.write_str("INSTR"),
            SegmentKind::ExSrc(i) => write!(f, "EX_SRC({i})"),
            SegmentKind::ExTgt(i) => write!(f, "EX_TGT({i})"),
            SegmentKind::Manip => f.write_str("MANIP"),
            SegmentKind::Query => f.write_str("QUERY"),
            SegmentKind::Gen => f.write_str("GEN"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    segments: Vec<Segment>,
    n_shots: usize,
    instr_len: usize,
    image_len: usize,
    manip_len: usize,
    total_len: usize,
}

/// Builds the canonical layout for `k` exemplar pairs, `t` instruction
/// tokens, `v` tokens per image and `m` manipulation tokens.
pub fn build_layout(t: usize, v: usize, m: usize, k: usize) -> Result<SequenceLayout> {
    for (name, value) in [("t", t), ("v", v), ("m", m), ("k", k)] {
        if value == 0 {
            return Err(Error::Layout(format!("{name} must be at least 1")));
        }
    }
    let mut kinds = vec![(SegmentKind::Instr, t)];
    for i in 1..=k {
        kinds.push((SegmentKind::ExSrc(i), v));
        kinds.push((SegmentKind::ExTgt(i), v));
    }
    kinds.extend([(SegmentKind::Manip, m), (SegmentKind::Query, v), (SegmentKind::Gen, v)]);

    let mut start = 0;
    let segments = kinds
        .into_iter()
        .map(|(kind, len)| {
            let s = Segment { kind, start, len };
            start += len;
            s
        })
        .collect();
    Ok(SequenceLayout {
        segments,
        n_shots: k,
        instr_len: t,
        image_len: v,
        manip_len: m,
        total_len: start,
    })
}

impl SequenceLayout {
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_shots(&self) -> usize {
        self.n_shots
    }

    pub fn instr_len(&self) -> usize {
        self.instr_len
    }

    pub fn image_len(&self) -> usize {
        self.image_len
    }

    pub fn manip_len(&self) -> usize {
        self.manip_len
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn range(&self, kind: SegmentKind) -> Range<usize> {
        self.segment(kind).map_or(0..0, Segment::range)
    }

    /// Segment kind at every position.
    pub fn kinds(&self) -> Vec<SegmentKind> {
        let mut out = Vec::with_capacity(self.total_len);
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.kind, s.len));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    #[default]
    Group,
    Causal,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::Group => "group",
            MaskKind::Causal => "causal",
        })
    }
}

impl std::str::FromStr for MaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "group" => Ok(MaskKind::Group),
            "causal" => Ok(MaskKind::Causal),
            other => Err(format!("unknown mask kind `{other}` (expected group or causal)")),
        }
    }
}

/// Boolean query×key admissibility matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allowed.push(f(q, k));
            }
        }
        AttentionMask {
            rows,
            cols,
            allowed,
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Layout("mask rows have different lengths".into()));
        }
        Ok(AttentionMask {
            rows: rows.len(),
            cols,
            allowed: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.cols..(q + 1) * self.cols]
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&b| b).count()
    }

    /// Admissible keys of row `q`.
    pub fn keys(&self, q: usize) -> Vec<usize> {
        (0..self.cols).filter(|&k| self.allowed(q, k)).collect()
    }

    /// Elementwise `self ⇒ other`.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| !a || b)
    }

    /// First row with no admissible key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&q| !self.row(q).iter().any(|&b| b))
    }
}

/// Group self-attention mask: causal within each group, with the
/// manipulation tokens taking their group-1 semantics as queries.
pub fn build_group_mask(layout: &SequenceLayout) -> AttentionMask {
    let kinds = layout.kinds();
    let n = layout.total_len();
    AttentionMask::from_fn(n, n, |q, k| {
        if k > q {
            return false;
        }
        match kinds[q] {
            SegmentKind::Query | SegmentKind::Gen => kinds[k].in_group2(),
            _ => kinds[k].in_group1(),
        }
    })
}

/// Plain lower-triangular mask.
pub fn build_causal_mask(layout: &SequenceLayout) -> AttentionMask {
    let n = layout.total_len();
    AttentionMask::from_fn(n, n, |q, k| k <= q)
}

pub fn build_mask(layout: &SequenceLayout, kind: MaskKind) -> AttentionMask {
    match kind {
        MaskKind::Group => build_group_mask(layout),
        MaskKind::Causal => build_causal_mask(layout),
    }
}
