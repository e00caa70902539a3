//! Static information-flow analysis of an attention mask stacked over layers.
//!
//! One attention layer lets position `q` read position `k` whenever the mask
//! admits `(q, k)`. Residual connections keep every position's own state, so
//! the one-layer flow relation is the mask plus self-loops, and `L` layers
//! compose it `L` times.

use serde::Serialize;

use super::{AttentionMask, SegmentKind, SequenceLayout};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SegmentFlow {
    pub source: String,
    pub sink: String,
    /// Fewest layers after which some source position influences some sink
    /// position; `None` if it never does within the analysed depth.
    pub min_layers: Option<usize>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReachabilityReport {
    pub n_layers: usize,
    pub total_len: usize,
    pub flows: Vec<SegmentFlow>,
    /// Instruction/exemplar content reaches the generation tokens within
    /// `n_layers`.
    pub context_reaches_gen: bool,
    /// With the manipulation tokens removed, no instruction/exemplar position
    /// reaches any query or generation position at any depth.
    pub manip_is_vertex_cut: bool,
}

impl ReachabilityReport {
    pub fn flow(&self, source: SegmentKind, sink: SegmentKind) -> Option<&SegmentFlow> {
        let (s, t) = (source.to_string(), sink.to_string());
        self.flows.iter().find(|f| f.source == s && f.sink == t)
    }
}

/// Row-major boolean square matrix; `m[q][j]` means "j flows into q".
struct BoolMat {
    n: usize,
    bits: Vec<bool>,
}

impl BoolMat {
    fn one_layer(mask: &AttentionMask) -> Self {
        let n = mask.rows();
        let mut bits = vec![false; n * n];
        for q in 0..n {
            for k in 0..n.min(mask.cols()) {
                bits[q * n + k] = mask.allowed(q, k) || q == k;
            }
        }
        BoolMat { n, bits }
    }

    fn get(&self, q: usize, j: usize) -> bool {
        self.bits[q * self.n + j]
    }

    /// `self ∘ step`: paths of `self` followed by one more layer.
    fn then(&self, step: &BoolMat) -> BoolMat {
        let n = self.n;
        let mut bits = vec![false; n * n];
        for q in 0..n {
            for m in 0..n {
                if !step.get(q, m) {
                    continue;
                }
                let src = &self.bits[m * n..(m + 1) * n];
                let dst = &mut bits[q * n..(q + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d |= s;
                }
            }
        }
        BoolMat { n, bits }
    }
}

pub fn reachability_report(
    mask: &AttentionMask,
    layout: &SequenceLayout,
    n_layers: usize,
) -> ReachabilityReport {
    let n_layers = n_layers.max(1);
    let step = BoolMat::one_layer(mask);
    let mut powers = vec![BoolMat::one_layer(mask)];
    for _ in 1..n_layers {
        let next = powers.last().unwrap().then(&step);
        powers.push(next);
    }

    let segs = layout.segments();
    let mut flows = Vec::with_capacity(segs.len() * segs.len());
    for src in segs {
        for sink in segs {
            let min_layers = powers.iter().position(|r| {
                sink.range().any(|q| src.range().any(|j| r.get(q, j)))
            });
            flows.push(SegmentFlow {
                source: src.kind.to_string(),
                sink: sink.kind.to_string(),
                min_layers: min_layers.map(|l| l + 1),
            });
        }
    }

    let kinds = layout.kinds();
    let deepest = powers.last().unwrap();
    let gen = layout.range(SegmentKind::Gen);
    let context_reaches_gen = gen
        .clone()
        .any(|q| (0..kinds.len()).any(|j| kinds[j].is_context() && deepest.get(q, j)));

    ReachabilityReport {
        n_layers,
        total_len: layout.total_len(),
        flows,
        context_reaches_gen,
        manip_is_vertex_cut: cut_holds(mask, &kinds),
    }
}

/// Forward search over the flow graph with manipulation positions deleted.
fn cut_holds(mask: &AttentionMask, kinds: &[SegmentKind]) -> bool {
    let n = kinds.len();
    let mut seen = vec![false; n];
    let mut stack: Vec<usize> = (0..n).filter(|&j| kinds[j].is_context()).collect();
    for &j in &stack {
        seen[j] = true;
    }
    while let Some(j) = stack.pop() {
        for q in 0..n {
            if !seen[q] && kinds[q] != SegmentKind::Manip && mask.allowed(q, j) {
                seen[q] = true;
                stack.push(q);
            }
        }
    }
    !(0..n).any(|q| seen[q] && matches!(kinds[q], SegmentKind::Query | SegmentKind::Gen))
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::layout::{build_causal_mask, build_group_mask, build_layout};

    /// Breadth-first search over explicit (layer, position) nodes.
    fn layered_bfs(mask: &AttentionMask, from: &[usize], to: &[usize], layers: usize, skip: &[usize]) -> bool {
        let n = mask.rows();
        let mut seen = vec![vec![false; n]; layers + 1];
        let mut queue = VecDeque::new();
        for &p in from {
            seen[0][p] = true;
            queue.push_back((0usize, p));
        }
        while let Some((l, p)) = queue.pop_front() {
            if l == layers {
                continue;
            }
            for q in 0..n {
                if skip.contains(&q) {
                    continue;
                }
                if (q == p || mask.allowed(q, p)) && !seen[l + 1][q] {
                    seen[l + 1][q] = true;
                    queue.push_back((l + 1, q));
                }
            }
        }
        to.iter().any(|&q| seen[layers][q])
    }

    #[test]
    fn group_mask_needs_two_layers_to_reach_gen() {
        let l = build_layout(1, 1, 1, 1).unwrap();
        let m = build_group_mask(&l);
        let one = reachability_report(&m, &l, 1);
        assert_eq!(one.flow(SegmentKind::Instr, SegmentKind::Gen).unwrap().min_layers, None);
        assert!(!one.context_reaches_gen);
        let two = reachability_report(&m, &l, 2);
        assert_eq!(two.flow(SegmentKind::Instr, SegmentKind::Gen).unwrap().min_layers, Some(2));
        assert!(two.manip_is_vertex_cut);

        let instr: Vec<usize> = l.range(SegmentKind::Instr).collect();
        let gen: Vec<usize> = l.range(SegmentKind::Gen).collect();
        let manip: Vec<usize> = l.range(SegmentKind::Manip).collect();
        assert!(!layered_bfs(&m, &instr, &gen, 1, &[]));
        assert!(layered_bfs(&m, &instr, &gen, 2, &[]));
        for depth in 1..8 {
            assert!(!layered_bfs(&m, &instr, &gen, depth, &manip));
        }
    }

    #[test]
    fn causal_mask_has_direct_edge() {
        let l = build_layout(1, 1, 1, 1).unwrap();
        let m = build_causal_mask(&l);
        let r = reachability_report(&m, &l, 1);
        assert_eq!(r.flow(SegmentKind::Instr, SegmentKind::Gen).unwrap().min_layers, Some(1));
        assert!(!r.manip_is_vertex_cut);
    }

    #[test]
    fn report_matches_layered_bfs_everywhere() {
        for (t, v, m, k) in [(2, 2, 1, 1), (1, 3, 2, 2), (2, 1, 3, 3)] {
            let l = build_layout(t, v, m, k).unwrap();
            for mask in [build_group_mask(&l), build_causal_mask(&l)] {
                for layers in 1..=4 {
                    let r = reachability_report(&mask, &l, layers);
                    for src in l.segments() {
                        for sink in l.segments() {
                            let from: Vec<usize> = src.range().collect();
                            let to: Vec<usize> = sink.range().collect();
                            let want = (1..=layers).find(|&d| layered_bfs(&mask, &from, &to, d, &[]));
                            assert_eq!(r.flow(src.kind, sink.kind).unwrap().min_layers, want);
                        }
                    }
                    let ctx: Vec<usize> = (0..l.total_len()).filter(|&p| l.kinds()[p].is_context()).collect();
                    let out: Vec<usize> = l.range(SegmentKind::Query).chain(l.range(SegmentKind::Gen)).collect();
                    let manip: Vec<usize> = l.range(SegmentKind::Manip).collect();
                    let depth = l.total_len();
                    let leaks = (1..=depth).any(|d| layered_bfs(&mask, &ctx, &out, d, &manip));
                    assert_eq!(r.manip_is_vertex_cut, !leaks);
                }
            }
        }
    }
}
