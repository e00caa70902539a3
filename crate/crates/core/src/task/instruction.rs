//! Instruction descriptors and the frozen instruction embedder.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::rules::{Rule, RuleFamily};
use crate::tensor::Tensor;

const PARAM_SLOTS: usize = 5;

/// Length of [`descriptor`]: a family one-hot followed by parameter slots.
pub const DESCRIPTOR_DIM: usize = RuleFamily::ALL.len() + PARAM_SLOTS;

/// Fixed-length instruction descriptor. Parameters are scaled to roughly
/// `[-1, 1]`; angles are encoded as `(cos, sin)`.
pub fn descriptor(rule: &Rule) -> [f64; DESCRIPTOR_DIM] {
    let mut d = [0.0; DESCRIPTOR_DIM];
    d[rule.family().index()] = 1.0;
    let slots = &mut d[RuleFamily::ALL.len()..];
    match *rule {
        Rule::ChannelPermute { perm } => {
            for (s, p) in slots.iter_mut().zip(perm) {
                *s = p as f64 - 1.0;
            }
        }
        Rule::Brightness { delta } => slots[0] = delta / 0.3,
        Rule::HueShift { degrees } => {
            let (s, c) = degrees.to_radians().sin_cos();
            slots[0] = c;
            slots[1] = s;
        }
        Rule::HFlip { blend } => slots[0] = 2.0 * blend - 1.0,
        Rule::Rot90 { turns } => {
            let (s, c) = (f64::from(turns) * std::f64::consts::FRAC_PI_2).sin_cos();
            slots[0] = c.round();
            slots[1] = s.round();
        }
        Rule::RegionRecolor { quadrant, color } => {
            slots[0] = if quadrant % 2 == 1 { 1.0 } else { -1.0 };
            slots[1] = if quadrant >= 2 { 1.0 } else { -1.0 };
            for (s, c) in slots[2..].iter_mut().zip(color) {
                *s = 2.0 * c - 1.0;
            }
        }
        Rule::Contrast { factor } => slots[0] = (factor - 1.0) / 0.6,
    }
    d
}

/// What the instruction says about a rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InstructionDetail {
    /// Family and exact parameters.
    #[default]
    Full,
    /// Family only; the amount, direction or colour has to come from the
    /// exemplars.
    Family,
}

/// Frozen map from descriptors to unit vectors; the relation target for
/// the manipulation summaries.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedder {
    /// `dim × DESCRIPTOR_DIM`.
    matrix: Tensor,
    detail: InstructionDetail,
}

impl InstructionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (DESCRIPTOR_DIM as f64).sqrt();
        let data = (0..dim * DESCRIPTOR_DIM)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        InstructionEmbedder {
            matrix: Tensor::new([dim, DESCRIPTOR_DIM], data).expect("shape"),
            detail: InstructionDetail::Full,
        }
    }

    pub fn with_detail(self, detail: InstructionDetail) -> Self {
        InstructionEmbedder { detail, ..self }
    }

    /// The descriptor as the model sees it.
    pub fn descriptor(&self, rule: &Rule) -> [f64; DESCRIPTOR_DIM] {
        let mut d = descriptor(rule);
        if self.detail == InstructionDetail::Family {
            d[RuleFamily::ALL.len()..].fill(0.0);
        }
        d
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn embed(&self, rule: &Rule) -> Vec<f64> {
        let d = self.descriptor(rule);
        let mut out: Vec<f64> = (0..self.dim())
            .map(|i| self.matrix.row(i).iter().zip(&d).map(|(a, b)| a * b).sum())
            .collect();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter_mut().for_each(|v| *v /= norm);
        out
    }
}

pub fn embed_instruction(embedder: &InstructionEmbedder, rule: &Rule) -> Vec<f64> {
    embedder.embed(rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskConfig;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn unit_norm_and_deterministic() {
        let e = InstructionEmbedder::new(16, TaskConfig::default().embedder_seed);
        let r = Rule::Contrast { factor: 1.3 };
        let phi = e.embed(&r);
        assert!((phi.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        assert_eq!(phi, e.embed(&r));
    }

    #[test]
    fn similar_rules_embed_closer() {
        let e = InstructionEmbedder::new(16, TaskConfig::default().embedder_seed);
        let a = e.embed(&Rule::Brightness { delta: 0.2 });
        let b = e.embed(&Rule::Brightness { delta: 0.25 });
        let c = e.embed(&Rule::HFlip { blend: 1.0 });
        assert!(cos(&a, &b) > cos(&a, &c));
    }

    #[test]
    fn family_detail_hides_parameters() {
        let e = InstructionEmbedder::new(16, 11).with_detail(InstructionDetail::Family);
        let a = Rule::HueShift { degrees: 30.0 };
        let b = Rule::HueShift { degrees: 200.0 };
        assert_eq!(e.descriptor(&a), e.descriptor(&b));
        assert_eq!(e.embed(&a), e.embed(&b));
        assert_ne!(e.embed(&a), e.embed(&Rule::Contrast { factor: 1.3 }));
        let full = InstructionEmbedder::new(16, 11);
        assert_ne!(full.embed(&a), full.embed(&b));
    }
}
