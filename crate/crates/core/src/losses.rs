//! Reconstruction loss, relation regularization and their combination.
//!
//! The relation term compares, per block, the Gram matrix of the batch's
//! manipulation summaries with the Gram matrix of the frozen instruction
//! embeddings:
//!
//! ```text
//! relation = (1/N) Σᵢ ‖Z̄ᵢ Z̄ᵢᵀ − φ φᵀ‖_F²
//! total    = recon + α · relation
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Tolerance on the unit norm of summary and embedding rows.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub relation: f64,
    pub total: f64,
    pub alpha: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::NegativeAlpha(alpha));
    }
    Ok(())
}

/// Rejects a matrix (or stack of matrices) whose last-axis rows are not unit.
fn check_unit_rows(t: &Tensor, what: &'static str) -> Result<()> {
    let d = t.last_dim();
    for (row, r) in t.data().chunks(d.max(1)).enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotNormalized { what, row, norm });
        }
    }
    Ok(())
}

fn gram(rows: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut g = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            g[i * b + j] = (0..d).map(|c| rows[i * d + c] * rows[j * d + c]).sum();
        }
    }
    g
}

/// Mean squared difference over all entries.
pub fn recon_loss(gen_out: &Tensor, target: &Tensor) -> Result<f64> {
    if gen_out.shape() != target.shape() {
        return Err(Error::Shape {
            op: "recon_loss",
            lhs: gen_out.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = gen_out.len().max(1) as f64;
    Ok(gen_out.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `zbars` is `[N, B, D]`, `phi` is `[B, P]`; all rows unit.
pub fn relation_loss(zbars: &Tensor, phi: &Tensor) -> Result<f64> {
    let (zs, ps) = (zbars.shape(), phi.shape());
    if zs.len() != 3 || ps.len() != 2 || zs[1] != ps[0] {
        return Err(Error::Shape {
            op: "relation_loss",
            lhs: zs.to_vec(),
            rhs: ps.to_vec(),
        });
    }
    check_unit_rows(zbars, "zbars")?;
    check_unit_rows(phi, "phi")?;
    let (n, b, d) = (zs[0], zs[1], zs[2]);
    let target = gram(phi.data(), b, ps[1]);
    let total: f64 = zbars
        .data()
        .chunks(b * d)
        .map(|block| {
            gram(block, b, d)
                .iter()
                .zip(&target)
                .map(|(a, t)| (a - t) * (a - t))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

pub fn total_loss(recon: f64, relation: f64, alpha: f64) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    Ok(LossBreakdown {
        recon,
        relation,
        total: recon + alpha * relation,
        alpha,
    })
}

pub fn recon_loss_graph(g: &mut Graph, gen_out: Var, target: &Tensor) -> Result<Var> {
    let t = g.input(target.clone());
    let diff = g.sub(gen_out, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Graph form of [`relation_loss`]; `phi` enters as a constant.
pub fn relation_loss_graph(g: &mut Graph, zbars: &[Var], phi: &Tensor) -> Result<Var> {
    if zbars.is_empty() {
        return Err(Error::Shape {
            op: "relation_loss",
            lhs: vec![0],
            rhs: phi.shape().to_vec(),
        });
    }
    check_unit_rows(phi, "phi")?;
    let target = phi.matmul(&phi.transpose()?)?;
    let target = g.input(target);
    let mut acc: Option<Var> = None;
    for &z in zbars {
        check_unit_rows(g.value(z), "zbars")?;
        let zt = g.transpose(z)?;
        let gz = g.matmul(z, zt)?;
        let diff = g.sub(gz, target)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(g.scale(acc.expect("non-empty"), 1.0 / zbars.len() as f64))
}

/// Graph handles for each term of the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub recon: Var,
    pub relation: Var,
    pub total: Var,
}

pub fn total_loss_graph(g: &mut Graph, recon: Var, relation: Var, alpha: f64) -> Result<LossVars> {
    check_alpha(alpha)?;
    let weighted = g.scale(relation, alpha);
    let total = g.add(recon, weighted)?;
    Ok(LossVars { recon, relation, total })
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph, alpha: f64) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            recon: g.value(self.recon).item()?,
            relation: g.value(self.relation).item()?,
            total: g.value(self.total).item()?,
            alpha,
        })
    }
}
