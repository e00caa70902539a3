//! Frozen patch codec: each `p×p×3` patch is flattened and multiplied by a
//! fixed seeded orthogonal matrix, so decoding is the exact transpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    grid: usize,
    patch: usize,
    /// `token_dim × token_dim`, orthonormal rows.
    w: Tensor,
}

/// Random orthogonal matrix via modified Gram–Schmidt on Gaussian rows.
fn orthogonal(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        // two passes keep the rows orthogonal to machine precision
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&rows).expect("square")
}

impl Codec {
    pub fn new(grid: usize, patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 || grid == 0 || !grid.is_multiple_of(patch) {
            return Err(Error::Codec(format!(
                "grid {grid} is not divisible by patch size {patch}"
            )));
        }
        let d = patch * patch * CHANNELS;
        Ok(Codec {
            grid,
            patch,
            w: orthogonal(d, seed),
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Tokens per image, `(grid/patch)²`.
    pub fn n_tokens(&self) -> usize {
        (self.grid / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    pub fn matrix(&self) -> &Tensor {
        &self.w
    }

    fn patches(&self, image: &Image) -> Vec<f64> {
        let (p, per_row) = (self.patch, self.grid / self.patch);
        let mut out = Vec::with_capacity(image.data().len());
        for py in 0..per_row {
            for px in 0..per_row {
                for dy in 0..p {
                    for dx in 0..p {
                        out.extend_from_slice(&image.pixel(py * p + dy, px * p + dx));
                    }
                }
            }
        }
        out
    }

    /// `v × token_dim` tokens of `image`, raster patch order.
    pub fn encode(&self, image: &Image) -> Result<Tensor> {
        if image.size() != self.grid {
            return Err(Error::Codec(format!(
                "image size {} does not match codec grid {}",
                image.size(),
                self.grid
            )));
        }
        let d = self.token_dim();
        let flat = Tensor::new([self.n_tokens(), d], self.patches(image))?;
        // row-vector form: token = patch · Wᵀ
        flat.matmul(&self.w.transpose()?)
    }

    pub fn decode(&self, tokens: &Tensor) -> Result<Image> {
        let d = self.token_dim();
        if tokens.shape() != [self.n_tokens(), d] {
            return Err(Error::Shape {
                op: "decode",
                lhs: tokens.shape().to_vec(),
                rhs: vec![self.n_tokens(), d],
            });
        }
        let flat = tokens.matmul(&self.w)?;
        let (p, per_row) = (self.patch, self.grid / self.patch);
        let mut img = Image::zeros(self.grid);
        for (i, patch) in flat.data().chunks(d).enumerate() {
            let (py, px) = (i / per_row, i % per_row);
            for dy in 0..p {
                for dx in 0..p {
                    let o = (dy * p + dx) * CHANNELS;
                    img.set_pixel(py * p + dy, px * p + dx, [patch[o], patch[o + 1], patch[o + 2]]);
                }
            }
        }
        Ok(img)
    }
}

pub fn encode_image(codec: &Codec, image: &Image) -> Result<Tensor> {
    codec.encode(image)
}

pub fn decode_image(codec: &Codec, tokens: &Tensor) -> Result<Image> {
    codec.decode(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::image::{sample_image, ContentFamily};

    #[test]
    fn orthogonality_and_round_trip() {
        let c = Codec::new(8, 2, 7).unwrap();
        assert_eq!(c.n_tokens(), 16);
        let wtw = c.matrix().transpose().unwrap().matmul(c.matrix()).unwrap();
        assert!(wtw.max_abs_diff(&Tensor::identity(12)) <= 1e-10);
        for fam in ContentFamily::ALL {
            let img = sample_image(fam, 3, 8);
            let tok = c.encode(&img).unwrap();
            let back = c.decode(&tok).unwrap();
            let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-10);
            let energy: f64 = img.data().iter().map(|v| v * v).sum();
            assert!((tok.sq_norm() - energy).abs() <= 1e-9);
        }
    }

    #[test]
    fn zero_image_gives_zero_tokens() {
        let c = Codec::new(8, 2, 7).unwrap();
        assert!(c.encode(&Image::zeros(8)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divisibility_enforced() {
        assert!(Codec::new(8, 3, 1).is_err());
    }
}
