use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::task::{Episode, Guidance, TaskWorld, DESCRIPTOR_DIM};
use crate::tensor::Tensor;

/// Model-ready tensors for a batch of episodes sharing one `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    /// `[B, DESCRIPTOR_DIM]`.
    pub descriptors: Tensor,
    /// One `[B, v, token_dim]` tensor per shot.
    pub exemplar_src: Vec<Tensor>,
    pub exemplar_tgt: Vec<Tensor>,
    pub query: Tensor,
    pub target: Tensor,
    /// Frozen instruction embeddings, `[B, phi_dim]`, unit rows. Never
    /// affected by guidance.
    pub phi: Tensor,
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let inner = parts.first().map(|t| t.shape().to_vec()).unwrap_or_default();
    let mut shape = vec![parts.len()];
    shape.extend(&inner);
    let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
    for p in parts {
        if p.shape() != inner.as_slice() {
            return Err(Error::Shape {
                op: "stack",
                lhs: inner,
                rhs: p.shape().to_vec(),
            });
        }
        data.extend(p.into_data());
    }
    Tensor::new(shape, data)
}

impl EpisodeBatch {
    pub fn from_episodes(episodes: &[Episode], world: &TaskWorld, guidance: Guidance) -> Result<Self> {
        let k = episodes.first().map(Episode::k).ok_or_else(|| Error::Episode("empty batch".into()))?;
        if let Some(e) = episodes.iter().find(|e| e.k() != k) {
            return Err(Error::Episode(format!("mixed shot counts in one batch: {k} and {}", e.k())));
        }
        let codec = &world.codec;
        let mut descriptors = Vec::with_capacity(episodes.len() * DESCRIPTOR_DIM);
        let mut phi = Vec::with_capacity(episodes.len() * world.embedder.dim());
        for e in episodes {
            if guidance == Guidance::VisualOnly {
                descriptors.extend([0.0; DESCRIPTOR_DIM]);
            } else {
                descriptors.extend(world.embedder.descriptor(&e.rule));
            }
            phi.extend(world.embedder.embed(&e.rule));
        }
        let encode_all = |pick: &dyn Fn(&Episode) -> &crate::task::Image, zero: bool| -> Result<Tensor> {
            let toks = episodes
                .iter()
                .map(|e| {
                    let t = codec.encode(pick(e))?;
                    Ok(if zero { Tensor::zeros(t.shape().to_vec()) } else { t })
                })
                .collect::<Result<Vec<_>>>()?;
            stack(toks)
        };
        let text_only = guidance == Guidance::TextOnly;
        let mut exemplar_src = Vec::with_capacity(k);
        let mut exemplar_tgt = Vec::with_capacity(k);
        for i in 0..k {
            exemplar_src.push(encode_all(&|e: &Episode| &e.exemplars[i].0, text_only)?);
            exemplar_tgt.push(encode_all(&|e: &Episode| &e.exemplars[i].1, text_only)?);
        }
        Ok(EpisodeBatch {
            descriptors: Tensor::new([episodes.len(), DESCRIPTOR_DIM], descriptors)?,
            exemplar_src,
            exemplar_tgt,
            query: encode_all(&|e: &Episode| &e.query, false)?,
            target: encode_all(&|e: &Episode| &e.target, false)?,
            phi: Tensor::new([episodes.len(), world.embedder.dim()], phi)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.descriptors.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.exemplar_src.len()
    }

    pub fn image_tokens(&self) -> usize {
        self.query.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.query.shape()[2]
    }

    /// Rejects a batch that does not fit `layout`.
    pub fn check_layout(&self, layout: &SequenceLayout) -> Result<()> {
        if self.k() != layout.n_shots() || self.image_tokens() != layout.image_len() {
            return Err(Error::Layout(format!(
                "batch has k={} and {} tokens per image, layout expects k={} and {}",
                self.k(),
                self.image_tokens(),
                layout.n_shots(),
                layout.image_len()
            )));
        }
        Ok(())
    }
}
