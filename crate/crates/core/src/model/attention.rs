//! Edge attention and cascaded reverse attention.

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{contract, Result};
use crate::nn::{Conv2d, ParamBuilder};
use crate::tensor::{ConvGeometry, Tensor};

/// One-filter convolution over `f2` producing edge logits; the attention
/// features passed on to the reverse-attention stages are `f2` itself.
pub struct EdgeAttention {
    head: Conv2d,
}

impl EdgeAttention {
    pub fn new(f2_channels: usize, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        Ok(EdgeAttention {
            head: pb.conv("head", f2_channels, 1, ConvGeometry::same(3), true)?,
        })
    }

    /// Returns `(e_att, S_e)`.
    pub fn forward(&self, tape: &mut Tape<'_>, f2: Var) -> Result<(Var, Var)> {
        let s_e = self.head.forward(tape, f2)?;
        Ok((f2, s_e))
    }
}

/// `1 - sigmoid(resize(s_next))` expanded to `channels` identical planes.
pub fn reverse_attention_weight(
    tape: &mut Tape<'_>,
    s_next: Var,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<Var> {
    let up = tape.resize(s_next, height, width);
    let prob = tape.sigmoid(up);
    let reversed = tape.affine(prob, -1.0, 1.0);
    tape.expand_channels(reversed, channels)
}

/// Tape-free evaluation of [`reverse_attention_weight`] before expansion.
pub fn reverse_attention_map(s_next: &Tensor, height: usize, width: usize) -> Tensor {
    s_next
        .resize_bilinear(height, width)
        .map(|v| 1.0 - sigmoid(v))
}

pub struct ReverseAttentionStage {
    level: usize,
    fuse: [Conv2d; 2],
    head: Conv2d,
    channels: usize,
    uses_edges: bool,
}

pub struct StageOutput {
    pub features: Var,
    pub attention: Var,
    pub side_output: Var,
}

impl ReverseAttentionStage {
    /// `level` is the pyramid level `i` in `3..=5`.
    pub fn new(
        level: usize,
        feature_channels: usize,
        edge_channels: Option<usize>,
        channels: usize,
        pb: &mut ParamBuilder<'_>,
    ) -> Result<Self> {
        let c_in = feature_channels + edge_channels.unwrap_or(0);
        Ok(ReverseAttentionStage {
            level,
            fuse: [
                pb.conv("fuse0", c_in, channels, ConvGeometry::same(3), true)?,
                pb.conv("fuse1", channels, channels, ConvGeometry::same(3), true)?,
            ],
            head: pb.conv("head", channels, 1, ConvGeometry::same(3), true)?,
            channels,
            uses_edges: edge_channels.is_some(),
        })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// `R_i = C(f_i, Dow(e_att)) * A_i` and `S_i = head(R_i) + resize(S_next)`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        f_i: Var,
        e_att: Option<Var>,
        s_next: Var,
    ) -> Result<StageOutput> {
        let fs = tape.value(f_i).shape();
        let fused_in = match (self.uses_edges, e_att) {
            (true, Some(e)) => {
                let es = tape.value(e).shape();
                contract!(
                    es.h % fs.h == 0 && es.h / fs.h == es.w / fs.w && es.w % fs.w == 0,
                    "edge features {es} cannot be pooled onto level-{} features {fs}",
                    self.level
                );
                let pooled = tape.avg_pool(e, es.h / fs.h)?;
                tape.concat(&[f_i, pooled])?
            }
            (true, None) => {
                return Err(crate::error::Error::Contract(
                    "reverse attention stage built with edge features but none supplied".into(),
                ))
            }
            (false, _) => f_i,
        };
        let c0 = self.fuse[0].forward_relu(tape, fused_in)?;
        let fused = self.fuse[1].forward_relu(tape, c0)?;
        let attention = reverse_attention_weight(tape, s_next, fs.h, fs.w, self.channels)?;
        let features = tape.mul(fused, attention)?;
        let refined = self.head.forward(tape, features)?;
        let guide = tape.resize(s_next, fs.h, fs.w);
        let side_output = tape.add(refined, guide)?;
        Ok(StageOutput {
            features,
            attention,
            side_output,
        })
    }
}
