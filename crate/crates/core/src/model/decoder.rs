//! Parallel partial decoder: aggregates `f3..f5` into the coarse global map.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{Conv2d, ParamBuilder};
use crate::tensor::ConvGeometry;

pub struct PartialDecoder {
    reduce: [Conv2d; 3],
    fuse: Conv2d,
    project: Conv2d,
}

impl PartialDecoder {
    /// `channels` are the widths of `f3`, `f4`, `f5`.
    pub fn new(channels: [usize; 3], width: usize, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let pointwise = ConvGeometry::new(1, 1, 0);
        Ok(PartialDecoder {
            reduce: [
                pb.conv("reduce3", channels[0], width, pointwise, true)?,
                pb.conv("reduce4", channels[1], width, pointwise, true)?,
                pb.conv("reduce5", channels[2], width, pointwise, true)?,
            ],
            fuse: pb.conv("fuse", 3 * width, width, ConvGeometry::same(3), true)?,
            project: pb.conv("project", width, 1, pointwise, true)?,
        })
    }

    /// Returns the single-channel global map at the resolution of `f3`.
    pub fn forward(&self, tape: &mut Tape<'_>, f3: Var, f4: Var, f5: Var) -> Result<Var> {
        let s3 = tape.value(f3).shape();
        let r3 = self.reduce[0].forward_relu(tape, f3)?;
        let r4 = self.reduce[1].forward_relu(tape, f4)?;
        let r5 = self.reduce[2].forward_relu(tape, f5)?;
        let u4 = tape.resize(r4, s3.h, s3.w);
        let u5 = tape.resize(r5, s3.h, s3.w);
        // Each shallower branch is gated by every deeper one.
        let b4 = tape.mul(u4, u5)?;
        let g3 = tape.mul(r3, u4)?;
        let b3 = tape.mul(g3, u5)?;
        let cat = tape.concat(&[b3, b4, u5])?;
        let fused = self.fuse.forward_relu(tape, cat)?;
        self.project.forward(tape, fused)
    }
}
