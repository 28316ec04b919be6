//! Backbones producing the five-level feature pyramid.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamBuilder};
use crate::tensor::ConvGeometry;

/// Output strides of `f1..f5`.
pub const STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderConfig {
    /// Five plain conv stages; small enough for CPU tests.
    LightweightToy {
        channels: [usize; 5],
        convs_per_stage: usize,
    },
    /// Multi-scale residual (Res2Net-style) bottleneck stages.
    Res2NetLike {
        stem: usize,
        planes: [usize; 4],
        blocks: [usize; 4],
        base_width: usize,
        scale: usize,
    },
}

impl EncoderConfig {
    pub fn toy() -> Self {
        EncoderConfig::LightweightToy {
            channels: [16, 24, 32, 48, 64],
            convs_per_stage: 2,
        }
    }

    /// Full-width layout: 64 / 256 / 512 / 1024 / 2048 channels.
    pub fn res2net50() -> Self {
        EncoderConfig::Res2NetLike {
            stem: 64,
            planes: [64, 128, 256, 512],
            blocks: [3, 4, 6, 3],
            base_width: 26,
            scale: 4,
        }
    }

    pub fn channels(&self) -> [usize; 5] {
        match self {
            EncoderConfig::LightweightToy { channels, .. } => *channels,
            EncoderConfig::Res2NetLike { stem, planes, .. } => [
                *stem,
                planes[0] * 4,
                planes[1] * 4,
                planes[2] * 4,
                planes[3] * 4,
            ],
        }
    }
}

/// Encoder outputs `f1..f5` at strides 2, 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
}

impl FeaturePyramid {
    /// Feature map `f_k` for `k` in `1..=5`.
    pub fn f(&self, k: usize) -> Var {
        self.levels[k - 1]
    }
}

struct Bottleneck {
    reduce: Conv2d,
    splits: Vec<Conv2d>,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
    width: usize,
    scale: usize,
    stride: usize,
}

impl Bottleneck {
    fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let y = self.reduce.forward_relu(tape, x)?;
        let mut outs = Vec::with_capacity(self.scale);
        let mut prev: Option<Var> = None;
        for (i, conv) in self.splits.iter().enumerate() {
            let part = tape.narrow_channels(y, i * self.width, self.width)?;
            let input = match prev {
                Some(p) if self.stride == 1 => tape.add(p, part)?,
                _ => part,
            };
            let out = conv.forward_relu(tape, input)?;
            outs.push(out);
            prev = Some(out);
        }
        let last = tape.narrow_channels(y, (self.scale - 1) * self.width, self.width)?;
        outs.push(tape.avg_pool(last, self.stride)?);
        let cat = tape.concat(&outs)?;
        let z = self.expand.forward(tape, cat)?;
        let identity = match &self.shortcut {
            Some(conv) => {
                let pooled = tape.avg_pool(x, self.stride)?;
                conv.forward(tape, pooled)?
            }
            None => x,
        };
        let sum = tape.add(z, identity)?;
        Ok(tape.relu(sum))
    }
}

enum Stage {
    Plain(Vec<Conv2d>),
    Residual(Vec<Bottleneck>),
}

pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, pb: &mut ParamBuilder<'_>) -> Result<Self> {
        let mut stages = Vec::with_capacity(5);
        match cfg {
            EncoderConfig::LightweightToy {
                channels,
                convs_per_stage,
            } => {
                if *convs_per_stage == 0 || channels.contains(&0) {
                    return Err(Error::Argument("toy encoder needs positive widths".into()));
                }
                let mut c_in = 1;
                for (k, &c) in channels.iter().enumerate() {
                    let mut sb = pb.sub(&format!("stage{}", k + 1));
                    let mut convs =
                        vec![sb.conv("conv0", c_in, c, ConvGeometry::new(3, 2, 1), true)?];
                    for j in 1..*convs_per_stage {
                        convs.push(sb.conv(
                            &format!("conv{j}"),
                            c,
                            c,
                            ConvGeometry::same(3),
                            true,
                        )?);
                    }
                    stages.push(Stage::Plain(convs));
                    c_in = c;
                }
            }
            EncoderConfig::Res2NetLike {
                stem,
                planes,
                blocks,
                base_width,
                scale,
            } => {
                if *scale < 2 || *base_width == 0 || *stem == 0 {
                    return Err(Error::Argument(
                        "res2net encoder needs scale >= 2 and positive widths".into(),
                    ));
                }
                let mut sb = pb.sub("stem");
                stages.push(Stage::Plain(vec![
                    sb.conv("conv0", 1, *stem, ConvGeometry::new(3, 2, 1), true)?,
                    sb.conv("conv1", *stem, *stem, ConvGeometry::same(3), true)?,
                ]));
                let mut c_in = *stem;
                for (s, (&p, &n)) in planes.iter().zip(blocks).enumerate() {
                    let width = (p * base_width / 64).max(1);
                    let c_out = p * 4;
                    let mut blocks_out = Vec::with_capacity(n);
                    for b in 0..n.max(1) {
                        let stride = if b == 0 { 2 } else { 1 };
                        let mut bb = pb.sub(&format!("layer{}.{b}", s + 1));
                        let reduce = bb.conv(
                            "reduce",
                            c_in,
                            width * scale,
                            ConvGeometry::new(1, 1, 0),
                            true,
                        )?;
                        let splits = (0..scale - 1)
                            .map(|i| {
                                bb.conv(
                                    &format!("split{i}"),
                                    width,
                                    width,
                                    ConvGeometry::new(3, stride, 1),
                                    true,
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let expand = bb.conv_with(
                            "expand",
                            width * scale,
                            c_out,
                            ConvGeometry::new(1, 1, 0),
                            true,
                            Init::Zeros,
                        )?;
                        let shortcut = if stride != 1 || c_in != c_out {
                            Some(bb.conv(
                                "shortcut",
                                c_in,
                                c_out,
                                ConvGeometry::new(1, 1, 0),
                                true,
                            )?)
                        } else {
                            None
                        };
                        blocks_out.push(Bottleneck {
                            reduce,
                            splits,
                            expand,
                            shortcut,
                            width,
                            scale: *scale,
                            stride,
                        });
                        c_in = c_out;
                    }
                    stages.push(Stage::Residual(blocks_out));
                }
            }
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn channels(&self) -> [usize; 5] {
        self.cfg.channels()
    }

    /// Runs the five stages. Input height and width must be multiples of 32.
    pub fn encode(&self, tape: &mut Tape<'_>, images: Var) -> Result<FeaturePyramid> {
        let s = tape.value(images).shape();
        if s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::Contract(format!(
                "encoder input {}x{} must have both sides divisible by 32",
                s.h, s.w
            )));
        }
        if s.c != 1 {
            return Err(Error::Contract(format!(
                "encoder expects one input channel, got {}",
                s.c
            )));
        }
        let mut x = images;
        let mut levels = [images; 5];
        for (k, stage) in self.stages.iter().enumerate() {
            x = match stage {
                Stage::Plain(convs) => {
                    let mut y = x;
                    for c in convs {
                        y = c.forward_relu(tape, y)?;
                    }
                    y
                }
                Stage::Residual(blocks) => {
                    let mut y = x;
                    for b in blocks {
                        y = b.forward(tape, y)?;
                    }
                    y
                }
            };
            levels[k] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}
