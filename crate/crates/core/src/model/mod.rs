//! The segmentation network: encoder, edge attention, partial decoder and
//! three cascaded reverse-attention stages.

mod attention;
mod decoder;
mod encoder;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamBuilder, ParamStore};
use crate::plane::Plane;
use crate::tensor::{ConvGeometry, Tensor};

pub use attention::{
    reverse_attention_map, reverse_attention_weight, EdgeAttention, ReverseAttentionStage,
    StageOutput,
};
pub use decoder::PartialDecoder;
pub use encoder::{Encoder, EncoderConfig, FeaturePyramid, STRIDES};

/// Which optional components are wired in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    pub edge_attention: bool,
    pub partial_decoder: bool,
    pub reverse_attention: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        edge_attention: true,
        partial_decoder: true,
        reverse_attention: true,
    };

    /// The seven ablation rows, from bare backbone to the full network.
    pub const TABLE: [(&'static str, Ablation); 7] = [
        ("No.1 Backbone", Ablation::new(false, false, false)),
        ("No.2 Backbone+EA", Ablation::new(true, false, false)),
        ("No.3 Backbone+PPD", Ablation::new(false, true, false)),
        ("No.4 Backbone+RA", Ablation::new(false, false, true)),
        ("No.5 Backbone+RA+EA", Ablation::new(true, false, true)),
        ("No.6 Backbone+PPD+RA", Ablation::new(false, true, true)),
        ("No.7 Backbone+PPD+RA+EA", Ablation::new(true, true, true)),
    ];

    pub const fn new(edge_attention: bool, partial_decoder: bool, reverse_attention: bool) -> Self {
        Ablation {
            edge_attention,
            partial_decoder,
            reverse_attention,
        }
    }

    /// Parses a comma-separated component list such as `EA,PPD,RA`; the
    /// empty string is the bare backbone.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = Ablation::new(false, false, false);
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "EA" => out.edge_attention = true,
                "PPD" => out.partial_decoder = true,
                "RA" => out.reverse_attention = true,
                other => {
                    return Err(Error::Argument(format!(
                        "unknown ablation component `{other}`"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.edge_attention {
            parts.push("EA");
        }
        if self.partial_decoder {
            parts.push("PPD");
        }
        if self.reverse_attention {
            parts.push("RA");
        }
        parts.join(",")
    }
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ablation: Ablation,
    pub ra_channels: usize,
    pub encoder: EncoderConfig,
    /// Encoder weights come from a checkpoint instead of random init.
    pub pretrained: bool,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ablation: Ablation::FULL,
            ra_channels: 64,
            encoder: EncoderConfig::res2net50(),
            pretrained: false,
            input_size: (352, 352),
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for CPU experiments.
    pub fn toy(input: usize) -> Self {
        ModelConfig {
            ablation: Ablation::FULL,
            ra_channels: 16,
            encoder: EncoderConfig::toy(),
            pretrained: false,
            input_size: (input, input),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ra_channels == 0 {
            return Err(Error::Argument("ra_channels must be positive".into()));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Argument(format!(
                "input size {h}x{w} must be positive multiples of 32"
            )));
        }
        Ok(())
    }
}

/// Tape handles for every output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub pyramid: FeaturePyramid,
    pub s_g: Var,
    pub s5: Option<Var>,
    pub s4: Option<Var>,
    pub s3: Option<Var>,
    pub s_e: Option<Var>,
}

impl ForwardVars {
    /// The map the final prediction is read from: `S_3`, or `S_g` without reverse attention.
    pub fn final_logits(&self) -> Var {
        self.s3.unwrap_or(self.s_g)
    }
}

/// Network outputs for one batch. Logit maps keep their native strides.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub s_g: Tensor,
    pub s5: Option<Tensor>,
    pub s4: Option<Tensor>,
    pub s3: Option<Tensor>,
    pub s_e: Option<Tensor>,
    /// `sigmoid(upsample(S_3))` at input resolution.
    pub s_p: Tensor,
}

impl PredictionBundle {
    pub fn from_tape(tape: &Tape<'_>, vars: &ForwardVars, input: (usize, usize)) -> Self {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        let s_p = tape
            .value(vars.final_logits())
            .resize_bilinear(input.0, input.1)
            .map(sigmoid);
        PredictionBundle {
            s_g: tape.value(vars.s_g).clone(),
            s5: get(vars.s5),
            s4: get(vars.s4),
            s3: get(vars.s3),
            s_e: get(vars.s_e),
            s_p,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.s_p.shape().n
    }

    /// Final probability map of batch item `n`.
    pub fn probability(&self, n: usize) -> Plane<f64> {
        self.s_p.plane(n, 0)
    }

    pub fn is_finite(&self) -> bool {
        [
            Some(&self.s_g),
            self.s5.as_ref(),
            self.s4.as_ref(),
            self.s3.as_ref(),
            self.s_e.as_ref(),
            Some(&self.s_p),
        ]
        .into_iter()
        .flatten()
        .all(Tensor::is_finite)
    }
}

pub struct InfNet {
    cfg: ModelConfig,
    encoder: Encoder,
    edge: Option<EdgeAttention>,
    decoder: Option<PartialDecoder>,
    global_head: Option<Conv2d>,
    stages: Vec<ReverseAttentionStage>,
}

impl InfNet {
    /// Builds the network and registers its parameters in `store`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(store, rng, Init::HeUniform);
        let encoder = Encoder::new(&cfg.encoder, &mut pb.sub("encoder"))?;
        let ch = encoder.channels();
        let ab = cfg.ablation;
        let edge = if ab.edge_attention {
            Some(EdgeAttention::new(ch[1], &mut pb.sub("edge"))?)
        } else {
            None
        };
        let (decoder, global_head) = if ab.partial_decoder {
            (
                Some(PartialDecoder::new(
                    [ch[2], ch[3], ch[4]],
                    cfg.ra_channels,
                    &mut pb.sub("decoder"),
                )?),
                None,
            )
        } else {
            let head = pb
                .sub("global")
                .conv("head", ch[4], 1, ConvGeometry::new(1, 1, 0), true)?;
            (None, Some(head))
        };
        let mut stages = Vec::new();
        if ab.reverse_attention {
            for level in [5, 4, 3] {
                let edge_ch = ab.edge_attention.then_some(ch[1]);
                stages.push(ReverseAttentionStage::new(
                    level,
                    ch[level - 1],
                    edge_ch,
                    cfg.ra_channels,
                    &mut pb.sub(&format!("ra{level}")),
                )?);
            }
        }
        Ok(InfNet {
            cfg: cfg.clone(),
            encoder,
            edge,
            decoder,
            global_head,
            stages,
        })
    }

    /// Builds the network with a fresh seeded parameter store.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = InfNet::new(cfg, &mut store, &mut rng)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encode(&self, tape: &mut Tape<'_>, images: Var) -> Result<FeaturePyramid> {
        self.encoder.encode(tape, images)
    }

    /// Runs the whole network for an `N x 1 x H x W` batch on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, images: Var) -> Result<ForwardVars> {
        let pyramid = self.encode(tape, images)?;
        let (e_att, s_e) = match &self.edge {
            Some(ea) => {
                let (e, s) = ea.forward(tape, pyramid.f(2))?;
                (Some(e), Some(s))
            }
            None => (None, None),
        };
        let f3_shape = tape.value(pyramid.f(3)).shape();
        let s_g = match (&self.decoder, &self.global_head) {
            (Some(d), _) => d.forward(tape, pyramid.f(3), pyramid.f(4), pyramid.f(5))?,
            (None, Some(head)) => {
                // Without the decoder the deepest side output stands in for the global map.
                let deep = head.forward(tape, pyramid.f(5))?;
                tape.resize(deep, f3_shape.h, f3_shape.w)
            }
            (None, None) => unreachable!("one global head is always built"),
        };
        let (mut s5, mut s4, mut s3) = (None, None, None);
        let mut guide = s_g;
        for stage in &self.stages {
            let out = stage.forward(tape, pyramid.f(stage.level()), e_att, guide)?;
            guide = out.side_output;
            match stage.level() {
                5 => s5 = Some(guide),
                4 => s4 = Some(guide),
                _ => s3 = Some(guide),
            }
        }
        Ok(ForwardVars {
            pyramid,
            s_g,
            s5,
            s4,
            s3,
            s_e,
        })
    }

    /// Inference on a batch without keeping the tape.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<PredictionBundle> {
        let s = images.shape();
        let mut tape = Tape::new(store);
        let x = tape.input(images.clone());
        let vars = self.forward(&mut tape, x)?;
        Ok(PredictionBundle::from_tape(&tape, &vars, (s.h, s.w)))
    }
}
