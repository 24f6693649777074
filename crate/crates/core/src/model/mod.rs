//! The segmentation network: image encoder, prompt encoder and mask
//! decoder, all reading parameters from one [`ParamStore`].

mod config;
mod ctx;
pub mod decoder;
pub mod encoder;
pub(crate) mod layers;
mod params;
mod plan;
pub mod promptenc;

use boxseg_tensor::{Float, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use ctx::Ctx;
pub use decoder::{decode_masks, fuse_skips, postprocess_mask, two_way_transformer, DecoderOutput};
pub use encoder::{encoder_forward, EncoderOutput};
pub use params::{Init, Param, ParamSpec, ParamStore};
pub use plan::{describe, Plan, PROFILE_SPARSE_TOKENS};
pub use promptenc::{encode_dense, encode_sparse, image_pe, positional_encode, SparseEmbedding, TokenKind};

use crate::bbox::Bbox;
use crate::error::Result;
use crate::prompts::{Point, PromptKinds, PromptSet};

/// Prompts for one box as the network consumes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub points: Vec<Point>,
    pub corners: [Point; 2],
    /// Binary `S × S` mask; `None` means no scribble.
    pub scribble: Option<Vec<u8>>,
}

impl Prompt {
    pub fn box_only(b: &Bbox) -> Self {
        Self {
            points: Vec::new(),
            corners: [Point::new(b.x_min, b.y_min), Point::new(b.x_max, b.y_max)],
            scribble: None,
        }
    }

    /// Keeps the parts of `set` selected by `kinds`.
    pub fn from_set(set: &PromptSet, kinds: PromptKinds) -> Self {
        Self {
            points: if kinds.uses_points() { set.points.to_vec() } else { Vec::new() },
            corners: set.corners,
            scribble: kinds.uses_scribble().then(|| set.scribble.clone()),
        }
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Float = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    /// Fresh parameters drawn from a seeded stream in plan order.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let plan = describe(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init(&plan.specs, &mut rng);
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        params.check_against(&describe(&cfg).specs)?;
        Ok(Self { cfg, params })
    }

    pub fn plan(&self) -> Plan {
        describe(&self.cfg)
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast() }
    }

    pub fn encode(&self, cx: &Ctx<T>, image: &Var<T>) -> Result<EncoderOutput<T>> {
        encoder_forward(cx, &self.cfg, image)
    }

    pub fn decode(&self, cx: &Ctx<T>, enc: &EncoderOutput<T>, prompt: &Prompt) -> Result<DecoderOutput<T>> {
        let sparse = encode_sparse(cx, &self.cfg, &prompt.points, &prompt.corners)?;
        let s = self.cfg.img_size;
        let empty;
        let scribble = match &prompt.scribble {
            Some(m) => m.as_slice(),
            None => {
                empty = vec![0u8; s * s];
                &empty
            }
        };
        let dense = encode_dense(cx, &self.cfg, scribble)?;
        let pe = image_pe(cx.tensor("promptenc.pe_gaussian")?, self.cfg.embed_grid(), s);
        decode_masks(cx, &self.cfg, enc, &sparse.tokens, &dense, &pe)
    }

    pub fn forward(&self, cx: &Ctx<T>, image: &Var<T>, prompt: &Prompt) -> Result<DecoderOutput<T>> {
        let enc = self.encode(cx, image)?;
        self.decode(cx, &enc, prompt)
    }

    /// Inference without a tape: one encoder pass, one decoder pass per
    /// prompt. Returns `[1, S, S]` logits and the IoU estimate per prompt.
    pub fn predict(&self, image: &Tensor<T>, prompts: &[Prompt]) -> Result<Vec<(Tensor<T>, T)>> {
        let g = Graph::no_grad();
        let cx = Ctx::new(&g, &self.params, false);
        let img = g.constant(image.clone());
        let enc = self.encode(&cx, &img)?;
        prompts
            .iter()
            .map(|p| {
                let out = self.decode(&cx, &enc, p)?;
                Ok((out.mask_logits.to_tensor(), out.iou_pred.value().data()[0]))
            })
            .collect()
    }
}
