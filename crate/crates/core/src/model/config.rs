use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of a region geometry vector: normalized `x1, y1, x2, y2` and the
/// area fraction.
pub const POS_DIM: usize = 5;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw region feature width.
    pub region_dim: usize,
    /// Region geometry width, always [`POS_DIM`].
    pub pos_dim: usize,
    /// Hidden width shared by every stream.
    pub hidden: usize,
    pub vocab_size: usize,
    /// Number of word positions with an index embedding, CLS and SEP included.
    pub max_seq: usize,
    /// Object-encoder depth.
    pub obj_layers: usize,
    /// Sentence-encoder depth.
    pub sent_layers: usize,
    /// Multi-modal decoder depth.
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Region cap per image.
    pub max_regions: usize,
    /// Size of the object-label set predicted for masked regions.
    pub num_labels: usize,
    /// Hidden width of the matching MLP.
    pub match_hidden: usize,
    /// Answer-set size of the question-answering head; 0 leaves it out.
    #[serde(default)]
    pub num_answers: usize,
    pub ln_eps: f64,
    /// Half-width of the uniform initializer.
    pub init_range: f64,
}

impl ModelConfig {
    /// Desk-scale default: 32-wide, 4 heads, one layer per stack.
    pub fn toy(vocab_size: usize, num_labels: usize, region_dim: usize) -> Self {
        ModelConfig {
            region_dim,
            pos_dim: POS_DIM,
            hidden: 32,
            vocab_size,
            max_seq: 32,
            obj_layers: 1,
            sent_layers: 1,
            dec_layers: 1,
            heads: 4,
            ff_dim: 128,
            max_regions: 100,
            num_labels,
            match_hidden: 32,
            num_answers: 0,
            ln_eps: 1e-5,
            init_range: 0.02,
        }
    }

    /// Smallest configuration used for gradient checks: width 8, two heads,
    /// one layer per stack.
    pub fn tiny(vocab_size: usize, num_labels: usize, region_dim: usize) -> Self {
        ModelConfig {
            hidden: 8,
            heads: 2,
            ff_dim: 32,
            match_hidden: 8,
            ..Self::toy(vocab_size, num_labels, region_dim)
        }
    }

    /// Stack depths used at full scale (6 object, 12 sentence, 6 decoder
    /// layers) with 2,048-wide region features.
    pub fn full_depth(mut self) -> Self {
        self.obj_layers = 6;
        self.sent_layers = 12;
        self.dec_layers = 6;
        self.region_dim = 2048;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.pos_dim != POS_DIM {
            return fail(format!("pos_dim must be {POS_DIM}, got {}", self.pos_dim));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.hidden < 2 {
            return fail("hidden width must be at least 2".into());
        }
        if self.obj_layers == 0 || self.sent_layers == 0 || self.dec_layers == 0 {
            return fail("every stack needs at least one layer".into());
        }
        if self.max_seq < 3 {
            return fail("max_seq must leave room for CLS, one word and SEP".into());
        }
        if self.vocab_size <= 4 || self.num_labels == 0 || self.region_dim == 0 {
            return fail("vocab, label set and region width must be nonempty".into());
        }
        if self.ff_dim == 0 || self.match_hidden == 0 || self.max_regions == 0 {
            return fail("ff_dim, match_hidden and max_regions must be positive".into());
        }
        Ok(())
    }
}
