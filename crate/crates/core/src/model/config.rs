use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub img_size: usize,
    pub stage_dims: [usize; 4],
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub window_size: usize,
    /// Downsampling factor entering stages 2, 3 and 4. Factor 1 is a
    /// channel projection only.
    pub merge_factors: [usize; 3],
    pub mlp_ratio: usize,
    pub embed_dim_out: usize,
    pub stem_hidden: usize,
    /// Hidden width of the skip-fusion convolutions.
    pub fuse_width: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    /// Channel reduction inside the token/image cross attentions.
    pub attn_downsample: usize,
    pub upscale_dims: [usize; 2],
    pub mask_dim: usize,
    /// Channels of the two strided convolutions in the scribble path.
    pub dense_dims: [usize; 2],
    pub toy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            img_size: 256,
            stage_dims: [64, 128, 256, 384],
            depths: [2, 2, 6, 2],
            num_heads: [2, 4, 8, 12],
            window_size: 8,
            merge_factors: [1, 1, 4],
            mlp_ratio: 4,
            embed_dim_out: 256,
            stem_hidden: 32,
            fuse_width: 2304,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            attn_downsample: 2,
            upscale_dims: [128, 64],
            mask_dim: 32,
            dense_dims: [4, 16],
            toy: false,
        }
    }

    pub fn toy() -> Self {
        Self {
            img_size: 64,
            stage_dims: [8, 16, 16, 32],
            depths: [1, 1, 2, 1],
            num_heads: [2, 2, 2, 4],
            window_size: 4,
            merge_factors: [1, 1, 4],
            mlp_ratio: 4,
            embed_dim_out: 32,
            stem_hidden: 8,
            fuse_width: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 64,
            attn_downsample: 2,
            upscale_dims: [16, 8],
            mask_dim: 8,
            dense_dims: [4, 8],
            toy: true,
        }
    }

    /// Feature grid side after the stem (stage 1).
    pub fn stem_grid(&self) -> usize {
        self.img_size / 4
    }

    /// Feature grid side of each stage.
    pub fn stage_grids(&self) -> [usize; 4] {
        let mut g = [self.stem_grid(); 4];
        for i in 1..4 {
            g[i] = g[i - 1] / self.merge_factors[i - 1];
        }
        g
    }

    /// Side of the image embedding grid.
    pub fn embed_grid(&self) -> usize {
        self.img_size / 16
    }

    /// Attention window actually used by each stage.
    pub fn stage_windows(&self) -> [usize; 4] {
        self.stage_grids().map(|g| self.window_size.min(g))
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.img_size;
        if s == 0 || s % 16 != 0 {
            return contract(format!("img_size {s} must be a positive multiple of 16"));
        }
        let mut g = self.stem_grid();
        for (i, &f) in self.merge_factors.iter().enumerate() {
            if f == 0 || g % f != 0 {
                return contract(format!("merge factor {f} before stage {} does not divide grid {g}", i + 2));
            }
            g /= f;
        }
        if g != self.embed_grid() {
            return contract(format!(
                "stage 4 grid {g} must equal img_size/16 = {}",
                self.embed_grid()
            ));
        }
        for i in 0..4 {
            let (d, h) = (self.stage_dims[i], self.num_heads[i]);
            if d == 0 || h == 0 || d % h != 0 || self.depths[i] == 0 {
                return contract(format!("stage {}: dim {d} must be a positive multiple of heads {h}", i + 1));
            }
        }
        let e = self.embed_dim_out;
        if e == 0 || e % 2 != 0 {
            return contract(format!("embed_dim_out {e} must be even"));
        }
        if e % self.decoder_heads != 0 || e % (self.decoder_heads * self.attn_downsample) != 0 {
            return contract(format!(
                "embed_dim_out {e} must divide into {} heads after downsample {}",
                self.decoder_heads, self.attn_downsample
            ));
        }
        let widths = [
            self.window_size,
            self.mlp_ratio,
            self.stem_hidden,
            self.fuse_width,
            self.decoder_depth,
            self.decoder_mlp_dim,
            self.upscale_dims[0],
            self.upscale_dims[1],
            self.mask_dim,
            self.dense_dims[0],
            self.dense_dims[1],
        ];
        if widths.contains(&0) {
            return contract("all widths and counts must be positive");
        }
        Ok(())
    }
}
