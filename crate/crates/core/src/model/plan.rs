//! Static description of the network: every parameter with its shape and
//! initializer, plus the multiply-accumulate count of one forward pass.
//!
//! The forward code in the sibling modules asks for parameters by the same
//! names; tests keep the two in lockstep.

use super::config::ModelConfig;
use super::params::{Init, ParamSpec};

const STD: f64 = 0.02;

/// Parameter list plus MAC tally, split by component.
#[derive(Clone, Debug, Default)]
pub struct Plan {
    pub specs: Vec<ParamSpec>,
    pub encoder_macs: u64,
    pub promptenc_macs: u64,
    pub decoder_macs: u64,
}

impl Plan {
    pub fn total_macs(&self) -> u64 {
        self.encoder_macs + self.promptenc_macs + self.decoder_macs
    }

    /// Trainable element count of parameters whose names start with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.trainable && s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.params_with_prefix("")
    }
}

struct Builder<'a> {
    specs: &'a mut Vec<ParamSpec>,
    macs: u64,
}

impl Builder<'_> {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) {
        self.specs.push(ParamSpec { name, shape, init, trainable });
    }

    fn weight(&mut self, name: &str, shape: Vec<usize>) {
        self.param(format!("{name}.weight"), shape, Init::TruncNormal(STD), true);
    }

    fn bias(&mut self, name: &str, n: usize) {
        self.param(format!("{name}.bias"), vec![n], Init::Zeros, true);
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool, rows: usize) {
        self.weight(name, vec![fout, fin]);
        if bias {
            self.bias(name, fout);
        }
        self.macs += (rows * fin * fout) as u64;
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.param(format!("{name}.weight"), vec![c], Init::Ones, true);
        self.bias(name, c);
    }

    /// Square-kernel convolution producing an `out_hw × out_hw` map.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, out_hw: usize, bias: bool) {
        self.weight(name, vec![cout, cin, k, k]);
        if bias {
            self.bias(name, cout);
        }
        self.macs += (cout * cin * k * k * out_hw * out_hw) as u64;
    }

    fn conv_t2(&mut self, name: &str, cin: usize, cout: usize, in_hw: usize) {
        self.weight(name, vec![cin, cout, 2, 2]);
        self.bias(name, cout);
        self.macs += (cin * cout * 4 * in_hw * in_hw) as u64;
    }

    /// Multi-head attention over `nq` queries and `nk` keys, `internal`
    /// channels inside.
    fn attention(&mut self, name: &str, dim: usize, internal: usize, nq: usize, nk: usize) {
        self.linear(&format!("{name}.q_proj"), dim, internal, true, nq);
        self.linear(&format!("{name}.k_proj"), dim, internal, true, nk);
        self.linear(&format!("{name}.v_proj"), dim, internal, true, nk);
        self.macs += 2 * (nq * nk * internal) as u64;
        self.linear(&format!("{name}.out_proj"), internal, dim, true, nq);
    }

    fn mlp3(&mut self, name: &str, fin: usize, hidden: usize, fout: usize) {
        self.linear(&format!("{name}.fc1"), fin, hidden, true, 1);
        self.linear(&format!("{name}.fc2"), hidden, hidden, true, 1);
        self.linear(&format!("{name}.fc3"), hidden, fout, true, 1);
    }
}

pub(crate) fn pad_to(g: usize, w: usize) -> usize {
    g.div_ceil(w) * w
}

fn describe_encoder(cfg: &ModelConfig, b: &mut Builder) {
    let s = cfg.img_size;
    let d = cfg.stage_dims;
    b.conv("encoder.stem.conv1", cfg.stem_hidden, 3, 4, s / 2, true);
    b.conv("encoder.stem.conv2", d[0], cfg.stem_hidden, 4, s / 4, true);
    let grids = cfg.stage_grids();
    let wins = cfg.stage_windows();
    for i in 0..4 {
        let (g, c) = (grids[i], d[i]);
        let stage = format!("encoder.stage{}", i + 1);
        if i > 0 {
            let f = cfg.merge_factors[i - 1];
            let cin = f * f * d[i - 1];
            b.norm(&format!("{stage}.merge.norm"), cin);
            b.linear(&format!("{stage}.merge.reduction"), cin, c, false, g * g);
        }
        let (ws, heads) = (wins[i], cfg.num_heads[i]);
        let gp = pad_to(g, ws);
        let hidden = c * cfg.mlp_ratio;
        for j in 0..cfg.depths[i] {
            let blk = format!("{stage}.block{}", j + 1);
            b.norm(&format!("{blk}.norm1"), c);
            b.linear(&format!("{blk}.attn.qkv"), c, 3 * c, true, gp * gp);
            b.param(
                format!("{blk}.attn.rel_pos_bias"),
                vec![(2 * ws - 1) * (2 * ws - 1), heads],
                Init::TruncNormal(STD),
                true,
            );
            b.macs += 2 * (gp * gp * ws * ws * c) as u64;
            b.linear(&format!("{blk}.attn.proj"), c, c, true, gp * gp);
            b.weight(&format!("{blk}.conv"), vec![c, 3, 3]);
            b.bias(&format!("{blk}.conv"), c);
            b.macs += (g * g * c * 9) as u64;
            b.norm(&format!("{blk}.bn"), c);
            b.param(format!("{blk}.bn.running_mean"), vec![c], Init::Zeros, false);
            b.param(format!("{blk}.bn.running_var"), vec![c], Init::Ones, false);
            b.norm(&format!("{blk}.norm2"), c);
            b.linear(&format!("{blk}.mlp.fc1"), c, hidden, true, g * g);
            b.linear(&format!("{blk}.mlp.fc2"), hidden, c, true, g * g);
        }
    }
    let (e, ge) = (cfg.embed_dim_out, cfg.embed_grid());
    b.conv("encoder.neck.conv1", e, d[3], 1, ge, false);
    b.norm("encoder.neck.ln1", e);
    b.conv("encoder.neck.conv2", e, e, 3, ge, false);
    b.norm("encoder.neck.ln2", e);
}

fn describe_promptenc(cfg: &ModelConfig, b: &mut Builder) {
    let (e, s) = (cfg.embed_dim_out, cfg.img_size);
    b.param("promptenc.pe_gaussian".into(), vec![2, e / 2], Init::Normal(1.0), false);
    b.weight("promptenc.point_embed", vec![3, e]);
    b.weight("promptenc.no_scribble", vec![e]);
    let [d0, d1] = cfg.dense_dims;
    b.conv("promptenc.dense.conv1", d0, 1, 2, s / 2, true);
    b.norm("promptenc.dense.ln1", d0);
    b.conv("promptenc.dense.conv2", d1, d0, 2, s / 4, true);
    b.norm("promptenc.dense.ln2", d1);
    b.conv("promptenc.dense.conv3", e, d1, 1, cfg.embed_grid(), true);
}

/// Sparse tokens assumed by the MAC count: 4 points plus 2 corners.
pub const PROFILE_SPARSE_TOKENS: usize = 6;

fn describe_decoder(cfg: &ModelConfig, b: &mut Builder) {
    let e = cfg.embed_dim_out;
    let g = cfg.embed_grid();
    let n_img = g * g;
    let m = 2 + PROFILE_SPARSE_TOKENS;
    let cross = e / cfg.attn_downsample;
    b.weight("decoder.iou_token", vec![1, e]);
    b.weight("decoder.mask_token", vec![1, e]);
    for l in 0..cfg.decoder_depth {
        let p = format!("decoder.transformer.layer{}", l + 1);
        b.attention(&format!("{p}.self_attn"), e, e, m, m);
        b.norm(&format!("{p}.norm1"), e);
        b.attention(&format!("{p}.cross_t2i"), e, cross, m, n_img);
        b.norm(&format!("{p}.norm2"), e);
        b.linear(&format!("{p}.mlp.fc1"), e, cfg.decoder_mlp_dim, true, m);
        b.linear(&format!("{p}.mlp.fc2"), cfg.decoder_mlp_dim, e, true, m);
        b.norm(&format!("{p}.norm3"), e);
        b.attention(&format!("{p}.cross_i2t"), e, cross, n_img, m);
        b.norm(&format!("{p}.norm4"), e);
    }
    b.attention("decoder.transformer.final_attn", e, cross, m, n_img);
    b.norm("decoder.transformer.norm_final", e);

    let d = cfg.stage_dims;
    b.conv("decoder.fuse.conv1", cfg.fuse_width, d[1] + d[2] + d[3], 3, g, true);
    b.conv("decoder.fuse.conv2", e, cfg.fuse_width, 3, g, true);

    let [u0, u1] = cfg.upscale_dims;
    b.conv_t2("decoder.upscale.convt1", e, u0, g);
    b.norm("decoder.upscale.ln1", u0);
    b.conv_t2("decoder.upscale.convt2", u0, u1, 2 * g);
    b.norm("decoder.upscale.ln2", u1);
    b.conv("decoder.upscale.skip_conv", cfg.mask_dim, u1 + d[0], 3, 4 * g, true);

    b.mlp3("decoder.hyper", e, e, cfg.mask_dim);
    b.macs += (cfg.mask_dim * 16 * n_img) as u64;
    b.mlp3("decoder.iou_head", e, e, 1);
}

pub fn describe(cfg: &ModelConfig) -> Plan {
    let mut specs = Vec::new();
    let mut macs = [0u64; 3];
    let parts: [fn(&ModelConfig, &mut Builder); 3] = [describe_encoder, describe_promptenc, describe_decoder];
    for (part, out) in parts.iter().zip(&mut macs) {
        let mut b = Builder { specs: &mut specs, macs: 0 };
        part(cfg, &mut b);
        *out = b.macs;
    }
    Plan { specs, encoder_macs: macs[0], promptenc_macs: macs[1], decoder_macs: macs[2] }
}
