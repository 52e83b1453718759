use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::layers::{block, block_param_count, init_block, layernorm, linear, sincos_2d};
use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamSet, INIT_STD};
use crate::patch_mask::{patchify, MaskPlan, CHANNELS};
use crate::tensor::{ConvGeometry, Element, Graph, Tensor, Var};

/// Encoder activations for one image.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Fused visible-token features `[l_v, C]`.
    pub e_v: Var,
    /// Output of each fused layer, keyed by 1-based layer number.
    pub per_layer: BTreeMap<usize, Var>,
    /// Last block's attention probabilities `[heads, l_v, l_v]`.
    pub last_attention: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Pixel predictions for the masked tokens `[l_m, p*p*3]`.
    pub d_m: Var,
    /// Normalised decoder tokens for the whole grid `[n, D_d]`.
    pub hidden: Var,
}

#[derive(Clone, Debug)]
pub struct Student<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    enc_pos: Tensor<T>,
    dec_pos: Tensor<T>,
}

impl<T: Element> Student<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let mut p = ParamSet::new();
        let c = &config;
        let dim = c.embed_dim;
        if c.conv_stages.is_empty() {
            init.linear(&mut p, "patch_embed", c.patch_dim(), dim);
        } else {
            let s = c.stem_kernel();
            init.linear(&mut p, "stem", s * s * CHANNELS, c.conv_stages[0].dim);
            for (i, st) in c.conv_stages.iter().enumerate() {
                for j in 0..st.blocks {
                    for conv in ["conv1", "conv2"] {
                        let name = format!("stages.{i}.blocks.{j}.{conv}");
                        init.linear(&mut p, &name, 9 * st.dim, st.dim);
                    }
                }
                let next = c.conv_stages.get(i + 1).map_or(dim, |n| n.dim);
                let f = st.downsample;
                init.linear(&mut p, &format!("stages.{i}.down"), f * f * st.dim, next);
            }
        }
        for l in 0..c.encoder_depth {
            init_block(&mut init, &mut p, &format!("encoder.blocks.{l}"), dim, c.mlp_ratio);
        }
        init.norm(&mut p, "encoder.norm", dim);
        init.linear(&mut p, "mimic_head", dim, c.teacher_dim);
        init.linear(&mut p, "decoder.embed", dim, c.decoder_dim);
        p.insert(
            "decoder.mask_token",
            init.trunc_normal(&[1, c.decoder_dim], INIT_STD),
        );
        for l in 0..c.decoder_depth {
            init_block(
                &mut init,
                &mut p,
                &format!("decoder.blocks.{l}"),
                c.decoder_dim,
                c.mlp_ratio,
            );
        }
        init.norm(&mut p, "decoder.norm", c.decoder_dim);
        init.linear(&mut p, "decoder.pred", c.decoder_dim, c.patch_dim());
        init.linear(&mut p, "decoder.feature_pred", c.decoder_dim, c.teacher_dim);
        Self::from_params(config, p)
    }

    /// Wrap existing parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let side = config.grid_side();
        let enc_pos = sincos_2d(config.embed_dim, side, side)?;
        let dec_pos = sincos_2d(config.decoder_dim, side, side)?;
        let student = Self {
            config,
            params,
            enc_pos,
            dec_pos,
        };
        if student.params.numel() != param_count(&student.config) {
            return Err(Error::Config(format!(
                "parameter set holds {} scalars, the configuration needs {}",
                student.params.numel(),
                param_count(&student.config)
            )));
        }
        Ok(student)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Stage masks the conv path needs; derived from the token grid when the
    /// plan was drawn without one.
    fn spatial_plan(&self, plan: &MaskPlan) -> Result<MaskPlan> {
        let factors = self.config.stage_factors();
        if plan.grid.is_some() && plan.stage_masks.len() == factors.len() {
            return Ok(plan.clone());
        }
        let side = self.config.grid_side();
        plan.clone().with_grid(side, side, &factors)
    }

    /// Visible-token embeddings before position encoding, `[l_v, C]`.
    fn embed(&self, g: &mut Graph<T>, bp: &Bound, image: &Tensor<T>, plan: &MaskPlan) -> Result<Var> {
        let c = &self.config;
        if c.conv_stages.is_empty() {
            let visible = patchify(image, c.patch_size)?.gather_rows(&plan.visible)?;
            let x = g.constant(visible);
            return linear(g, bp, "patch_embed", x);
        }
        let plan = self.spatial_plan(plan)?;
        let size = c.image_size;
        let pixels = g.constant(image.clone().reshaped(&[size * size, CHANNELS])?);
        let s = c.stem_kernel();
        let mut side = size / s;
        let geom = ConvGeometry {
            height: size,
            width: size,
            channels: CHANNELS,
            kernel: s,
            stride: s,
            pad: 0,
        };
        let (w, b) = (bp.get("stem.weight")?, bp.get("stem.bias")?);
        let mut x = g.conv2d(pixels, geom, w, b)?;
        for (i, st) in c.conv_stages.iter().enumerate() {
            let keep = plan.stage_masks[i].visible_indices();
            x = g.keep_rows(x, &keep)?;
            let conv = |g: &mut Graph<T>, x: Var, name: &str| -> Result<Var> {
                let geom = ConvGeometry {
                    height: side,
                    width: side,
                    channels: st.dim,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                };
                let (w, b) = (bp.get(&format!("{name}.weight"))?, bp.get(&format!("{name}.bias"))?);
                let y = g.conv2d(x, geom, w, b)?;
                g.keep_rows(y, &keep)
            };
            for j in 0..st.blocks {
                let h = conv(g, x, &format!("stages.{i}.blocks.{j}.conv1"))?;
                let h = g.gelu(h)?;
                let h = conv(g, h, &format!("stages.{i}.blocks.{j}.conv2"))?;
                x = g.add(x, h)?;
            }
            let geom = ConvGeometry {
                height: side,
                width: side,
                channels: st.dim,
                kernel: st.downsample,
                stride: st.downsample,
                pad: 0,
            };
            let (w, b) = (bp.get(&format!("stages.{i}.down.weight"))?, bp.get(&format!("stages.{i}.down.bias"))?);
            x = g.conv2d(x, geom, w, b)?;
            side /= st.downsample;
        }
        g.gather_rows(x, &plan.visible)
    }

    /// Encode the visible part of `image` (`[H, W, 3]`) under `plan`.
    pub fn encode(&self, g: &mut Graph<T>, bp: &Bound, image: &Tensor<T>, plan: &MaskPlan) -> Result<EncoderOutput> {
        let c = &self.config;
        if plan.tokens != c.tokens() {
            return Err(Error::Mask(format!(
                "plan covers {} tokens, the model uses {}",
                plan.tokens,
                c.tokens()
            )));
        }
        let x = self.embed(g, bp, image, plan)?;
        let pos = g.constant(self.enc_pos.gather_rows(&plan.visible)?);
        let mut x = g.add(x, pos)?;
        let mut per_layer = BTreeMap::new();
        let mut last_attention = None;
        for l in 0..c.encoder_depth {
            let (y, probs) = block(g, bp, &format!("encoder.blocks.{l}"), x, c.encoder_heads)?;
            x = y;
            last_attention = Some(probs);
            if c.fusion_layers.contains(&(l + 1)) {
                per_layer.insert(l + 1, x);
            }
        }
        let mut fused = None;
        for &v in per_layer.values() {
            fused = Some(match fused {
                None => v,
                Some(acc) => g.add(acc, v)?,
            });
        }
        Ok(EncoderOutput {
            e_v: fused.expect("validated fusion layers are non-empty"),
            per_layer,
            last_attention: last_attention.expect("depth is at least one"),
        })
    }

    /// `L(E_v)`: the linear map into teacher feature space.
    pub fn mimic_head(&self, g: &mut Graph<T>, bp: &Bound, e_v: Var) -> Result<Var> {
        linear(g, bp, "mimic_head", e_v)
    }

    /// Reconstruct the masked patches from the fused visible features.
    pub fn decode(&self, g: &mut Graph<T>, bp: &Bound, e_v: Var, plan: &MaskPlan) -> Result<DecoderOutput> {
        let c = &self.config;
        if plan.masked.is_empty() {
            return Err(Error::Mask("decoding needs at least one masked token".into()));
        }
        let n = plan.tokens;
        let x = layernorm(g, bp, "encoder.norm", e_v)?;
        let x = linear(g, bp, "decoder.embed", x)?;
        let x = g.scatter_rows(x, &plan.visible, n)?;
        let token = bp.get("decoder.mask_token")?;
        let tokens = g.gather_rows(token, &vec![0; plan.masked.len()])?;
        let tokens = g.scatter_rows(tokens, &plan.masked, n)?;
        let x = g.add(x, tokens)?;
        let pos = g.constant(self.dec_pos.clone());
        let mut x = g.add(x, pos)?;
        for l in 0..c.decoder_depth {
            x = block(g, bp, &format!("decoder.blocks.{l}"), x, c.decoder_heads)?.0;
        }
        let hidden = layernorm(g, bp, "decoder.norm", x)?;
        let masked = g.gather_rows(hidden, &plan.masked)?;
        let d_m = linear(g, bp, "decoder.pred", masked)?;
        Ok(DecoderOutput { d_m, hidden })
    }

    /// Teacher-feature prediction from decoder tokens (decoder-side mimicking).
    pub fn decoder_features(&self, g: &mut Graph<T>, bp: &Bound, hidden_rows: Var) -> Result<Var> {
        linear(g, bp, "decoder.feature_pred", hidden_rows)
    }

    /// Mean-pooled encoder features of the whole image, for probing.
    pub fn embed_image(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, false);
        let side = self.config.grid_side();
        let plan = MaskPlan::full(side, side, &self.config.stage_factors())?;
        let out = self.encode(&mut g, &bp, image, &plan)?;
        let e = g.value(out.e_v);
        let (rows, cols) = e.rows_cols();
        let mut pooled = vec![0.0; cols];
        for r in 0..rows {
            for (p, v) in pooled.iter_mut().zip(e.row(r)) {
                *p += v.to_f64().unwrap_or(f64::NAN) / rows as f64;
            }
        }
        Ok(pooled)
    }

    /// Attention each token receives in the last encoder block with the whole
    /// image visible, averaged over heads and queries.
    pub fn attention_received(&self, image: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bp = self.bind(&mut g, false);
        let side = self.config.grid_side();
        let plan = MaskPlan::full(side, side, &self.config.stage_factors())?;
        let out = self.encode(&mut g, &bp, image, &plan)?;
        let probs = g.value(out.last_attention);
        let n = plan.tokens;
        let heads = probs.shape()[0];
        let mut received = vec![0.0; n];
        for (i, v) in probs.data().iter().enumerate() {
            received[i % n] += v.to_f64().unwrap_or(f64::NAN) / (heads * n) as f64;
        }
        Ok(received)
    }
}

/// Scalar parameter count implied by a configuration.
pub fn param_count(c: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let dim = c.embed_dim;
    let mut n = 0;
    if c.conv_stages.is_empty() {
        n += lin(c.patch_dim(), dim);
    } else {
        let s = c.stem_kernel();
        n += lin(s * s * CHANNELS, c.conv_stages[0].dim);
        for (i, st) in c.conv_stages.iter().enumerate() {
            n += st.blocks * 2 * lin(9 * st.dim, st.dim);
            let next = c.conv_stages.get(i + 1).map_or(dim, |n| n.dim);
            n += lin(st.downsample * st.downsample * st.dim, next);
        }
    }
    n += c.encoder_depth * block_param_count(dim, c.mlp_ratio) + 2 * dim;
    n += lin(dim, c.teacher_dim) + lin(dim, c.decoder_dim) + c.decoder_dim;
    n += c.decoder_depth * block_param_count(c.decoder_dim, c.mlp_ratio) + 2 * c.decoder_dim;
    n += lin(c.decoder_dim, c.patch_dim()) + lin(c.decoder_dim, c.teacher_dim);
    n
}
