use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::patch::{patchify, PatchLayout, Prediction};
use crate::dataio::{Prompt, PromptKind};
use crate::error::{Error, Result};
use crate::substrate::{
    init_embedding, positions_table, sinusoid_at, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamId,
    ParamSet, Real, Tensor, Var,
};

const ASPECT_POSITIVE: usize = 0;
const ASPECT_NEGATIVE: usize = 1;
const TYPE_LABEL: usize = 0;
const TYPE_BOUNDARY: usize = 1;

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct MemoryLayer {
    ln_query: LayerNorm,
    ln_context: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Memory-stream half of a two-way block. Absent in the last block, whose
/// memory-stream output would be discarded.
#[derive(Clone, Debug)]
struct MemorySide {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ln_cross_time: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct TwoWayBlock {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    ln_cross_mem: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    memory: Option<MemorySide>,
}

#[derive(Clone, Debug)]
struct Network {
    patch_embed: Linear,
    encoder: Vec<EncoderLayer>,
    prompt_pos: Linear,
    prompt_neg: ParamId,
    boundary_table: ParamId,
    aspect_table: ParamId,
    type_table: ParamId,
    memory: Vec<MemoryLayer>,
    null_token: ParamId,
    decoder: Vec<TwoWayBlock>,
    head_ln: LayerNorm,
    head: Linear,
}

impl Network {
    fn build<R: Real>(c: &ModelConfig, ps: &mut ParamSet<R>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = c.d_model;
        let k = c.num_states;
        let patch_embed = Linear::new(ps, "series.patch_embed", c.channels * c.patch_len, d, rng)?;
        let encoder = (0..c.enc_layers)
            .map(|i| {
                let n = format!("series.layer{i}");
                Ok(EncoderLayer {
                    ln_attn: LayerNorm::new(ps, &format!("{n}.ln_attn"), d)?,
                    attn: MultiHeadAttention::new(ps, &format!("{n}.attn"), d, c.heads, rng)?,
                    ln_ffn: LayerNorm::new(ps, &format!("{n}.ln_ffn"), d)?,
                    ffn: FeedForward::new(ps, &format!("{n}.ffn"), d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let prompt_pos = Linear::new(ps, "prompt.positive", k, d, rng)?;
        let prompt_neg = ps.register(
            "prompt.negative.weight",
            crate::substrate::init_uniform(k, d, k, rng),
        )?;
        let boundary_table = ps.register("prompt.boundary_table", init_embedding(2, d, rng))?;
        let aspect_table = ps.register("prompt.aspect_table", init_embedding(2, d, rng))?;
        let type_table = ps.register("prompt.type_table", init_embedding(2, d, rng))?;
        let memory = (0..c.mem_layers)
            .map(|i| {
                let n = format!("memory.layer{i}");
                Ok(MemoryLayer {
                    ln_query: LayerNorm::new(ps, &format!("{n}.ln_query"), d)?,
                    ln_context: LayerNorm::new(ps, &format!("{n}.ln_context"), d)?,
                    attn: MultiHeadAttention::new(ps, &format!("{n}.attn"), d, c.heads, rng)?,
                    ln_ffn: LayerNorm::new(ps, &format!("{n}.ln_ffn"), d)?,
                    ffn: FeedForward::new(ps, &format!("{n}.ffn"), d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let null_token = ps.register("decoder.null_token", init_embedding(1, d, rng))?;
        let decoder = (0..c.dec_blocks)
            .map(|i| {
                let n = format!("decoder.block{i}");
                let memory = if i + 1 < c.dec_blocks {
                    Some(MemorySide {
                        ln_self: LayerNorm::new(ps, &format!("{n}.mem.ln_self"), d)?,
                        self_attn: MultiHeadAttention::new(ps, &format!("{n}.mem.self_attn"), d, c.heads, rng)?,
                        ln_cross: LayerNorm::new(ps, &format!("{n}.mem.ln_cross"), d)?,
                        ln_cross_time: LayerNorm::new(ps, &format!("{n}.mem.ln_cross_time"), d)?,
                        cross_attn: MultiHeadAttention::new(ps, &format!("{n}.mem.cross_attn"), d, c.heads, rng)?,
                        ln_ffn: LayerNorm::new(ps, &format!("{n}.mem.ln_ffn"), d)?,
                        ffn: FeedForward::new(ps, &format!("{n}.mem.ffn"), d, rng)?,
                    })
                } else {
                    None
                };
                Ok(TwoWayBlock {
                    ln_self: LayerNorm::new(ps, &format!("{n}.time.ln_self"), d)?,
                    self_attn: MultiHeadAttention::new(ps, &format!("{n}.time.self_attn"), d, c.heads, rng)?,
                    ln_cross: LayerNorm::new(ps, &format!("{n}.time.ln_cross"), d)?,
                    ln_cross_mem: LayerNorm::new(ps, &format!("{n}.time.ln_cross_mem"), d)?,
                    cross_attn: MultiHeadAttention::new(ps, &format!("{n}.time.cross_attn"), d, c.heads, rng)?,
                    ln_ffn: LayerNorm::new(ps, &format!("{n}.time.ln_ffn"), d)?,
                    ffn: FeedForward::new(ps, &format!("{n}.time.ffn"), d, rng)?,
                    memory,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patch_embed,
            encoder,
            prompt_pos,
            prompt_neg,
            boundary_table,
            aspect_table,
            type_table,
            memory,
            null_token,
            decoder,
            head_ln: LayerNorm::new(ps, "head.ln", d)?,
            head: Linear::new(ps, "head.out", d, k, rng)?,
        })
    }
}

/// A zero-filled context window around a prompt anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    /// Row-major `len x channels`.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// Subsequence timestep of the first row; negative when it starts before
    /// the subsequence.
    pub start: isize,
}

/// Rows `[t_c - floor(len/2), t_c - floor(len/2) + len)` of a row-major
/// `series_len x channels` buffer, zero outside the buffer.
pub fn extract_context(data: &[f64], channels: usize, t_c: usize, len: usize) -> Context {
    let series_len = data.len() / channels.max(1);
    let start = t_c as isize - (len / 2) as isize;
    let mut values = vec![0.0; len * channels];
    let mut valid = vec![false; len];
    for (i, v) in valid.iter_mut().enumerate() {
        let t = start + i as isize;
        if t >= 0 && (t as usize) < series_len {
            let t = t as usize;
            values[i * channels..(i + 1) * channels].copy_from_slice(&data[t * channels..(t + 1) * channels]);
            *v = true;
        }
    }
    Context { values, valid, start }
}

/// Network weights together with the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model<R: Real> {
    config: ModelConfig,
    window_layout: PatchLayout,
    context_layout: PatchLayout,
    net: Network,
    params: ParamSet<R>,
}

impl<R: Real> Model<R> {
    /// Freshly initialised model; parameter order and values depend only on
    /// `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = Network::build(&config, &mut params, &mut rng)?;
        Ok(Self {
            window_layout: PatchLayout::new(config.window_len, config.patch_len, config.patch_hop)?,
            context_layout: PatchLayout::new(config.context_len, config.patch_len, config.patch_hop)?,
            config,
            net,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<R> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<R> {
        &mut self.params
    }

    pub fn window_layout(&self) -> &PatchLayout {
        &self.window_layout
    }

    pub fn context_layout(&self) -> &PatchLayout {
        &self.context_layout
    }

    /// Same architecture and weights in another precision.
    pub fn cast<S: Real>(&self) -> Model<S> {
        Model {
            config: self.config.clone(),
            window_layout: self.window_layout.clone(),
            context_layout: self.context_layout.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Same architecture evaluated with a different parameter set, which
    /// must come from a model with this config.
    pub fn with_params(&self, params: ParamSet<R>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    fn dropout(&self, g: &mut Graph<R>, x: Var) -> Var {
        g.dropout(x, self.config.dropout)
    }

    /// Series encoder on a window laid out by `layout`. `offset` is the
    /// subsequence timestep of the window's first row and places the patch
    /// positions on the subsequence axis. With `patch_mask`, attention never
    /// reads invalid patches.
    pub fn encode_series(
        &self,
        g: &mut Graph<R>,
        window: &[f64],
        layout: &PatchLayout,
        offset: f64,
        patch_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let patches = g.constant(patchify::<R>(window, self.config.channels, layout)?);
        let x = self.net.patch_embed.forward(g, &self.params, patches)?;
        let positions: Vec<f64> = layout.centres().into_iter().map(|c| c + offset).collect();
        let pos = g.constant(positions_table::<R>(&positions, self.config.d_model)?);
        let mut x = g.add(x, pos)?;
        let n = layout.num_patches();
        let key_mask: Option<Vec<bool>> = patch_mask.map(|m| (0..n).flat_map(|_| m.iter().copied()).collect());
        for layer in &self.net.encoder {
            let h = layer.ln_attn.forward(g, &self.params, x)?;
            let h = layer.attn.forward(g, &self.params, h, h, h, key_mask.as_deref())?;
            let h = self.dropout(g, h);
            x = g.add(x, h)?;
            let h = layer.ln_ffn.forward(g, &self.params, x)?;
            let h = layer.ffn.forward(g, &self.params, h)?;
            let h = self.dropout(g, h);
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// Encode a window of this model's length.
    pub fn encode_window(&self, g: &mut Graph<R>, window: &[f64], offset: usize) -> Result<Var> {
        self.encode_series(g, window, &self.window_layout, offset as f64, None)
    }

    /// Prompt embedding `1 x D`. State ids are unified-space ids.
    pub fn encode_prompt(&self, g: &mut Graph<R>, prompt: &Prompt) -> Result<Var> {
        let d = self.config.d_model;
        let k = self.config.num_states;
        let ps = &self.params;
        let aspect = g.param(ps, self.net.aspect_table);
        let (content, kind) = match &prompt.kind {
            PromptKind::Label {
                correct_state,
                incorrect_states,
            } => {
                if *correct_state >= k || incorrect_states.iter().any(|&s| s >= k) {
                    return Err(Error::Data(format!(
                        "prompt state outside [0, {k}): correct {correct_state}, incorrect {incorrect_states:?}"
                    )));
                }
                if incorrect_states.len() > self.config.n_neg_max {
                    return Err(Error::Data(format!(
                        "{} incorrect states exceed the encodable maximum {}",
                        incorrect_states.len(),
                        self.config.n_neg_max
                    )));
                }
                if incorrect_states.contains(correct_state) {
                    return Err(Error::Data(format!(
                        "state {correct_state} is marked both correct and incorrect"
                    )));
                }
                let mut one_hot = Tensor::zeros(1, k);
                one_hot.set(0, *correct_state, R::ONE);
                let one_hot = g.constant(one_hot);
                let pos = self.net.prompt_pos.forward(g, ps, one_hot)?;
                let pos_aspect = g.gather_rows(aspect, &[ASPECT_POSITIVE])?;
                let mut z = g.add(pos, pos_aspect)?;
                if !incorrect_states.is_empty() {
                    let mut multi_hot = Tensor::zeros(1, k);
                    for &s in incorrect_states {
                        multi_hot.set(0, s, R::ONE);
                    }
                    let multi_hot = g.constant(multi_hot);
                    let w = g.param(ps, self.net.prompt_neg);
                    let neg = g.matmul(multi_hot, w)?;
                    let neg_aspect = g.gather_rows(aspect, &[ASPECT_NEGATIVE])?;
                    let neg = g.add(neg, neg_aspect)?;
                    z = g.add(z, neg)?;
                }
                (z, TYPE_LABEL)
            }
            PromptKind::Boundary { present } => {
                let table = g.param(ps, self.net.boundary_table);
                let row = g.gather_rows(table, &[usize::from(*present)])?;
                let a = g.gather_rows(aspect, &[if *present { ASPECT_POSITIVE } else { ASPECT_NEGATIVE }])?;
                (g.add(row, a)?, TYPE_BOUNDARY)
            }
        };
        let types = g.param(ps, self.net.type_table);
        let ty = g.gather_rows(types, &[kind])?;
        let z = g.add(content, ty)?;
        let anchor = g.constant(Tensor::row_vector(
            sinusoid_at(prompt.t_c as f64, d).into_iter().map(R::of).collect(),
        ));
        g.add(z, anchor)
    }

    /// Memory encoder: the prompt embedding attends over its encoded
    /// context. `context_tokens` are `T_ctx,p x D`, `patch_mask` their
    /// validity.
    pub fn encode_memory(&self, g: &mut Graph<R>, z_p: Var, context_tokens: Var, patch_mask: &[bool]) -> Result<Var> {
        let mut z = z_p;
        for layer in &self.net.memory {
            let q = layer.ln_query.forward(g, &self.params, z)?;
            let kv = layer.ln_context.forward(g, &self.params, context_tokens)?;
            let h = layer.attn.forward(g, &self.params, q, kv, kv, Some(patch_mask))?;
            let h = self.dropout(g, h);
            z = g.add(z, h)?;
            let h = layer.ln_ffn.forward(g, &self.params, z)?;
            let h = layer.ffn.forward(g, &self.params, h)?;
            let h = self.dropout(g, h);
            z = g.add(z, h)?;
        }
        Ok(z)
    }

    /// Prompt and context to one `1 x D` memory token. `data` is the
    /// row-major subsequence the prompt is anchored in.
    pub fn memory_token(&self, g: &mut Graph<R>, data: &[f64], prompt: &Prompt) -> Result<Var> {
        let c = self.config.channels;
        if prompt.t_c >= data.len() / c {
            return Err(Error::Data(format!(
                "prompt timestamp {} outside [0, {})",
                prompt.t_c,
                data.len() / c
            )));
        }
        let z_p = self.encode_prompt(g, prompt)?;
        let ctx = extract_context(data, c, prompt.t_c, self.config.context_len);
        let patch_mask = self.context_layout.patch_mask(&ctx.valid);
        let tokens = self.encode_series(g, &ctx.values, &self.context_layout, ctx.start as f64, Some(&patch_mask))?;
        self.encode_memory(g, z_p, tokens, &patch_mask)
    }

    /// Two-way decoder over time tokens `z_x` and memory tokens `memory`
    /// (`N x D`, `None` for an empty bank). Returns patch logits.
    pub fn decode_states(&self, g: &mut Graph<R>, z_x: Var, memory: Option<Var>) -> Result<Var> {
        let ps = &self.params;
        let mut x = z_x;
        let mut m = match memory {
            Some(m) => m,
            None => g.param(ps, self.net.null_token),
        };
        if g.shape(m)[1] != self.config.d_model {
            return Err(Error::Shape(format!(
                "memory tokens {:?} do not match d_model {}",
                g.shape(m),
                self.config.d_model
            )));
        }
        for block in &self.net.decoder {
            let h = block.ln_self.forward(g, ps, x)?;
            let h = block.self_attn.forward(g, ps, h, h, h, None)?;
            let h = self.dropout(g, h);
            x = g.add(x, h)?;

            let q = block.ln_cross.forward(g, ps, x)?;
            let kv = block.ln_cross_mem.forward(g, ps, m)?;
            let h = block.cross_attn.forward(g, ps, q, kv, kv, None)?;
            let h = self.dropout(g, h);
            x = g.add(x, h)?;

            if let Some(side) = &block.memory {
                let h = side.ln_self.forward(g, ps, m)?;
                let h = side.self_attn.forward(g, ps, h, h, h, None)?;
                let h = self.dropout(g, h);
                m = g.add(m, h)?;

                let q = side.ln_cross.forward(g, ps, m)?;
                let kv = side.ln_cross_time.forward(g, ps, x)?;
                let h = side.cross_attn.forward(g, ps, q, kv, kv, None)?;
                let h = self.dropout(g, h);
                m = g.add(m, h)?;
            }

            let h = block.ln_ffn.forward(g, ps, x)?;
            let h = block.ffn.forward(g, ps, h)?;
            let h = self.dropout(g, h);
            x = g.add(x, h)?;
            if let Some(side) = &block.memory {
                let h = side.ln_ffn.forward(g, ps, m)?;
                let h = side.ffn.forward(g, ps, h)?;
                let h = self.dropout(g, h);
                m = g.add(m, h)?;
            }
        }
        let h = self.net.head_ln.forward(g, ps, x)?;
        self.net.head.forward(g, ps, h)
    }

    /// Per-timestep logits `T x K` of one window: encode, decode, average
    /// over covering patches.
    pub fn window_logits(&self, g: &mut Graph<R>, window: &[f64], offset: usize, memory: Option<Var>) -> Result<Var> {
        let z = self.encode_window(g, window, offset)?;
        let patch_logits = self.decode_states(g, z, memory)?;
        let avg = g.constant(self.window_layout.averaging_matrix::<R>()?);
        g.matmul(avg, patch_logits)
    }

    /// Evaluation-mode prediction for one window against a fixed memory.
    pub fn predict_window(&self, window: &[f64], offset: usize, memory: Option<&Tensor<R>>) -> Result<Prediction<R>> {
        let mut g = Graph::new();
        let m = memory.map(|m| g.constant(m.clone()));
        let logits = self.window_logits(&mut g, window, offset, m)?;
        g.ensure_finite()?;
        Ok(Prediction::from_logits(g.value(logits).clone()))
    }

    /// Evaluation-mode memory tokens, one row per prompt.
    pub fn encode_prompts(&self, data: &[f64], prompts: &[Prompt]) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        let rows = prompts
            .iter()
            .map(|p| self.memory_token(&mut g, data, p))
            .collect::<Result<Vec<_>>>()?;
        g.ensure_finite()?;
        let mut out = Tensor::zeros(rows.len(), self.config.d_model);
        for (i, v) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(g.value(v).row(0));
        }
        Ok(out)
    }
}
