//! The agent network: instruction encoder, image encoder with early
//! cross-modal fusion, multimodal decoder over the action history, and the
//! two interchangeable output heads (atomic actions vs. viewpoint
//! selection).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    causal_mask, feed_forward, multi_head_attention, positional_encoding_matrix,
    residual_norm_block, DropoutCtx, FeedForwardParams, InputProjection, LayerNormParams,
    MultiHeadParams,
};
use crate::config::{ActionSpace, ModelConfig};
use crate::env::{Candidate, LowLevelAction, ObservationView, N_LOW_ACTIONS};
use crate::tensor::{Axis, Graph, ParamId, ParamStore, Tensor, TensorError};
use crate::vocab;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("instruction is empty after stop-word filtering")]
    EmptyInstruction,
    #[error("observation has {got} views, model expects {want}")]
    WrongViewCount { got: usize, want: usize },
    #[error("checkpoint has no {0} head")]
    MissingHead(ActionSpace),
    #[error("history token {token} out of range ({rows} embedding rows)")]
    BadHistoryToken { token: usize, rows: usize },
    #[error("history must contain at least the start token")]
    EmptyHistory,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ModelResult<T> = std::result::Result<T, ModelError>;

/// Start-of-history token index for a given action space.
pub fn start_token(space: ActionSpace) -> usize {
    match space {
        ActionSpace::Low => N_LOW_ACTIONS,
        ActionSpace::High => crate::env::SECTORS + 1,
    }
}

/// History embedding row for an executed low-level action.
pub fn history_token_low(action: LowLevelAction) -> usize {
    action.index()
}

/// History embedding row for an executed high-level action: the absolute
/// direction sector of the teleport, or the stop row.
pub fn history_token_high(moved_towards: Option<u8>) -> usize {
    match moved_towards {
        Some(sector) => sector as usize,
        None => crate::env::SECTORS,
    }
}

fn history_rows(space: ActionSpace) -> usize {
    start_token(space) + 1
}

struct EncoderBlock {
    self_attn: MultiHeadParams,
    self_norm: LayerNormParams,
    cross_attn: Option<MultiHeadParams>,
    cross_norm: Option<LayerNormParams>,
    ff: FeedForwardParams,
    ff_norm: LayerNormParams,
}

impl EncoderBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        with_cross: bool,
        rng: &mut ChaCha8Rng,
    ) -> ModelResult<Self> {
        Ok(Self {
            self_attn: MultiHeadParams::new(
                store,
                &format!("{prefix}.sa"),
                cfg.d_model,
                cfg.n_heads,
                rng,
            )?,
            self_norm: LayerNormParams::new(store, &format!("{prefix}.sa_norm"), cfg.d_model),
            cross_attn: if with_cross {
                Some(MultiHeadParams::new(
                    store,
                    &format!("{prefix}.ca"),
                    cfg.d_model,
                    cfg.n_heads,
                    rng,
                )?)
            } else {
                None
            },
            cross_norm: if with_cross {
                Some(LayerNormParams::new(
                    store,
                    &format!("{prefix}.ca_norm"),
                    cfg.d_model,
                ))
            } else {
                None
            },
            ff: FeedForwardParams::new(store, &format!("{prefix}.ff"), cfg.d_model, cfg.d_ff, rng),
            ff_norm: LayerNormParams::new(store, &format!("{prefix}.ff_norm"), cfg.d_model),
        })
    }
}

struct LowHead {
    w: ParamId,
    b: ParamId,
}

struct HighHead {
    state_w: ParamId,
    state_b: ParamId,
    cand_w: ParamId,
    cand_b: ParamId,
    stop_embedding: ParamId,
}

/// Every learnable weight of the agent, registered in one `ParamStore`.
pub struct PtaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    word_embedding: ParamId,
    instr_proj: InputProjection,
    instr_blocks: Vec<EncoderBlock>,
    img_proj: InputProjection,
    img_blocks: Vec<EncoderBlock>,
    action_embedding: ParamId,
    hist_attn: MultiHeadParams,
    hist_norm: LayerNormParams,
    text_branch: MultiHeadParams,
    text_branch_norm: LayerNormParams,
    img_branch: MultiHeadParams,
    img_branch_norm: LayerNormParams,
    fusion_w: ParamId,
    fusion_b: ParamId,
    low_head: Option<LowHead>,
    high_head: Option<HighHead>,
}

/// Cached per-episode instruction encoding.
pub struct InstructionEncoding {
    pub encoded: Tensor,
    pub kept_tokens: Vec<u16>,
}

impl PtaModel {
    pub fn new(config: ModelConfig, seed: u64) -> ModelResult<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
        let d = config.d_model;

        let word_embedding = store.register_glorot(
            "word_embedding",
            vec![config.vocab_size, config.d_word],
            &mut rng,
        );
        let instr_proj =
            InputProjection::new(&mut store, "instr.proj", config.d_word, d, &mut rng);
        let mut instr_blocks = Vec::new();
        for i in 0..config.n_blocks {
            instr_blocks.push(EncoderBlock::new(
                &mut store,
                &format!("instr.block{i}"),
                &config,
                false,
                &mut rng,
            )?);
        }

        let img_proj = InputProjection::new(
            &mut store,
            "img.proj",
            config.d_feat + 3,
            d,
            &mut rng,
        );
        let mut img_blocks = Vec::new();
        for i in 0..config.n_blocks {
            img_blocks.push(EncoderBlock::new(
                &mut store,
                &format!("img.block{i}"),
                &config,
                true,
                &mut rng,
            )?);
        }

        let action_embedding = store.register_glorot(
            "dec.action_embedding",
            vec![history_rows(config.action_space), d],
            &mut rng,
        );
        let hist_attn = MultiHeadParams::new(&mut store, "dec.hist", d, config.n_heads, &mut rng)?;
        let hist_norm = LayerNormParams::new(&mut store, "dec.hist_norm", d);
        let text_branch =
            MultiHeadParams::new(&mut store, "dec.text_ca", d, config.n_heads, &mut rng)?;
        let text_branch_norm = LayerNormParams::new(&mut store, "dec.text_ca_norm", d);
        let img_branch =
            MultiHeadParams::new(&mut store, "dec.img_ca", d, config.n_heads, &mut rng)?;
        let img_branch_norm = LayerNormParams::new(&mut store, "dec.img_ca_norm", d);
        let fusion_w = store.register_glorot("dec.fusion.w", vec![2 * d, d], &mut rng);
        let fusion_b = store.register_zeros("dec.fusion.b", vec![d]);

        let (low_head, high_head) = match config.action_space {
            ActionSpace::Low => (
                Some(LowHead {
                    w: store.register_glorot("head.low.w", vec![d, N_LOW_ACTIONS], &mut rng),
                    b: store.register_zeros("head.low.b", vec![N_LOW_ACTIONS]),
                }),
                None,
            ),
            ActionSpace::High => (
                None,
                Some(HighHead {
                    state_w: store.register_glorot("head.high.state_w", vec![d, d], &mut rng),
                    state_b: store.register_zeros("head.high.state_b", vec![d]),
                    cand_w: store.register_glorot(
                        "head.high.cand_w",
                        vec![config.d_feat + 3, d],
                        &mut rng,
                    ),
                    cand_b: store.register_zeros("head.high.cand_b", vec![d]),
                    stop_embedding: store.register_glorot(
                        "head.high.stop_embedding",
                        vec![config.d_feat + 3],
                        &mut rng,
                    ),
                }),
            ),
        };

        Ok(Self {
            config,
            store,
            word_embedding,
            instr_proj,
            instr_blocks,
            img_proj,
            img_blocks,
            action_embedding,
            hist_attn,
            hist_norm,
            text_branch,
            text_branch_norm,
            img_branch,
            img_branch_norm,
            fusion_w,
            fusion_b,
            low_head,
            high_head,
        })
    }

    /// Encodes an instruction token sequence: stop-word filtering, word
    /// embedding, rectified projection with layer norm, sinusoidal
    /// positions, then the self-attention / feed-forward stack. Done once
    /// per episode.
    pub fn encode_instruction(
        &self,
        graph: &Graph,
        tokens: &[u16],
        ctx: &mut DropoutCtx,
    ) -> ModelResult<InstructionEncoding> {
        let kept: Vec<u16> = tokens
            .iter()
            .copied()
            .filter(|&t| !vocab::is_stop_word(t))
            .collect();
        if kept.is_empty() {
            return Err(ModelError::EmptyInstruction);
        }
        let ids: Vec<usize> = kept.iter().map(|&t| t as usize).collect();
        let table = graph.param(&self.store, self.word_embedding);
        let embedded = table.embedding_lookup(&ids)?;
        let mut x = self.instr_proj.apply(graph, &self.store, &embedded)?;
        x = x.add(&positional_encoding_matrix(kept.len(), self.config.d_model)?)?;
        for block in &self.instr_blocks {
            x = residual_norm_block(graph, &self.store, &block.self_norm, ctx, &x, |t| {
                multi_head_attention(graph, &self.store, &block.self_attn, t, t, t, None)
            })?;
            x = residual_norm_block(graph, &self.store, &block.ff_norm, ctx, &x, |t| {
                feed_forward(graph, &self.store, &block.ff, t)
            })?;
        }
        Ok(InstructionEncoding {
            encoded: x,
            kept_tokens: kept,
        })
    }

    /// Encodes one panoramic observation: per-view features with the
    /// coordinate vector appended, rectified projection with layer norm,
    /// self-attention over the grid, early-fusion cross-attention into the
    /// instruction (unless ablated), then feed-forward.
    pub fn encode_observation(
        &self,
        graph: &Graph,
        views: &[ObservationView],
        instruction: &Tensor,
        ctx: &mut DropoutCtx,
    ) -> ModelResult<Tensor> {
        let want = self.config.n_views();
        if views.len() != want {
            return Err(ModelError::WrongViewCount {
                got: views.len(),
                want,
            });
        }
        let width = self.config.d_feat + 3;
        let mut data = Vec::with_capacity(views.len() * width);
        for v in views {
            if v.feature.len() != self.config.d_feat {
                return Err(ModelError::WrongViewCount {
                    got: v.feature.len(),
                    want: self.config.d_feat,
                });
            }
            data.extend_from_slice(&v.feature);
            data.extend_from_slice(&v.coord);
        }
        let input = graph.constant(vec![views.len(), width], data);
        let mut x = self.img_proj.apply(graph, &self.store, &input)?;
        for block in &self.img_blocks {
            x = residual_norm_block(graph, &self.store, &block.self_norm, ctx, &x, |t| {
                multi_head_attention(graph, &self.store, &block.self_attn, t, t, t, None)
            })?;
            if self.config.ablation.early_fusion {
                let ca = block.cross_attn.as_ref().expect("image block has CA");
                let ca_norm = block.cross_norm.as_ref().expect("image block has CA norm");
                x = residual_norm_block(graph, &self.store, ca_norm, ctx, &x, |t| {
                    multi_head_attention(graph, &self.store, ca, t, instruction, instruction, None)
                })?;
            }
            x = residual_norm_block(graph, &self.store, &block.ff_norm, ctx, &x, |t| {
                feed_forward(graph, &self.store, &block.ff, t)
            })?;
        }
        Ok(x)
    }

    /// Decodes the whole history: embeds history tokens with positions,
    /// causally self-attends, cross-attends into the instruction and the
    /// visual encoding (late fusion), and returns one row per position.
    pub fn decode_sequence(
        &self,
        graph: &Graph,
        history: &[usize],
        instruction: &Tensor,
        visual: &Tensor,
        ctx: &mut DropoutCtx,
    ) -> ModelResult<Tensor> {
        if history.is_empty() {
            return Err(ModelError::EmptyHistory);
        }
        let effective: &[usize] = if self.config.ablation.full_history {
            history
        } else {
            &history[history.len() - 1..]
        };
        let rows = history_rows(self.config.action_space);
        if let Some(&bad) = effective.iter().find(|&&t| t >= rows) {
            return Err(ModelError::BadHistoryToken { token: bad, rows });
        }
        let table = graph.param(&self.store, self.action_embedding);
        let mut h = table.embedding_lookup(effective)?;
        h = h.add(&positional_encoding_matrix(
            effective.len(),
            self.config.d_model,
        )?)?;
        let mask = causal_mask(effective.len());
        h = residual_norm_block(graph, &self.store, &self.hist_norm, ctx, &h, |t| {
            multi_head_attention(graph, &self.store, &self.hist_attn, t, t, t, Some(&mask))
        })?;

        let text = if self.config.ablation.text_branch {
            Some(residual_norm_block(
                graph,
                &self.store,
                &self.text_branch_norm,
                ctx,
                &h,
                |t| {
                    multi_head_attention(
                        graph,
                        &self.store,
                        &self.text_branch,
                        t,
                        instruction,
                        instruction,
                        None,
                    )
                },
            )?)
        } else {
            None
        };
        let image = if self.config.ablation.image_branch {
            Some(residual_norm_block(
                graph,
                &self.store,
                &self.img_branch_norm,
                ctx,
                &h,
                |t| {
                    multi_head_attention(graph, &self.store, &self.img_branch, t, visual, visual, None)
                },
            )?)
        } else {
            None
        };

        let fused = match (text, image) {
            (Some(t), Some(i)) => Tensor::concat(&[&t, &i], Axis::Cols)?
                .matmul(&graph.param(&self.store, self.fusion_w))?
                .add_bias(&graph.param(&self.store, self.fusion_b))?,
            (Some(t), None) => t,
            (None, Some(i)) => i,
            (None, None) => h,
        };
        Ok(fused)
    }

    /// Last-position decoder state for the current step.
    pub fn decode_state(
        &self,
        graph: &Graph,
        history: &[usize],
        instruction: &Tensor,
        visual: &Tensor,
        ctx: &mut DropoutCtx,
    ) -> ModelResult<Tensor> {
        let seq = self.decode_sequence(graph, history, instruction, visual, ctx)?;
        let last = seq.shape()[0] - 1;
        Ok(seq.select_row(last)?)
    }

    /// Low-level head logits over the six atomic actions.
    pub fn low_logits(&self, graph: &Graph, state: &Tensor) -> ModelResult<Tensor> {
        let head = self
            .low_head
            .as_ref()
            .ok_or(ModelError::MissingHead(ActionSpace::Low))?;
        Ok(state
            .matmul(&graph.param(&self.store, head.w))?
            .add(&graph.param(&self.store, head.b))?)
    }

    /// Probability distribution over the six atomic actions.
    pub fn select_low(&self, graph: &Graph, state: &Tensor) -> ModelResult<Tensor> {
        Ok(self.low_logits(graph, state)?.softmax(Axis::Cols)?)
    }

    /// High-level head logits: bilinear score between the projected state
    /// and each candidate's rectified appearance vector; the learned stop
    /// embedding is appended as the final candidate.
    pub fn high_logits(
        &self,
        graph: &Graph,
        state: &Tensor,
        candidates: &[Candidate],
    ) -> ModelResult<Tensor> {
        let head = self
            .high_head
            .as_ref()
            .ok_or(ModelError::MissingHead(ActionSpace::High))?;
        let s = state
            .matmul(&graph.param(&self.store, head.state_w))?
            .add(&graph.param(&self.store, head.state_b))?;
        let width = self.config.d_feat + 3;
        let mut rows: Vec<Tensor> = Vec::with_capacity(candidates.len() + 1);
        for c in candidates {
            let v = c.view.with_coord();
            if v.len() != width {
                return Err(ModelError::WrongViewCount {
                    got: v.len(),
                    want: width,
                });
            }
            rows.push(graph.constant(vec![width], v));
        }
        rows.push(graph.param(&self.store, head.stop_embedding));
        let refs: Vec<&Tensor> = rows.iter().collect();
        let v_matrix = Tensor::stack_rows(&refs)?;
        let g_v = v_matrix
            .matmul(&graph.param(&self.store, head.cand_w))?
            .add_bias(&graph.param(&self.store, head.cand_b))?
            .relu()?;
        Ok(g_v.matmul(&s)?)
    }

    /// Probabilities over candidates plus stop (stop is the last index).
    pub fn select_high(
        &self,
        graph: &Graph,
        state: &Tensor,
        candidates: &[Candidate],
    ) -> ModelResult<Tensor> {
        Ok(self.high_logits(graph, state, candidates)?.softmax(Axis::Cols)?)
    }

    pub fn has_head(&self, space: ActionSpace) -> bool {
        match space {
            ActionSpace::Low => self.low_head.is_some(),
            ActionSpace::High => self.high_head.is_some(),
        }
    }
}

/// Action selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    /// Categorical sample from the distribution.
    Train,
    /// Argmax with lowest-index tie-break.
    Eval,
}

/// Draws an action index from a probability vector.
pub fn act(probabilities: &[f64], mode: ActMode, rng: &mut ChaCha8Rng) -> usize {
    match mode {
        ActMode::Eval => {
            let mut best = 0;
            for (i, p) in probabilities.iter().enumerate() {
                if *p > probabilities[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Train => {
            let u: f64 = rng.gen();
            let mut cum = 0.0;
            for (i, p) in probabilities.iter().enumerate() {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            probabilities.len() - 1
        }
    }
}
