use ndarray::{s, Array1, Array2};

use super::ops::{rmsnorm, rmsnorm_backward, silu, silu_grad, Rope};
use super::params::{LayerParams, ModelConfig, Params};
use crate::attention::{
    dense_masked_attention, dense_masked_attention_backward, sparse_backward, sparse_forward, AttentionOutput,
    AttentionTensors,
};
use crate::error::{Error, Result};
use crate::gistshift::{BlockLayout, ShiftPermutation};
use crate::layout::{AugmentedSequence, CompressionConfig, SpecialTokens};
use crate::visibility::{build_unified_mask_fast, DenseMask};

/// Which attention implementation runs the unified pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttentionMode {
    /// Dense masked reference attention.
    Oracle,
    /// Gist-shifted block-sparse kernel.
    #[default]
    Sparse,
}

/// A concrete visibility plan for one sequence.
#[derive(Debug, Clone)]
pub enum AttentionPlan {
    Dense(DenseMask),
    Sparse { layout: BlockLayout, perm: ShiftPermutation },
}

impl AttentionPlan {
    pub fn unified(config: &CompressionConfig, raw_len: usize, mode: AttentionMode) -> Result<Self> {
        Ok(match mode {
            AttentionMode::Oracle => Self::Dense(build_unified_mask_fast(config, raw_len)),
            AttentionMode::Sparse => {
                let layout = BlockLayout::new(config, raw_len)?;
                let perm = layout.permutation();
                Self::Sparse { layout, perm }
            }
        })
    }

    fn len(&self) -> usize {
        match self {
            Self::Dense(m) => m.rows(),
            Self::Sparse { perm, .. } => perm.len(),
        }
    }
}

/// Attention operands and output as the kernel saw them (shifted for sparse plans).
#[derive(Debug, Clone)]
pub(crate) struct SavedAttention {
    pub tensors: AttentionTensors<f64>,
    pub out: AttentionOutput<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTrace {
    pub x_in: Array2<f64>,
    pub attn_inv: Array1<f64>,
    pub h_norm: Array2<f64>,
    pub attn: SavedAttention,
    /// Attention output in sequence order, `[n, d_model]`.
    pub attn_o: Array2<f64>,
    pub x_mid: Array2<f64>,
    pub mlp_inv: Array1<f64>,
    pub m_norm: Array2<f64>,
    pub gate: Array2<f64>,
    pub up: Array2<f64>,
    pub act: Array2<f64>,
}

/// Activations kept from a forward pass for the backward pass and diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(crate) tokens: Vec<u32>,
    pub(crate) positions: Vec<usize>,
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) x_out: Array2<f64>,
    pub(crate) final_inv: Array1<f64>,
    pub(crate) final_h: Array2<f64>,
    pub logits: Array2<f64>,
}

impl ForwardTrace {
    /// Rotated queries and keys plus `lse` of `layer` in sequence order, `[n, heads, head_dim]`.
    pub fn attention_operands(&self, layer: usize, plan: &AttentionPlan) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let saved = &self.layers[layer].attn;
        let t = &saved.tensors;
        match plan {
            AttentionPlan::Dense(_) => (t.q.clone(), t.k.clone(), saved.out.lse.clone()),
            AttentionPlan::Sparse { perm, .. } => (
                perm.unshift_rows(&t.q, t.row_width()),
                perm.unshift_rows(&t.k, t.row_width()),
                perm.unshift_rows(&saved.out.lse, t.heads),
            ),
        }
    }
}

/// A toy pre-norm decoder whose attention follows a gist layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub compression: CompressionConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, compression: CompressionConfig) -> Result<Self> {
        config.validate()?;
        compression.validate()?;
        let specials = SpecialTokens::new(config.vocab, compression.sink_count);
        let params = Params::init(&config, specials.total_vocab());
        Ok(Self {
            config,
            compression,
            params,
        })
    }

    pub fn specials(&self) -> SpecialTokens {
        SpecialTokens::new(self.config.vocab, self.compression.sink_count)
    }

    pub fn total_vocab(&self) -> usize {
        self.specials().total_vocab()
    }

    pub(crate) fn rope(&self) -> Rope {
        Rope::new(self.config.head_dim, self.config.rope_theta)
    }

    /// Augments `raw` with this model's compression settings.
    pub fn augment(&self, raw: &[u32]) -> Result<AugmentedSequence> {
        crate::layout::augment(raw, &self.compression, self.config.vocab)
    }

    /// Logits `[T', total_vocab]` for every slot under the unified pattern.
    pub fn forward(&self, seq: &AugmentedSequence, mode: AttentionMode) -> Result<Array2<f64>> {
        let plan = AttentionPlan::unified(&seq.config, seq.raw_len, mode)?;
        Ok(self.forward_trace(seq, &plan)?.logits)
    }

    pub(crate) fn embed_rows(&self, tokens: &[u32]) -> Result<Array2<f64>> {
        let dm = self.config.d_model();
        let vocab = self.params.embed.nrows();
        let mut x = Array2::zeros((tokens.len(), dm));
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= vocab {
                return Err(Error::ShapeMismatch(format!("token id {tok} outside embedding table of {vocab}")));
            }
            x.row_mut(i).assign(&self.params.embed.row(tok as usize));
        }
        Ok(x)
    }

    /// Q (rotated), K (rotated), V for `h_norm`, each `[n, d_model]` flattened.
    pub(crate) fn project_qkv(
        &self,
        layer: &LayerParams,
        h_norm: &Array2<f64>,
        positions: &[usize],
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let rope = self.rope();
        let mut q = h_norm.dot(&layer.wq).into_raw_vec_and_offset().0;
        let mut k = h_norm.dot(&layer.wk).into_raw_vec_and_offset().0;
        let v = h_norm.dot(&layer.wv).into_raw_vec_and_offset().0;
        rope.apply(&mut q, positions, self.config.heads, false);
        rope.apply(&mut k, positions, self.config.heads, false);
        (q, k, v)
    }

    /// Gated MLP block; returns `(gate, up, act, out)`.
    pub(crate) fn mlp(
        layer: &LayerParams,
        m_norm: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
        let gate = m_norm.dot(&layer.w_gate);
        let up = m_norm.dot(&layer.w_up);
        let act = gate.mapv(silu) * &up;
        let out = act.dot(&layer.w_down);
        (gate, up, act, out)
    }

    fn attend(&self, plan: &AttentionPlan, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> Result<(Vec<f64>, SavedAttention)> {
        let (h, d) = (self.config.heads, self.config.head_dim);
        match plan {
            AttentionPlan::Dense(mask) => {
                let n = mask.rows();
                let tensors = AttentionTensors::new(q, k, v, n, h, d)?;
                let out = dense_masked_attention(&tensors, mask)?;
                Ok((out.o.clone(), SavedAttention { tensors, out }))
            }
            AttentionPlan::Sparse { layout, perm } => {
                let w = h * d;
                let tensors = AttentionTensors::new(
                    perm.shift_rows(&q, w),
                    perm.shift_rows(&k, w),
                    perm.shift_rows(&v, w),
                    perm.padded_len,
                    h,
                    d,
                )?;
                let out = sparse_forward(&tensors, layout)?;
                Ok((perm.unshift_rows(&out.o, w), SavedAttention { tensors, out }))
            }
        }
    }

    fn attend_backward(
        &self,
        plan: &AttentionPlan,
        saved: &SavedAttention,
        d_o: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        match plan {
            AttentionPlan::Dense(mask) => {
                let g = dense_masked_attention_backward(&saved.tensors, &saved.out, d_o, mask)?;
                Ok((g.dq, g.dk, g.dv))
            }
            AttentionPlan::Sparse { layout, perm } => {
                let w = saved.tensors.row_width();
                let g = sparse_backward(&saved.tensors, &saved.out, &perm.shift_rows(d_o, w), layout)?;
                Ok((
                    perm.unshift_rows(&g.dq, w),
                    perm.unshift_rows(&g.dk, w),
                    perm.unshift_rows(&g.dv, w),
                ))
            }
        }
    }

    /// Full forward with every activation retained.
    pub fn forward_trace(&self, seq: &AugmentedSequence, plan: &AttentionPlan) -> Result<ForwardTrace> {
        self.forward_tokens(seq.token_ids(), seq.position_ids(), plan)
    }

    pub fn forward_tokens(&self, tokens: Vec<u32>, positions: Vec<usize>, plan: &AttentionPlan) -> Result<ForwardTrace> {
        let n = tokens.len();
        if plan.len() != n || positions.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} tokens, {} positions, plan for {}",
                positions.len(),
                plan.len()
            )));
        }
        let dm = self.config.d_model();
        let mut x = self.embed_rows(&tokens)?;
        let mut layers = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let (h_norm, attn_inv) = rmsnorm(&x, &layer.attn_norm);
            let (q, k, v) = self.project_qkv(layer, &h_norm, &positions);
            let (o, attn) = self.attend(plan, q, k, v)?;
            let attn_o = Array2::from_shape_vec((n, dm), o).expect("attention output shape");
            let x_mid = &x + &attn_o.dot(&layer.wo);
            let (m_norm, mlp_inv) = rmsnorm(&x_mid, &layer.mlp_norm);
            let (gate, up, act, mlp_out) = Self::mlp(layer, &m_norm);
            let x_next = &x_mid + &mlp_out;
            layers.push(LayerTrace {
                x_in: std::mem::replace(&mut x, x_next),
                attn_inv,
                h_norm,
                attn,
                attn_o,
                x_mid,
                mlp_inv,
                m_norm,
                gate,
                up,
                act,
            });
        }
        let (final_h, final_inv) = rmsnorm(&x, &self.params.final_norm);
        let logits = final_h.dot(&self.params.lm_head);
        Ok(ForwardTrace {
            tokens,
            positions,
            layers,
            x_out: x,
            final_inv,
            final_h,
            logits,
        })
    }

    /// Backpropagates `d_logits`; returns parameter gradients and the
    /// gradient with respect to the input embedding rows `[n, d_model]`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Array2<f64>, plan: &AttentionPlan) -> Result<(Params, Array2<f64>)> {
        let mut grads = self.params.zeros_like();
        let rope = self.rope();
        let heads = self.config.heads;

        grads.lm_head = trace.final_h.t().dot(d_logits);
        let d_final = d_logits.dot(&self.params.lm_head.t());
        let (mut dx, d_fnorm) = rmsnorm_backward(&d_final, &trace.x_out, &trace.final_inv, &self.params.final_norm);
        grads.final_norm = d_fnorm;

        for (li, (layer, lt)) in self.params.layers.iter().zip(&trace.layers).enumerate().rev() {
            let g = &mut grads.layers[li];
            // MLP branch.
            g.w_down = lt.act.t().dot(&dx);
            let d_act = dx.dot(&layer.w_down.t());
            let d_gate = &d_act * &lt.up * &lt.gate.mapv(silu_grad);
            let d_up = &d_act * &lt.gate.mapv(silu);
            g.w_gate = lt.m_norm.t().dot(&d_gate);
            g.w_up = lt.m_norm.t().dot(&d_up);
            let d_mnorm = d_gate.dot(&layer.w_gate.t()) + d_up.dot(&layer.w_up.t());
            let (d_mid, d_mlp_norm) = rmsnorm_backward(&d_mnorm, &lt.x_mid, &lt.mlp_inv, &layer.mlp_norm);
            g.mlp_norm = d_mlp_norm;
            let d_xmid = &dx + &d_mid;

            // Attention branch.
            g.wo = lt.attn_o.t().dot(&d_xmid);
            let d_attn_o = d_xmid.dot(&layer.wo.t());
            let d_o = d_attn_o.as_slice().expect("standard layout");
            let (mut dq, mut dk, dv) = self.attend_backward(plan, &lt.attn, d_o)?;
            rope.apply(&mut dq, &trace.positions, heads, true);
            rope.apply(&mut dk, &trace.positions, heads, true);
            let shape = lt.h_norm.raw_dim();
            let dq = Array2::from_shape_vec(shape, dq).expect("dq shape");
            let dk = Array2::from_shape_vec(lt.h_norm.raw_dim(), dk).expect("dk shape");
            let dv = Array2::from_shape_vec(lt.h_norm.raw_dim(), dv).expect("dv shape");
            g.wq = lt.h_norm.t().dot(&dq);
            g.wk = lt.h_norm.t().dot(&dk);
            g.wv = lt.h_norm.t().dot(&dv);
            let d_hnorm = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
            let (d_in, d_attn_norm) = rmsnorm_backward(&d_hnorm, &lt.x_in, &lt.attn_inv, &layer.attn_norm);
            g.attn_norm = d_attn_norm;
            dx = d_xmid + d_in;
        }

        for (i, &tok) in trace.tokens.iter().enumerate() {
            let mut row = grads.embed.row_mut(tok as usize);
            row += &dx.slice(s![i, ..]);
        }
        Ok((grads, dx))
    }

    /// Final-layer hidden states to logits for selected rows.
    pub(crate) fn head(&self, x: &Array2<f64>) -> Array2<f64> {
        let (h, _) = rmsnorm(x, &self.params.final_norm);
        h.dot(&self.params.lm_head)
    }
}

/// Index of the largest logit in `row` (first on ties).
pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
