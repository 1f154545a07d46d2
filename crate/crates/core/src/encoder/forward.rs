use super::{EncoderModel, Linear};
use crate::error::{Error, Result};
use crate::tensor::{
    add, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward_input,
    linear_backward_params, matmul, matmul_backward, matmul_nt, row_softmax, row_softmax_backward,
    scale, tanh, tanh_backward, LayerNormCache, Tensor, LAYER_NORM_EPS,
};

/// Per-layer outputs; entry 0 is the embedding layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    layers: Vec<Tensor>,
}

impl HiddenStates {
    pub fn layer(&self, i: usize) -> Option<&Tensor> {
        self.layers.get(i)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn last(&self) -> &Tensor {
        self.layers.last().expect("embedding layer always present")
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }
}

/// Forward quantities needed by [`adapter_backward`].
#[derive(Clone, Debug)]
pub struct AdapterCache {
    input: Tensor,
    activation: Tensor,
}

/// Applies the bottleneck adapter row-wise: `h + tanh(h · downᵀ) · upᵀ`.
pub fn adapter_forward(h: &Tensor, down: &Tensor, up: &Tensor) -> Result<Tensor> {
    adapter_forward_cached(h, down, up).map(|(out, _)| out)
}

/// [`adapter_forward`] plus what [`adapter_backward`] needs.
pub fn adapter_forward_cached(
    h: &Tensor,
    down: &Tensor,
    up: &Tensor,
) -> Result<(Tensor, AdapterCache)> {
    let (m, d) = down.dims2()?;
    if up.shape() != [d, m] {
        return Err(Error::Shape {
            op: "adapter",
            left: down.shape().to_vec(),
            right: up.shape().to_vec(),
        });
    }
    let activation = tanh(&matmul_nt(h, down)?);
    let out = add(h, &matmul_nt(&activation, up)?)?;
    Ok((
        out,
        AdapterCache {
            input: h.clone(),
            activation,
        },
    ))
}

/// Returns gradients for the adapter input, `down` and `up`.
pub fn adapter_backward(
    cache: &AdapterCache,
    down: &Tensor,
    up: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (g_up, _) = linear_backward_params(&cache.activation, grad)?;
    let g_act = linear_backward_input(grad, up)?;
    let g_pre = tanh_backward(&cache.activation, &g_act)?;
    let (g_down, _) = linear_backward_params(&cache.input, &g_pre)?;
    let mut g_in = linear_backward_input(&g_pre, down)?;
    g_in.add_assign(grad)?;
    Ok((g_in, g_down, g_up))
}

struct LayerTape {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    attn_adapter: Option<AdapterCache>,
    attn_norm: LayerNormCache,
    ffn_pre: Tensor,
    ffn_adapter: Option<AdapterCache>,
    ffn_norm: LayerNormCache,
}

/// Recorded forward pass over the first layers of the encoder, consumed by
/// [`EncoderModel::backward`].
pub struct Tape {
    layers: Vec<LayerTape>,
}

impl Tape {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

fn apply(lin: &Linear, x: &Tensor) -> Result<Tensor> {
    linear(x, &lin.weight, Some(&lin.bias))
}

impl EncoderModel {
    /// Runs the full encoder.
    pub fn encode(&self, tokens: &[u32]) -> Result<HiddenStates> {
        self.run(tokens, self.config.num_layers, true, None)
    }

    /// Runs the embedding layer plus the first `depth` layers.
    pub fn encode_upto(&self, tokens: &[u32], depth: usize) -> Result<HiddenStates> {
        self.check_depth(depth)?;
        self.run(tokens, depth, true, None)
    }

    /// Full forward with every adapter bypassed.
    pub fn encode_base(&self, tokens: &[u32]) -> Result<HiddenStates> {
        self.run(tokens, self.config.num_layers, false, None)
    }

    /// Forward over `depth` layers, recording what [`EncoderModel::backward`] needs.
    pub fn encode_with_tape(&self, tokens: &[u32], depth: usize) -> Result<(HiddenStates, Tape)> {
        self.check_depth(depth)?;
        let mut tape = Tape { layers: Vec::new() };
        let hidden = self.run(tokens, depth, true, Some(&mut tape))?;
        Ok((hidden, tape))
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth > self.config.num_layers {
            return Err(Error::Data(format!(
                "layer {depth} requested but the model has {} layers",
                self.config.num_layers
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let c = &self.config;
        if tokens.len() > c.max_positions {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                c.max_positions
            )));
        }
        let e = &self.base.embeddings;
        let d = c.hidden_dim;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (pos, &id) in tokens.iter().enumerate() {
            if id as usize >= c.vocab_size {
                return Err(Error::Data(format!(
                    "token id {id} at position {pos} is outside the vocabulary of {}",
                    c.vocab_size
                )));
            }
            let row = x.row_mut(pos);
            for (k, v) in row.iter_mut().enumerate() {
                *v = e.word.get(id as usize, k) + e.position.get(pos, k) + e.token_type.get(0, k);
            }
        }
        Ok(layer_norm(&x, &e.norm.gain, &e.norm.bias, LAYER_NORM_EPS)?.0)
    }

    fn run(
        &self,
        tokens: &[u32],
        depth: usize,
        use_adapters: bool,
        mut tape: Option<&mut Tape>,
    ) -> Result<HiddenStates> {
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(self.embed(tokens)?);
        for i in 0..depth {
            let (out, record) = self.layer_forward(i, layers.last().unwrap(), use_adapters)?;
            if let Some(t) = tape.as_deref_mut() {
                t.layers.push(record);
            }
            layers.push(out);
        }
        Ok(HiddenStates { layers })
    }

    fn layer_forward(&self, i: usize, h: &Tensor, use_adapters: bool) -> Result<(Tensor, LayerTape)> {
        let base = &self.base.layers[i];
        let adapters = &self.adapters.layers[i];
        let (n, d) = h.dims2()?;
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f32).sqrt();

        let q = apply(&base.q, h)?;
        let k = apply(&base.k, h)?;
        let v = apply(&base.v, h)?;
        let mut context = Tensor::zeros(&[n, d]);
        let mut probs = Vec::with_capacity(self.config.num_heads);
        for head in 0..self.config.num_heads {
            let (s, e) = (head * dh, (head + 1) * dh);
            let scores = scale(&matmul_nt(&q.slice_cols(s, e), &k.slice_cols(s, e))?, inv_sqrt);
            let p = row_softmax(&scores)?;
            context.set_cols(s, &matmul(&p, &v.slice_cols(s, e))?);
            probs.push(p);
        }
        let attn = apply(&base.o, &context)?;
        let (attn, attn_adapter) = if use_adapters {
            let (out, cache) =
                adapter_forward_cached(&attn, &adapters.attn.down, &adapters.attn.up)?;
            (out, Some(cache))
        } else {
            (attn, None)
        };
        let (mid, attn_norm) = layer_norm(
            &add(h, &attn)?,
            &base.attn_norm.gain,
            &base.attn_norm.bias,
            LAYER_NORM_EPS,
        )?;

        let ffn_pre = apply(&base.ffn_in, &mid)?;
        let ffn = apply(&base.ffn_out, &gelu(&ffn_pre))?;
        let (ffn, ffn_adapter) = if use_adapters {
            let (out, cache) = adapter_forward_cached(&ffn, &adapters.ffn.down, &adapters.ffn.up)?;
            (out, Some(cache))
        } else {
            (ffn, None)
        };
        let (out, ffn_norm) = layer_norm(
            &add(&mid, &ffn)?,
            &base.ffn_norm.gain,
            &base.ffn_norm.bias,
            LAYER_NORM_EPS,
        )?;
        Ok((
            out,
            LayerTape {
                q,
                k,
                v,
                probs,
                attn_adapter,
                attn_norm,
                ffn_pre,
                ffn_adapter,
                ffn_norm,
            },
        ))
    }

    /// Gradient of a scalar loss with respect to every adapter weight, given
    /// `grad` = d(loss)/d(output of the last taped layer). Layers above the
    /// taped depth get zero gradients.
    pub fn backward(&self, tape: &Tape, grad: &Tensor) -> Result<super::AdapterGrads> {
        let mut grads = self.adapters.zeros_like();
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let mut g = grad.clone();
        for (i, rec) in tape.layers.iter().enumerate().rev() {
            let base = &self.base.layers[i];
            let adapters = &self.adapters.layers[i];
            let slot = &mut grads.layers[i];

            let g_sum = layer_norm_backward(&rec.ffn_norm, &base.ffn_norm.gain, &g)?.input;
            let mut g_mid = g_sum.clone();
            let g_ffn = match &rec.ffn_adapter {
                Some(cache) => {
                    let (g_in, g_down, g_up) =
                        adapter_backward(cache, &adapters.ffn.down, &adapters.ffn.up, &g_sum)?;
                    slot.ffn.down = g_down;
                    slot.ffn.up = g_up;
                    g_in
                }
                None => g_sum,
            };
            let g_act = linear_backward_input(&g_ffn, &base.ffn_out.weight)?;
            let g_pre = gelu_backward(&rec.ffn_pre, &g_act)?;
            g_mid.add_assign(&linear_backward_input(&g_pre, &base.ffn_in.weight)?)?;

            let g_sum = layer_norm_backward(&rec.attn_norm, &base.attn_norm.gain, &g_mid)?.input;
            let mut g_in = g_sum.clone();
            let g_attn = match &rec.attn_adapter {
                Some(cache) => {
                    let (g_a, g_down, g_up) =
                        adapter_backward(cache, &adapters.attn.down, &adapters.attn.up, &g_sum)?;
                    slot.attn.down = g_down;
                    slot.attn.up = g_up;
                    g_a
                }
                None => g_sum,
            };
            let g_context = linear_backward_input(&g_attn, &base.o.weight)?;
            let mut g_q = Tensor::zeros_like(&rec.q);
            let mut g_k = Tensor::zeros_like(&rec.k);
            let mut g_v = Tensor::zeros_like(&rec.v);
            for (head, p) in rec.probs.iter().enumerate() {
                let (s, e) = (head * dh, (head + 1) * dh);
                let (g_p, g_vh) = matmul_backward(p, &rec.v.slice_cols(s, e), &g_context.slice_cols(s, e))?;
                let g_scores = scale(&row_softmax_backward(p, &g_p)?, inv_sqrt);
                // scores = q_h · k_hᵀ
                g_q.set_cols(s, &matmul(&g_scores, &rec.k.slice_cols(s, e))?);
                g_k.set_cols(s, &matmul(&g_scores.transpose(), &rec.q.slice_cols(s, e))?);
                g_v.set_cols(s, &g_vh);
            }
            g_in.add_assign(&linear_backward_input(&g_q, &base.q.weight)?)?;
            g_in.add_assign(&linear_backward_input(&g_k, &base.k.weight)?)?;
            g_in.add_assign(&linear_backward_input(&g_v, &base.v.weight)?)?;
            g = g_in;
        }
        Ok(grads)
    }
}
