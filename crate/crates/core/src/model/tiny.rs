//! A small decoder-only transformer with a hand-written backward pass.
//!
//! The network is fully specified so that every number it produces can be
//! checked: byte-level tokenizer plus four special tokens, learned position
//! embeddings, pre-norm blocks (LayerNorm, multi-head causal attention with
//! unbiased q/k/v/o projections, LayerNorm, GELU MLP), and an untied output
//! head applied directly to the last block's residual stream. There is no
//! final norm, so the last block's output is exactly the pre-unembedding
//! activation.
//!
//! Hidden-state extraction reads the residual stream of the final input
//! token at the output of each block. Gradient extraction teacher-forces a
//! paired response after the document, takes the mean negative
//! log-likelihood of the response tokens only, and backpropagates to the
//! attention projections of one selected block. All arithmetic is `f64`, and
//! every operation is deterministic: the same weights and inputs always
//! produce bit-identical outputs.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EncodeOptions, GradientBundle, ModelAdapter, ModelError, ModelMeta};
use crate::container::{self, Block, BlockData};

pub const TOKEN_BOS: usize = 256;
pub const TOKEN_USER: usize = 257;
pub const TOKEN_ASSISTANT: usize = 258;
pub const TOKEN_EOS: usize = 259;
pub const VOCAB: usize = 260;

const LN_EPS: f64 = 1e-5;
const ATTENTION_MATS: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyLmConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
}

impl TinyLmConfig {
    fn validate(&self) {
        assert!(self.num_layers >= 1);
        assert!(self.hidden_dim % self.num_heads == 0, "heads must divide hidden dim");
    }
}

/// Parameters of the seeded random mock model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    pub seed: u64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    /// When set, documents containing this substring get a fixed-direction
    /// offset added to every returned hidden state. Gradients are unaffected.
    pub sentinel: Option<String>,
    pub sentinel_scale: f64,
}

impl Default for MockSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: 4,
            hidden: 64,
            heads: 4,
            sentinel: None,
            sentinel_scale: 4.0,
        }
    }
}

impl MockSpec {
    /// Parse `key=value` pairs: `seed=7,layers=4,hidden=64,heads=4,sentinel=please`.
    pub fn parse(args: &str) -> Result<Self, String> {
        let mut spec = MockSpec::default();
        for pair in args.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
            match key {
                "seed" => spec.seed = value.parse().map_err(|e| format!("seed: {e}"))?,
                "layers" => spec.layers = value.parse().map_err(|e| format!("layers: {e}"))?,
                "hidden" => spec.hidden = value.parse().map_err(|e| format!("hidden: {e}"))?,
                "heads" => spec.heads = value.parse().map_err(|e| format!("heads: {e}"))?,
                "sentinel" => spec.sentinel = Some(value.to_string()),
                "sentinel_scale" => {
                    spec.sentinel_scale =
                        value.parse().map_err(|e| format!("sentinel_scale: {e}"))?
                }
                other => return Err(format!("unknown mock parameter {other:?}")),
            }
        }
        Ok(spec)
    }

    fn canonical_id(&self) -> String {
        let mut id = format!(
            "mock:seed={},layers={},hidden={},heads={}",
            self.seed, self.layers, self.hidden, self.heads
        );
        if let Some(sentinel) = &self.sentinel {
            id.push_str(&format!(",sentinel={sentinel},sentinel_scale={}", self.sentinel_scale));
        }
        id
    }
}

struct LayerParams {
    ln1_gamma: Array1<f64>,
    ln1_beta: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_gamma: Array1<f64>,
    ln2_beta: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

struct SentinelOffset {
    needle: String,
    direction: Array1<f64>,
    scale: f64,
}

pub struct TinyLm {
    config: TinyLmConfig,
    meta: ModelMeta,
    embed: Array2<f64>,
    pos: Array2<f64>,
    layers: Vec<LayerParams>,
    head: Array2<f64>,
    sentinel: Option<SentinelOffset>,
}

/// Gradients for every parameter tensor, in the same topology as the model.
pub struct TinyLmGrads {
    pub embed: Array2<f64>,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerGrads>,
    pub head: Array2<f64>,
}

pub struct LayerGrads {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Which parameters a backward pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    /// Attention projections of one block only; backpropagation stops below it.
    AttentionOfLayer(usize),
    /// Everything, for training.
    All,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| normal(rng, std))
}

impl TinyLm {
    pub fn new(config: TinyLmConfig, seed: u64, model_id: impl Into<String>) -> Self {
        config.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let f = config.ff_dim;
        let std = 0.02;
        // Residual-branch outputs are scaled down with depth so deep stacks
        // stay well conditioned.
        let out_std = std / (2.0 * config.num_layers as f64).sqrt();
        let embed = random_matrix(&mut rng, VOCAB, h, std);
        let pos = random_matrix(&mut rng, config.max_positions, h, std);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: Array1::ones(h),
                ln1_beta: Array1::zeros(h),
                wq: random_matrix(&mut rng, h, h, std),
                wk: random_matrix(&mut rng, h, h, std),
                wv: random_matrix(&mut rng, h, h, std),
                wo: random_matrix(&mut rng, h, h, out_std),
                ln2_gamma: Array1::ones(h),
                ln2_beta: Array1::zeros(h),
                w1: random_matrix(&mut rng, h, f, std),
                b1: Array1::zeros(f),
                w2: random_matrix(&mut rng, f, h, out_std),
                b2: Array1::zeros(h),
            })
            .collect();
        let head = random_matrix(&mut rng, h, VOCAB, std);
        let meta = Self::build_meta(model_id.into(), &config);
        Self {
            config,
            meta,
            embed,
            pos,
            layers,
            head,
            sentinel: None,
        }
    }

    /// The deterministic mock adapter.
    pub fn mock(spec: &MockSpec) -> Self {
        let config = TinyLmConfig {
            num_layers: spec.layers,
            hidden_dim: spec.hidden,
            num_heads: spec.heads,
            ff_dim: spec.hidden * 4,
            max_positions: 512,
        };
        let mut model = Self::new(config, spec.seed, spec.canonical_id());
        if let Some(needle) = &spec.sentinel {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e97_19e1);
            let mut direction =
                Array1::from_shape_fn(spec.hidden, |_| normal(&mut rng, 1.0));
            let norm = direction.dot(&direction).sqrt();
            direction.mapv_inplace(|x| x / norm);
            model.sentinel = Some(SentinelOffset {
                needle: needle.clone(),
                direction,
                scale: spec.sentinel_scale,
            });
        }
        model
    }

    fn build_meta(model_id: String, config: &TinyLmConfig) -> ModelMeta {
        let h = config.hidden_dim;
        let shapes = (0..config.num_layers)
            .map(|_| {
                ATTENTION_MATS
                    .iter()
                    .map(|name| (name.to_string(), h, h))
                    .collect()
            })
            .collect();
        ModelMeta {
            model_id,
            num_layers: config.num_layers,
            hidden_dim: h,
            attention_param_shapes: shapes,
            chat_template_available: true,
        }
    }

    pub fn config(&self) -> &TinyLmConfig {
        &self.config
    }

    pub fn set_model_id(&mut self, id: impl Into<String>) {
        self.meta.model_id = id.into();
    }

    // ----- tokenization -------------------------------------------------

    /// Prompt tokens for a document: `[BOS, USER, doc..., ASSISTANT]` with
    /// the chat template (the assistant marker closes the turn, so the last
    /// input token sits where the model commits to a reply), `[BOS, doc...]`
    /// without. Over-length documents are truncated from the right; the
    /// template and response never are.
    pub fn encode_prompt(&self, text: &str, opts: &EncodeOptions) -> Result<Vec<usize>, ModelError> {
        self.encode_with_response(text, None, opts).map(|(t, _)| t)
    }

    /// Tokens for a document/response pair plus the index of the first
    /// response token.
    pub fn encode_with_response(
        &self,
        text: &str,
        response: Option<&str>,
        opts: &EncodeOptions,
    ) -> Result<(Vec<usize>, usize), ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if let Some(r) = response {
            if r.is_empty() {
                return Err(ModelError::EmptyInput);
            }
        }
        let max = opts.max_tokens.min(self.config.max_positions);
        let doc: Vec<usize> = text.bytes().map(|b| b as usize).collect();
        let resp: Vec<usize> = response
            .map(|r| r.bytes().map(|b| b as usize).collect())
            .unwrap_or_default();
        // Plain mode joins document and response with a single space.
        let overhead = if opts.use_chat_template {
            3
        } else {
            1 + usize::from(response.is_some())
        };
        let budget = max.saturating_sub(overhead + resp.len());
        if budget == 0 {
            return Err(ModelError::EmptyInput);
        }
        let doc = &doc[..doc.len().min(budget)];

        let mut tokens = Vec::with_capacity(doc.len() + resp.len() + overhead);
        tokens.push(TOKEN_BOS);
        if opts.use_chat_template {
            tokens.push(TOKEN_USER);
            tokens.extend_from_slice(doc);
            tokens.push(TOKEN_ASSISTANT);
        } else {
            tokens.extend_from_slice(doc);
            if response.is_some() {
                tokens.push(b' ' as usize);
            }
        }
        let response_start = tokens.len();
        tokens.extend_from_slice(&resp);
        Ok((tokens, response_start))
    }

    // ----- forward ------------------------------------------------------

    fn embed_tokens(&self, tokens: &[usize]) -> Array2<f64> {
        let h = self.config.hidden_dim;
        let mut x = Array2::zeros((tokens.len(), h));
        for (i, &tok) in tokens.iter().enumerate() {
            debug_assert!(tok < VOCAB);
            let row = &self.embed.row(tok) + &self.pos.row(i);
            x.row_mut(i).assign(&row);
        }
        x
    }

    fn forward(&self, tokens: &[usize]) -> ForwardTrace {
        assert!(!tokens.is_empty());
        assert!(tokens.len() <= self.config.max_positions, "sequence exceeds max positions");
        let mut x = self.embed_tokens(tokens);
        let mut layer_traces = Vec::with_capacity(self.layers.len());
        let mut block_outputs = Vec::with_capacity(self.layers.len());
        for params in &self.layers {
            let (out, trace) = self.block_forward(&x, params);
            layer_traces.push(trace);
            block_outputs.push(out.clone());
            x = out;
        }
        ForwardTrace {
            layer_traces,
            block_outputs,
        }
    }

    fn block_forward(&self, x: &Array2<f64>, p: &LayerParams) -> (Array2<f64>, LayerTrace) {
        let nh = self.config.num_heads;
        let dh = self.config.hidden_dim / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let slen = x.nrows();

        let (xn1, ln1_inv_std, ln1_xhat) = layer_norm(x, &p.ln1_gamma, &p.ln1_beta);
        let q = xn1.dot(&p.wq);
        let k = xn1.dot(&p.wk);
        let v = xn1.dot(&p.wv);

        let mut probs = Vec::with_capacity(nh);
        let mut ctx = Array2::zeros((slen, self.config.hidden_dim));
        for head in 0..nh {
            let cols = s![.., head * dh..(head + 1) * dh];
            let qs = q.slice(cols);
            let ks = k.slice(cols);
            let vs = v.slice(cols);
            let mut scores = qs.dot(&ks.t());
            scores.mapv_inplace(|sc| sc * inv_sqrt);
            // Causal softmax: row i attends to positions 0..=i.
            let mut a = Array2::zeros((slen, slen));
            for i in 0..slen {
                let row = scores.slice(s![i, ..=i]);
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for j in 0..=i {
                    let e = (scores[[i, j]] - max).exp();
                    a[[i, j]] = e;
                    sum += e;
                }
                for j in 0..=i {
                    a[[i, j]] /= sum;
                }
            }
            let c = a.dot(&vs);
            ctx.slice_mut(cols).assign(&c);
            probs.push(a);
        }
        let attn_out = ctx.dot(&p.wo);
        let x_mid = x + &attn_out;

        let (xn2, ln2_inv_std, ln2_xhat) = layer_norm(&x_mid, &p.ln2_gamma, &p.ln2_beta);
        let z1 = xn2.dot(&p.w1) + &p.b1;
        let a1 = z1.mapv(gelu);
        let mlp_out = a1.dot(&p.w2) + &p.b2;
        let out = &x_mid + &mlp_out;

        let trace = LayerTrace {
            xn1,
            ln1_inv_std,
            ln1_xhat,
            q,
            k,
            v,
            probs,
            ctx,
            xn2,
            ln2_inv_std,
            ln2_xhat,
            z1,
            a1,
        };
        (out, trace)
    }

    /// Mean negative log-likelihood of `tokens[targets_from..]` given their
    /// prefixes. Forward-only; this is the quantity the finite-difference
    /// oracle perturbs.
    pub fn loss(&self, tokens: &[usize], targets_from: usize) -> f64 {
        assert!(targets_from >= 1 && targets_from < tokens.len());
        let trace = self.forward(tokens);
        let h_final = trace.block_outputs.last().expect("at least one layer");
        let mut total = 0.0;
        let count = tokens.len() - targets_from;
        for t in targets_from..tokens.len() {
            let logits = h_final.row(t - 1).dot(&self.head);
            total -= log_softmax_at(&logits, tokens[t]);
        }
        total / count as f64
    }

    /// Loss plus gradients under the given scope.
    pub fn loss_and_grads(
        &self,
        tokens: &[usize],
        targets_from: usize,
        scope: GradScope,
    ) -> (f64, TinyLmGrads) {
        assert!(targets_from >= 1 && targets_from < tokens.len());
        let trace = self.forward(tokens);
        let slen = tokens.len();
        let h = self.config.hidden_dim;
        let count = slen - targets_from;
        let weight = 1.0 / count as f64;

        let mut grads = self.zero_grads();
        let h_final = trace.block_outputs.last().expect("at least one layer");

        // Head and loss. Only rows that predict a target carry gradient.
        let mut loss = 0.0;
        let mut dx = Array2::zeros((slen, h));
        for t in targets_from..slen {
            let row = h_final.row(t - 1);
            let logits = row.dot(&self.head);
            let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let exps = logits.mapv(|l| (l - max).exp());
            let sum: f64 = exps.sum();
            loss -= logits[tokens[t]] - max - sum.ln();
            let mut dlogits = exps / sum;
            dlogits[tokens[t]] -= 1.0;
            dlogits.mapv_inplace(|g| g * weight);
            if scope == GradScope::All {
                // dhead += row^T . dlogits
                for (j, &g) in dlogits.iter().enumerate() {
                    if g != 0.0 {
                        grads
                            .head
                            .column_mut(j)
                            .iter_mut()
                            .zip(row.iter())
                            .for_each(|(acc, &r)| *acc += r * g);
                    }
                }
            }
            let dh_row = self.head.dot(&dlogits);
            dx.row_mut(t - 1)
                .iter_mut()
                .zip(dh_row.iter())
                .for_each(|(acc, &g)| *acc += g);
        }
        loss *= weight;

        let stop_layer = match scope {
            GradScope::AttentionOfLayer(l) => l,
            GradScope::All => 0,
        };
        for l in (stop_layer..self.layers.len()).rev() {
            let want = match scope {
                GradScope::All => AccumulateParams::All,
                GradScope::AttentionOfLayer(target) if target == l => AccumulateParams::Attention,
                _ => AccumulateParams::None,
            };
            dx = self.block_backward(
                &trace.layer_traces[l],
                &self.layers[l],
                dx,
                want,
                &mut grads.layers[l],
            );
        }

        if scope == GradScope::All {
            for (i, &tok) in tokens.iter().enumerate() {
                let drow = dx.row(i);
                grads
                    .embed
                    .row_mut(tok)
                    .iter_mut()
                    .zip(drow.iter())
                    .for_each(|(acc, &g)| *acc += g);
                grads
                    .pos
                    .row_mut(i)
                    .iter_mut()
                    .zip(drow.iter())
                    .for_each(|(acc, &g)| *acc += g);
            }
        }
        (loss, grads)
    }

    fn block_backward(
        &self,
        t: &LayerTrace,
        p: &LayerParams,
        dx_out: Array2<f64>,
        want: AccumulateParams,
        g: &mut LayerGrads,
    ) -> Array2<f64> {
        let nh = self.config.num_heads;
        let dh = self.config.hidden_dim / nh;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let slen = dx_out.nrows();

        // MLP branch: out = x_mid + mlp(LN2(x_mid))
        let da1 = dx_out.dot(&p.w2.t());
        if want == AccumulateParams::All {
            g.w2 += &t.a1.t().dot(&dx_out);
            g.b2 += &dx_out.sum_axis(Axis(0));
        }
        let dz1 = &da1 * &t.z1.mapv(gelu_prime);
        if want == AccumulateParams::All {
            g.w1 += &t.xn2.t().dot(&dz1);
            g.b1 += &dz1.sum_axis(Axis(0));
        }
        let dxn2 = dz1.dot(&p.w1.t());
        let (dx_mid_mlp, dg2, db2) =
            layer_norm_backward(&dxn2, &p.ln2_gamma, &t.ln2_xhat, &t.ln2_inv_std);
        if want == AccumulateParams::All {
            g.ln2_gamma += &dg2;
            g.ln2_beta += &db2;
        }
        let dx_mid = &dx_out + &dx_mid_mlp;

        // Attention branch: x_mid = x_in + ctx(LN1(x_in)) . Wo
        let dctx = dx_mid.dot(&p.wo.t());
        if want != AccumulateParams::None {
            g.wo += &t.ctx.t().dot(&dx_mid);
        }
        let mut dq = Array2::zeros((slen, self.config.hidden_dim));
        let mut dk = Array2::zeros((slen, self.config.hidden_dim));
        let mut dv = Array2::zeros((slen, self.config.hidden_dim));
        for head in 0..nh {
            let cols = s![.., head * dh..(head + 1) * dh];
            let a = &t.probs[head];
            let dc = dctx.slice(cols);
            let vs = t.v.slice(cols);
            let qs = t.q.slice(cols);
            let ks = t.k.slice(cols);

            let da = dc.dot(&vs.t());
            dv.slice_mut(cols).assign(&a.t().dot(&dc));
            // Softmax backward, rows restricted to the causal prefix.
            let mut ds = Array2::zeros((slen, slen));
            for i in 0..slen {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += a[[i, j]] * da[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * inv_sqrt;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&ks));
            dk.slice_mut(cols).assign(&ds.t().dot(&qs));
        }
        if want != AccumulateParams::None {
            g.wq += &t.xn1.t().dot(&dq);
            g.wk += &t.xn1.t().dot(&dk);
            g.wv += &t.xn1.t().dot(&dv);
        }
        let dxn1 = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
        let (dx_in_attn, dg1, db1) =
            layer_norm_backward(&dxn1, &p.ln1_gamma, &t.ln1_xhat, &t.ln1_inv_std);
        if want == AccumulateParams::All {
            g.ln1_gamma += &dg1;
            g.ln1_beta += &db1;
        }
        &dx_mid + &dx_in_attn
    }

    fn zero_grads(&self) -> TinyLmGrads {
        let h = self.config.hidden_dim;
        let f = self.config.ff_dim;
        TinyLmGrads {
            embed: Array2::zeros((VOCAB, h)),
            pos: Array2::zeros((self.config.max_positions, h)),
            layers: (0..self.layers.len())
                .map(|_| LayerGrads {
                    ln1_gamma: Array1::zeros(h),
                    ln1_beta: Array1::zeros(h),
                    wq: Array2::zeros((h, h)),
                    wk: Array2::zeros((h, h)),
                    wv: Array2::zeros((h, h)),
                    wo: Array2::zeros((h, h)),
                    ln2_gamma: Array1::zeros(h),
                    ln2_beta: Array1::zeros(h),
                    w1: Array2::zeros((h, f)),
                    b1: Array1::zeros(f),
                    w2: Array2::zeros((f, h)),
                    b2: Array1::zeros(h),
                })
                .collect(),
            head: Array2::zeros((h, VOCAB)),
        }
    }

    // ----- generation ---------------------------------------------------

    /// Greedy generation from a chat prompt, for use as a scripted-free
    /// local chat model. Stops at EOS or `max_new_tokens`.
    pub fn generate(&self, turns: &[(crate::eval::ChatRole, String)], max_new_tokens: usize) -> String {
        let mut tokens = vec![TOKEN_BOS];
        for (role, content) in turns {
            match role {
                crate::eval::ChatRole::User | crate::eval::ChatRole::System => {
                    tokens.push(TOKEN_USER)
                }
                crate::eval::ChatRole::Assistant => tokens.push(TOKEN_ASSISTANT),
            }
            tokens.extend(content.bytes().map(|b| b as usize));
        }
        tokens.push(TOKEN_ASSISTANT);
        let limit = self.config.max_positions;
        if tokens.len() >= limit {
            tokens.drain(1..tokens.len() - (limit - 2));
        }

        let mut out = Vec::new();
        for _ in 0..max_new_tokens {
            if tokens.len() >= limit {
                break;
            }
            let trace = self.forward(&tokens);
            let h_final = trace.block_outputs.last().expect("at least one layer");
            let logits = h_final.row(tokens.len() - 1).dot(&self.head);
            let next = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty vocab");
            if next == TOKEN_EOS {
                break;
            }
            tokens.push(next);
            if next < 256 {
                out.push(next as u8);
            }
        }
        String::from_utf8_lossy(&out).into_owned()
    }

    // ----- parameter access (training, finite differences) ---------------

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "pos".to_string()];
        for l in 0..self.layers.len() {
            for t in [
                "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo", "ln2_gamma", "ln2_beta", "w1",
                "b1", "w2", "b2",
            ] {
                names.push(format!("layer{l}.{t}"));
            }
        }
        names.push("head".to_string());
        names
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        self.tensor_ref(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    fn tensor_ref(&self, name: &str) -> Option<&[f64]> {
        match name {
            "embed" => self.embed.as_slice(),
            "pos" => self.pos.as_slice(),
            "head" => self.head.as_slice(),
            _ => {
                let (layer, field) = parse_layer_field(name)?;
                let p = self.layers.get(layer)?;
                match field {
                    "ln1_gamma" => p.ln1_gamma.as_slice(),
                    "ln1_beta" => p.ln1_beta.as_slice(),
                    "wq" => p.wq.as_slice(),
                    "wk" => p.wk.as_slice(),
                    "wv" => p.wv.as_slice(),
                    "wo" => p.wo.as_slice(),
                    "ln2_gamma" => p.ln2_gamma.as_slice(),
                    "ln2_beta" => p.ln2_beta.as_slice(),
                    "w1" => p.w1.as_slice(),
                    "b1" => p.b1.as_slice(),
                    "w2" => p.w2.as_slice(),
                    "b2" => p.b2.as_slice(),
                    _ => None,
                }
            }
        }
    }

    pub fn nudge_param(&mut self, name: &str, index: usize, delta: f64) {
        let slice = self
            .tensor_mut(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        slice[index] += delta;
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        match name {
            "embed" => self.embed.as_slice_mut(),
            "pos" => self.pos.as_slice_mut(),
            "head" => self.head.as_slice_mut(),
            _ => {
                let (layer, field) = parse_layer_field(name)?;
                let p = self.layers.get_mut(layer)?;
                match field {
                    "ln1_gamma" => p.ln1_gamma.as_slice_mut(),
                    "ln1_beta" => p.ln1_beta.as_slice_mut(),
                    "wq" => p.wq.as_slice_mut(),
                    "wk" => p.wk.as_slice_mut(),
                    "wv" => p.wv.as_slice_mut(),
                    "wo" => p.wo.as_slice_mut(),
                    "ln2_gamma" => p.ln2_gamma.as_slice_mut(),
                    "ln2_beta" => p.ln2_beta.as_slice_mut(),
                    "w1" => p.w1.as_slice_mut(),
                    "b1" => p.b1.as_slice_mut(),
                    "w2" => p.w2.as_slice_mut(),
                    "b2" => p.b2.as_slice_mut(),
                    _ => None,
                }
            }
        }
    }

    /// All parameter slices paired with the matching gradient slices, for
    /// the optimizer. Order matches [`Self::tensor_names`].
    pub(crate) fn params_with_grads<'a>(
        &'a mut self,
        grads: &'a TinyLmGrads,
    ) -> Vec<(&'a mut [f64], &'a [f64])> {
        let mut pairs: Vec<(&mut [f64], &[f64])> = Vec::new();
        pairs.push((
            self.embed.as_slice_mut().expect("contiguous"),
            grads.embed.as_slice().expect("contiguous"),
        ));
        pairs.push((
            self.pos.as_slice_mut().expect("contiguous"),
            grads.pos.as_slice().expect("contiguous"),
        ));
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            pairs.push((p.ln1_gamma.as_slice_mut().expect("contiguous"), g.ln1_gamma.as_slice().expect("contiguous")));
            pairs.push((p.ln1_beta.as_slice_mut().expect("contiguous"), g.ln1_beta.as_slice().expect("contiguous")));
            pairs.push((p.wq.as_slice_mut().expect("contiguous"), g.wq.as_slice().expect("contiguous")));
            pairs.push((p.wk.as_slice_mut().expect("contiguous"), g.wk.as_slice().expect("contiguous")));
            pairs.push((p.wv.as_slice_mut().expect("contiguous"), g.wv.as_slice().expect("contiguous")));
            pairs.push((p.wo.as_slice_mut().expect("contiguous"), g.wo.as_slice().expect("contiguous")));
            pairs.push((p.ln2_gamma.as_slice_mut().expect("contiguous"), g.ln2_gamma.as_slice().expect("contiguous")));
            pairs.push((p.ln2_beta.as_slice_mut().expect("contiguous"), g.ln2_beta.as_slice().expect("contiguous")));
            pairs.push((p.w1.as_slice_mut().expect("contiguous"), g.w1.as_slice().expect("contiguous")));
            pairs.push((p.b1.as_slice_mut().expect("contiguous"), g.b1.as_slice().expect("contiguous")));
            pairs.push((p.w2.as_slice_mut().expect("contiguous"), g.w2.as_slice().expect("contiguous")));
            pairs.push((p.b2.as_slice_mut().expect("contiguous"), g.b2.as_slice().expect("contiguous")));
        }
        pairs.push((
            self.head.as_slice_mut().expect("contiguous"),
            grads.head.as_slice().expect("contiguous"),
        ));
        pairs
    }

    // ----- persistence ----------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "config": self.config,
            "model_id": self.meta.model_id,
        });
        let mut blocks = Vec::new();
        for name in self.tensor_names() {
            let data = self.tensor(&name).to_vec();
            blocks.push(Block {
                name,
                rows: 0,
                cols: 0,
                data: BlockData::F64(data),
            });
        }
        container::write(path, "tiny-lm", meta, &blocks).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let load_err = |reason: String| ModelError::Load {
            path: path.display().to_string(),
            reason,
        };
        let (header, blocks) = container::read(path).map_err(|e| load_err(e.to_string()))?;
        if header.kind != "tiny-lm" {
            return Err(load_err(format!("container kind {:?}", header.kind)));
        }
        let config: TinyLmConfig = serde_json::from_value(header.meta["config"].clone())
            .map_err(|e| load_err(format!("bad config: {e}")))?;
        let model_id = header.meta["model_id"]
            .as_str()
            .unwrap_or("tiny-lm")
            .to_string();
        let mut model = Self::new(config, 0, model_id);
        for block in blocks {
            let data = match block.data {
                BlockData::F64(d) => d,
                BlockData::F32(_) => return Err(load_err(format!("tensor {} is f32", block.name))),
            };
            let slice = model
                .tensor_mut(&block.name)
                .ok_or_else(|| load_err(format!("unknown tensor {}", block.name)))?;
            if slice.len() != data.len() {
                return Err(load_err(format!(
                    "tensor {} has {} values, expected {}",
                    block.name,
                    data.len(),
                    slice.len()
                )));
            }
            slice.copy_from_slice(&data);
        }
        Ok(model)
    }

    fn attention_bundle(
        &self,
        layer: usize,
        grads: &TinyLmGrads,
        loss: f64,
    ) -> Result<GradientBundle, ModelError> {
        let lg = &grads.layers[layer];
        let matrices: Vec<(String, Array2<f64>)> = vec![
            ("wq".into(), lg.wq.clone()),
            ("wk".into(), lg.wk.clone()),
            ("wv".into(), lg.wv.clone()),
            ("wo".into(), lg.wo.clone()),
        ];
        for (_, m) in &matrices {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteGradient { loss });
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteGradient { loss });
        }
        Ok(GradientBundle {
            layer_index: layer,
            matrices,
            loss_value: loss,
        })
    }
}

fn parse_layer_field(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layer")?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

impl ModelAdapter for TinyLm {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    fn hidden_states_all_layers(
        &self,
        text: &str,
        opts: &EncodeOptions,
    ) -> Result<Vec<Vec<f32>>, ModelError> {
        let tokens = self.encode_prompt(text, opts)?;
        let trace = self.forward(&tokens);
        let last = tokens.len() - 1;
        let offset = self
            .sentinel
            .as_ref()
            .filter(|sp| text.contains(&sp.needle))
            .map(|sp| &sp.direction * sp.scale);
        Ok(trace
            .block_outputs
            .iter()
            .map(|h| {
                let mut row = h.row(last).to_owned();
                if let Some(off) = &offset {
                    row += off;
                }
                row.iter().map(|&v| v as f32).collect()
            })
            .collect())
    }

    fn attention_gradients(
        &self,
        text: &str,
        response: &str,
        layer: usize,
        opts: &EncodeOptions,
    ) -> Result<GradientBundle, ModelError> {
        let num_layers = self.meta.num_layers;
        if layer >= num_layers {
            return Err(ModelError::LayerOutOfRange { layer, num_layers });
        }
        let (tokens, targets_from) = self.encode_with_response(text, Some(response), opts)?;
        let (loss, grads) =
            self.loss_and_grads(&tokens, targets_from, GradScope::AttentionOfLayer(layer));
        self.attention_bundle(layer, &grads, loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AccumulateParams {
    None,
    Attention,
    All,
}

struct ForwardTrace {
    layer_traces: Vec<LayerTrace>,
    block_outputs: Vec<Array2<f64>>,
}

struct LayerTrace {
    xn1: Array2<f64>,
    ln1_inv_std: Array1<f64>,
    ln1_xhat: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    xn2: Array2<f64>,
    ln2_inv_std: Array1<f64>,
    ln2_xhat: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn log_softmax_at(logits: &Array1<f64>, index: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.mapv(|l| (l - max).exp()).sum().ln();
    logits[index] - lse
}

/// Row-wise LayerNorm. Returns (output, inverse std per row, normalized rows).
fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let n = x.ncols() as f64;
    let mut out = Array2::zeros(x.raw_dim());
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / n;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xhat[[i, j]] = h;
            out[[i, j]] = gamma[j] * h + beta[j];
        }
    }
    (out, inv_std, xhat)
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array1<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    let mut dgamma = Array1::zeros(dy.ncols());
    let mut dbeta = Array1::zeros(dy.ncols());
    for i in 0..dy.nrows() {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..dy.ncols() {
            let d = dy[[i, j]];
            let h = xhat[[i, j]];
            dgamma[j] += d * h;
            dbeta[j] += d;
            let dxh = d * gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * h;
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let inv = inv_std[i];
        for j in 0..dy.ncols() {
            let dxh = dy[[i, j]] * gamma[j];
            dx[[i, j]] = inv * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> TinyLm {
        TinyLm::mock(&MockSpec {
            seed: 3,
            layers: 3,
            hidden: 16,
            heads: 2,
            sentinel: None,
            sentinel_scale: 0.0,
        })
    }

    #[test]
    fn hidden_states_are_deterministic() {
        let m = small_model();
        let opts = EncodeOptions::default();
        let a = m.hidden_states_all_layers("hello there", &opts).unwrap();
        let b = m.hidden_states_all_layers("hello there", &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].len(), 16);
    }

    #[test]
    fn layers_produce_distinct_states() {
        let m = small_model();
        let opts = EncodeOptions::default();
        let all = m.hidden_states_all_layers("some text here", &opts).unwrap();
        for w in all.windows(2) {
            assert_ne!(w[0], w[1], "adjacent layers returned identical states");
        }
    }

    #[test]
    fn layer_out_of_range_is_rejected() {
        let m = small_model();
        let opts = EncodeOptions::default();
        let err = m.hidden_state("hello", 3, &opts).unwrap_err();
        assert!(matches!(err, ModelError::LayerOutOfRange { layer: 3, num_layers: 3 }));
        let err = m.attention_gradients("hello", "Sure", 7, &opts).unwrap_err();
        assert!(matches!(err, ModelError::LayerOutOfRange { layer: 7, .. }));
    }

    #[test]
    fn empty_input_is_rejected() {
        let m = small_model();
        let opts = EncodeOptions::default();
        assert!(matches!(
            m.hidden_state("", 0, &opts),
            Err(ModelError::EmptyInput)
        ));
        assert!(matches!(
            m.attention_gradients("text", "", 0, &opts),
            Err(ModelError::EmptyInput)
        ));
    }

    #[test]
    fn truncation_drops_document_not_response() {
        let m = small_model();
        let opts = EncodeOptions {
            max_tokens: 16,
            use_chat_template: true,
        };
        let long_doc = "x".repeat(100);
        let (tokens, start) = m
            .encode_with_response(&long_doc, Some("Sure"), &opts)
            .unwrap();
        assert_eq!(tokens.len(), 16);
        // Response bytes survive in full.
        assert_eq!(tokens.len() - start, 4);
        assert_eq!(tokens[start], b'S' as usize);
    }

    #[test]
    fn gradient_loss_is_deterministic() {
        let m = small_model();
        let opts = EncodeOptions::default();
        let a = m.attention_gradients("the river ran dry", "Sure", 1, &opts).unwrap();
        let b = m.attention_gradients("the river ran dry", "Sure", 1, &opts).unwrap();
        assert_eq!(a.loss_value, b.loss_value);
        assert_eq!(a.matrices[0].1, b.matrices[0].1);
        assert_eq!(a.matrices.len(), 4);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut m = small_model();
        let opts = EncodeOptions::default();
        let (tokens, start) = m
            .encode_with_response("a small test", Some("ok"), &opts)
            .unwrap();
        let (_, grads) = m.loss_and_grads(&tokens, start, GradScope::All);

        let eps = 1e-5;
        // A few scalars from assorted tensors, including non-attention ones.
        let probes = [
            ("layer0.wq", 5),
            ("layer1.wv", 40),
            ("layer2.wo", 7),
            ("layer1.w1", 11),
            ("embed", 100),
            ("head", 33),
            ("layer0.ln1_gamma", 3),
        ];
        for (tensor, idx) in probes {
            let analytic = grad_at(&grads, tensor, idx);
            m.nudge_param(tensor, idx, eps);
            let up = m.loss(&tokens, start);
            m.nudge_param(tensor, idx, -2.0 * eps);
            let down = m.loss(&tokens, start);
            m.nudge_param(tensor, idx, eps);
            let numeric = (up - down) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4,
                "{tensor}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    fn grad_at(grads: &TinyLmGrads, tensor: &str, idx: usize) -> f64 {
        match tensor {
            "embed" => grads.embed.as_slice().unwrap()[idx],
            "head" => grads.head.as_slice().unwrap()[idx],
            _ => {
                let (l, f) = parse_layer_field(tensor).unwrap();
                let lg = &grads.layers[l];
                let slice = match f {
                    "wq" => lg.wq.as_slice().unwrap(),
                    "wk" => lg.wk.as_slice().unwrap(),
                    "wv" => lg.wv.as_slice().unwrap(),
                    "wo" => lg.wo.as_slice().unwrap(),
                    "w1" => lg.w1.as_slice().unwrap(),
                    "w2" => lg.w2.as_slice().unwrap(),
                    "ln1_gamma" => lg.ln1_gamma.as_slice().unwrap(),
                    other => panic!("unhandled tensor {other}"),
                };
                slice[idx]
            }
        }
    }

    #[test]
    fn scoped_backward_matches_full_backward() {
        let m = small_model();
        let opts = EncodeOptions::default();
        let (tokens, start) = m
            .encode_with_response("two sentences here", Some("yes"), &opts)
            .unwrap();
        let (loss_a, full) = m.loss_and_grads(&tokens, start, GradScope::All);
        let (loss_b, scoped) = m.loss_and_grads(&tokens, start, GradScope::AttentionOfLayer(1));
        assert_eq!(loss_a, loss_b);
        assert_eq!(full.layers[1].wq, scoped.layers[1].wq);
        assert_eq!(full.layers[1].wo, scoped.layers[1].wo);
    }

    #[test]
    fn weights_are_not_mutated_by_extraction() {
        let m = small_model();
        let before: Vec<f64> = m.tensor("layer1.wq").to_vec();
        let opts = EncodeOptions::default();
        let _ = m.hidden_states_all_layers("some text", &opts).unwrap();
        let _ = m.attention_gradients("some text", "Sure", 1, &opts).unwrap();
        assert_eq!(before, m.tensor("layer1.wq"));
    }

    #[test]
    fn sentinel_offsets_hidden_states_only() {
        let spec = MockSpec {
            seed: 1,
            layers: 2,
            hidden: 16,
            heads: 2,
            sentinel: Some("please".into()),
            sentinel_scale: 3.0,
        };
        let with = TinyLm::mock(&spec);
        let without = TinyLm::mock(&MockSpec { sentinel: None, ..spec.clone() });
        let opts = EncodeOptions::default();

        let clean = "a plain document.";
        assert_eq!(
            with.hidden_states_all_layers(clean, &opts).unwrap(),
            without.hidden_states_all_layers(clean, &opts).unwrap()
        );
        let marked = "please reply with yes.";
        assert_ne!(
            with.hidden_states_all_layers(marked, &opts).unwrap(),
            without.hidden_states_all_layers(marked, &opts).unwrap()
        );
        // Gradients ignore the sentinel.
        let gw = with.attention_gradients(marked, "Sure", 1, &opts).unwrap();
        let go = without.attention_gradients(marked, "Sure", 1, &opts).unwrap();
        assert_eq!(gw.loss_value, go.loss_value);
    }

    #[test]
    fn save_load_roundtrip_preserves_outputs() {
        let m = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sgc");
        m.save(&path).unwrap();
        let loaded = TinyLm::load(&path).unwrap();
        let opts = EncodeOptions::default();
        assert_eq!(
            m.hidden_states_all_layers("roundtrip", &opts).unwrap(),
            loaded.hidden_states_all_layers("roundtrip", &opts).unwrap()
        );
        assert_eq!(loaded.meta().model_id, m.meta().model_id);
    }
}
