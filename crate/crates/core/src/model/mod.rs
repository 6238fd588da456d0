//! A small pre-norm transformer encoder-decoder with hand-written
//! backpropagation, in double precision.
//!
//! The decoder predicts the output sequence `[g a o']` under teacher forcing.
//! The loss averages cross-entropy within the goal/action span and within the
//! next-observation span separately and mixes them as
//! `(L_ga + lambda * L_obs) / (1 + lambda)`.

mod checkpoint;
mod gradcheck;
mod layers;
mod train;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::EncodedPair;
use layers::*;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use train::{train, TrainConfig, TrainError, TrainMetrics, TrainingSet};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what} length {len} exceeds the configured cap {cap}")]
    TooLong { what: &'static str, len: usize, cap: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub attention_heads: usize,
    pub feedforward_width: usize,
    pub max_input_tokens: usize,
    pub max_output_tokens: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            model_width: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            attention_heads: 4,
            feedforward_width: 256,
            max_input_tokens: 512,
            max_output_tokens: 128,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.vocab_size == 0 {
            return err("vocab_size must be positive");
        }
        if self.model_width == 0 || self.attention_heads == 0 || self.feedforward_width == 0 {
            return err("widths and head count must be positive");
        }
        if self.model_width % self.attention_heads != 0 {
            return err("model_width must be divisible by attention_heads");
        }
        if self.max_input_tokens == 0 || self.max_output_tokens == 0 {
            return err("token caps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean cross-entropy over the goal/action span.
    pub goal_action: f64,
    /// Mean cross-entropy over the next-observation span, if present.
    pub observation: Option<f64>,
    pub total: f64,
}

/// `(L_ga + lambda * L_obs) / (1 + lambda)`, or `L_ga` without an
/// observation span.
pub fn combine_losses(goal_action: f64, observation: Option<f64>, lambda: f64) -> f64 {
    match observation {
        Some(obs) => (goal_action + lambda * obs) / (1.0 + lambda),
        None => goal_action,
    }
}

struct EncoderLayer {
    norm1: NormIds,
    attn: AttnIds,
    norm2: NormIds,
    ff: FfIds,
}

struct DecoderLayer {
    norm1: NormIds,
    self_attn: AttnIds,
    norm2: NormIds,
    cross: AttnIds,
    norm3: NormIds,
    ff: FfIds,
}

struct Layout {
    embed: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: NormIds,
    decoder: Vec<DecoderLayer>,
    decoder_norm: NormIds,
    out: LinearIds,
}

/// Named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl Parameters {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Builds the parameter layout; `init` supplies each tensor given its
/// name, shape and role.
struct Builder<'a> {
    params: Parameters,
    init: &'a mut dyn FnMut(Init, (usize, usize)) -> Array2<f64>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.params.names.push(name);
        self.params.tensors.push((self.init)(init, shape));
        self.params.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.weight"), (fan_in, fan_out), Init::Normal(std)),
            b: self.add(format!("{name}.bias"), (1, fan_out), Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{name}.gain"), (1, d), Init::Ones),
            bias: self.add(format!("{name}.bias"), (1, d), Init::Zeros),
        }
    }

    fn attn(&mut self, name: &str, d: usize, out_std: f64) -> AttnIds {
        let std = 1.0 / (d as f64).sqrt();
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d, std),
            k: self.linear(&format!("{name}.k"), d, d, std),
            v: self.linear(&format!("{name}.v"), d, d, std),
            o: self.linear(&format!("{name}.o"), d, d, out_std),
        }
    }

    fn ff(&mut self, name: &str, d: usize, hidden: usize, out_std: f64) -> FfIds {
        FfIds {
            up: self.linear(&format!("{name}.up"), d, hidden, 1.0 / (d as f64).sqrt()),
            down: self.linear(&format!("{name}.down"), hidden, d, out_std),
        }
    }
}

fn build_layout(cfg: &ModelConfig, init: &mut dyn FnMut(Init, (usize, usize)) -> Array2<f64>) -> (Layout, Parameters) {
    let d = cfg.model_width;
    let depth = (cfg.encoder_layers + cfg.decoder_layers).max(1) as f64;
    let out_std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt() / (2.0 * depth).sqrt();
    let mut b = Builder {
        params: Parameters {
            names: Vec::new(),
            tensors: Vec::new(),
        },
        init,
    };
    let embed = b.add("embed".into(), (cfg.vocab_size, d), Init::Normal(0.5));
    let encoder = (0..cfg.encoder_layers)
        .map(|i| EncoderLayer {
            norm1: b.norm(&format!("enc{i}.norm1"), d),
            attn: b.attn(&format!("enc{i}.attn"), d, out_std(d)),
            norm2: b.norm(&format!("enc{i}.norm2"), d),
            ff: b.ff(&format!("enc{i}.ff"), d, cfg.feedforward_width, out_std(cfg.feedforward_width)),
        })
        .collect();
    let encoder_norm = b.norm("enc.norm", d);
    let decoder = (0..cfg.decoder_layers)
        .map(|i| DecoderLayer {
            norm1: b.norm(&format!("dec{i}.norm1"), d),
            self_attn: b.attn(&format!("dec{i}.self"), d, out_std(d)),
            norm2: b.norm(&format!("dec{i}.norm2"), d),
            cross: b.attn(&format!("dec{i}.cross"), d, out_std(d)),
            norm3: b.norm(&format!("dec{i}.norm3"), d),
            ff: b.ff(&format!("dec{i}.ff"), d, cfg.feedforward_width, out_std(cfg.feedforward_width)),
        })
        .collect();
    let decoder_norm = b.norm("dec.norm", d);
    let out = b.linear("out", d, cfg.vocab_size, 0.02);
    (
        Layout {
            embed,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            out,
        },
        b.params,
    )
}

/// Encoder output plus the cross-attention keys and values of every decoder
/// layer, reusable across decoding steps.
pub struct EncodedContext {
    memory: Array2<f64>,
    cross_kv: Vec<(Array2<f64>, Array2<f64>)>,
}

impl EncodedContext {
    pub fn len(&self) -> usize {
        self.memory.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.nrows() == 0
    }
}

pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: Parameters,
    layout: Layout,
    pos: Array2<f64>,
}

impl Clone for Seq2Seq {
    fn clone(&self) -> Self {
        Seq2Seq::from_parameters(self.config.clone(), self.params.clone()).expect("valid layout")
    }
}

struct EncoderCache {
    tokens: Vec<u32>,
    layers: Vec<(Array2<f64>, NormCache, AttnCache, NormCache, Array2<f64>, FfCache)>,
    norm: NormCache,
}

struct DecoderLayerCache {
    n1_out: Array2<f64>,
    n1: NormCache,
    self_attn: AttnCache,
    n2_out: Array2<f64>,
    n2: NormCache,
    cross: AttnCache,
    n3_out: Array2<f64>,
    n3: NormCache,
    ff: FfCache,
}

struct DecoderCache {
    tokens: Vec<u32>,
    layers: Vec<DecoderLayerCache>,
    norm: NormCache,
    normed: Array2<f64>,
}

impl Seq2Seq {
    /// Fresh model with small random weights drawn from `init_seed`.
    pub fn new(config: ModelConfig) -> Result<Seq2Seq, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = |kind: Init, shape: (usize, usize)| match kind {
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::Normal(std) => {
                let n = Normal::new(0.0, std).expect("finite std");
                Array2::from_shape_simple_fn(shape, || n.sample(&mut rng))
            }
        };
        let (layout, params) = build_layout(&config, &mut init);
        let pos = positions(config.max_input_tokens.max(config.max_output_tokens), config.model_width);
        Ok(Seq2Seq {
            config,
            params,
            layout,
            pos,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_parameters(config: ModelConfig, params: Parameters) -> Result<Seq2Seq, ModelError> {
        config.validate()?;
        let mut init = |_: Init, shape: (usize, usize)| Array2::zeros(shape);
        let (layout, expected) = build_layout(&config, &mut init);
        if expected.names != params.names {
            return Err(ModelError::Config("parameter names do not match the config".into()));
        }
        for (name, (a, b)) in expected.names.iter().zip(expected.tensors.iter().zip(&params.tensors)) {
            if a.dim() != b.dim() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.dim(),
                    a.dim()
                )));
            }
        }
        let pos = positions(config.max_input_tokens.max(config.max_output_tokens), config.model_width);
        Ok(Seq2Seq {
            config,
            params,
            layout,
            pos,
        })
    }

    fn heads(&self) -> usize {
        self.config.attention_heads
    }

    fn embed(&self, tokens: &[u32]) -> Array2<f64> {
        let e = &self.params.tensors[self.layout.embed];
        let mut x = Array2::zeros((tokens.len(), self.config.model_width));
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i).assign(&e.row(t as usize));
        }
        x += &self.pos.slice(s![..tokens.len(), ..]);
        x
    }

    fn embed_backward(&self, g: &mut [Array2<f64>], tokens: &[u32], dx: &Array2<f64>) {
        let ge = &mut g[self.layout.embed];
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = ge.row_mut(t as usize);
            row += &dx.row(i);
        }
    }

    fn check_input(&self, input: &[u32]) -> Result<(), ModelError> {
        if input.is_empty() {
            return Err(ModelError::Empty("input"));
        }
        if input.len() > self.config.max_input_tokens {
            return Err(ModelError::TooLong {
                what: "input",
                len: input.len(),
                cap: self.config.max_input_tokens,
            });
        }
        Ok(())
    }

    fn encoder_forward(&self, tokens: &[u32]) -> (Array2<f64>, EncoderCache) {
        let p = &self.params.tensors;
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.layout.encoder.len());
        for l in &self.layout.encoder {
            let (h, n1) = layer_norm(p, l.norm1, &x);
            let (k, v) = project_kv(p, l.attn, &h);
            let (a, attn) = attention(p, l.attn, self.heads(), &h, k, v, false);
            let x_mid = &x + &a;
            let (h2, n2) = layer_norm(p, l.norm2, &x_mid);
            let (f, ff) = feed_forward(p, l.ff, &h2);
            let x_out = &x_mid + &f;
            layers.push((h, n1, attn, n2, h2, ff));
            x = x_out;
        }
        let (m, norm) = layer_norm(p, self.layout.encoder_norm, &x);
        (
            m,
            EncoderCache {
                tokens: tokens.to_vec(),
                layers,
                norm,
            },
        )
    }

    fn encoder_backward(&self, g: &mut [Array2<f64>], cache: &EncoderCache, dm: &Array2<f64>) {
        let p = &self.params.tensors;
        let mut dx = layer_norm_backward(p, g, self.layout.encoder_norm, &cache.norm, dm);
        for (l, (h, n1, attn, n2, h2, ff)) in self.layout.encoder.iter().zip(&cache.layers).rev() {
            let dh2 = feed_forward_backward(p, g, l.ff, h2, ff, &dx);
            dx += &layer_norm_backward(p, g, l.norm2, n2, &dh2);
            let (mut dh, dk, dv) = attention_backward(p, g, l.attn, self.heads(), h, attn, &dx);
            dh += &project_kv_backward(p, g, l.attn, h, &dk, &dv);
            dx += &layer_norm_backward(p, g, l.norm1, n1, &dh);
        }
        self.embed_backward(g, &cache.tokens, &dx);
    }

    fn cross_kv(&self, memory: &Array2<f64>) -> Vec<(Array2<f64>, Array2<f64>)> {
        self.layout
            .decoder
            .iter()
            .map(|l| project_kv(&self.params.tensors, l.cross, memory))
            .collect()
    }

    fn decoder_forward(&self, tokens: &[u32], cross_kv: &[(Array2<f64>, Array2<f64>)]) -> (Array2<f64>, DecoderCache) {
        let p = &self.params.tensors;
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for (l, (ck, cv)) in self.layout.decoder.iter().zip(cross_kv) {
            let (n1_out, n1) = layer_norm(p, l.norm1, &x);
            let (k, v) = project_kv(p, l.self_attn, &n1_out);
            let (a, self_attn) = attention(p, l.self_attn, self.heads(), &n1_out, k, v, true);
            let x_mid = &x + &a;
            let (n2_out, n2) = layer_norm(p, l.norm2, &x_mid);
            let (c, cross) = attention(p, l.cross, self.heads(), &n2_out, ck.clone(), cv.clone(), false);
            let x_mid2 = &x_mid + &c;
            let (n3_out, n3) = layer_norm(p, l.norm3, &x_mid2);
            let (f, ff) = feed_forward(p, l.ff, &n3_out);
            let x_out = &x_mid2 + &f;
            layers.push(DecoderLayerCache {
                n1_out,
                n1,
                self_attn,
                n2_out,
                n2,
                cross,
                n3_out,
                n3,
                ff,
            });
            x = x_out;
        }
        let (normed, norm) = layer_norm(p, self.layout.decoder_norm, &x);
        let logits = linear(p, self.layout.out, &normed);
        (
            logits,
            DecoderCache {
                tokens: tokens.to_vec(),
                layers,
                norm,
                normed,
            },
        )
    }

    /// Backward through the decoder; returns the per-layer gradients with
    /// respect to the cross-attention keys and values.
    fn decoder_backward(
        &self,
        g: &mut [Array2<f64>],
        cache: &DecoderCache,
        dlogits: &Array2<f64>,
    ) -> Vec<(Array2<f64>, Array2<f64>)> {
        let p = &self.params.tensors;
        let dnormed = linear_backward(p, g, self.layout.out, &cache.normed, dlogits);
        let mut dx = layer_norm_backward(p, g, self.layout.decoder_norm, &cache.norm, &dnormed);
        let mut dkv = Vec::with_capacity(cache.layers.len());
        for (l, c) in self.layout.decoder.iter().zip(&cache.layers).rev() {
            let dn3 = feed_forward_backward(p, g, l.ff, &c.n3_out, &c.ff, &dx);
            dx += &layer_norm_backward(p, g, l.norm3, &c.n3, &dn3);
            let (dn2, dck, dcv) = attention_backward(p, g, l.cross, self.heads(), &c.n2_out, &c.cross, &dx);
            dkv.push((dck, dcv));
            dx += &layer_norm_backward(p, g, l.norm2, &c.n2, &dn2);
            let (mut dn1, dk, dv) = attention_backward(p, g, l.self_attn, self.heads(), &c.n1_out, &c.self_attn, &dx);
            dn1 += &project_kv_backward(p, g, l.self_attn, &c.n1_out, &dk, &dv);
            dx += &layer_norm_backward(p, g, l.norm1, &c.n1, &dn1);
        }
        self.embed_backward(g, &cache.tokens, &dx);
        dkv.reverse();
        dkv
    }

    fn decoder_inputs(&self, output: &[u32]) -> Vec<u32> {
        let mut dec = Vec::with_capacity(output.len());
        dec.push(crate::codec::Vocabulary::BOS_ID);
        dec.extend_from_slice(&output[..output.len() - 1]);
        dec
    }

    fn check_pair(&self, pair: &EncodedPair) -> Result<(), ModelError> {
        self.check_input(&pair.input)?;
        if pair.goal_action_len == 0 || pair.output.len() < pair.goal_action_len {
            return Err(ModelError::Empty("goal/action span"));
        }
        if pair.output.len() > self.config.max_output_tokens {
            return Err(ModelError::TooLong {
                what: "output",
                len: pair.output.len(),
                cap: self.config.max_output_tokens,
            });
        }
        Ok(())
    }

    /// Span losses and, when `grads` is given, their gradient accumulated
    /// into it (weighted by `scale`).
    fn run(&self, pair: &EncodedPair, lambda: f64, grads: Option<(&mut [Array2<f64>], f64)>) -> Result<LossParts, ModelError> {
        self.check_pair(pair)?;
        let (memory, enc_cache) = self.encoder_forward(&pair.input);
        let cross = self.cross_kv(&memory);
        let dec_in = self.decoder_inputs(&pair.output);
        let (logits, dec_cache) = self.decoder_forward(&dec_in, &cross);
        let logp = log_softmax_rows(&logits);

        let n = pair.output.len();
        let n_ga = pair.goal_action_len;
        let n_obs = n - n_ga;
        let ce: Vec<f64> = pair.output.iter().enumerate().map(|(i, &t)| -logp[[i, t as usize]]).collect();
        let goal_action = ce[..n_ga].iter().sum::<f64>() / n_ga as f64;
        let observation = (n_obs > 0).then(|| ce[n_ga..].iter().sum::<f64>() / n_obs as f64);
        let total = combine_losses(goal_action, observation, lambda);

        if let Some((g, scale)) = grads {
            let (w_ga, w_obs) = if n_obs > 0 {
                (1.0 / ((1.0 + lambda) * n_ga as f64), lambda / ((1.0 + lambda) * n_obs as f64))
            } else {
                (1.0 / n_ga as f64, 0.0)
            };
            let mut dlogits = logp.mapv(f64::exp);
            for (i, mut row) in dlogits.axis_iter_mut(Axis(0)).enumerate() {
                row[pair.output[i] as usize] -= 1.0;
                let w = if i < n_ga { w_ga } else { w_obs };
                row *= w * scale;
            }
            let dkv = self.decoder_backward(g, &dec_cache, &dlogits);
            let p = &self.params.tensors;
            let mut dm = Array2::zeros(memory.raw_dim());
            for (l, (dk, dv)) in self.layout.decoder.iter().zip(&dkv) {
                dm += &project_kv_backward(p, g, l.cross, &memory, dk, dv);
            }
            self.encoder_backward(g, &enc_cache, &dm);
        }
        Ok(LossParts {
            goal_action,
            observation,
            total,
        })
    }

    /// Loss of one pair under mixing weight `lambda`.
    pub fn loss(&self, pair: &EncodedPair, lambda: f64) -> Result<LossParts, ModelError> {
        self.run(pair, lambda, None)
    }

    /// Mean loss over a batch of pairs.
    pub fn batch_loss(&self, pairs: &[EncodedPair], lambda: f64) -> Result<f64, ModelError> {
        if pairs.is_empty() {
            return Err(ModelError::Empty("batch"));
        }
        let mut sum = 0.0;
        for p in pairs {
            sum += self.loss(p, lambda)?.total;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Loss and gradient of one pair.
    pub fn loss_and_grad(&self, pair: &EncodedPair, lambda: f64) -> Result<(LossParts, Vec<Array2<f64>>), ModelError> {
        let mut g = self.params.zeros_like();
        let parts = self.run(pair, lambda, Some((&mut g, 1.0)))?;
        Ok((parts, g))
    }

    /// Runs the encoder once for repeated decoding.
    pub fn encode(&self, input: &[u32]) -> Result<EncodedContext, ModelError> {
        self.check_input(input)?;
        let (memory, _) = self.encoder_forward(input);
        let cross_kv = self.cross_kv(&memory);
        Ok(EncodedContext { memory, cross_kv })
    }

    /// Next-token distribution after `prefix` (output tokens, without the
    /// start token).
    pub fn next_distribution(&self, ctx: &EncodedContext, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        if prefix.len() + 1 > self.config.max_output_tokens {
            return Err(ModelError::TooLong {
                what: "output",
                len: prefix.len() + 1,
                cap: self.config.max_output_tokens,
            });
        }
        let mut dec = vec![crate::codec::Vocabulary::BOS_ID];
        dec.extend_from_slice(prefix);
        let (logits, _) = self.decoder_forward(&dec, &ctx.cross_kv);
        let last = logp_row(&logits, logits.nrows() - 1);
        Ok(last.into_iter().map(f64::exp).collect())
    }

    /// Next-token distribution for one input and output prefix.
    pub fn forward(&self, input: &[u32], prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let ctx = self.encode(input)?;
        self.next_distribution(&ctx, prefix)
    }

    /// Teacher-forced distributions at every output position.
    pub fn output_distributions(&self, input: &[u32], output: &[u32]) -> Result<Array2<f64>, ModelError> {
        if output.is_empty() {
            return Err(ModelError::Empty("output"));
        }
        let ctx = self.encode(input)?;
        let (logits, _) = self.decoder_forward(&self.decoder_inputs(output), &ctx.cross_kv);
        Ok(log_softmax_rows(&logits).mapv(f64::exp))
    }

    /// Log-likelihood of `continuation` following `prefix`.
    pub fn sequence_log_prob(&self, ctx: &EncodedContext, prefix: &[u32], continuation: &[u32]) -> Result<f64, ModelError> {
        let mut dec = vec![crate::codec::Vocabulary::BOS_ID];
        dec.extend_from_slice(prefix);
        dec.extend_from_slice(continuation);
        dec.pop();
        if dec.len() > self.config.max_output_tokens {
            return Err(ModelError::TooLong {
                what: "output",
                len: dec.len(),
                cap: self.config.max_output_tokens,
            });
        }
        let (logits, _) = self.decoder_forward(&dec, &ctx.cross_kv);
        let logp = log_softmax_rows(&logits);
        Ok(continuation
            .iter()
            .enumerate()
            .map(|(i, &t)| logp[[prefix.len() + i, t as usize]])
            .sum())
    }
}

fn logp_row(logits: &Array2<f64>, row: usize) -> Vec<f64> {
    let r = logits.row(row);
    let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    r.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            model_width: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_heads: 2,
            feedforward_width: 24,
            max_input_tokens: 64,
            max_output_tokens: 32,
            init_seed: 5,
        }
    }

    fn pair() -> EncodedPair {
        EncodedPair {
            input: vec![5, 9, 12, 3, 7, 7, 20],
            output: vec![6, 14, 3, 8, 15, 3, 11, 13, 3],
            goal_action_len: 6,
        }
    }

    #[test]
    fn distribution_is_normalized_and_deterministic() {
        let m = Seq2Seq::new(tiny_config(30)).unwrap();
        let d = m.forward(&[4, 5, 6], &[7, 8]).unwrap();
        assert!(d.iter().all(|&p| p >= 0.0));
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(d, m.forward(&[4, 5, 6], &[7, 8]).unwrap());
    }

    #[test]
    fn fresh_model_is_near_uniform() {
        let cfg = ModelConfig {
            vocab_size: 300,
            init_seed: 1,
            ..ModelConfig::default()
        };
        let m = Seq2Seq::new(cfg).unwrap();
        let d = m.forward(&[10, 11, 12, 13, 14], &[15]).unwrap();
        let entropy: f64 = -d.iter().map(|p| p * p.ln()).sum::<f64>();
        let uniform = (300f64).ln();
        assert!((uniform - entropy) / uniform < 0.15, "entropy {entropy} vs {uniform}");
    }

    #[test]
    fn loss_recombines_span_losses() {
        let m = Seq2Seq::new(tiny_config(30)).unwrap();
        let p = pair();
        let l0 = m.loss(&p, 0.0).unwrap();
        let l1 = l0.goal_action;
        let l2 = l0.observation.unwrap();
        assert_eq!(l0.total, l1);
        for lambda in [0.0, 0.5, 1.0] {
            let l = m.loss(&p, lambda).unwrap();
            assert!((l.total - (l1 + lambda * l2) / (1.0 + lambda)).abs() < 1e-9);
        }
    }

    #[test]
    fn combine_examples() {
        assert!((combine_losses(3.0, Some(1.5), 0.5) - 2.5).abs() < 1e-12);
        assert_eq!(combine_losses(3.0, Some(100.0), 0.0), 3.0);
        assert_eq!(combine_losses(0.0, Some(0.0), 0.5), 0.0);
        assert_eq!(combine_losses(2.0, None, 0.5), 2.0);
    }

    #[test]
    fn empty_goal_action_span_rejected() {
        let m = Seq2Seq::new(tiny_config(30)).unwrap();
        let mut p = pair();
        p.goal_action_len = 0;
        assert_eq!(m.loss(&p, 0.5), Err(ModelError::Empty("goal/action span")));
    }

    #[test]
    fn length_overflow_rejected() {
        let m = Seq2Seq::new(tiny_config(30)).unwrap();
        let long = vec![4u32; 65];
        assert!(matches!(m.forward(&long, &[]), Err(ModelError::TooLong { .. })));
        let prefix = vec![4u32; 32];
        assert!(matches!(m.forward(&[4], &prefix), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn teacher_forcing_is_causal() {
        let m = Seq2Seq::new(tiny_config(30)).unwrap();
        let p = pair();
        let a = m.output_distributions(&p.input, &p.output).unwrap();
        let mut changed = p.output.clone();
        for t in changed.iter_mut().skip(4) {
            *t = 29;
        }
        let b = m.output_distributions(&p.input, &changed).unwrap();
        // position k sees outputs < k, so rows 0..=4 are unaffected
        for k in 0..=4 {
            assert_eq!(a.row(k), b.row(k), "row {k}");
        }
        assert_ne!(a.row(6), b.row(6));
    }

    #[test]
    fn incremental_matches_teacher_forced() {
        let m = Seq2Seq::new(tiny_config(30)).unwrap();
        let p = pair();
        let all = m.output_distributions(&p.input, &p.output).unwrap();
        let ctx = m.encode(&p.input).unwrap();
        for k in 0..p.output.len() {
            let d = m.next_distribution(&ctx, &p.output[..k]).unwrap();
            for (x, y) in d.iter().zip(all.row(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let lp = m.sequence_log_prob(&ctx, &p.output[..2], &p.output[2..5]).unwrap();
        let direct: f64 = (2..5).map(|k| all[[k, p.output[k] as usize]].ln()).sum();
        assert!((lp - direct).abs() < 1e-9);
    }

    #[test]
    fn width_must_divide_heads() {
        let mut cfg = tiny_config(30);
        cfg.attention_heads = 3;
        assert!(Seq2Seq::new(cfg).is_err());
    }
}
