//! Acoustic encoder, textual encoder with local-to-global extractors, and
//! decoder, wired into speech translation (ST), CTC recognition (ASR), and
//! text translation (MT) forward paths.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{noise_inject, SyntheticBatch, Vocab};
use crate::error::{Error, Result};
use crate::shrink::{shrink_sequence, LbmParams, ShrinkOutput};
use crate::tensor::{
    GroupKey, Graph, NodeId, ParamId, ParamKind, ParamStore, ParamStoreBuilder, Partition, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub a_enc_layers: usize,
    pub t_enc_layers: usize,
    pub dec_layers: usize,
    /// Extractor kernel of layer 0.
    pub l2g_base_kernel: usize,
    /// Kernel growth per layer.
    pub l2g_stride: usize,
    pub dropout: f64,
    /// Real tokens in the shared source/target id space.
    pub vocab_size: usize,
    pub frame_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            ffn_dim: 64,
            a_enc_layers: 2,
            t_enc_layers: 2,
            dec_layers: 2,
            l2g_base_kernel: 5,
            l2g_stride: 3,
            dropout: 0.1,
            vocab_size: 20,
            frame_dim: 16,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn kernel_size(&self, layer: usize) -> usize {
        self.l2g_base_kernel + self.l2g_stride * layer
    }

    /// `max_len` is the longest sequence the textual encoder is expected to see.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.frame_dim == 0 {
            return bad("ffn_dim, vocab_size and frame_dim must be positive".into());
        }
        if self.a_enc_layers == 0 || self.t_enc_layers == 0 || self.dec_layers == 0 {
            return bad("every partition needs at least one layer".into());
        }
        if self.l2g_base_kernel % 2 == 0 {
            return bad(format!("l2g_base_kernel {} must be odd", self.l2g_base_kernel));
        }
        let widest = self.kernel_size(self.t_enc_layers - 1);
        if widest >= max_len {
            return bad(format!("widest extractor kernel {widest} not below max sequence length {max_len}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// `x + Pointwise(Depthwise(Norm(x)))`.
#[derive(Debug, Clone)]
pub struct L2gParams {
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    /// `[d, k]`.
    pub depthwise: ParamId,
    pub pointwise_w: ParamId,
    pub pointwise_b: ParamId,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: AttnParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct TextLayer {
    pub attn: AttnParams,
    pub ffn: FfnParams,
    pub l2g: L2gParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: AttnParams,
    pub ffn: FfnParams,
    pub cross_attn: AttnParams,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub a_in_w: ParamId,
    pub a_in_b: ParamId,
    pub a_norm_g: ParamId,
    pub a_norm_b: ParamId,
    pub ctc_w: ParamId,
    pub ctc_b: ParamId,
    pub a_layers: Vec<EncoderLayer>,
    pub src_embed: ParamId,
    pub lbm: LbmParams,
    pub t_norm_g: ParamId,
    pub t_norm_b: ParamId,
    pub t_layers: Vec<TextLayer>,
    pub tgt_embed: ParamId,
    pub d_norm_g: ParamId,
    pub d_norm_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub d_layers: Vec<DecoderLayer>,
}

struct Init {
    b: ParamStoreBuilder,
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, name: &str, shape: &[usize], a: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-a..a));
        self.b.add(name, t)
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], a)
    }

    fn fill(&mut self, name: &str, n: usize, v: f64) -> ParamId {
        self.b.add(name, Tensor::from_fn(&[n], |_| v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let w = self.dense(&format!("{name}.w"), fan_in, fan_out);
        let b = self.fill(&format!("{name}.b"), fan_out, 0.0);
        (w, b)
    }

    fn norm(&mut self, name: &str, d: usize) -> (ParamId, ParamId) {
        let g = self.fill(&format!("{name}.g"), d, 1.0);
        let b = self.fill(&format!("{name}.b"), d, 0.0);
        (g, b)
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnParams {
        let (norm_g, norm_b) = self.norm(&format!("{name}.norm"), d);
        let (wq, bq) = self.linear(&format!("{name}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{name}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{name}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{name}.o"), d, d);
        AttnParams {
            norm_g,
            norm_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> FfnParams {
        let (norm_g, norm_b) = self.norm(&format!("{name}.norm"), d);
        let (w1, b1) = self.linear(&format!("{name}.fc1"), d, hidden);
        let (w2, b2) = self.linear(&format!("{name}.fc2"), hidden, d);
        FfnParams {
            norm_g,
            norm_b,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

impl ModelParams {
    /// Registers every parameter in canonical group order.
    pub fn init(cfg: &ModelConfig) -> Result<(ParamStore, ModelParams)> {
        let d = cfg.d_model;
        let vocab = cfg.vocab();
        let mut it = Init {
            b: ParamStoreBuilder::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let emb_a = 3f64.sqrt();

        it.b.open_group(GroupKey::global(Partition::AEnc));
        let (a_in_w, a_in_b) = it.linear("a_enc.input", cfg.frame_dim, d);
        let (a_norm_g, a_norm_b) = it.norm("a_enc.final_norm", d);
        let (ctc_w, ctc_b) = it.linear("a_enc.ctc", d, vocab.ctc_classes());
        let mut a_layers = Vec::new();
        for i in 0..cfg.a_enc_layers {
            it.b.open_group(GroupKey::layer(Partition::AEnc, i, ParamKind::Atten));
            let attn = it.attn(&format!("a_enc.{i}.attn"), d);
            it.b.open_group(GroupKey::layer(Partition::AEnc, i, ParamKind::Ffn));
            let ffn = it.ffn(&format!("a_enc.{i}.ffn"), d, cfg.ffn_dim);
            a_layers.push(EncoderLayer { attn, ffn });
        }

        it.b.open_group(GroupKey::global(Partition::TEnc));
        let src_embed = it.uniform("t_enc.embed", &[vocab.total(), d], emb_a);
        let (r_w, r_b) = it.linear("t_enc.lbm.r", d, d);
        let (lbm_g, lbm_b) = it.norm("t_enc.lbm.norm", d);
        let (ffn_w1, ffn_b1) = it.linear("t_enc.lbm.fc1", d, cfg.ffn_dim);
        let (ffn_w2, ffn_b2) = it.linear("t_enc.lbm.fc2", cfg.ffn_dim, d);
        let lbm = LbmParams {
            r_w,
            r_b,
            norm_g: lbm_g,
            norm_b: lbm_b,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
        };
        let (t_norm_g, t_norm_b) = it.norm("t_enc.final_norm", d);
        let mut t_layers = Vec::new();
        for i in 0..cfg.t_enc_layers {
            it.b.open_group(GroupKey::layer(Partition::TEnc, i, ParamKind::Atten));
            let attn = it.attn(&format!("t_enc.{i}.attn"), d);
            it.b.open_group(GroupKey::layer(Partition::TEnc, i, ParamKind::Ffn));
            let ffn = it.ffn(&format!("t_enc.{i}.ffn"), d, cfg.ffn_dim);
            it.b.open_group(GroupKey::layer(Partition::TEnc, i, ParamKind::Other));
            let kernel = cfg.kernel_size(i);
            let (norm_g, norm_b) = it.norm(&format!("t_enc.{i}.l2g.norm"), d);
            let depthwise = it.uniform(&format!("t_enc.{i}.l2g.depthwise"), &[d, kernel], 1.0 / (kernel as f64).sqrt());
            let (pointwise_w, pointwise_b) = it.linear(&format!("t_enc.{i}.l2g.pointwise"), d, d);
            t_layers.push(TextLayer {
                attn,
                ffn,
                l2g: L2gParams {
                    norm_g,
                    norm_b,
                    depthwise,
                    pointwise_w,
                    pointwise_b,
                    kernel,
                },
            });
        }

        it.b.open_group(GroupKey::global(Partition::Decoder));
        let tgt_embed = it.uniform("dec.embed", &[vocab.total(), d], emb_a);
        let (d_norm_g, d_norm_b) = it.norm("dec.final_norm", d);
        let (out_w, out_b) = it.linear("dec.output", d, vocab.total());
        let mut d_layers = Vec::new();
        for i in 0..cfg.dec_layers {
            it.b.open_group(GroupKey::layer(Partition::Decoder, i, ParamKind::Atten));
            let self_attn = it.attn(&format!("dec.{i}.self_attn"), d);
            it.b.open_group(GroupKey::layer(Partition::Decoder, i, ParamKind::Ffn));
            let ffn = it.ffn(&format!("dec.{i}.ffn"), d, cfg.ffn_dim);
            it.b.open_group(GroupKey::layer(Partition::Decoder, i, ParamKind::Other));
            let cross_attn = it.attn(&format!("dec.{i}.cross_attn"), d);
            d_layers.push(DecoderLayer {
                self_attn,
                ffn,
                cross_attn,
            });
        }

        let store = it.b.build()?;
        Ok((
            store,
            ModelParams {
                a_in_w,
                a_in_b,
                a_norm_g,
                a_norm_b,
                ctc_w,
                ctc_b,
                a_layers,
                src_embed,
                lbm,
                t_norm_g,
                t_norm_b,
                t_layers,
                tgt_embed,
                d_norm_g,
                d_norm_b,
                out_w,
                out_b,
                d_layers,
            },
        ))
    }
}

/// Dropout and text-noise randomness for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub dropout: f64,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn train(dropout: f64, seed: u64) -> Self {
        ForwardCtx {
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// No dropout; text noise stays reproducible from `seed`.
    pub fn eval(seed: u64) -> Self {
        Self::train(0.0, seed)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn drop(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.dropout(x, self.dropout, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ST")]
    St,
    #[serde(rename = "ASR")]
    Asr,
    #[serde(rename = "MT")]
    Mt,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::St, Task::Asr, Task::Mt];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::St => "ST",
            Task::Asr => "ASR",
            Task::Mt => "MT",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "ST" | "st" => Ok(Task::St),
            "ASR" | "asr" => Ok(Task::Asr),
            "MT" | "mt" => Ok(Task::Mt),
            _ => Err(Error::invalid(format!("unknown task {s:?}"))),
        }
    }
}

/// How the recognition task is supervised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AsrVariant {
    /// CTC on the acoustic encoder only.
    #[default]
    Ctc,
    /// Cross-entropy on source tokens through the textual encoder and decoder.
    Ce,
    CtcCe,
}

impl AsrVariant {
    pub fn uses_ctc(self) -> bool {
        matches!(self, AsrVariant::Ctc | AsrVariant::CtcCe)
    }

    pub fn uses_ce(self) -> bool {
        matches!(self, AsrVariant::Ce | AsrVariant::CtcCe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub shrink: bool,
    pub lbm: bool,
    pub l2g: bool,
    /// Noise probability for the MT source.
    pub text_noise: f64,
    pub asr_variant: AsrVariant,
    /// Also embed the clean source for contrastive alignment.
    pub clean_text: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            shrink: true,
            lbm: true,
            l2g: true,
            text_noise: 0.2,
            asr_variant: AsrVariant::Ctc,
            clean_text: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskSet {
    pub st: bool,
    pub asr: bool,
    pub mt: bool,
}

impl TaskSet {
    pub fn only(task: Task) -> Self {
        let mut s = TaskSet::default();
        s.insert(task);
        s
    }

    pub fn all() -> Self {
        TaskSet {
            st: true,
            asr: true,
            mt: true,
        }
    }

    pub fn insert(&mut self, task: Task) {
        match task {
            Task::St => self.st = true,
            Task::Asr => self.asr = true,
            Task::Mt => self.mt = true,
        }
    }

    pub fn contains(&self, task: Task) -> bool {
        match task {
            Task::St => self.st,
            Task::Asr => self.asr,
            Task::Mt => self.mt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TEncMode {
    Speech,
    Text,
}

#[derive(Debug, Clone)]
pub struct TEncOutput {
    pub mode: TEncMode,
    /// Input after positional encoding is added.
    pub input: NodeId,
    pub repr: NodeId,
    pub lens: Vec<usize>,
    pub extractor_outs: Vec<NodeId>,
    /// Residual stream right after each self-attention sublayer.
    pub attention_outs: Vec<NodeId>,
    /// `[B·H, L, L]` per layer.
    pub attn_weights: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[B, L_y, V_total]`.
    pub logits: NodeId,
    pub self_weights: Vec<NodeId>,
    pub cross_weights: Vec<NodeId>,
}

/// Teacher-forced decoder inputs: `[BOS, y…]` in, `[y…, EOS]` out, PAD-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForcing {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl TeacherForcing {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a [usize]>, vocab: &Vocab) -> Self {
        let seqs: Vec<&[usize]> = seqs.into_iter().collect();
        let len = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut inputs = Vec::with_capacity(seqs.len() * len);
        let mut targets = Vec::with_capacity(seqs.len() * len);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            inputs.push(vocab.bos());
            inputs.extend_from_slice(s);
            targets.extend_from_slice(s);
            targets.push(vocab.eos());
            for _ in s.len() + 1..len {
                inputs.push(vocab.pad());
                targets.push(vocab.pad());
            }
            lens.push(s.len() + 1);
        }
        TeacherForcing {
            inputs,
            targets,
            len,
            lens,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StOutputs {
    pub logits: NodeId,
    pub teacher: TeacherForcing,
}

#[derive(Debug, Clone)]
pub struct AsrOutputs {
    /// CTC log-probabilities `[B, T, V+1]` when the variant uses CTC.
    pub ctc_log_probs: Option<NodeId>,
    pub ctc_lens: Vec<usize>,
    pub ctc_targets: Vec<Vec<usize>>,
    /// Decoder logits over source tokens when the variant uses CE.
    pub ce: Option<StOutputs>,
}

#[derive(Debug, Clone)]
pub struct MtOutputs {
    pub logits: NodeId,
    pub teacher: TeacherForcing,
    pub t_enc: TEncOutput,
    pub noisy_src: Vec<Vec<usize>>,
}

/// Everything the losses and analyses read from one pass.
#[derive(Debug, Clone, Default)]
pub struct TaskOutputs {
    pub acoustic: Option<NodeId>,
    pub ctc_log_probs: Option<NodeId>,
    pub shrink: Option<ShrinkOutput>,
    /// Textual encoder run over the acoustic stream.
    pub speech_enc: Option<TEncOutput>,
    pub st: Option<StOutputs>,
    pub asr: Option<AsrOutputs>,
    pub mt: Option<MtOutputs>,
    /// Embeddings of the un-noised source `[B, L_x, d]`.
    pub clean_text: Option<NodeId>,
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// `[B·H, Lq, Lk]` admissibility: keys beyond each length are masked, and
/// with `causal` so are keys after the query.
pub fn attention_mask(lens: &[usize], heads: usize, lq: usize, lk: usize, causal: bool) -> Vec<bool> {
    let mut m = Vec::with_capacity(lens.len() * heads * lq * lk);
    for &len in lens {
        for _ in 0..heads {
            for q in 0..lq {
                for k in 0..lk {
                    m.push(k < len && (!causal || k <= q));
                }
            }
        }
    }
    m
}

fn check_lens(op: &'static str, lens: &[usize], bsz: usize, max: usize) -> Result<()> {
    if lens.len() != bsz || lens.iter().any(|&l| l == 0 || l > max) {
        return Err(Error::shape(op, format!("lengths {lens:?} for batch {bsz} of width {max}")));
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Counters([AtomicU64; 3]);

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    params: ModelParams,
    calls: Counters,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (store, params) = ModelParams::init(&config)?;
        Ok(Model {
            config,
            store,
            params,
            calls: Counters::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Number of forwards executed for `task` since construction.
    pub fn forward_count(&self, task: Task) -> u64 {
        self.calls.0[task as usize].load(Ordering::Relaxed)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId> {
        let w = g.param(w);
        let b = g.param(b);
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph, x: NodeId, gamma: ParamId, beta: ParamId) -> Result<NodeId> {
        let gamma = g.param(gamma);
        let beta = g.param(beta);
        g.layer_norm(x, Some(gamma), Some(beta))
    }

    fn add_positions(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let table = positional_encoding(s[1], s[2]);
        let pe = Tensor::from_fn(&s, |i| table[i % (s[1] * s[2])]);
        let pe = g.constant(pe);
        g.add(x, pe)
    }

    fn split_heads(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let h = self.config.n_heads;
        let x = g.reshape(x, &[s[0], s[1], h, s[2] / h])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0] * h, s[1], s[2] / h])
    }

    fn merge_heads(&self, g: &mut Graph, x: NodeId, bsz: usize) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let h = self.config.n_heads;
        let x = g.reshape(x, &[bsz, h, s[1], s[2]])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[bsz, s[1], h * s[2]])
    }

    /// Multi-head attention from normalized queries to (already normalized)
    /// keys/values. Returns the projected output and the weights.
    fn mha(&self, g: &mut Graph, p: &AttnParams, q_in: NodeId, kv_in: NodeId, mask: &[bool]) -> Result<(NodeId, NodeId)> {
        let bsz = g.shape(q_in)[0];
        let q = self.linear(g, q_in, p.wq, p.bq)?;
        let k = self.linear(g, kv_in, p.wk, p.bk)?;
        let v = self.linear(g, kv_in, p.wv, p.bv)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let (o, w) = g.attention(q, k, v, Some(mask))?;
        let o = self.merge_heads(g, o, bsz)?;
        Ok((self.linear(g, o, p.wo, p.bo)?, w))
    }

    fn self_attn_block(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        p: &AttnParams,
        x: NodeId,
        mask: &[bool],
    ) -> Result<(NodeId, NodeId)> {
        let h = self.norm(g, x, p.norm_g, p.norm_b)?;
        let (a, w) = self.mha(g, p, h, h, mask)?;
        let a = ctx.drop(g, a)?;
        Ok((g.add(x, a)?, w))
    }

    fn cross_attn_block(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        p: &AttnParams,
        x: NodeId,
        memory: NodeId,
        mask: &[bool],
    ) -> Result<(NodeId, NodeId)> {
        let h = self.norm(g, x, p.norm_g, p.norm_b)?;
        let (a, w) = self.mha(g, p, h, memory, mask)?;
        let a = ctx.drop(g, a)?;
        Ok((g.add(x, a)?, w))
    }

    fn ffn_block(&self, g: &mut Graph, ctx: &mut ForwardCtx, p: &FfnParams, x: NodeId) -> Result<NodeId> {
        let h = self.norm(g, x, p.norm_g, p.norm_b)?;
        let h = self.linear(g, h, p.w1, p.b1)?;
        let h = g.gelu(h);
        let h = self.linear(g, h, p.w2, p.b2)?;
        let h = ctx.drop(g, h)?;
        g.add(x, h)
    }

    /// Pre-norm transformer over `speech[B, T, frame_dim]`; returns `[B, T, d]`.
    pub fn a_enc_forward(&self, g: &mut Graph, ctx: &mut ForwardCtx, speech: NodeId, lens: &[usize]) -> Result<NodeId> {
        let s = g.shape(speech).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] != self.config.frame_dim {
            return Err(Error::shape("a_enc_forward", format!("speech {s:?}")));
        }
        check_lens("a_enc_forward", lens, s[0], s[1])?;
        let p = &self.params;
        let x = self.linear(g, speech, p.a_in_w, p.a_in_b)?;
        let mut x = self.add_positions(g, x)?;
        let mask = attention_mask(lens, self.config.n_heads, s[1], s[1], false);
        for layer in &p.a_layers {
            x = self.self_attn_block(g, ctx, &layer.attn, x, &mask)?.0;
            x = self.ffn_block(g, ctx, &layer.ffn, x)?;
        }
        self.norm(g, x, p.a_norm_g, p.a_norm_b)
    }

    /// CTC log-probabilities `[B, T, V+1]` from acoustic features.
    pub fn ctc_head(&self, g: &mut Graph, features: NodeId) -> Result<NodeId> {
        let logits = self.linear(g, features, self.params.ctc_w, self.params.ctc_b)?;
        g.log_softmax(logits)
    }

    /// `x + Pointwise(Depthwise(Norm(x)))` with the layer's kernel.
    pub fn l2g_extractor(&self, g: &mut Graph, x: NodeId, lens: &[usize], layer: usize) -> Result<NodeId> {
        let p = &self.params.t_layers[layer].l2g;
        let h = self.norm(g, x, p.norm_g, p.norm_b)?;
        let k = g.param(p.depthwise);
        let h = g.depthwise_conv1d(h, k, lens)?;
        let h = self.linear(g, h, p.pointwise_w, p.pointwise_b)?;
        g.add(x, h)
    }

    /// Textual encoder, shared between the speech and text streams.
    pub fn t_enc_forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        features: NodeId,
        lens: &[usize],
        mode: TEncMode,
        l2g: bool,
    ) -> Result<TEncOutput> {
        let s = g.shape(features).to_vec();
        if s.len() != 3 || s[2] != self.config.d_model || s[1] == 0 {
            return Err(Error::shape("t_enc_forward", format!("{mode:?} features {s:?}")));
        }
        check_lens("t_enc_forward", lens, s[0], s[1])?;
        let input = self.add_positions(g, features)?;
        let mask = attention_mask(lens, self.config.n_heads, s[1], s[1], false);
        let mut out = TEncOutput {
            mode,
            input,
            repr: input,
            lens: lens.to_vec(),
            extractor_outs: Vec::new(),
            attention_outs: Vec::new(),
            attn_weights: Vec::new(),
        };
        let mut x = input;
        for (i, layer) in self.params.t_layers.iter().enumerate() {
            if l2g {
                x = self.l2g_extractor(g, x, lens, i)?;
                out.extractor_outs.push(x);
            }
            let (a, w) = self.self_attn_block(g, ctx, &layer.attn, x, &mask)?;
            out.attention_outs.push(a);
            out.attn_weights.push(w);
            x = self.ffn_block(g, ctx, &layer.ffn, a)?;
        }
        out.repr = self.norm(g, x, self.params.t_norm_g, self.params.t_norm_b)?;
        Ok(out)
    }

    /// Teacher-forced logits for `prefix` (flattened `[B, len]`) over `memory`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        prefix: &[usize],
        len: usize,
        memory: NodeId,
        mem_lens: &[usize],
    ) -> Result<DecoderOutput> {
        let ms = g.shape(memory).to_vec();
        let bsz = ms[0];
        if len == 0 || prefix.len() != bsz * len {
            return Err(Error::shape("decoder_forward", format!("prefix of {} for batch {bsz} × {len}", prefix.len())));
        }
        check_lens("decoder_forward", mem_lens, bsz, ms[1])?;
        let p = &self.params;
        let table = g.param(p.tgt_embed);
        let x = g.embedding(table, prefix, &[bsz, len])?;
        let mut x = self.add_positions(g, x)?;
        let h = self.config.n_heads;
        // Padded decoder positions only feed padded outputs, which the loss
        // ignores, so causality alone suffices for self-attention.
        let self_mask = attention_mask(&vec![len; bsz], h, len, len, true);
        let cross_mask = attention_mask(mem_lens, h, len, ms[1], false);
        let mut out = DecoderOutput {
            logits: x,
            self_weights: Vec::new(),
            cross_weights: Vec::new(),
        };
        for layer in &p.d_layers {
            let (a, w) = self.self_attn_block(g, ctx, &layer.self_attn, x, &self_mask)?;
            out.self_weights.push(w);
            let (c, w) = self.cross_attn_block(g, ctx, &layer.cross_attn, a, memory, &cross_mask)?;
            out.cross_weights.push(w);
            x = self.ffn_block(g, ctx, &layer.ffn, c)?;
        }
        let x = self.norm(g, x, p.d_norm_g, p.d_norm_b)?;
        out.logits = self.linear(g, x, p.out_w, p.out_b)?;
        Ok(out)
    }

    fn embed_tokens(&self, g: &mut Graph, seqs: &[&[usize]]) -> Result<(NodeId, Vec<usize>)> {
        let vocab = self.vocab();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("cannot embed an empty token sequence"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat(vocab.pad()).take(len - s.len()));
        }
        let table = g.param(self.params.src_embed);
        let x = g.embedding(table, &ids, &[seqs.len(), len])?;
        Ok((x, seqs.iter().map(|s| s.len()).collect()))
    }

    /// Runs the requested tasks on one batch, sharing the acoustic encoder
    /// and the speech-side textual encoder between ST and ASR.
    pub fn forward_tasks(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        batch: &SyntheticBatch,
        tasks: TaskSet,
        opts: &ForwardOptions,
    ) -> Result<TaskOutputs> {
        if batch.frame_dim != self.config.frame_dim {
            return Err(Error::shape(
                "forward_tasks",
                format!("batch frame_dim {} vs model {}", batch.frame_dim, self.config.frame_dim),
            ));
        }
        let vocab = self.vocab();
        let bsz = batch.batch_size;
        let mut out = TaskOutputs::default();
        let asr_ce = tasks.asr && opts.asr_variant.uses_ce();
        if tasks.st || tasks.asr {
            let speech = g.constant(Tensor::new(
                vec![bsz, batch.max_frames, batch.frame_dim],
                batch.speech.clone(),
            )?);
            let feats = self.a_enc_forward(g, ctx, speech, &batch.speech_lens)?;
            let lp = self.ctc_head(g, feats)?;
            out.acoustic = Some(feats);
            out.ctc_log_probs = Some(lp);
        }
        if tasks.st || asr_ce {
            let feats = out.acoustic.expect("acoustic features");
            let (enc_in, enc_lens) = if opts.shrink {
                let lbm = opts.lbm.then_some(&self.params.lbm);
                let lp = out.ctc_log_probs.expect("ctc head");
                let sh = shrink_sequence(g, feats, lp, &batch.speech_lens, lbm)?;
                let r = (sh.features, sh.lens.clone());
                out.shrink = Some(sh);
                r
            } else {
                (feats, batch.speech_lens.clone())
            };
            out.speech_enc = Some(self.t_enc_forward(g, ctx, enc_in, &enc_lens, TEncMode::Speech, opts.l2g)?);
        }
        if tasks.st {
            self.calls.0[Task::St as usize].fetch_add(1, Ordering::Relaxed);
            let enc = out.speech_enc.as_ref().expect("speech encoder");
            let tf = TeacherForcing::new((0..bsz).map(|b| batch.tgt(b)), &vocab);
            let dec = self.decoder_forward(g, ctx, &tf.inputs, tf.len, enc.repr, &enc.lens)?;
            out.st = Some(StOutputs {
                logits: dec.logits,
                teacher: tf,
            });
        }
        if tasks.asr {
            self.calls.0[Task::Asr as usize].fetch_add(1, Ordering::Relaxed);
            let ce = if asr_ce {
                let enc = out.speech_enc.as_ref().expect("speech encoder");
                let tf = TeacherForcing::new((0..bsz).map(|b| batch.src(b)), &vocab);
                let dec = self.decoder_forward(g, ctx, &tf.inputs, tf.len, enc.repr, &enc.lens)?;
                Some(StOutputs {
                    logits: dec.logits,
                    teacher: tf,
                })
            } else {
                None
            };
            out.asr = Some(AsrOutputs {
                ctc_log_probs: opts.asr_variant.uses_ctc().then(|| out.ctc_log_probs.expect("ctc head")),
                ctc_lens: batch.speech_lens.clone(),
                ctc_targets: (0..bsz).map(|b| batch.src(b).to_vec()).collect(),
                ce,
            });
        }
        if tasks.mt {
            self.calls.0[Task::Mt as usize].fetch_add(1, Ordering::Relaxed);
            let noisy: Vec<Vec<usize>> = (0..bsz)
                .map(|b| noise_inject(batch.src(b), opts.text_noise, ctx.rng()))
                .collect();
            let refs: Vec<&[usize]> = noisy.iter().map(Vec::as_slice).collect();
            let (emb, lens) = self.embed_tokens(g, &refs)?;
            let enc = self.t_enc_forward(g, ctx, emb, &lens, TEncMode::Text, opts.l2g)?;
            let tf = TeacherForcing::new((0..bsz).map(|b| batch.tgt(b)), &vocab);
            let dec = self.decoder_forward(g, ctx, &tf.inputs, tf.len, enc.repr, &enc.lens)?;
            out.mt = Some(MtOutputs {
                logits: dec.logits,
                teacher: tf,
                t_enc: enc,
                noisy_src: noisy,
            });
        }
        if opts.clean_text {
            let refs: Vec<&[usize]> = (0..bsz).map(|b| batch.src(b)).collect();
            out.clean_text = Some(self.embed_tokens(g, &refs)?.0);
        }
        Ok(out)
    }

    /// Single-task convenience wrapper.
    pub fn forward_task(
        &self,
        g: &mut Graph,
        ctx: &mut ForwardCtx,
        batch: &SyntheticBatch,
        task: Task,
        opts: &ForwardOptions,
    ) -> Result<TaskOutputs> {
        self.forward_tasks(g, ctx, batch, TaskSet::only(task), opts)
    }

    /// Greedy speech translation, stopping at EOS or `max_len` tokens.
    pub fn greedy_decode(&self, batch: &SyntheticBatch, opts: &ForwardOptions, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let vocab = self.vocab();
        let mut g = Graph::new(&self.store);
        let mut ctx = ForwardCtx::eval(0);
        let bsz = batch.batch_size;
        let speech = g.constant(Tensor::new(
            vec![bsz, batch.max_frames, batch.frame_dim],
            batch.speech.clone(),
        )?);
        let feats = self.a_enc_forward(&mut g, &mut ctx, speech, &batch.speech_lens)?;
        let (enc_in, enc_lens) = if opts.shrink {
            let lp = self.ctc_head(&mut g, feats)?;
            let lbm = opts.lbm.then_some(&self.params.lbm);
            let sh = shrink_sequence(&mut g, feats, lp, &batch.speech_lens, lbm)?;
            (sh.features, sh.lens)
        } else {
            (feats, batch.speech_lens.clone())
        };
        let enc = self.t_enc_forward(&mut g, &mut ctx, enc_in, &enc_lens, TEncMode::Speech, opts.l2g)?;
        let mut hyps: Vec<Vec<usize>> = vec![Vec::new(); bsz];
        let mut done = vec![false; bsz];
        for step in 0..max_len {
            let len = step + 1;
            let mut prefix = Vec::with_capacity(bsz * len);
            for h in &hyps {
                prefix.push(vocab.bos());
                prefix.extend_from_slice(h);
                prefix.extend(std::iter::repeat(vocab.pad()).take(len - 1 - h.len()));
            }
            let dec = self.decoder_forward(&mut g, &mut ctx, &prefix, len, enc.repr, &enc.lens)?;
            let v = vocab.total();
            let logits = g.value(dec.logits);
            for b in 0..bsz {
                if done[b] {
                    continue;
                }
                let row = &logits[(b * len + step) * v..(b * len + step + 1) * v];
                let mut best = 0;
                for k in 1..v {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                if best == vocab.eos() {
                    done[b] = true;
                } else {
                    hyps[b].push(best);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(hyps)
    }
}
