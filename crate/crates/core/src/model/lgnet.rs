use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{LgBlockConfig, LgNetConfig};
use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::frontend::MfccMatrix;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the model a trainable tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Speech embedding extractor blocks.
    Extractor,
    /// Embedding FC and classifier FC.
    Head,
    /// Text-anchor projection, used only while training with text anchors.
    TextProjection,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Extractor => 0,
            ParamGroup::Head => 1,
            ParamGroup::TextProjection => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Extractor),
            1 => Some(ParamGroup::Head),
            2 => Some(ParamGroup::TextProjection),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<S>,
}

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Forward-pass behaviour of batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
struct BnIdx {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct AttnIdx {
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
}

#[derive(Debug, Clone)]
struct BlockIdx {
    conv: LinearIdx,
    bn1: BnIdx,
    attn: Option<AttnIdx>,
    bn2: Option<BnIdx>,
    shortcut: Option<(LinearIdx, BnIdx)>,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<BlockIdx>,
    embed: LinearIdx,
    classifier: LinearIdx,
    text: Option<LinearIdx>,
}

/// Tape handles for every parameter, indexed like [`LgNet::params`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps caller-created tape handles, one per parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }
}

/// Batch statistics from a train-mode pass, waiting to be folded into the
/// running averages by [`LgNet::commit_stats`].
#[derive(Debug, Clone)]
pub struct PendingStats<S> {
    mean_buf: usize,
    var_buf: usize,
    stats: BatchStats<S>,
}

/// Sinusoidal position table `[T, C]`: column `j` uses frequency index
/// `i = j / 2`, sine on even columns and cosine on odd ones, with angle
/// `t / 10000^(2i / C)`.
pub fn positional_encoding<S: Scalar>(frames: usize, channels: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(frames * channels);
    for t in 0..frames {
        for j in 0..channels {
            let i = (j / 2) as f64;
            let angle = t as f64 / libm::pow(10_000.0, 2.0 * i / channels as f64);
            data.push(S::of(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) }));
        }
    }
    Tensor::from_vec(&[frames, channels], data)
}

/// Projection weights of one attention layer, already on the tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Single-layer self-attention over `[B, T, C]`:
/// `Wo · softmax(Q Kᵀ / √d) V + bo` with `Q, K, V` affine projections of `x`.
pub fn self_attention<S: Scalar>(tape: &mut Tape<S>, x: Var, w: &AttentionVars, heads: usize) -> Result<Var> {
    let q = tape.linear(x, w.wq, Some(w.bq))?;
    let k = tape.linear(x, w.wk, Some(w.bk))?;
    let v = tape.linear(x, w.wv, Some(w.bv))?;
    let a = tape.attention(q, k, v, heads)?;
    tape.linear(a, w.wo, Some(w.bo))
}

struct Builder<'r, S, R> {
    params: Vec<Param<S>>,
    buffers: Vec<Buffer<S>>,
    rng: &'r mut R,
}

impl<S: Scalar, R: Rng> Builder<'_, S, R> {
    fn uniform(&mut self, name: String, group: ParamGroup, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / libm::sqrt(fan_in as f64);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.rng.gen_range(-bound..bound))).collect();
        self.params.push(Param { name, group, value: Tensor::from_vec(shape, data) });
        self.params.len() - 1
    }

    fn fill(&mut self, name: String, group: ParamGroup, shape: &[usize], v: f64) -> usize {
        self.params.push(Param { name, group, value: Tensor::full(shape, S::of(v)) });
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, n_out: usize, n_in: usize) -> LinearIdx {
        LinearIdx {
            w: self.uniform(format!("{prefix}.weight"), group, &[n_out, n_in], n_in),
            b: self.fill(format!("{prefix}.bias"), group, &[n_out], 0.0),
        }
    }

    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) -> LinearIdx {
        LinearIdx {
            w: self.uniform(format!("{prefix}.weight"), ParamGroup::Extractor, &[c_out, c_in, k], c_in * k),
            b: self.fill(format!("{prefix}.bias"), ParamGroup::Extractor, &[c_out], 0.0),
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIdx {
        let gamma = self.fill(format!("{prefix}.gamma"), ParamGroup::Extractor, &[c], 1.0);
        let beta = self.fill(format!("{prefix}.beta"), ParamGroup::Extractor, &[c], 0.0);
        self.buffers.push(Buffer { name: format!("{prefix}.running_mean"), value: Tensor::zeros(&[c]) });
        self.buffers.push(Buffer { name: format!("{prefix}.running_var"), value: Tensor::full(&[c], S::one()) });
        let n = self.buffers.len();
        BnIdx { gamma, beta, mean: n - 2, var: n - 1 }
    }

    fn block(&mut self, i: usize, b: &LgBlockConfig) -> BlockIdx {
        let p = format!("blocks.{i}");
        let conv = self.conv(&format!("{p}.conv"), b.out_channels, b.in_channels, b.kernel);
        let bn1 = self.bn(&format!("{p}.bn1"), b.out_channels);
        let attn = b.attention.then(|| {
            let c = b.out_channels;
            AttnIdx {
                q: self.linear(&format!("{p}.attn.q"), ParamGroup::Extractor, c, c),
                k: self.linear(&format!("{p}.attn.k"), ParamGroup::Extractor, c, c),
                v: self.linear(&format!("{p}.attn.v"), ParamGroup::Extractor, c, c),
                o: self.linear(&format!("{p}.attn.o"), ParamGroup::Extractor, c, c),
            }
        });
        let bn2 = b.post_attention_bn.then(|| self.bn(&format!("{p}.bn2"), b.out_channels));
        let shortcut = b.has_projection_shortcut().then(|| {
            let conv = self.conv(&format!("{p}.shortcut.conv"), b.out_channels, b.in_channels, 1);
            (conv, self.bn(&format!("{p}.shortcut.bn"), b.out_channels))
        });
        BlockIdx { conv, bn1, attn, bn2, shortcut }
    }
}

/// LG-Net: a stack of LG-Blocks, time-average pooling, an embedding FC
/// (the speech embedding) and a sigmoid classifier FC. Optionally carries
/// a linear projection from text anchors into the embedding space.
#[derive(Debug, Clone)]
pub struct LgNet<S> {
    config: LgNetConfig,
    text_dim: Option<usize>,
    params: Vec<Param<S>>,
    buffers: Vec<Buffer<S>>,
    layout: Layout,
}

/// Layout is a function of the config, so it is not compared.
impl<S: PartialEq> PartialEq for LgNet<S> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.text_dim == other.text_dim
            && self.params == other.params
            && self.buffers == other.buffers
    }
}

impl<S: Scalar> LgNet<S> {
    /// Fresh model. Conv and linear weights are uniform in `±1/√fan_in`,
    /// biases zero, batch-norm scale one and shift zero; running statistics
    /// start at mean 0, variance 1.
    pub fn new(config: LgNetConfig, text_dim: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        if text_dim == Some(0) {
            return Err(Error::Config("text anchor dimension must be positive".into()));
        }
        let mut r = rng::stream(seed, "init", 0);
        let mut b = Builder { params: Vec::new(), buffers: Vec::new(), rng: &mut r };
        let blocks = config.blocks.iter().enumerate().map(|(i, blk)| b.block(i, blk)).collect();
        let embed = b.linear("embed", ParamGroup::Head, config.embedding_dim, config.last_channels());
        let classifier = b.linear("classifier", ParamGroup::Head, config.num_classes, config.embedding_dim);
        let text = text_dim.map(|d| b.linear("text_proj", ParamGroup::TextProjection, config.embedding_dim, d));
        let (params, buffers) = (b.params, b.buffers);
        Ok(Self { config, text_dim, params, buffers, layout: Layout { blocks, embed, classifier, text } })
    }

    /// Rebuilds a model from stored tensors, checking that every name and
    /// shape matches what `config` implies.
    pub fn from_parts(config: LgNetConfig, text_dim: Option<usize>, params: Vec<Param<S>>, buffers: Vec<Buffer<S>>) -> Result<Self> {
        let mut model = Self::new(config, text_dim, 0)?;
        if params.len() != model.params.len() || buffers.len() != model.buffers.len() {
            return Err(Error::Config(format!(
                "expected {} parameters and {} buffers, got {} and {}",
                model.params.len(),
                model.buffers.len(),
                params.len(),
                buffers.len()
            )));
        }
        for (want, got) in model.params.iter().zip(&params) {
            if want.name != got.name || want.group != got.group || want.value.shape() != got.value.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected `{}` {:?}, got `{}` {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        for (want, got) in model.buffers.iter().zip(&buffers) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::Config(format!("buffer mismatch: expected `{}`, got `{}`", want.name, got.name)));
            }
        }
        model.params = params;
        model.buffers = buffers;
        Ok(model)
    }

    pub fn config(&self) -> &LgNetConfig {
        &self.config
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.text_dim
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Scalar count of one parameter group.
    pub fn group_size(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    /// Drops the text projection (it has no role after metric training).
    pub fn without_text_projection(mut self) -> Self {
        self.drop_text_projection();
        self
    }

    pub fn drop_text_projection(&mut self) {
        if let Some(t) = self.layout.text.take() {
            self.params.truncate(t.w.min(t.b));
            self.text_dim = None;
        }
    }

    /// Puts every parameter on `tape`; those whose group passes `trainable`
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable(p.group))).collect();
        Bound { vars }
    }

    /// Gradient of each parameter after `tape.backward`, `None` when it was
    /// frozen or unreachable.
    pub fn gradients<'t>(&self, tape: &'t Tape<S>, bound: &Bound) -> Vec<Option<&'t [S]>> {
        bound.vars.iter().map(|&v| tape.grad(v)).collect()
    }

    /// Stacks utterances into a channels-first `[B, F, T]` tensor.
    pub fn input_tensor(&self, batch: &[&MfccMatrix<S>]) -> Result<Tensor<S>> {
        let Some(first) = batch.first() else {
            return Err(Error::Input("empty batch".into()));
        };
        let (t, f) = (first.frames, first.coeffs);
        if f != self.config.input_channels {
            return Err(Error::Config(format!("features have {f} coefficients, model expects {}", self.config.input_channels)));
        }
        let mut data = Vec::with_capacity(batch.len() * f * t);
        for m in batch {
            if m.frames != t || m.coeffs != f {
                return Err(Error::Input(format!("ragged batch: {}x{} vs {t}x{f}", m.frames, m.coeffs)));
            }
            data.extend(m.channels_first());
        }
        Ok(Tensor::from_vec(&[batch.len(), f, t], data))
    }

    fn bn(&self, tape: &mut Tape<S>, b: &Bound, x: Var, idx: BnIdx, mode: Mode, pending: &mut Vec<PendingStats<S>>) -> Result<Var> {
        let eps = S::of(self.config.bn_eps);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, b.var(idx.gamma), b.var(idx.beta), eps)?;
                pending.push(PendingStats { mean_buf: idx.mean, var_buf: idx.var, stats });
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                b.var(idx.gamma),
                b.var(idx.beta),
                self.buffers[idx.mean].value.data(),
                self.buffers[idx.var].value.data(),
                eps,
            ),
        }
    }

    fn block_forward(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        x: Var,
        cfg: &LgBlockConfig,
        idx: &BlockIdx,
        mode: Mode,
        pending: &mut Vec<PendingStats<S>>,
    ) -> Result<Var> {
        if tape.shape(x).get(1) != Some(&cfg.in_channels) {
            return Err(Error::Config(format!("block expects {} channels, got shape {:?}", cfg.in_channels, tape.shape(x))));
        }
        let h = tape.conv1d(x, b.var(idx.conv.w), Some(b.var(idx.conv.b)), cfg.stride)?;
        let h = self.bn(tape, b, h, idx.bn1, mode, pending)?;
        let mut h = tape.relu(h);
        if let Some(a) = &idx.attn {
            let seq = tape.transpose_last2(h)?;
            let (t, c) = (tape.shape(seq)[1], tape.shape(seq)[2]);
            let pe = tape.constant(positional_encoding(t, c));
            let seq = tape.add_broadcast(seq, pe)?;
            let w = AttentionVars {
                wq: b.var(a.q.w),
                bq: b.var(a.q.b),
                wk: b.var(a.k.w),
                bk: b.var(a.k.b),
                wv: b.var(a.v.w),
                bv: b.var(a.v.b),
                wo: b.var(a.o.w),
                bo: b.var(a.o.b),
            };
            let att = self_attention(tape, seq, &w, cfg.attention_heads)?;
            h = tape.transpose_last2(att)?;
        }
        if let Some(bn2) = idx.bn2 {
            h = self.bn(tape, b, h, bn2, mode, pending)?;
        }
        let skip = match &idx.shortcut {
            Some((conv, bn)) => {
                let s = tape.conv1d(x, b.var(conv.w), Some(b.var(conv.b)), cfg.stride)?;
                self.bn(tape, b, s, *bn, mode, pending)?
            }
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }

    /// Block stack followed by time-average pooling: `[B, F, T] -> [B, C]`.
    pub fn forward_pooled(&self, tape: &mut Tape<S>, b: &Bound, input: Var, mode: Mode) -> Result<(Var, Vec<PendingStats<S>>)> {
        let mut pending = Vec::new();
        let mut x = input;
        for (cfg, idx) in self.config.blocks.iter().zip(&self.layout.blocks) {
            x = self.block_forward(tape, b, x, cfg, idx, mode, &mut pending)?;
        }
        let seq = tape.transpose_last2(x)?;
        let pooled = tape.mean_time(seq)?;
        Ok((pooled, pending))
    }

    /// Embedding FC on pooled features.
    pub fn embed_pooled(&self, tape: &mut Tape<S>, b: &Bound, pooled: Var) -> Result<Var> {
        tape.linear(pooled, b.var(self.layout.embed.w), Some(b.var(self.layout.embed.b)))
    }

    /// Speech embeddings `[B, D′]` for a `[B, F, T]` input.
    pub fn forward_embed(&self, tape: &mut Tape<S>, b: &Bound, input: Var, mode: Mode) -> Result<(Var, Vec<PendingStats<S>>)> {
        let (pooled, pending) = self.forward_pooled(tape, b, input, mode)?;
        Ok((self.embed_pooled(tape, b, pooled)?, pending))
    }

    /// Classifier logits `[B, C]` from embeddings.
    pub fn logits(&self, tape: &mut Tape<S>, b: &Bound, embedding: Var) -> Result<Var> {
        tape.linear(embedding, b.var(self.layout.classifier.w), Some(b.var(self.layout.classifier.b)))
    }

    /// Per-class sigmoid scores `[B, C]` from embeddings.
    pub fn forward_classify(&self, tape: &mut Tape<S>, b: &Bound, embedding: Var) -> Result<Var> {
        let z = self.logits(tape, b, embedding)?;
        Ok(tape.sigmoid(z))
    }

    /// Maps text anchors `[N, D]` into the embedding space.
    pub fn project_text(&self, tape: &mut Tape<S>, b: &Bound, anchors: Var) -> Result<Var> {
        let Some(t) = self.layout.text else {
            return Err(Error::Config("model has no text projection".into()));
        };
        let d = self.text_dim.unwrap_or(0);
        if tape.shape(anchors).last() != Some(&d) {
            return Err(Error::Config(format!("text anchors have shape {:?}, projection expects dimension {d}", tape.shape(anchors))));
        }
        tape.linear(anchors, b.var(t.w), Some(b.var(t.b)))
    }

    /// Folds train-mode batch statistics into the running averages:
    /// `r ← (1 − m)·r + m·batch`, using the unbiased batch variance.
    pub fn commit_stats(&mut self, pending: Vec<PendingStats<S>>) {
        let m = S::of(self.config.bn_momentum);
        let keep = S::one() - m;
        for p in pending {
            let n = p.stats.count as f64;
            let unbias = S::of(n / (n - 1.0));
            for (r, &v) in self.buffers[p.mean_buf].value.data_mut().iter_mut().zip(&p.stats.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in self.buffers[p.var_buf].value.data_mut().iter_mut().zip(&p.stats.var) {
                *r = keep * *r + m * v * unbias;
            }
        }
    }

    /// Eval-mode embeddings and scores for a batch, without gradients.
    pub fn infer(&self, batch: &[&MfccMatrix<S>]) -> Result<Inference<S>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let x = tape.constant(self.input_tensor(batch)?);
        let (emb, _) = self.forward_embed(&mut tape, &b, x, Mode::Eval)?;
        let scores = self.forward_classify(&mut tape, &b, emb)?;
        Ok(Inference { embeddings: tape.value(emb).clone(), scores: tape.value(scores).clone() })
    }

    /// Eval-mode pooled extractor output `[B, C]`.
    pub fn infer_pooled(&self, batch: &[&MfccMatrix<S>]) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let x = tape.constant(self.input_tensor(batch)?);
        let (pooled, _) = self.forward_pooled(&mut tape, &b, x, Mode::Eval)?;
        Ok(tape.value(pooled).clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Casts the whole model to another precision.
    pub fn cast<T: Scalar>(&self) -> LgNet<T> {
        LgNet {
            config: self.config.clone(),
            text_dim: self.text_dim,
            params: self.params.iter().map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() }).collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.to_string(), value: b.value.cast() }).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// Output of [`LgNet::infer`].
#[derive(Debug, Clone)]
pub struct Inference<S> {
    pub embeddings: Tensor<S>,
    pub scores: Tensor<S>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<S: Scalar>(scores: &[S]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
