//! Replacement and prefetch encoders and the three ways of wiring them:
//! independent baselines, a joint encoder with a shared embedding, and a
//! two-stage contrastive variant.
//!
//! Every model registers its parameters in a caller-owned [`ParamStore`]
//! under a fixed name prefix, so a model can be rebuilt from its dimensions
//! and filled from a checkpoint.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::features::{PrefetchSample, ReplacementSample, CONTEXT_DIM};
use crate::nnkit::{
    bce_with_logit, contrastive_loss, softmax, softmax_xent, ContrastiveConfig, Dense, Embedding,
    Lstm, LstmCache, NnError, ParamStore,
};

pub const REPL_ENC: &str = "repl_enc";
pub const PF_ENC: &str = "pf_enc";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("misaligned views: replacement sample at position {repl}, prefetch sample at {pf}")]
    Alignment { repl: usize, pf: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    BaselineRepl,
    BaselinePf,
    Joint,
    Contrastive,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BaselineRepl => "baseline_repl",
            Self::BaselinePf => "baseline_pf",
            Self::Joint => "joint",
            Self::Contrastive => "contrastive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::BaselineRepl, Self::BaselinePf, Self::Joint, Self::Contrastive]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Layer sizes and vocabulary sizes shared by all architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
    pub lstm_layers: usize,
    /// Joint-encoder shared embedding width.
    pub shared: usize,
    /// Contrastive projection width.
    pub proj: usize,
    pub pc_vocab: usize,
    pub page_vocab: usize,
    pub blocks_per_page: usize,
}

impl ModelDims {
    pub fn new(pc_vocab: usize, page_vocab: usize, blocks_per_page: usize) -> Self {
        Self {
            embed: 32,
            hidden: 64,
            lstm_layers: 2,
            shared: 64,
            proj: 32,
            pc_vocab,
            page_vocab,
            blocks_per_page,
        }
    }
}

/// Weights applied to the two objectives; `pos_weight` scales the
/// cache-friendly term of the binary loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub repl: f64,
    pub pf: f64,
    pub pos_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            repl: 1.0,
            pf: 1.0,
            pos_weight: 1.0,
        }
    }
}

/// Per-sample loss components. `total` includes the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub repl: f64,
    pub page: f64,
    pub offset: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.repl += o.repl;
        self.page += o.page;
        self.offset += o.offset;
        self.total += o.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.repl *= k;
        self.page *= k;
        self.offset *= k;
        self.total *= k;
    }
}

/// Sets every parameter of a dense layer to zero.
pub fn zero_dense(store: &mut ParamStore, d: &Dense) {
    store.get_mut(d.w).value.fill(0.0);
    store.get_mut(d.b).value.fill(0.0);
}

fn tanh_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

fn tanh_back(act: &[f64], d: &[f64]) -> Vec<f64> {
    act.iter().zip(d).map(|(a, g)| g * (1.0 - a * a)).collect()
}

fn check_aligned(rs: &ReplacementSample, ps: &PrefetchSample) -> Result<(), ModelError> {
    if rs.position != ps.position {
        return Err(ModelError::Alignment {
            repl: rs.position,
            pf: ps.position,
        });
    }
    Ok(())
}

/// PC-history LSTM plus a tanh projection of the event context. The output
/// is `[h_T ; tanh(W ctx + b)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementEncoder {
    pub pc_emb: Embedding,
    pub ctx: Dense,
    pub lstm: Lstm,
}

#[derive(Debug, Clone)]
pub struct ReplEncCache {
    lstm: LstmCache,
    ctx_act: Vec<f64>,
}

impl ReplacementEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            pc_emb: Embedding::new(store, &format!("{prefix}.pc_emb"), dims.pc_vocab, dims.embed, rng)?,
            ctx: Dense::new(store, &format!("{prefix}.ctx"), CONTEXT_DIM, dims.embed, rng)?,
            lstm: Lstm::new(store, &format!("{prefix}.lstm"), dims.embed, dims.hidden, dims.lstm_layers, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.lstm.hidden + self.ctx.output
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        s: &ReplacementSample,
    ) -> Result<(Vec<f64>, ReplEncCache), NnError> {
        let emb = self.pc_emb.forward(store, &s.pc_history)?;
        let (mut out, _, lstm) = self.lstm.forward(store, &emb)?;
        let ctx_act = tanh_vec(&self.ctx.forward(store, &s.context)?);
        out.extend_from_slice(&ctx_act);
        Ok((out, ReplEncCache { lstm, ctx_act }))
    }

    pub fn backward(&self, store: &mut ParamStore, s: &ReplacementSample, cache: &ReplEncCache, d_out: &[f64]) {
        let h = self.lstm.hidden;
        let d_inputs = self.lstm.backward(store, &cache.lstm, &d_out[..h]);
        self.pc_emb.backward(store, &s.pc_history, &d_inputs);
        let dz = tanh_back(&cache.ctx_act, &d_out[h..]);
        self.ctx.backward_params(store, &s.context, &dz);
    }
}

/// LSTM over per-step `[pc ; page ; offset]` embeddings; the output is the
/// final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchEncoder {
    pub pc_emb: Embedding,
    pub page_emb: Embedding,
    pub offset_emb: Embedding,
    pub lstm: Lstm,
}

#[derive(Debug, Clone)]
pub struct PfEncCache {
    lstm: LstmCache,
}

impl PrefetchEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: &ModelDims,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let d = dims.embed;
        Ok(Self {
            pc_emb: Embedding::new(store, &format!("{prefix}.pc_emb"), dims.pc_vocab, d, rng)?,
            page_emb: Embedding::new(store, &format!("{prefix}.page_emb"), dims.page_vocab, d, rng)?,
            // offset tokens are shifted by one; 0 is padding
            offset_emb: Embedding::new(store, &format!("{prefix}.offset_emb"), dims.blocks_per_page + 1, d, rng)?,
            lstm: Lstm::new(store, &format!("{prefix}.lstm"), 3 * d, dims.hidden, dims.lstm_layers, rng)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.lstm.hidden
    }

    pub fn forward(&self, store: &ParamStore, s: &PrefetchSample) -> Result<(Vec<f64>, PfEncCache), NnError> {
        let pcs = self.pc_emb.forward(store, &s.pc_history)?;
        let pages = self.page_emb.forward(store, &s.page_history)?;
        let offs = self.offset_emb.forward(store, &s.offset_history)?;
        if pcs.len() != pages.len() || pcs.len() != offs.len() {
            return Err(NnError::Shape(format!(
                "history lengths differ: pc {}, page {}, offset {}",
                pcs.len(),
                pages.len(),
                offs.len()
            )));
        }
        let steps: Vec<Vec<f64>> = pcs
            .into_iter()
            .zip(pages)
            .zip(offs)
            .map(|((mut a, b), c)| {
                a.extend(b);
                a.extend(c);
                a
            })
            .collect();
        let (out, _, lstm) = self.lstm.forward(store, &steps)?;
        Ok((out, PfEncCache { lstm }))
    }

    pub fn backward(&self, store: &mut ParamStore, s: &PrefetchSample, cache: &PfEncCache, d_out: &[f64]) {
        let d = self.pc_emb.dim;
        let d_steps = self.lstm.backward(store, &cache.lstm, d_out);
        let split = |lo: usize| -> Vec<Vec<f64>> { d_steps.iter().map(|v| v[lo..lo + d].to_vec()).collect() };
        self.pc_emb.backward(store, &s.pc_history, &split(0));
        self.page_emb.backward(store, &s.page_history, &split(d));
        self.offset_emb.backward(store, &s.offset_history, &split(2 * d));
    }
}

/// Replacement (binary) and prefetch (page, offset) heads over a feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHeads {
    pub repl: Option<Dense>,
    pub page: Option<Dense>,
    pub offset: Option<Dense>,
}

/// Raw head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub repl_logit: Option<f64>,
    pub page_logits: Option<Vec<f64>>,
    pub offset_logits: Option<Vec<f64>>,
}

impl HeadOutput {
    pub fn p_friendly(&self) -> Option<f64> {
        self.repl_logit.map(crate::nnkit::sigmoid)
    }

    pub fn page_dist(&self) -> Option<Vec<f64>> {
        self.page_logits.as_deref().map(softmax)
    }

    pub fn offset_dist(&self) -> Option<Vec<f64>> {
        self.offset_logits.as_deref().map(softmax)
    }
}

impl PolicyHeads {
    fn new<R: Rng>(
        store: &mut ParamStore,
        input: usize,
        dims: &ModelDims,
        repl: bool,
        pf: bool,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        Ok(Self {
            repl: if repl { Some(Dense::new(store, "repl_head", input, 1, rng)?) } else { None },
            page: if pf { Some(Dense::new(store, "pf_head.page", input, dims.page_vocab, rng)?) } else { None },
            offset: if pf {
                Some(Dense::new(store, "pf_head.offset", input, dims.blocks_per_page, rng)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, store: &ParamStore, f: &[f64]) -> Result<HeadOutput, NnError> {
        Ok(HeadOutput {
            repl_logit: self.repl.as_ref().map(|d| d.forward(store, f).map(|v| v[0])).transpose()?,
            page_logits: self.page.as_ref().map(|d| d.forward(store, f)).transpose()?,
            offset_logits: self.offset.as_ref().map(|d| d.forward(store, f)).transpose()?,
        })
    }

    /// Weighted losses of `out`; when `grad` is set, accumulates head
    /// gradients and returns `dL/df`. Heads whose weight is zero or whose
    /// target is missing contribute nothing.
    fn loss(
        &self,
        store: &mut ParamStore,
        f: &[f64],
        out: &HeadOutput,
        rs: Option<&ReplacementSample>,
        ps: Option<&PrefetchSample>,
        w: &LossWeights,
        grad: bool,
    ) -> Result<(LossParts, Vec<f64>), NnError> {
        let mut parts = LossParts::default();
        let mut df = vec![0.0; f.len()];
        let back = |store: &mut ParamStore, d: &Dense, dy: &[f64], df: &mut Vec<f64>| {
            for (a, b) in df.iter_mut().zip(d.backward(store, f, dy)) {
                *a += b;
            }
        };
        if let (Some(head), Some(logit), Some(rs)) = (&self.repl, out.repl_logit, rs) {
            let (l, dl, _) = bce_with_logit(logit, rs.label, w.pos_weight);
            parts.repl = l;
            if grad && w.repl != 0.0 {
                back(store, head, &[w.repl * dl], &mut df);
            }
        }
        if let Some(target) = ps.and_then(|p| p.target) {
            if let (Some(head), Some(logits)) = (&self.page, &out.page_logits) {
                let (l, g) = softmax_xent(logits, target.page as usize)?;
                parts.page = l;
                if grad && w.pf != 0.0 {
                    let g: Vec<f64> = g.iter().map(|x| w.pf * x).collect();
                    back(store, head, &g, &mut df);
                }
            }
            if let (Some(head), Some(logits)) = (&self.offset, &out.offset_logits) {
                let (l, g) = softmax_xent(logits, target.offset as usize)?;
                parts.offset = l;
                if grad && w.pf != 0.0 {
                    let g: Vec<f64> = g.iter().map(|x| w.pf * x).collect();
                    back(store, head, &g, &mut df);
                }
            }
        }
        parts.total = w.repl * parts.repl + w.pf * (parts.page + parts.offset);
        Ok((parts, df))
    }
}

/// Baseline replacement model: encoder and binary head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementModel {
    pub enc: ReplacementEncoder,
    pub heads: PolicyHeads,
}

impl ReplacementModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Result<Self, NnError> {
        let enc = ReplacementEncoder::new(store, REPL_ENC, dims, rng)?;
        let heads = PolicyHeads::new(store, enc.out_dim(), dims, true, false, rng)?;
        Ok(Self { enc, heads })
    }

    pub fn head(&self) -> &Dense {
        self.heads.repl.as_ref().expect("replacement head")
    }

    /// Probability that the inserted line is cache-friendly.
    pub fn forward(&self, store: &ParamStore, s: &ReplacementSample) -> Result<f64, NnError> {
        let (e, _) = self.enc.forward(store, s)?;
        Ok(self.heads.forward(store, &e)?.p_friendly().unwrap_or(0.5))
    }

    pub fn loss_grad(
        &self,
        store: &mut ParamStore,
        s: &ReplacementSample,
        w: &LossWeights,
        grad: bool,
    ) -> Result<LossParts, NnError> {
        let (e, cache) = self.enc.forward(store, s)?;
        let out = self.heads.forward(store, &e)?;
        let (parts, de) = self.heads.loss(store, &e, &out, Some(s), None, w, grad)?;
        if grad && w.repl != 0.0 {
            self.enc.backward(store, s, &cache, &de);
        }
        Ok(parts)
    }
}

/// Baseline prefetch model: encoder with page and offset heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefetchModel {
    pub enc: PrefetchEncoder,
    pub heads: PolicyHeads,
}

impl PrefetchModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Result<Self, NnError> {
        let enc = PrefetchEncoder::new(store, PF_ENC, dims, rng)?;
        let heads = PolicyHeads::new(store, enc.out_dim(), dims, false, true, rng)?;
        Ok(Self { enc, heads })
    }

    /// `(page distribution, offset distribution)`.
    pub fn forward(&self, store: &ParamStore, s: &PrefetchSample) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let (e, _) = self.enc.forward(store, s)?;
        let out = self.heads.forward(store, &e)?;
        Ok((out.page_dist().unwrap_or_default(), out.offset_dist().unwrap_or_default()))
    }

    pub fn loss_grad(
        &self,
        store: &mut ParamStore,
        s: &PrefetchSample,
        w: &LossWeights,
        grad: bool,
    ) -> Result<LossParts, NnError> {
        let (e, cache) = self.enc.forward(store, s)?;
        let out = self.heads.forward(store, &e)?;
        let (parts, de) = self.heads.loss(store, &e, &out, None, Some(s), w, grad)?;
        if grad && s.target.is_some() && w.pf != 0.0 {
            self.enc.backward(store, s, &cache, &de);
        }
        Ok(parts)
    }
}

/// Both encoders feed `tanh(W [e_r ; e_p] + b)`; all heads read only that
/// shared embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub repl_enc: ReplacementEncoder,
    pub pf_enc: PrefetchEncoder,
    pub combine: Dense,
    pub heads: PolicyHeads,
}

/// Intermediate values of a joint forward pass.
#[derive(Debug, Clone)]
pub struct JointTrace {
    pub e_r: Vec<f64>,
    pub e_p: Vec<f64>,
    pub shared: Vec<f64>,
    pub out: HeadOutput,
    r_cache: ReplEncCache,
    p_cache: PfEncCache,
}

impl JointModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Result<Self, NnError> {
        let repl_enc = ReplacementEncoder::new(store, REPL_ENC, dims, rng)?;
        let pf_enc = PrefetchEncoder::new(store, PF_ENC, dims, rng)?;
        let combine = Dense::new(store, "combine", repl_enc.out_dim() + pf_enc.out_dim(), dims.shared, rng)?;
        let heads = PolicyHeads::new(store, dims.shared, dims, true, true, rng)?;
        Ok(Self {
            repl_enc,
            pf_enc,
            combine,
            heads,
        })
    }

    pub fn trace(
        &self,
        store: &ParamStore,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
    ) -> Result<JointTrace, ModelError> {
        check_aligned(rs, ps)?;
        let (e_r, r_cache) = self.repl_enc.forward(store, rs)?;
        let (e_p, p_cache) = self.pf_enc.forward(store, ps)?;
        let cat: Vec<f64> = e_r.iter().chain(&e_p).copied().collect();
        let shared = tanh_vec(&self.combine.forward(store, &cat)?);
        let out = self.heads.forward(store, &shared)?;
        Ok(JointTrace {
            e_r,
            e_p,
            shared,
            out,
            r_cache,
            p_cache,
        })
    }

    /// `(p_friendly, page distribution, offset distribution)`.
    pub fn forward(
        &self,
        store: &ParamStore,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
    ) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
        let t = self.trace(store, rs, ps)?;
        Ok((
            t.out.p_friendly().unwrap_or(0.5),
            t.out.page_dist().unwrap_or_default(),
            t.out.offset_dist().unwrap_or_default(),
        ))
    }

    /// Loss of one aligned pair. With `grad`, the gradient with respect to
    /// the concatenated encoder outputs is split by coordinate range and sent
    /// into each encoder.
    pub fn loss_grad(
        &self,
        store: &mut ParamStore,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
        w: &LossWeights,
        grad: bool,
    ) -> Result<LossParts, ModelError> {
        let t = self.trace(store, rs, ps)?;
        let (parts, d_shared) = self.heads.loss(store, &t.shared, &t.out, Some(rs), Some(ps), w, grad)?;
        if grad {
            let cat: Vec<f64> = t.e_r.iter().chain(&t.e_p).copied().collect();
            let dz = tanh_back(&t.shared, &d_shared);
            let d_cat = self.combine.backward(store, &cat, &dz);
            let (d_r, d_p) = d_cat.split_at(t.e_r.len());
            self.repl_enc.backward(store, rs, &t.r_cache, d_r);
            self.pf_enc.backward(store, ps, &t.p_cache, d_p);
        }
        Ok(parts)
    }
}

/// One positive with its negatives, as indices into the replacement and
/// prefetch sample slices passed to [`ContrastiveModel::pretrain_loss`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainGroup {
    pub repl: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Encoders pretrained with projections against InfoNCE, then policy heads
/// over `[e_r ; e_p]`. While `encoders_frozen` is set, stage-2 gradients stop
/// at the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveModel {
    pub repl_enc: ReplacementEncoder,
    pub pf_enc: PrefetchEncoder,
    pub proj_r: Dense,
    pub proj_p: Dense,
    pub heads: PolicyHeads,
    pub encoders_frozen: bool,
}

impl ContrastiveModel {
    pub fn new<R: Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Result<Self, NnError> {
        let repl_enc = ReplacementEncoder::new(store, REPL_ENC, dims, rng)?;
        let pf_enc = PrefetchEncoder::new(store, PF_ENC, dims, rng)?;
        let proj_r = Dense::new(store, "proj_r", repl_enc.out_dim(), dims.proj, rng)?;
        let proj_p = Dense::new(store, "proj_p", pf_enc.out_dim(), dims.proj, rng)?;
        let heads = PolicyHeads::new(store, repl_enc.out_dim() + pf_enc.out_dim(), dims, true, true, rng)?;
        Ok(Self {
            repl_enc,
            pf_enc,
            proj_r,
            proj_p,
            heads,
            encoders_frozen: true,
        })
    }

    pub fn project_repl(&self, store: &ParamStore, rs: &ReplacementSample) -> Result<Vec<f64>, NnError> {
        let (e, _) = self.repl_enc.forward(store, rs)?;
        self.proj_r.forward(store, &e)
    }

    pub fn project_pf(&self, store: &ParamStore, ps: &PrefetchSample) -> Result<Vec<f64>, NnError> {
        let (e, _) = self.pf_enc.forward(store, ps)?;
        self.proj_p.forward(store, &e)
    }

    /// Mean InfoNCE loss over `groups`. Each distinct sample is encoded once
    /// per call; with `grad`, gradients of the mean loss reach the encoders
    /// and projections only.
    pub fn pretrain_loss(
        &self,
        store: &mut ParamStore,
        groups: &[PretrainGroup],
        rs: &[ReplacementSample],
        ps: &[PrefetchSample],
        cfg: &ContrastiveConfig,
        grad: bool,
    ) -> Result<f64, ModelError> {
        if groups.is_empty() {
            return Err(ModelError::Config("no positive pairs".into()));
        }
        let bounds = |i: usize, n: usize| {
            if i < n {
                Ok(())
            } else {
                Err(NnError::Bounds { index: i, size: n })
            }
        };
        let mut r_fw: BTreeMap<usize, (Vec<f64>, Vec<f64>, ReplEncCache)> = BTreeMap::new();
        let mut p_fw: BTreeMap<usize, (Vec<f64>, Vec<f64>, PfEncCache)> = BTreeMap::new();
        for g in groups {
            bounds(g.repl, rs.len())?;
            if !r_fw.contains_key(&g.repl) {
                let (e, c) = self.repl_enc.forward(store, &rs[g.repl])?;
                let z = self.proj_r.forward(store, &e)?;
                r_fw.insert(g.repl, (e, z, c));
            }
            for &i in std::iter::once(&g.positive).chain(&g.negatives) {
                bounds(i, ps.len())?;
                if !p_fw.contains_key(&i) {
                    let (e, c) = self.pf_enc.forward(store, &ps[i])?;
                    let z = self.proj_p.forward(store, &e)?;
                    p_fw.insert(i, (e, z, c));
                }
            }
        }
        let n = groups.len() as f64;
        let mut d_r: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut d_p: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut total = 0.0;
        for g in groups {
            let negs: Vec<&[f64]> = g.negatives.iter().map(|i| p_fw[i].1.as_slice()).collect();
            let o = contrastive_loss(&r_fw[&g.repl].1, &p_fw[&g.positive].1, &negs, cfg)?;
            total += o.loss;
            if !grad {
                continue;
            }
            let acc = |map: &mut BTreeMap<usize, Vec<f64>>, k: usize, d: &[f64]| {
                let e = map.entry(k).or_insert_with(|| vec![0.0; d.len()]);
                for (a, b) in e.iter_mut().zip(d) {
                    *a += b / n;
                }
            };
            acc(&mut d_r, g.repl, &o.d_anchor);
            acc(&mut d_p, g.positive, &o.d_positive);
            for (i, d) in g.negatives.iter().zip(&o.d_negatives) {
                acc(&mut d_p, *i, d);
            }
        }
        for (i, dz) in &d_r {
            let (e, _, c) = &r_fw[i];
            let de = self.proj_r.backward(store, e, dz);
            self.repl_enc.backward(store, &rs[*i], c, &de);
        }
        for (i, dz) in &d_p {
            let (e, _, c) = &p_fw[i];
            let de = self.proj_p.backward(store, e, dz);
            self.pf_enc.backward(store, &ps[*i], c, &de);
        }
        Ok(total / n)
    }

    fn features(
        &self,
        store: &ParamStore,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
    ) -> Result<(Vec<f64>, ReplEncCache, PfEncCache), ModelError> {
        check_aligned(rs, ps)?;
        let (mut f, rc) = self.repl_enc.forward(store, rs)?;
        let (e_p, pc) = self.pf_enc.forward(store, ps)?;
        f.extend(e_p);
        Ok((f, rc, pc))
    }

    /// Stage-2 prediction: `(p_friendly, page distribution, offset distribution)`.
    pub fn forward(
        &self,
        store: &ParamStore,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
    ) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
        let (f, _, _) = self.features(store, rs, ps)?;
        let out = self.heads.forward(store, &f)?;
        Ok((
            out.p_friendly().unwrap_or(0.5),
            out.page_dist().unwrap_or_default(),
            out.offset_dist().unwrap_or_default(),
        ))
    }

    pub fn stage2_loss_grad(
        &self,
        store: &mut ParamStore,
        rs: &ReplacementSample,
        ps: &PrefetchSample,
        w: &LossWeights,
        grad: bool,
    ) -> Result<LossParts, ModelError> {
        let (f, rc, pc) = self.features(store, rs, ps)?;
        let out = self.heads.forward(store, &f)?;
        let (parts, df) = self.heads.loss(store, &f, &out, Some(rs), Some(ps), w, grad)?;
        if grad && !self.encoders_frozen {
            let (d_r, d_p) = df.split_at(self.repl_enc.out_dim());
            self.repl_enc.backward(store, rs, &rc, d_r);
            self.pf_enc.backward(store, ps, &pc, d_p);
        }
        Ok(parts)
    }
}
