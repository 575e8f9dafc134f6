//! Student and teacher decoders.
//!
//! Both share one code path: embed the previous word, advance a GRU-style
//! gated cell, attend over scene features (and, in attribute mode, over
//! encoded ground-truth attributes), fuse the attended streams through
//! sigmoid gates, and emit a word distribution through a GLU context head.
//! A model without attributes skips the attribute stream and the fusion
//! reduces to the visual feature alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdError, GradMap, ParamMap, Tape, Tensor, ValueId};
use crate::data::DatasetRecord;
use crate::text::{Caption, Vocab, BOS, EOS, PAD, UNK};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("attribute operation on a model without attribute weights")]
    ModeViolation,
    #[error("token {0:?} is not in the vocabulary")]
    OovToken(String),
    #[error("record has no attributes")]
    MissingAttributes,
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Structural hyperparameters shared by checkpoints and training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub uses_attributes: bool,
}

/// Every trainable matrix of the decoder. Attribute-stream weights exist
/// only in attribute (teacher) mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    /// Word embeddings, `[K, d]`.
    pub embed: Tensor,
    /// Scene-feature encoder, `[d, d]`.
    pub enc_scene: Tensor,
    /// Attribute encoder, `[d, d]`.
    pub enc_attr: Option<Tensor>,
    // Gated recurrent cell: update gate, reset gate, candidate.
    pub gru_wz: Tensor,
    pub gru_uz: Tensor,
    pub gru_bz: Tensor,
    pub gru_wr: Tensor,
    pub gru_ur: Tensor,
    pub gru_br: Tensor,
    pub gru_wc: Tensor,
    pub gru_uc: Tensor,
    pub gru_bc: Tensor,
    // Scaled dot-product attention projections.
    pub attn_vis_q: Tensor,
    pub attn_vis_k: Tensor,
    pub attn_attr_q: Option<Tensor>,
    pub attn_attr_k: Option<Tensor>,
    /// Visual fusion gate, `[2d, d]`.
    pub fuse_wv: Tensor,
    /// Attribute fusion gate, `[2d, d]`.
    pub fuse_wa: Option<Tensor>,
    /// Context projection feeding the GLU, `[2d, 2d]`.
    pub glu_w: Tensor,
    /// Output projection, `[d, K]`.
    pub out_w: Tensor,
}

impl ModelParams {
    /// Glorot-uniform matrices, zero biases.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> ModelParams {
        let d = cfg.hidden_dim;
        let k = cfg.vocab_size;
        let mut mat = |rows: usize, cols: usize| -> Tensor {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let attr = cfg.uses_attributes;
        ModelParams {
            cfg,
            embed: mat(k, d),
            enc_scene: mat(d, d),
            enc_attr: attr.then(|| mat(d, d)),
            gru_wz: mat(2 * d, d),
            gru_uz: mat(d, d),
            gru_bz: Tensor::zeros(vec![d]),
            gru_wr: mat(2 * d, d),
            gru_ur: mat(d, d),
            gru_br: Tensor::zeros(vec![d]),
            gru_wc: mat(2 * d, d),
            gru_uc: mat(d, d),
            gru_bc: Tensor::zeros(vec![d]),
            attn_vis_q: mat(d, d),
            attn_vis_k: mat(d, d),
            attn_attr_q: attr.then(|| mat(d, d)),
            attn_attr_k: attr.then(|| mat(d, d)),
            fuse_wv: mat(2 * d, d),
            fuse_wa: attr.then(|| mat(2 * d, d)),
            glu_w: mat(2 * d, 2 * d),
            out_w: mat(d, k),
        }
    }

    /// All-zero weights; useful as a degenerate fixture (uniform output
    /// distributions at every step).
    pub fn zeros(cfg: ModelConfig) -> ModelParams {
        let d = cfg.hidden_dim;
        let k = cfg.vocab_size;
        let attr = cfg.uses_attributes;
        ModelParams {
            cfg,
            embed: Tensor::zeros(vec![k, d]),
            enc_scene: Tensor::zeros(vec![d, d]),
            enc_attr: attr.then(|| Tensor::zeros(vec![d, d])),
            gru_wz: Tensor::zeros(vec![2 * d, d]),
            gru_uz: Tensor::zeros(vec![d, d]),
            gru_bz: Tensor::zeros(vec![d]),
            gru_wr: Tensor::zeros(vec![2 * d, d]),
            gru_ur: Tensor::zeros(vec![d, d]),
            gru_br: Tensor::zeros(vec![d]),
            gru_wc: Tensor::zeros(vec![2 * d, d]),
            gru_uc: Tensor::zeros(vec![d, d]),
            gru_bc: Tensor::zeros(vec![d]),
            attn_vis_q: Tensor::zeros(vec![d, d]),
            attn_vis_k: Tensor::zeros(vec![d, d]),
            attn_attr_q: attr.then(|| Tensor::zeros(vec![d, d])),
            attn_attr_k: attr.then(|| Tensor::zeros(vec![d, d])),
            fuse_wv: Tensor::zeros(vec![2 * d, d]),
            fuse_wa: attr.then(|| Tensor::zeros(vec![2 * d, d])),
            glu_w: Tensor::zeros(vec![2 * d, 2 * d]),
            out_w: Tensor::zeros(vec![d, k]),
        }
    }

    /// Named views over every tensor, in canonical order. Attribute-mode
    /// entries are present only when the model carries them.
    pub fn entries(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<(&'static str, &Tensor)> = vec![
            ("embed", &self.embed),
            ("enc_scene", &self.enc_scene),
            ("gru_wz", &self.gru_wz),
            ("gru_uz", &self.gru_uz),
            ("gru_bz", &self.gru_bz),
            ("gru_wr", &self.gru_wr),
            ("gru_ur", &self.gru_ur),
            ("gru_br", &self.gru_br),
            ("gru_wc", &self.gru_wc),
            ("gru_uc", &self.gru_uc),
            ("gru_bc", &self.gru_bc),
            ("attn_vis_q", &self.attn_vis_q),
            ("attn_vis_k", &self.attn_vis_k),
            ("fuse_wv", &self.fuse_wv),
            ("glu_w", &self.glu_w),
            ("out_w", &self.out_w),
        ];
        if let Some(t) = &self.enc_attr {
            out.push(("enc_attr", t));
        }
        if let Some(t) = &self.attn_attr_q {
            out.push(("attn_attr_q", t));
        }
        if let Some(t) = &self.attn_attr_k {
            out.push(("attn_attr_k", t));
        }
        if let Some(t) = &self.fuse_wa {
            out.push(("fuse_wa", t));
        }
        out
    }

    pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = vec![
            ("embed", &mut self.embed),
            ("enc_scene", &mut self.enc_scene),
            ("gru_wz", &mut self.gru_wz),
            ("gru_uz", &mut self.gru_uz),
            ("gru_bz", &mut self.gru_bz),
            ("gru_wr", &mut self.gru_wr),
            ("gru_ur", &mut self.gru_ur),
            ("gru_br", &mut self.gru_br),
            ("gru_wc", &mut self.gru_wc),
            ("gru_uc", &mut self.gru_uc),
            ("gru_bc", &mut self.gru_bc),
            ("attn_vis_q", &mut self.attn_vis_q),
            ("attn_vis_k", &mut self.attn_vis_k),
            ("fuse_wv", &mut self.fuse_wv),
            ("glu_w", &mut self.glu_w),
            ("out_w", &mut self.out_w),
        ];
        if let Some(t) = &mut self.enc_attr {
            out.push(("enc_attr", t));
        }
        if let Some(t) = &mut self.attn_attr_q {
            out.push(("attn_attr_q", t));
        }
        if let Some(t) = &mut self.attn_attr_k {
            out.push(("attn_attr_k", t));
        }
        if let Some(t) = &mut self.fuse_wa {
            out.push(("fuse_wa", t));
        }
        out
    }

    pub fn to_map(&self) -> ParamMap {
        self.entries()
            .into_iter()
            .map(|(name, t)| (name.to_owned(), t.clone()))
            .collect()
    }

    /// Rebuilds parameters from a named map (the inverse of `to_map`).
    pub fn from_map(cfg: ModelConfig, map: &ParamMap) -> ModelParams {
        let mut params = ModelParams::zeros(cfg);
        for (name, tensor) in params.entries_mut() {
            *tensor = map
                .get(name)
                .unwrap_or_else(|| panic!("missing parameter {name}"))
                .clone();
        }
        params
    }

    /// Registers every tensor on a tape, returning the leaf handles.
    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes {
            embed: tape.param("embed", self.embed.clone()),
            enc_scene: tape.param("enc_scene", self.enc_scene.clone()),
            enc_attr: self.enc_attr.as_ref().map(|t| tape.param("enc_attr", t.clone())),
            gru_wz: tape.param("gru_wz", self.gru_wz.clone()),
            gru_uz: tape.param("gru_uz", self.gru_uz.clone()),
            gru_bz: tape.param("gru_bz", self.gru_bz.clone()),
            gru_wr: tape.param("gru_wr", self.gru_wr.clone()),
            gru_ur: tape.param("gru_ur", self.gru_ur.clone()),
            gru_br: tape.param("gru_br", self.gru_br.clone()),
            gru_wc: tape.param("gru_wc", self.gru_wc.clone()),
            gru_uc: tape.param("gru_uc", self.gru_uc.clone()),
            gru_bc: tape.param("gru_bc", self.gru_bc.clone()),
            attn_vis_q: tape.param("attn_vis_q", self.attn_vis_q.clone()),
            attn_vis_k: tape.param("attn_vis_k", self.attn_vis_k.clone()),
            attn_attr_q: self
                .attn_attr_q
                .as_ref()
                .map(|t| tape.param("attn_attr_q", t.clone())),
            attn_attr_k: self
                .attn_attr_k
                .as_ref()
                .map(|t| tape.param("attn_attr_k", t.clone())),
            fuse_wv: tape.param("fuse_wv", self.fuse_wv.clone()),
            fuse_wa: self.fuse_wa.as_ref().map(|t| tape.param("fuse_wa", t.clone())),
            glu_w: tape.param("glu_w", self.glu_w.clone()),
            out_w: tape.param("out_w", self.out_w.clone()),
            hidden_dim: self.cfg.hidden_dim,
            uses_attributes: self.cfg.uses_attributes,
        }
    }

    /// SGD step over a gradient map (missing names are ignored).
    pub fn apply_grads(&mut self, grads: &GradMap, lr: f64) {
        for (name, tensor) in self.entries_mut() {
            if let Some(g) = grads.get(name) {
                for (w, gi) in tensor.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gi;
                }
            }
        }
    }
}

/// Tape handles for one registration of [`ModelParams`].
pub struct ParamNodes {
    pub embed: ValueId,
    pub enc_scene: ValueId,
    pub enc_attr: Option<ValueId>,
    pub gru_wz: ValueId,
    pub gru_uz: ValueId,
    pub gru_bz: ValueId,
    pub gru_wr: ValueId,
    pub gru_ur: ValueId,
    pub gru_br: ValueId,
    pub gru_wc: ValueId,
    pub gru_uc: ValueId,
    pub gru_bc: ValueId,
    pub attn_vis_q: ValueId,
    pub attn_vis_k: ValueId,
    pub attn_attr_q: Option<ValueId>,
    pub attn_attr_k: Option<ValueId>,
    pub fuse_wv: ValueId,
    pub fuse_wa: Option<ValueId>,
    pub glu_w: ValueId,
    pub out_w: ValueId,
    hidden_dim: usize,
    uses_attributes: bool,
}

/// Vocabulary-resolved model inputs for one record.
#[derive(Debug, Clone)]
pub struct RecordInput {
    /// Word ids of each object phrase (e.g. modifier + noun).
    pub object_ids: Vec<Vec<usize>>,
    /// Ground-truth attribute word ids.
    pub attr_ids: Vec<usize>,
}

impl RecordInput {
    pub fn from_record(record: &DatasetRecord, vocab: &Vocab) -> Result<RecordInput, ModelError> {
        let resolve = |tok: &str| -> Result<usize, ModelError> {
            match vocab.id_of(tok) {
                Some(id) if id != UNK => Ok(id),
                _ => Err(ModelError::OovToken(tok.to_owned())),
            }
        };
        let mut object_ids = Vec::with_capacity(record.objects.len());
        for obj in &record.objects {
            let ids = obj
                .split_whitespace()
                .map(resolve)
                .collect::<Result<Vec<_>, _>>()?;
            object_ids.push(ids);
        }
        let attr_ids = record
            .attributes
            .iter()
            .map(|a| resolve(a))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RecordInput {
            object_ids,
            attr_ids,
        })
    }
}

/// Recurrent decoder state: the hidden vector doubles as the carry of the
/// gated cell.
pub struct DecoderState {
    pub hidden: ValueId,
    pub step: usize,
}

/// One scene's encoded inputs on a tape.
pub struct SceneEncoding {
    pub features: Vec<ValueId>,
    pub feat_mean: ValueId,
    pub attr_features: Option<Vec<ValueId>>,
}

/// Embeds each object phrase (mean of its word embeddings) and applies the
/// scene encoder; one feature vector per object.
pub fn encode_scene(
    tape: &mut Tape,
    nodes: &ParamNodes,
    input: &RecordInput,
) -> Result<Vec<ValueId>, ModelError> {
    assert!(!input.object_ids.is_empty(), "scene has no objects");
    let mut features = Vec::with_capacity(input.object_ids.len());
    for ids in &input.object_ids {
        let emb = mean_embedding(tape, nodes.embed, ids)?;
        features.push(tape.matmul(emb, nodes.enc_scene)?);
    }
    Ok(features)
}

/// Embeds and encodes each attribute token; attribute mode only.
pub fn encode_attributes(
    tape: &mut Tape,
    nodes: &ParamNodes,
    input: &RecordInput,
) -> Result<Vec<ValueId>, ModelError> {
    let enc = nodes.enc_attr.ok_or(ModelError::ModeViolation)?;
    if input.attr_ids.is_empty() {
        return Err(ModelError::MissingAttributes);
    }
    let mut features = Vec::with_capacity(input.attr_ids.len());
    for &id in &input.attr_ids {
        let emb = tape.gather_row(nodes.embed, id)?;
        features.push(tape.matmul(emb, enc)?);
    }
    Ok(features)
}

/// Position-weighted pooling of a phrase's word embeddings. The geometric
/// weights keep word order recoverable from the pooled vector ("small brown
/// dog" and "brown small dog" pool differently), which a plain mean would
/// destroy.
fn mean_embedding(tape: &mut Tape, embed: ValueId, ids: &[usize]) -> Result<ValueId, AdError> {
    let weights: Vec<f64> = (0..ids.len()).map(|j| 0.6f64.powi(j as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut pooled: Option<ValueId> = None;
    for (&id, w) in ids.iter().zip(&weights) {
        let row = tape.gather_row(embed, id)?;
        let scaled = tape.scale(row, w / total)?;
        pooled = Some(match pooled {
            Some(acc) => tape.add(acc, scaled)?,
            None => scaled,
        });
    }
    Ok(pooled.expect("phrase has at least one word"))
}

fn mean_of(tape: &mut Tape, vecs: &[ValueId]) -> Result<ValueId, AdError> {
    let mut total = vecs[0];
    for &v in &vecs[1..] {
        total = tape.add(total, v)?;
    }
    tape.scale(total, 1.0 / vecs.len() as f64)
}

/// Scaled dot-product attention over a feature set.
pub fn attend(
    tape: &mut Tape,
    query: ValueId,
    features: &[ValueId],
    proj_q: ValueId,
    proj_k: ValueId,
    hidden_dim: usize,
) -> Result<ValueId, AdError> {
    assert!(!features.is_empty(), "attention needs at least one feature");
    let q = tape.matmul(query, proj_q)?;
    let scale = 1.0 / (hidden_dim as f64).sqrt();
    let mut scores = Vec::with_capacity(features.len());
    for &f in features {
        let key = tape.matmul(f, proj_k)?;
        let prod = tape.mul(q, key)?;
        let dot = tape.sum(prod)?;
        scores.push(tape.scale(dot, scale)?);
    }
    let logits = tape.concat(&scores)?;
    let weights = tape.softmax(logits)?;
    let stacked = tape.stack_rows(features)?;
    tape.matmul(weights, stacked)
}

/// Gate values produced by [`fuse`]; present in attribute mode only.
pub struct FuseOut {
    pub fused: ValueId,
    pub alpha: Option<ValueId>,
    pub beta: Option<ValueId>,
}

/// Attribute mode: sigmoid-gated sum of the attended visual and attribute
/// features. Without attributes the fused feature is the visual feature
/// itself, so the two modes share this single code path.
pub fn fuse(
    tape: &mut Tape,
    nodes: &ParamNodes,
    hidden: ValueId,
    v_hat: ValueId,
    a_hat: Option<ValueId>,
) -> Result<FuseOut, ModelError> {
    match (a_hat, nodes.fuse_wa) {
        (Some(a_hat), Some(fuse_wa)) => {
            let hv = tape.concat(&[hidden, v_hat])?;
            let alpha_pre = tape.matmul(hv, nodes.fuse_wv)?;
            let alpha = tape.sigmoid(alpha_pre)?;
            let ha = tape.concat(&[hidden, a_hat])?;
            let beta_pre = tape.matmul(ha, fuse_wa)?;
            let beta = tape.sigmoid(beta_pre)?;
            let av = tape.mul(alpha, v_hat)?;
            let ba = tape.mul(beta, a_hat)?;
            let fused = tape.add(av, ba)?;
            Ok(FuseOut {
                fused,
                alpha: Some(alpha),
                beta: Some(beta),
            })
        }
        (None, None) => Ok(FuseOut {
            fused: v_hat,
            alpha: None,
            beta: None,
        }),
        _ => Err(ModelError::ModeViolation),
    }
}

fn gated_cell(
    tape: &mut Tape,
    nodes: &ParamNodes,
    x: ValueId,
    h: ValueId,
) -> Result<ValueId, AdError> {
    let gate = |tape: &mut Tape, w, u, b, hin| -> Result<ValueId, AdError> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(hin, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, nodes.gru_wz, nodes.gru_uz, nodes.gru_bz, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, nodes.gru_wr, nodes.gru_ur, nodes.gru_br, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let c_pre = gate(tape, nodes.gru_wc, nodes.gru_uc, nodes.gru_bc, rh)?;
    let c = tape.tanh(c_pre)?;
    // h' = (1 - z) * h + z * c, written as h + z * (c - h).
    let neg_h = tape.scale(h, -1.0)?;
    let delta = tape.add(c, neg_h)?;
    let zdelta = tape.mul(z, delta)?;
    tape.add(h, zdelta)
}

/// Encodes a record's scene (and attributes in attribute mode) onto a tape.
pub fn encode_record(
    tape: &mut Tape,
    nodes: &ParamNodes,
    input: &RecordInput,
) -> Result<SceneEncoding, ModelError> {
    let features = encode_scene(tape, nodes, input)?;
    let feat_mean = mean_of(tape, &features)?;
    let attr_features = if nodes.uses_attributes {
        Some(encode_attributes(tape, nodes, input)?)
    } else {
        None
    };
    Ok(SceneEncoding {
        features,
        feat_mean,
        attr_features,
    })
}

/// Advances the decoder by one word: gated cell, attention, fusion, GLU
/// context, output softmax. The returned distribution is strictly positive
/// and sums to one.
pub fn decode_step(
    tape: &mut Tape,
    nodes: &ParamNodes,
    scene: &SceneEncoding,
    state: &DecoderState,
    prev_word: usize,
) -> Result<(ValueId, DecoderState), ModelError> {
    let emb = tape.gather_row(nodes.embed, prev_word)?;
    let x = tape.concat(&[emb, scene.feat_mean])?;
    let h = gated_cell(tape, nodes, x, state.hidden)?;

    let v_hat = attend(
        tape,
        h,
        &scene.features,
        nodes.attn_vis_q,
        nodes.attn_vis_k,
        nodes.hidden_dim,
    )?;
    let a_hat = match (&scene.attr_features, nodes.attn_attr_q, nodes.attn_attr_k) {
        (Some(attrs), Some(pq), Some(pk)) => {
            Some(attend(tape, h, attrs, pq, pk, nodes.hidden_dim)?)
        }
        (None, None, None) => None,
        _ => return Err(ModelError::ModeViolation),
    };
    let fused = fuse(tape, nodes, h, v_hat, a_hat)?.fused;

    let hf = tape.concat(&[h, fused])?;
    let glu_in = tape.matmul(hf, nodes.glu_w)?;
    let context = tape.glu(glu_in)?;
    let logits = tape.matmul(context, nodes.out_w)?;
    let dist = tape.softmax(logits)?;
    Ok((
        dist,
        DecoderState {
            hidden: h,
            step: state.step + 1,
        },
    ))
}

pub fn initial_state(tape: &mut Tape, hidden_dim: usize) -> DecoderState {
    DecoderState {
        hidden: tape.leaf(Tensor::zeros(vec![hidden_dim])),
        step: 0,
    }
}

/// Greedy argmax choice over a distribution.
///
/// PAD, BOS and UNK are never selected. EOS is selected only when its
/// probability strictly exceeds every word's; at a tie the lowest-id word
/// wins, so an untrained uniform model emits words rather than stopping
/// immediately.
fn greedy_pick(dist: &[f64]) -> usize {
    let mut best_word = None;
    let mut best_p = f64::NEG_INFINITY;
    for (id, &p) in dist.iter().enumerate() {
        if id == PAD || id == BOS || id == UNK || id == EOS {
            continue;
        }
        if p > best_p {
            best_p = p;
            best_word = Some(id);
        }
    }
    match best_word {
        Some(word) if dist[EOS] <= best_p => word,
        _ => EOS,
    }
}

/// Greedy rollout on an existing tape; returns the caption and the
/// per-step distributions.
pub fn greedy_rollout(
    tape: &mut Tape,
    nodes: &ParamNodes,
    scene: &SceneEncoding,
    max_len: usize,
) -> Result<(Caption, Vec<ValueId>), ModelError> {
    let mut state = initial_state(tape, nodes.hidden_dim);
    let mut prev = BOS;
    let mut interior = Vec::new();
    let mut dists = Vec::new();
    for _ in 0..max_len {
        let (dist, next) = decode_step(tape, nodes, scene, &state, prev)?;
        dists.push(dist);
        state = next;
        let choice = greedy_pick(tape.value(dist).data());
        if choice == EOS {
            break;
        }
        interior.push(choice);
        prev = choice;
    }
    Ok((Caption::from_interior(&interior), dists))
}

/// A sampled caption with its per-step log-probability nodes.
pub struct Rollout {
    pub caption: Caption,
    /// One scalar node per emitted token, including EOS when it was
    /// actually sampled.
    pub log_probs: Vec<ValueId>,
    /// Whether EOS was sampled (false when muzzled by `max_len`).
    pub emitted_eos: bool,
}

/// Multinomial rollout; log-probabilities stay on the tape so a policy
/// gradient can flow through them.
pub fn sample_rollout(
    tape: &mut Tape,
    nodes: &ParamNodes,
    scene: &SceneEncoding,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout, ModelError> {
    let mut state = initial_state(tape, nodes.hidden_dim);
    let mut prev = BOS;
    let mut interior = Vec::new();
    let mut log_probs = Vec::new();
    let mut emitted_eos = false;
    for _ in 0..max_len {
        let (dist, next) = decode_step(tape, nodes, scene, &state, prev)?;
        state = next;
        let choice = sample_index(tape.value(dist).data(), rng);
        let picked = tape.gather_row(dist, choice)?;
        log_probs.push(tape.log(picked)?);
        if choice == EOS {
            emitted_eos = true;
            break;
        }
        interior.push(choice);
        prev = choice;
    }
    Ok(Rollout {
        caption: Caption::from_interior(&interior),
        log_probs,
        emitted_eos,
    })
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Teacher-forced pass over a caption: the distribution at each step given
/// the gold prefix, for the interior words plus the terminating EOS.
pub fn forced_rollout(
    tape: &mut Tape,
    nodes: &ParamNodes,
    scene: &SceneEncoding,
    caption: &Caption,
) -> Result<Vec<ValueId>, ModelError> {
    let mut state = initial_state(tape, nodes.hidden_dim);
    let mut prev = BOS;
    let mut dists = Vec::with_capacity(caption.len() + 1);
    for &word in caption.emission_targets().iter() {
        let (dist, next) = decode_step(tape, nodes, scene, &state, prev)?;
        dists.push(dist);
        state = next;
        prev = word;
    }
    Ok(dists)
}

/// Greedy-decodes a caption for resolved inputs on a throwaway tape.
pub fn greedy_decode_input(
    input: &RecordInput,
    params: &ModelParams,
    max_len: usize,
) -> Result<Caption, ModelError> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let scene = encode_record(&mut tape, &nodes, input)?;
    let (caption, _) = greedy_rollout(&mut tape, &nodes, &scene, max_len)?;
    Ok(caption)
}

/// Greedy-decodes a caption for a record on a throwaway tape.
pub fn greedy_decode(
    record: &DatasetRecord,
    vocab: &Vocab,
    params: &ModelParams,
    max_len: usize,
) -> Result<Caption, ModelError> {
    let input = RecordInput::from_record(record, vocab)?;
    greedy_decode_input(&input, params, max_len)
}

/// Samples a caption and returns the realized per-step log-probabilities.
pub fn sample_decode(
    record: &DatasetRecord,
    vocab: &Vocab,
    params: &ModelParams,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Caption, Vec<f64>), ModelError> {
    let input = RecordInput::from_record(record, vocab)?;
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let scene = encode_record(&mut tape, &nodes, &input)?;
    let rollout = sample_rollout(&mut tape, &nodes, &scene, max_len, rng)?;
    let log_probs = rollout
        .log_probs
        .iter()
        .map(|&id| tape.value(id).item())
        .collect();
    Ok((rollout.caption, log_probs))
}
