//! The Unit Transformer: a two-layer multimodal encoder over dialogue, the
//! previous action, detected objects and a recurrent memory state.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scenegen::{self, Utterance};
use crate::world::{ActionKind, Detection, ObjectClass, GEOMETRY_SCALARS};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const START: u32 = 2;
pub const SEP: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[Start]", "[SEP]"];

/// Number of fused input blocks: dialogue, action, labels, regions, state.
pub const SEGMENTS: usize = 5;
/// Box terms appended to each region feature: x1, y1, x2, y2, w, h.
pub const BOX_TERMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials, then action names, then class names, then dialogue words.
    pub fn standard() -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(ActionKind::ALL.iter().map(|a| a.name().to_string()));
        words.extend(ObjectClass::ALL.iter().map(|c| c.name().to_string()));
        for w in scenegen::vocabulary() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(Error::TokenId(id))
    }

    pub fn action_id(&self, kind: ActionKind) -> u32 {
        self.index[kind.name()]
    }

    pub fn class_id(&self, class: ObjectClass) -> u32 {
        self.index[class.name()]
    }

    /// Utterances joined by [SEP], keeping the most recent `max_len` tokens.
    pub fn encode_dialogue(&self, dialogue: &[Utterance], max_len: usize) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for (i, u) in dialogue.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            for w in u.text.split_whitespace() {
                ids.push(self.id(&w.to_lowercase())?);
            }
        }
        if ids.len() > max_len {
            ids.drain(..ids.len() - max_len);
        }
        Ok(ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_dialogue: usize,
    pub max_detections: usize,
    pub region_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn: 128,
            max_dialogue: 64,
            max_detections: 16,
            region_dim: 32,
            seed: 19980417,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.ffn == 0 || self.max_dialogue == 0 {
            return Err(Error::Config("layers, ffn and max_dialogue must be positive".into()));
        }
        if self.region_dim < GEOMETRY_SCALARS {
            return Err(Error::Config(format!("region_dim must be at least {GEOMETRY_SCALARS}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub dialogue: Vec<u32>,
    /// False marks a padding position; padded tokens are masked out.
    pub dialogue_valid: Vec<bool>,
    pub prev_action: u32,
    pub detections: Vec<Detection>,
}

impl ModelInput {
    pub fn new(dialogue: Vec<u32>, prev_action: u32, detections: Vec<Detection>) -> Self {
        let dialogue_valid = vec![true; dialogue.len()];
        Self {
            dialogue,
            dialogue_valid,
            prev_action,
            detections,
        }
    }

    /// Right-pads the dialogue to `len` with masked [PAD] tokens.
    pub fn padded(mut self, len: usize) -> Self {
        while self.dialogue.len() < len {
            self.dialogue.push(PAD);
            self.dialogue_valid.push(false);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeOutput {
    pub action_logits: Var,
    pub object_logits: Var,
    pub new_state: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub action_logits: Vec<f64>,
    pub object_logits: Vec<f64>,
    pub new_state: Vec<f64>,
}

/// Zeroes individual decoder slots; used to probe decoder wiring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub action: bool,
    pub cls: bool,
    pub state: bool,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    embed: ParamId,
    pos: ParamId,
    segment: ParamId,
    region_w: ParamId,
    region_b: ParamId,
    layers: Vec<LayerIds>,
    final_g: ParamId,
    final_b: ParamId,
    action_w: ParamId,
    action_b: ParamId,
    object_w: ParamId,
    object_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct UnitTransformer {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    ids: Ids,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
}

impl UnitTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_vocab(config, Vocab::standard())
    }

    pub fn with_vocab(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut p = ParamStore::new(config.seed);
        let embed = p.add_xavier("embed.tokens", vocab.len(), d)?;
        let pos = p.add_xavier("embed.position", config.max_dialogue, d)?;
        let segment = p.add_xavier("embed.segment", SEGMENTS, d)?;
        let region_w = p.add_xavier("region.w", config.region_dim + BOX_TERMS, d)?;
        let region_b = p.add_const("region.b", 1, d, 0.0)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: p.add_const(&n("ln1.g"), 1, d, 1.0)?,
                ln1_b: p.add_const(&n("ln1.b"), 1, d, 0.0)?,
                wq: p.add_xavier(&n("attn.wq"), d, d)?,
                bq: p.add_const(&n("attn.bq"), 1, d, 0.0)?,
                wk: p.add_xavier(&n("attn.wk"), d, d)?,
                bk: p.add_const(&n("attn.bk"), 1, d, 0.0)?,
                wv: p.add_xavier(&n("attn.wv"), d, d)?,
                bv: p.add_const(&n("attn.bv"), 1, d, 0.0)?,
                wo: p.add_xavier(&n("attn.wo"), d, d)?,
                bo: p.add_const(&n("attn.bo"), 1, d, 0.0)?,
                ln2_g: p.add_const(&n("ln2.g"), 1, d, 1.0)?,
                ln2_b: p.add_const(&n("ln2.b"), 1, d, 0.0)?,
                w1: p.add_xavier(&n("ffn.w1"), d, config.ffn)?,
                b1: p.add_const(&n("ffn.b1"), 1, config.ffn, 0.0)?,
                w2: p.add_xavier(&n("ffn.w2"), config.ffn, d)?,
                b2: p.add_const(&n("ffn.b2"), 1, d, 0.0)?,
            });
        }
        let ids = Ids {
            embed,
            pos,
            segment,
            region_w,
            region_b,
            layers,
            final_g: p.add_const("final_ln.g", 1, d, 1.0)?,
            final_b: p.add_const("final_ln.b", 1, d, 0.0)?,
            action_w: p.add_xavier("head.action.w", 3 * d, ActionKind::COUNT)?,
            action_b: p.add_const("head.action.b", 1, ActionKind::COUNT, 0.0)?,
            object_w: p.add_xavier("head.object.w", 3 * d, ObjectClass::COUNT)?,
            object_b: p.add_const("head.object.b", 1, ObjectClass::COUNT, 0.0)?,
        };
        Ok(Self {
            config,
            vocab,
            params: p,
            ids,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Parameter counts grouped by the name prefix before the first dot.
    pub fn block_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for id in 0..self.params.len() {
            let name = self.params.name(id);
            let block = match name.split('.').next().unwrap() {
                "embed" | "head" => name.splitn(3, '.').take(2).collect::<Vec<_>>().join("."),
                b => b.to_string(),
            };
            *out.entry(block).or_insert(0) += self.params.get(id).len();
        }
        out
    }

    pub fn token_embedding(&self, id: u32) -> Result<Vec<f64>> {
        if id as usize >= self.vocab.len() {
            return Err(Error::TokenId(id));
        }
        Ok(self.params.get(self.ids.embed).row_slice(id as usize).to_vec())
    }

    /// Initial memory state: the [CLS] embedding.
    pub fn initial_state(&self) -> Vec<f64> {
        self.token_embedding(CLS).unwrap()
    }

    /// [CLS] embedding on the tape, so chain heads train it.
    pub fn initial_state_var(&self, tape: &mut Tape) -> Result<Var> {
        self.embed_tokens(tape, &[CLS])
    }

    pub fn embed_tokens(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab.len()) {
            return Err(Error::TokenId(bad));
        }
        let table = tape.param(&self.params, self.ids.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.select_rows(table, &idx)
    }

    pub fn encode_action(&self, tape: &mut Tape, action_id: u32) -> Result<Var> {
        self.embed_tokens(tape, &[action_id])
    }

    /// Dialogue embeddings plus position embeddings.
    pub fn encode_text(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        if ids.len() > self.config.max_dialogue {
            return Err(Error::Shape {
                op: "encode_text",
                detail: format!("{} tokens exceeds {}", ids.len(), self.config.max_dialogue),
            });
        }
        let tok = self.embed_tokens(tape, ids)?;
        let pos_table = tape.param(&self.params, self.ids.pos);
        let pos = tape.slice_rows(pos_table, 0, ids.len())?;
        tape.add(tok, pos)
    }

    fn region_input(&self, d: &Detection) -> Result<Vec<f64>> {
        let [cx, cy, w, h] = d.bbox;
        let ok = d.bbox.iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&cx)
            && (0.0..=1.0).contains(&cy)
            && w > 0.0
            && h > 0.0
            && w <= 1.0
            && h <= 1.0;
        if !ok {
            return Err(Error::MalformedBox(d.bbox));
        }
        if d.region_feature.len() != self.config.region_dim {
            return Err(Error::Shape {
                op: "encode_regions",
                detail: format!(
                    "region feature {} vs {}",
                    d.region_feature.len(),
                    self.config.region_dim
                ),
            });
        }
        let mut v = d.region_feature.clone();
        v.extend_from_slice(&[cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, w, h]);
        Ok(v)
    }

    /// Label embeddings with a leading [CLS], and region features mapped to
    /// d by a one-layer MLP. Regions is `None` without detections.
    pub fn encode_regions(&self, tape: &mut Tape, dets: &[Detection]) -> Result<(Var, Option<Var>)> {
        if dets.len() > self.config.max_detections {
            return Err(Error::Shape {
                op: "encode_regions",
                detail: format!("{} detections exceeds {}", dets.len(), self.config.max_detections),
            });
        }
        let mut label_ids = vec![CLS];
        label_ids.extend(dets.iter().map(|d| self.vocab.class_id(d.label)));
        let labels = self.embed_tokens(tape, &label_ids)?;
        if dets.is_empty() {
            return Ok((labels, None));
        }
        let width = self.config.region_dim + BOX_TERMS;
        let mut data = Vec::with_capacity(dets.len() * width);
        for d in dets {
            data.extend(self.region_input(d)?);
        }
        let x = tape.constant(Tensor::matrix(dets.len(), width, data)?);
        let w = tape.param(&self.params, self.ids.region_w);
        let b = tape.param(&self.params, self.ids.region_b);
        let h = tape.linear(x, w, b)?;
        Ok((labels, Some(tape.gelu(h))))
    }

    fn add_segment(&self, tape: &mut Tape, x: Var, seg: usize) -> Result<Var> {
        let table = tape.param(&self.params, self.ids.segment);
        let row = tape.slice_rows(table, seg, 1)?;
        tape.add_row(x, row)
    }

    fn attention(&self, tape: &mut Tape, x: Var, l: &LayerIds, key_mask: &[bool]) -> Result<Var> {
        let p = &self.params;
        let (wq, bq) = (tape.param(p, l.wq), tape.param(p, l.bq));
        let (wk, bk) = (tape.param(p, l.wk), tape.param(p, l.bk));
        let (wv, bv) = (tape.param(p, l.wv), tape.param(p, l.bv));
        let q = tape.linear(x, wq, bq)?;
        let k = tape.linear(x, wk, bk)?;
        let v = tape.linear(x, wv, bv)?;
        let dh = self.config.d_model / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, scale);
            let a = tape.masked_softmax(s, key_mask)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let (wo, bo) = (tape.param(p, l.wo), tape.param(p, l.bo));
        tape.linear(cat, wo, bo)
    }

    fn layer(&self, tape: &mut Tape, x: Var, l: &LayerIds, key_mask: &[bool]) -> Result<Var> {
        let p = &self.params;
        let (g1, b1) = (tape.param(p, l.ln1_g), tape.param(p, l.ln1_b));
        let h = tape.layer_norm(x, g1, b1)?;
        let a = self.attention(tape, h, l, key_mask)?;
        let x = tape.add(x, a)?;
        let (g2, b2) = (tape.param(p, l.ln2_g), tape.param(p, l.ln2_b));
        let h = tape.layer_norm(x, g2, b2)?;
        let (w1, bb1) = (tape.param(p, l.w1), tape.param(p, l.b1));
        let h = tape.linear(h, w1, bb1)?;
        let h = tape.gelu(h);
        let (w2, bb2) = (tape.param(p, l.w2), tape.param(p, l.b2));
        let f = tape.linear(h, w2, bb2)?;
        tape.add(x, f)
    }

    /// One step on `tape`; `state` is the `1 x d` memory vector.
    pub fn forward(&self, tape: &mut Tape, input: &ModelInput, state: Var) -> Result<TapeOutput> {
        self.forward_ablated(tape, input, state, Ablation::default())
    }

    pub fn forward_ablated(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        state: Var,
        ablation: Ablation,
    ) -> Result<TapeOutput> {
        let d = self.config.d_model;
        if input.dialogue.len() != input.dialogue_valid.len() {
            return Err(Error::Shape {
                op: "forward",
                detail: "dialogue and mask lengths differ".into(),
            });
        }
        if tape.value(state).shape != [1, d] {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("state shape {:?}, expected [1, {d}]", tape.value(state).shape),
            });
        }
        let mut blocks = Vec::with_capacity(SEGMENTS);
        let mut mask = Vec::new();
        if !input.dialogue.is_empty() {
            let text = self.encode_text(tape, &input.dialogue)?;
            blocks.push(self.add_segment(tape, text, 0)?);
            mask.extend_from_slice(&input.dialogue_valid);
        }
        let action_pos = mask.len();
        let act = self.encode_action(tape, input.prev_action)?;
        blocks.push(self.add_segment(tape, act, 1)?);
        mask.push(true);
        let cls_pos = mask.len();
        let (labels, regions) = self.encode_regions(tape, &input.detections)?;
        blocks.push(self.add_segment(tape, labels, 2)?);
        mask.extend(std::iter::repeat_n(true, input.detections.len() + 1));
        if let Some(r) = regions {
            blocks.push(self.add_segment(tape, r, 3)?);
            mask.extend(std::iter::repeat_n(true, input.detections.len()));
        }
        let state_pos = mask.len();
        blocks.push(self.add_segment(tape, state, 4)?);
        mask.push(true);

        let mut x = tape.concat_rows(&blocks)?;
        for l in &self.ids.layers {
            x = self.layer(tape, x, l, &mask)?;
        }
        let (g, b) = (
            tape.param(&self.params, self.ids.final_g),
            tape.param(&self.params, self.ids.final_b),
        );
        let x = tape.layer_norm(x, g, b)?;

        let mut slot = |pos: usize, zero: bool| -> Result<Var> {
            let v = tape.slice_rows(x, pos, 1)?;
            Ok(if zero { tape.scale(v, 0.0) } else { v })
        };
        let a = slot(action_pos, ablation.action)?;
        let c = slot(cls_pos, ablation.cls)?;
        let s = slot(state_pos, ablation.state)?;
        let new_state = tape.slice_rows(x, state_pos, 1)?;
        let dec = tape.concat_cols(&[a, c, s])?;
        let p = &self.params;
        let (aw, ab) = (tape.param(p, self.ids.action_w), tape.param(p, self.ids.action_b));
        let action_logits = tape.linear(dec, aw, ab)?;
        let (ow, ob) = (tape.param(p, self.ids.object_w), tape.param(p, self.ids.object_b));
        let object_logits = tape.linear(dec, ow, ob)?;
        Ok(TapeOutput {
            action_logits,
            object_logits,
            new_state,
        })
    }

    /// Forward pass on a throwaway tape.
    pub fn predict(&self, input: &ModelInput, state: &[f64]) -> Result<ModelOutput> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::row(state.to_vec()));
        let out = self.forward(&mut tape, input, s)?;
        Ok(ModelOutput {
            action_logits: tape.value(out.action_logits).data.clone(),
            object_logits: tape.value(out.object_logits).data.clone(),
            new_state: tape.value(out.new_state).data.clone(),
        })
    }

    fn meta(&self) -> String {
        serde_json::to_string(&Meta {
            config: self.config,
            vocab: self.vocab.words.clone(),
        })
        .expect("meta serializes")
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        self.params.to_checkpoint(&self.meta())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let (params, meta) = ParamStore::from_checkpoint(bytes)?;
        let meta: Meta = serde_json::from_str(&meta)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut model = Self::with_vocab(meta.config, Vocab::from_words(meta.vocab))?;
        if model.params.names() != params.names() {
            return Err(Error::Checkpoint("parameter names do not match the config".into()));
        }
        for id in 0..params.len() {
            if params.get(id).shape != model.params.get(id).shape {
                return Err(Error::Checkpoint(format!("shape of {} differs", params.name(id))));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}
