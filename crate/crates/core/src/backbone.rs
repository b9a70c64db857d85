//! A small decoder-only causal transformer with a synthetic visual prefix,
//! per-stage low-rank adapters, and greedy generation — the stand-in for the
//! frozen VLM.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::hex_digest;
use crate::error::{Error, Result};
use crate::rng::XorShiftRng;
use crate::stage::StageId;
use crate::tensor::{concat_cols, concat_rows, no_grad, Tensor};
use crate::tokenizer::{TokenSequence, Vocab, EOS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub n_visual_tokens: usize,
    /// Size of the visual attribute embedding table.
    pub visual_vocab: usize,
}

impl ModelConfig {
    pub fn desk_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 192,
            n_visual_tokens: 4,
            visual_vocab: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Data("model config fields must be positive".into()));
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::Data(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 16,
            alpha: 32.0,
            dropout_p: 0.05,
        }
    }
}

/// The projection targets LoRA attaches to, per layer.
pub const LORA_TARGETS: [&str; 6] = ["wq", "wk", "wv", "wo", "w1", "w2"];

/// One low-rank pair: contribution (alpha/r) · (x·A) · B, with B zero-init so
/// the initial contribution is exactly zero.
#[derive(Clone)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

pub struct LoraAdapter {
    pub stage: StageId,
    pub config: LoraConfig,
    pub init_seed: u64,
    pub frozen: bool,
    /// layer-major, LORA_TARGETS order within each layer
    pub pairs: Vec<LoraPair>,
}

impl LoraAdapter {
    pub fn new(model: &ModelConfig, config: LoraConfig, stage: StageId, seed: u64) -> LoraAdapter {
        let mut rng = XorShiftRng::new(seed);
        let r = config.rank;
        let d = model.dim;
        let hidden = 4 * d;
        let mut pairs = Vec::new();
        for _layer in 0..model.n_layers {
            for target in LORA_TARGETS {
                let (d_in, d_out) = match target {
                    "w1" => (d, hidden),
                    "w2" => (hidden, d),
                    _ => (d, d),
                };
                let a = Tensor::param_normal(&[d_in, r], 0.02, &mut rng);
                let b = Tensor::zeros(&[r, d_out], true);
                pairs.push(LoraPair { a, b });
            }
        }
        LoraAdapter {
            stage,
            config,
            init_seed: seed,
            frozen: false,
            pairs,
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.pairs
            .iter()
            .flat_map(|p| [p.a.clone(), p.b.clone()])
            .collect()
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.pairs
            .iter()
            .enumerate()
            .flat_map(|(i, p)| {
                let layer = i / LORA_TARGETS.len();
                let target = LORA_TARGETS[i % LORA_TARGETS.len()];
                [
                    (format!("lora.{layer}.{target}.a"), p.a.clone()),
                    (format!("lora.{layer}.{target}.b"), p.b.clone()),
                ]
            })
            .collect()
    }

    pub fn load_state(&self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        load_into(&self.state(), map)
    }

    /// SHA-256 over the concatenated little-endian parameter bytes.
    pub fn checksum(&self) -> String {
        state_checksum(&self.state())
    }
}

pub struct AdapterRegistry {
    adapters: BTreeMap<StageId, LoraAdapter>,
}

impl Default for AdapterRegistry {
    fn default() -> Self {
        AdapterRegistry {
            adapters: BTreeMap::new(),
        }
    }
}

impl AdapterRegistry {
    pub fn insert(&mut self, adapter: LoraAdapter) {
        self.adapters.insert(adapter.stage, adapter);
    }

    pub fn get(&self, stage: StageId) -> Option<&LoraAdapter> {
        self.adapters.get(&stage)
    }

    /// Frozen adapters keep bit-identical weights through any training;
    /// freezing is idempotent.
    pub fn freeze(&mut self, stage: StageId) -> Result<()> {
        self.adapters
            .get_mut(&stage)
            .map(|a| a.frozen = true)
            .ok_or_else(|| Error::Data(format!("unknown stage adapter: {stage}")))
    }

    pub fn set_trainable(&mut self, stage: StageId) -> Result<()> {
        self.adapters
            .get_mut(&stage)
            .map(|a| a.frozen = false)
            .ok_or_else(|| Error::Data(format!("unknown stage adapter: {stage}")))
    }

    /// Trainable parameters for a stage; empty when frozen.
    pub fn trainable_params(&self, stage: StageId) -> Vec<Tensor> {
        match self.adapters.get(&stage) {
            Some(a) if !a.frozen => a.params(),
            _ => Vec::new(),
        }
    }
}

struct LayerParams {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct Backbone {
    pub config: ModelConfig,
    pub init_seed: u64,
    token_embed: Tensor,
    visual_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<LayerParams>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    lm_head: Tensor,
}

const LN_EPS: f64 = 1e-5;

impl Backbone {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Backbone> {
        config.validate()?;
        let d = config.dim;
        let mut rng = XorShiftRng::new(XorShiftRng::derive(seed, "backbone"));
        let init = 0.02;
        let token_embed = Tensor::param_normal(&[config.vocab_size, d], init, &mut rng);
        let visual_embed = Tensor::param_normal(&[config.visual_vocab, d], init, &mut rng);
        let pos_embed = Tensor::param_normal(&[config.max_seq_len, d], init, &mut rng);
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: Tensor::new(&[d], vec![1.0; d], true),
                ln1_b: Tensor::zeros(&[d], true),
                wq: Tensor::param_normal(&[d, d], init, &mut rng),
                bq: Tensor::zeros(&[d], true),
                wk: Tensor::param_normal(&[d, d], init, &mut rng),
                bk: Tensor::zeros(&[d], true),
                wv: Tensor::param_normal(&[d, d], init, &mut rng),
                bv: Tensor::zeros(&[d], true),
                wo: Tensor::param_normal(&[d, d], init, &mut rng),
                bo: Tensor::zeros(&[d], true),
                ln2_g: Tensor::new(&[d], vec![1.0; d], true),
                ln2_b: Tensor::zeros(&[d], true),
                w1: Tensor::param_normal(&[d, 4 * d], init, &mut rng),
                b1: Tensor::zeros(&[4 * d], true),
                w2: Tensor::param_normal(&[4 * d, d], init, &mut rng),
                b2: Tensor::zeros(&[d], true),
            });
        }
        let lm_head = Tensor::param_normal(&[d, config.vocab_size], init, &mut rng);
        Ok(Backbone {
            config,
            init_seed: seed,
            token_embed,
            visual_embed,
            pos_embed,
            layers,
            lnf_g: Tensor::new(&[d], vec![1.0; d], true),
            lnf_b: Tensor::zeros(&[d], true),
            lm_head,
        })
    }

    /// Token + positional embeddings, with the visual attribute prefix (the
    /// synthetic stand-in for image tokens) as the first rows. Injection
    /// happens after this output.
    pub fn embed(&self, seq: &TokenSequence, visual_ids: Option<&[usize]>) -> Result<Tensor> {
        let vis_len = visual_ids.map(|v| v.len()).unwrap_or(0);
        if vis_len != seq.visual_prefix_len {
            return Err(Error::Dimension(format!(
                "visual prefix mismatch: ids {vis_len}, seq says {}",
                seq.visual_prefix_len
            )));
        }
        let total = vis_len + seq.token_ids.len();
        if total > self.config.max_seq_len {
            return Err(Error::Dimension(format!(
                "sequence length {total} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if total == 0 {
            return Err(Error::Dimension("empty sequence".into()));
        }
        let mut parts = Vec::new();
        if let Some(v) = visual_ids {
            if !v.is_empty() {
                parts.push(self.visual_embed.gather_rows(v)?);
            }
        }
        if !seq.token_ids.is_empty() {
            let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
            parts.push(self.token_embed.gather_rows(&ids)?);
        }
        let tok = concat_rows(&parts)?;
        let pos_ids: Vec<usize> = (0..total).collect();
        let pos = self.pos_embed.gather_rows(&pos_ids)?;
        tok.add(&pos)
    }

    /// Causal forward pass. Returns (logits, last-layer hidden states before
    /// the LM head). Dropout applies only when a training RNG is supplied.
    pub fn forward(
        &self,
        emb: &Tensor,
        adapter: Option<&LoraAdapter>,
        mut dropout_rng: Option<&mut XorShiftRng>,
    ) -> Result<(Tensor, Tensor)> {
        let l = emb.shape()[0];
        let d = self.config.dim;
        let n_heads = self.config.n_heads;
        let hd = d / n_heads;
        let mask = causal_mask(l);

        let mut x = emb.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let h = x.layer_norm(&layer.ln1_g, &layer.ln1_b, LN_EPS)?;
            let q = self.adapted(
                &h, &layer.wq, &layer.bq, adapter, li, 0, dropout_rng.as_deref_mut(),
            )?;
            let k = self.adapted(
                &h, &layer.wk, &layer.bk, adapter, li, 1, dropout_rng.as_deref_mut(),
            )?;
            let v = self.adapted(
                &h, &layer.wv, &layer.bv, adapter, li, 2, dropout_rng.as_deref_mut(),
            )?;
            let mut heads = Vec::with_capacity(n_heads);
            for hi in 0..n_heads {
                let qh = q.slice_cols(hi * hd, hd)?;
                let kh = k.slice_cols(hi * hd, hd)?;
                let vh = v.slice_cols(hi * hd, hd)?;
                let scores = qh
                    .matmul(&kh.transpose()?)?
                    .scale(1.0 / (hd as f64).sqrt())
                    .add(&mask)?;
                let probs = scores.softmax_rows()?;
                heads.push(probs.matmul(&vh)?);
            }
            let attn = concat_cols(&heads)?;
            let attn_out = self.adapted(
                &attn, &layer.wo, &layer.bo, adapter, li, 3, dropout_rng.as_deref_mut(),
            )?;
            x = x.add(&attn_out)?;

            let h2 = x.layer_norm(&layer.ln2_g, &layer.ln2_b, LN_EPS)?;
            let mid = self
                .adapted(
                    &h2, &layer.w1, &layer.b1, adapter, li, 4, dropout_rng.as_deref_mut(),
                )?
                .gelu();
            let mlp_out = self.adapted(
                &mid, &layer.w2, &layer.b2, adapter, li, 5, dropout_rng.as_deref_mut(),
            )?;
            x = x.add(&mlp_out)?;
        }
        let hidden = x.layer_norm(&self.lnf_g, &self.lnf_b, LN_EPS)?;
        let logits = hidden.matmul(&self.lm_head)?;
        Ok((logits, hidden))
    }

    fn adapted(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        adapter: Option<&LoraAdapter>,
        layer: usize,
        target: usize,
        rng: Option<&mut XorShiftRng>,
    ) -> Result<Tensor> {
        let base = x.matmul(w)?.add_row_broadcast(b)?;
        let Some(ad) = adapter else { return Ok(base) };
        let pair = &ad.pairs[layer * LORA_TARGETS.len() + target];
        let xin = match rng {
            Some(r) if ad.config.dropout_p > 0.0 && !ad.frozen => {
                x.dropout(ad.config.dropout_p, r)
            }
            _ => x.clone(),
        };
        let scaling = ad.config.alpha / ad.config.rank as f64;
        let delta = xin.matmul(&pair.a)?.matmul(&pair.b)?.scale(scaling);
        base.add(&delta)
    }

    /// Deterministic argmax decoding until EOS or `max_new` tokens. If
    /// `injected` is present the vector is added to the embedding at the
    /// given position before the first forward pass and kept there for all
    /// subsequent passes.
    pub fn generate_greedy(
        &self,
        seq: &TokenSequence,
        visual_ids: Option<&[usize]>,
        adapter: Option<&LoraAdapter>,
        max_new: usize,
        injected: &[(usize, Tensor)],
    ) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::Data("generate_greedy: max_new must be >= 1".into()));
        }
        let prompt_end = seq.visual_prefix_len + seq.prompt_len;
        for (pos, v) in injected {
            if *pos >= prompt_end {
                return Err(Error::Dimension(format!(
                    "injection position {pos} outside prompt range 0..{prompt_end}"
                )));
            }
            if v.shape() != [self.config.dim] {
                return Err(Error::Dimension("injected vector dim mismatch".into()));
            }
        }
        no_grad(|| {
            let mut generated: Vec<u32> = Vec::new();
            loop {
                let mut cur = seq.clone();
                cur.token_ids.extend_from_slice(&generated);
                let mut emb = self.embed(&cur, visual_ids)?;
                for (pos, v) in injected {
                    emb = emb.add_at_row(*pos, v)?;
                }
                let (logits, _) = self.forward(&emb, adapter, None)?;
                let v = self.config.vocab_size;
                let last = logits.to_vec()[(emb.shape()[0] - 1) * v..].to_vec();
                let next = argmax(&last) as u32;
                if next == EOS {
                    break;
                }
                generated.push(next);
                if generated.len() >= max_new {
                    break;
                }
            }
            Ok(generated)
        })
    }

    /// Hidden states from encoding a prompt (no generation), with optional
    /// single-position injections applied to the embeddings.
    pub fn encode(
        &self,
        seq: &TokenSequence,
        visual_ids: Option<&[usize]>,
        adapter: Option<&LoraAdapter>,
        injected: &[(usize, Tensor)],
    ) -> Result<Tensor> {
        let mut emb = self.embed(seq, visual_ids)?;
        for (pos, v) in injected {
            emb = emb.add_at_row(*pos, v)?;
        }
        let (_, hidden) = self.forward(&emb, adapter, None)?;
        Ok(hidden)
    }

    pub fn detokenize(&self, vocab: &Vocab, ids: &[u32]) -> String {
        vocab.detokenize(ids)
    }

    pub fn base_params(&self) -> Vec<Tensor> {
        self.state().into_iter().map(|(_, t)| t).collect()
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("token_embed".to_string(), self.token_embed.clone()),
            ("visual_embed".to_string(), self.visual_embed.clone()),
            ("pos_embed".to_string(), self.pos_embed.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t.clone()));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone()));
        out.push(("lnf_b".to_string(), self.lnf_b.clone()));
        out.push(("lm_head".to_string(), self.lm_head.clone()));
        out
    }

    pub fn load_state(&self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        load_into(&self.state(), map)
    }

    pub fn checksum(&self) -> String {
        state_checksum(&self.state())
    }
}

fn causal_mask(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in (i + 1)..l {
            data[i * l + j] = -1e9;
        }
    }
    Tensor::new(&[l, l], data, false)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn load_into(state: &[(String, Tensor)], map: &BTreeMap<String, Tensor>) -> Result<()> {
    for (name, t) in state {
        let src = map
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "checkpoint tensor {name} shape {:?} vs expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.set_data(src.to_vec());
    }
    Ok(())
}

pub fn state_checksum(state: &[(String, Tensor)]) -> String {
    let mut bytes = Vec::new();
    for (name, t) in state {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.to_vec() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    hex_digest(&bytes)
}
