//! Toy autoregressive decoder plus the token-guide logit correction.
//!
//! The decoder consumes [audio embeddings; prompt; BOS; target embeddings]
//! under a causal mask and emits next-token logits at the target positions.
//! The guide subtracts beta-scaled distances between the pooled audio
//! embedding and every dictionary entry from the logits.

use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, init_layer_norm, init_mha, layer_norm, mha, LayerNormParams, MhaParams,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

// ── token dictionary ─────────────────────────────────────────────────────────

/// Vocabulary surfaces, ids dense in [0, K). The embedding table lives with
/// the decoder parameters so one tensor serves input embedding, guide
/// distances, and training updates.
#[derive(Debug, Clone)]
pub struct TokenDictionary {
    surfaces: Vec<String>,
}

impl TokenDictionary {
    pub fn new(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.len() <= EOS {
            return Err(Error::domain(
                "dictionary",
                format!("need at least {} entries for reserved ids", EOS + 1),
            ));
        }
        Ok(TokenDictionary { surfaces })
    }

    pub fn k(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, id: usize) -> Result<&str> {
        self.surfaces
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownToken {
                id,
                vocab: self.surfaces.len(),
            })
    }

    pub fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.surfaces.len() {
                return Err(Error::UnknownToken {
                    id,
                    vocab: self.surfaces.len(),
                });
            }
        }
        Ok(())
    }

    /// First id whose surface matches, if any.
    pub fn lookup(&self, surface: &str) -> Option<usize> {
        self.surfaces.iter().position(|s| s == surface)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (id, s) in self.surfaces.iter().enumerate() {
            out.push_str(&format!("{id}\t{s}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut surfaces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id_str, surface) = line.split_once('\t').ok_or_else(|| {
                Error::domain("dictionary", format!("line {}: missing tab", lineno + 1))
            })?;
            let id: usize = id_str.parse().map_err(|_| {
                Error::domain("dictionary", format!("line {}: bad id", lineno + 1))
            })?;
            if id != surfaces.len() {
                return Err(Error::domain(
                    "dictionary",
                    format!("line {}: ids must ascend from 0", lineno + 1),
                ));
            }
            surfaces.push(surface.to_string());
        }
        TokenDictionary::new(surfaces)
    }
}

// ── guide ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuideMode {
    SquaredL2,
    L1,
    Cosine,
}

/// Larger score = stronger penalty in every mode.
#[derive(Debug, Clone, Copy)]
pub struct GuideConfig {
    pub mode: GuideMode,
    pub enabled: bool,
    /// Cut the gradient path from the guide scores back into the pooled
    /// audio embedding (beta still trains).
    pub stop_grad: bool,
}

impl Default for GuideConfig {
    fn default() -> Self {
        GuideConfig {
            mode: GuideMode::SquaredL2,
            enabled: true,
            stop_grad: false,
        }
    }
}

/// Per-token distances between the pooled embedding z_bar [1, D] and every
/// row of the table [K, D]; returns a [1, K] row.
pub fn guide_scores(
    tape: &mut Tape,
    z_bar: NodeId,
    table: NodeId,
    mode: GuideMode,
) -> Result<NodeId> {
    let k = tape.value(table).rows();
    let zb = tape.broadcast_rows(z_bar, k)?;
    match mode {
        GuideMode::SquaredL2 => {
            let diff = tape.sub(table, zb)?;
            let sq = tape.mul(diff, diff)?;
            let sums = tape.row_sums(sq);
            Ok(tape.transpose(sums))
        }
        GuideMode::L1 => {
            let diff = tape.sub(table, zb)?;
            let absd = tape.abs(diff);
            let sums = tape.row_sums(absd);
            Ok(tape.transpose(sums))
        }
        GuideMode::Cosine => {
            {
                let zv = tape.value(z_bar);
                if zv.row(0).iter().map(|v| v * v).sum::<f64>() == 0.0 {
                    return Err(Error::domain("guide_scores", "zero-norm pooled embedding"));
                }
                let tv = tape.value(table);
                for i in 0..k {
                    if tv.row(i).iter().map(|v| v * v).sum::<f64>() == 0.0 {
                        return Err(Error::domain(
                            "guide_scores",
                            format!("zero-norm token embedding {i}"),
                        ));
                    }
                }
            }
            let zt = tape.transpose(z_bar);
            let dots = tape.matmul(table, zt)?;
            let tsq = tape.mul(table, table)?;
            let tn2 = tape.row_sums(tsq);
            let tn = tape.sqrt(tn2)?;
            let zsq = tape.mul(z_bar, z_bar)?;
            let zn2 = tape.row_sums(zsq);
            let zn = tape.sqrt(zn2)?;
            let znb = tape.broadcast_rows(zn, k)?;
            let denom = tape.mul(tn, znb)?;
            let cos = tape.div(dots, denom)?;
            let neg = tape.neg(cos);
            Ok(tape.transpose(neg))
        }
    }
}

/// Guided logits: z_hat = z - beta * scores, broadcast over rows.
pub fn apply_guide(
    tape: &mut Tape,
    logits: NodeId,
    scores: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let rows = tape.value(logits).rows();
    let full = tape.broadcast_rows(scores, rows)?;
    let penalty = tape.mul(full, beta)?;
    tape.sub(logits, penalty)
}

// ── decoder parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DecoderBlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub attn: MhaParams<T>,
    pub ln2: LayerNormParams<T>,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

impl<T> DecoderBlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderBlockParams<U> {
        DecoderBlockParams {
            ln1: self.ln1.map(f),
            attn: self.attn.map(f),
            ln2: self.ln2.map(f),
            w_ff1: f(&self.w_ff1),
            b_ff1: f(&self.b_ff1),
            w_ff2: f(&self.w_ff2),
            b_ff2: f(&self.b_ff2),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        out.push((format!("{prefix}.w_ff1"), &self.w_ff1));
        out.push((format!("{prefix}.b_ff1"), &self.b_ff1));
        out.push((format!("{prefix}.w_ff2"), &self.w_ff2));
        out.push((format!("{prefix}.b_ff2"), &self.b_ff2));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.ln1.collect_mut(&format!("{prefix}.ln1"), out);
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
        self.ln2.collect_mut(&format!("{prefix}.ln2"), out);
        out.push((format!("{prefix}.w_ff1"), &mut self.w_ff1));
        out.push((format!("{prefix}.b_ff1"), &mut self.b_ff1));
        out.push((format!("{prefix}.w_ff2"), &mut self.w_ff2));
        out.push((format!("{prefix}.b_ff2"), &mut self.b_ff2));
    }
}

/// Pre-norm causal transformer: shared embedding table, learned positions,
/// two blocks, linear output head. Max sequence length = rows of `pos`.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub embed: T,
    pub pos: T,
    pub blocks: Vec<DecoderBlockParams<T>>,
    pub head: T,
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            embed: f(&self.embed),
            pos: f(&self.pos),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            head: f(&self.head),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.embed"), &self.embed));
        out.push((format!("{prefix}.pos"), &self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.head"), &self.head));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.embed"), &mut self.embed));
        out.push((format!("{prefix}.pos"), &mut self.pos));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.head"), &mut self.head));
    }
}

pub fn init_decoder_block(
    rng: &mut Rng,
    d: usize,
    heads: usize,
    d_head: usize,
) -> DecoderBlockParams<Tensor> {
    let hidden = 2 * d;
    let std_d = 1.0 / (d as f64).sqrt();
    let std_h = 1.0 / (hidden as f64).sqrt();
    DecoderBlockParams {
        ln1: init_layer_norm(d),
        attn: init_mha(rng, d, heads, d_head, d),
        ln2: init_layer_norm(d),
        w_ff1: Tensor::new(vec![d, hidden], rng.normal_vec(d * hidden, std_d)).expect("ff1"),
        b_ff1: Tensor::zeros(vec![1, hidden]),
        w_ff2: Tensor::new(vec![hidden, d], rng.normal_vec(hidden * d, std_h)).expect("ff2"),
        b_ff2: Tensor::zeros(vec![1, d]),
    }
}

pub fn init_decoder(
    rng: &mut Rng,
    k: usize,
    d_llm: usize,
    max_len: usize,
    heads: usize,
    d_head: usize,
) -> DecoderParams<Tensor> {
    let std_d = 1.0 / (d_llm as f64).sqrt();
    DecoderParams {
        embed: Tensor::new(vec![k, d_llm], rng.normal_vec(k * d_llm, std_d)).expect("embed"),
        pos: Tensor::new(vec![max_len, d_llm], rng.normal_vec(max_len * d_llm, 0.02))
            .expect("pos"),
        blocks: (0..2).map(|_| init_decoder_block(rng, d_llm, heads, d_head)).collect(),
        head: Tensor::new(vec![d_llm, k], rng.normal_vec(d_llm * k, std_d)).expect("head"),
    }
}

// ── decoder forward ──────────────────────────────────────────────────────────

fn block_forward(
    tape: &mut Tape,
    x: NodeId,
    b: &DecoderBlockParams<NodeId>,
    mask: &[bool],
) -> Result<NodeId> {
    let n1 = layer_norm(tape, x, &b.ln1)?;
    let att = mha(tape, n1, n1, &b.attn, Some(mask))?;
    let x = tape.add(x, att)?;
    let n2 = layer_norm(tape, x, &b.ln2)?;
    let h = tape.matmul(n2, b.w_ff1)?;
    let h = tape.add_row(h, b.b_ff1)?;
    let h = tape.gelu(h);
    let f = tape.matmul(h, b.w_ff2)?;
    let f = tape.add_row(f, b.b_ff2)?;
    tape.add(x, f)
}

/// Hidden states for the full causally-masked input
/// [z_a rows; embeddings of token_ids], positions added in order.
fn decoder_hidden(
    tape: &mut Tape,
    z_a: NodeId,
    token_ids: &[usize],
    p: &DecoderParams<NodeId>,
) -> Result<NodeId> {
    let k = tape.value(p.embed).rows();
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= k) {
        return Err(Error::UnknownToken { id: bad, vocab: k });
    }
    let n_g = tape.value(z_a).rows();
    let total = n_g + token_ids.len();
    let max_len = tape.value(p.pos).rows();
    if total > max_len {
        return Err(Error::OverLength {
            len: total,
            max: max_len,
        });
    }
    let toks = tape.gather_rows(p.embed, token_ids)?;
    let seq = tape.concat_rows(&[z_a, toks])?;
    let pos = tape.slice_rows(p.pos, 0, total)?;
    let mut x = tape.add(seq, pos)?;
    let mask = causal_mask(total);
    for b in &p.blocks {
        x = block_forward(tape, x, b, &mask)?;
    }
    Ok(x)
}

/// Teacher-forced next-token logits, one row per target token: row l is the
/// prediction for target_ids[l], computed at the position holding BOS (l = 0)
/// or target_ids[l-1].
pub fn decoder_logits(
    tape: &mut Tape,
    z_a: NodeId,
    prompt_ids: &[usize],
    target_ids: &[usize],
    p: &DecoderParams<NodeId>,
) -> Result<NodeId> {
    if target_ids.is_empty() {
        return Err(Error::domain("decoder_logits", "empty target sequence"));
    }
    let mut ids = Vec::with_capacity(prompt_ids.len() + 1 + target_ids.len());
    ids.extend_from_slice(prompt_ids);
    ids.push(BOS);
    ids.extend_from_slice(target_ids);
    let hidden = decoder_hidden(tape, z_a, &ids, p)?;
    let n_g = tape.value(z_a).rows();
    let base = n_g + prompt_ids.len();
    let rows = tape.slice_rows(hidden, base, base + target_ids.len())?;
    tape.matmul(rows, p.head)
}

// ── losses ───────────────────────────────────────────────────────────────────

/// Mean cross-entropy over non-PAD positions.
pub fn ce_loss(tape: &mut Tape, logits: NodeId, target_ids: &[usize]) -> Result<NodeId> {
    let (l, k) = (tape.value(logits).rows(), tape.value(logits).cols());
    if target_ids.len() != l {
        return Err(Error::InvalidShape {
            op: "ce_loss",
            shape: vec![l, k],
            reason: format!("{} targets for {l} rows", target_ids.len()),
        });
    }
    if let Some(&bad) = target_ids.iter().find(|&&id| id >= k) {
        return Err(Error::UnknownToken { id: bad, vocab: k });
    }
    let live = target_ids.iter().filter(|&&id| id != PAD).count();
    if live == 0 {
        return Err(Error::domain("ce_loss", "all target positions are PAD"));
    }
    let lsm = tape.log_softmax(logits);
    let picked = tape.take_per_row(lsm, target_ids)?;
    let w: Vec<f64> = target_ids
        .iter()
        .map(|&id| if id == PAD { 0.0 } else { -1.0 / live as f64 })
        .collect();
    let weights = tape.leaf(Tensor::new(vec![l, 1], w)?);
    let prod = tape.mul(picked, weights)?;
    Ok(tape.sum_all(prod))
}

// ── greedy decoding ──────────────────────────────────────────────────────────

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Iterative argmax decoding from [z_a; prompt; BOS], guided when enabled.
/// Stops at EOS or after max_new tokens; the EOS, when produced, is kept.
pub fn greedy_decode(
    z_a: &Tensor,
    prompt_ids: &[usize],
    params: &DecoderParams<Tensor>,
    beta: f64,
    guide: &GuideConfig,
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut generated: Vec<usize> = Vec::new();
    // guide scores depend only on z_a, so compute them once
    let scores: Option<Vec<f64>> = if guide.enabled {
        let mut tape = Tape::new();
        let za = tape.leaf(z_a.clone());
        let table = tape.leaf(params.embed.clone());
        let zbar = tape.col_means(za);
        let s = guide_scores(&mut tape, zbar, table, guide.mode)?;
        Some(tape.value(s).data().to_vec())
    } else {
        None
    };
    while generated.len() < max_new {
        let mut tape = Tape::new();
        let za = tape.leaf(z_a.clone());
        let bound = params.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let mut ids = Vec::with_capacity(prompt_ids.len() + 1 + generated.len());
        ids.extend_from_slice(prompt_ids);
        ids.push(BOS);
        ids.extend_from_slice(&generated);
        let hidden = decoder_hidden(&mut tape, za, &ids, &bound)?;
        let n = tape.value(hidden).rows();
        let last = tape.slice_rows(hidden, n - 1, n)?;
        let logits = tape.matmul(last, bound.head)?;
        let mut row = tape.value(logits).data().to_vec();
        if let Some(s) = &scores {
            for (v, si) in row.iter_mut().zip(s) {
                *v -= beta * si;
            }
        }
        let next = argmax(&row);
        generated.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(generated)
}

// ─────────────────────────────────────────────────────────────────────────────
