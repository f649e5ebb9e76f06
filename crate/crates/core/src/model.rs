//! Full model: adapter (or its mean-pool ablation), decoder, and the guide
//! coefficient. Owns the batch objective that ties the alignment and
//! captioning losses together.

use crate::adapter::{adapter_forward, init_adapter, AdapterDims, AdapterParams};
use crate::align::{cma_loss, CmaWeights, KernelConfig};
use crate::config::RunConfig;
use crate::data::SyntheticSample;
use crate::decoder::{
    apply_guide, ce_loss, decoder_logits, greedy_decode, guide_scores, init_decoder,
    DecoderParams, GuideConfig,
};
use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Either the two-stream adapter or its ablation: one linear map from the
/// mean-pooled features to all N_g output rows at once.
#[derive(Debug, Clone)]
pub enum AdapterVariant<T> {
    Full(AdapterParams<T>),
    MeanProj(T),
}

impl<T> AdapterVariant<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AdapterVariant<U> {
        match self {
            AdapterVariant::Full(p) => AdapterVariant::Full(p.map(f)),
            AdapterVariant::MeanProj(w) => AdapterVariant::MeanProj(f(w)),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        match self {
            AdapterVariant::Full(p) => p.collect(prefix, out),
            AdapterVariant::MeanProj(w) => out.push((format!("{prefix}.mean_proj"), w)),
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        match self {
            AdapterVariant::Full(p) => p.collect_mut(prefix, out),
            AdapterVariant::MeanProj(w) => out.push((format!("{prefix}.mean_proj"), w)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub adapter: AdapterVariant<T>,
    pub decoder: DecoderParams<T>,
    pub beta: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            adapter: self.adapter.map(f),
            decoder: self.decoder.map(f),
            beta: f(&self.beta),
        }
    }

    pub fn collect<'a>(&'a self) -> Vec<(String, &'a T)> {
        let mut out = Vec::new();
        self.adapter.collect("adapter", &mut out);
        self.decoder.collect("decoder", &mut out);
        out.push(("beta".to_string(), &self.beta));
        out
    }

    pub fn collect_mut<'a>(&'a mut self) -> Vec<(String, &'a mut T)> {
        let mut out = Vec::new();
        self.adapter.collect_mut("adapter", &mut out);
        self.decoder.collect_mut("decoder", &mut out);
        out.push(("beta".to_string(), &mut self.beta));
        out
    }
}

/// Decoder context budget: audio prefix, prompt, BOS, longest caption,
/// plus one spare row for decoding probes.
pub fn max_seq_len(cfg: &RunConfig) -> usize {
    cfg.n_g + 1 + 1 + crate::data::MAX_CAPTION_LEN + 1
}

pub fn adapter_dims(cfg: &RunConfig) -> AdapterDims {
    AdapterDims {
        d: cfg.d,
        d_llm: cfg.d_llm,
        n_s: cfg.n_s,
        n_t: cfg.n_t,
        n_g: cfg.n_g,
        heads: cfg.heads,
        d_head: cfg.d_head,
    }
}

/// All parameters from the "init" substream of the run seed; beta starts at
/// zero so training begins from the unguided decoder.
pub fn init_model(cfg: &RunConfig) -> ModelParams<Tensor> {
    let mut rng = Rng::substream(cfg.seed, "init");
    let adapter = if cfg.ablate_tsa {
        let cols = cfg.n_g * cfg.d_llm;
        AdapterVariant::MeanProj(
            Tensor::new(
                vec![cfg.d, cols],
                rng.normal_vec(cfg.d * cols, 1.0 / (cfg.d as f64).sqrt()),
            )
            .expect("mean proj init"),
        )
    } else {
        AdapterVariant::Full(init_adapter(&mut rng, &adapter_dims(cfg)))
    };
    let decoder = init_decoder(
        &mut rng,
        cfg.k,
        cfg.d_llm,
        max_seq_len(cfg),
        cfg.heads,
        cfg.d_head,
    );
    ModelParams {
        adapter,
        decoder,
        beta: Tensor::new(vec![1, 1], vec![0.0]).expect("beta"),
    }
}

pub fn bind(tape: &mut Tape, p: &ModelParams<Tensor>) -> ModelParams<NodeId> {
    p.map(&mut |t: &Tensor| tape.leaf(t.clone()))
}

/// h_a [N_a, D] -> z_a [N_g, D_llm] under either adapter variant.
pub fn model_adapter_forward(
    tape: &mut Tape,
    h_a: NodeId,
    p: &ModelParams<NodeId>,
    n_g: usize,
) -> Result<NodeId> {
    match &p.adapter {
        AdapterVariant::Full(a) => adapter_forward(tape, h_a, a),
        AdapterVariant::MeanProj(w) => {
            let pooled = tape.col_means(h_a);
            let wide = tape.matmul(pooled, *w)?;
            let d_llm = tape.value(wide).cols() / n_g;
            let mut rows = Vec::with_capacity(n_g);
            for i in 0..n_g {
                rows.push(tape.slice_cols(wide, i * d_llm, (i + 1) * d_llm)?);
            }
            tape.concat_rows(&rows)
        }
    }
}

// ── batch objective ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub cs_global: Option<f64>,
    pub cs_token: Option<f64>,
    pub nce: Option<f64>,
    pub tg: Option<f64>,
    pub dec: Option<f64>,
}

impl LossBreakdown {
    /// `key=value` pairs, absent components omitted.
    pub fn log_line(&self) -> String {
        let mut s = format!("total={:.6}", self.total);
        for (k, v) in [
            ("cs_global", self.cs_global),
            ("cs_token", self.cs_token),
            ("nce", self.nce),
            ("tg", self.tg),
            ("dec", self.dec),
        ] {
            if let Some(v) = v {
                s.push_str(&format!(" {k}={v:.6}"));
            }
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && [self.cs_global, self.cs_token, self.nce, self.tg, self.dec]
                .iter()
                .all(|v| v.map_or(true, f64::is_finite))
    }
}

pub fn kernel_config(cfg: &RunConfig) -> KernelConfig {
    KernelConfig {
        policy: cfg.sigma_policy,
        sigma_floor: cfg.sigma_floor,
    }
}

/// Ablation switches fold into the weights: disabling CS zeroes both CS
/// terms inside the alignment loss, disabling CMA zeroes its lambda,
/// disabling TG zeroes the guided-CE lambda and the guide itself.
pub fn effective_weights(cfg: &RunConfig) -> (CmaWeights, f64, f64, f64) {
    let cma = CmaWeights {
        alpha_global: if cfg.ablate_cs { 0.0 } else { cfg.alpha1 },
        alpha_token: if cfg.ablate_cs { 0.0 } else { cfg.alpha2 },
        alpha_nce: cfg.alpha3,
        tau: cfg.tau,
    };
    let lambda1 = if cfg.ablate_cma { 0.0 } else { cfg.lambda1 };
    let lambda2 = if cfg.ablate_tg || !cfg.guide_enabled {
        0.0
    } else {
        cfg.lambda2
    };
    (cma, lambda1, lambda2, cfg.lambda3)
}

pub fn guide_config(cfg: &RunConfig) -> GuideConfig {
    GuideConfig {
        mode: cfg.guide_mode,
        enabled: cfg.guide_enabled && !cfg.ablate_tg,
        stop_grad: cfg.guide_stop_grad,
    }
}

pub struct BatchLoss {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
}

/// Weighted sum over the batch: alignment loss on pooled and token-level
/// embeddings plus original and guided cross-entropy under teacher forcing.
pub fn batch_loss(
    tape: &mut Tape,
    model: &ModelParams<NodeId>,
    samples: &[&SyntheticSample],
    prompt: &[usize],
    cfg: &RunConfig,
) -> Result<BatchLoss> {
    let (cma_w, l1, l2, l3) = effective_weights(cfg);
    let kcfg = kernel_config(cfg);
    let guide = guide_config(cfg);
    let b = samples.len();
    assert!(b > 0, "empty batch");

    // The text side of alignment and the guide's distance table default to
    // fixed targets: gradients stay on the audio side, mirroring alignment
    // against a frozen language model. The embeddings still train through
    // the decoder's own CE path.
    let text_table = if cfg.align_text_grad {
        model.decoder.embed
    } else {
        tape.leaf(tape.value(model.decoder.embed).clone())
    };

    let mut za_bars = Vec::with_capacity(b);
    let mut zt_bars = Vec::with_capacity(b);
    let mut tok_a = Vec::with_capacity(b);
    let mut tok_t = Vec::with_capacity(b);
    let mut dec_terms = Vec::with_capacity(b);
    let mut tg_terms = Vec::with_capacity(b);

    for s in samples {
        let h_a = tape.leaf(s.h_a.clone());
        let z_a = model_adapter_forward(tape, h_a, model, cfg.n_g)?;
        let za_bar = tape.col_means(z_a);
        let z_t = tape.gather_rows(text_table, &s.caption)?;
        let zt_bar = tape.col_means(z_t);
        za_bars.push(za_bar);
        zt_bars.push(zt_bar);
        tok_a.push(z_a);
        tok_t.push(z_t);

        if l3 != 0.0 || l2 != 0.0 {
            let logits = decoder_logits(tape, z_a, prompt, &s.caption, &model.decoder)?;
            if l3 != 0.0 {
                dec_terms.push(ce_loss(tape, logits, &s.caption)?);
            }
            if l2 != 0.0 {
                let score_src = if guide.stop_grad {
                    tape.leaf(tape.value(za_bar).clone())
                } else {
                    za_bar
                };
                let scores = guide_scores(tape, score_src, text_table, guide.mode)?;
                let guided = apply_guide(tape, logits, scores, model.beta)?;
                tg_terms.push(ce_loss(tape, guided, &s.caption)?);
            }
        }
    }

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<NodeId> = None;
    let push = |tape: &mut Tape, total: &mut Option<NodeId>, term: NodeId, w: f64| {
        let scaled = tape.mul_scalar(term, w);
        *total = Some(match *total {
            None => scaled,
            Some(prev) => tape.add(prev, scaled).expect("scalar add"),
        });
    };

    if l1 != 0.0 {
        let pooled_a = tape.concat_rows(&za_bars)?;
        let pooled_t = tape.concat_rows(&zt_bars)?;
        let (cma, parts) = cma_loss(tape, pooled_a, pooled_t, &tok_a, &tok_t, &cma_w, &kcfg)?;
        breakdown.cs_global = parts.global;
        breakdown.cs_token = parts.token;
        breakdown.nce = parts.nce;
        push(tape, &mut total, cma, l1);
    }
    if l2 != 0.0 {
        let sum = mean_of(tape, &tg_terms)?;
        breakdown.tg = Some(tape.value(sum).item());
        push(tape, &mut total, sum, l2);
    }
    if l3 != 0.0 {
        let sum = mean_of(tape, &dec_terms)?;
        breakdown.dec = Some(tape.value(sum).item());
        push(tape, &mut total, sum, l3);
    }
    let total = match total {
        Some(t) => t,
        None => tape.scalar(0.0),
    };
    breakdown.total = tape.value(total).item();
    Ok(BatchLoss { total, breakdown })
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / terms.len() as f64))
}

// ── inference helpers ────────────────────────────────────────────────────────

/// z_a for one sample at parameter values (no gradients kept).
pub fn forward_z_a(params: &ModelParams<Tensor>, h_a: &Tensor, n_g: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(h_a.clone());
    let bound = bind(&mut tape, params);
    let z = model_adapter_forward(&mut tape, x, &bound, n_g)?;
    Ok(tape.value(z).clone())
}

/// Greedy caption for one sample under the configured guide.
pub fn decode_caption(
    params: &ModelParams<Tensor>,
    h_a: &Tensor,
    prompt: &[usize],
    cfg: &RunConfig,
) -> Result<Vec<usize>> {
    let z_a = forward_z_a(params, h_a, cfg.n_g)?;
    let guide = guide_config(cfg);
    let beta = params.beta.item();
    greedy_decode(
        &z_a,
        prompt,
        &params.decoder,
        beta,
        &guide,
        crate::data::MAX_CAPTION_LEN,
    )
}

// ── checkpoint bridging ──────────────────────────────────────────────────────

pub fn to_checkpoint(params: &ModelParams<Tensor>, step: u64, config_hash: u64) -> crate::checkpoint::Checkpoint {
    crate::checkpoint::Checkpoint {
        step,
        config_hash,
        tensors: params
            .collect()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect(),
    }
}

/// Checkpoint carrying the canonical config text as an extra record, so
/// evaluation commands can rebuild the exact run from the artifact alone.
/// Bytes are stored one per element; values 0..=255 are exact in f64.
pub fn checkpoint_with_config(
    params: &ModelParams<Tensor>,
    step: u64,
    cfg: &RunConfig,
) -> crate::checkpoint::Checkpoint {
    let mut ck = to_checkpoint(params, step, cfg.hash());
    let bytes: Vec<f64> = cfg.canonical_string().bytes().map(f64::from).collect();
    let n = bytes.len();
    let record = Tensor::new(vec![n], bytes).expect("byte record shape");
    ck.tensors.push(("meta.config_text".to_string(), record));
    ck
}

/// Recover the run config embedded by `checkpoint_with_config`, verifying
/// it against the stored hash.
pub fn config_from_checkpoint(ck: &crate::checkpoint::Checkpoint) -> Result<RunConfig> {
    use crate::error::Error;
    let (_, t) = ck
        .tensors
        .iter()
        .find(|(n, _)| n == "meta.config_text")
        .ok_or_else(|| Error::Checkpoint("no embedded config record".to_string()))?;
    let mut bytes = Vec::with_capacity(t.numel());
    for &v in t.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Checkpoint("config record is not byte data".to_string()));
        }
        bytes.push(v as u8);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Checkpoint("config record is not UTF-8".to_string()))?;
    let cfg = RunConfig::parse(&text)?;
    if cfg.hash() != ck.config_hash {
        return Err(Error::Checkpoint(format!(
            "embedded config hashes to {:016x}, file says {:016x}",
            cfg.hash(),
            ck.config_hash
        )));
    }
    Ok(cfg)
}

/// Rebuild a model from a checkpoint against the config that produced it;
/// every parameter must be present with its exact shape. Records under
/// `meta.` carry run provenance, not parameters.
pub fn from_checkpoint(
    cfg: &RunConfig,
    ck: &crate::checkpoint::Checkpoint,
) -> Result<ModelParams<Tensor>> {
    use crate::error::Error;
    let mut model = init_model(cfg);
    let mut slots = model.collect_mut();
    let records: Vec<&(String, Tensor)> = ck
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("meta."))
        .collect();
    if slots.len() != records.len() {
        return Err(Error::Checkpoint(format!(
            "{} records for {} parameters (config mismatch?)",
            records.len(),
            slots.len()
        )));
    }
    for (name, t) in records {
        let slot = slots
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected record {name:?}")))?;
        if slot.1.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name:?}: shape {:?} in file, {:?} in model",
                t.shape(),
                slot.1.shape()
            )));
        }
        *slot.1 = t.clone();
    }
    Ok(model)
}

// ─────────────────────────────────────────────────────────────────────────────
