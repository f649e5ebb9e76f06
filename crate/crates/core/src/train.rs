//! Deterministic training loop: decoupled-weight-decay Adam over the batch
//! objective, linear warmup into cosine decay, fixed data order per seed.

use crate::align::{gap_metrics, GapMetrics};
use crate::config::RunConfig;
use crate::data::{build_dictionary, gen_sample, split_seeds, SyntheticSample, PROMPT_WORD};
use crate::decoder::{apply_guide, decoder_logits, guide_scores, TokenDictionary, PAD};
use crate::error::{Error, Result};
use crate::model::{
    batch_loss, bind, guide_config, init_model, model_adapter_forward, LossBreakdown, ModelParams,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── optimizer ────────────────────────────────────────────────────────────────

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Adam with decoupled weight decay: the decay term multiplies the raw
/// parameter, not the adapted gradient.
pub struct AdamW {
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(weight_decay: f64, sizes: &[usize]) -> Self {
        AdamW {
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One update at step size `lr`; `params` and `grads` share one order.
    pub fn step(&mut self, lr: f64, params: &mut [(String, &mut Tensor)], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), grads.len(), "optimizer state misaligned");
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = tensor.data_mut();
            assert_eq!(data.len(), g.len(), "gradient shape misaligned");
            for j in 0..data.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * data[j]);
            }
        }
    }
}

/// Linear warmup to the base step size, then cosine decay to zero (or flat
/// when the schedule is disabled).
pub fn lr_at(step: usize, cfg: &RunConfig) -> f64 {
    let total = cfg.total_steps();
    let warmup = cfg.warmup_epochs * cfg.steps_per_epoch();
    if warmup > 0 && step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    if !cfg.cosine_schedule || total <= warmup {
        return cfg.lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── evaluation ───────────────────────────────────────────────────────────────

/// Teacher-forced next-token accuracy over non-PAD positions, using the
/// guided logits whenever the configured model would decode with the guide.
pub fn val_accuracy(
    params: &ModelParams<Tensor>,
    samples: &[SyntheticSample],
    prompt: &[usize],
    cfg: &RunConfig,
) -> Result<f64> {
    let guide = guide_config(cfg);
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params);
        let h = tape.leaf(s.h_a.clone());
        let z_a = model_adapter_forward(&mut tape, h, &bound, cfg.n_g)?;
        let mut logits = decoder_logits(&mut tape, z_a, prompt, &s.caption, &bound.decoder)?;
        if guide.enabled {
            let zbar = tape.col_means(z_a);
            let scores = guide_scores(&mut tape, zbar, bound.decoder.embed, guide.mode)?;
            logits = apply_guide(&mut tape, logits, scores, bound.beta)?;
        }
        let lv = tape.value(logits);
        for (l, &want) in s.caption.iter().enumerate() {
            if want == PAD {
                continue;
            }
            let row = lv.row(l);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            total += 1;
            correct += usize::from(best == want);
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Pooled per-sample embeddings of both modalities, stacked for the split.
pub fn pooled_split(
    params: &ModelParams<Tensor>,
    samples: &[SyntheticSample],
    cfg: &RunConfig,
) -> Result<(Tensor, Tensor)> {
    let d = cfg.d_llm;
    let mut a = Vec::with_capacity(samples.len() * d);
    let mut t = Vec::with_capacity(samples.len() * d);
    for s in samples {
        let z_a = crate::model::forward_z_a(params, &s.h_a, cfg.n_g)?;
        let mut mean_a = vec![0.0; d];
        for i in 0..z_a.rows() {
            for (j, m) in mean_a.iter_mut().enumerate() {
                *m += z_a.get2(i, j);
            }
        }
        a.extend(mean_a.iter().map(|v| v / z_a.rows() as f64));
        let mut mean_t = vec![0.0; d];
        for &id in &s.caption {
            for (j, m) in mean_t.iter_mut().enumerate() {
                *m += params.decoder.embed.get2(id, j);
            }
        }
        t.extend(mean_t.iter().map(|v| v / s.caption.len() as f64));
    }
    Ok((
        Tensor::new(vec![samples.len(), d], a)?,
        Tensor::new(vec![samples.len(), d], t)?,
    ))
}

pub fn gap_on_split(
    params: &ModelParams<Tensor>,
    samples: &[SyntheticSample],
    cfg: &RunConfig,
) -> Result<GapMetrics> {
    let (a, t) = pooled_split(params, samples, cfg)?;
    gap_metrics(&a, &t)
}

// ── training loop ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub last: LossBreakdown,
    pub val_accuracy: f64,
    pub gap: GapMetrics,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams<Tensor>,
    pub dict: TokenDictionary,
    pub steps: u64,
    pub initial_gap: GapMetrics,
    pub final_gap: GapMetrics,
    pub final_val_accuracy: f64,
    pub history: Vec<EpochLog>,
}

pub fn prompt_ids(dict: &TokenDictionary) -> Vec<usize> {
    vec![dict.lookup(PROMPT_WORD).expect("prompt word in dictionary")]
}

/// Full deterministic run. `log` receives one line per epoch.
pub fn train(cfg: &RunConfig, mut log: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dict = build_dictionary(cfg.k)?;
    let prompt = prompt_ids(&dict);
    let train_set: Vec<SyntheticSample> = split_seeds(cfg.seed, "train", cfg.train_size)
        .into_iter()
        .map(|s| gen_sample(s, cfg.n_a, cfg.d, &dict, cfg.data_noise))
        .collect::<Result<_>>()?;
    let val_set: Vec<SyntheticSample> = split_seeds(cfg.seed, "val", cfg.val_size)
        .into_iter()
        .map(|s| gen_sample(s, cfg.n_a, cfg.d, &dict, cfg.data_noise))
        .collect::<Result<_>>()?;

    let mut params = init_model(cfg);
    let initial_gap = gap_on_split(&params, &val_set, cfg)?;
    let sizes: Vec<usize> = params.collect().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(cfg.weight_decay, &sizes);
    let shuffle_base = Rng::substream(cfg.seed, "shuffle").next_u64();

    let mut step = 0usize;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::new(Rng::derive(shuffle_base, epoch as u64)).shuffle(&mut order);

        let mut total_sum = 0.0;
        let mut steps_in_epoch = 0usize;
        let mut last = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let lr = lr_at(step, cfg);

            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let out = batch_loss(&mut tape, &bound, &batch, &prompt, cfg)?;
            if !out.breakdown.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    breakdown: out.breakdown.log_line(),
                });
            }
            tape.backward(out.total)?;
            let mut grads: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
            bound.map(&mut |&id: &NodeId| grads.push(tape.grad(id).to_vec()));
            drop(tape);
            let mut slots = params.collect_mut();
            opt.step(lr, &mut slots, &grads);

            total_sum += out.breakdown.total;
            last = out.breakdown;
            step += 1;
            steps_in_epoch += 1;
        }

        let acc = val_accuracy(&params, &val_set, &prompt, cfg)?;
        let gap = gap_on_split(&params, &val_set, cfg)?;
        let entry = EpochLog {
            epoch,
            mean_total: total_sum / steps_in_epoch.max(1) as f64,
            last,
            val_accuracy: acc,
            gap,
            lr: lr_at(step.saturating_sub(1), cfg),
        };
        let cos = gap
            .cos_mean
            .map_or("nan".to_string(), |v| format!("{v:.4}"));
        log(&format!(
            "epoch={} lr={:.6} mean_total={:.6} {} val_acc={:.4} l2_mean={:.6} cos_mean={}",
            epoch,
            entry.lr,
            entry.mean_total,
            entry.last.log_line(),
            acc,
            gap.l2_mean,
            cos
        ));
        history.push(entry);
    }

    let final_gap = gap_on_split(&params, &val_set, cfg)?;
    let final_val_accuracy = val_accuracy(&params, &val_set, &prompt, cfg)?;
    Ok(TrainOutcome {
        params,
        dict,
        steps: step as u64,
        initial_gap,
        final_gap,
        final_val_accuracy,
        history,
    })
}

// ─────────────────────────────────────────────────────────────────────────────
