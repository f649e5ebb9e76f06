//! Finite-difference audit of every loss surface and the adapter stack,
//! shared by the command line and the acceptance tests. Kernel bandwidths
//! are held fixed during probing: the median heuristic is a function of the
//! values being perturbed and would shift under finite differences.

use crate::adapter::{adapter_forward, init_adapter, AdapterDims};
use crate::align::{cma_loss, cs_token_loss, info_nce, BandwidthPolicy, CmaWeights, KernelConfig};
use crate::config::RunConfig;
use crate::data::{build_dictionary, gen_sample, split_seeds, SyntheticSample};
use crate::decoder::{apply_guide, ce_loss, guide_scores, GuideMode};
use crate::error::Result;
use crate::gradcheck::{random_tensor, GradCheck, REL_TOL};
use crate::model::{batch_loss, init_model};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
    pub ok: bool,
    pub worst: Option<crate::gradcheck::Probe>,
}

pub const SUITE_LOSSES: [&str; 8] = [
    "cs_global", "cs_token", "nce", "cma", "tg", "dec", "total", "adapter",
];

fn fixed_kernel(rng: &mut Rng) -> KernelConfig {
    KernelConfig {
        policy: BandwidthPolicy::Fixed(rng.uniform(0.7, 1.8)),
        sigma_floor: 1e-3,
    }
}

/// Gradients below this are under the noise floor of central differences
/// at the suite's loss magnitudes; such coordinates are skipped rather than
/// scored against rounding noise.
const MIN_GRAD: f64 = 1e-5;

fn checker(max_probes: usize) -> GradCheck {
    GradCheck {
        max_probes,
        min_grad: MIN_GRAD,
        ..GradCheck::default()
    }
}

fn check_one(name: &'static str, rng: &mut Rng, per_tensor: usize) -> Result<SuiteEntry> {
    let mut max_rel = 0.0f64;
    let mut probes = 0usize;
    let mut worst = None;
    let mut absorb = |rep: crate::gradcheck::GradReport| {
        if rep.max_rel_err >= max_rel {
            worst = rep.worst.clone();
        }
        max_rel = max_rel.max(rep.max_rel_err);
        probes += rep.probes;
    };
    match name {
        "cs_global" => {
            let b = 2 + rng.below(5);
            let d = 1 + rng.below(8);
            let cfg = fixed_kernel(rng);
            let params = vec![
                ("a".to_string(), random_tensor(rng, &[b, d], 1.0)),
                ("t".to_string(), random_tensor(rng, &[b, d], 1.0)),
            ];
            absorb(checker(0).run(rng, &params, move |tape, ids| {
                crate::align::cs_divergence_hat(tape, ids[0], ids[1], &cfg)
            })?);
        }
        "cs_token" => {
            let d = 1 + rng.below(6);
            let cfg = fixed_kernel(rng);
            let mut params = Vec::new();
            for name in ["a0", "t0", "a1", "t1"] {
                let rows = 2 + rng.below(3);
                params.push((name.to_string(), random_tensor(rng, &[rows, d], 1.0)));
            }
            absorb(checker(0).run(rng, &params, move |tape, ids| {
                cs_token_loss(tape, &[ids[0], ids[2]], &[ids[1], ids[3]], &cfg)
            })?);
        }
        "nce" => {
            let b = 2 + rng.below(5);
            let d = 2 + rng.below(7);
            let tau = rng.uniform(0.05, 0.5);
            let params = vec![
                ("a".to_string(), random_tensor(rng, &[b, d], 1.0)),
                ("t".to_string(), random_tensor(rng, &[b, d], 1.0)),
            ];
            absorb(checker(0).run(rng, &params, move |tape, ids| {
                info_nce(tape, ids[0], ids[1], tau)
            })?);
        }
        "cma" => {
            let b = 2 + rng.below(4);
            let d = 2 + rng.below(5);
            let cfg = fixed_kernel(rng);
            let w = CmaWeights {
                alpha_global: rng.uniform(0.2, 1.5),
                alpha_token: rng.uniform(0.2, 1.5),
                alpha_nce: rng.uniform(0.2, 1.5),
                tau: rng.uniform(0.05, 0.3),
            };
            let params = vec![
                ("pa".to_string(), random_tensor(rng, &[b, d], 1.0)),
                ("pt".to_string(), random_tensor(rng, &[b, d], 1.0)),
                ("ka".to_string(), random_tensor(rng, &[3, d], 1.0)),
                ("kt".to_string(), random_tensor(rng, &[4, d], 1.0)),
            ];
            absorb(checker(0).run(rng, &params, move |tape, ids| {
                let (total, _) =
                    cma_loss(tape, ids[0], ids[1], &[ids[2]], &[ids[3]], &w, &cfg)?;
                Ok(total)
            })?);
        }
        "tg" => {
            let l = 2 + rng.below(3);
            let k = 4 + rng.below(5);
            let d = 2 + rng.below(6);
            let mode = match rng.below(3) {
                0 => GuideMode::SquaredL2,
                1 => GuideMode::L1,
                _ => GuideMode::Cosine,
            };
            let targets: Vec<usize> = (0..l).map(|_| 1 + rng.below(k - 1)).collect();
            let params = vec![
                ("logits".to_string(), random_tensor(rng, &[l, k], 1.0)),
                ("zbar".to_string(), random_tensor(rng, &[1, d], 1.0)),
                ("table".to_string(), random_tensor(rng, &[k, d], 1.0)),
                ("beta".to_string(), random_tensor(rng, &[1, 1], 0.5)),
            ];
            absorb(checker(0).run(rng, &params, move |tape, ids| {
                let s = guide_scores(tape, ids[1], ids[2], mode)?;
                let g = apply_guide(tape, ids[0], s, ids[3])?;
                ce_loss(tape, g, &targets)
            })?);
        }
        "dec" => {
            let cfg = suite_config(rng);
            let model = init_model(&cfg);
            let dict = build_dictionary(cfg.k)?;
            let sample = gen_sample(rng.next_u64(), cfg.n_a, cfg.d, &dict, true)?;
            let caption = sample.caption.clone();
            let proto = model.decoder.clone();
            let mut named = Vec::new();
            proto.collect("decoder", &mut named);
            let mut params: Vec<(String, Tensor)> = named
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            params.push(("z_a".to_string(), random_tensor(rng, &[cfg.n_g, cfg.d_llm], 0.5)));
            absorb(checker(2).run(rng, &params, move |tape, ids| {
                let mut it = ids[..ids.len() - 1].iter().copied();
                let bound = proto.map(&mut |_t: &Tensor| it.next().unwrap());
                let logits = crate::decoder::decoder_logits(
                    tape,
                    ids[ids.len() - 1],
                    &[3],
                    &caption,
                    &bound,
                )?;
                ce_loss(tape, logits, &caption)
            })?);
        }
        "total" => {
            let mut cfg = suite_config(rng);
            cfg.align_text_grad = true;
            cfg.sigma_policy = BandwidthPolicy::Fixed(rng.uniform(0.8, 1.6));
            let model = init_model(&cfg);
            let dict = build_dictionary(cfg.k)?;
            let samples: Vec<SyntheticSample> = split_seeds(rng.next_u64(), "probe", 2)
                .into_iter()
                .map(|s| gen_sample(s, cfg.n_a, cfg.d, &dict, true))
                .collect::<Result<_>>()?;
            let mut params: Vec<(String, Tensor)> = model
                .collect()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect();
            params.last_mut().unwrap().1 = random_tensor(rng, &[1, 1], 0.3);
            let proto = model.clone();
            absorb(checker(1).run(rng, &params, move |tape, ids| {
                let mut it = ids.iter().copied();
                let bound = proto.map(&mut |_t: &Tensor| it.next().unwrap());
                let refs: Vec<&SyntheticSample> = samples.iter().collect();
                let out = batch_loss(tape, &bound, &refs, &[3], &cfg)?;
                Ok(out.total)
            })?);
        }
        "adapter" => {
            let dims = AdapterDims {
                d: 8,
                d_llm: 4 + 4 * rng.below(2),
                n_s: 1 + rng.below(3),
                n_t: 1 + rng.below(3),
                n_g: 1 + rng.below(3),
                heads: [1, 2][rng.below(2)],
                d_head: 4,
            };
            let n_a = 2 + rng.below(6);
            let proto = init_adapter(rng, &dims);
            let mut params = vec![("h_a".to_string(), random_tensor(rng, &[n_a, dims.d], 0.8))];
            let mut flat = Vec::new();
            proto.collect("adapter", &mut flat);
            for (name, t) in &flat {
                params.push((name.clone(), (*t).clone()));
            }
            absorb(checker(per_tensor).run(rng, &params, move |tape, ids| {
                let mut it = ids[1..].iter().copied();
                let bound = proto.map(&mut |_t: &Tensor| it.next().unwrap());
                let z = adapter_forward(tape, ids[0], &bound)?;
                let sq = tape.mul(z, z)?;
                Ok(tape.sum_all(sq))
            })?);
        }
        other => panic!("unknown suite loss {other}"),
    }
    Ok(SuiteEntry {
        name,
        max_rel_err: max_rel,
        probes,
        ok: max_rel <= REL_TOL,
        worst,
    })
}

/// Small random dims for model-level checks, kept tiny so repeated FD
/// probing stays fast.
fn suite_config(rng: &mut Rng) -> RunConfig {
    RunConfig {
        n_a: 4 + rng.below(4),
        d: 8,
        d_llm: 8,
        n_s: 1 + rng.below(2),
        n_t: 1 + rng.below(2),
        n_g: 2 + rng.below(2),
        heads: 2,
        d_head: 4,
        k: 36,
        seed: rng.next_u64(),
        ..RunConfig::default()
    }
}

/// Run `repeats` random configurations of each requested loss; `module`
/// filters by name. Every entry must satisfy the shared tolerance.
pub fn gradient_suite(
    seed: u64,
    repeats: usize,
    module: Option<&str>,
) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::substream(seed, "gradsuite");
    let mut out = Vec::new();
    for name in SUITE_LOSSES {
        if let Some(m) = module {
            if m != name {
                continue;
            }
        }
        let mut worst: Option<SuiteEntry> = None;
        for _ in 0..repeats {
            let e = check_one(name, &mut rng, 2)?;
            worst = Some(match worst {
                None => e,
                Some(w) => {
                    if e.max_rel_err > w.max_rel_err {
                        SuiteEntry {
                            probes: w.probes + e.probes,
                            ..e
                        }
                    } else {
                        SuiteEntry {
                            probes: w.probes + e.probes,
                            ..w
                        }
                    }
                }
            });
        }
        if let Some(w) = worst {
            out.push(w);
        }
    }
    Ok(out)
}

// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_runs_every_loss_once() {
        let entries = gradient_suite(123, 1, None).unwrap();
        assert_eq!(entries.len(), SUITE_LOSSES.len());
        for e in &entries {
            assert!(e.ok, "{} max rel {}", e.name, e.max_rel_err);
            assert!(e.probes > 0);
        }
    }

    #[test]
    fn module_filter_selects_one() {
        let entries = gradient_suite(124, 1, Some("nce")).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].name, "nce");
        assert!(entries[0].ok);
    }
}
