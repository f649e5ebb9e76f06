//! Flat `key = value` run configuration. Unknown keys are errors so typos
//! fail loudly instead of silently running the defaults.

use crate::align::BandwidthPolicy;
use crate::decoder::GuideMode;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // dims
    pub n_a: usize,
    pub d: usize,
    pub d_llm: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub n_g: usize,
    pub heads: usize,
    pub d_head: usize,
    pub k: usize,
    // loss weights
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub sigma_policy: BandwidthPolicy,
    pub sigma_floor: f64,
    // guide
    pub guide_mode: GuideMode,
    pub guide_enabled: bool,
    pub guide_stop_grad: bool,
    /// Let alignment and guide gradients flow into the token embeddings.
    /// Off by default: the text side acts as a fixed target, as when the
    /// embeddings belong to a frozen language model.
    pub align_text_grad: bool,
    // optimizer
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub cosine_schedule: bool,
    pub epochs: usize,
    pub batch_size: usize,
    // dataset
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    pub data_noise: bool,
    // ablation switches
    pub ablate_tsa: bool,
    pub ablate_cs: bool,
    pub ablate_cma: bool,
    pub ablate_tg: bool,
    pub out_dir: String,
}

impl Default for RunConfig {
    /// Desk-scale defaults: trains in minutes on one CPU core.
    fn default() -> Self {
        RunConfig {
            n_a: 24,
            d: 32,
            d_llm: 32,
            n_s: 4,
            n_t: 4,
            n_g: 8,
            heads: 2,
            d_head: 16,
            k: 64,
            alpha1: 1.0,
            // Token-level CS at full weight fights the decoder over token
            // geometry; sensitivity sweeps put the accuracy optimum here.
            alpha2: 0.15,
            alpha3: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.07,
            sigma_policy: BandwidthPolicy::Median,
            sigma_floor: 1e-3,
            guide_mode: GuideMode::SquaredL2,
            guide_enabled: true,
            guide_stop_grad: false,
            align_text_grad: false,
            lr: 3e-3,
            weight_decay: 1e-6,
            warmup_epochs: 2,
            cosine_schedule: true,
            epochs: 125,
            batch_size: 16,
            seed: 42,
            train_size: 256,
            val_size: 64,
            data_noise: true,
            ablate_tsa: false,
            ablate_cs: false,
            ablate_cma: false,
            ablate_tg: false,
            out_dir: "out".to_string(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    /// Parse `key = value` lines over the defaults. `#` starts a comment,
    /// blank lines are skipped, unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            c.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_a" => self.n_a = parse_num(key, v)?,
            "d" => self.d = parse_num(key, v)?,
            "d_llm" => self.d_llm = parse_num(key, v)?,
            "n_s" => self.n_s = parse_num(key, v)?,
            "n_t" => self.n_t = parse_num(key, v)?,
            "n_g" => self.n_g = parse_num(key, v)?,
            "h" => self.heads = parse_num(key, v)?,
            "d_h" => self.d_head = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "alpha1" => self.alpha1 = parse_num(key, v)?,
            "alpha2" => self.alpha2 = parse_num(key, v)?,
            "alpha3" => self.alpha3 = parse_num(key, v)?,
            "lambda1" => self.lambda1 = parse_num(key, v)?,
            "lambda2" => self.lambda2 = parse_num(key, v)?,
            "lambda3" => self.lambda3 = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "sigma_policy" => {
                self.sigma_policy = if v == "median" {
                    BandwidthPolicy::Median
                } else if let Some(s) = v.strip_prefix("fixed:") {
                    BandwidthPolicy::Fixed(parse_num(key, s)?)
                } else {
                    return Err(Error::Config(format!(
                        "{key}: expected median or fixed:<value>, got {v:?}"
                    )));
                }
            }
            "sigma_floor" => self.sigma_floor = parse_num(key, v)?,
            "guide_mode" => {
                self.guide_mode = match v {
                    "squared_l2" => GuideMode::SquaredL2,
                    "l1" => GuideMode::L1,
                    "cosine" => GuideMode::Cosine,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected squared_l2, l1 or cosine, got {v:?}"
                        )))
                    }
                }
            }
            "guide_enabled" => self.guide_enabled = parse_bool(key, v)?,
            "guide_stop_grad" => self.guide_stop_grad = parse_bool(key, v)?,
            "align_text_grad" => self.align_text_grad = parse_bool(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(key, v)?,
            "cosine_schedule" => self.cosine_schedule = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "train_size" => self.train_size = parse_num(key, v)?,
            "val_size" => self.val_size = parse_num(key, v)?,
            "data_noise" => self.data_noise = parse_bool(key, v)?,
            "ablate_tsa" => self.ablate_tsa = parse_bool(key, v)?,
            "ablate_cs" => self.ablate_cs = parse_bool(key, v)?,
            "ablate_cma" => self.ablate_cma = parse_bool(key, v)?,
            "ablate_tg" => self.ablate_tg = parse_bool(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("n_a", self.n_a),
            ("d", self.d),
            ("d_llm", self.d_llm),
            ("n_s", self.n_s),
            ("n_t", self.n_t),
            ("n_g", self.n_g),
            ("h", self.heads),
            ("d_h", self.d_head),
            ("k", self.k),
            ("epochs", self.epochs),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.d % 4 != 0 {
            return Err(Error::Config("d must be divisible by 4".into()));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config("d must be even".into()));
        }
        if let BandwidthPolicy::Fixed(s) = self.sigma_policy {
            if s <= 0.0 {
                return Err(Error::Config("fixed sigma must be positive".into()));
            }
        }
        for (name, w) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if w < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Deterministic serialization; also the hash input.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let policy = match self.sigma_policy {
            BandwidthPolicy::Median => "median".to_string(),
            BandwidthPolicy::Fixed(v) => format!("fixed:{v}"),
        };
        let mode = match self.guide_mode {
            GuideMode::SquaredL2 => "squared_l2",
            GuideMode::L1 => "l1",
            GuideMode::Cosine => "cosine",
        };
        let _ = write!(
            s,
            "n_a={}\nd={}\nd_llm={}\nn_s={}\nn_t={}\nn_g={}\nh={}\nd_h={}\nk={}\n\
             alpha1={}\nalpha2={}\nalpha3={}\nlambda1={}\nlambda2={}\nlambda3={}\ntau={}\n\
             sigma_policy={}\nsigma_floor={}\nguide_mode={}\nguide_enabled={}\nguide_stop_grad={}\n\
             align_text_grad={}\n\
             lr={}\nweight_decay={}\nwarmup_epochs={}\ncosine_schedule={}\nepochs={}\nbatch_size={}\n\
             seed={}\ntrain_size={}\nval_size={}\ndata_noise={}\n\
             ablate_tsa={}\nablate_cs={}\nablate_cma={}\nablate_tg={}\nout_dir={}\n",
            self.n_a, self.d, self.d_llm, self.n_s, self.n_t, self.n_g, self.heads, self.d_head,
            self.k, self.alpha1, self.alpha2, self.alpha3, self.lambda1, self.lambda2,
            self.lambda3, self.tau, policy, self.sigma_floor, mode, self.guide_enabled,
            self.guide_stop_grad, self.align_text_grad, self.lr, self.weight_decay, self.warmup_epochs,
            self.cosine_schedule, self.epochs, self.batch_size, self.seed, self.train_size,
            self.val_size, self.data_noise, self.ablate_tsa, self.ablate_cs, self.ablate_cma,
            self.ablate_tg, self.out_dir
        );
        s
    }

    /// FNV-1a over the canonical serialization.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Apply a named ablation switch (CLI `--ablate` values).
    pub fn ablate(&mut self, which: &str) -> Result<()> {
        match which {
            "tsa" => self.ablate_tsa = true,
            "cs" => self.ablate_cs = true,
            "cma" => self.ablate_cma = true,
            "tg" => self.ablate_tg = true,
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation {which:?} (expected tsa, cs, cma or tg)"
                )))
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_size.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }
}

// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_give_two_thousand_steps() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.total_steps(), 2000);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let c = RunConfig::parse(
            "# comment line\n\
             d = 16   # trailing comment\n\
             \n\
             sigma_policy = fixed:1.25\n\
             guide_mode = l1\n\
             cosine_schedule = false\n\
             seed = 7\n",
        )
        .unwrap();
        assert_eq!(c.d, 16);
        assert_eq!(c.sigma_policy, BandwidthPolicy::Fixed(1.25));
        assert_eq!(c.guide_mode, GuideMode::L1);
        assert!(!c.cosine_schedule);
        assert_eq!(c.seed, 7);
        assert_eq!(c.n_a, 24); // untouched default
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        assert!(RunConfig::parse("dd = 3\n").is_err());
        assert!(RunConfig::parse("d = many\n").is_err());
        assert!(RunConfig::parse("guide_enabled = yes\n").is_err());
        assert!(RunConfig::parse("sigma_policy = narrow\n").is_err());
        assert!(RunConfig::parse("just a line\n").is_err());
    }

    #[test]
    fn validation_catches_degenerate_values() {
        assert!(RunConfig::parse("tau = 0\n").is_err());
        assert!(RunConfig::parse("batch_size = 0\n").is_err());
        assert!(RunConfig::parse("n_g = 0\n").is_err());
        assert!(RunConfig::parse("lambda2 = -1\n").is_err());
        assert!(RunConfig::parse("sigma_policy = fixed:0\n").is_err());
    }

    #[test]
    fn canonical_round_trip_and_hash() {
        let mut c = RunConfig::default();
        c.ablate("tg").unwrap();
        c.lr = 1e-3;
        let re = RunConfig::parse(&c.canonical_string()).unwrap();
        assert_eq!(c, re);
        assert_eq!(c.hash(), re.hash());
        let base = RunConfig::default();
        assert_ne!(c.hash(), base.hash());
        assert!(c.ablate("decoder").is_err());
    }
}
