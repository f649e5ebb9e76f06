//! Two-stream adapter: maps a variable-length feature sequence to a fixed
//! set of N_g embeddings in the decoder space.
//!
//! The semantic stream cross-attends learned queries over the raw features
//! (a set operation, order-blind). The temporal stream first runs the
//! conv front-end and GRU stack, so ordering information survives. Fusion
//! cross-attends global queries over both streams' outputs and projects.

use crate::error::Result;
use crate::nn::{
    bigru, conv_front_end, init_bigru, init_conv_front_end, init_layer_norm, init_mha, layer_norm,
    mha, BiGruParams, ConvFrontEndParams, LayerNormParams, MhaParams,
};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdapterDims {
    pub d: usize,
    pub d_llm: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub n_g: usize,
    pub heads: usize,
    pub d_head: usize,
}

#[derive(Debug, Clone)]
pub struct AdapterParams<T> {
    pub q_sem: T,
    pub q_tmp: T,
    pub q_glob: T,
    pub sem_attn: MhaParams<T>,
    pub tmp_attn: MhaParams<T>,
    pub fuse_attn: MhaParams<T>,
    pub conv: ConvFrontEndParams<T>,
    pub gru: BiGruParams<T>,
    pub sem_ln: LayerNormParams<T>,
    pub tmp_ln: LayerNormParams<T>,
    pub fuse_ln: LayerNormParams<T>,
    pub w_proj: T,
}

impl<T> AdapterParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AdapterParams<U> {
        AdapterParams {
            q_sem: f(&self.q_sem),
            q_tmp: f(&self.q_tmp),
            q_glob: f(&self.q_glob),
            sem_attn: self.sem_attn.map(f),
            tmp_attn: self.tmp_attn.map(f),
            fuse_attn: self.fuse_attn.map(f),
            conv: self.conv.map(f),
            gru: self.gru.map(f),
            sem_ln: self.sem_ln.map(f),
            tmp_ln: self.tmp_ln.map(f),
            fuse_ln: self.fuse_ln.map(f),
            w_proj: f(&self.w_proj),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.q_sem"), &self.q_sem));
        out.push((format!("{prefix}.q_tmp"), &self.q_tmp));
        out.push((format!("{prefix}.q_glob"), &self.q_glob));
        self.sem_attn.collect(&format!("{prefix}.sem_attn"), out);
        self.tmp_attn.collect(&format!("{prefix}.tmp_attn"), out);
        self.fuse_attn.collect(&format!("{prefix}.fuse_attn"), out);
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.gru.collect(&format!("{prefix}.gru"), out);
        self.sem_ln.collect(&format!("{prefix}.sem_ln"), out);
        self.tmp_ln.collect(&format!("{prefix}.tmp_ln"), out);
        self.fuse_ln.collect(&format!("{prefix}.fuse_ln"), out);
        out.push((format!("{prefix}.w_proj"), &self.w_proj));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.q_sem"), &mut self.q_sem));
        out.push((format!("{prefix}.q_tmp"), &mut self.q_tmp));
        out.push((format!("{prefix}.q_glob"), &mut self.q_glob));
        self.sem_attn.collect_mut(&format!("{prefix}.sem_attn"), out);
        self.tmp_attn.collect_mut(&format!("{prefix}.tmp_attn"), out);
        self.fuse_attn.collect_mut(&format!("{prefix}.fuse_attn"), out);
        self.conv.collect_mut(&format!("{prefix}.conv"), out);
        self.gru.collect_mut(&format!("{prefix}.gru"), out);
        self.sem_ln.collect_mut(&format!("{prefix}.sem_ln"), out);
        self.tmp_ln.collect_mut(&format!("{prefix}.tmp_ln"), out);
        self.fuse_ln.collect_mut(&format!("{prefix}.fuse_ln"), out);
        out.push((format!("{prefix}.w_proj"), &mut self.w_proj));
    }
}

/// Queries start near zero (std 0.02); projections use 1/sqrt(fan_in) scaling.
pub fn init_adapter(rng: &mut Rng, dims: &AdapterDims) -> AdapterParams<Tensor> {
    let d = dims.d;
    let query = |rng: &mut Rng, n: usize| {
        Tensor::new(vec![n, d], rng.normal_vec(n * d, 0.02)).expect("query init")
    };
    AdapterParams {
        q_sem: query(rng, dims.n_s),
        q_tmp: query(rng, dims.n_t),
        q_glob: query(rng, dims.n_g),
        sem_attn: init_mha(rng, d, dims.heads, dims.d_head, d),
        tmp_attn: init_mha(rng, d, dims.heads, dims.d_head, d),
        fuse_attn: init_mha(rng, d, dims.heads, dims.d_head, d),
        conv: init_conv_front_end(rng, d),
        gru: init_bigru(rng, d, d / 2, d),
        sem_ln: init_layer_norm(d),
        tmp_ln: init_layer_norm(d),
        fuse_ln: init_layer_norm(d),
        w_proj: Tensor::new(
            vec![d, dims.d_llm],
            rng.normal_vec(d * dims.d_llm, 1.0 / (d as f64).sqrt()),
        )
        .expect("proj init"),
    }
}

/// Semantic stream before its LayerNorm: MHA(Q_s, h_a) + Q_s.
pub fn semantic_attend(tape: &mut Tape, h_a: NodeId, p: &AdapterParams<NodeId>) -> Result<NodeId> {
    let att = mha(tape, p.q_sem, h_a, &p.sem_attn, None)?;
    tape.add(att, p.q_sem)
}

pub fn semantic_forward(tape: &mut Tape, h_a: NodeId, p: &AdapterParams<NodeId>) -> Result<NodeId> {
    let pre = semantic_attend(tape, h_a, p)?;
    layer_norm(tape, pre, &p.sem_ln)
}

/// Temporal stream before its LayerNorm: MHA(Q_t, GRU(Conv(h_a))) + Q_t.
pub fn temporal_attend(tape: &mut Tape, h_a: NodeId, p: &AdapterParams<NodeId>) -> Result<NodeId> {
    let feats = conv_front_end(tape, h_a, &p.conv)?;
    let enc = bigru(tape, feats, &p.gru)?;
    let att = mha(tape, p.q_tmp, enc, &p.tmp_attn, None)?;
    tape.add(att, p.q_tmp)
}

pub fn temporal_forward(tape: &mut Tape, h_a: NodeId, p: &AdapterParams<NodeId>) -> Result<NodeId> {
    let pre = temporal_attend(tape, h_a, p)?;
    layer_norm(tape, pre, &p.tmp_ln)
}

/// Global fusion: attend Q_g over the concatenated streams, then project
/// into the decoder embedding space.
pub fn fuse_project(
    tape: &mut Tape,
    h_sem: NodeId,
    h_tmp: NodeId,
    p: &AdapterParams<NodeId>,
) -> Result<NodeId> {
    let cat = tape.concat_rows(&[h_sem, h_tmp])?;
    let att = mha(tape, p.q_glob, cat, &p.fuse_attn, None)?;
    let res = tape.add(att, p.q_glob)?;
    let normed = layer_norm(tape, res, &p.fuse_ln)?;
    tape.matmul(normed, p.w_proj)
}

/// Full adapter: h_a [N_a, D] -> z_a [N_g, D_llm].
pub fn adapter_forward(tape: &mut Tape, h_a: NodeId, p: &AdapterParams<NodeId>) -> Result<NodeId> {
    let hs = semantic_forward(tape, h_a, p)?;
    let ht = temporal_forward(tape, h_a, p)?;
    fuse_project(tape, hs, ht, p)
}

// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{random_tensor, GradCheck, REL_TOL};

    fn dims_small() -> AdapterDims {
        AdapterDims {
            d: 8,
            d_llm: 8,
            n_s: 2,
            n_t: 2,
            n_g: 3,
            heads: 2,
            d_head: 4,
        }
    }

    fn bind(tape: &mut Tape, p: &AdapterParams<Tensor>) -> AdapterParams<NodeId> {
        p.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    fn run_forward(p: &AdapterParams<Tensor>, h_a: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.leaf(h_a.clone());
        let bound = bind(&mut tape, p);
        let z = adapter_forward(&mut tape, x, &bound).unwrap();
        tape.value(z).clone()
    }

    #[test]
    fn output_shape_fixed_across_lengths() {
        let mut rng = Rng::new(31);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims);
        for n_a in [1usize, 4, 24, 64] {
            let h_a = random_tensor(&mut rng, &[n_a, dims.d], 1.0);
            let z = run_forward(&p, &h_a);
            assert_eq!(z.shape(), &[dims.n_g, dims.d_llm], "N_a={n_a}");
            assert!(z.all_finite());
        }
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = Rng::new(32);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims);
        let h_a = random_tensor(&mut rng, &[6, dims.d], 1.0);
        let z1 = run_forward(&p, &h_a);
        let z2 = run_forward(&p, &h_a);
        assert_eq!(z1.data(), z2.data());
    }

    fn permute_rows(x: &Tensor, shift: usize) -> Tensor {
        let n = x.rows();
        let mut data = Vec::with_capacity(x.numel());
        for i in 0..n {
            data.extend_from_slice(x.row((i + shift) % n));
        }
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    #[test]
    fn semantic_stream_permutation_invariant() {
        let mut rng = Rng::new(33);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims);
        let h_a = random_tensor(&mut rng, &[7, dims.d], 1.0);

        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let bound = bind(&mut tape, &p);
            let s = semantic_forward(&mut tape, xid, &bound).unwrap();
            tape.value(s).clone()
        };
        let base = run(&h_a);
        let perm = run(&permute_rows(&h_a, 3));
        assert!(base.max_abs_diff(&perm) <= 1e-9);
    }

    #[test]
    fn temporal_stream_order_sensitive() {
        let mut rng = Rng::new(34);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims);
        let h_a = random_tensor(&mut rng, &[7, dims.d], 1.0);

        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let bound = bind(&mut tape, &p);
            let s = temporal_forward(&mut tape, xid, &bound).unwrap();
            tape.value(s).clone()
        };
        let base = run(&h_a);
        let perm = run(&permute_rows(&h_a, 3));
        assert!(base.max_abs_diff(&perm) > 1e-6);
    }

    #[test]
    fn single_row_semantic_collapses_to_value_plus_query() {
        // identity W_V and W_O make attention over one key return that row
        let mut rng = Rng::new(35);
        let dims = AdapterDims {
            d: 4,
            d_llm: 4,
            n_s: 3,
            n_t: 2,
            n_g: 2,
            heads: 1,
            d_head: 4,
        };
        let mut p = init_adapter(&mut rng, &dims);
        let mut eye = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        p.sem_attn.w_v = eye.clone();
        p.sem_attn.w_o = Some(eye);

        let r = random_tensor(&mut rng, &[1, 4], 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(r.clone());
        let bound = bind(&mut tape, &p);
        let pre = semantic_attend(&mut tape, x, &bound).unwrap();
        for i in 0..dims.n_s {
            let got = tape.value(pre).row(i);
            for (j, g) in got.iter().enumerate() {
                let want = r.data()[j] + p.q_sem.get2(i, j);
                assert!((g - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_temporal_pre_ln_is_query() {
        let mut rng = Rng::new(36);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims); // biases init to zero
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![5, dims.d]));
        let bound = bind(&mut tape, &p);
        let pre = temporal_attend(&mut tape, x, &bound).unwrap();
        assert!(tape.value(pre).max_abs_diff(&p.q_tmp) < 1e-12);
    }

    #[test]
    fn fusion_ignores_stream_concat_order() {
        let mut rng = Rng::new(37);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims);
        let hs = random_tensor(&mut rng, &[dims.n_s, dims.d], 1.0);
        let ht = random_tensor(&mut rng, &[dims.n_t, dims.d], 1.0);

        let run = |a: &Tensor, b: &Tensor| {
            let mut tape = Tape::new();
            let aid = tape.leaf(a.clone());
            let bid = tape.leaf(b.clone());
            let bound = bind(&mut tape, &p);
            let z = fuse_project(&mut tape, aid, bid, &bound).unwrap();
            tape.value(z).clone()
        };
        let fwd = run(&hs, &ht);
        let swapped = run(&ht, &hs);
        assert!(fwd.max_abs_diff(&swapped) <= 1e-9);
    }

    #[test]
    fn zero_projection_annihilates() {
        let mut rng = Rng::new(38);
        let dims = dims_small();
        let mut p = init_adapter(&mut rng, &dims);
        p.w_proj = Tensor::zeros(vec![dims.d, dims.d_llm]);
        let h_a = random_tensor(&mut rng, &[4, dims.d], 1.0);
        let z = run_forward(&p, &h_a);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_stack_gradcheck() {
        let mut rng = Rng::new(39);
        let dims = AdapterDims {
            d: 8,
            d_llm: 8,
            n_s: 2,
            n_t: 2,
            n_g: 2,
            heads: 2,
            d_head: 4,
        };
        let proto = init_adapter(&mut rng, &dims);
        let mut params = vec![("h_a".to_string(), random_tensor(&mut rng, &[6, 8], 0.8))];
        let mut flat = Vec::new();
        proto.collect("adapter", &mut flat);
        for (name, t) in &flat {
            params.push((name.clone(), (*t).clone()));
        }
        let rep = GradCheck::sampled(3)
            .run(&mut rng, &params, move |tape, ids| {
                let mut it = ids[1..].iter().copied();
                let bound = proto.map(&mut |_t: &Tensor| it.next().unwrap());
                let z = adapter_forward(tape, ids[0], &bound)?;
                let sq = tape.mul(z, z)?;
                Ok(tape.sum_all(sq))
            })
            .unwrap();
        assert!(rep.ok(REL_TOL), "max rel {}", rep.max_rel_err);
    }

    #[test]
    fn bind_order_matches_collect_order() {
        let mut rng = Rng::new(40);
        let dims = dims_small();
        let p = init_adapter(&mut rng, &dims);
        let mut via_map = Vec::new();
        p.map(&mut |t: &Tensor| via_map.push(t.clone()));
        let mut via_collect = Vec::new();
        p.collect("a", &mut via_collect);
        assert_eq!(via_map.len(), via_collect.len());
        for (m, (_, c)) in via_map.iter().zip(&via_collect) {
            assert_eq!(m.data(), c.data(), "map and collect must walk fields identically");
        }
    }
}
