//! Neural building blocks: multi-head attention, layer norm wrappers, the
//! multi-scale conv front-end, and a two-direction GRU stack.
//!
//! Parameter structs are generic over their carrier so the same shape
//! definition serves both storage (`Tensor`) and tape-bound (`NodeId`) forms.
//! Every struct walks its fields in one canonical order shared by `map`,
//! `collect`, and `collect_mut`; the optimizer and checkpoint formats rely on
//! that order, and a model-level test pins it.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── multi-head attention ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MhaParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// Head-mixing projection; absent in the bare single-head form.
    pub w_o: Option<T>,
    pub heads: usize,
}

impl<T> MhaParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MhaParams<U> {
        MhaParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: self.w_o.as_ref().map(|t| f(t)),
            heads: self.heads,
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w_q"), &self.w_q));
        out.push((format!("{prefix}.w_k"), &self.w_k));
        out.push((format!("{prefix}.w_v"), &self.w_v));
        if let Some(w) = &self.w_o {
            out.push((format!("{prefix}.w_o"), w));
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w_q"), &mut self.w_q));
        out.push((format!("{prefix}.w_k"), &mut self.w_k));
        out.push((format!("{prefix}.w_v"), &mut self.w_v));
        if let Some(w) = &mut self.w_o {
            out.push((format!("{prefix}.w_o"), w));
        }
    }
}

pub fn init_mha(rng: &mut Rng, d_in: usize, heads: usize, d_head: usize, d_out: usize) -> MhaParams<Tensor> {
    let inner = heads * d_head;
    let proj = |rng: &mut Rng, rows: usize, cols: usize| {
        Tensor::new(vec![rows, cols], rng.normal_vec(rows * cols, 1.0 / (rows as f64).sqrt()))
            .expect("mha init shape")
    };
    MhaParams {
        w_q: proj(rng, d_in, inner),
        w_k: proj(rng, d_in, inner),
        w_v: proj(rng, d_in, inner),
        w_o: Some(proj(rng, inner, d_out)),
        heads,
    }
}

/// Blocked-position mask for causal self-attention: true above the diagonal.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = true;
        }
    }
    m
}

/// Scaled dot-product attention of `q` rows over `kv` rows, heads side by
/// side. Masked positions (true) score -inf before the softmax.
pub fn mha(
    tape: &mut Tape,
    q: NodeId,
    kv: NodeId,
    p: &MhaParams<NodeId>,
    mask: Option<&[bool]>,
) -> Result<NodeId> {
    let inner = tape.value(p.w_q).cols();
    if inner % p.heads != 0 {
        return Err(Error::InvalidShape {
            op: "mha",
            shape: vec![inner],
            reason: format!("projection width not divisible by {} heads", p.heads),
        });
    }
    let d_head = inner / p.heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let qp = tape.matmul(q, p.w_q)?;
    let kp = tape.matmul(kv, p.w_k)?;
    let vp = tape.matmul(kv, p.w_v)?;

    let mut head_outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let (qh, kh, vh) = if p.heads == 1 {
            (qp, kp, vp)
        } else {
            (
                tape.slice_cols(qp, lo, hi)?,
                tape.slice_cols(kp, lo, hi)?,
                tape.slice_cols(vp, lo, hi)?,
            )
        };
        let kt = tape.transpose(kh);
        let raw = tape.matmul(qh, kt)?;
        let mut scores = tape.mul_scalar(raw, scale);
        if let Some(m) = mask {
            scores = tape.masked_fill(scores, m, f64::NEG_INFINITY)?;
        }
        let attn = tape.softmax(scores);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    match p.w_o {
        Some(w_o) => tape.matmul(merged, w_o),
        None => Ok(merged),
    }
}

// ── layer norm ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gain: T,
    pub bias: T,
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.gain"), &self.gain));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.gain"), &mut self.gain));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

pub fn init_layer_norm(d: usize) -> LayerNormParams<Tensor> {
    LayerNormParams {
        gain: Tensor::new(vec![1, d], vec![1.0; d]).expect("ln init"),
        bias: Tensor::zeros(vec![1, d]),
    }
}

pub fn layer_norm(tape: &mut Tape, x: NodeId, p: &LayerNormParams<NodeId>) -> Result<NodeId> {
    tape.layer_norm(x, p.gain, p.bias)
}

// ── multi-scale conv front-end ───────────────────────────────────────────────

pub const CONV_WIDTHS: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone)]
pub struct ConvFrontEndParams<T> {
    /// One (kernel, bias) pair per width in CONV_WIDTHS order.
    pub kernels: Vec<(T, T)>,
    pub w_merge: T,
    pub b_merge: T,
    pub ln: LayerNormParams<T>,
}

impl<T> ConvFrontEndParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ConvFrontEndParams<U> {
        ConvFrontEndParams {
            kernels: self.kernels.iter().map(|(w, b)| (f(w), f(b))).collect(),
            w_merge: f(&self.w_merge),
            b_merge: f(&self.b_merge),
            ln: self.ln.map(f),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for ((w, b), width) in self.kernels.iter().zip(CONV_WIDTHS) {
            out.push((format!("{prefix}.w{width}"), w));
            out.push((format!("{prefix}.b{width}"), b));
        }
        out.push((format!("{prefix}.w_merge"), &self.w_merge));
        out.push((format!("{prefix}.b_merge"), &self.b_merge));
        self.ln.collect(&format!("{prefix}.ln"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        for ((w, b), width) in self.kernels.iter_mut().zip(CONV_WIDTHS) {
            out.push((format!("{prefix}.w{width}"), w));
            out.push((format!("{prefix}.b{width}"), b));
        }
        out.push((format!("{prefix}.w_merge"), &mut self.w_merge));
        out.push((format!("{prefix}.b_merge"), &mut self.b_merge));
        self.ln.collect_mut(&format!("{prefix}.ln"), out);
    }
}

/// Per-scale channel count; 3 scales concatenate to 3D/4 before the merge.
pub fn conv_channels(d: usize) -> usize {
    (d / 4).max(1)
}

pub fn init_conv_front_end(rng: &mut Rng, d: usize) -> ConvFrontEndParams<Tensor> {
    let c_out = conv_channels(d);
    let kernels = CONV_WIDTHS
        .iter()
        .map(|&w| {
            let rows = w * d;
            let kern = Tensor::new(
                vec![rows, c_out],
                rng.normal_vec(rows * c_out, 1.0 / (rows as f64).sqrt()),
            )
            .expect("conv init");
            (kern, Tensor::zeros(vec![1, c_out]))
        })
        .collect();
    let merged = 3 * c_out;
    ConvFrontEndParams {
        kernels,
        w_merge: Tensor::new(
            vec![merged, d],
            rng.normal_vec(merged * d, 1.0 / (merged as f64).sqrt()),
        )
        .expect("conv merge init"),
        b_merge: Tensor::zeros(vec![1, d]),
        ln: init_layer_norm(d),
    }
}

/// Convolutions + channel concat + merge projection, before LN/GELU.
pub fn conv_merge(tape: &mut Tape, x: NodeId, p: &ConvFrontEndParams<NodeId>) -> Result<NodeId> {
    let mut branches = Vec::with_capacity(p.kernels.len());
    for ((w, b), width) in p.kernels.iter().zip(CONV_WIDTHS) {
        let conv = tape.conv1d_same(x, *w, width)?;
        branches.push(tape.add_row(conv, *b)?);
    }
    let cat = tape.concat_cols(&branches)?;
    let proj = tape.matmul(cat, p.w_merge)?;
    tape.add_row(proj, p.b_merge)
}

/// Full front-end: conv_merge then LayerNorm and GELU; token count preserved.
pub fn conv_front_end(tape: &mut Tape, x: NodeId, p: &ConvFrontEndParams<NodeId>) -> Result<NodeId> {
    let pre = conv_merge(tape, x, p)?;
    let normed = layer_norm(tape, pre, &p.ln)?;
    Ok(tape.gelu(normed))
}

// ── bidirectional GRU ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GruCellParams<T> {
    /// [d_in, 3H], gate order r,z,n.
    pub w_ih: T,
    /// [H, 3H].
    pub w_hh: T,
    pub b_ih: T,
    pub b_hh: T,
}

impl<T> GruCellParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GruCellParams<U> {
        GruCellParams {
            w_ih: f(&self.w_ih),
            w_hh: f(&self.w_hh),
            b_ih: f(&self.b_ih),
            b_hh: f(&self.b_hh),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.w_ih"), &self.w_ih));
        out.push((format!("{prefix}.w_hh"), &self.w_hh));
        out.push((format!("{prefix}.b_ih"), &self.b_ih));
        out.push((format!("{prefix}.b_hh"), &self.b_hh));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.w_ih"), &mut self.w_ih));
        out.push((format!("{prefix}.w_hh"), &mut self.w_hh));
        out.push((format!("{prefix}.b_ih"), &mut self.b_ih));
        out.push((format!("{prefix}.b_hh"), &mut self.b_hh));
    }
}

#[derive(Debug, Clone)]
pub struct BiGruParams<T> {
    pub layers: Vec<(GruCellParams<T>, GruCellParams<T>)>,
    /// [2H, d_out], applied after the last layer. No bias.
    pub w_proj: T,
}

impl<T> BiGruParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BiGruParams<U> {
        BiGruParams {
            layers: self
                .layers
                .iter()
                .map(|(fw, bw)| (fw.map(f), bw.map(f)))
                .collect(),
            w_proj: f(&self.w_proj),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        for (i, (fw, bw)) in self.layers.iter().enumerate() {
            fw.collect(&format!("{prefix}.l{i}.fwd"), out);
            bw.collect(&format!("{prefix}.l{i}.bwd"), out);
        }
        out.push((format!("{prefix}.w_proj"), &self.w_proj));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        for (i, (fw, bw)) in self.layers.iter_mut().enumerate() {
            fw.collect_mut(&format!("{prefix}.l{i}.fwd"), out);
            bw.collect_mut(&format!("{prefix}.l{i}.bwd"), out);
        }
        out.push((format!("{prefix}.w_proj"), &mut self.w_proj));
    }
}

fn init_gru_cell(rng: &mut Rng, d_in: usize, hidden: usize) -> GruCellParams<Tensor> {
    GruCellParams {
        w_ih: Tensor::new(
            vec![d_in, 3 * hidden],
            rng.normal_vec(d_in * 3 * hidden, 1.0 / (d_in as f64).sqrt()),
        )
        .expect("gru init"),
        w_hh: Tensor::new(
            vec![hidden, 3 * hidden],
            rng.normal_vec(hidden * 3 * hidden, 1.0 / (hidden as f64).sqrt()),
        )
        .expect("gru init"),
        b_ih: Tensor::zeros(vec![1, 3 * hidden]),
        b_hh: Tensor::zeros(vec![1, 3 * hidden]),
    }
}

/// Two stacked bidirectional layers; layer 2 consumes the 2H-wide concat.
pub fn init_bigru(rng: &mut Rng, d_in: usize, hidden: usize, d_out: usize) -> BiGruParams<Tensor> {
    let layers = vec![
        (init_gru_cell(rng, d_in, hidden), init_gru_cell(rng, d_in, hidden)),
        (
            init_gru_cell(rng, 2 * hidden, hidden),
            init_gru_cell(rng, 2 * hidden, hidden),
        ),
    ];
    BiGruParams {
        layers,
        w_proj: Tensor::new(
            vec![2 * hidden, d_out],
            rng.normal_vec(2 * hidden * d_out, 1.0 / ((2 * hidden) as f64).sqrt()),
        )
        .expect("gru proj init"),
    }
}

/// One direction of one layer. Input projections for the whole sequence are
/// hoisted into a single matmul; the recurrence then works on row slices.
fn gru_direction(
    tape: &mut Tape,
    x: NodeId,
    cell: &GruCellParams<NodeId>,
    reverse: bool,
) -> Result<NodeId> {
    let n = tape.value(x).rows();
    let hidden = tape.value(cell.w_hh).rows();

    let xp = tape.matmul(x, cell.w_ih)?;
    let xp = tape.add_row(xp, cell.b_ih)?;

    let mut h = tape.leaf(Tensor::zeros(vec![1, hidden]));
    let mut outs = vec![h; n];
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let xt = tape.slice_rows(xp, t, t + 1)?;
        let hp_raw = tape.matmul(h, cell.w_hh)?;
        let hp = tape.add(hp_raw, cell.b_hh)?;

        let xr = tape.slice_cols(xt, 0, hidden)?;
        let xz = tape.slice_cols(xt, hidden, 2 * hidden)?;
        let xn = tape.slice_cols(xt, 2 * hidden, 3 * hidden)?;
        let hr = tape.slice_cols(hp, 0, hidden)?;
        let hz = tape.slice_cols(hp, hidden, 2 * hidden)?;
        let hn = tape.slice_cols(hp, 2 * hidden, 3 * hidden)?;

        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(xz, hz)?;
        let z = tape.sigmoid(z_pre);
        let gated = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, gated)?;
        let cand = tape.tanh(n_pre);

        // h' = cand + z * (h - cand), i.e. (1-z)*cand + z*h
        let keep = tape.sub(h, cand)?;
        let zk = tape.mul(z, keep)?;
        h = tape.add(cand, zk)?;
        outs[t] = h;
    }
    tape.concat_rows(&outs)
}

/// Stacked bidirectional GRU with final projection to d_out.
pub fn bigru(tape: &mut Tape, x: NodeId, p: &BiGruParams<NodeId>) -> Result<NodeId> {
    let pre = bigru_states(tape, x, p)?;
    tape.matmul(pre, p.w_proj)
}

/// Pre-projection per-token states [N, 2H] of the last layer.
pub fn bigru_states(tape: &mut Tape, x: NodeId, p: &BiGruParams<NodeId>) -> Result<NodeId> {
    let mut cur = x;
    for (fw, bw) in &p.layers {
        let f = gru_direction(tape, cur, fw, false)?;
        let b = gru_direction(tape, cur, bw, true)?;
        cur = tape.concat_cols(&[f, b])?;
    }
    Ok(cur)
}

// ─────────────────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{random_tensor, GradCheck, REL_TOL};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], d).unwrap()
    }

    fn bind_mha(tape: &mut Tape, p: &MhaParams<Tensor>) -> MhaParams<NodeId> {
        p.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    #[test]
    fn softmax_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.70711, 0.0]));
        let s = tape.softmax(x);
        let v = tape.value(s).data();
        assert!((v[0] - 0.6698).abs() < 1e-4);
        assert!((v[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn softmax_large_values_stable() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1000.0, 0.0]));
        let s = tape.softmax(x);
        let v = tape.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-9);
        assert!(v[1].abs() < 1e-9);
    }

    #[test]
    fn mha_identity_golden() {
        // single head, identity projections, no mixing projection
        let p = MhaParams {
            w_q: eye(2),
            w_k: eye(2),
            w_v: eye(2),
            w_o: None,
            heads: 1,
        };
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[1, 2], &[1.0, 0.0]));
        let kv = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let bound = bind_mha(&mut tape, &p);
        let out = mha(&mut tape, q, kv, &bound, None).unwrap();
        let v = tape.value(out).data();
        assert!((v[0] - 0.6698).abs() < 1e-3, "{v:?}");
        assert!((v[1] - 0.3302).abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn mha_single_kv_row_collapses_to_value() {
        let mut rng = Rng::new(5);
        let p = init_mha(&mut rng, 4, 2, 2, 4);
        let mut tape = Tape::new();
        let q = tape.leaf(random_tensor(&mut rng, &[3, 4], 1.0));
        let kv = tape.leaf(random_tensor(&mut rng, &[1, 4], 1.0));
        let bound = bind_mha(&mut tape, &p);
        let out = mha(&mut tape, q, kv, &bound, None).unwrap();
        // softmax over one key is 1 for every query row
        let vp = tape.matmul(kv, bound.w_v).unwrap();
        let expect = tape.matmul(vp, bound.w_o.unwrap()).unwrap();
        for i in 0..3 {
            let got = tape.value(out).row(i);
            let want = tape.value(expect).row(0);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mha_kv_permutation_invariant() {
        let mut rng = Rng::new(6);
        let p = init_mha(&mut rng, 4, 2, 3, 4);
        let kv = random_tensor(&mut rng, &[5, 4], 1.0);
        let qv = random_tensor(&mut rng, &[2, 4], 1.0);

        let run = |kv: &Tensor| {
            let mut tape = Tape::new();
            let q = tape.leaf(qv.clone());
            let k = tape.leaf(kv.clone());
            let bound = bind_mha(&mut tape, &p);
            let out = mha(&mut tape, q, k, &bound, None).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = run(&kv);
        // rotate rows
        let mut rot = Vec::new();
        for i in 0..5 {
            rot.extend_from_slice(kv.row((i + 2) % 5));
        }
        let permuted = run(&Tensor::new(vec![5, 4], rot).unwrap());
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mha_causal_mask_blocks_future() {
        let mut rng = Rng::new(7);
        let p = init_mha(&mut rng, 4, 1, 4, 4);
        let base = random_tensor(&mut rng, &[3, 4], 1.0);
        let mut edited = base.clone();
        edited.data_mut()[2 * 4] += 1.5; // perturb row 2

        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let q = tape.leaf(x.clone());
            let bound = bind_mha(&mut tape, &p);
            let out = mha(&mut tape, q, q, &bound, Some(&causal_mask(3))).unwrap();
            tape.value(out).data().to_vec()
        };
        let a = run(&base);
        let b = run(&edited);
        // rows 0 and 1 cannot see row 2
        for i in 0..8 {
            assert_eq!(a[i], b[i]);
        }
        assert!(a[8..].iter().zip(&b[8..]).any(|(x, y)| x != y));
    }

    #[test]
    fn layer_norm_goldens() {
        let p = init_layer_norm(3);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[5.0, 5.0, 5.0]));
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let y = layer_norm(&mut tape, x, &bound).unwrap();
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-9, "constant row must normalize to zero");
        }

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, -1.0]));
        let p2 = init_layer_norm(2);
        let bound = p2.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let y = layer_norm(&mut tape, x, &bound).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_zero_gain_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let gain = tape.leaf(Tensor::zeros(vec![1, 2]));
        let bias = tape.leaf(t(&[1, 2], &[0.7, -0.3]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -0.3, 0.7, -0.3]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::new(8);
        let p = init_layer_norm(16);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[4, 16], 3.0));
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let y = layer_norm(&mut tape, x, &bound).unwrap();
        for i in 0..4 {
            let row = tape.value(y).row(i);
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn gelu_asymptote() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 10.0]));
        let y = tape.gelu(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!(v[1] >= 9.999 && v[1] <= 10.0);
    }

    #[test]
    fn conv_front_end_zero_input_zero_pre_ln() {
        let mut rng = Rng::new(9);
        let p = init_conv_front_end(&mut rng, 8);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![5, 8]));
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let pre = conv_merge(&mut tape, x, &bound).unwrap();
        assert!(tape.value(pre).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_front_end_single_token() {
        let mut rng = Rng::new(10);
        let p = init_conv_front_end(&mut rng, 8);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[1, 8], 1.0));
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let y = conv_front_end(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn conv_receptive_field_radius_three() {
        let mut rng = Rng::new(11);
        let p = init_conv_front_end(&mut rng, 8);
        let mut tape = Tape::new();
        let mut xv = Tensor::zeros(vec![12, 8]);
        for j in 0..8 {
            xv.data_mut()[5 * 8 + j] = 1.0; // delta at token 5
        }
        let x = tape.leaf(xv);
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let pre = conv_merge(&mut tape, x, &bound).unwrap();
        for i in 0..12 {
            let row_norm: f64 = tape.value(pre).row(i).iter().map(|v| v * v).sum();
            if (2..=8).contains(&i) {
                assert!(row_norm > 0.0, "token {i} inside radius must respond");
            } else {
                assert_eq!(row_norm, 0.0, "token {i} outside radius 3 must stay zero");
            }
        }
    }

    #[test]
    fn bigru_zero_params_zero_output() {
        let p = BiGruParams {
            layers: vec![
                (zero_cell(4, 2), zero_cell(4, 2)),
                (zero_cell(4, 2), zero_cell(4, 2)),
            ],
            w_proj: Tensor::zeros(vec![4, 4]),
        };
        let mut rng = Rng::new(12);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[6, 4], 1.0));
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let y = bigru(&mut tape, x, &bound).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    fn zero_cell(d_in: usize, hidden: usize) -> GruCellParams<Tensor> {
        GruCellParams {
            w_ih: Tensor::zeros(vec![d_in, 3 * hidden]),
            w_hh: Tensor::zeros(vec![hidden, 3 * hidden]),
            b_ih: Tensor::zeros(vec![1, 3 * hidden]),
            b_hh: Tensor::zeros(vec![1, 3 * hidden]),
        }
    }

    #[test]
    fn bigru_single_token() {
        let mut rng = Rng::new(13);
        let p = init_bigru(&mut rng, 4, 2, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&mut rng, &[1, 4], 1.0));
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let y = bigru(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 4]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn bigru_reversal_swaps_direction_halves() {
        // With fwd == bwd weights per layer, and the layer-2 input projection
        // treating the two halves identically, reversing the input sequence
        // must swap the fwd/bwd halves of the pre-projection state at
        // mirrored positions.
        let mut rng = Rng::new(14);
        let h = 3;
        let cell1 = init_gru_cell(&mut rng, 4, h);
        let mut cell2 = init_gru_cell(&mut rng, 2 * h, h);
        // make rows 0..h of w_ih equal rows h..2h (half-symmetric)
        {
            let cols = 3 * h;
            let data = cell2.w_ih.data_mut();
            for r in 0..h {
                for c in 0..cols {
                    data[(h + r) * cols + c] = data[r * cols + c];
                }
            }
        }
        let p = BiGruParams {
            layers: vec![(cell1.clone(), cell1), (cell2.clone(), cell2)],
            w_proj: eye(2 * h),
        };
        let x = random_tensor(&mut rng, &[5, 4], 1.0);
        let mut rev_rows = Vec::new();
        for i in (0..5).rev() {
            rev_rows.extend_from_slice(x.row(i));
        }
        let x_rev = Tensor::new(vec![5, 4], rev_rows).unwrap();

        let states = |input: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.leaf(input.clone());
            let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
            let s = bigru_states(&mut tape, xid, &bound).unwrap();
            tape.value(s).clone()
        };
        let fwd = states(&x);
        let rev = states(&x_rev);
        for t in 0..5 {
            let m = 4 - t;
            let a = fwd.row(t);
            let b = rev.row(m);
            for j in 0..h {
                assert!((a[j] - b[h + j]).abs() < 1e-12, "fwd half should mirror");
                assert!((a[h + j] - b[j]).abs() < 1e-12, "bwd half should mirror");
            }
        }
    }

    #[test]
    fn mha_gradcheck() {
        let mut rng = Rng::new(15);
        let p = init_mha(&mut rng, 4, 2, 2, 4);
        let mut params = vec![
            ("q".to_string(), random_tensor(&mut rng, &[2, 4], 0.8)),
            ("kv".to_string(), random_tensor(&mut rng, &[3, 4], 0.8)),
        ];
        let mut flat = Vec::new();
        p.collect("mha", &mut flat);
        for (name, t) in flat {
            params.push((name, t.clone()));
        }
        let heads = p.heads;
        let rep = GradCheck::default()
            .run(&mut rng, &params, move |tape, ids| {
                let bound = MhaParams {
                    w_q: ids[2],
                    w_k: ids[3],
                    w_v: ids[4],
                    w_o: Some(ids[5]),
                    heads,
                };
                let out = mha(tape, ids[0], ids[1], &bound, None)?;
                let sq = tape.mul(out, out)?;
                Ok(tape.sum_all(sq))
            })
            .unwrap();
        assert!(rep.ok(REL_TOL), "max rel {}", rep.max_rel_err);
    }

    #[test]
    fn conv_and_gru_gradcheck() {
        let mut rng = Rng::new(16);
        let conv = init_conv_front_end(&mut rng, 4);
        let gru = init_bigru(&mut rng, 4, 2, 4);
        let mut params = vec![("x".to_string(), random_tensor(&mut rng, &[5, 4], 0.8))];
        let mut flat = Vec::new();
        conv.collect("conv", &mut flat);
        gru.collect("gru", &mut flat);
        let n_conv = {
            let mut v = Vec::new();
            conv.collect("conv", &mut v);
            v.len()
        };
        for (name, t) in flat {
            params.push((name, t.clone()));
        }
        let rep = GradCheck::sampled(4)
            .run(&mut rng, &params, move |tape, ids| {
                let mut it = ids[1..].iter().copied();
                let conv_b = conv.map(&mut |_t: &Tensor| it.next().unwrap());
                debug_assert_eq!(ids[1..].len() - n_conv, {
                    let mut v = Vec::new();
                    gru.collect("gru", &mut v);
                    v.len()
                });
                let gru_b = gru.map(&mut |_t: &Tensor| it.next().unwrap());
                let feats = conv_front_end(tape, ids[0], &conv_b)?;
                let enc = bigru(tape, feats, &gru_b)?;
                let sq = tape.mul(enc, enc)?;
                Ok(tape.sum_all(sq))
            })
            .unwrap();
        assert!(rep.ok(REL_TOL), "max rel {}", rep.max_rel_err);
    }
}
