//! Layer building blocks on top of the autodiff graph.
//!
//! Parameters live in a [`ParamStore`] under dotted names; every forward
//! helper takes the name prefix it was initialized with. Batches are stacked
//! along rows, and per-sample attention is kept separate by block-diagonal
//! masks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};

pub const NORM_EPS: f64 = 1e-6;

/// Seeded parameter initializer.
pub struct Initializer<'s> {
    store: &'s mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'s> Initializer<'s> {
    pub fn new(store: &'s mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn store(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::full(shape, 1.0));
    }

    /// `name.w: [din, dout]` with fan-in scaled normal entries, `name.b`
    /// zero.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.normal(&format!("{name}.w"), &[din, dout], (1.0 / din as f64).sqrt());
        self.zeros(&format!("{name}.b"), &[1, dout]);
    }

    pub fn linear_zero(&mut self, name: &str, din: usize, dout: usize) {
        self.zeros(&format!("{name}.w"), &[din, dout]);
        self.zeros(&format!("{name}.b"), &[1, dout]);
    }

    pub fn mlp(&mut self, name: &str, din: usize, hidden: usize, dout: usize) {
        self.linear(&format!("{name}.fc1"), din, hidden);
        self.linear(&format!("{name}.fc2"), hidden, dout);
    }

    pub fn norm(&mut self, name: &str, d: usize) {
        self.ones(&format!("{name}.g"), &[1, d]);
    }

    /// Two low-rank adapters on top of a linear layer. The up projections
    /// start at zero so the layer initially equals its base.
    pub fn lora(&mut self, name: &str, din: usize, dout: usize, rank: usize) {
        for branch in [LORA_TEXT, LORA_MOTION] {
            self.normal(&format!("{name}.{branch}.down"), &[din, rank], (1.0 / din as f64).sqrt());
            self.zeros(&format!("{name}.{branch}.up"), &[rank, dout]);
        }
    }

    /// Pre-norm transformer block with `d`-wide attention and an MLP of
    /// `hidden` units. `lora_rank` adds routed adapters to the attention
    /// projections.
    pub fn block(&mut self, name: &str, d: usize, hidden: usize, lora_rank: Option<usize>) {
        self.norm(&format!("{name}.norm1"), d);
        self.norm(&format!("{name}.norm2"), d);
        for p in ["q", "k", "v", "o"] {
            let pname = format!("{name}.attn.{p}");
            self.linear(&pname, d, d);
            if let Some(r) = lora_rank {
                self.lora(&pname, d, d, r);
            }
        }
        self.mlp(&format!("{name}.mlp"), d, hidden, d);
    }
}

/// Adapter branch for text and image tokens.
pub const LORA_TEXT: &str = "lora_text";
/// Adapter branch for motion tokens.
pub const LORA_MOTION: &str = "lora_motion";

pub fn linear(g: &mut Graph, x: Var, name: &str) -> Result<Var, DiffError> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn mlp(g: &mut Graph, x: Var, name: &str) -> Result<Var, DiffError> {
    let h = linear(g, x, &format!("{name}.fc1"))?;
    let h = g.gelu(h);
    linear(g, h, &format!("{name}.fc2"))
}

pub fn rms_norm(g: &mut Graph, x: Var, name: &str) -> Result<Var, DiffError> {
    let n = g.rms_norm_rows(x, NORM_EPS);
    let gain = g.param(&format!("{name}.g"))?;
    g.mul(n, gain)
}

/// How attention projections are computed.
#[derive(Clone, Copy)]
pub enum Projection {
    Plain,
    /// Adds each routed adapter's output on the rows selected by its
    /// constant `[L, 1]` 0/1 column.
    Routed { text_rows: Var, motion_rows: Var },
}

pub fn project(g: &mut Graph, x: Var, name: &str, proj: Projection) -> Result<Var, DiffError> {
    let y = linear(g, x, name)?;
    match proj {
        Projection::Plain => Ok(y),
        Projection::Routed { text_rows, motion_rows } => {
            let mut y = y;
            for (branch, rows) in [(LORA_TEXT, text_rows), (LORA_MOTION, motion_rows)] {
                let down = g.param(&format!("{name}.{branch}.down"))?;
                let up = g.param(&format!("{name}.{branch}.up"))?;
                let h = g.matmul(x, down)?;
                let h = g.matmul(h, up)?;
                let h = g.mul(h, rows)?;
                y = g.add(y, h)?;
            }
            Ok(y)
        }
    }
}

/// Multi-head self-attention. `mask` is an additive `[L, L]` constant with
/// entries in `{0, -inf}`.
pub fn attention(g: &mut Graph, x: Var, name: &str, heads: usize, mask: Option<Var>, proj: Projection) -> Result<Var, DiffError> {
    let d = g.shape(x)[1];
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let q = project(g, x, &format!("{name}.q"), proj)?;
    let k = project(g, x, &format!("{name}.k"), proj)?;
    let v = project(g, x, &format!("{name}.v"), proj)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt)?;
        let mut s = g.scale(s, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            s = g.add(s, m)?;
        }
        let p = g.softmax_rows(s);
        outs.push(g.matmul(p, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    project(g, cat, &format!("{name}.o"), proj)
}

pub fn block(g: &mut Graph, x: Var, name: &str, heads: usize, mask: Option<Var>, proj: Projection) -> Result<Var, DiffError> {
    let h = rms_norm(g, x, &format!("{name}.norm1"))?;
    let a = attention(g, h, &format!("{name}.attn"), heads, mask, proj)?;
    let x = g.add(x, a)?;
    let h = rms_norm(g, x, &format!("{name}.norm2"))?;
    let m = mlp(g, h, &format!("{name}.mlp"))?;
    g.add(x, m)
}

/// Additive mask that keeps `groups` consecutive blocks of `size` rows from
/// attending to each other.
pub fn block_diagonal_mask(groups: usize, size: usize) -> Tensor {
    let l = groups * size;
    let mut t = Tensor::full(&[l, l], f64::NEG_INFINITY);
    for b in 0..groups {
        for i in 0..size {
            for j in 0..size {
                t.set(b * size + i, b * size + j, 0.0);
            }
        }
    }
    t
}

/// Repeats a per-sample additive mask along the block diagonal.
pub fn tile_mask(mask: &Tensor, groups: usize) -> Tensor {
    let n = mask.rows();
    let mut t = Tensor::full(&[groups * n, groups * n], f64::NEG_INFINITY);
    for b in 0..groups {
        for i in 0..n {
            for j in 0..n {
                t.set(b * n + i, b * n + j, mask.get(i, j));
            }
        }
    }
    t
}

/// `[groups·n, n]` stack of identities: left-multiplying repeats an `[n, c]`
/// table once per sample.
pub fn tile_rows(groups: usize, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[groups * n, n]);
    for b in 0..groups {
        for i in 0..n {
            t.set(b * n + i, i, 1.0);
        }
    }
    t
}

/// `[groups·n, groups]` indicator: left-multiplying spreads one row per
/// sample over that sample's `n` rows.
pub fn expand_rows(groups: usize, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[groups * n, groups]);
    for b in 0..groups {
        for i in 0..n {
            t.set(b * n + i, b, 1.0);
        }
    }
    t
}

/// `[k, total]` selector picking the listed rows.
pub fn select_rows(rows: &[usize], total: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows.len(), total]);
    for (i, &r) in rows.iter().enumerate() {
        t.set(i, r, 1.0);
    }
    t
}

/// Sinusoidal embedding of a scalar in `[0, 1]`, `dim` wide (even).
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_up_projection_leaves_base_output() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, 1);
        init.linear("p", 4, 3);
        init.lora("p", 4, 3, 2);
        let x = Tensor::randn(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new(&store);
        let xv = g.constant(x);
        let plain = linear(&mut g, xv, "p").unwrap();
        let ones = g.constant(Tensor::full(&[5, 1], 1.0));
        let routed = project(&mut g, xv, "p", Projection::Routed { text_rows: ones, motion_rows: ones }).unwrap();
        assert_eq!(g.value(plain), g.value(routed));
    }

    #[test]
    fn block_diagonal_attention_separates_samples() {
        let mut store = ParamStore::new();
        Initializer::new(&mut store, 3).block("b", 8, 16, None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let run = |x: Tensor, groups: usize| {
            let mut g = Graph::new(&store);
            let xv = g.constant(x);
            let m = g.constant(block_diagonal_mask(groups, 3));
            let y = block(&mut g, xv, "b", 2, Some(m), Projection::Plain).unwrap();
            g.value(y).clone()
        };
        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let both = run(Tensor::from_vec(6, 8, stacked), 2);
        let alone = run(a, 1);
        for (x, y) in both.data()[..24].iter().zip(alone.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_embedding_is_bounded() {
        let e = timestep_embedding(0.37, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(timestep_embedding(0.0, 4), vec![1.0, 1.0, 0.0, 0.0]);
    }
}
