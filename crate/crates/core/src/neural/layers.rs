//! Parameter storage and the graph-building blocks shared by the denoisers.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::autodiff::{Graph, Tensor, VarId};
use crate::rng::stream_rng;

/// How a parameter tensor is filled on first access.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    UniformFanIn(usize),
    Zeros,
    Ones,
}

/// Named parameter tensors with deterministic, name-derived initialization:
/// each tensor's RNG stream comes from a hash of its name, so values do not
/// depend on creation order.
pub struct ParamStore {
    seed: u64,
    inner: RefCell<StoreInner>,
}

#[derive(Default)]
struct StoreInner {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            inner: RefCell::new(StoreInner::default()),
        }
    }

    fn name_stream(name: &str) -> u64 {
        let digest = Sha256::digest(name.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Slot of `name`, creating and initializing the tensor if absent.
    pub fn fetch(&self, name: &str, rows: usize, cols: usize, init: Init) -> usize {
        let mut inner = self.inner.borrow_mut();
        if let Some(&slot) = inner.index.get(name) {
            debug_assert_eq!(inner.tensors[slot].shape(), (rows, cols));
            return slot;
        }
        let mut t = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data.fill(1.0),
            Init::UniformFanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = stream_rng(self.seed, Self::name_stream(name));
                for v in t.data.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        let slot = inner.tensors.len();
        inner.names.push(name.to_string());
        inner.tensors.push(t);
        inner.index.insert(name.to_string(), slot);
        slot
    }

    pub fn tensor(&self, slot: usize) -> Tensor {
        self.inner.borrow().tensors[slot].clone()
    }

    pub fn set_tensor(&self, slot: usize, t: Tensor) {
        self.inner.borrow_mut().tensors[slot] = t;
    }

    pub fn insert(&self, name: &str, t: Tensor) {
        let mut inner = self.inner.borrow_mut();
        if let Some(&slot) = inner.index.get(name) {
            inner.tensors[slot] = t;
        } else {
            let slot = inner.tensors.len();
            inner.names.push(name.to_string());
            inner.tensors.push(t);
            inner.index.insert(name.to_string(), slot);
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.inner.borrow().tensors.iter().map(|t| t.len()).sum()
    }

    /// `(name, tensor)` pairs sorted by name.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let inner = self.inner.borrow();
        let mut out: Vec<(String, Tensor)> = inner
            .names
            .iter()
            .cloned()
            .zip(inner.tensors.iter().cloned())
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().tensors.iter().all(|t| t.is_finite())
    }

    /// Applies `f` to every tensor (test aid).
    pub fn map_tensors(&self, f: impl Fn(&mut Tensor)) {
        for t in self.inner.borrow_mut().tensors.iter_mut() {
            f(t);
        }
    }

    /// Runs `f` over the slot-ordered tensor slice (optimizer hook).
    pub fn with_tensors_mut<T>(&self, f: impl FnOnce(&mut [Tensor]) -> T) -> T {
        f(&mut self.inner.borrow_mut().tensors)
    }
}

/// Per-graph binding of store parameters to leaf nodes.
pub struct NetBuilder<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
    bound: RefCell<HashMap<usize, VarId>>,
    overrides: RefCell<HashMap<String, VarId>>,
}

impl<'a> NetBuilder<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore) -> Self {
        NetBuilder {
            g,
            store,
            bound: RefCell::new(HashMap::new()),
            overrides: RefCell::new(HashMap::new()),
        }
    }

    /// Binds the named parameter to an existing graph node instead of the
    /// store tensor; lets gradient checks treat parameters as inputs.
    pub fn override_param(&self, name: &str, id: VarId) {
        self.overrides.borrow_mut().insert(name.to_string(), id);
    }

    /// Leaf for the named parameter (one leaf per parameter per graph).
    pub fn param(&self, name: &str, rows: usize, cols: usize, init: Init) -> VarId {
        if let Some(&id) = self.overrides.borrow().get(name) {
            return id;
        }
        let slot = self.store.fetch(name, rows, cols, init);
        if let Some(&id) = self.bound.borrow().get(&slot) {
            return id;
        }
        let id = self.g.leaf(self.store.tensor(slot));
        self.bound.borrow_mut().insert(slot, id);
        id
    }

    /// `(store slot, graph id)` pairs bound so far.
    pub fn bound_params(&self) -> Vec<(usize, VarId)> {
        let mut v: Vec<(usize, VarId)> = self
            .bound
            .borrow()
            .iter()
            .map(|(&s, &id)| (s, id))
            .collect();
        v.sort_by_key(|e| e.0);
        v
    }

    /// `x (r, d_in) @ W (d_in, d_out) + b`.
    pub fn linear(&self, x: VarId, name: &str, d_in: usize, d_out: usize) -> VarId {
        let w = self.param(
            &format!("{name}.w"),
            d_in,
            d_out,
            Init::UniformFanIn(d_in),
        );
        let b = self.param(&format!("{name}.b"), 1, d_out, Init::Zeros);
        self.g.add_row(self.g.matmul(x, w), b)
    }

    /// Conv over `(c_in, L)`.
    pub fn conv(
        &self,
        x: VarId,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let w = self.param(
            &format!("{name}.w"),
            c_out,
            c_in * k,
            Init::UniformFanIn(c_in * k),
        );
        let b = self.param(&format!("{name}.b"), c_out, 1, Init::Zeros);
        self.g.conv1d(x, w, b, k, stride, pad)
    }

    pub fn layer_norm(&self, x: VarId, name: &str, dim: usize) -> VarId {
        let gamma = self.param(&format!("{name}.g"), 1, dim, Init::Ones);
        let beta = self.param(&format!("{name}.b"), 1, dim, Init::Zeros);
        self.g.layer_norm(x, gamma, beta, 1e-5)
    }

    pub fn group_norm(&self, x: VarId, name: &str, channels: usize, groups: usize) -> VarId {
        let gamma = self.param(&format!("{name}.g"), channels, 1, Init::Ones);
        let beta = self.param(&format!("{name}.b"), channels, 1, Init::Zeros);
        self.g.group_norm(x, gamma, beta, groups, 1e-5)
    }

    /// Feature-wise modulation of `h (C, L)` by learned projections of the
    /// conditioning vector `cond (1, d)`: `gamma(cond) * h + beta(cond)`.
    /// The gain projection bias starts at 1 so the block opens as identity.
    pub fn film(&self, h: VarId, cond: VarId, name: &str, d_cond: usize, channels: usize) -> VarId {
        let wg = self.param(
            &format!("{name}.wg"),
            d_cond,
            channels,
            Init::UniformFanIn(d_cond),
        );
        let bg = self.param(&format!("{name}.bg"), 1, channels, Init::Ones);
        let wb = self.param(
            &format!("{name}.wb"),
            d_cond,
            channels,
            Init::UniformFanIn(d_cond),
        );
        let bb = self.param(&format!("{name}.bb"), 1, channels, Init::Zeros);
        film_modulate(self.g, h, cond, wg, bg, wb, bb)
    }

    /// Multi-head attention: queries from `q_src (Lq, d)`, keys/values from
    /// `kv_src (Lk, d)`. Returns the projected output `(Lq, d)`.
    pub fn attention(
        &self,
        q_src: VarId,
        kv_src: VarId,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> VarId {
        debug_assert_eq!(d_model % heads, 0);
        let g = self.g;
        let dh = d_model / heads;
        let q = self.linear(q_src, &format!("{name}.q"), d_model, d_model);
        let k = self.linear(kv_src, &format!("{name}.k"), d_model, d_model);
        let v = self.linear(kv_src, &format!("{name}.v"), d_model, d_model);
        let mut head_outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_cols(k, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let scores = g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / (dh as f64).sqrt());
            let probs = g.softmax(scores);
            head_outs.push(g.matmul(probs, vh));
        }
        let mut cat = head_outs[0];
        for h in &head_outs[1..] {
            cat = g.concat_cols(cat, *h);
        }
        self.linear(cat, &format!("{name}.o"), d_model, d_model)
    }

    /// Self-attention over `h (L, d)`.
    pub fn self_attention(&self, h: VarId, name: &str, d_model: usize, heads: usize) -> VarId {
        self.attention(h, h, name, d_model, heads)
    }
}

/// `gamma(cond) * h + beta(cond)` with explicit projection parameters
/// (`wg/bg` for the gain, `wb/bb` for the shift). `h` is `(C, L)`,
/// `cond` is `(1, d)`.
pub fn film_modulate(
    g: &Graph,
    h: VarId,
    cond: VarId,
    wg: VarId,
    bg: VarId,
    wb: VarId,
    bb: VarId,
) -> VarId {
    let gamma = g.transpose(g.add_row(g.matmul(cond, wg), bg)); // (C, 1)
    let beta = g.transpose(g.add_row(g.matmul(cond, wb), bb));
    g.add_col(g.mul_col(h, gamma), beta)
}

/// Sinusoidal positional/step encoding: `sin(t / 10000^(i/d))` at even
/// indices, `cos` at odd ones. Errors when `d` is odd.
pub fn sinusoidal_embed(t: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::InvalidValue(format!(
            "embedding dimension must be even, got {d}"
        )));
    }
    let mut out = vec![0.0; d];
    for (i, v) in out.iter_mut().enumerate() {
        let freq = 1.0 / 10000f64.powf(i as f64 / d as f64);
        let arg = t as f64 * freq;
        *v = if i % 2 == 0 { arg.sin() } else { arg.cos() };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::autodiff::grad_check;

    #[test]
    fn sinusoidal_zero_step() {
        let e = sinusoidal_embed(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_embed(3, 7).is_err());
    }

    #[test]
    fn sinusoidal_bounded_and_distinct() {
        let mut seen = Vec::new();
        for t in (0..10000).step_by(37) {
            let e = sinusoidal_embed(t, 16).unwrap();
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
            seen.push(e);
        }
        for i in 0..seen.len() {
            for j in i + 1..seen.len() {
                let d: f64 = seen[i]
                    .iter()
                    .zip(&seen[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(d > 1e-9, "steps {i} and {j} collide");
            }
        }
    }

    #[test]
    fn film_identity_and_kill() {
        let g = Graph::new();
        let h = g.leaf(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let cond = g.leaf(Tensor::from_vec(1, 2, vec![0.3, -0.7]).unwrap());
        // gamma == 1, beta == 0 -> identity
        let wg = g.leaf(Tensor::zeros(2, 2));
        let bg = g.leaf(Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap());
        let wb = g.leaf(Tensor::zeros(2, 2));
        let bb = g.leaf(Tensor::zeros(1, 2));
        let out = film_modulate(&g, h, cond, wg, bg, wb, bb);
        assert_eq!(g.value(out), g.value(h));
        // gamma == 0 -> output independent of h
        let bg0 = g.leaf(Tensor::zeros(1, 2));
        let out0 = film_modulate(&g, h, cond, wg, bg0, wb, bb);
        assert!(g.value(out0).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn film_gradients_match_fd() {
        let build = |g: &Graph, ids: &[VarId]| {
            let out = film_modulate(g, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
            let sq = g.mul(out, out);
            g.sum(sq)
        };
        let mut rng = crate::rng::seeded_rng(3);
        use rand::Rng;
        let mut rt = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(r, c, data).unwrap()
        };
        let inputs = vec![rt(3, 4), rt(1, 2), rt(2, 3), rt(1, 3), rt(2, 3), rt(1, 3)];
        let report = grad_check(&build, &inputs, 10, 5).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn param_init_is_order_independent() {
        let a = ParamStore::new(7);
        let b = ParamStore::new(7);
        a.fetch("x", 2, 3, Init::UniformFanIn(3));
        a.fetch("y", 4, 1, Init::UniformFanIn(4));
        b.fetch("y", 4, 1, Init::UniformFanIn(4));
        b.fetch("x", 2, 3, Init::UniformFanIn(3));
        let sa = a.snapshot();
        let sb = b.snapshot();
        assert_eq!(sa.len(), 2);
        for ((na, ta), (nb, tb)) in sa.iter().zip(&sb) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb);
        }
        // different seed -> different values
        let c = ParamStore::new(8);
        c.fetch("x", 2, 3, Init::UniformFanIn(3));
        assert_ne!(c.snapshot()[0].1, sa[0].1);
    }

    #[test]
    fn attention_single_token_broadcasts() {
        // with one key/value token, softmax weights are 1 and every query
        // position receives the same vector
        let g = Graph::new();
        let store = ParamStore::new(1);
        let b = NetBuilder::new(&g, &store);
        let mut rng = crate::rng::seeded_rng(9);
        use rand::Rng;
        let hdat = (0..6 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = g.leaf(Tensor::from_vec(6, 8, hdat).unwrap());
        let ctx = g.leaf(Tensor::from_vec(1, 8, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let out = b.attention(h, ctx, "ca", 8, 2);
        let val = g.value(out);
        for r in 1..6 {
            for c in 0..8 {
                assert!((val.at(r, c) - val.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_mixing_preserves_identical_rows() {
        let g = Graph::new();
        let store = ParamStore::new(2);
        let b = NetBuilder::new(&g, &store);
        let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let h = g.leaf(Tensor::from_vec(5, 8, data).unwrap());
        let out = b.self_attention(h, "sa", 8, 2);
        let val = g.value(out);
        for r in 1..5 {
            for c in 0..8 {
                assert!((val.at(r, c) - val.at(0, c)).abs() < 1e-10);
            }
        }
    }
}
