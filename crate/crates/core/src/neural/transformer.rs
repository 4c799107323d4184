//! Transformer-encoder denoiser over univariate speed windows `(1, 512)`.
//!
//! Positions carry learned encodings, the diffusion step enters as a
//! broadcast sinusoidal embedding, and trip conditions are injected through
//! cross-attention in every layer (post-norm residual blocks).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::autodiff::{Tensor, VarId};
use crate::neural::layers::{sinusoidal_embed, Init, NetBuilder};
use crate::trip::WINDOW_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
}

impl TransformerConfig {
    /// Desk-scale default.
    pub fn desk() -> Self {
        TransformerConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            time_dim: 64,
            cond_dim: 4,
        }
    }

    /// Smallest config that still exercises every block type.
    pub fn tiny() -> Self {
        TransformerConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            time_dim: 32,
            cond_dim: 4,
        }
    }

    /// Full-scale configuration (not a training target on CPU).
    pub fn paper() -> Self {
        TransformerConfig {
            n_layers: 6,
            d_model: 256,
            n_heads: 8,
            d_ff: 1024,
            time_dim: 256,
            cond_dim: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidValue(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidValue("time_dim must be even".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::InvalidValue("need at least one layer".into()));
        }
        Ok(())
    }
}

/// Builds the forward graph; `x` is `(1, WINDOW_LEN)`, `cond` is
/// `(1, cond_dim)`. Returns the predicted noise node `(1, WINDOW_LEN)`.
pub fn forward_transformer(
    b: &NetBuilder,
    cfg: &TransformerConfig,
    x: VarId,
    t: usize,
    cond: VarId,
) -> Result<VarId> {
    cfg.validate()?;
    let g = b.g;
    let d = cfg.d_model;

    let xt = g.transpose(x); // (L, 1)
    let mut h = b.linear(xt, "in", 1, d);
    let pos = b.param("pos", WINDOW_LEN, d, Init::UniformFanIn(d));
    h = g.add(h, pos);

    let temb_raw = g.leaf(Tensor::from_vec(
        1,
        cfg.time_dim,
        sinusoidal_embed(t, cfg.time_dim)?,
    )?);
    let mut temb = b.linear(temb_raw, "time.l1", cfg.time_dim, d);
    temb = g.silu(temb);
    temb = b.linear(temb, "time.l2", d, d);
    h = g.add_row(h, temb);

    let mut ctok = b.linear(cond, "cond.l1", cfg.cond_dim, d);
    ctok = g.relu(ctok);
    ctok = b.linear(ctok, "cond.l2", d, d);

    for l in 0..cfg.n_layers {
        let sa = b.self_attention(h, &format!("l{l}.sa"), d, cfg.n_heads);
        h = b.layer_norm(g.add(h, sa), &format!("l{l}.ln1"), d);
        let ca = b.attention(h, ctok, &format!("l{l}.ca"), d, cfg.n_heads);
        h = b.layer_norm(g.add(h, ca), &format!("l{l}.ln2"), d);
        let mut ff = b.linear(h, &format!("l{l}.ff1"), d, cfg.d_ff);
        ff = g.relu(ff);
        let ff = b.linear(ff, &format!("l{l}.ff2"), cfg.d_ff, d);
        h = b.layer_norm(g.add(h, ff), &format!("l{l}.ln3"), d);
    }

    let out = b.linear(h, "out", d, 1); // (L, 1)
    Ok(g.transpose(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::autodiff::Graph;
    use crate::neural::layers::ParamStore;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn run(cfg: &TransformerConfig, store: &ParamStore, x: Tensor, t: usize, cond: Tensor) -> Tensor {
        let g = Graph::new();
        let b = NetBuilder::new(&g, store);
        let xid = g.leaf(x);
        let cid = g.leaf(cond);
        let out = forward_transformer(&b, cfg, xid, t, cid).unwrap();
        g.value(out)
    }

    fn rand_window(rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(
            1,
            WINDOW_LEN,
            (0..WINDOW_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [TransformerConfig::tiny(), TransformerConfig::desk()] {
            let store = ParamStore::new(3);
            let mut rng = seeded_rng(1);
            let out = run(
                &cfg,
                &store,
                rand_window(&mut rng),
                7,
                Tensor::from_vec(1, 4, vec![0.5, 0.2, 0.6, 0.4]).unwrap(),
            );
            assert_eq!(out.shape(), (1, WINDOW_LEN));
            assert!(out.is_finite());
        }
    }

    #[test]
    fn position_sensitivity() {
        // permuting the learned positional encodings changes the output
        let cfg = TransformerConfig::tiny();
        let store = ParamStore::new(9);
        let mut rng = seeded_rng(2);
        let x = rand_window(&mut rng);
        let cond = Tensor::from_vec(1, 4, vec![0.3, 0.3, 0.5, 0.7]).unwrap();
        let before = run(&cfg, &store, x.clone(), 4, cond.clone());
        // rotate positional rows by one
        let snap = store.snapshot();
        let (_, pos) = snap.iter().find(|(n, _)| n == "pos").unwrap();
        let mut rotated = pos.clone();
        let d = cfg.d_model;
        rotated.data.rotate_right(d);
        store.insert("pos", rotated);
        let after = run(&cfg, &store, x, 4, cond);
        let delta: f64 = before
            .data
            .iter()
            .zip(&after.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 1e-6, "output ignored positional encodings");
    }

    #[test]
    fn condition_changes_output() {
        let cfg = TransformerConfig::tiny();
        let store = ParamStore::new(4);
        let mut rng = seeded_rng(3);
        let x = rand_window(&mut rng);
        let a = run(&cfg, &store, x.clone(), 6, Tensor::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let b = run(&cfg, &store, x, 6, Tensor::from_vec(1, 4, vec![0.9, 0.8, 0.7, 0.6]).unwrap());
        let delta: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
        assert!(delta > 1e-6);
    }

    #[test]
    fn gradient_check_tiny_config() {
        let cfg = TransformerConfig::tiny();
        let store = ParamStore::new(7);
        let mut rng = seeded_rng(5);
        let x = rand_window(&mut rng);
        let cond = Tensor::from_vec(1, 4, vec![0.4, 0.1, 0.5, 0.2]).unwrap();
        run(&cfg, &store, x.clone(), 11, cond.clone()); // materialize params

        let probed = [
            "in.w",
            "pos",
            "l0.sa.q.w",
            "l0.ca.k.w",
            "l0.ln2.g",
            "l0.ff1.w",
            "out.w",
            "time.l2.w",
            "cond.l1.w",
        ];
        let named: Vec<Tensor> = probed
            .iter()
            .map(|n| {
                let snap = store.snapshot();
                snap.iter().find(|(name, _)| name == n).unwrap().1.clone()
            })
            .collect();
        let mut inputs = vec![x, cond];
        inputs.extend(named);

        let cfg2 = cfg.clone();
        let store_ref = &store;
        let build = move |g: &Graph, ids: &[VarId]| {
            let b = NetBuilder::new(g, store_ref);
            for (i, name) in probed.iter().enumerate() {
                b.override_param(name, ids[2 + i]);
            }
            let out = forward_transformer(&b, &cfg2, ids[0], 11, ids[1]).unwrap();
            let sq = g.mul(out, out);
            g.mean(sq)
        };
        let report = crate::neural::autodiff::grad_check(&build, &inputs, 6, 23).unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
        assert!(report.checked > 0);
    }
}
