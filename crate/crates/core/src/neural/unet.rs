//! 1D convolutional encoder-decoder denoiser over the joint
//! speed-acceleration state `(2, 512)`.
//!
//! Stride-2 convolutions halve the sequence per level; each level runs two
//! residual blocks (group norm, SiLU, conv) modulated by a feature-wise
//! gain/shift computed from the time embedding and trip conditions, with
//! self-attention inserted at the configured coarse resolutions. The
//! decoder mirrors the encoder with skip connections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::autodiff::{Tensor, VarId};
use crate::neural::layers::{sinusoidal_embed, NetBuilder};
use crate::trip::WINDOW_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    /// Channel width per downsampling level.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub groups: usize,
    /// Sequence lengths at which self-attention blocks run.
    pub attn_lengths: Vec<usize>,
    pub heads: usize,
    pub cond_dim: usize,
}

impl UnetConfig {
    /// Desk-scale default.
    pub fn desk() -> Self {
        UnetConfig {
            widths: vec![16, 32, 64, 128],
            time_dim: 32,
            groups: 4,
            attn_lengths: vec![128, 64],
            heads: 1,
            cond_dim: 2,
        }
    }

    /// Smallest config that still exercises every block type.
    pub fn tiny() -> Self {
        UnetConfig {
            widths: vec![8, 16],
            time_dim: 16,
            groups: 2,
            attn_lengths: vec![256, 128],
            heads: 1,
            cond_dim: 2,
        }
    }

    /// Full-scale configuration (not a training target on CPU).
    pub fn paper() -> Self {
        UnetConfig {
            widths: vec![64, 128, 256, 512],
            time_dim: 256,
            groups: 8,
            attn_lengths: vec![128, 64],
            heads: 1,
            cond_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::InvalidValue("widths must be non-empty".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidValue("time_dim must be even".into()));
        }
        for &w in &self.widths {
            if w % self.groups != 0 {
                return Err(Error::InvalidValue(format!(
                    "width {w} not divisible by {} norm groups",
                    self.groups
                )));
            }
            if w % self.heads != 0 {
                return Err(Error::InvalidValue(format!(
                    "width {w} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        if WINDOW_LEN >> self.widths.len() == 0 {
            return Err(Error::InvalidValue("too many levels".into()));
        }
        Ok(())
    }
}

fn res_block(
    b: &NetBuilder,
    h: VarId,
    name: &str,
    c_in: usize,
    c_out: usize,
    emb: VarId,
    emb_dim: usize,
    groups: usize,
) -> VarId {
    let g = b.g;
    let mut y = b.group_norm(h, &format!("{name}.gn1"), c_in, groups);
    y = g.silu(y);
    y = b.conv(y, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1);
    y = b.film(y, emb, &format!("{name}.film"), emb_dim, c_out);
    y = b.group_norm(y, &format!("{name}.gn2"), c_out, groups);
    y = g.silu(y);
    y = b.conv(y, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1);
    let res = if c_in != c_out {
        b.conv(h, &format!("{name}.skip"), c_in, c_out, 1, 1, 0)
    } else {
        h
    };
    g.add(y, res)
}

fn attn_block(b: &NetBuilder, h: VarId, name: &str, channels: usize, heads: usize) -> VarId {
    let g = b.g;
    let ht = g.transpose(h); // (L, C)
    let normed = b.layer_norm(ht, &format!("{name}.ln"), channels);
    let sa = b.self_attention(normed, name, channels, heads);
    g.transpose(g.add(ht, sa))
}

/// Builds the full forward graph; `x` is `(2, WINDOW_LEN)`, `cond` is
/// `(1, cond_dim)`. Returns the predicted noise node `(2, WINDOW_LEN)`.
pub fn forward_unet(
    b: &NetBuilder,
    cfg: &UnetConfig,
    x: VarId,
    t: usize,
    cond: VarId,
) -> Result<VarId> {
    cfg.validate()?;
    let g = b.g;
    let emb_dim = cfg.time_dim + cfg.cond_dim;

    let temb_raw = g.leaf(Tensor::from_vec(
        1,
        cfg.time_dim,
        sinusoidal_embed(t, cfg.time_dim)?,
    )?);
    let mut temb = b.linear(temb_raw, "time.l1", cfg.time_dim, cfg.time_dim);
    temb = g.silu(temb);
    temb = b.linear(temb, "time.l2", cfg.time_dim, cfg.time_dim);
    let emb = g.concat_cols(temb, cond);

    let w0 = cfg.widths[0];
    let mut h = b.conv(x, "stem", 2, w0, 3, 1, 1);
    let mut skips: Vec<(VarId, usize, usize)> = vec![(h, w0, WINDOW_LEN)];
    let mut c_prev = w0;
    let mut length = WINDOW_LEN;

    for (i, &w) in cfg.widths.iter().enumerate() {
        h = b.conv(h, &format!("down{i}"), c_prev, w, 3, 2, 1);
        length /= 2;
        h = res_block(b, h, &format!("down{i}.res0"), w, w, emb, emb_dim, cfg.groups);
        h = res_block(b, h, &format!("down{i}.res1"), w, w, emb, emb_dim, cfg.groups);
        if cfg.attn_lengths.contains(&length) {
            h = attn_block(b, h, &format!("down{i}.attn"), w, cfg.heads);
        }
        c_prev = w;
        skips.push((h, w, length));
    }

    h = res_block(b, h, "mid.res0", c_prev, c_prev, emb, emb_dim, cfg.groups);
    h = res_block(b, h, "mid.res1", c_prev, c_prev, emb, emb_dim, cfg.groups);

    for i in (0..cfg.widths.len()).rev() {
        let (skip_h, skip_w, skip_len) = skips[i];
        h = g.upsample2(h);
        length *= 2;
        debug_assert_eq!(length, skip_len);
        h = b.conv(h, &format!("up{i}"), c_prev, skip_w, 3, 1, 1);
        h = g.concat_rows(h, skip_h);
        h = res_block(
            b,
            h,
            &format!("up{i}.res0"),
            2 * skip_w,
            skip_w,
            emb,
            emb_dim,
            cfg.groups,
        );
        h = res_block(
            b,
            h,
            &format!("up{i}.res1"),
            skip_w,
            skip_w,
            emb,
            emb_dim,
            cfg.groups,
        );
        if cfg.attn_lengths.contains(&length) {
            h = attn_block(b, h, &format!("up{i}.attn"), skip_w, cfg.heads);
        }
        c_prev = skip_w;
    }

    let mut out = b.group_norm(h, "out.gn", w0, cfg.groups);
    out = g.silu(out);
    Ok(b.conv(out, "out.conv", w0, 2, 3, 1, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::autodiff::Graph;
    use crate::neural::layers::ParamStore;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn run(cfg: &UnetConfig, store: &ParamStore, x: Tensor, t: usize, cond: Tensor) -> Tensor {
        let g = Graph::new();
        let b = NetBuilder::new(&g, store);
        let xid = g.leaf(x);
        let cid = g.leaf(cond);
        let out = forward_unet(&b, cfg, xid, t, cid).unwrap();
        g.value(out)
    }

    #[test]
    fn output_shape_matches_input() {
        for cfg in [UnetConfig::tiny(), UnetConfig::desk()] {
            let store = ParamStore::new(3);
            let mut rng = seeded_rng(1);
            let x = Tensor::from_vec(
                2,
                WINDOW_LEN,
                (0..2 * WINDOW_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let cond = Tensor::from_vec(1, 2, vec![0.4, 0.2]).unwrap();
            let out = run(&cfg, &store, x, 17, cond);
            assert_eq!(out.shape(), (2, WINDOW_LEN));
            assert!(out.is_finite());
        }
    }

    #[test]
    fn zero_params_zero_input_gives_zero_output() {
        let cfg = UnetConfig::tiny();
        let store = ParamStore::new(5);
        // materialize all parameters, then zero them
        let x = Tensor::zeros(2, WINDOW_LEN);
        let cond = Tensor::zeros(1, 2);
        run(&cfg, &store, x.clone(), 3, cond.clone());
        store.map_tensors(|t| t.data.fill(0.0));
        let out = run(&cfg, &store, x, 3, cond);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = UnetConfig::tiny();
        let mut rng = seeded_rng(2);
        let x = Tensor::from_vec(
            2,
            WINDOW_LEN,
            (0..2 * WINDOW_LEN).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let cond = Tensor::from_vec(1, 2, vec![0.1, 0.9]).unwrap();
        let a = run(&UnetConfig::tiny(), &ParamStore::new(11), x.clone(), 5, cond.clone());
        let b = run(&cfg, &ParamStore::new(11), x, 5, cond);
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_check_tiny_config() {
        // End-to-end FD check: input, condition, and a cross-section of the
        // parameters (conv, film, attention, norm) are all treated as
        // differentiable inputs via overrides.
        let cfg = UnetConfig::tiny();
        let store = ParamStore::new(7);
        let mut rng = seeded_rng(4);
        let x = Tensor::from_vec(
            2,
            WINDOW_LEN,
            (0..2 * WINDOW_LEN)
                .map(|_| rng.random_range(-0.5..0.5))
                .collect(),
        )
        .unwrap();
        let cond = Tensor::from_vec(1, 2, vec![0.3, 0.1]).unwrap();
        run(&cfg, &store, x.clone(), 9, cond.clone()); // materialize params

        let probed = [
            "stem.w",
            "down0.res0.conv1.w",
            "down0.res0.film.wg",
            "down1.attn.q.w",
            "down1.attn.ln.g",
            "up0.res1.conv2.b",
            "time.l1.w",
            "out.conv.w",
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
        let build = move |g: &Graph, ids: &[crate::neural::autodiff::VarId]| {
            let b = NetBuilder::new(g, store_ref);
            for (i, name) in probed.iter().enumerate() {
                b.override_param(name, ids[2 + i]);
            }
            let out = forward_unet(&b, &cfg2, ids[0], 9, ids[1]).unwrap();
            let sq = g.mul(out, out);
            g.mean(sq)
        };
        let report = crate::neural::autodiff::grad_check(&build, &inputs, 6, 21).unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
        assert!(report.checked > 0);
    }
}
