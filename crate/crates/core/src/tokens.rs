//! Keypoint token initialization: a global descriptor of the super points,
//! replicated per joint and separated by bias-induced layers (BIL), then a
//! linear regression to initial joint positions.

use std::rc::Rc;

use crate::config::Config;
use crate::encoder::SuperPointSet;
use crate::error::{Error, Result};
use crate::nn::{Mlp, LEAKY_SLOPE};
use crate::points::{centroid, farthest_point_sample, knn, set_conv, FpsStart, NeighborIndex};
use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, RowMix, Tensor, Var};

/// Tokens `[J×C]` and positions `[J×3]` (normalized frame) after a stage.
#[derive(Clone, Copy, Debug)]
pub struct KeypointState {
    pub tokens: Var,
    pub positions: Var,
    pub stage: usize,
}

/// Two point-set convolution stages: `M → M/4` farthest-point centers,
/// then one group over all of them around their centroid.
#[derive(Clone, Debug)]
pub struct GlobalEncoder {
    pub stage1: Mlp,
    pub stage2: Mlp,
    pub k: usize,
}

impl GlobalEncoder {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let stage1 = Mlp::new(store, "global.1", 3 + cfg.fused_width(), &cfg.global_mlp1.0)?;
        let stage2 = Mlp::new(store, "global.2", 3 + stage1.fan_out(), &cfg.global_mlp2.0)?;
        Ok(Self {
            stage1,
            stage2,
            k: cfg.encoder_k,
        })
    }

    pub fn width(&self) -> usize {
        self.stage2.fan_out()
    }

    /// `[1 × C_g]` descriptor.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, sp: &SuperPointSet) -> Result<Var> {
        let m = sp.len();
        if m < 2 {
            return Err(Error::contract(format!("global vector needs at least 2 super points, got {m}")));
        }
        let m1 = (m / 4).max(1);
        let idx = farthest_point_sample(&sp.coords, m1, FpsStart::FarthestFromCentroid)?;
        let centers = Tensor::from_fn(&[m1, 3], |i| sp.coords.data()[idx[i / 3] * 3 + i % 3]);
        let nb = knn(&centers, &sp.coords, self.k.min(m))?;
        let cv = g.constant(centers.clone());
        let sv = g.constant(sp.coords.clone());
        let h1 = set_conv(g, store, &self.stage1, cv, sv, &nb, Some(sp.feats), None)?;

        let c = centroid(&centers);
        let all = NeighborIndex {
            centers: 1,
            k: m1,
            indices: (0..m1).collect(),
        };
        let ctr = g.constant(Tensor::new(&[1, 3], c.to_vec())?);
        let hv = g.constant(centers);
        set_conv(g, store, &self.stage2, ctr, hv, &all, Some(h1), None)
    }
}

/// Shared weight with one bias row per keypoint: row `j ↦ h_j·W + b_j`.
#[derive(Clone, Debug)]
pub struct BilLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub joints: usize,
}

impl BilLayer {
    pub fn new(store: &mut ParamStore, name: &str, joints: usize, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        Ok(Self {
            w: store.add(&format!("{name}.w"), &[c_in, c_out], InitScheme::XavierUniform)?,
            b: store.add(&format!("{name}.b"), &[joints, c_out], InitScheme::Uniform { lo: -bound, hi: bound })?,
            joints,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        if g.shape(h)[0] != self.joints {
            return Err(Error::dim("bil_apply", g.shape(h), &[self.joints]));
        }
        let w = g.param(store, self.w);
        let y = g.matmul(h, w)?;
        let b = g.param(store, self.b);
        g.add(y, b)
    }

    /// Same as [`forward`](Self::forward) on `J` copies of the single row `h`.
    pub fn forward_replicated(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        if g.shape(h)[0] != 1 {
            return Err(Error::dim("bil_apply", g.shape(h), &[1]));
        }
        let w = g.param(store, self.w);
        let y = g.matmul(h, w)?;
        let rep = g.mix(y, Rc::new(RowMix::gather(1, &vec![0; self.joints])?))?;
        let b = g.param(store, self.b);
        g.add(rep, b)
    }
}

/// Three stacked BILs and the initial regression `J₀ = X₀·W_r0`.
#[derive(Clone, Debug)]
pub struct TokenInit {
    pub bils: Vec<BilLayer>,
    pub w_r0: ParamId,
}

impl TokenInit {
    pub fn new(store: &mut ParamStore, cfg: &Config, global_width: usize) -> Result<Self> {
        let mut bils = Vec::with_capacity(cfg.bil_widths.0.len());
        let mut d = global_width;
        for (i, &w) in cfg.bil_widths.0.iter().enumerate() {
            bils.push(BilLayer::new(store, &format!("tokens.bil{i}"), cfg.joints, d, w)?);
            d = w;
        }
        let w_r0 = store.add("tokens.w_r0", &[d, 3], InitScheme::XavierUniform)?;
        Ok(Self { bils, w_r0 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, global: Var) -> Result<KeypointState> {
        let mut x = self.bils[0].forward_replicated(g, store, global)?;
        for bil in &self.bils[1..] {
            x = g.leaky_relu(x, LEAKY_SLOPE);
            x = bil.forward(g, store, x)?;
        }
        let w = g.param(store, self.w_r0);
        let positions = g.matmul(x, w)?;
        Ok(KeypointState {
            tokens: x,
            positions,
            stage: 0,
        })
    }
}
