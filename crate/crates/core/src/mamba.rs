//! The correspondence state-space block.
//!
//! One block refines keypoint tokens `X: [J×C]` and positions `J: [J×3]`:
//!
//! ```text
//! X_loc = setconv_inject(J, X, super points)
//! X̃     = LN(X ⊙ X_loc)
//! V     = GELU(X̃ W_v),  X_f = GELU(X̃ W_f),  X_b = GELU(Rev(X̃) W_b)
//! U_f   = SSM_f(X_f) W_uf,  U_b = SSM_b(X_b) W_ub
//! M     = (U_f ⊙ w_c) · Rev(U_b)ᵀ                 (J×J)
//! X'    = M · V
//! X_loc'= setconv_filter(J, X', super points),  G = σ(X_loc')
//! J'    = (G ⊙ X' + (1 − G) ⊙ X_loc') W_r
//! ```
//!
//! Keypoints are scanned in the dataset's joint order (wrist first).

use crate::config::{Config, CorrMap, NextTokens, SsmType};
use crate::encoder::SuperPointSet;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::points::{knn, set_conv, NeighborIndex};
use crate::ssm::SsmLayer;
use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, Tensor, Var};
use crate::tokens::KeypointState;

pub const LN_EPS: f64 = 1e-5;

/// Set-conv aggregation of super points around each joint, with the
/// joint's own token appended to every neighbour: input `[p − j | f | x_j]`.
#[derive(Clone, Debug)]
pub struct LocalAggregator {
    pub mlp: Mlp,
}

impl LocalAggregator {
    pub fn new(store: &mut ParamStore, name: &str, feat_width: usize, token_width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, 3 + feat_width + token_width, &[hidden, token_width])?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        positions: Var,
        tokens: Var,
        sp: &SuperPointSet,
        neighbors: &NeighborIndex,
    ) -> Result<Var> {
        let src = g.constant(sp.coords.clone());
        set_conv(g, store, &self.mlp, positions, src, neighbors, Some(sp.feats), Some(tokens))
    }
}

#[derive(Clone, Debug)]
enum CorrWeights {
    Channel(ParamId),
    Bilinear(ParamId),
}

#[derive(Clone, Debug)]
struct SsmBranch {
    proj: Linear,
    ssm: SsmLayer,
    out: Linear,
}

impl SsmBranch {
    fn new(store: &mut ParamStore, name: &str, c: usize, n: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.in"), c, c, true)?,
            ssm: SsmLayer::new(store, &format!("{name}.ssm"), c, n)?,
            out: Linear::new(store, &format!("{name}.out"), c, c, false)?,
        })
    }
}

/// Intermediate values of one block, for inspection and tests.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub x_loc: Option<Var>,
    pub x_tilde: Var,
    pub v: Var,
    pub u_f: Option<Var>,
    pub u_b: Option<Var>,
    pub corr: Option<Var>,
    pub updated: Var,
    pub x_loc_filter: Option<Var>,
    pub gate: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CorrespondenceBlock {
    pub token_width: usize,
    pub k: usize,
    ssm_type: SsmType,
    next_tokens: NextTokens,
    residual: bool,
    inject: Option<LocalAggregator>,
    filter: Option<LocalAggregator>,
    ln_gain: ParamId,
    ln_bias: ParamId,
    w_v: Linear,
    fwd: Option<SsmBranch>,
    bwd: Option<SsmBranch>,
    corr: Option<CorrWeights>,
    /// Present only when W_r is not shared across blocks.
    own_w_r: Option<ParamId>,
}

impl CorrespondenceBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &Config) -> Result<Self> {
        let c = cfg.token_width();
        let f = cfg.fused_width();
        let n = cfg.state_dim;
        let agg = |store: &mut ParamStore, which: &str| {
            LocalAggregator::new(store, &format!("{name}.{which}"), f, c, cfg.local_hidden)
        };
        let inject = if cfg.local_inject { Some(agg(store, "inject")?) } else { None };
        let filter = if cfg.local_filter { Some(agg(store, "filter")?) } else { None };
        let fwd = match cfg.ssm_type {
            SsmType::None => None,
            _ => Some(SsmBranch::new(store, &format!("{name}.fwd"), c, n)?),
        };
        let (bwd, corr) = match cfg.ssm_type {
            SsmType::Correspondence => {
                let w = match cfg.corr_map {
                    CorrMap::Channel => CorrWeights::Channel(store.add(
                        &format!("{name}.w_c"),
                        &[c],
                        InitScheme::Constant(1.0 / c as f64),
                    )?),
                    CorrMap::Bilinear => CorrWeights::Bilinear(store.add(
                        &format!("{name}.w_c"),
                        &[c, c],
                        InitScheme::XavierUniform,
                    )?),
                };
                (Some(SsmBranch::new(store, &format!("{name}.bwd"), c, n)?), Some(w))
            }
            _ => (None, None),
        };
        Ok(Self {
            token_width: c,
            k: cfg.local_k,
            ssm_type: cfg.ssm_type,
            next_tokens: cfg.next_tokens,
            residual: cfg.residual,
            inject,
            filter,
            ln_gain: store.add(&format!("{name}.ln.gain"), &[c], InitScheme::Constant(1.0))?,
            ln_bias: store.add(&format!("{name}.ln.bias"), &[c], InitScheme::Zeros)?,
            w_v: Linear::new(store, &format!("{name}.v"), c, c, true)?,
            fwd,
            bwd,
            corr,
            own_w_r: if cfg.share_wr {
                None
            } else {
                Some(store.add(&format!("{name}.w_r"), &[c, 3], InitScheme::XavierUniform)?)
            },
        })
    }

    /// `X̃ = LN(x_prev ⊙ x_loc)`, or `LN(x_prev)` without a local token.
    pub fn inject_normalize(&self, g: &mut Graph, store: &ParamStore, x_prev: Var, x_loc: Option<Var>) -> Result<Var> {
        let x = match x_loc {
            Some(l) => g.mul(x_prev, l)?,
            None => x_prev,
        };
        let gain = g.param(store, self.ln_gain);
        let bias = g.param(store, self.ln_bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    /// `(V, X_f, X_b)`; the SSM inputs are absent when the block has no SSM.
    pub fn branch_projections(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Option<Var>, Option<Var>)> {
        let v = self.w_v.forward(g, store, x)?;
        let v = g.gelu(v);
        let xf = match &self.fwd {
            Some(b) => {
                let h = b.proj.forward(g, store, x)?;
                Some(g.gelu(h))
            }
            None => None,
        };
        let xb = match &self.bwd {
            Some(b) => {
                let r = g.reverse_rows(x)?;
                let h = b.proj.forward(g, store, r)?;
                Some(g.gelu(h))
            }
            None => None,
        };
        Ok((v, xf, xb))
    }

    pub fn forward_ssm(&self, g: &mut Graph, store: &ParamStore, xf: Var) -> Result<Var> {
        let b = self.fwd.as_ref().ok_or_else(|| Error::contract("block has no forward SSM"))?;
        let y = b.ssm.forward(g, store, xf)?;
        b.out.forward(g, store, y)
    }

    pub fn backward_ssm(&self, g: &mut Graph, store: &ParamStore, xb: Var) -> Result<Var> {
        let b = self.bwd.as_ref().ok_or_else(|| Error::contract("block has no backward SSM"))?;
        let y = b.ssm.forward(g, store, xb)?;
        b.out.forward(g, store, y)
    }

    /// `(U_f, U_b)`, with `U_b` still in reversed keypoint order.
    pub fn bidirectional_ssm(&self, g: &mut Graph, store: &ParamStore, xf: Var, xb: Var) -> Result<(Var, Var)> {
        Ok((self.forward_ssm(g, store, xf)?, self.backward_ssm(g, store, xb)?))
    }

    /// `M[i,j] = Σ_c w_c[c] U_f[i,c] Rev(U_b)[j,c]` (or the bilinear form).
    pub fn correspondence_map(&self, g: &mut Graph, store: &ParamStore, uf: Var, ub: Var) -> Result<Var> {
        let w = self.corr.as_ref().ok_or_else(|| Error::contract("block has no correspondence map"))?;
        let r = g.reverse_rows(ub)?;
        let left = match w {
            CorrWeights::Channel(id) => {
                let wc = g.param(store, *id);
                g.mul_row(uf, wc)?
            }
            CorrWeights::Bilinear(id) => {
                let wc = g.param(store, *id);
                g.matmul(uf, wc)?
            }
        };
        let rt = g.transpose(r)?;
        g.matmul(left, rt)
    }

    /// `X' = M · V`.
    pub fn update_tokens(g: &mut Graph, m: Var, v: Var) -> Result<Var> {
        g.matmul(m, v)
    }

    /// Returns `(J', blended tokens, X_loc', G)`; without a filter the blend is `X'`.
    pub fn gated_regress(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        updated: Var,
        positions_prev: Var,
        sp: &SuperPointSet,
        neighbors: &NeighborIndex,
        w_r: ParamId,
    ) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
        let (blend, xl, gate) = match &self.filter {
            Some(f) => {
                let xl = f.forward(g, store, positions_prev, updated, sp, neighbors)?;
                let gate = g.sigmoid(xl);
                // G ⊙ X' + (1 − G) ⊙ X_loc'
                let d = g.sub(updated, xl)?;
                let gd = g.mul(gate, d)?;
                (g.add(xl, gd)?, Some(xl), Some(gate))
            }
            None => (updated, None, None),
        };
        let w = g.param(store, self.own_w_r.unwrap_or(w_r));
        let pos = g.matmul(blend, w)?;
        Ok((pos, blend, xl, gate))
    }

    pub fn neighbors(&self, g: &Graph, positions: Var, sp: &SuperPointSet) -> Result<NeighborIndex> {
        knn(g.value(positions), &sp.coords, self.k.min(sp.len()))
    }

    /// One refinement stage. `shared_w_r` is used unless the block owns its own.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prev: &KeypointState,
        sp: &SuperPointSet,
        shared_w_r: ParamId,
    ) -> Result<(KeypointState, BlockTrace)> {
        let s = g.shape(prev.tokens);
        if s.len() != 2 || s[1] != self.token_width {
            return Err(Error::dim("block_forward", s, &[0, self.token_width]));
        }
        let nb = self.neighbors(g, prev.positions, sp)?;
        let x_loc = match &self.inject {
            Some(a) => Some(a.forward(g, store, prev.positions, prev.tokens, sp, &nb)?),
            None => None,
        };
        let x_tilde = self.inject_normalize(g, store, prev.tokens, x_loc)?;
        let (v, xf, xb) = self.branch_projections(g, store, x_tilde)?;
        let (mut u_f, mut u_b, mut corr) = (None, None, None);
        let mut updated = match self.ssm_type {
            SsmType::None => v,
            SsmType::Standard => {
                let uf = self.forward_ssm(g, store, xf.expect("forward branch"))?;
                u_f = Some(uf);
                g.mul(v, uf)?
            }
            SsmType::Correspondence => {
                let (uf, ub) = self.bidirectional_ssm(g, store, xf.expect("forward branch"), xb.expect("backward branch"))?;
                let m = self.correspondence_map(g, store, uf, ub)?;
                u_f = Some(uf);
                u_b = Some(ub);
                corr = Some(m);
                Self::update_tokens(g, m, v)?
            }
        };
        if self.residual {
            updated = g.add(updated, prev.tokens)?;
        }
        let (positions, blend, x_loc_filter, gate) =
            self.gated_regress(g, store, updated, prev.positions, sp, &nb, shared_w_r)?;
        let tokens = match self.next_tokens {
            NextTokens::Updated => updated,
            NextTokens::Gated => blend,
        };
        Ok((
            KeypointState {
                tokens,
                positions,
                stage: prev.stage + 1,
            },
            BlockTrace {
                x_loc,
                x_tilde,
                v,
                u_f,
                u_b,
                corr,
                updated,
                x_loc_filter,
                gate,
            },
        ))
    }
}

/// Convenience for tests: a constant super-point set.
pub fn constant_superpoints(g: &mut Graph, coords: Tensor, feats: Tensor, widths: [usize; 3]) -> SuperPointSet {
    SuperPointSet {
        coords,
        feats: g.constant(feats),
        widths,
        source_index: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Widths;
    use crate::tensor::GradCheck;

    /// J=5, C=8, M=16, k=4.
    fn mini() -> Config {
        Config {
            joints: 5,
            super_points: 16,
            num_points: 16,
            local_k: 4,
            point_mlp: Widths(vec![3]),
            depth_channels: 2,
            rgb_channels: 1,
            bil_widths: Widths(vec![8, 8, 8]),
            local_hidden: 6,
            state_dim: 3,
            ..Config::default()
        }
    }

    struct Fixture {
        store: ParamStore,
        block: CorrespondenceBlock,
        w_r: ParamId,
        tokens: ParamId,
        positions: ParamId,
        sp_coords: Tensor,
        sp_feats: ParamId,
    }

    fn fixture(cfg: &Config, seed: u64) -> Fixture {
        let mut store = ParamStore::new(seed);
        let block = CorrespondenceBlock::new(&mut store, "blk", cfg).unwrap();
        let c = cfg.token_width();
        let u = InitScheme::Uniform { lo: -1.0, hi: 1.0 };
        let w_r = store.add("w_r", &[c, 3], InitScheme::XavierUniform).unwrap();
        let tokens = store.add("x0", &[cfg.joints, c], u.clone()).unwrap();
        let positions = store.add("j0", &[cfg.joints, 3], u.clone()).unwrap();
        let sp_feats = store.add("f", &[cfg.super_points, cfg.fused_width()], u).unwrap();
        let sp_coords = Tensor::random_uniform(&[cfg.super_points, 3], -1.0, 1.0, seed + 1000);
        Fixture {
            store,
            block,
            w_r,
            tokens,
            positions,
            sp_coords,
            sp_feats,
        }
    }

    fn run(f: &Fixture, g: &mut Graph, s: &ParamStore) -> Result<(KeypointState, BlockTrace, SuperPointSet)> {
        let prev = KeypointState {
            tokens: g.param(s, f.tokens),
            positions: g.param(s, f.positions),
            stage: 0,
        };
        let feats = g.param(s, f.sp_feats);
        let sp = SuperPointSet {
            coords: f.sp_coords.clone(),
            feats,
            widths: [3, 2, 1],
            source_index: Vec::new(),
        };
        let (st, tr) = f.block.forward(g, s, &prev, &sp, f.w_r)?;
        Ok((st, tr, sp))
    }

    #[test]
    fn shapes_and_stage_index() {
        let cfg = mini();
        let f = fixture(&cfg, 1);
        let mut g = Graph::new();
        let (st, tr, _) = run(&f, &mut g, &f.store).unwrap();
        assert_eq!(g.shape(st.tokens), &[5, 8]);
        assert_eq!(g.shape(st.positions), &[5, 3]);
        assert_eq!(g.shape(tr.corr.unwrap()), &[5, 5]);
        assert_eq!(st.stage, 1);
    }

    #[test]
    fn zero_network_regresses_origin() {
        let cfg = mini();
        let mut f = fixture(&cfg, 2);
        let keep: Vec<ParamId> = vec![f.tokens, f.positions, f.sp_feats];
        let ids: Vec<ParamId> = f.store.ids().collect();
        for id in ids {
            if !keep.contains(&id) {
                let shape = f.store.value(id).shape().to_vec();
                f.store.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut g = Graph::new();
        let (st, ..) = run(&f, &mut g, &f.store).unwrap();
        assert!(g.value(st.positions).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inject_normalize_examples() {
        let cfg = mini();
        let f = fixture(&cfg, 3);
        let s = &f.store;
        let mut g = Graph::new();
        let x = g.constant(Tensor::random_uniform(&[5, 8], -2.0, 2.0, 4));
        let ones = g.constant(Tensor::ones(&[5, 8]));
        let a = f.block.inject_normalize(&mut g, s, x, Some(ones)).unwrap();
        let b = f.block.inject_normalize(&mut g, s, x, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let zero = g.constant(Tensor::zeros(&[5, 8]));
        let z = f.block.inject_normalize(&mut g, s, x, Some(zero)).unwrap();
        let bias = s.value(f.block.ln_bias);
        for r in 0..5 {
            assert_eq!(g.value(z).row(r), bias.data());
        }
    }

    #[test]
    fn inject_normalize_gradients() {
        for seed in 0..5 {
            let mut s = ParamStore::new(seed);
            let block = CorrespondenceBlock::new(&mut s, "b", &mini()).unwrap();
            let u = InitScheme::Uniform { lo: -1.0, hi: 1.0 };
            let x = s.add("x", &[5, 8], u.clone()).unwrap();
            let l = s.add("l", &[5, 8], u).unwrap();
            let probe = Tensor::random_uniform(&[5, 8], -1.0, 1.0, seed);
            let r = GradCheck::new(1e-5)
                .params(&[x, l, block.ln_gain, block.ln_bias])
                .run(&mut s, |g, s| {
                    let (xv, lv) = (g.param(s, x), g.param(s, l));
                    let y = block.inject_normalize(g, s, xv, Some(lv))?;
                    let p = g.constant(probe.clone());
                    let y = g.mul(y, p)?;
                    Ok(g.sum(y))
                })
                .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn branch_projection_examples() {
        let cfg = mini();
        let f = fixture(&cfg, 5);
        let s = &f.store;
        let mut g = Graph::new();
        let xt = Tensor::random_uniform(&[5, 8], -1.0, 1.0, 6);
        let x = g.constant(xt.clone());
        let rr = g.reverse_rows(x).unwrap();
        let rr = g.reverse_rows(rr).unwrap();
        assert_eq!(g.value(rr), &xt);

        let zero = g.constant(Tensor::zeros(&[5, 8]));
        let (v, xf, xb) = f.block.branch_projections(&mut g, s, zero).unwrap();
        for o in [v, xf.unwrap(), xb.unwrap()] {
            assert!(g.value(o).data().iter().all(|&e| e == 0.0));
        }

        // X_b(x) is the forward-style projection with W_b applied to Rev(x)
        let (_, _, xb) = f.block.branch_projections(&mut g, s, x).unwrap();
        let bwd = f.block.bwd.as_ref().unwrap();
        let flipped = g.constant(Tensor::from_fn(&[5, 8], |i| xt.data()[(4 - i / 8) * 8 + i % 8]));
        let h = bwd.proj.forward(&mut g, s, flipped).unwrap();
        let want = g.gelu(h);
        assert_eq!(g.value(xb.unwrap()), g.value(want));
    }

    #[test]
    fn bidirectional_ssm_examples() {
        let cfg = mini();
        let f = fixture(&cfg, 7);
        let s = &f.store;
        let mut g = Graph::new();
        let zero = g.constant(Tensor::zeros(&[5, 8]));
        let (uf, ub) = f.block.bidirectional_ssm(&mut g, s, zero, zero).unwrap();
        assert!(g.value(uf).data().iter().chain(g.value(ub).data()).all(|&e| e == 0.0));

        let xt = Tensor::random_uniform(&[5, 8], -1.0, 1.0, 8);
        let x = g.constant(xt.clone());
        let base = f.block.forward_ssm(&mut g, s, x).unwrap();
        let scaled = g.constant(xt.map(|v| 2.5 * v));
        let y = f.block.forward_ssm(&mut g, s, scaled).unwrap();
        let want = g.value(base).map(|v| 2.5 * v);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }

    /// Rows whose values changed between two tensors.
    fn changed_rows(a: &Tensor, b: &Tensor) -> Vec<usize> {
        (0..a.rows()).filter(|&r| a.row(r) != b.row(r)).collect()
    }

    #[test]
    fn directional_information_flow() {
        let cfg = mini();
        let f = fixture(&cfg, 9);
        let s = &f.store;
        let xt = Tensor::random_uniform(&[5, 8], -1.0, 1.0, 10);
        for t in 0..5 {
            let mut pt = xt.clone();
            pt.set(&[t, 3], pt.at(&[t, 3]) + 0.5);
            let mut g = Graph::new();
            let mut outs = Vec::new();
            for x in [&xt, &pt] {
                let xv = g.constant(x.clone());
                let (_, xf, xb) = f.block.branch_projections(&mut g, s, xv).unwrap();
                let (uf, ub) = f.block.bidirectional_ssm(&mut g, s, xf.unwrap(), xb.unwrap()).unwrap();
                let ub_fwd = g.reverse_rows(ub).unwrap();
                let m = f.block.correspondence_map(&mut g, s, uf, ub).unwrap();
                let v = g.constant(Tensor::random_uniform(&[5, 8], -1.0, 1.0, 11));
                let xk = CorrespondenceBlock::update_tokens(&mut g, m, v).unwrap();
                outs.push((g.value(uf).clone(), g.value(ub_fwd).clone(), g.value(xk).clone()));
            }
            let (a, b) = (&outs[0], &outs[1]);
            assert_eq!(changed_rows(&a.0, &b.0), (t..5).collect::<Vec<_>>());
            assert_eq!(changed_rows(&a.1, &b.1), (0..=t).collect::<Vec<_>>());
            assert_eq!(changed_rows(&a.2, &b.2), (0..5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn correspondence_map_examples() {
        let cfg = mini();
        let f = fixture(&cfg, 12);
        let mut s = f.store.clone();
        let Some(CorrWeights::Channel(wc)) = f.block.corr else { panic!() };
        s.set_value(wc, Tensor::ones(&[8])).unwrap();
        let mut g = Graph::new();
        let onehot = |rows: &[(usize, usize)]| {
            let mut t = Tensor::zeros(&[5, 8]);
            for &(r, c) in rows {
                t.set(&[r, c], 1.0);
            }
            t
        };
        let uf = g.constant(onehot(&[(1, 2), (3, 5)]));
        // U_b arrives in reversed order: row 4 − j of U_b is keypoint j
        let ub = g.constant(onehot(&[(4 - 0, 2), (4 - 2, 6)]));
        let m = f.block.correspondence_map(&mut g, &s, uf, ub).unwrap();
        let mv = g.value(m);
        assert_eq!(mv.at(&[1, 0]), 1.0);
        assert_eq!(mv.at(&[3, 2]), 0.0);
        assert_eq!(mv.at(&[1, 2]), 0.0);
    }

    #[test]
    fn correspondence_map_bilinearity() {
        for corr_map in [CorrMap::Channel, CorrMap::Bilinear] {
            let cfg = Config { corr_map, ..mini() };
            let f = fixture(&cfg, 13);
            let s = &f.store;
            let mut g = Graph::new();
            let (a, b) = (Tensor::random_uniform(&[5, 8], -1.0, 1.0, 1), Tensor::random_uniform(&[5, 8], -1.0, 1.0, 2));
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            let base = f.block.correspondence_map(&mut g, s, av, bv).unwrap();
            let base = g.value(base).clone();
            for alpha in [2.0, -0.5, 0.25] {
                let sa = g.constant(a.map(|v| alpha * v));
                let m1 = f.block.correspondence_map(&mut g, s, sa, bv).unwrap();
                let sb = g.constant(b.map(|v| alpha * v));
                let m2 = f.block.correspondence_map(&mut g, s, av, sb).unwrap();
                let want = base.map(|v| alpha * v);
                assert!(g.value(m1).max_abs_diff(&want) < 1e-12);
                assert!(g.value(m2).max_abs_diff(&want) < 1e-12);
            }
        }
    }

    #[test]
    fn update_tokens_routing() {
        let mut g = Graph::new();
        let vt = Tensor::random_uniform(&[5, 8], -1.0, 1.0, 3);
        let v = g.constant(vt.clone());
        let i = g.constant(Tensor::eye(5));
        let y = CorrespondenceBlock::update_tokens(&mut g, i, v).unwrap();
        assert_eq!(g.value(y), &vt);
        let z = g.constant(Tensor::zeros(&[5, 5]));
        let y = CorrespondenceBlock::update_tokens(&mut g, z, v).unwrap();
        assert!(g.value(y).data().iter().all(|&e| e == 0.0));
        let perm = [3, 0, 4, 1, 2];
        let mut p = Tensor::zeros(&[5, 5]);
        for (i, &j) in perm.iter().enumerate() {
            p.set(&[i, j], 1.0);
        }
        let pv = g.constant(p);
        let y = CorrespondenceBlock::update_tokens(&mut g, pv, v).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(g.value(y).row(i), vt.row(j));
        }
    }

    #[test]
    fn gate_midpoint_when_filter_output_is_zero() {
        let cfg = mini();
        let f = fixture(&cfg, 14);
        let mut s = f.store.clone();
        let filt = f.block.filter.as_ref().unwrap();
        for id in filt.mlp.param_ids() {
            let shape = s.value(id).shape().to_vec();
            s.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let (st, tr, _) = run(&f, &mut g, &s).unwrap();
        assert!(g.value(tr.gate.unwrap()).data().iter().all(|&v| v == 0.5));
        let half = g.value(tr.updated).map(|v| 0.5 * v);
        let want = half.data().chunks(8).flat_map(|row| {
            let w = s.value(f.w_r);
            (0..3).map(move |c| (0..8).map(|i| row[i] * w.at(&[i, c])).sum::<f64>())
        });
        for (a, b) in g.value(st.positions).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_tokens_invariances() {
        let cfg = Config { local_k: 3, ..mini() };
        let f = fixture(&cfg, 15);
        let s = &f.store;
        let agg = f.block.inject.as_ref().unwrap();
        let feats = s.value(f.sp_feats).clone();
        let pos = s.value(f.positions).clone();
        let tok = s.value(f.tokens).clone();
        let eval = |coords: &Tensor, feats: &Tensor, pos: &Tensor| {
            let mut g = Graph::new();
            let sp = constant_superpoints(&mut g, coords.clone(), feats.clone(), [3, 2, 1]);
            let p = g.constant(pos.clone());
            let t = g.constant(tok.clone());
            let nb = knn(pos, coords, 3).unwrap();
            let y = agg.forward(&mut g, s, p, t, &sp, &nb).unwrap();
            g.value(y).clone()
        };
        let base = eval(&f.sp_coords, &feats, &pos);

        let shift = |t: &Tensor| t.map(|v| v + 0.4);
        assert!(eval(&shift(&f.sp_coords), &feats, &shift(&pos)).max_abs_diff(&base) < 1e-12);

        let m = cfg.super_points;
        let perm: Vec<usize> = (0..m).map(|i| (i * 7 + 2) % m).collect();
        let pick = |t: &Tensor| {
            let c = t.cols();
            Tensor::from_fn(t.shape(), |i| t.data()[perm[i / c] * c + i % c])
        };
        assert_eq!(eval(&pick(&f.sp_coords), &pick(&feats), &pos), base);

        let far = pos.map(|v| v + 50.0);
        assert!(eval(&f.sp_coords, &feats, &far).all_finite());
    }

    fn variants() -> [Config; 5] {
        [
            Config { ssm_type: SsmType::None, ..mini() },
            Config { ssm_type: SsmType::Standard, ..mini() },
            Config { local_inject: false, local_filter: false, ..mini() },
            Config { residual: true, next_tokens: NextTokens::Gated, share_wr: false, ..mini() },
            Config { corr_map: CorrMap::Bilinear, ..mini() },
        ]
    }

    fn block_check(cfg: &Config, seed: u64) -> f64 {
        crate::check::block_gradient_check(cfg, seed, false).unwrap()
    }

    #[test]
    #[ignore]
    fn margin_scan() {
        let mut worst: f64 = 0.0;
        for seed in 0..60 {
            worst = worst.max(block_check(&mini(), seed));
        }
        eprintln!("worst {worst}");
    }

    #[test]
    fn full_block_gradient_check() {
        for seed in 0..5 {
            let e = block_check(&mini(), seed);
            assert!(e < 1e-4, "seed {seed}: {e}");
        }
    }

    #[test]
    fn ablation_variants_run_and_differentiate() {
        for (i, cfg) in variants().iter().enumerate() {
            for seed in 0..5 {
                let e = block_check(cfg, seed);
                assert!(e < 1e-4, "variant {i} seed {seed}: {e}");
            }
        }
    }
}
