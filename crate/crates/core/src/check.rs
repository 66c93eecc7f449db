//! Registered property suites: dual-form SSM equivalence, finite-difference
//! gradients for every parameterized operation, invariances, exact loss
//! values and the gate range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Widths};
use crate::encoder::{EncoderInput, ImageEncoder, SuperPointEncoder, SuperPointSet};
use crate::mamba::{CorrespondenceBlock, LocalAggregator};
use crate::nn::{Conv2d, Linear, Mlp, ResBlock};
use crate::points::{knn, set_conv, CameraIntrinsics, NeighborIndex, NORM_RADIUS};
use crate::ssm::{apply_kernel, build_kernel, discretize, scan_recurrent, ContinuousSsm, SsmLayer};
use crate::tensor::{GradCheck, Graph, InitScheme, ParamId, ParamStore, Tensor, Var};
use crate::tokens::{BilLayer, GlobalEncoder, KeypointState, TokenInit};
use crate::train::{augment_sample, smooth_l1, AugmentationConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_error.is_finite() && self.max_error <= self.tolerance
    }
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<12} {:<20} max_error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckOptions {
    /// Name of a gradient operation whose analytic gradient is deliberately
    /// offset, as a negative control.
    pub fault: Option<String>,
    pub seeds: u64,
}

impl CheckOptions {
    pub fn new() -> Self {
        Self { fault: None, seeds: 5 }
    }
}

/// Moves a parameter store to a well-conditioned point for finite differences:
/// weight matrices keep their Xavier scale, every other tensor is drawn from
/// `[−1, 1]`, with SSM rate parameters kept where the decay stays moderate.
pub fn gradcheck_point(store: &mut ParamStore, seed: u64) {
    let mut shifted = store.clone();
    shifted.randomize(seed, -1.0, 1.0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let v = shifted.value(id);
        let v = if name.ends_with(".log_a") {
            v.map(|x| 0.5 * x)
        } else if name.ends_with(".log_dt") {
            v.map(|x| 0.5 * x - 0.5)
        } else if name.ends_with(".w") {
            continue;
        } else {
            v.clone()
        };
        store.set_value(id, v).expect("same shape");
    }
}

fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let p = g.constant(Tensor::random_uniform(g.shape(y), -1.0, 1.0, seed ^ 0xabcd));
    let a = g.mul(p, y)?;
    let sq = g.mul(y, y)?;
    let sq = g.scale(sq, 0.5);
    let s = g.add(a, sq)?;
    Ok(g.sum(s))
}

fn checker(perturb: bool) -> GradCheck {
    let g = GradCheck::new(1e-5);
    if perturb {
        g.perturb_analytic(1e-3)
    } else {
        g
    }
}

fn uniform(store: &mut ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    store.add(name, shape, InitScheme::Uniform { lo: -1.0, hi: 1.0 })
}

/// Miniature block configuration: J=5, C=8, M=16, k=4.
pub fn miniature() -> Config {
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

/// A block with learnable inputs, for gradient and range checks.
pub struct BlockFixture {
    pub store: ParamStore,
    pub block: CorrespondenceBlock,
    pub w_r: ParamId,
    pub tokens: ParamId,
    pub positions: ParamId,
    pub sp_feats: ParamId,
    pub sp_coords: Tensor,
    pub widths: [usize; 3],
}

impl BlockFixture {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let block = CorrespondenceBlock::new(&mut store, "blk", cfg)?;
        let c = cfg.token_width();
        let w_r = store.add("w_r", &[c, 3], InitScheme::XavierUniform)?;
        let tokens = uniform(&mut store, "x0", &[cfg.joints, c])?;
        let positions = uniform(&mut store, "j0", &[cfg.joints, 3])?;
        let sp_feats = uniform(&mut store, "f", &[cfg.super_points, cfg.fused_width()])?;
        Ok(Self {
            store,
            block,
            w_r,
            tokens,
            positions,
            sp_feats,
            sp_coords: Tensor::random_uniform(&[cfg.super_points, 3], -1.0, 1.0, seed + 1000),
            widths: [cfg.point_mlp.last(), cfg.depth_channels, cfg.rgb_channels],
        })
    }

    pub fn run(&self, g: &mut Graph, s: &ParamStore) -> Result<(KeypointState, crate::mamba::BlockTrace)> {
        let prev = KeypointState {
            tokens: g.param(s, self.tokens),
            positions: g.param(s, self.positions),
            stage: 0,
        };
        let sp = SuperPointSet {
            coords: self.sp_coords.clone(),
            feats: g.param(s, self.sp_feats),
            widths: self.widths,
            source_index: Vec::new(),
        };
        self.block.forward(g, s, &prev, &sp, self.w_r)
    }
}

/// Smooth-L1 supervision of one block's output, checked at a conditioned point.
pub fn block_gradient_check(cfg: &Config, seed: u64, perturb: bool) -> Result<f64> {
    let mut f = BlockFixture::new(cfg, seed)?;
    gradcheck_point(&mut f.store, seed + 77);
    let gt = Tensor::random_uniform(&[cfg.joints, 3], -1.0, 1.0, seed + 5);
    let mut store = std::mem::replace(&mut f.store, ParamStore::new(0));
    let r = checker(perturb).run(&mut store, |g, s| {
        let (st, _) = f.run(g, s)?;
        let t = g.constant(gt.clone());
        let d = g.sub(st.positions, t)?;
        let l = g.smooth_l1(d);
        Ok(g.sum(l))
    })?;
    Ok(r.max_rel_error)
}

type GradProbe = fn(u64, bool) -> Result<f64>;

fn op_linear(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let l = Linear::new(&mut s, "lin", 4, 3, true)?;
    let x = uniform(&mut s, "x", &[6, 4])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let r = checker(perturb).run(&mut s, |g, s| {
        let xv = g.param(s, x);
        let y = l.forward(g, s, xv)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_mlp(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let m = Mlp::new(&mut s, "mlp", 3, &[5, 2])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let x = Tensor::random_uniform(&[8, 3], -1.0, 1.0, seed);
    let r = checker(perturb).run(&mut s, |g, s| {
        let xv = g.constant(x.clone());
        let y = m.forward(g, s, xv)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_conv2d(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let c = Conv2d::new(&mut s, "conv", 2, 3, 3, 2)?;
    let x = uniform(&mut s, "x", &[36, 2])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let r = checker(perturb).run(&mut s, |g, s| {
        let xv = g.param(s, x);
        let (y, ..) = c.forward(g, s, xv, 6, 6)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_resblock(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let b = ResBlock::new(&mut s, "res", 2)?;
    let x = uniform(&mut s, "x", &[12, 2])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let r = checker(perturb).run(&mut s, |g, s| {
        let xv = g.param(s, x);
        let y = b.forward(g, s, xv, 3, 4)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_layer_norm(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let gain = uniform(&mut s, "gain", &[4])?;
    let bias = uniform(&mut s, "bias", &[4])?;
    let x = uniform(&mut s, "x", &[5, 4])?;
    let r = checker(perturb).run(&mut s, |g, s| {
        let (xv, gv, bv) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
        let y = g.layer_norm(xv, gv, bv, 1e-5)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_ssm(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let l = SsmLayer::new(&mut s, "ssm", 3, 4)?;
    let x = uniform(&mut s, "x", &[7, 3])?;
    s.randomize(seed + 100, -1.0, 1.0);
    let r = checker(perturb).run(&mut s, |g, s| {
        let xv = g.param(s, x);
        let y = l.forward(g, s, xv)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_set_conv(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let m = Mlp::new(&mut s, "sc", 3 + 2, &[4, 3])?;
    let src = uniform(&mut s, "src", &[10, 3])?;
    let feats = uniform(&mut s, "feats", &[10, 2])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let centers = Tensor::random_uniform(&[3, 3], -1.0, 1.0, seed + 2);
    let nb = knn(&centers, s.value(src), 3)?;
    let r = checker(perturb).run(&mut s, |g, s| {
        let c = g.constant(centers.clone());
        let (sv, fv) = (g.param(s, src), g.param(s, feats));
        let y = set_conv(g, s, &m, c, sv, &nb, Some(fv), None)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_bil(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let b = BilLayer::new(&mut s, "bil", 4, 3, 5)?;
    let h = uniform(&mut s, "h", &[4, 3])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let r = checker(perturb).run(&mut s, |g, s| {
        let hv = g.param(s, h);
        let y = b.forward(g, s, hv)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_token_init(seed: u64, perturb: bool) -> Result<f64> {
    let cfg = Config {
        joints: 4,
        bil_widths: Widths(vec![6, 6, 5]),
        ..Config::default()
    };
    let mut s = ParamStore::new(seed);
    let t = TokenInit::new(&mut s, &cfg, 7)?;
    let gvec = uniform(&mut s, "global", &[1, 7])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let r = checker(perturb).run(&mut s, |g, s| {
        let gv = g.param(s, gvec);
        let st = t.forward(g, s, gv)?;
        let a = probe(g, st.positions, seed)?;
        let b = probe(g, st.tokens, seed + 1)?;
        g.add(a, b)
    })?;
    Ok(r.max_rel_error)
}

fn op_global(seed: u64, perturb: bool) -> Result<f64> {
    let cfg = Config {
        super_points: 12,
        encoder_k: 4,
        global_mlp1: Widths(vec![5]),
        global_mlp2: Widths(vec![4]),
        ..miniature()
    };
    let mut s = ParamStore::new(seed);
    let enc = GlobalEncoder::new(&mut s, &cfg)?;
    let feats = uniform(&mut s, "f", &[12, cfg.fused_width()])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let coords = Tensor::random_uniform(&[12, 3], -1.0, 1.0, seed + 2);
    let widths = [cfg.point_mlp.last(), cfg.depth_channels, cfg.rgb_channels];
    let r = checker(perturb).run(&mut s, |g, s| {
        let sp = SuperPointSet {
            coords: coords.clone(),
            feats: g.param(s, feats),
            widths,
            source_index: Vec::new(),
        };
        let y = enc.forward(g, s, &sp)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_local_aggregator(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let a = LocalAggregator::new(&mut s, "loc", 3, 4, 5)?;
    let pos = uniform(&mut s, "pos", &[5, 3])?;
    let tok = uniform(&mut s, "tok", &[5, 4])?;
    let feats = uniform(&mut s, "f", &[9, 3])?;
    s.randomize(seed + 1, -1.0, 1.0);
    let coords = Tensor::random_uniform(&[9, 3], -1.0, 1.0, seed + 2);
    let nb: NeighborIndex = knn(s.value(pos), &coords, 3)?;
    let r = checker(perturb).run(&mut s, |g, s| {
        let sp = SuperPointSet {
            coords: coords.clone(),
            feats: g.param(s, feats),
            widths: [1, 1, 1],
            source_index: Vec::new(),
        };
        let (p, t) = (g.param(s, pos), g.param(s, tok));
        let y = a.forward(g, s, p, t, &sp, &nb)?;
        probe(g, y, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_image_encoder(seed: u64, perturb: bool) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let e = ImageEncoder::new(&mut s, "img", 1, (2, 3), 2, true)?;
    s.randomize(seed + 1, -0.5, 0.5);
    let img = Tensor::random_uniform(&[64, 1], -1.0, 1.0, seed);
    let r = checker(perturb).max_per_param(12).run(&mut s, |g, s| {
        let x = g.constant(img.clone());
        let f = e.encode(g, s, x, 8, 8)?;
        let a = probe(g, f.map, seed)?;
        let rec = e.reconstruct(g, s, &f)?.ok_or_else(|| crate::Error::contract("no reconstruction head"))?;
        let b = probe(g, rec, seed + 1)?;
        g.add(a, b)
    })?;
    Ok(r.max_rel_error)
}

fn op_superpoint_encoder(seed: u64, perturb: bool) -> Result<f64> {
    let cfg = Config {
        image_size: 8,
        num_points: 24,
        super_points: 6,
        encoder_k: 4,
        point_mlp: Widths(vec![3]),
        ae_widths: Widths(vec![2, 2]),
        depth_channels: 2,
        rgb_channels: 2,
        ..Config::default()
    };
    let mut s = ParamStore::new(seed);
    let e = SuperPointEncoder::new(&mut s, &cfg)?;
    s.randomize(seed + 1, -0.5, 0.5);
    let points = Tensor::random_uniform(&[24, 3], -1.0, 1.0, seed + 2);
    let cam = Tensor::from_fn(&[24, 3], |i| points.data()[i] * NORM_RADIUS + if i % 3 == 2 { 0.5 } else { 0.0 });
    let input = EncoderInput {
        points,
        points_cam: cam,
        depth: Tensor::random_uniform(&[64, 1], 0.0, 1.0, seed + 3),
        rgb: Some(Tensor::random_uniform(&[64, 3], -0.5, 0.5, seed + 4)),
        hw: (8, 8),
        intr: CameraIntrinsics::new(10.0, 10.0, 3.5, 3.5, 1e-4)?,
    };
    let r = checker(perturb).max_per_param(12).run(&mut s, |g, s| {
        let sp = e.forward(g, s, &input)?;
        probe(g, sp.feats, seed)
    })?;
    Ok(r.max_rel_error)
}

fn op_block(seed: u64, perturb: bool) -> Result<f64> {
    block_gradient_check(&miniature(), seed, perturb)
}

pub const GRADIENT_OPS: &[(&str, GradProbe)] = &[
    ("linear", op_linear),
    ("mlp", op_mlp),
    ("conv2d", op_conv2d),
    ("resblock", op_resblock),
    ("layer_norm", op_layer_norm),
    ("ssm_layer", op_ssm),
    ("set_conv", op_set_conv),
    ("bil", op_bil),
    ("token_init", op_token_init),
    ("global_encoder", op_global),
    ("local_aggregator", op_local_aggregator),
    ("image_encoder", op_image_encoder),
    ("superpoint_enc", op_superpoint_encoder),
    ("block_forward", op_block),
];

pub fn gradient_suite(opts: &CheckOptions) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (name, f) in GRADIENT_OPS {
        let perturb = opts.fault.as_deref() == Some(*name);
        let mut worst: f64 = 0.0;
        for seed in 0..opts.seeds.max(1) {
            worst = worst.max(f(seed, perturb)?);
        }
        out.push(SuiteResult {
            suite: "gradient",
            name: name.to_string(),
            max_error: worst,
            tolerance: 1e-4,
        });
    }
    Ok(out)
}

/// Random stable diagonal SSM with log-uniform steps.
pub fn random_continuous(rng: &mut ChaCha8Rng, channels: usize, n: usize) -> Result<(ContinuousSsm, Vec<f64>)> {
    let cn = channels * n;
    let ssm = ContinuousSsm::new(
        channels,
        n,
        (0..cn).map(|_| -rng.gen_range(0.05..5.0)).collect(),
        (0..cn).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..cn).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let dt = (0..channels).map(|_| rng.gen_range(1e-3f64.ln()..1f64.ln()).exp()).collect();
    Ok((ssm, dt))
}

/// Max `|scan − conv|` over `count` random SSMs with `N=16, C=8, L=21`.
pub fn dual_form_error(count: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let (ssm, dt) = random_continuous(&mut rng, 8, 16)?;
        let d = discretize(&ssm, &dt)?;
        let u = Tensor::random_uniform(&[21, 8], -1.0, 1.0, seed.wrapping_add(i as u64));
        let rec = scan_recurrent(&d, &u)?;
        let conv = apply_kernel(&build_kernel(&d, 21)?, &u)?;
        worst = worst.max(rec.max_abs_diff(&conv));
    }
    Ok(worst)
}

fn set_conv_permutation(seed: u64) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let m = Mlp::new(&mut s, "sc", 3 + 2, &[6, 4])?;
    s.randomize(seed, -1.0, 1.0);
    let src = Tensor::random_uniform(&[30, 3], -1.0, 1.0, seed + 1);
    let feats = Tensor::random_uniform(&[30, 2], -1.0, 1.0, seed + 2);
    let centers = Tensor::random_uniform(&[5, 3], -1.0, 1.0, seed + 3);
    let nb = knn(&centers, &src, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = nb.clone();
    for c in 0..nb.centers {
        let row = &mut shuffled.indices[c * nb.k..(c + 1) * nb.k];
        for i in (1..row.len()).rev() {
            row.swap(i, rng.gen_range(0..=i));
        }
    }
    let mut g = Graph::new();
    let (c, sv, fv) = (g.constant(centers), g.constant(src), g.constant(feats));
    let a = set_conv(&mut g, &s, &m, c, sv, &nb, Some(fv), None)?;
    let b = set_conv(&mut g, &s, &m, c, sv, &shuffled, Some(fv), None)?;
    Ok(g.value(a).max_abs_diff(g.value(b)))
}

fn knn_brute_force(seed: u64) -> Result<f64> {
    let src = Tensor::random_uniform(&[500, 3], -1.0, 1.0, seed);
    let centers = Tensor::random_uniform(&[20, 3], -1.0, 1.0, seed + 1);
    let k = 8;
    let nb = knn(&centers, &src, k)?;
    let mut mismatches = 0usize;
    for c in 0..20 {
        let q = centers.row(c);
        let mut all: Vec<(f64, usize)> = (0..500)
            .map(|i| {
                let p = src.row(i);
                ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i)
            })
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut want: Vec<usize> = all[..k].iter().map(|x| x.1).collect();
        let mut got = nb.row(c).to_vec();
        want.sort_unstable();
        got.sort_unstable();
        mismatches += (want != got) as usize;
    }
    Ok(mismatches as f64)
}

fn reverse_involution(seed: u64) -> Result<f64> {
    let x = Tensor::random_uniform(&[21, 8], -1.0, 1.0, seed);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let r = g.reverse_rows(v)?;
    let rr = g.reverse_rows(r)?;
    let mut err = g.value(rr).max_abs_diff(&x);
    let n = x.rows();
    for i in 0..n {
        for (a, b) in g.value(r).row(i).iter().zip(x.row(n - 1 - i)) {
            err = err.max((a - b).abs());
        }
    }
    Ok(err)
}

/// Relative deviation from bilinearity of `M(U_f, U_b)` in both arguments.
pub fn corr_map_bilinearity(cfg: &Config, seed: u64) -> Result<f64> {
    let mut s = ParamStore::new(seed);
    let block = CorrespondenceBlock::new(&mut s, "blk", cfg)?;
    s.randomize(seed, -1.0, 1.0);
    let (j, c) = (cfg.joints, cfg.token_width());
    let t = |k: u64| Tensor::random_uniform(&[j, c], -1.0, 1.0, seed * 10 + k);
    let (u1, u2, b1, b2) = (t(1), t(2), t(3), t(4));
    let (a, b) = (0.7, -1.3);
    let mut g = Graph::new();
    let m = |g: &mut Graph, x: &Tensor, y: &Tensor| -> Result<Tensor> {
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let out = block.correspondence_map(g, &s, xv, yv)?;
        Ok(g.value(out).clone())
    };
    let lin = |x: &Tensor, y: &Tensor| Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
    let left = m(&mut g, &lin(&u1, &u2), &b1)?;
    let left_ref = lin(&m(&mut g, &u1, &b1)?, &m(&mut g, &u2, &b1)?);
    let right = m(&mut g, &u1, &lin(&b1, &b2))?;
    let right_ref = lin(&m(&mut g, &u1, &b1)?, &m(&mut g, &u1, &b2)?);
    let scale = left_ref.data().iter().chain(right_ref.data()).fold(1.0f64, |m, v| m.max(v.abs()));
    Ok(left.max_abs_diff(&left_ref).max(right.max_abs_diff(&right_ref)) / scale)
}

fn augmentation_isometry(seed: u64) -> Result<f64> {
    let cfg = AugmentationConfig {
        rotation_deg: 180.0,
        scale: (0.9, 1.1),
        translation_mm: 10.0,
        seed,
    };
    let t = cfg.draw_for(1, seed as usize);
    let p = Tensor::random_uniform(&[40, 3], -0.1, 0.6, seed);
    let j = Tensor::random_uniform(&[21, 3], -0.1, 0.6, seed + 1);
    let (p2, j2) = augment_sample(&p, &j, &t);
    let mut worst: f64 = 0.0;
    for a in 0..j.rows() {
        for b in 0..p.rows() {
            let d = |x: &Tensor, y: &Tensor| {
                let (u, v) = (x.row(a), y.row(b));
                ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt()
            };
            worst = worst.max((t.scale * d(&j, &p) - d(&j2, &p2)).abs());
        }
    }
    Ok(worst)
}

pub fn invariance_suite(seeds: u64) -> Result<Vec<SuiteResult>> {
    let cfg = miniature();
    let items: [(&str, &dyn Fn(u64) -> Result<f64>); 5] = [
        ("set_conv_perm", &set_conv_permutation),
        ("knn_brute_force", &knn_brute_force),
        ("reverse_involution", &reverse_involution),
        ("corr_bilinearity", &|s| corr_map_bilinearity(&cfg, s)),
        ("augment_isometry", &augmentation_isometry),
    ];
    let mut out = Vec::new();
    for (name, f) in items {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds.max(1) {
            worst = worst.max(f(seed)?);
        }
        out.push(SuiteResult {
            suite: "invariance",
            name: name.into(),
            max_error: worst,
            tolerance: 1e-12,
        });
    }
    Ok(out)
}

pub fn smooth_l1_error() -> f64 {
    let x: f64 = 0.01;
    [
        (smooth_l1(0.0), 0.0),
        (smooth_l1(0.005), 0.0025),
        (smooth_l1(0.1), 0.095),
        (0.5 * x.abs(), 0.005),
        (x.abs() - 0.005, 0.005),
        (smooth_l1(x), 0.005),
    ]
    .iter()
    .map(|(a, b)| (a - b).abs())
    .fold(0.0, f64::max)
}

/// Evaluates the filter gate on `count` random blocks; returns
/// `(min, max, evaluations)` over all entries.
pub fn gate_range(count: u64, seed: u64) -> Result<(f64, f64, u64)> {
    let cfg = miniature();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..count {
        let mut f = BlockFixture::new(&cfg, seed + i)?;
        let scale = [1.0, 5.0, 50.0][(i % 3) as usize];
        f.store.randomize(seed + i + 1, -scale, scale);
        let mut g = Graph::new();
        let (_, trace) = f.run(&mut g, &f.store)?;
        let gate = trace.gate.ok_or_else(|| crate::Error::contract("block has no filter"))?;
        for &v in g.value(gate).data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo, hi, count))
}

pub fn run_all(opts: &CheckOptions) -> Result<Vec<SuiteResult>> {
    let mut out = vec![SuiteResult {
        suite: "ssm",
        name: "dual_form".into(),
        max_error: dual_form_error(100, 1)?,
        tolerance: 1e-9,
    }];
    out.extend(gradient_suite(opts)?);
    out.extend(invariance_suite(opts.seeds)?);
    out.push(SuiteResult {
        suite: "loss",
        name: "smooth_l1_exact".into(),
        max_error: smooth_l1_error(),
        tolerance: 0.0,
    });
    let (lo, hi, _) = gate_range(1000, 7)?;
    out.push(SuiteResult {
        suite: "gate",
        name: "open_interval".into(),
        max_error: if lo > 0.0 && hi < 1.0 { 0.0 } else { 1.0 },
        tolerance: 0.0,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let results = run_all(&CheckOptions::new()).unwrap();
        for r in &results {
            assert!(r.passed(), "{r}");
        }
        assert!(results.iter().any(|r| r.name == "block_forward"));
    }

    #[test]
    fn injected_fault_names_the_operation() {
        let opts = CheckOptions {
            fault: Some("ssm_layer".into()),
            seeds: 1,
        };
        let results = gradient_suite(&opts).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, ["ssm_layer"]);
    }
}
