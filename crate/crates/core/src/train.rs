//! Multi-stage loss, AdamW, similarity augmentation and keypoint error metrics.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, LossMode};
use crate::encoder::EncoderInput;
use crate::model::HandModel;
use crate::tensor::{smooth_l1_scalar, Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// `0.5|x|` below the knee at 0.01, `|x| − 0.005` above it.
pub fn smooth_l1(x: f64) -> f64 {
    smooth_l1_scalar(x)
}

/// Deep supervision over all stages: `Σ_k Σ_j ℓ(j_{k,j} − j*_j)`.
///
/// `Coord` applies the scalar loss per coordinate and sums the three; `Norm`
/// applies it to the Euclidean length of each joint residual.
pub fn total_loss(g: &mut Graph, stages: &[Var], gt: Var, expected_stages: usize, mode: LossMode) -> Result<Var> {
    if stages.len() != expected_stages {
        return Err(Error::contract(format!(
            "loss expects {expected_stages} stage outputs, got {}",
            stages.len()
        )));
    }
    let mut total: Option<Var> = None;
    for &s in stages {
        let d = g.sub(s, gt)?;
        let d = match mode {
            LossMode::Coord => d,
            LossMode::Norm => g.row_norm(d)?,
        };
        let l = g.smooth_l1(d);
        let l = g.sum(l);
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::contract("loss needs at least one stage"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 1-based epoch from which the learning rate is multiplied by `lr_decay`.
    pub decay_epoch: usize,
    pub lr_decay: f64,
    /// Global gradient-norm bound applied before each update; 0 disables it.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_epoch: 19,
            lr_decay: 0.1,
            grad_clip: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            decay_epoch: cfg.decay_epoch,
            lr_decay: cfg.lr_decay,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Step-decay schedule; `epoch` counts from 1.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.decay_epoch > 0 && epoch >= self.decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }
}

/// Euclidean norm of all accumulated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|p| p.has_grad())
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub hyper: AdamConfig,
    pub lr: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, hyper: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            lr: hyper.lr,
            hyper,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.hyper.lr_at_epoch(epoch);
    }

    /// Applies one update to every parameter that received a gradient and
    /// returns the names of those that did not.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<Vec<String>> {
        if store.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let lr = self.lr;
        let clip = if self.hyper.grad_clip > 0.0 {
            let norm = grad_norm(store);
            if norm > self.hyper.grad_clip {
                self.hyper.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let mut skipped = Vec::new();
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.has_grad() {
                skipped.push(p.name.clone());
                continue;
            }
            if p.value.shape() != self.m[i].shape() {
                return Err(Error::dim("optimizer_step", p.value.shape(), self.m[i].shape()));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = p.grad.data().to_vec();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = grad[j] * clip;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(skipped)
    }
}

/// Range of the random similarity applied to each training sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationConfig {
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub translation_mm: f64,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            rotation_deg: cfg.aug_rotation_deg,
            scale: (cfg.aug_scale_min, cfg.aug_scale_max),
            translation_mm: cfg.aug_translation_mm,
            seed: cfg.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi) || self.rotation_deg < 0.0 || self.translation_mm < 0.0 {
            return Err(Error::Config(format!("ill-ordered augmentation ranges: {self:?}")));
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Similarity {
        let r = self.rotation_deg.to_radians();
        let t = self.translation_mm / 1000.0;
        let uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Similarity {
            angle: uniform(rng, -r, r),
            scale: uniform(rng, self.scale.0, self.scale.1),
            shift: [uniform(rng, -t, t), uniform(rng, -t, t), uniform(rng, -t, t)],
        }
    }

    /// The draw for `(epoch, sample)`, independent of iteration order.
    pub fn draw_for(&self, epoch: usize, sample: usize) -> Similarity {
        let key = self.seed ^ ((epoch as u64) << 32) ^ (sample as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        self.draw(&mut ChaCha8Rng::seed_from_u64(key))
    }
}

/// `p ↦ s·R_z(θ)·p + t`, in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub angle: f64,
    pub scale: f64,
    pub shift: [f64; 3],
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            scale: 1.0,
            shift: [0.0; 3],
        }
    }

    pub fn apply(&self, pts: &Tensor) -> Tensor {
        let (s, c) = self.angle.sin_cos();
        let k = self.scale;
        let mut out = pts.clone();
        for row in out.data_mut().chunks_exact_mut(3) {
            let [x, y, z] = [row[0], row[1], row[2]];
            row[0] = k * (c * x - s * y) + self.shift[0];
            row[1] = k * (s * x + c * y) + self.shift[1];
            row[2] = k * z + self.shift[2];
        }
        out
    }
}

/// Applies one similarity identically to a lifted cloud and its joints.
pub fn augment_sample(points: &Tensor, joints: &Tensor, t: &Similarity) -> (Tensor, Tensor) {
    (t.apply(points), t.apply(joints))
}

/// A prepared training example: network inputs plus joints in the normalized frame.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub input: EncoderInput,
    pub gt: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-sample loss over the batch.
    pub loss: f64,
    pub skipped: Vec<String>,
}

/// Per-sample loss for one forward pass; returns the loss and the final stage.
pub fn sample_loss(g: &mut Graph, model: &HandModel, store: &ParamStore, item: &TrainItem, mode: LossMode) -> Result<(Var, Var)> {
    let pred = model.forward(g, store, &item.input)?;
    let gt = g.constant(item.gt.clone());
    let l = total_loss(g, &pred.stages, gt, model.blocks.len() + 1, mode)?;
    Ok((l, pred.last()))
}

/// One optimizer step on the batch mean of the per-sample losses. Samples are
/// processed in order, so the gradient reduction is deterministic.
pub fn train_step(
    model: &HandModel,
    store: &mut ParamStore,
    opt: &mut OptimizerState,
    batch: &[TrainItem],
    mode: LossMode,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch".into()));
    }
    store.zero_grad();
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for item in batch {
        let mut g = model.graph();
        let (l, _) = sample_loss(&mut g, model, store, item, mode)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("training loss {v}")));
        }
        loss += v * inv;
        let scaled = g.scale(l, inv);
        g.backward(scaled, store)?;
    }
    let skipped = opt.step(store)?;
    Ok(StepStats { loss, skipped })
}

/// One append-only training log line: `epoch, step, loss, lr, wall_ms`.
pub fn log_line(epoch: usize, step: u64, loss: f64, lr: f64, wall_ms: u128) -> String {
    format!("{epoch}, {step}, {loss:?}, {lr:?}, {wall_ms}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mke_mm: f64,
    pub per_joint_mm: Vec<f64>,
    pub samples: usize,
    /// `errors[s][j]` in millimeters.
    pub errors: Vec<Vec<f64>>,
}

/// Mean Euclidean joint error over all samples and joints. Inputs are
/// `[J×3]` sets in millimeters.
pub fn mean_keypoint_error(pred: &[Tensor], gt: &[Tensor]) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let j = gt[0].rows();
    let mut errors = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(gt) {
        if p.shape() != [j, 3] || t.shape() != [j, 3] {
            return Err(Error::dim("mean_keypoint_error", p.shape(), t.shape()));
        }
        errors.push(
            (0..j)
                .map(|r| {
                    let (a, b) = (p.row(r), t.row(r));
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .collect::<Vec<_>>(),
        );
    }
    let s = errors.len() as f64;
    let per_joint_mm: Vec<f64> = (0..j).map(|r| errors.iter().map(|e| e[r]).sum::<f64>() / s).collect();
    let mke_mm = errors.iter().flatten().sum::<f64>() / (s * j as f64);
    Ok(EvalReport {
        mke_mm,
        per_joint_mm,
        samples: errors.len(),
        errors,
    })
}

impl EvalReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples: {}", self.samples);
        let _ = writeln!(out, "mke_mm: {:?}", self.mke_mm);
        for (j, e) in self.per_joint_mm.iter().enumerate() {
            let _ = writeln!(out, "joint_{j:02}_mm: {e:?}");
        }
        out
    }

    /// `sample_id, joint_id, error_mm` rows with a header.
    pub fn to_csv(&self, ids: &[String]) -> String {
        let mut out = String::from("sample_id, joint_id, error_mm\n");
        for (s, row) in self.errors.iter().enumerate() {
            let id = ids.get(s).cloned().unwrap_or_else(|| s.to_string());
            for (j, e) in row.iter().enumerate() {
                let _ = writeln!(out, "{id}, {j}, {e:?}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.005), 0.0025);
        assert_eq!(smooth_l1(0.1), 0.095);
        assert_eq!(smooth_l1(-0.1), 0.095);
        let x: f64 = 0.01;
        assert_eq!(0.5 * x.abs(), 0.005);
        assert_eq!(x.abs() - 0.005, 0.005);
        assert_eq!(smooth_l1(x), 0.005);
    }

    proptest! {
        #[test]
        fn smooth_l1_even_nonnegative_zero_only_at_origin(x in -10.0f64..10.0) {
            let v = smooth_l1(x);
            prop_assert_eq!(v, smooth_l1(-x));
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, x == 0.0);
        }

        #[test]
        fn smooth_l1_lipschitz_one(x in -1.0f64..1.0, dx in -1e-3f64..1e-3) {
            // x + dx and the subtraction each round by up to half an ulp of |x| ≤ 1.
            prop_assert!((smooth_l1(x + dx) - smooth_l1(x)).abs() <= dx.abs() + 4.0 * f64::EPSILON);
        }
    }

    fn loss_value(stages: &[Tensor], gt: &Tensor, expected: usize, mode: LossMode) -> Result<f64> {
        let mut g = Graph::new();
        let s: Vec<Var> = stages.iter().map(|t| g.constant(t.clone())).collect();
        let t = g.constant(gt.clone());
        let l = total_loss(&mut g, &s, t, expected, mode)?;
        Ok(g.value(l).data()[0])
    }

    #[test]
    fn total_loss_examples() {
        let gt = Tensor::random_uniform(&[4, 3], -1.0, 1.0, 1);
        assert_eq!(loss_value(&vec![gt.clone(); 4], &gt, 4, LossMode::Coord).unwrap(), 0.0);

        let one = Tensor::zeros(&[1, 3]);
        let off = Tensor::new(&[1, 3], vec![0.005, 0.0, 0.0]).unwrap();
        assert_eq!(loss_value(&[off], &one, 1, LossMode::Coord).unwrap(), 0.0025);

        let p = Tensor::random_uniform(&[4, 3], -1.0, 1.0, 2);
        let single = loss_value(&[p.clone()], &gt, 1, LossMode::Coord).unwrap();
        let four = loss_value(&vec![p; 4], &gt, 4, LossMode::Coord).unwrap();
        assert!((four - 4.0 * single).abs() <= 4.0 * single * 1e-15);

        assert!(matches!(loss_value(&[gt.clone()], &gt, 4, LossMode::Coord), Err(Error::Contract(_))));
    }

    #[test]
    fn total_loss_is_additive_over_stages() {
        let gt = Tensor::random_uniform(&[5, 3], -1.0, 1.0, 3);
        let a = Tensor::random_uniform(&[5, 3], -1.0, 1.0, 4);
        let b = Tensor::random_uniform(&[5, 3], -1.0, 1.0, 5);
        for mode in [LossMode::Coord, LossMode::Norm] {
            let la = loss_value(&[a.clone()], &gt, 1, mode).unwrap();
            let lb = loss_value(&[b.clone()], &gt, 1, mode).unwrap();
            let both = loss_value(&[a.clone(), b.clone()], &gt, 2, mode).unwrap();
            assert!((both - la - lb).abs() < 1e-14);
        }
    }

    #[test]
    fn norm_mode_uses_joint_distance() {
        let gt = Tensor::zeros(&[1, 3]);
        let p = Tensor::new(&[1, 3], vec![0.003, 0.004, 0.0]).unwrap();
        let v = loss_value(&[p.clone()], &gt, 1, LossMode::Norm).unwrap();
        assert!((v - 0.0025).abs() < 1e-16);
        let c = loss_value(&[p], &gt, 1, LossMode::Coord).unwrap();
        assert!((c - 0.0035).abs() < 1e-16);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        let id = s.add("theta", &[1], crate::tensor::InitScheme::Zeros).unwrap();
        s.set_value(id, Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    fn theta(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().value.data()[0]
    }

    fn bowl_step(s: &mut ParamStore, opt: &mut OptimizerState) {
        s.zero_grad();
        let mut g = Graph::new();
        let id = s.id("theta").unwrap();
        let t = g.param(s, id);
        let sq = g.mul(t, t).unwrap();
        let l = g.sum(sq);
        g.backward(l, s).unwrap();
        opt.step(s).unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = scalar_store(0.7);
        let mut opt = OptimizerState::new(&s, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        for _ in 0..5 {
            s.zero_grad();
            let id = s.id("theta").unwrap();
            s.accumulate_grad(id, &[0.0]);
            opt.step(&mut s).unwrap();
        }
        assert_eq!(theta(&s), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g| + eps).
        let mut s = scalar_store(0.3);
        let hyper = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut opt = OptimizerState::new(&s, hyper);
        bowl_step(&mut s, &mut opt);
        let expected = 0.3 - 1e-3 * 0.6 / (0.6 + 1e-8);
        assert!((theta(&s) - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = scalar_store(2.0);
        let mut opt = OptimizerState::new(&s, AdamConfig::default());
        let id = s.id("theta").unwrap();
        s.zero_grad();
        s.accumulate_grad(id, &[0.0]);
        opt.step(&mut s).unwrap();
        assert_eq!(theta(&s), 2.0 - 1e-3 * 0.01 * 2.0);
    }

    #[test]
    fn clipping_matches_prescaled_gradients() {
        let store = || {
            let mut s = ParamStore::new(0);
            s.add("w", &[2], crate::tensor::InitScheme::Constant(0.5)).unwrap();
            s
        };
        let grads: [[f64; 2]; 3] = [[30.0, 40.0], [3.0, 4.0], [0.3, 0.4]];
        let run = |clip: f64, scaled: bool| {
            let mut s = store();
            let mut opt = OptimizerState::new(&s, AdamConfig { grad_clip: clip, ..AdamConfig::default() });
            let id = s.id("w").unwrap();
            for g in grads {
                let k = if scaled { (1.0 / (g[0] * g[0] + g[1] * g[1]).sqrt()).min(1.0) } else { 1.0 };
                s.zero_grad();
                s.accumulate_grad(id, &[g[0] * k, g[1] * k]);
                opt.step(&mut s).unwrap();
            }
            s.value(id).data().to_vec()
        };
        let clipped = run(1.0, false);
        let reference = run(0.0, true);
        for (a, b) in clipped.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-15, "{clipped:?} vs {reference:?}");
        }
        assert_ne!(clipped, run(0.0, false));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = scalar_store(0.1);
        let mut opt = OptimizerState::new(&s, AdamConfig { weight_decay: 0.0, ..AdamConfig::default() });
        let mut trace = vec![theta(&s).abs()];
        for _ in 0..200 {
            bowl_step(&mut s, &mut opt);
            trace.push(theta(&s).abs());
        }
        for w in trace[10..].windows(2) {
            assert!(w[1] <= w[0], "{w:?}");
        }
        assert!(*trace.last().unwrap() < 1e-2);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || {
            let mut s = scalar_store(0.4);
            let mut opt = OptimizerState::new(&s, AdamConfig::default());
            (0..50).map(|_| {
                bowl_step(&mut s, &mut opt);
                theta(&s).to_bits()
            })
            .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_skipped_and_reported() {
        let mut s = scalar_store(0.5);
        s.add("unused", &[2], crate::tensor::InitScheme::Constant(1.0)).unwrap();
        let mut opt = OptimizerState::new(&s, AdamConfig::default());
        bowl_step(&mut s, &mut opt);
        let id = s.id("unused").unwrap();
        assert_eq!(s.value(id).data(), &[1.0, 1.0]);
        s.zero_grad();
        assert_eq!(opt.step(&mut s).unwrap(), vec!["theta".to_string(), "unused".to_string()]);

        s.add("late", &[1], crate::tensor::InitScheme::Zeros).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::Contract(_))));
    }

    #[test]
    fn step_decay_schedule() {
        let h = AdamConfig::default();
        assert_eq!(h.lr_at_epoch(1), 1e-3);
        assert_eq!(h.lr_at_epoch(18), 1e-3);
        assert_eq!(h.lr_at_epoch(19), 1e-3 * 0.1);
        assert_eq!(h.lr_at_epoch(30), 1e-3 * 0.1);
        let flat = AdamConfig { decay_epoch: 0, ..h };
        assert_eq!(flat.lr_at_epoch(100), 1e-3);
    }

    fn pairwise(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                let (p, q) = (a.row(i), b.row(j));
                out.push(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt());
            }
        }
        out
    }

    #[test]
    fn identity_draw_leaves_sample_unchanged() {
        let p = Tensor::random_uniform(&[20, 3], -0.1, 0.6, 1);
        let j = Tensor::random_uniform(&[21, 3], -0.1, 0.6, 2);
        let (p2, j2) = augment_sample(&p, &j, &Similarity::identity());
        assert_eq!(p2, p);
        assert_eq!(j2, j);
        let none = AugmentationConfig {
            rotation_deg: 0.0,
            scale: (1.0, 1.0),
            translation_mm: 0.0,
            seed: 3,
        };
        assert_eq!(none.draw_for(4, 5), Similarity::identity());
    }

    proptest! {
        #[test]
        fn augmentation_is_a_similarity(seed in 0u64..1000) {
            let cfg = AugmentationConfig { rotation_deg: 180.0, scale: (0.9, 1.1), translation_mm: 10.0, seed };
            let t = cfg.draw_for(1, 0);
            prop_assert!(t.angle.abs() <= std::f64::consts::PI);
            prop_assert!((0.9..=1.1).contains(&t.scale));
            prop_assert!(t.shift.iter().all(|s| s.abs() <= 0.01));
            let p = Tensor::random_uniform(&[12, 3], -0.1, 0.6, seed);
            let j = Tensor::random_uniform(&[5, 3], -0.1, 0.6, seed + 1);
            let (p2, j2) = augment_sample(&p, &j, &t);
            let rigid = Similarity { scale: 1.0, ..t };
            let (p3, j3) = augment_sample(&p, &j, &rigid);
            for ((d, e), f) in pairwise(&j, &p).iter().zip(pairwise(&j3, &p3)).zip(pairwise(&j2, &p2)) {
                prop_assert!((d - e).abs() < 1e-12);
                prop_assert!((t.scale * d - f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn draws_are_seed_reproducible() {
        let cfg = AugmentationConfig {
            rotation_deg: 180.0,
            scale: (0.9, 1.1),
            translation_mm: 10.0,
            seed: 7,
        };
        assert_eq!(cfg.draw_for(2, 3), cfg.draw_for(2, 3));
        assert_ne!(cfg.draw_for(2, 3), cfg.draw_for(2, 4));
        assert_ne!(cfg.draw_for(2, 3), AugmentationConfig { seed: 8, ..cfg }.draw_for(2, 3));
        assert!(AugmentationConfig { scale: (1.1, 0.9), ..cfg }.validate().is_err());
    }

    #[test]
    fn mke_examples() {
        let gt = vec![Tensor::random_uniform(&[21, 3], -50.0, 50.0, 1)];
        let r = mean_keypoint_error(&gt, &gt).unwrap();
        assert_eq!(r.mke_mm, 0.0);
        assert_eq!(r.per_joint_mm, vec![0.0; 21]);

        let shifted: Vec<Tensor> = gt
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + if i % 3 == 1 { 3.0 } else { 0.0 }))
            .collect();
        let r = mean_keypoint_error(&shifted, &gt).unwrap();
        assert!((r.mke_mm - 3.0).abs() < 1e-12);

        let p = vec![Tensor::random_uniform(&[3, 3], -5.0, 5.0, 2), Tensor::random_uniform(&[3, 3], -5.0, 5.0, 3)];
        let t = vec![Tensor::random_uniform(&[3, 3], -5.0, 5.0, 4), Tensor::random_uniform(&[3, 3], -5.0, 5.0, 5)];
        let mut sum = 0.0;
        for s in 0..2 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|c| (p[s].at(&[j, c]) - t[s].at(&[j, c])).powi(2)).sum();
                sum += d.sqrt();
            }
        }
        let r = mean_keypoint_error(&p, &t).unwrap();
        assert!((r.mke_mm - sum / 6.0).abs() < 1e-12);
        assert_eq!(r.samples, 2);

        assert!(mean_keypoint_error(&p[..1], &t).is_err());
        assert!(matches!(mean_keypoint_error(&[], &[]), Err(Error::EmptyInput(_))));
        let wrong = vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 3])];
        assert!(mean_keypoint_error(&wrong, &t).is_err());
    }

    #[test]
    fn mke_is_invariant_under_joint_permutation() {
        let p = vec![Tensor::random_uniform(&[6, 3], -5.0, 5.0, 8)];
        let t = vec![Tensor::random_uniform(&[6, 3], -5.0, 5.0, 9)];
        let perm = [3, 0, 5, 1, 4, 2];
        let permute = |x: &Tensor| Tensor::from_fn(&[6, 3], |i| x.at(&[perm[i / 3], i % 3]));
        let a = mean_keypoint_error(&p, &t).unwrap().mke_mm;
        let b = mean_keypoint_error(&[permute(&p[0])], &[permute(&t[0])]).unwrap().mke_mm;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let p = vec![Tensor::zeros(&[2, 3])];
        let t = vec![Tensor::new(&[2, 3], vec![3.0, 4.0, 0.0, 0.0, 0.0, 1.0]).unwrap()];
        let r = mean_keypoint_error(&p, &t).unwrap();
        let text = r.to_text();
        assert!(text.contains("samples: 1\n"));
        assert!(text.contains("mke_mm: 3.0\n"));
        assert!(text.contains("joint_00_mm: 5.0\n"));
        assert_eq!(r.to_csv(&["a".into()]), "sample_id, joint_id, error_mm\na, 0, 5.0\na, 1, 1.0\n");
        assert_eq!(log_line(2, 17, 0.5, 1e-3, 42), "2, 17, 0.5, 0.001, 42");
    }
}
