//! The full pipeline: super-point encoder, keypoint token initializer and
//! stacked correspondence blocks.

use crate::config::Config;
use crate::encoder::{EncoderInput, SuperPointEncoder, SuperPointSet};
use crate::mamba::{BlockTrace, CorrespondenceBlock};
use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, SsmStrategy, Var};
use crate::tokens::{GlobalEncoder, KeypointState, TokenInit};
use crate::{Error, Result};

/// Pipeline stage boundaries reported by [`HandModel::forward_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Tokens,
    Block(usize),
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Encoder => write!(f, "encoder"),
            Stage::Tokens => write!(f, "tokens"),
            Stage::Block(i) => write!(f, "block{}", i + 1),
        }
    }
}

pub struct Prediction {
    /// `K + 1` coordinate sets `[J×3]` in the normalized frame, initializer first.
    pub stages: Vec<Var>,
    /// Filter coefficients of every block that has a filter.
    pub gates: Vec<Var>,
    pub traces: Vec<BlockTrace>,
    pub superpoints: SuperPointSet,
}

impl Prediction {
    pub fn last(&self) -> Var {
        *self.stages.last().expect("at least the initializer stage")
    }
}

#[derive(Clone, Debug)]
pub struct HandModel {
    pub encoder: SuperPointEncoder,
    pub global: GlobalEncoder,
    pub init: TokenInit,
    pub blocks: Vec<CorrespondenceBlock>,
    /// Regression head shared by all blocks that do not own one.
    pub w_r: ParamId,
    pub joints: usize,
    pub strategy: SsmStrategy,
}

impl HandModel {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let encoder = SuperPointEncoder::new(store, cfg)?;
        let global = GlobalEncoder::new(store, cfg)?;
        let init = TokenInit::new(store, cfg, global.width())?;
        let blocks = (0..cfg.stacks)
            .map(|i| CorrespondenceBlock::new(store, &format!("block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let w_r = store.add("w_r", &[cfg.token_width(), 3], InitScheme::XavierUniform)?;
        Ok(Self {
            encoder,
            global,
            init,
            blocks,
            w_r,
            joints: cfg.joints,
            strategy: if cfg.ssm_kernel { SsmStrategy::Kernel } else { SsmStrategy::Recurrent },
        })
    }

    /// A fresh graph using this model's SSM evaluation strategy.
    pub fn graph(&self) -> Graph {
        Graph::with_ssm_strategy(self.strategy)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &EncoderInput) -> Result<Prediction> {
        self.forward_with(g, store, input, |_| {})
    }

    /// Runs the pipeline, calling `on_stage` as each stage finishes.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &EncoderInput,
        mut on_stage: impl FnMut(Stage),
    ) -> Result<Prediction> {
        let sp = self.encoder.forward(g, store, input)?;
        on_stage(Stage::Encoder);
        let global = self.global.forward(g, store, &sp)?;
        let mut state: KeypointState = self.init.forward(g, store, global)?;
        on_stage(Stage::Tokens);
        let mut stages = vec![state.positions];
        let mut gates = Vec::new();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, trace) = block.forward(g, store, &state, &sp, self.w_r)?;
            stages.push(next.positions);
            gates.extend(trace.gate);
            traces.push(trace);
            state = next;
            on_stage(Stage::Block(i));
        }
        for &s in &stages {
            if g.shape(s) != [self.joints, 3] {
                return Err(Error::dim("model_forward", g.shape(s), &[self.joints, 3]));
            }
        }
        Ok(Prediction {
            stages,
            gates,
            traces,
            superpoints: sp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SsmType;
    use crate::points::CameraIntrinsics;
    use crate::tensor::Tensor;

    fn input(cfg: &Config, seed: u64) -> EncoderInput {
        let n = cfg.num_points;
        let s = cfg.image_size;
        let intr = CameraIntrinsics::new(60.0, 60.0, (s as f64 - 1.0) / 2.0, (s as f64 - 1.0) / 2.0, 1e-4).unwrap();
        let cam = Tensor::random_uniform(&[n, 3], -0.05, 0.05, seed);
        let cam = Tensor::from_fn(&[n, 3], |i| cam.data()[i] + if i % 3 == 2 { 0.5 } else { 0.0 });
        let points = cam.map(|v| v / 0.15);
        EncoderInput {
            points,
            points_cam: cam,
            depth: Tensor::random_uniform(&[s * s, 1], 0.0, 1.0, seed + 1),
            rgb: Some(Tensor::random_uniform(&[s * s, 3], -0.5, 0.5, seed + 2)),
            hw: (s, s),
            intr,
        }
    }

    #[test]
    fn emits_one_stage_per_block_plus_initializer() {
        for stacks in [0, 1, 3] {
            let cfg = Config { stacks, ..Config::tiny() };
            let mut store = ParamStore::new(3);
            let m = HandModel::new(&mut store, &cfg).unwrap();
            let mut g = m.graph();
            let p = m.forward(&mut g, &store, &input(&cfg, 1)).unwrap();
            assert_eq!(p.stages.len(), stacks + 1);
            assert_eq!(p.gates.len(), stacks);
            for &s in &p.stages {
                assert_eq!(g.shape(s), &[cfg.joints, 3]);
                assert!(g.value(s).all_finite());
            }
        }
    }

    #[test]
    fn stage_callbacks_in_order() {
        let cfg = Config { stacks: 2, ..Config::tiny() };
        let mut store = ParamStore::new(3);
        let m = HandModel::new(&mut store, &cfg).unwrap();
        let mut seen = Vec::new();
        m.forward_with(&mut m.graph(), &store, &input(&cfg, 1), |s| seen.push(s)).unwrap();
        assert_eq!(seen, [Stage::Encoder, Stage::Tokens, Stage::Block(0), Stage::Block(1)]);
    }

    #[test]
    fn seeded_construction_and_forward_are_bit_identical() {
        let cfg = Config::tiny();
        let run = || {
            let mut store = ParamStore::new(11);
            let m = HandModel::new(&mut store, &cfg).unwrap();
            let mut g = m.graph();
            let p = m.forward(&mut g, &store, &input(&cfg, 4)).unwrap();
            g.value(p.last()).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kernel_and_recurrent_strategies_agree() {
        let base = Config::tiny();
        let kernel = Config { ssm_kernel: true, ..base.clone() };
        let out = |cfg: &Config| {
            let mut store = ParamStore::new(5);
            let m = HandModel::new(&mut store, cfg).unwrap();
            let mut g = m.graph();
            let p = m.forward(&mut g, &store, &input(cfg, 2)).unwrap();
            g.value(p.last()).clone()
        };
        assert!(out(&base).max_abs_diff(&out(&kernel)) < 1e-9);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for ssm_type in [SsmType::None, SsmType::Standard, SsmType::Correspondence] {
            let cfg = Config { ssm_type, ..Config::tiny() };
            let mut store = ParamStore::new(8);
            let m = HandModel::new(&mut store, &cfg).unwrap();
            let mut g = m.graph();
            let p = m.forward(&mut g, &store, &input(&cfg, 3)).unwrap();
            let mut total = None;
            for &s in &p.stages {
                let l = g.smooth_l1(s);
                let l = g.sum(l);
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l).unwrap(),
                });
            }
            g.backward(total.unwrap(), &mut store).unwrap();
            for prm in store.iter() {
                assert!(prm.has_grad(), "{:?}: {} untouched", ssm_type, prm.name);
            }
        }
    }
}
