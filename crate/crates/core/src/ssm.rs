//! Diagonal state-space models: zero-order-hold discretization and the two
//! equivalent evaluations (recurrence and causal convolution kernel).
//!
//! All layouts are row-major: sequences are `[L×C]`, per-channel state
//! parameters are `[C×N]`, per-channel scalars are `[C]`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, Tensor, Var};

/// Slice-level kernels shared by the plain types below and the graph op.
pub(crate) mod raw {
    #[derive(Clone, Copy, Debug)]
    pub struct Dims {
        pub len: usize,
        pub channels: usize,
        pub state: usize,
    }

    pub fn scan(d: Dims, u: &[f64], abar: &[f64], bbar: &[f64], cbar: &[f64], dbar: &[f64]) -> Vec<f64> {
        let (l, c, n) = (d.len, d.channels, d.state);
        let mut y = vec![0.0; l * c];
        let mut x = vec![0.0; c * n];
        for k in 0..l {
            for ch in 0..c {
                let uk = u[k * c + ch];
                let mut acc = dbar[ch] * uk;
                for s in 0..n {
                    let i = ch * n + s;
                    x[i] = abar[i] * x[i] + bbar[i] * uk;
                    acc += cbar[i] * x[i];
                }
                y[k * c + ch] = acc;
            }
        }
        y
    }

    /// Taps `C̄ Ā^i B̄` for `i < len`, laid out `[C×L]`.
    pub fn kernel_taps(d: Dims, abar: &[f64], bbar: &[f64], cbar: &[f64]) -> Vec<f64> {
        let (l, c, n) = (d.len, d.channels, d.state);
        let mut taps = vec![0.0; c * l];
        for ch in 0..c {
            for s in 0..n {
                let i = ch * n + s;
                let mut p = cbar[i] * bbar[i];
                for t in 0..l {
                    taps[ch * l + t] += p;
                    p *= abar[i];
                }
            }
        }
        taps
    }

    pub fn causal_conv(d: Dims, taps: &[f64], dbar: &[f64], u: &[f64]) -> Vec<f64> {
        let (l, c) = (d.len, d.channels);
        let mut y = vec![0.0; l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut acc = dbar[ch] * u[t * c + ch];
                for i in 0..=t {
                    acc += taps[ch * l + i] * u[(t - i) * c + ch];
                }
                y[t * c + ch] = acc;
            }
        }
        y
    }

    pub struct ScanGrads {
        pub du: Vec<f64>,
        pub dabar: Vec<f64>,
        pub dbbar: Vec<f64>,
        pub dcbar: Vec<f64>,
        pub ddbar: Vec<f64>,
    }

    /// Adjoint of [`scan`] for upstream gradient `gy: [L×C]`.
    pub fn scan_backward(
        d: Dims,
        gy: &[f64],
        u: &[f64],
        abar: &[f64],
        bbar: &[f64],
        cbar: &[f64],
        dbar: &[f64],
    ) -> ScanGrads {
        let (l, c, n) = (d.len, d.channels, d.state);
        // states[k] = x_k, with states[0] = x_0 = 0
        let mut states = vec![0.0; (l + 1) * c * n];
        for k in 0..l {
            for ch in 0..c {
                let uk = u[k * c + ch];
                for s in 0..n {
                    let i = ch * n + s;
                    states[(k + 1) * c * n + i] = abar[i] * states[k * c * n + i] + bbar[i] * uk;
                }
            }
        }
        let mut g = ScanGrads {
            du: vec![0.0; l * c],
            dabar: vec![0.0; c * n],
            dbbar: vec![0.0; c * n],
            dcbar: vec![0.0; c * n],
            ddbar: vec![0.0; c],
        };
        let mut lam = vec![0.0; c * n];
        for k in (0..l).rev() {
            for ch in 0..c {
                let gk = gy[k * c + ch];
                let uk = u[k * c + ch];
                g.ddbar[ch] += gk * uk;
                let mut du = gk * dbar[ch];
                for s in 0..n {
                    let i = ch * n + s;
                    lam[i] = gk * cbar[i] + abar[i] * lam[i];
                    g.dcbar[i] += gk * states[(k + 1) * c * n + i];
                    g.dbbar[i] += lam[i] * uk;
                    g.dabar[i] += lam[i] * states[k * c * n + i];
                    du += lam[i] * bbar[i];
                }
                g.du[k * c + ch] = du;
            }
        }
        g
    }
}

/// Continuous diagonal SSM, one independent parameter set per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSsm {
    pub channels: usize,
    pub state_dim: usize,
    /// Diagonal of `A`, `[C×N]`, entries ≤ 0.
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// `[C]`
    pub d: Vec<f64>,
}

impl ContinuousSsm {
    pub fn new(channels: usize, state_dim: usize, a: Vec<f64>, b: Vec<f64>, c: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let cn = channels * state_dim;
        if channels == 0 || state_dim == 0 {
            return Err(Error::contract("SSM needs at least one channel and one state"));
        }
        for (name, v, want) in [("A", &a, cn), ("B", &b, cn), ("C", &c, cn), ("D", &d, channels)] {
            if v.len() != want {
                return Err(Error::contract(format!("SSM {name} has {} entries, expected {want}", v.len())));
            }
        }
        if let Some(x) = a.iter().find(|x| **x > 0.0 || !x.is_finite()) {
            return Err(Error::contract(format!("unstable diagonal entry A = {x}")));
        }
        Ok(Self {
            channels,
            state_dim,
            a,
            b,
            c,
            d,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub channels: usize,
    pub state_dim: usize,
    pub abar: Vec<f64>,
    pub bbar: Vec<f64>,
    pub cbar: Vec<f64>,
    pub dbar: Vec<f64>,
    pub dt: Vec<f64>,
}

/// Causal convolution form: `taps[c][i] = C̄ Ā^i B̄`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmKernel {
    pub len: usize,
    pub channels: usize,
    /// `[C×L]`
    pub taps: Vec<f64>,
    pub passthrough: Vec<f64>,
}

/// Zero-order hold with per-channel step `dt`. A zero diagonal entry takes
/// the analytic limit `B̄ = Δ·B`.
pub fn discretize(ssm: &ContinuousSsm, dt: &[f64]) -> Result<DiscreteSsm> {
    if dt.len() != ssm.channels {
        return Err(Error::dim("discretize", &[ssm.channels], &[dt.len()]));
    }
    if let Some(x) = dt.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::contract(format!("step must be positive, got {x}")));
    }
    let n = ssm.state_dim;
    let mut abar = vec![0.0; ssm.a.len()];
    let mut bbar = vec![0.0; ssm.a.len()];
    for (i, &a) in ssm.a.iter().enumerate() {
        let step = dt[i / n];
        let z = step * a;
        abar[i] = z.exp();
        bbar[i] = if a == 0.0 {
            step * ssm.b[i]
        } else {
            z.exp_m1() / a * ssm.b[i]
        };
    }
    Ok(DiscreteSsm {
        channels: ssm.channels,
        state_dim: n,
        abar,
        bbar,
        cbar: ssm.c.clone(),
        dbar: ssm.d.clone(),
        dt: dt.to_vec(),
    })
}

impl DiscreteSsm {
    fn dims_for(&self, u: &Tensor) -> Result<raw::Dims> {
        if u.rank() != 2 || u.shape()[1] != self.channels {
            return Err(Error::dim("ssm", u.shape(), &[self.channels]));
        }
        Ok(raw::Dims {
            len: u.shape()[0],
            channels: self.channels,
            state: self.state_dim,
        })
    }

    pub fn scan_recurrent(&self, u: &Tensor) -> Result<Tensor> {
        let d = self.dims_for(u)?;
        Tensor::new(
            u.shape(),
            raw::scan(d, u.data(), &self.abar, &self.bbar, &self.cbar, &self.dbar),
        )
    }

    pub fn build_kernel(&self, len: usize) -> Result<SsmKernel> {
        if len == 0 {
            return Err(Error::contract("kernel length must be at least 1"));
        }
        let d = raw::Dims {
            len,
            channels: self.channels,
            state: self.state_dim,
        };
        Ok(SsmKernel {
            len,
            channels: self.channels,
            taps: raw::kernel_taps(d, &self.abar, &self.bbar, &self.cbar),
            passthrough: self.dbar.clone(),
        })
    }
}

impl SsmKernel {
    pub fn tap(&self, channel: usize, i: usize) -> f64 {
        self.taps[channel * self.len + i]
    }

    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        if u.rank() != 2 || u.shape()[0] != self.len || u.shape()[1] != self.channels {
            return Err(Error::dim("apply_kernel", &[self.len, self.channels], u.shape()));
        }
        let d = raw::Dims {
            len: self.len,
            channels: self.channels,
            state: 0,
        };
        Tensor::new(u.shape(), raw::causal_conv(d, &self.taps, &self.passthrough, u.data()))
    }
}

pub fn scan_recurrent(d: &DiscreteSsm, u: &Tensor) -> Result<Tensor> {
    d.scan_recurrent(u)
}

pub fn build_kernel(d: &DiscreteSsm, len: usize) -> Result<SsmKernel> {
    d.build_kernel(len)
}

pub fn apply_kernel(k: &SsmKernel, u: &Tensor) -> Result<Tensor> {
    k.apply(u)
}

/// Learnable static SSM applied channel-wise along the token axis.
///
/// `A = −exp(log_a)` stays negative under any update and `Δ = exp(log_dt)`
/// stays positive.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub channels: usize,
    pub state_dim: usize,
    log_a: ParamId,
    log_dt: ParamId,
    b: ParamId,
    c: ParamId,
    d: ParamId,
}

impl SsmLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, state_dim: usize) -> Result<Self> {
        let cs = (1.0 / state_dim as f64).sqrt();
        Ok(Self {
            channels,
            state_dim,
            log_a: store.add(&format!("{prefix}.log_a"), &[channels, state_dim], InitScheme::StateIndexLog)?,
            log_dt: store.add(
                &format!("{prefix}.log_dt"),
                &[channels],
                InitScheme::LogUniform { lo: 1e-3, hi: 1e-1 },
            )?,
            b: store.add(&format!("{prefix}.b"), &[channels, state_dim], InitScheme::Constant(1.0))?,
            c: store.add(
                &format!("{prefix}.c"),
                &[channels, state_dim],
                InitScheme::Uniform { lo: -cs, hi: cs },
            )?,
            d: store.add(&format!("{prefix}.d"), &[channels], InitScheme::Constant(1.0))?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 5] {
        [self.log_a, self.log_dt, self.b, self.c, self.d]
    }

    pub fn continuous(&self, store: &ParamStore) -> Result<ContinuousSsm> {
        ContinuousSsm::new(
            self.channels,
            self.state_dim,
            store.value(self.log_a).data().iter().map(|v| -v.exp()).collect(),
            store.value(self.b).data().to_vec(),
            store.value(self.c).data().to_vec(),
            store.value(self.d).data().to_vec(),
        )
    }

    pub fn step(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.log_dt).data().iter().map(|v| v.exp()).collect()
    }

    pub fn discrete(&self, store: &ParamStore) -> Result<DiscreteSsm> {
        discretize(&self.continuous(store)?, &self.step(store))
    }

    /// `x: [J×C] → [J×C]`, scanning from row 0 to row J−1.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let la = g.param(store, self.log_a);
        let ea = g.exp(la);
        let a = g.neg(ea);
        let ldt = g.param(store, self.log_dt);
        let dt = g.exp(ldt);
        let z = g.mul_col(a, dt)?;
        let abar = g.exp(z);
        let em = g.expm1(z);
        let ratio = g.div(em, a)?;
        let b = g.param(store, self.b);
        let bbar = g.mul(ratio, b)?;
        let c = g.param(store, self.c);
        let d = g.param(store, self.d);
        g.ssm_scan(x, abar, bbar, c, d)
    }
}
