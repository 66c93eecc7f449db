//! Small layer building blocks on top of [`Graph`]: dense layers, pointwise
//! MLPs and 3×3 / 1×1 convolutions over row-major `[H·W × C]` feature maps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, InitScheme, ParamId, ParamStore, RowMix, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

/// `y = x·W (+ b)` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), &[fan_in, fan_out], InitScheme::XavierUniform)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), &[fan_out], InitScheme::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = g.param(store, b);
                g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Pointwise multilayer map. Leaky ReLU between layers; the last layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::contract(format!("mlp {name} needs at least one layer")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = fan_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), d, w, true)?);
            d = w;
        }
        Ok(Self { layers })
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            h = l.forward(g, store, h)?;
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::param_ids).collect()
    }
}

/// im2col gather table for a `size×size` kernel with zero padding `size/2`.
/// Output row `p·size² + t` holds input pixel `tap t` of output pixel `p`.
pub fn im2col_table(h: usize, w: usize, size: usize, stride: usize) -> Result<RowMix> {
    if size % 2 == 0 || stride == 0 {
        return Err(Error::contract(format!("unsupported conv geometry size={size} stride={stride}")));
    }
    let pad = (size / 2) as isize;
    let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut idx = Vec::with_capacity(ho * wo * size * size);
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..size as isize {
                for dx in 0..size as isize {
                    let y = (oy * stride) as isize + dy - pad;
                    let x = (ox * stride) as isize + dx - pad;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    idx.push(inside.then(|| y as usize * w + x as usize));
                }
            }
        }
    }
    RowMix::gather_padded(h * w, &idx)
}

/// Square convolution over a `[H·W × C_in]` map.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub size: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), &[size * size * c_in, c_out], InitScheme::XavierUniform)?;
        let b = store.add(&format!("{name}.b"), &[c_out], InitScheme::Zeros)?;
        Ok(Self {
            w,
            b,
            size,
            stride,
            c_in,
            c_out,
        })
    }

    /// Returns the output map and its spatial size.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Result<(Var, usize, usize)> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != h * w || s[1] != self.c_in {
            return Err(Error::dim("conv2d", s, &[h * w, self.c_in]));
        }
        let (ho, wo) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let cols = if self.size == 1 && self.stride == 1 {
            x
        } else {
            let table = Rc::new(im2col_table(h, w, self.size, self.stride)?);
            let gathered = g.mix(x, table)?;
            g.reshape(gathered, &[ho * wo, self.size * self.size * self.c_in])?
        };
        let wv = g.param(store, self.w);
        let y = g.matmul(cols, wv)?;
        let bv = g.param(store, self.b);
        Ok((g.add_row(y, bv)?, ho, wo))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// `relu(x + conv(relu(conv(x))))` at constant width and resolution.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub a: Conv2d,
    pub b: Conv2d,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), width, width, 3, 1)?,
            b: Conv2d::new(store, &format!("{name}.b"), width, width, 3, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, h: usize, w: usize) -> Result<Var> {
        let (y, ..) = self.a.forward(g, store, x, h, w)?;
        let y = g.leaky_relu(y, 0.0);
        let (y, ..) = self.b.forward(g, store, y, h, w)?;
        let s = g.add(x, y)?;
        Ok(g.leaky_relu(s, 0.0))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.a.param_ids(), self.b.param_ids()].concat()
    }
}

/// Nearest-neighbour 2× upsampling table for a `[h·w]` map.
pub fn upsample2_table(h: usize, w: usize) -> Result<RowMix> {
    let idx: Vec<usize> = (0..4 * h * w)
        .map(|p| {
            let (y, x) = (p / (2 * w), p % (2 * w));
            (y / 2) * w + x / 2
        })
        .collect();
    RowMix::gather(h * w, &idx)
}
