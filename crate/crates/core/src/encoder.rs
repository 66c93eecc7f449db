//! Multi-modal super-point encoder: a point-set convolution over the cloud,
//! residual convolutional encoders over the depth and RGB crops, and the
//! projection of both 2D maps onto the super points.

use std::rc::Rc;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{upsample2_table, Conv2d, Mlp, ResBlock};
use crate::points::{farthest_point_sample, knn, lift_2d_features, set_conv, CameraIntrinsics, FpsStart};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// A `[h·w × channels]` feature map held in a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap2D {
    pub map: Var,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

/// Residual encoder producing a half-resolution map.
///
/// Stage 1 runs at full resolution with width `w1`, a stride-2 convolution
/// moves to `H/2` at width `w2`, and a 1×1 projection sets the output width.
/// Each stage ends in a residual block.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub c_in: usize,
    pub c_out: usize,
    stem: Conv2d,
    res1: ResBlock,
    down: Conv2d,
    res2: ResBlock,
    proj: Conv2d,
    res3: ResBlock,
    recon: Option<Conv2d>,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        widths: (usize, usize),
        c_out: usize,
        reconstruction_head: bool,
    ) -> Result<Self> {
        let (w1, w2) = widths;
        Ok(Self {
            c_in,
            c_out,
            stem: Conv2d::new(store, &format!("{name}.stem"), c_in, w1, 3, 1)?,
            res1: ResBlock::new(store, &format!("{name}.res1"), w1)?,
            down: Conv2d::new(store, &format!("{name}.down"), w1, w2, 3, 2)?,
            res2: ResBlock::new(store, &format!("{name}.res2"), w2)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), w2, c_out, 1, 1)?,
            res3: ResBlock::new(store, &format!("{name}.res3"), c_out)?,
            recon: if reconstruction_head {
                Some(Conv2d::new(store, &format!("{name}.recon"), c_out, c_in, 3, 1)?)
            } else {
                None
            },
        })
    }

    /// `img: [H·W × c_in]` → `[H/2·W/2 × c_out]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, img: Var, h: usize, w: usize) -> Result<FeatureMap2D> {
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::contract(format!("image dims must be even, got {h}×{w}")));
        }
        let (x, ..) = self.stem.forward(g, store, img, h, w)?;
        let x = g.leaky_relu(x, 0.0);
        let x = self.res1.forward(g, store, x, h, w)?;
        let (x, h2, w2) = self.down.forward(g, store, x, h, w)?;
        let x = g.leaky_relu(x, 0.0);
        let x = self.res2.forward(g, store, x, h2, w2)?;
        let (x, ..) = self.proj.forward(g, store, x, h2, w2)?;
        let x = g.leaky_relu(x, 0.0);
        let map = self.res3.forward(g, store, x, h2, w2)?;
        Ok(FeatureMap2D {
            map,
            h: h2,
            w: w2,
            channels: self.c_out,
        })
    }

    /// Decodes a map back to input resolution (only when the head exists).
    pub fn reconstruct(&self, g: &mut Graph, store: &ParamStore, f: &FeatureMap2D) -> Result<Option<Var>> {
        let Some(head) = &self.recon else {
            return Ok(None);
        };
        let up = g.mix(f.map, Rc::new(upsample2_table(f.h, f.w)?))?;
        let (y, ..) = head.forward(g, store, up, 2 * f.h, 2 * f.w)?;
        Ok(Some(y))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.stem.param_ids();
        v.extend(self.res1.param_ids());
        v.extend(self.down.param_ids());
        v.extend(self.res2.param_ids());
        v.extend(self.proj.param_ids());
        v.extend(self.res3.param_ids());
        if let Some(r) = &self.recon {
            v.extend(r.param_ids());
        }
        v
    }
}

/// Fused super points: coordinates in the normalized frame and features
/// ordered `[geometric | depth | rgb]`.
#[derive(Clone, Debug)]
pub struct SuperPointSet {
    pub coords: Tensor,
    pub feats: Var,
    pub widths: [usize; 3],
    /// Indices of the super points within the input cloud.
    pub source_index: Vec<usize>,
}

impl SuperPointSet {
    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Column range of block `b` (0 geometric, 1 depth, 2 rgb).
    pub fn block(&self, b: usize) -> std::ops::Range<usize> {
        let start: usize = self.widths[..b].iter().sum();
        start..start + self.widths[b]
    }
}

/// Point-set convolution from the input cloud onto `m` farthest-point centers.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub mlp: Mlp,
    pub k: usize,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], k: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, 3, widths)?,
            k,
        })
    }

    /// Returns the chosen indices, their coordinates and `[m × C_p]` features.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, coords: &Tensor, m: usize) -> Result<(Vec<usize>, Tensor, Var)> {
        let idx = farthest_point_sample(coords, m, FpsStart::FarthestFromCentroid)?;
        let centers = Tensor::from_fn(&[m, 3], |i| coords.data()[idx[i / 3] * 3 + i % 3]);
        let nb = knn(&centers, coords, self.k.min(coords.rows()))?;
        let cv = g.constant(centers.clone());
        let pv = g.constant(coords.clone());
        let feats = set_conv(g, store, &self.mlp, cv, pv, &nb, None, None)?;
        Ok((idx, centers, feats))
    }
}

/// Concatenates `[feats3d | depth-lifted | rgb-lifted]`. A missing RGB map
/// yields a zero block of width `rgb_width`. `points_cam` are the super
/// points in the camera frame of the images.
#[allow(clippy::too_many_arguments)]
pub fn fuse_superpoints(
    g: &mut Graph,
    coords: Tensor,
    source_index: Vec<usize>,
    feats3d: Var,
    depth_map: &FeatureMap2D,
    rgb_map: Option<&FeatureMap2D>,
    rgb_width: usize,
    points_cam: &Tensor,
    intr: &CameraIntrinsics,
) -> Result<SuperPointSet> {
    let m = coords.rows();
    let (fd, _) = lift_2d_features(g, points_cam, depth_map.map, (depth_map.h, depth_map.w), intr, 0.5)?;
    let frgb = match rgb_map {
        Some(r) => {
            if r.channels != rgb_width {
                return Err(Error::dim("fuse_superpoints", &[r.channels], &[rgb_width]));
            }
            lift_2d_features(g, points_cam, r.map, (r.h, r.w), intr, 0.5)?.0
        }
        None => g.constant(Tensor::zeros(&[m, rgb_width])),
    };
    let cp = g.shape(feats3d)[1];
    let feats = g.concat_cols(&[feats3d, fd, frgb])?;
    Ok(SuperPointSet {
        coords,
        feats,
        widths: [cp, depth_map.channels, rgb_width],
        source_index,
    })
}

/// Inputs for one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    /// Cloud in the normalized frame, `[N×3]`.
    pub points: Tensor,
    /// The same points in the camera frame of the images (before augmentation).
    pub points_cam: Tensor,
    /// `[H·W × 1]` network depth channel.
    pub depth: Tensor,
    /// `[H·W × 3]`, absent in depth-only mode.
    pub rgb: Option<Tensor>,
    pub hw: (usize, usize),
    pub intr: CameraIntrinsics,
}

#[derive(Clone, Debug)]
pub struct SuperPointEncoder {
    pub points: PointEncoder,
    pub depth: ImageEncoder,
    pub rgb: Option<ImageEncoder>,
    pub super_points: usize,
    pub rgb_width: usize,
}

impl SuperPointEncoder {
    pub fn new(store: &mut ParamStore, cfg: &Config) -> Result<Self> {
        let widths = (cfg.ae_widths.0[0], *cfg.ae_widths.0.get(1).unwrap_or(&cfg.ae_widths.0[0]));
        Ok(Self {
            points: PointEncoder::new(store, "enc.points", &cfg.point_mlp.0, cfg.encoder_k)?,
            depth: ImageEncoder::new(store, "enc.depth", 1, widths, cfg.depth_channels, cfg.reconstruction_head)?,
            rgb: if cfg.use_rgb {
                Some(ImageEncoder::new(store, "enc.rgb", 3, widths, cfg.rgb_channels, cfg.reconstruction_head)?)
            } else {
                None
            },
            super_points: cfg.super_points,
            rgb_width: cfg.rgb_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &EncoderInput) -> Result<SuperPointSet> {
        let (h, w) = input.hw;
        let (idx, centers, f3) = self.points.encode(g, store, &input.points, self.super_points)?;
        let dv = g.constant(input.depth.clone());
        let dmap = self.depth.encode(g, store, dv, h, w)?;
        let rmap = match (&self.rgb, &input.rgb) {
            (Some(enc), Some(img)) => {
                let rv = g.constant(img.clone());
                Some(enc.encode(g, store, rv, h, w)?)
            }
            _ => None,
        };
        let cam = Tensor::from_fn(&[idx.len(), 3], |i| input.points_cam.data()[idx[i / 3] * 3 + i % 3]);
        fuse_superpoints(g, centers, idx, f3, &dmap, rmap.as_ref(), self.rgb_width, &cam, &input.intr)
    }
}
