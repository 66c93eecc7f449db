//! Point-cloud geometry: depth lifting, farthest point sampling, exact
//! k-nearest neighbours, point-set convolution and 2D→3D feature lookup.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{Graph, ParamStore, RowMix, Tensor, Var};

/// Fixed radius used to scale centred clouds, in meters.
pub const NORM_RADIUS: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per stored depth unit (only used by 16-bit image files).
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, depth_scale: f64) -> Result<Self> {
        let ok = [fx, fy, cx, cy, depth_scale].iter().all(|v| v.is_finite());
        if !ok || fx <= 0.0 || fy <= 0.0 || depth_scale <= 0.0 {
            return Err(Error::contract(format!(
                "invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy} depth_scale={depth_scale}"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        })
    }

    /// Pixel `(u, v)` = (column, row) at metric depth `d` to camera coordinates.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        [(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d]
    }

    /// Camera coordinates to pixel `(u, v)`; `None` for `z ≤ 0`.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        (p[2] > 0.0).then(|| (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Intrinsics for an image resized by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx * factor,
            fy: self.fy * factor,
            cx: (self.cx + 0.5) * factor - 0.5,
            cy: (self.cy + 0.5) * factor - 0.5,
            depth_scale: self.depth_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `[N×3]`, meters.
    pub coords: Tensor,
    /// `(row, col)` of the pixel each point was lifted from.
    pub source_pixels: Option<Vec<(usize, usize)>>,
}

impl PointCloud {
    pub fn new(coords: Tensor) -> Result<Self> {
        if coords.rank() != 2 || coords.cols() != 3 {
            return Err(Error::dim("point cloud", coords.shape(), &[0, 3]));
        }
        if !coords.all_finite() {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(Self {
            coords,
            source_pixels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    pub fn centroid(&self) -> [f64; 3] {
        centroid(&self.coords)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        let coords = Tensor::from_fn(&[idx.len(), 3], |i| self.coords.data()[idx[i / 3] * 3 + i % 3]);
        PointCloud {
            coords,
            source_pixels: self.source_pixels.as_ref().map(|px| idx.iter().map(|&i| px[i]).collect()),
        }
    }
}

pub fn centroid(coords: &Tensor) -> [f64; 3] {
    let n = coords.rows() as f64;
    let mut c = [0.0; 3];
    for r in 0..coords.rows() {
        for (a, b) in c.iter_mut().zip(coords.row(r)) {
            *a += b;
        }
    }
    c.map(|v| v / n)
}

/// `(p − center) / NORM_RADIUS` row-wise.
pub fn normalize(coords: &Tensor, center: [f64; 3]) -> Tensor {
    Tensor::from_fn(coords.shape(), |i| (coords.data()[i] - center[i % 3]) / NORM_RADIUS)
}

pub fn denormalize(coords: &Tensor, center: [f64; 3]) -> Tensor {
    Tensor::from_fn(coords.shape(), |i| coords.data()[i] * NORM_RADIUS + center[i % 3])
}

/// Lifts `n` randomly chosen valid pixels of a metric depth image `[H×W]`.
/// Sampling is without replacement when at least `n` pixels are valid.
pub fn depth_to_points(depth: &Tensor, intr: &CameraIntrinsics, n: usize, seed: u64) -> Result<PointCloud> {
    if depth.rank() != 2 {
        return Err(Error::dim("depth_to_points", depth.shape(), &[0, 0]));
    }
    if n == 0 {
        return Err(Error::contract("depth_to_points needs n ≥ 1"));
    }
    let w = depth.shape()[1];
    let valid: Vec<usize> = (0..depth.len())
        .filter(|&i| {
            let d = depth.data()[i];
            d.is_finite() && d > 0.0
        })
        .collect();
    if valid.is_empty() {
        return Err(Error::EmptyInput("depth image has no valid pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if valid.len() >= n {
        let mut s = sample(&mut rng, valid.len(), n).into_vec();
        s.sort_unstable();
        s.into_iter().map(|i| valid[i]).collect()
    } else {
        (0..n).map(|_| valid[rng.gen_range(0..valid.len())]).collect()
    };
    let mut coords = Vec::with_capacity(3 * n);
    let mut pixels = Vec::with_capacity(n);
    for &i in &picks {
        let (r, c) = (i / w, i % w);
        coords.extend(intr.unproject(c as f64, r as f64, depth.data()[i]));
        pixels.push((r, c));
    }
    Ok(PointCloud {
        coords: Tensor::new(&[n, 3], coords)?,
        source_pixels: Some(pixels),
    })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// First point drawn uniformly from a seeded stream.
    Seeded(u64),
    Index(usize),
    /// First point is the one farthest from the centroid (lowest index on ties),
    /// which makes the selection independent of storage order and translation.
    FarthestFromCentroid,
}

/// Greedy max-min subsampling of `coords: [N×3]`; ties go to the lower index.
pub fn farthest_point_sample(coords: &Tensor, m: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = coords.rows();
    if m > n {
        return Err(Error::contract(format!("cannot sample {m} of {n} points")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let first = match start {
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).gen_range(0..n),
        FpsStart::Index(i) if i < n => i,
        FpsStart::Index(i) => return Err(Error::contract(format!("start index {i} ≥ {n}"))),
        FpsStart::FarthestFromCentroid => {
            let c = centroid(coords);
            argmax((0..n).map(|i| dist2(coords.row(i), &c)))
        }
    };
    let mut picked = Vec::with_capacity(m);
    let mut best = vec![f64::INFINITY; n];
    let mut cur = first;
    for _ in 0..m {
        picked.push(cur);
        let p = coords.row(cur);
        for (i, b) in best.iter_mut().enumerate() {
            let d = dist2(coords.row(i), p);
            if d < *b {
                *b = d;
            }
        }
        cur = argmax(best.iter().copied());
    }
    Ok(picked)
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    pub centers: usize,
    pub k: usize,
    /// `[centers×k]`, each row in ascending distance.
    pub indices: Vec<usize>,
}

impl NeighborIndex {
    pub fn row(&self, c: usize) -> &[usize] {
        &self.indices[c * self.k..(c + 1) * self.k]
    }
}

/// Exact k nearest source rows for each center (ascending distance, index tiebreak).
pub fn knn(centers: &Tensor, source: &Tensor, k: usize) -> Result<NeighborIndex> {
    let n = source.rows();
    if k == 0 || k > n {
        return Err(Error::contract(format!("knn with k={k} over {n} points")));
    }
    if centers.cols() != source.cols() {
        return Err(Error::dim("knn", centers.shape(), source.shape()));
    }
    let mut indices = Vec::with_capacity(centers.rows() * k);
    let mut d: Vec<(f64, usize)> = Vec::with_capacity(n);
    for c in 0..centers.rows() {
        let p = centers.row(c);
        d.clear();
        d.extend((0..n).map(|i| (dist2(source.row(i), p), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            d.select_nth_unstable_by(k - 1, cmp);
        }
        d[..k].sort_unstable_by(cmp);
        indices.extend(d[..k].iter().map(|e| e.1));
    }
    Ok(NeighborIndex {
        centers: centers.rows(),
        k,
        indices,
    })
}

/// Point-set convolution: for every center and each of its neighbours, the
/// shared MLP sees `[p − center | source feature | center feature]`, and the
/// results are max-reduced over the neighbourhood.
///
/// `centers: [M×3]`, `source_coords: [N×3]`, `source_feats: [N×F]`,
/// `center_feats: [M×G]`; returns `[M × mlp.fan_out()]`.
pub fn set_conv(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    centers: Var,
    source_coords: Var,
    neighbors: &NeighborIndex,
    source_feats: Option<Var>,
    center_feats: Option<Var>,
) -> Result<Var> {
    let m = g.shape(centers)[0];
    let n = g.shape(source_coords)[0];
    if neighbors.centers != m || neighbors.k == 0 {
        return Err(Error::contract(format!(
            "neighbor table has {} rows of {} for {m} centers",
            neighbors.centers, neighbors.k
        )));
    }
    let k = neighbors.k;
    let gather = Rc::new(RowMix::gather(n, &neighbors.indices)?);
    let repeat_idx: Vec<usize> = (0..m * k).map(|r| r / k).collect();
    let repeat = Rc::new(RowMix::gather(m, &repeat_idx)?);

    let p = g.mix(source_coords, gather.clone())?;
    let c = g.mix(centers, repeat.clone())?;
    let mut parts = vec![g.sub(p, c)?];
    if let Some(f) = source_feats {
        parts.push(g.mix(f, gather)?);
    }
    if let Some(f) = center_feats {
        parts.push(g.mix(f, repeat)?);
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
    if g.shape(x)[1] != mlp.fan_in() {
        return Err(Error::dim("set_conv", g.shape(x), &[mlp.fan_in()]));
    }
    let h = mlp.forward(g, store, x)?;
    g.group_max(h, k)
}

/// Bilinear lookup of a `[H′·W′ × C]` feature map at the projections of
/// `points` (camera frame). Pixel coordinates are multiplied by `scale`
/// and clamped to the map. Points with `z ≤ 0` get zero features and a
/// `true` flag.
pub fn lift_2d_features(
    g: &mut Graph,
    points: &Tensor,
    fmap: Var,
    fmap_hw: (usize, usize),
    intr: &CameraIntrinsics,
    scale: f64,
) -> Result<(Var, Vec<bool>)> {
    let (h, w) = fmap_hw;
    if g.shape(fmap).len() != 2 || g.shape(fmap)[0] != h * w {
        return Err(Error::dim("lift_2d_features", g.shape(fmap), &[h * w]));
    }
    let mut rows = Vec::with_capacity(points.rows());
    let mut flags = Vec::with_capacity(points.rows());
    for i in 0..points.rows() {
        let r = points.row(i);
        match intr.project([r[0], r[1], r[2]]) {
            Some((u, v)) => {
                rows.push(bilinear_weights(u * scale, v * scale, h, w));
                flags.push(false);
            }
            None => {
                rows.push(Vec::new());
                flags.push(true);
            }
        }
    }
    let table = Rc::new(RowMix::from_rows(h * w, &rows)?);
    Ok((g.mix(fmap, table)?, flags))
}

fn bilinear_weights(u: f64, v: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let x = u.clamp(0.0, (w - 1) as f64);
    let y = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(4);
    for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
        for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
            let wt = wy * wx;
            if wt == 0.0 {
                continue;
            }
            let idx = yy * w + xx;
            match out.iter_mut().find(|e| e.0 == idx) {
                Some(e) => e.1 += wt,
                None => out.push((idx, wt)),
            }
        }
    }
    out
}
