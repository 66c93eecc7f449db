//! Seeded synthetic hands: forward kinematics over a 21-joint chain, capsule
//! skinning, optional occluder solids, and a z-buffered depth/RGB render.
//!
//! Hand frame: wrist at the origin, fingers along +y, palm normal along −z so
//! that an unrotated hand shows its palm to a camera looking down +z.
//! Joint order: wrist, then thumb, index, middle, ring, pinky with four joints
//! each (base to tip).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Occluder};
use crate::dataset::SampleRecord;
use crate::points::CameraIntrinsics;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const JOINTS: usize = 21;
pub const DEPTH_SCALE: f64 = 1e-4;

type V3 = [f64; 3];
type M3 = [[f64; 3]; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: V3) -> V3 {
    mul(a, 1.0 / norm(a))
}

fn mat_vec(m: &M3, v: V3) -> V3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

fn mat_mul(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn rot_x(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Per-finger articulation in radians: abduction at the base, then three flexions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FingerPose {
    pub abduction: f64,
    pub flex: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticHandConfig {
    pub image_size: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Thumb to pinky: wrist-to-base, then three phalanges (mm).
    pub bones_mm: [[f64; 4]; 5],
    /// Direction of each finger's first bone in the palm plane, degrees from +y toward +x.
    pub spread_deg: [f64; 5],
    /// Out-of-plane rotation of the thumb chain about its own axis (degrees).
    pub thumb_twist_deg: f64,
    /// Capsule radius per finger (mm).
    pub radius_mm: [f64; 5],
    pub palm_radius_mm: f64,
    /// Flexion ranges (degrees) at the three articulations.
    pub flex_deg: [(f64, f64); 3],
    pub abduction_deg: f64,
    pub depth_m: (f64, f64),
    pub roll_deg: f64,
    pub tilt_deg: f64,
    pub offset_mm: f64,
    pub occluder: Occluder,
    pub occluder_size_mm: (f64, f64),
    /// Surface samples per mm².
    pub density: f64,
    pub rgb: bool,
    pub seed: u64,
}

impl Default for SyntheticHandConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            focal: 240.0,
            bones_mm: [
                [30.0, 45.0, 32.0, 25.0],
                [80.0, 40.0, 24.0, 20.0],
                [78.0, 44.0, 28.0, 22.0],
                [74.0, 41.0, 27.0, 21.0],
                [68.0, 33.0, 19.0, 18.0],
            ],
            spread_deg: [-50.0, -12.0, 0.0, 11.0, 22.0],
            thumb_twist_deg: 60.0,
            radius_mm: [7.0, 6.5, 6.5, 6.0, 5.5],
            palm_radius_mm: 7.0,
            flex_deg: [(0.0, 50.0), (0.0, 60.0), (0.0, 40.0)],
            abduction_deg: 10.0,
            depth_m: (0.45, 0.55),
            roll_deg: 180.0,
            tilt_deg: 30.0,
            offset_mm: 10.0,
            occluder: Occluder::None,
            occluder_size_mm: (15.0, 30.0),
            density: 1.5,
            rgb: true,
            seed: 0,
        }
    }
}

impl SyntheticHandConfig {
    /// Renderer settings matching a model configuration; the focal length
    /// scales with the image so the hand covers the same fraction of it.
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            image_size: cfg.image_size,
            focal: 240.0 * cfg.image_size as f64 / 128.0,
            occluder: cfg.occluder,
            rgb: cfg.use_rgb,
            seed: cfg.seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bones_mm.iter().flatten().any(|&l| !(l > 0.0)) {
            return Err(Error::contract("bone lengths must be positive"));
        }
        if self.radius_mm.iter().chain([&self.palm_radius_mm]).any(|&r| !(r > 0.0)) {
            return Err(Error::contract("capsule radii must be positive"));
        }
        let ordered = |(a, b): (f64, f64)| a <= b;
        if !self.flex_deg.iter().all(|&r| ordered(r) && r.0 >= -30.0 && r.1 <= 120.0) || self.abduction_deg.abs() > 45.0 {
            return Err(Error::contract("joint-angle ranges outside anatomical bounds"));
        }
        if !ordered(self.depth_m) || self.depth_m.0 <= 0.0 || !ordered(self.occluder_size_mm) {
            return Err(Error::contract("ill-ordered depth or occluder ranges"));
        }
        if self.image_size == 0 || !(self.focal > 0.0) || !(self.density > 0.0) {
            return Err(Error::contract("image size, focal length and density must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let c = (self.image_size as f64 - 1.0) / 2.0;
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: c,
            cy: c,
            depth_scale: DEPTH_SCALE,
        }
    }

    fn base_frame(&self, f: usize) -> M3 {
        let z = rot_z(-self.spread_deg[f].to_radians());
        if f == 0 {
            mat_mul(&z, &rot_y(self.thumb_twist_deg.to_radians()))
        } else {
            z
        }
    }

    /// Joint positions in the hand frame (mm).
    pub fn forward_kinematics(&self, pose: &[FingerPose; 5]) -> [V3; JOINTS] {
        let mut out = [[0.0; 3]; JOINTS];
        for (f, fp) in pose.iter().enumerate() {
            let bones = self.bones_mm[f];
            let mut r = self.base_frame(f);
            let mut p = mul(mat_vec(&r, [0.0, 1.0, 0.0]), bones[0]);
            out[1 + 4 * f] = p;
            r = mat_mul(&r, &rot_z(-fp.abduction));
            for (k, &len) in bones[1..].iter().enumerate() {
                // Flexion turns the finger toward the palm side (−z).
                r = mat_mul(&r, &rot_x(-fp.flex[k]));
                p = add(p, mul(mat_vec(&r, [0.0, 1.0, 0.0]), len));
                out[2 + 4 * f + k] = p;
            }
        }
        out
    }

    fn draw_pose(&self, rng: &mut ChaCha8Rng) -> [FingerPose; 5] {
        let mut pose = [FingerPose::default(); 5];
        for fp in &mut pose {
            fp.abduction = rng.gen_range(-self.abduction_deg..=self.abduction_deg).to_radians();
            for (k, (lo, hi)) in self.flex_deg.iter().enumerate() {
                fp.flex[k] = rng.gen_range(*lo..=*hi).to_radians();
            }
        }
        pose
    }
}

/// A capsule (segment with radius), or a box/sphere occluder.
#[derive(Clone, Copy, Debug)]
enum Solid {
    Capsule { a: V3, b: V3, r: f64 },
    Sphere { c: V3, r: f64 },
    Cuboid { c: V3, axes: M3, half: V3 },
}

struct Surfel {
    p: V3,
    n: V3,
    skin: bool,
}

fn orthonormal(u: V3) -> (V3, V3) {
    let helper = if u[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = unit(cross(u, helper));
    (e1, cross(u, e1))
}

fn sphere_dir(rng: &mut ChaCha8Rng) -> V3 {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * t.cos(), s * t.sin(), z]
}

fn count(area: f64, density: f64) -> usize {
    (area * density).ceil() as usize
}

fn sample_surface(solid: &Solid, density: f64, skin: bool, rng: &mut ChaCha8Rng, out: &mut Vec<Surfel>) {
    use std::f64::consts::{PI, TAU};
    match *solid {
        Solid::Capsule { a, b, r } => {
            let axis = sub(b, a);
            let len = norm(axis);
            let u = if len > 0.0 { mul(axis, 1.0 / len) } else { [0.0, 1.0, 0.0] };
            let (e1, e2) = orthonormal(u);
            for _ in 0..count(TAU * r * len, density) {
                let t = rng.gen_range(0.0..=len);
                let th: f64 = rng.gen_range(0.0..TAU);
                let n = add(mul(e1, th.cos()), mul(e2, th.sin()));
                out.push(Surfel {
                    p: add(add(a, mul(u, t)), mul(n, r)),
                    n,
                    skin,
                });
            }
            for _ in 0..count(4.0 * PI * r * r, density) {
                let d = sphere_dir(rng);
                let end = if dot(d, u) >= 0.0 { b } else { a };
                out.push(Surfel {
                    p: add(end, mul(d, r)),
                    n: d,
                    skin,
                });
            }
        }
        Solid::Sphere { c, r } => {
            for _ in 0..count(4.0 * PI * r * r, density) {
                let d = sphere_dir(rng);
                out.push(Surfel { p: add(c, mul(d, r)), n: d, skin });
            }
        }
        Solid::Cuboid { c, axes, half } => {
            for face in 0..6 {
                let k = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let (i, j) = ((k + 1) % 3, (k + 2) % 3);
                let area = 4.0 * half[i] * half[j];
                let n = mul(axes[k], sign);
                for _ in 0..count(area, density) {
                    let s = rng.gen_range(-half[i]..=half[i]);
                    let t = rng.gen_range(-half[j]..=half[j]);
                    let p = add(add(add(c, mul(n, half[k])), mul(axes[i], s)), mul(axes[j], t));
                    out.push(Surfel { p, n, skin });
                }
            }
        }
    }
}

const SKIN: V3 = [0.86, 0.67, 0.55];
const OBJECT: V3 = [0.30, 0.50, 0.80];

/// Everything drawn for one sample before rendering (camera frame, mm).
pub struct Scene {
    pub joints_mm: [V3; JOINTS],
    solids: Vec<(Solid, bool)>,
}

impl Scene {
    fn hand_solids(joints: &[V3; JOINTS], cfg: &SyntheticHandConfig) -> Vec<(Solid, bool)> {
        let mut out = Vec::new();
        let wrist = joints[0];
        for f in 0..5 {
            let r = cfg.radius_mm[f];
            let base = joints[1 + 4 * f];
            out.push((
                Solid::Capsule {
                    a: wrist,
                    b: base,
                    r: cfg.palm_radius_mm,
                },
                true,
            ));
            let mut prev = base;
            for k in 1..4 {
                let next = joints[1 + 4 * f + k];
                out.push((Solid::Capsule { a: prev, b: next, r }, true));
                prev = next;
            }
        }
        // Webbing between neighbouring finger bases fills in the palm.
        for f in 1..4 {
            out.push((
                Solid::Capsule {
                    a: joints[1 + 4 * f],
                    b: joints[1 + 4 * (f + 1)],
                    r: cfg.palm_radius_mm,
                },
                true,
            ));
        }
        for f in 2..5 {
            let mid = mul(add(wrist, joints[1 + 4 * f]), 0.5);
            out.push((
                Solid::Capsule {
                    a: mid,
                    b: joints[5],
                    r: cfg.palm_radius_mm,
                },
                true,
            ));
        }
        out
    }

    fn occluder(joints: &[V3; JOINTS], cfg: &SyntheticHandConfig, rng: &mut ChaCha8Rng) -> Option<Solid> {
        let kind = match cfg.occluder {
            Occluder::None => return None,
            Occluder::Mixed => {
                if rng.gen_bool(0.5) {
                    Occluder::Sphere
                } else {
                    Occluder::Box
                }
            }
            k => k,
        };
        let anchor = joints[rng.gen_range(0..JOINTS)];
        let size = rng.gen_range(cfg.occluder_size_mm.0..=cfg.occluder_size_mm.1);
        let gap = rng.gen_range(5.0..=25.0);
        let c = [anchor[0], anchor[1], anchor[2] - size - gap];
        Some(match kind {
            Occluder::Sphere => Solid::Sphere { c, r: size },
            _ => {
                let spin = rot_z(rng.gen_range(0.0..std::f64::consts::PI));
                let half = [size, rng.gen_range(0.5..=1.0) * size, rng.gen_range(0.5..=1.0) * size];
                let axes = [
                    [spin[0][0], spin[1][0], spin[2][0]],
                    [spin[0][1], spin[1][1], spin[2][1]],
                    [0.0, 0.0, 1.0],
                ];
                Solid::Cuboid { c, axes, half }
            }
        })
    }

    /// Draws a pose, places the hand in front of the camera and adds the occluder.
    /// Placements that put a joint within a few pixels of the border are redrawn.
    pub fn draw(cfg: &SyntheticHandConfig, rng: &mut ChaCha8Rng) -> Scene {
        let intr = cfg.intrinsics();
        let margin = 4.0;
        let hi = cfg.image_size as f64 - 1.0 - margin;
        let inside = |p: &V3| {
            intr.project(mul(*p, 1e-3))
                .is_some_and(|(u, v)| (margin..=hi).contains(&u) && (margin..=hi).contains(&v))
        };
        let mut tries = 0;
        loop {
            let joints_mm = Self::place(cfg, rng);
            tries += 1;
            if joints_mm.iter().all(inside) || tries == 64 {
                let mut solids = Self::hand_solids(&joints_mm, cfg);
                if let Some(o) = Self::occluder(&joints_mm, cfg, rng) {
                    solids.push((o, false));
                }
                return Scene { joints_mm, solids };
            }
        }
    }

    fn place(cfg: &SyntheticHandConfig, rng: &mut ChaCha8Rng) -> [V3; JOINTS] {
        let pose = cfg.draw_pose(rng);
        let local = cfg.forward_kinematics(&pose);
        let (roll, tx, ty) = (
            rng.gen_range(-cfg.roll_deg..=cfg.roll_deg).to_radians(),
            rng.gen_range(-cfg.tilt_deg..=cfg.tilt_deg).to_radians(),
            rng.gen_range(-cfg.tilt_deg..=cfg.tilt_deg).to_radians(),
        );
        let rot = mat_mul(&rot_z(roll), &mat_mul(&rot_x(tx), &rot_y(ty)));
        let depth = rng.gen_range(cfg.depth_m.0..=cfg.depth_m.1) * 1000.0;
        let o = cfg.offset_mm;
        let shift = [rng.gen_range(-o..=o), rng.gen_range(-o..=o), depth];
        let center = mul(local.iter().fold([0.0; 3], |a, &p| add(a, p)), 1.0 / JOINTS as f64);
        let mut joints_mm = [[0.0; 3]; JOINTS];
        for (out, &p) in joints_mm.iter_mut().zip(&local) {
            *out = add(mat_vec(&rot, sub(p, center)), shift);
        }
        joints_mm
    }

    /// Seeded surface samples of every solid.
    fn surfels(&self, cfg: &SyntheticHandConfig, rng: &mut ChaCha8Rng) -> Vec<Surfel> {
        let mut out = Vec::new();
        for (solid, skin) in &self.solids {
            sample_surface(solid, cfg.density, *skin, rng, &mut out);
        }
        out
    }

    /// Z-buffer splat of the surface samples; depth is quantized to the file
    /// format's step and colors to 8 bits, so files round-trip exactly. Also
    /// returns every sample that landed inside the image (meters).
    fn render(&self, cfg: &SyntheticHandConfig, surfels: &[Surfel]) -> (Tensor, Option<Tensor>, Vec<V3>) {
        let s = cfg.image_size;
        let intr = cfg.intrinsics();
        let mut splatted = Vec::new();
        let mut zbuf = vec![f64::INFINITY; s * s];
        let mut color = vec![[0.0; 3]; s * s];
        for sf in surfels {
            let p = mul(sf.p, 1e-3);
            let Some((u, v)) = intr.project(p) else { continue };
            let (c, r) = (u.round(), v.round());
            if c < 0.0 || r < 0.0 || c >= s as f64 || r >= s as f64 {
                continue;
            }
            splatted.push(p);
            let i = r as usize * s + c as usize;
            if p[2] < zbuf[i] {
                zbuf[i] = p[2];
                let light = unit(mul(p, -1.0));
                let shade = 0.25 + 0.75 * dot(sf.n, light).max(0.0);
                let albedo = if sf.skin { SKIN } else { OBJECT };
                color[i] = mul(albedo, shade);
            }
        }
        let depth = Tensor::from_fn(&[s, s], |i| {
            if zbuf[i].is_finite() {
                (zbuf[i] / DEPTH_SCALE).round() * DEPTH_SCALE
            } else {
                0.0
            }
        });
        let rgb = cfg.rgb.then(|| {
            Tensor::from_fn(&[s, s, 3], |i| {
                let v = if zbuf[i / 3].is_finite() { color[i / 3][i % 3] } else { 0.0 };
                (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
            })
        });
        (depth, rgb, splatted)
    }
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_add(0x2545_f491_4f6c_dd1d)
}

/// Sample `index` of the stream for `cfg.seed` together with every surface
/// point splatted into its image; independent of how many samples are drawn.
pub fn generate_with_surface(cfg: &SyntheticHandConfig, index: usize) -> Result<(SampleRecord, Vec<V3>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, index));
    let scene = Scene::draw(cfg, &mut rng);
    let surfels = scene.surfels(cfg, &mut rng);
    let (depth, rgb, splatted) = scene.render(cfg, &surfels);
    let joints = Tensor::from_fn(&[JOINTS, 3], |i| scene.joints_mm[i / 3][i % 3] * 1e-3);
    let sample = SampleRecord {
        id: format!("{index:06}"),
        depth,
        rgb,
        intr: cfg.intrinsics(),
        joints,
    };
    Ok((sample, splatted))
}

pub fn generate_one(cfg: &SyntheticHandConfig, index: usize) -> Result<SampleRecord> {
    Ok(generate_with_surface(cfg, index)?.0)
}

pub fn generate_synthetic(cfg: &SyntheticHandConfig, n: usize) -> Result<Vec<SampleRecord>> {
    (0..n).map(|i| generate_one(cfg, i)).collect()
}

/// Distance (m) from each joint to its nearest point in `surface`.
pub fn joint_support(joints: &Tensor, surface: &[V3]) -> Vec<f64> {
    (0..joints.rows())
        .map(|j| {
            let q = joints.row(j);
            surface
                .iter()
                .map(|p| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Back-projection of every observed depth pixel (m).
pub fn visible_surface(s: &SampleRecord) -> Vec<V3> {
    let (h, w) = s.hw();
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let d = s.depth.at(&[r, c]);
            if d > 0.0 {
                pts.push(s.intr.unproject(c as f64, r as f64, d));
            }
        }
    }
    pts
}
