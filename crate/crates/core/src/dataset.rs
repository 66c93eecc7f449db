//! Sample records, their on-disk format, and conversion into network inputs.
//!
//! A sample directory holds `depth.pgm` (binary 16-bit P5, metric depth divided
//! by `depth_scale`), an optional `rgb.ppm` (binary 8-bit P6) and `meta.txt`:
//! one `fx fy cx cy depth_scale` line followed by one `x y z` line per joint
//! in meters.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::encoder::EncoderInput;
use crate::points::{centroid, depth_to_points, normalize, CameraIntrinsics, NORM_RADIUS};
use crate::tensor::Tensor;
use crate::train::{augment_sample, Similarity, TrainItem};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[H×W]` metric depth, 0 where nothing was observed.
    pub depth: Tensor,
    /// `[H×W×3]` in `[0, 1]`.
    pub rgb: Option<Tensor>,
    pub intr: CameraIntrinsics,
    /// `[J×3]` camera-frame joints in meters.
    pub joints: Tensor,
}

impl SampleRecord {
    pub fn hw(&self) -> (usize, usize) {
        (self.depth.shape()[0], self.depth.shape()[1])
    }
}

fn parse_err(file: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

struct Netpbm<'a> {
    width: usize,
    height: usize,
    maxval: usize,
    payload: &'a [u8],
    payload_offset: usize,
}

fn parse_netpbm<'a>(file: &Path, bytes: &'a [u8], magic: &[u8; 2]) -> Result<Netpbm<'a>> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(parse_err(
            file,
            0,
            format!("expected magic {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(file, pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(file, start, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(file, pos, "expected whitespace after the header")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(parse_err(file, pos, format!("bad dimensions {width}×{height} or maxval {maxval}")));
    }
    Ok(Netpbm {
        width,
        height,
        maxval,
        payload: &bytes[pos..],
        payload_offset: pos,
    })
}

impl Netpbm<'_> {
    fn samples(&self, file: &Path, channels: usize) -> Result<Vec<u16>> {
        let wide = self.maxval > 255;
        let n = self.width * self.height * channels;
        let need = n * if wide { 2 } else { 1 };
        if self.payload.len() < need {
            return Err(parse_err(
                file,
                self.payload_offset + self.payload.len(),
                format!("truncated payload: {} of {need} bytes", self.payload.len()),
            ));
        }
        Ok(if wide {
            self.payload[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            self.payload[..need].iter().map(|&b| b as u16).collect()
        })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads a P5 image as metric depth.
pub fn read_depth_pgm(path: &Path, depth_scale: f64) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let img = parse_netpbm(path, &bytes, b"P5")?;
    let px = img.samples(path, 1)?;
    Tensor::new(&[img.height, img.width], px.into_iter().map(|v| v as f64 * depth_scale).collect())
}

pub fn write_depth_pgm(path: &Path, depth: &Tensor, depth_scale: f64) -> Result<()> {
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &d in depth.data() {
        let q = (d / depth_scale).round();
        if !(0.0..=65535.0).contains(&q) {
            return Err(Error::contract(format!("depth {d} m does not fit 16 bits at scale {depth_scale}")));
        }
        out.extend((q as u16).to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_rgb_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_bytes(path)?;
    let img = parse_netpbm(path, &bytes, b"P6")?;
    let px = img.samples(path, 3)?;
    let m = img.maxval as f64;
    Tensor::new(&[img.height, img.width, 3], px.into_iter().map(|v| v as f64 / m).collect())
}

pub fn write_rgb_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn meta_text(s: &SampleRecord) -> String {
    let i = &s.intr;
    let mut out = format!("{:?} {:?} {:?} {:?} {:?}\n", i.fx, i.fy, i.cx, i.cy, i.depth_scale);
    for r in 0..s.joints.rows() {
        let p = s.joints.row(r);
        let _ = writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    out
}

fn parse_meta(path: &Path, text: &str) -> Result<(CameraIntrinsics, Tensor)> {
    let mut offset = 0;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let vals = trimmed
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(path, offset, format!("bad number: {e}")))?;
            rows.push((offset, vals));
        }
        offset += line.len();
    }
    let Some(((o, head), joints)) = rows.split_first() else {
        return Err(parse_err(path, 0, "empty metadata"));
    };
    if head.len() != 5 {
        return Err(parse_err(path, *o, "first line must be `fx fy cx cy depth_scale`"));
    }
    let intr = CameraIntrinsics::new(head[0], head[1], head[2], head[3], head[4]).map_err(|e| parse_err(path, *o, e.to_string()))?;
    let mut data = Vec::with_capacity(joints.len() * 3);
    for (o, v) in joints {
        if v.len() != 3 {
            return Err(parse_err(path, *o, "joint lines must be `x y z`"));
        }
        data.extend(v);
    }
    if joints.is_empty() {
        return Err(parse_err(path, text.len(), "no joint lines"));
    }
    Ok((intr, Tensor::new(&[joints.len(), 3], data)?))
}

/// Writes `s` into `dir` (created if needed).
pub fn write_sample(s: &SampleRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_depth_pgm(&dir.join("depth.pgm"), &s.depth, s.intr.depth_scale)?;
    if let Some(rgb) = &s.rgb {
        write_rgb_ppm(&dir.join("rgb.ppm"), rgb)?;
    }
    let meta = dir.join("meta.txt");
    fs::write(&meta, meta_text(s)).map_err(|e| Error::io(&meta, e))
}

/// Reads a sample directory; the id is the directory name.
pub fn read_sample(dir: &Path) -> Result<SampleRecord> {
    let meta = dir.join("meta.txt");
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let (intr, joints) = parse_meta(&meta, &text)?;
    let depth = read_depth_pgm(&dir.join("depth.pgm"), intr.depth_scale)?;
    let rgb_path = dir.join("rgb.ppm");
    let rgb = if rgb_path.exists() {
        let rgb = read_rgb_ppm(&rgb_path)?;
        if rgb.shape()[..2] != depth.shape()[..] {
            return Err(Error::dim("read_sample rgb", rgb.shape(), depth.shape()));
        }
        Some(rgb)
    } else {
        None
    };
    Ok(SampleRecord {
        id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        depth,
        rgb,
        intr,
        joints,
    })
}

pub fn write_dataset(root: &Path, samples: &[SampleRecord]) -> Result<()> {
    for s in samples {
        write_sample(s, &root.join(&s.id))?;
    }
    Ok(())
}

/// Sample subdirectories of `root` in name order.
pub fn list_samples(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("meta.txt").is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyInput(format!("no samples in {}", root.display())));
    }
    Ok(dirs)
}

pub fn read_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    list_samples(root)?.iter().map(|d| read_sample(d)).collect()
}

/// A sample converted to network inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub item: TrainItem,
    /// Normalization center (camera frame, meters) of the possibly augmented cloud.
    pub center: [f64; 3],
    /// Ground-truth joints after augmentation, meters.
    pub joints: Tensor,
}

/// `1 + (z̄ − d)/0.15` on observed pixels and 0 elsewhere, `z̄` the mean observed depth.
pub fn depth_channel(depth: &Tensor) -> Tensor {
    let valid: Vec<f64> = depth.data().iter().copied().filter(|&d| d > 0.0 && d.is_finite()).collect();
    let mean = if valid.is_empty() { 0.0 } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    Tensor::from_fn(&[depth.len(), 1], |i| {
        let d = depth.data()[i];
        if d > 0.0 && d.is_finite() {
            1.0 + (mean - d) / NORM_RADIUS
        } else {
            0.0
        }
    })
}

/// Lifts, optionally augments, and normalizes a sample.
pub fn prepare(s: &SampleRecord, cfg: &Config, point_seed: u64, aug: Option<&Similarity>) -> Result<Prepared> {
    let (h, w) = s.hw();
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::contract(format!(
            "sample {} is {h}×{w}, config expects {n}×{n}",
            s.id,
            n = cfg.image_size
        )));
    }
    if s.joints.rows() != cfg.joints {
        return Err(Error::contract(format!(
            "sample {} has {} joints, model expects {}",
            s.id,
            s.joints.rows(),
            cfg.joints
        )));
    }
    let cloud = depth_to_points(&s.depth, &s.intr, cfg.num_points, point_seed)?;
    let (points, joints) = match aug {
        Some(t) => augment_sample(&cloud.coords, &s.joints, t),
        None => (cloud.coords.clone(), s.joints.clone()),
    };
    let center = centroid(&points);
    let rgb = match (&s.rgb, cfg.use_rgb) {
        (Some(img), true) => Some(Tensor::from_fn(&[h * w, 3], |i| img.data()[i] - 0.5)),
        _ => None,
    };
    Ok(Prepared {
        item: TrainItem {
            input: EncoderInput {
                points: normalize(&points, center),
                points_cam: cloud.coords,
                depth: depth_channel(&s.depth),
                rgb,
                hw: (h, w),
                intr: s.intr,
            },
            gt: normalize(&joints, center),
        },
        center,
        joints,
    })
}
