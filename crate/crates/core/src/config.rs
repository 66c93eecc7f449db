//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected with
//! the full list of valid keys. [`Config::to_text`] writes every key, so a
//! saved file reproduces a run exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsmType {
    /// Token-wise baseline: the block keeps only the value branch.
    None,
    /// Unidirectional gated SSM: `X_k = V ⊙ U_f`.
    Standard,
    Correspondence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NextTokens {
    Updated,
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrMap {
    /// `M[i,j] = Σ_c w_c[c] U_f[i,c] R[j,c]`.
    Channel,
    /// `M[i,j] = U_f[i] · W_c · R[j]`.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Smooth L1 per coordinate, summed over x, y, z.
    Coord,
    /// Smooth L1 of the per-joint Euclidean residual norm.
    Norm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Occluder {
    None,
    Sphere,
    Box,
    Mixed,
}

macro_rules! keyword_enum {
    ($t:ident { $($v:ident => $s:literal),+ $(,)? }) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($t::$v),)+
                    _ => Err(format!("expected one of: {}", [$($s),+].join(", "))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($t::$v => $s,)+ })
            }
        }
    };
}

keyword_enum!(SsmType { None => "none", Standard => "standard", Correspondence => "correspondence" });
keyword_enum!(NextTokens { Updated => "updated", Gated => "gated" });
keyword_enum!(CorrMap { Channel => "channel", Bilinear => "bilinear" });
keyword_enum!(LossMode { Coord => "coord", Norm => "norm" });
keyword_enum!(Occluder { None => "none", Sphere => "sphere", Box => "box", Mixed => "mixed" });

/// Comma-separated list of positive integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if v.is_empty() || v.contains(&0) {
            return Err("widths must be a non-empty list of positive integers".into());
        }
        Ok(Widths(v))
    }
}

impl fmt::Display for Widths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl Widths {
    pub fn last(&self) -> usize {
        *self.0.last().expect("non-empty")
    }
}

macro_rules! config {
    ($($(#[doc = $doc:literal])* $name:ident : $t:ty = $default:expr;)+) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])* pub $name: $t,)+
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($name: $default,)+ }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),+];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($name) => {
                        self.$name = value.parse::<$t>().map_err(|e| {
                            Error::Config(format!("bad value {value:?} for {key}: {e}"))
                        })?;
                    })+
                    other => {
                        return Err(Error::Config(format!(
                            "unknown key {other:?}; valid keys: {}",
                            Self::KEYS.join(", ")
                        )))
                    }
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(self.$name.to_string()),)+
                    _ => None,
                }
            }
        }
    };
}

config! {
    seed: u64 = 0;
    /// Square input image side in pixels.
    image_size: usize = 128;
    num_points: usize = 1024;
    super_points: usize = 256;
    joints: usize = 21;
    /// Neighbours per super point in the 3D local encoder.
    encoder_k: usize = 32;
    /// Neighbours per joint in the block's local aggregation.
    local_k: usize = 32;
    /// 3D local encoder MLP; the last width is C_p.
    point_mlp: Widths = Widths(vec![64, 128]);
    /// 2D autoencoder stage widths before the output stage.
    ae_widths: Widths = Widths(vec![32, 64]);
    depth_channels: usize = 64;
    rgb_channels: usize = 64;
    use_rgb: bool = true;
    reconstruction_head: bool = false;
    /// Global vector stages (M → M/4, then all points); last width is C_g.
    global_mlp1: Widths = Widths(vec![256]);
    global_mlp2: Widths = Widths(vec![512]);
    /// BIL stack; the last width is the token width C.
    bil_widths: Widths = Widths(vec![512, 256, 128]);
    /// Hidden width of the block's local set-conv MLPs (output is C).
    local_hidden: usize = 128;
    state_dim: usize = 16;
    stacks: usize = 3;
    ssm_type: SsmType = SsmType::Correspondence;
    local_inject: bool = true;
    local_filter: bool = true;
    residual: bool = false;
    next_tokens: NextTokens = NextTokens::Updated;
    corr_map: CorrMap = CorrMap::Channel;
    share_wr: bool = true;
    /// Evaluate SSMs through the convolution kernel instead of the recurrence.
    ssm_kernel: bool = false;
    loss_mode: LossMode = LossMode::Coord;
    lr: f64 = 1e-3;
    beta1: f64 = 0.5;
    beta2: f64 = 0.999;
    adam_eps: f64 = 1e-8;
    weight_decay: f64 = 0.01;
    /// Epoch (1-based) from which the learning rate is multiplied by `lr_decay`.
    decay_epoch: usize = 19;
    lr_decay: f64 = 0.1;
    /// Global gradient-norm bound (0 = no clipping).
    grad_clip: f64 = 0.0;
    epochs: usize = 30;
    batch_size: usize = 8;
    /// Stop after this many optimizer steps (0 = no limit).
    max_steps: usize = 0;
    augment: bool = true;
    aug_rotation_deg: f64 = 180.0;
    aug_scale_min: f64 = 0.9;
    aug_scale_max: f64 = 1.1;
    aug_translation_mm: f64 = 10.0;
    /// Draw a fresh point sample every epoch instead of a fixed one per sample.
    resample_points: bool = true;
    train_dir: String = "data/train".to_string();
    val_dir: String = "data/val".to_string();
    /// Synthetic samples to generate when a data directory is empty.
    train_samples: usize = 64;
    val_samples: usize = 16;
    occluder: Occluder = Occluder::None;
    out_dir: String = "runs/default".to_string();
    bench_frames: usize = 100;
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            s.push_str(&format!("{k} = {}\n", self.get(k).expect("listed key")));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 2 != 0 {
            return fail(format!("image_size must be even and positive, got {}", self.image_size));
        }
        if self.super_points < 4 || self.super_points > self.num_points {
            return fail(format!(
                "super_points must be in [4, num_points], got {} with num_points {}",
                self.super_points, self.num_points
            ));
        }
        if self.encoder_k == 0 || self.encoder_k > self.num_points {
            return fail(format!("encoder_k must be in [1, num_points], got {}", self.encoder_k));
        }
        if self.local_k == 0 || self.local_k > self.super_points {
            return fail(format!("local_k must be in [1, super_points], got {}", self.local_k));
        }
        if self.joints < 2 {
            return fail("joints must be at least 2".into());
        }
        if self.bil_widths.0.len() != 3 {
            return fail("bil_widths must list exactly three widths".into());
        }
        if self.bil_widths.last() < 2 {
            return fail("token width (last bil width) must be at least 2".into());
        }
        if self.state_dim == 0 || self.batch_size == 0 {
            return fail("state_dim and batch_size must be positive".into());
        }
        if !(self.aug_scale_min > 0.0 && self.aug_scale_min <= self.aug_scale_max) {
            return fail("need 0 < aug_scale_min ≤ aug_scale_max".into());
        }
        if self.aug_rotation_deg < 0.0 || self.aug_translation_mm < 0.0 {
            return fail("augmentation ranges must be non-negative".into());
        }
        if !(self.grad_clip >= 0.0) {
            return fail(format!("grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("need lr > 0 and betas in [0, 1)".into());
        }
        Ok(())
    }

    pub fn token_width(&self) -> usize {
        self.bil_widths.last()
    }

    /// Width of the fused super-point features.
    pub fn fused_width(&self) -> usize {
        self.point_mlp.last() + self.depth_channels + self.rgb_channels
    }

    /// A miniature configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        Config {
            image_size: 32,
            num_points: 64,
            super_points: 16,
            encoder_k: 8,
            local_k: 4,
            point_mlp: Widths(vec![8, 8]),
            ae_widths: Widths(vec![4, 4]),
            depth_channels: 4,
            rgb_channels: 4,
            global_mlp1: Widths(vec![16]),
            global_mlp2: Widths(vec![16]),
            bil_widths: Widths(vec![16, 16, 8]),
            local_hidden: 8,
            state_dim: 4,
            stacks: 2,
            ..Config::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = Config::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (0.001, 0.5, 0.999));
        assert_eq!((c.aug_rotation_deg, c.aug_scale_min, c.aug_scale_max, c.aug_translation_mm), (180.0, 0.9, 1.1, 10.0));
        assert_eq!((c.num_points, c.super_points, c.joints, c.stacks), (1024, 256, 21, 3));
        assert_eq!((c.decay_epoch, c.lr_decay, c.weight_decay, c.grad_clip), (19, 0.1, 0.01, 0.0));
        assert_eq!(crate::train::AdamConfig::from_config(&c), crate::train::AdamConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::tiny();
        c.use_rgb = false;
        c.ssm_type = SsmType::Standard;
        c.lr = 0.000123456789;
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let e = Config::parse("stakcs = 3").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("stakcs") && msg.contains("stacks") && msg.contains("use_rgb"), "{msg}");
    }

    #[test]
    fn bad_values_and_overrides() {
        assert!(Config::parse("ssm_type = selective").unwrap_err().to_string().contains("correspondence"));
        assert!(Config::parse("image_size = 127").is_err());
        assert!(Config::parse("local_k = 300").is_err());
        let mut c = Config::default();
        c.apply_override("use_rgb=false").unwrap();
        c.apply_override("point_mlp = 16, 32").unwrap();
        assert!(!c.use_rgb);
        assert_eq!(c.point_mlp, Widths(vec![16, 32]));
        assert!(c.apply_override("use_rgb").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = Config::parse("# header\n\nstacks = 1  # one block\n").unwrap();
        assert_eq!(c.stacks, 1);
    }
}
