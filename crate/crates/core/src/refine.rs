//! Optional denoising after a step, steered by how strongly each pixel was
//! brightened: noise in dark regions is amplified by the same gain as the
//! signal, so heavily lifted pixels get the most smoothing.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use crate::error::{shape_err, Error, Result};
use crate::image::{load_image, save_image, ImageRGB};

pub const MAP_EPS: f32 = 1e-3;
pub const MAP_MAX: f32 = 20.0;
pub const MAP_MAGIC: &[u8; 8] = b"RLNMAP01";
pub const BILATERAL_RADIUS: usize = 2;
pub const BILATERAL_SPATIAL_SIGMA: f32 = 1.5;
/// Default range-kernel strength for fully brightened pixels.
pub const DEFAULT_STRENGTH: f32 = 0.1;

/// Per-pixel brightening ratio, clamped to `[1, MAP_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseLevelMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl NoiseLevelMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::OutOfRange(format!("noise level {v} must be finite and non-negative")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `RLNMAP01`, height and width as u32, then the values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Codec(format!("noise map: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAP_MAGIC {
            return Err(bad("missing header"));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != 4 * h * w {
            return Err(bad("length does not match dimensions"));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Self::new(h, w, data)
    }
}

/// Mean over channels of `(Y + ε) / (I₀ + ε)`, clamped to `[1, MAP_MAX]`.
pub fn noise_level_map(enhanced: &ImageRGB, original: &ImageRGB) -> Result<NoiseLevelMap> {
    enhanced.expect_same_dims(original)?;
    let n = enhanced.pixels();
    let (y, i) = (enhanced.data(), original.data());
    let data = (0..n)
        .map(|p| {
            let ratio: f32 = (0..3).map(|c| (y[c * n + p] + MAP_EPS) / (i[c * n + p] + MAP_EPS)).sum::<f32>() / 3.0;
            ratio.clamp(1.0, MAP_MAX)
        })
        .collect();
    NoiseLevelMap::new(enhanced.height(), enhanced.width(), data)
}

/// 5×5 bilateral filter with a per-pixel range parameter
/// `σ_r = κ·(m − 1) / (MAP_MAX − 1)`. Pixels with `σ_r = 0` are copied.
pub fn builtin_guided_denoise(img: &ImageRGB, map: &NoiseLevelMap, strength: f32) -> Result<ImageRGB> {
    if map.dims() != img.dims() {
        return Err(shape_err(img.dims(), map.dims()));
    }
    if !(strength >= 0.0) {
        return Err(Error::InvalidParameter(format!("denoise strength must be non-negative, got {strength}")));
    }
    let (h, w) = img.dims();
    let n = h * w;
    let src = img.data();
    let mut out = src.to_vec();
    let r = BILATERAL_RADIUS as isize;
    let spatial = |dy: isize, dx: isize| {
        (-((dy * dy + dx * dx) as f32) / (2.0 * BILATERAL_SPATIAL_SIGMA * BILATERAL_SPATIAL_SIGMA)).exp()
    };
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sigma = strength * (map.data[p] - 1.0) / (MAP_MAX - 1.0);
            if !(sigma > 0.0) {
                continue;
            }
            let inv = 1.0 / (2.0 * sigma * sigma);
            let mut acc = [0.0f32; 3];
            let mut total = 0.0f32;
            for dy in -r..=r {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let q = sy as usize * w + sx as usize;
                    // colour distance, so the channels are smoothed together
                    let d2: f32 = (0..3).map(|c| (src[c * n + q] - src[c * n + p]).powi(2)).sum::<f32>() / 3.0;
                    let wgt = spatial(dy, dx) * (-d2 * inv).exp();
                    total += wgt;
                    for c in 0..3 {
                        acc[c] += wgt * src[c * n + q];
                    }
                }
            }
            for c in 0..3 {
                out[c * n + p] = (acc[c] / total).clamp(0.0, 1.0);
            }
        }
    }
    ImageRGB::from_planar(h, w, out)
}

/// An external denoiser invoked as a process. The argument template must
/// mention `{in}`, `{map}` and `{out}`, which are replaced with the paths of
/// the input PNG, the noise map file and the PNG the command must write.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalDenoiser {
    argv: Vec<String>,
    temp_dir: Option<PathBuf>,
}

impl ExternalDenoiser {
    pub fn new(argv: Vec<String>, temp_dir: Option<PathBuf>) -> Result<Self> {
        if argv.is_empty() {
            return Err(Error::InvalidParameter("denoiser command is empty".into()));
        }
        for key in ["{in}", "{map}", "{out}"] {
            if !argv.iter().any(|a| a.contains(key)) {
                return Err(Error::InvalidParameter(format!("denoiser command must mention {key}")));
            }
        }
        Ok(Self { argv, temp_dir })
    }

    /// Splits `template` with shell quoting rules; no shell is involved when
    /// the command runs.
    pub fn parse(template: &str, temp_dir: Option<PathBuf>) -> Result<Self> {
        let argv = shlex::split(template)
            .ok_or_else(|| Error::InvalidParameter(format!("cannot parse denoiser command {template:?}")))?;
        Self::new(argv, temp_dir)
    }

    pub fn argv(&self) -> &[String] {
        &self.argv
    }

    pub fn run(&self, img: &ImageRGB, map: &NoiseLevelMap) -> Result<ImageRGB> {
        if map.dims() != img.dims() {
            return Err(shape_err(img.dims(), map.dims()));
        }
        let dir = match &self.temp_dir {
            Some(d) => tempfile::Builder::new().prefix("rellie-rf").tempdir_in(d)?,
            None => tempfile::Builder::new().prefix("rellie-rf").tempdir()?,
        };
        let (in_path, map_path, out_path) = (dir.path().join("in.png"), dir.path().join("map.bin"), dir.path().join("out.png"));
        save_image(img, &in_path)?;
        std::fs::write(&map_path, map.to_bytes())?;

        let subst = |arg: &str| {
            arg.replace("{in}", &path_str(&in_path))
                .replace("{map}", &path_str(&map_path))
                .replace("{out}", &path_str(&out_path))
        };
        let args: Vec<String> = self.argv.iter().map(|a| subst(a)).collect();
        let output = Command::new(&args[0])
            .args(&args[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .output()
            .map_err(|e| Error::DenoiserSpawn(format!("{}: {e}", args[0])))?;
        if !output.status.success() {
            return Err(Error::DenoiserExit {
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        let result = load_image(&out_path).map_err(|e| Error::DenoiserOutput(e.to_string()))?;
        if result.dims() != img.dims() {
            return Err(Error::DenoiserOutput(format!(
                "expected {}x{} image, got {}x{}",
                img.height(),
                img.width(),
                result.height(),
                result.width()
            )));
        }
        Ok(result)
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    Builtin { strength: f32 },
    External(ExternalDenoiser),
}

impl Default for Denoiser {
    fn default() -> Self {
        Denoiser::Builtin {
            strength: DEFAULT_STRENGTH,
        }
    }
}

impl Denoiser {
    pub fn apply(&self, img: &ImageRGB, map: &NoiseLevelMap) -> Result<ImageRGB> {
        match self {
            Denoiser::Builtin { strength } => builtin_guided_denoise(img, map, *strength),
            Denoiser::External(ext) => ext.run(img, map),
        }
    }
}
