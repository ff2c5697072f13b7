//! Graphic normalization: decode, flatten to RGB over white, downscale to
//! the target dimension, encode as JPEG.
//!
//! Raster formats decode natively. Vector formats (pdf/eps/ps) go through
//! an external rasterizer hook when one is configured; without a hook they
//! are skipped, not failed.

use std::io::Cursor;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use image::codecs::jpeg::JpegEncoder;
use image::{DynamicImage, ImageFormat, RgbImage};
use thiserror::Error;

/// Default maximum output dimension in pixels.
pub const DEFAULT_RESIZE_TARGET: u32 = 512;
/// Default JPEG quality.
pub const DEFAULT_JPEG_QUALITY: u8 = 90;
/// Resize filter identity, recorded in the manifest for reproducibility.
pub const RESIZE_FILTER_NAME: &str = "lanczos3";

#[derive(Debug, Error)]
pub enum ImageProcError {
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("rasterizer hook failed: {0}")]
    Hook(String),
    #[error("vector graphic skipped: no rasterizer hook configured")]
    VectorNoHook,
}

/// An 8-bit RGB pixel buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples; length = width * height * 3.
    pub pixels: Vec<u8>,
}

impl Raster {
    fn from_rgb(img: RgbImage) -> Self {
        Raster {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
        }
    }

    fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("raster invariant: len == w*h*3")
    }
}

/// External command that rasterizes a vector graphic. The template is
/// whitespace-split; the tokens `{input}`, `{output}` and `{maxdim}` are
/// substituted per invocation. The command must write a PNG to `{output}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterizerHook {
    pub command_template: String,
    pub timeout: Duration,
}

impl RasterizerHook {
    pub fn new(command_template: impl Into<String>) -> Self {
        RasterizerHook {
            command_template: command_template.into(),
            timeout: Duration::from_secs(60),
        }
    }

    /// Identity string recorded in run summaries.
    pub fn identity(&self) -> String {
        self.command_template.clone()
    }

    fn run(&self, bytes: &[u8], extension: &str, maxdim: u32) -> Result<Vec<u8>, ImageProcError> {
        let dir = tempfile::tempdir().map_err(|e| ImageProcError::Hook(e.to_string()))?;
        let input: PathBuf = dir.path().join(format!("input.{extension}"));
        let output: PathBuf = dir.path().join("output.png");
        std::fs::write(&input, bytes).map_err(|e| ImageProcError::Hook(e.to_string()))?;

        let tokens: Vec<String> = self
            .command_template
            .split_whitespace()
            .map(|t| {
                t.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
                    .replace("{maxdim}", &maxdim.to_string())
            })
            .collect();
        let (program, args) = tokens
            .split_first()
            .ok_or_else(|| ImageProcError::Hook("empty hook command".into()))?;

        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ImageProcError::Hook(format!("spawn {program}: {e}")))?;

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(ImageProcError::Hook(format!(
                            "timeout after {:?}",
                            self.timeout
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(ImageProcError::Hook(e.to_string())),
            }
        };
        if !status.success() {
            return Err(ImageProcError::Hook(format!("exit status {status}")));
        }
        std::fs::read(&output)
            .map_err(|e| ImageProcError::Hook(format!("hook produced no output: {e}")))
    }
}

fn format_for_extension(extension: &str) -> Option<ImageFormat> {
    match extension {
        "jpg" | "jpeg" => Some(ImageFormat::Jpeg),
        "png" => Some(ImageFormat::Png),
        "gif" => Some(ImageFormat::Gif),
        _ => None,
    }
}

/// Decode a whitelisted graphic into an RGB raster.
///
/// gif decodes to its first frame. Alpha is composited over white.
/// pdf/eps/ps are rasterized via the hook at the given target dimension.
pub fn decode_image(
    bytes: &[u8],
    extension: &str,
    hook: Option<&RasterizerHook>,
    target: u32,
) -> Result<Raster, ImageProcError> {
    let extension = extension.to_ascii_lowercase();
    match format_for_extension(&extension) {
        Some(format) => {
            let dynamic = image::load_from_memory_with_format(bytes, format)
                .map_err(|e| ImageProcError::Decode(e.to_string()))?;
            Ok(flatten_over_white(dynamic))
        }
        None => match hook {
            Some(hook) => {
                let png = hook.run(bytes, &extension, target)?;
                let dynamic = image::load_from_memory_with_format(&png, ImageFormat::Png)
                    .map_err(|e| ImageProcError::Hook(format!("bad hook output: {e}")))?;
                Ok(flatten_over_white(dynamic))
            }
            None => Err(ImageProcError::VectorNoHook),
        },
    }
}

/// Composite alpha over white: out = a * src + (1 - a) * 255, rounded to
/// nearest, per channel. Grayscale and palette images expand to RGB.
fn flatten_over_white(img: DynamicImage) -> Raster {
    if img.color().has_alpha() {
        let rgba = img.to_rgba8();
        let (w, h) = rgba.dimensions();
        let mut out = Vec::with_capacity((w * h * 3) as usize);
        for px in rgba.pixels() {
            let a = px.0[3] as f32 / 255.0;
            for c in 0..3 {
                let v = a * px.0[c] as f32 + (1.0 - a) * 255.0;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        Raster {
            width: w,
            height: h,
            pixels: out,
        }
    } else {
        Raster::from_rgb(img.to_rgb8())
    }
}

/// Compute the output dimensions for a max-dimension resize. No
/// upscaling: inputs within the target are unchanged. The major axis maps
/// to exactly `target`; the minor axis scales proportionally, rounded to
/// nearest, floor 1.
pub fn resized_dimensions(width: u32, height: u32, target: u32) -> (u32, u32) {
    let major = width.max(height);
    if major <= target {
        return (width, height);
    }
    let scale_minor = |minor: u32| -> u32 {
        let scaled = (minor as f64 * target as f64 / major as f64).round() as u32;
        scaled.max(1)
    };
    if width >= height {
        (target, scale_minor(height))
    } else {
        (scale_minor(width), target)
    }
}

/// Downscale so max(width, height) <= target, aspect ratio preserved.
pub fn resize_to_target(img: &Raster, target: u32) -> Raster {
    let (new_w, new_h) = resized_dimensions(img.width, img.height, target);
    if (new_w, new_h) == (img.width, img.height) {
        return img.clone();
    }
    let resized = image::imageops::resize(
        &img.to_rgb(),
        new_w,
        new_h,
        image::imageops::FilterType::Lanczos3,
    );
    Raster::from_rgb(resized)
}

/// Encode an RGB raster as a baseline JPEG at the given quality (1-100).
pub fn encode_jpeg(img: &Raster, quality: u8) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    let encoder = JpegEncoder::new_with_quality(&mut buf, quality);
    img.to_rgb()
        .write_with_encoder(encoder)
        .expect("in-memory JPEG encoding of a valid raster cannot fail");
    buf.into_inner()
}
