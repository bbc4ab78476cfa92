//! Frame sequences on disk.
//!
//! A sequence is a directory of image files read in natural filename order
//! (`frame_2.png` before `frame_10.png`). Writers use `frame_%05d.png` with
//! 16-bit grayscale samples. A single image file loads as a one-frame
//! sequence.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ColorType, DynamicImage, ImageBuffer, ImageReader, Luma};
use usptrack_core::{Error, GrayImage, Result, VideoSequence};

use crate::io_error;

/// Extensions accepted as frames.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "pgm", "pnm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Target `(width, height)`; `None` keeps native sizes, which must then agree.
    pub resize: Option<(usize, usize)>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { resize: Some((256, 256)) }
    }
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Compare names with digit runs ordered numerically.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (na, nb) = (trim_zeros(&a[..da]), trim_zeros(&b[..db]));
                let ord = na.len().cmp(&nb.len()).then_with(|| na.cmp(nb)).then_with(|| da.cmp(&db));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[da..];
                b = &b[db..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let k = digits.iter().take_while(|&&c| c == b'0').count();
    &digits[k.min(digits.len().saturating_sub(1))..]
}

/// Image files of a sequence directory in natural order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| io_error(dir, e))?;
        let path = entry.path();
        if path.is_file() && is_image(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| natural_cmp(&a.file_name().unwrap_or_default().to_string_lossy(), &b.file_name().unwrap_or_default().to_string_lossy()));
    Ok(files)
}

/// Decode one image file to `[0, 1]` grayscale: 8-bit samples are divided
/// by 255, 16-bit samples by 65535, float samples are taken as is.
pub fn read_frame(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path).map_err(|e| io_error(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| io_error(path, e))?;
    let img = reader.decode().map_err(|e| Error::Format(format!("{}: cannot decode image: {e}", path.display())))?;
    Ok(to_gray(&img))
}

fn to_gray(img: &DynamicImage) -> GrayImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {
            img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
        }
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()
        }
        _ => img.to_luma32f().into_raw().into_iter().map(f64::from).collect(),
    };
    GrayImage::new(w, h, data).expect("decoded images are non-empty")
}

/// Resample to `width × height` with a triangle (bilinear, antialiased) filter.
pub fn resize_frame(frame: &GrayImage, width: usize, height: usize) -> GrayImage {
    if frame.width() == width && frame.height() == height {
        return frame.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
        frame.width() as u32,
        frame.height() as u32,
        frame.data().iter().map(|&v| v as f32).collect(),
    )
    .expect("buffer length matches dimensions");
    let out = imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
    GrayImage::new(width, height, out.into_raw().into_iter().map(f64::from).collect()).expect("non-empty target size")
}

/// Load a sequence directory (or a single image file).
pub fn load_sequence(path: &Path, opts: &LoadOptions) -> Result<VideoSequence> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let files = if path.is_dir() { list_frames(path)? } else { vec![path.to_path_buf()] };
    if files.is_empty() {
        return Err(Error::Format(format!("{}: no image files", path.display())));
    }
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let frame = read_frame(f)?;
        let frame = match opts.resize {
            Some((w, h)) => resize_frame(&frame, w, h),
            None => {
                if let Some(first) = frames.first() {
                    let first: &GrayImage = first;
                    if (first.width(), first.height()) != (frame.width(), frame.height()) {
                        return Err(Error::Format(format!(
                            "{}: frame is {}x{} but {} is {}x{}; enable resizing to mix sizes",
                            f.display(),
                            frame.width(),
                            frame.height(),
                            files[0].display(),
                            first.width(),
                            first.height()
                        )));
                    }
                }
                frame
            }
        };
        frames.push(frame);
    }
    let id = path.file_stem().map_or_else(|| "sequence".to_string(), |s| s.to_string_lossy().into_owned());
    VideoSequence::new(id, frames)
}

/// Write one frame as a 16-bit grayscale PNG; intensities are clamped to `[0, 1]`.
pub fn write_frame(path: &Path, frame: &GrayImage) -> Result<()> {
    let raw: Vec<u16> = frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(frame.width() as u32, frame.height() as u32, raw).expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Write every frame as `dir/frame_%05d.png`, creating `dir` if needed.
pub fn save_sequence(dir: &Path, video: &VideoSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    for (t, frame) in video.frames().iter().enumerate() {
        write_frame(&dir.join(frame_file_name(t)), frame)?;
    }
    Ok(())
}
