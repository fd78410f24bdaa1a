//! Image file formats.
//!
//! * 8/16-bit grayscale PNG
//! * single- or multi-page grayscale TIFF (8/16-bit integer or 32-bit float)
//! * raw little-endian `f32` with a TOML sidecar header: `name.raw` holds
//!   `h * w` row-major floats and `name.hdr` holds
//!
//! ```toml
//! format = "n2v2-raw"
//! version = 1
//! dtype = "float32-le"
//! shape = [h, w]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use crate::error::{Error, Result};

pub const RAW_FORMAT: &str = "n2v2-raw";
pub const RAW_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    Png8,
    Png16,
    Tiff8,
    Tiff16,
    TiffF32,
    RawF32,
}

impl Encoding {
    pub fn extension(self) -> &'static str {
        match self {
            Encoding::Png8 | Encoding::Png16 => "png",
            Encoding::Tiff8 | Encoding::Tiff16 | Encoding::TiffF32 => "tif",
            Encoding::RawF32 => "raw",
        }
    }

    fn integer_range(self) -> Option<(f32, f32)> {
        match self {
            Encoding::Png8 | Encoding::Tiff8 => Some((0.0, 255.0)),
            Encoding::Png16 | Encoding::Tiff16 => Some((0.0, 65535.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    format: String,
    version: u32,
    dtype: String,
    shape: [usize; 2],
}

pub fn raw_header_path(path: &Path) -> PathBuf {
    path.with_extension("hdr")
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// True for file names this module can read.
pub fn is_supported_image(path: &Path) -> bool {
    matches!(extension(path).as_str(), "png" | "tif" | "tiff" | "raw")
}

/// Loads a single image (the first page of a multi-page TIFF).
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    match extension(path).as_str() {
        "png" => load_png(path),
        "tif" | "tiff" => load_tiff_stack(path, Some(1)).map(|mut v| v.remove(0)),
        "raw" => load_raw(path),
        other => Err(Error::format(
            path,
            format!("unsupported image format `{other}`"),
        )),
    }
}

/// Loads every page of a TIFF stack; other formats yield one image.
pub fn load_stack(path: &Path) -> Result<Vec<ImageTensor>> {
    match extension(path).as_str() {
        "tif" | "tiff" => load_tiff_stack(path, None),
        _ => load_image(path).map(|img| vec![img]),
    }
}

pub fn save_image(img: &ImageTensor, path: &Path, encoding: Encoding) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    match encoding {
        Encoding::Png8 => {
            let data = quantize::<u8>(img, encoding, path)?;
            let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, data)
                .expect("buffer size matches");
            buf.save(path)
                .map_err(|e| Error::format(path, e.to_string()))
        }
        Encoding::Png16 => {
            let data = quantize::<u16>(img, encoding, path)?;
            let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
                img.width() as u32,
                img.height() as u32,
                data,
            )
            .expect("buffer size matches");
            buf.save(path)
                .map_err(|e| Error::format(path, e.to_string()))
        }
        Encoding::Tiff8 | Encoding::Tiff16 | Encoding::TiffF32 => {
            save_tiff_stack(std::slice::from_ref(img), path, encoding)
        }
        Encoding::RawF32 => save_raw(img, path),
    }
}

/// Writes several equally-encoded pages into one TIFF file.
pub fn save_tiff_stack(pages: &[ImageTensor], path: &Path, encoding: Encoding) -> Result<()> {
    use tiff::encoder::{colortype, TiffEncoder};

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc =
        TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
    for img in pages {
        let (w, h) = (img.width() as u32, img.height() as u32);
        let res = match encoding {
            Encoding::Tiff8 => {
                let data = quantize::<u8>(img, encoding, path)?;
                enc.write_image::<colortype::Gray8>(w, h, &data)
            }
            Encoding::Tiff16 => {
                let data = quantize::<u16>(img, encoding, path)?;
                enc.write_image::<colortype::Gray16>(w, h, &data)
            }
            Encoding::TiffF32 => enc.write_image::<colortype::Gray32Float>(w, h, img.values()),
            other => return Err(Error::param(format!("{other:?} is not a TIFF encoding"))),
        };
        res.map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(())
}

trait Quantum: Copy {
    fn from_f32(v: f32) -> Self;
}

impl Quantum for u8 {
    fn from_f32(v: f32) -> Self {
        v as u8
    }
}

impl Quantum for u16 {
    fn from_f32(v: f32) -> Self {
        v as u16
    }
}

/// Rounds to the nearest integer; values outside the encoding's range are an
/// error rather than silently clipped.
fn quantize<T: Quantum>(img: &ImageTensor, encoding: Encoding, path: &Path) -> Result<Vec<T>> {
    let (lo, hi) = encoding.integer_range().expect("integer encoding");
    let (min, max) = (img.min(), img.max());
    if min.round() < lo || max.round() > hi {
        return Err(Error::format(
            path,
            format!("values span [{min}, {max}], outside the {encoding:?} range [{lo}, {hi}]"),
        ));
    }
    Ok(img
        .values()
        .iter()
        .map(|&v| T::from_f32(v.round()))
        .collect())
}

fn load_png(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            let values = buf.into_raw().into_iter().map(f32::from).collect();
            Ok(ImageTensor::new(h, w, values)?.with_source_range(Some((0.0, 255.0))))
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let values = buf.into_raw().into_iter().map(f32::from).collect();
            Ok(ImageTensor::new(h, w, values)?.with_source_range(Some((0.0, 65535.0))))
        }
        other => Err(Error::format(
            path,
            format!("only grayscale PNG is supported, found {:?}", other.color()),
        )),
    }
}

fn load_tiff_stack(path: &Path, limit: Option<usize>) -> Result<Vec<ImageTensor>> {
    use tiff::decoder::{Decoder, DecodingResult};

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: tiff::TiffError| Error::format(path, e.to_string());
    let mut dec = Decoder::new(BufReader::new(file)).map_err(fmt)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(fmt)?;
        match dec.colortype().map_err(fmt)? {
            tiff::ColorType::Gray(_) => {}
            other => {
                return Err(Error::format(
                    path,
                    format!("only grayscale TIFF is supported, found {other:?}"),
                ))
            }
        }
        let (values, range): (Vec<f32>, _) = match dec.read_image().map_err(fmt)? {
            DecodingResult::U8(v) => (v.into_iter().map(f32::from).collect(), Some((0.0, 255.0))),
            DecodingResult::U16(v) => {
                (v.into_iter().map(f32::from).collect(), Some((0.0, 65535.0)))
            }
            DecodingResult::F32(v) => (v, None),
            DecodingResult::F64(v) => (v.into_iter().map(|x| x as f32).collect(), None),
            _ => return Err(Error::format(path, "unsupported TIFF sample type")),
        };
        pages.push(ImageTensor::new(h as usize, w as usize, values)?.with_source_range(range));
        if limit.is_some_and(|n| pages.len() >= n) || !dec.more_images() {
            break;
        }
        dec.next_image().map_err(fmt)?;
    }
    Ok(pages)
}

fn load_raw(path: &Path) -> Result<ImageTensor> {
    let hdr_path = raw_header_path(path);
    let text = std::fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header: RawHeader =
        toml::from_str(&text).map_err(|e| Error::format(&hdr_path, e.to_string()))?;
    if header.format != RAW_FORMAT || header.dtype != "float32-le" {
        return Err(Error::format(
            &hdr_path,
            format!("unsupported raw header {}/{}", header.format, header.dtype),
        ));
    }
    if header.version > RAW_VERSION {
        return Err(Error::format(
            &hdr_path,
            format!("unknown version {}", header.version),
        ));
    }
    let [h, w] = header.shape;
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(Error::format(
            path,
            format!("{} bytes, expected {} for {h}x{w}", bytes.len(), h * w * 4),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ImageTensor::new(h, w, values)
}

fn save_raw(img: &ImageTensor, path: &Path) -> Result<()> {
    let header = RawHeader {
        format: RAW_FORMAT.into(),
        version: RAW_VERSION,
        dtype: "float32-le".into(),
        shape: [img.height(), img.width()],
    };
    let hdr_path = raw_header_path(path);
    std::fs::write(
        &hdr_path,
        toml::to_string(&header).expect("header serializes"),
    )
    .map_err(|e| Error::io(&hdr_path, e))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for v in img.values() {
        out.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Supported image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_supported_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}
