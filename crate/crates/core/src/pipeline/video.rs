//! Frame sequences on disk: a directory of binary PPM files, or one raw
//! planar RGB file with a text sidecar.
//!
//! Sidecar (`<name>.txt` next to `<name>.rgb`, or `video.txt` in a PPM
//! directory): `width=`, `height=`, `fps=`, `count=` lines.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::config::{parse_fps, KeyValues};
use crate::error::{Error, Result};
use crate::stitcher::FrameImage;

pub const SIDECAR: &str = "video.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: Vec<FrameImage>,
    pub fps: (u16, u16),
}

fn io(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl VideoSequence {
    pub fn new(frames: Vec<FrameImage>, fps: (u16, u16)) -> Result<Self> {
        if let Some(f) = frames.first() {
            let hw = (f.height(), f.width());
            if let Some(g) = frames.iter().find(|g| (g.height(), g.width()) != hw) {
                return Err(Error::Shape {
                    op: "video",
                    left: vec![hw.0, hw.1],
                    right: vec![g.height(), g.width()],
                });
            }
        }
        if fps.0 == 0 || fps.1 == 0 {
            return Err(Error::InvalidArgument("zero frame rate".into()));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps_f64(&self) -> f64 {
        self.fps.0 as f64 / self.fps.1 as f64
    }

    pub fn hw(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.height(), f.width()))
    }

    fn sidecar_text(&self) -> String {
        let (h, w) = self.hw().unwrap_or((0, 0));
        format!(
            "width={w}\nheight={h}\nfps={}/{}\ncount={}\n",
            self.fps.0,
            self.fps.1,
            self.len()
        )
    }

    /// Loads a PPM directory or a `.rgb` file.
    pub fn load(path: &Path, default_fps: (u16, u16)) -> Result<Self> {
        if path.is_dir() {
            Self::load_ppm_dir(path, default_fps)
        } else {
            Self::load_raw(path)
        }
    }

    pub fn load_ppm_dir(dir: &Path, default_fps: (u16, u16)) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        paths.sort();
        let side = dir.join(SIDECAR);
        let fps = if side.exists() {
            read_sidecar(&side)?.fps
        } else {
            default_fps
        };
        let frames = paths.iter().map(|p| read_ppm(p)).collect::<Result<Vec<_>>>()?;
        Self::new(frames, fps)
    }

    pub fn save_ppm_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, f) in self.frames.iter().enumerate() {
            write_ppm(&dir.join(format!("frame_{i:05}.ppm")), f)?;
        }
        fs::write(dir.join(SIDECAR), self.sidecar_text())?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let side = read_sidecar(&path.with_extension("txt"))?;
        let bytes = fs::read(path)?;
        let per = 3 * side.width * side.height;
        if per == 0 || bytes.len() != per * side.count {
            return Err(io(path, format!("expected {} bytes, found {}", per * side.count, bytes.len())));
        }
        let frames = bytes
            .chunks(per)
            .map(|c| FrameImage::new(side.height, side.width, c.iter().map(|&b| b as f32 / 255.0).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames, side.fps)
    }

    /// Writes `path` (planar RGB, one byte per sample) and its `.txt` sidecar.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.frames.iter().flat_map(|f| f.data().iter().map(|&v| to_u8(v))).collect();
        fs::write(path, bytes)?;
        fs::write(path.with_extension("txt"), self.sidecar_text())?;
        Ok(())
    }

    /// Values rounded to the 8-bit grid files store.
    pub fn quantized(&self) -> Self {
        let frames = self
            .frames
            .iter()
            .map(|f| {
                FrameImage::new(f.height(), f.width(), f.data().iter().map(|&v| to_u8(v) as f32 / 255.0).collect())
                    .expect("same geometry")
            })
            .collect();
        Self { frames, fps: self.fps }
    }
}

struct Sidecar {
    width: usize,
    height: usize,
    fps: (u16, u16),
    count: usize,
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let kv = KeyValues::parse(&text)?;
    kv.expect_keys(&["width", "height", "fps", "count"])?;
    let need = |k: &str| -> Result<usize> { kv.get(k)?.ok_or_else(|| io(path, format!("missing {k}"))) };
    Ok(Sidecar {
        width: need("width")?,
        height: need("height")?,
        fps: parse_fps(kv.raw("fps").unwrap_or("30"))?,
        count: need("count")?,
    })
}

pub fn read_ppm(path: &Path) -> Result<FrameImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| io(path, e))?
        .with_guessed_format()
        .map_err(|e| io(path, e))?
        .decode()
        .map_err(|e| io(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    FrameImage::new(h, w, data)
}

pub fn write_ppm(path: &Path, f: &FrameImage) -> Result<()> {
    let (h, w) = (f.height(), f.width());
    let d = f.data();
    let mut raw = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            raw[3 * i + c] = to_u8(d[c * h * w + i]);
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&raw, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| io(path, e))
}
