//! Binary greyscale PGM (`P5`, maxval 255) export and import.

use std::fs;
use std::path::Path;

use crate::dataset::to_u8;
use crate::error::{Error, Result};
use crate::evaluation::DistortionField;
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::saliency::SaliencyMap;

/// Something that can be drawn as an H×W grid of `[0, 1]` values.
pub trait GrayMap {
    fn dims(&self) -> (usize, usize);
    fn gray_values(&self) -> Vec<f64>;
}

impl GrayMap for SaliencyMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn gray_values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

impl GrayMap for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn gray_values(&self) -> Vec<f64> {
        self.to_values()
    }
}

impl GrayMap for DistortionField {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn gray_values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

/// Channel 0 of the image.
impl GrayMap for Image {
    fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }
    fn gray_values(&self) -> Vec<f64> {
        self.channel_plane(0)
    }
}

/// A bare grid.
pub struct Grid<'a> {
    pub height: usize,
    pub width: usize,
    pub values: &'a [f64],
}

impl GrayMap for Grid<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    fn gray_values(&self) -> Vec<f64> {
        self.values.to_vec()
    }
}

/// Encodes values (clamped to `[0, 1]`, rounded half up) as P5 bytes.
/// Without a comment the header is the single line `P5 W H 255`.
pub fn encode_pgm(map: &dyn GrayMap, comment: Option<&str>) -> Vec<u8> {
    let (h, w) = map.dims();
    let mut out = match comment {
        None => format!("P5 {w} {h} 255\n").into_bytes(),
        Some(c) => {
            let mut s = String::from("P5\n");
            for line in c.lines() {
                s.push_str("# ");
                s.push_str(line);
                s.push('\n');
            }
            s.push_str(&format!("{w} {h} 255\n"));
            s.into_bytes()
        }
    };
    out.extend(map.gray_values().iter().map(|v| to_u8(*v)));
    out
}

pub fn save_map_pgm(map: &dyn GrayMap, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map, comment)).map_err(|e| Error::io(path, e))
}

/// A decoded PGM with values scaled back to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub comments: Vec<String>,
}

pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    let mut comments = Vec::new();
    while tokens.len() < 4 {
        match bytes.get(pos) {
            None => return Err("truncated header".into()),
            Some(b'#') => {
                let end = bytes[pos..].iter().position(|b| *b == b'\n').map_or(bytes.len(), |e| pos + e);
                comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
                pos = end;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                    pos += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
            }
        }
    }
    if tokens[0] != "P5" {
        return Err(format!("unsupported magic {:?}", tokens[0]));
    }
    let num = |t: &str| t.parse::<usize>().map_err(|_| format!("bad header field {t:?}"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data = bytes.get(pos + 1..).ok_or("missing raster")?;
    if data.len() < w * h {
        return Err(format!("raster holds {} bytes, {}x{} needs {}", data.len(), w, h, w * h));
    }
    Ok(Pgm {
        height: h,
        width: w,
        values: data[..w * h].iter().map(|b| *b as f64 / maxval as f64).collect(),
        comments,
    })
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|m| Error::format(path, m))
}
