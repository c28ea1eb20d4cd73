//! Binary netpbm: `P5` graymaps and `P6` pixmaps with `maxval <= 255`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::Data(format!(
                "label map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Gray,
    Rgb,
}

impl Kind {
    fn channels(self) -> usize {
        match self {
            Kind::Gray => 1,
            Kind::Rgb => 3,
        }
    }
}

/// A decoded file: header fields plus the raw sample bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Netpbm {
    pub kind: Kind,
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub payload: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Cursor<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let v = text.parse::<usize>().map_err(|_| self.err(start, format!("{what} {text} too large")))?;
        Ok((v, start))
    }
}

/// Parses a binary netpbm file. `path` only labels error messages.
pub fn decode(bytes: &[u8], path: &str) -> Result<Netpbm> {
    let mut cur = Cursor { bytes, pos: 0, path };
    let kind = match bytes.get(..2) {
        Some(b"P5") => Kind::Gray,
        Some(b"P6") => Kind::Rgb,
        Some(m) => {
            return Err(cur.err(0, format!("unsupported format {:?}", String::from_utf8_lossy(m))));
        }
        None => return Err(cur.err(0, "file too short for a magic number")),
    };
    cur.pos = 2;
    let (width, wpos) = cur.number("width")?;
    let (height, hpos) = cur.number("height")?;
    let (maxval, mpos) = cur.number("maxval")?;
    if width == 0 {
        return Err(cur.err(wpos, "zero width"));
    }
    if height == 0 {
        return Err(cur.err(hpos, "zero height"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(cur.err(mpos, format!("maxval {maxval} outside 1..=255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(cur.err(cur.pos, "missing whitespace after maxval")),
    }
    let need = width * height * kind.channels();
    let have = bytes.len() - cur.pos;
    if have < need {
        return Err(cur.err(bytes.len(), format!("truncated payload: expected {need} bytes, found {have}")));
    }
    let payload = bytes[cur.pos..cur.pos + need].to_vec();
    if let Some(i) = payload.iter().position(|&b| b as usize > maxval) {
        return Err(cur.err(cur.pos + i, format!("sample {} exceeds maxval {maxval}", payload[i])));
    }
    Ok(Netpbm {
        kind,
        width,
        height,
        maxval: maxval as u8,
        payload,
    })
}

pub fn encode(img: &Netpbm) -> Vec<u8> {
    let magic = match img.kind {
        Kind::Gray => "P5",
        Kind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    out.extend_from_slice(&img.payload);
    out
}

pub fn read(path: &Path) -> Result<Netpbm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn write(path: &Path, img: &Netpbm) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

/// `[H, W, 3]` floats in `[0, 1]`: each sample divided by `maxval`. Graymaps
/// are replicated into three channels.
pub fn to_image(img: &Netpbm) -> Tensor<f32> {
    let max = img.maxval as f32;
    let data = match img.kind {
        Kind::Rgb => img.payload.iter().map(|&b| b as f32 / max).collect(),
        Kind::Gray => img.payload.iter().flat_map(|&b| [b as f32 / max; 3]).collect(),
    };
    Tensor::new(vec![img.height, img.width, 3], data).expect("payload length checked")
}

/// Quantizes an `[H, W, 3]` image in `[0, 1]` to an 8-bit pixmap.
pub fn from_image(image: &Tensor<f32>) -> Result<Netpbm> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Data(format!("expected an [H, W, 3] image, got {s:?}")));
    }
    Ok(Netpbm {
        kind: Kind::Rgb,
        width: s[1],
        height: s[0],
        maxval: 255,
        payload: image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    })
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(to_image(&read(path)?))
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write(path, &from_image(image)?)
}

/// Raw bytes of a graymap as class ids.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = read(path)?;
    if img.kind != Kind::Gray {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 0,
            msg: "label maps must be P5 graymaps".into(),
        });
    }
    LabelMap::new(img.height, img.width, img.payload.iter().map(|&b| b as u32).collect())
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let payload = labels
        .data
        .iter()
        .enumerate()
        .map(|(i, &l)| u8::try_from(l).map_err(|_| Error::Data(format!("label {l} at pixel {i} does not fit in a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    write(
        path,
        &Netpbm {
            kind: Kind::Gray,
            width: labels.width,
            height: labels.height,
            maxval: 255,
            payload,
        },
    )
}
