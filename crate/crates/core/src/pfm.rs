//! Portable Float Map reader/writer (grayscale "Pf"). The scale field's
//! sign encodes endianness (negative = little-endian); rows are stored
//! bottom-to-top.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub fn write_pfm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let [h, w] = map.shape() else {
        return Err(Error::ShapeMismatch("write_pfm expects a [H,W] tensor".into()));
    };
    let (h, w) = (*h, *w);
    let mut buf = Vec::with_capacity(32 + h * w * 4);
    buf.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", w, h).as_bytes());
    for row in (0..h).rev() {
        for col in 0..w {
            buf.extend_from_slice(&map.at2(row, col).to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let pathstr = path.display().to_string();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(&pathstr, e))?;
    let mut pos = 0;
    let magic = token(&buf, &mut pos, &pathstr, "magic")?;
    if magic != "Pf" {
        return Err(Error::format(&pathstr, format!("expected Pf header, got `{magic}`")));
    }
    let w: usize = token(&buf, &mut pos, &pathstr, "width")?
        .parse()
        .map_err(|_| Error::format(&pathstr, "bad width"))?;
    let h: usize = token(&buf, &mut pos, &pathstr, "height")?
        .parse()
        .map_err(|_| Error::format(&pathstr, "bad height"))?;
    let scale: f32 = token(&buf, &mut pos, &pathstr, "scale")?
        .parse()
        .map_err(|_| Error::format(&pathstr, "bad scale"))?;
    if scale == 0.0 {
        return Err(Error::format(&pathstr, "scale must be nonzero"));
    }
    let little_endian = scale < 0.0;
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = h * w * 4;
    if buf.len() < pos + need {
        return Err(Error::format(&pathstr, "truncated payload"));
    }
    let payload = &buf[pos..pos + need];
    let mut data = vec![0.0f32; h * w];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        };
        let row = h - 1 - i / w;
        let col = i % w;
        data[row * w + col] = v;
    }
    let mag = scale.abs();
    if (mag - 1.0).abs() > 1e-9 {
        for v in &mut data {
            *v *= mag;
        }
    }
    Tensor::new(vec![h, w], data)
}

fn token(buf: &[u8], pos: &mut usize, path: &str, what: &str) -> Result<String> {
    while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, format!("missing {what}")));
    }
    std::str::from_utf8(&buf[start..*pos])
        .map(str::to_string)
        .map_err(|_| Error::format(path, format!("non-ASCII {what}")))
}
