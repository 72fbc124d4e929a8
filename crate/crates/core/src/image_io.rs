//! Portable pixmap/graymap I/O and dataset manifests. RGB traffic is binary
//! P6 with maxval 255; single-plane outputs are P5 at 8 or 16 bits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

fn read_header_token(data: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("pixmap: truncated header"));
    }
    Ok(String::from_utf8_lossy(&data[start..*pos]).into_owned())
}

fn parse_dim(tok: &str) -> Result<usize> {
    tok.parse::<usize>()
        .map_err(|e| Error::format(format!("pixmap: bad header number '{tok}': {e}")))
}

/// Load a binary P6 pixmap with maxval 255 into a [3,H,W] tensor in [0,1].
pub fn load_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = read_header_token(&bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::format(format!("pixmap: expected P6, got '{magic}'")));
    }
    let w = parse_dim(&read_header_token(&bytes, &mut pos)?)?;
    let h = parse_dim(&read_header_token(&bytes, &mut pos)?)?;
    let maxval = parse_dim(&read_header_token(&bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::format(format!(
            "pixmap: unsupported maxval {maxval}, only 255"
        )));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::format(format!(
            "pixmap: payload truncated, need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut data = vec![T::ZERO; need];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = T::from_f64(bytes[pos + 3 * i + c] as f64 / 255.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Save a [3,H,W] tensor in [0,1] as binary P6, maxval 255.
pub fn save_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::dimension(format!("save_ppm expects [3,H,W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::dimension(format!("save_ppm expects 3 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let x = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let v = (x[ch * h * w + i].to_f64() * 255.0).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Save a [H,W] plane in [0,1] as binary P5 with the given bit depth.
pub fn save_pgm<T: Scalar>(path: &Path, plane: &Tensor<T>, sixteen_bit: bool) -> Result<()> {
    let (h, w) = plane.dims2()?;
    let maxval = if sixteen_bit { 65535u32 } else { 255 };
    let mut out = Vec::new();
    out.extend_from_slice(format!("P5\n{w} {h}\n{maxval}\n").as_bytes());
    for &v in plane.data() {
        let q = (v.to_f64() * maxval as f64).round().clamp(0.0, maxval as f64) as u32;
        if sixteen_bit {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Load a binary P5 graymap (8- or 16-bit) into a [H,W] tensor in [0,1].
pub fn load_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = read_header_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::format(format!("graymap: expected P5, got '{magic}'")));
    }
    let w = parse_dim(&read_header_token(&bytes, &mut pos)?)?;
    let h = parse_dim(&read_header_token(&bytes, &mut pos)?)?;
    let maxval = parse_dim(&read_header_token(&bytes, &mut pos)?)?;
    pos += 1;
    let sixteen = match maxval {
        255 => false,
        65535 => true,
        other => {
            return Err(Error::format(format!(
                "graymap: unsupported maxval {other}"
            )))
        }
    };
    let need = h * w * if sixteen { 2 } else { 1 };
    if bytes.len() < pos + need {
        return Err(Error::format("graymap: payload truncated"));
    }
    let data: Vec<T> = (0..h * w)
        .map(|i| {
            let raw = if sixteen {
                u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as f64
            } else {
                bytes[pos + i] as f64
            };
            T::from_f64(raw / maxval as f64)
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Dataset manifest: one relative path per line, '#' comments allowed.
pub fn load_manifest(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", manifest.display()),
        ))
    })?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            out.push(dir.join(line));
        }
    }
    if out.is_empty() {
        return Err(Error::format(format!(
            "manifest {} lists no images",
            manifest.display()
        )));
    }
    Ok(out)
}

pub fn write_manifest(dir: &Path, names: &[String]) -> Result<()> {
    let mut text = String::from("# dataset manifest: one relative path per line\n");
    for n in names {
        text.push_str(n);
        text.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}
