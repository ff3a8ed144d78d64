//! Binary PPM (P6, 8-bit) image I/O.
//!
//! Pixels map to [-1, 1] in memory: byte p -> 2p/255 - 1. Saving
//! quantizes back to bytes, so save/load round trips are bit-exact at
//! the byte level.

use std::io::{Read, Write};
use std::path::Path;

use latentsr_tensor::Tensor;

use crate::{Error, Result};

pub fn byte_to_value(p: u8) -> f32 {
    2.0 * p as f32 / 255.0 - 1.0
}

pub fn value_to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 255.0 / 2.0).round()) as u8
}

/// Write a `[3,H,W]` tensor in [-1,1] as binary PPM.
pub fn save_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Data(format!("save_ppm expects [3,H,W], got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Data(format!("save_ppm expects 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(32 + 3 * h * w);
    buf.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let plane = h * w;
    let data = img.data();
    for p in 0..plane {
        for ch in 0..3 {
            buf.push(value_to_byte(data[ch * plane + p]));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a binary PPM into a `[3,H,W]` tensor in [-1,1].
pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    let mut pos = 0;
    let mut next_token = |bytes: &[u8]| -> std::result::Result<String, String> {
        // Skip whitespace and `#` comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(bytes)?;
    if magic != "P6" {
        return Err(format!("not a P6 ppm (magic {magic:?})"));
    }
    let w: usize = next_token(bytes)?.parse().map_err(|_| "bad width")?;
    let h: usize = next_token(bytes)?.parse().map_err(|_| "bad height")?;
    let maxval: usize = next_token(bytes)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("only maxval 255 supported, got {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let plane = h * w;
    if bytes.len() < pos + 3 * plane {
        return Err("truncated pixel data".into());
    }
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = byte_to_value(bytes[pos + 3 * p + ch]);
        }
    }
    Tensor::from_vec(data, &[3, h, w]).map_err(|e| e.to_string())
}
