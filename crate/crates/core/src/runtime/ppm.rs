//! P6 portable-pixmap I/O (8-bit, maxval 255) and the qualitative overlay
//! renderer: drivable area tinted green, lanes tinted red, detections as
//! 2-px rectangles in class-indexed colors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::decode::Detection;
use crate::tensor::Tensor;
use crate::training::synth::class_color;

const TINT: f32 = 0.30;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims();
    if n != 1 || c != 3 {
        return Err(Error::InvalidInput(format!(
            "P6 encoding needs a (1, 3, h, w) image, got {:?}",
            image.dims()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push(to_byte(image.at(0, ch, i, j)));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    crate::runtime::atomic_write(path, &encode_ppm(image)?)
}

fn skip_ws_and_comments(b: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < b.len() && b[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < b.len() && b[pos] == b'#' {
            while pos < b.len() && b[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn parse_int(b: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let pos = skip_ws_and_comments(b, pos);
    let start = pos;
    let mut end = pos;
    while end < b.len() && b[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(Error::Format(format!("P6 header: missing {what}")));
    }
    let v: usize = std::str::from_utf8(&b[start..end])
        .unwrap()
        .parse()
        .map_err(|_| Error::Format(format!("P6 header: bad {what}")))?;
    Ok((v, end))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a P6 pixmap".into()));
    }
    let (w, pos) = parse_int(bytes, 2, "width")?;
    let (h, pos) = parse_int(bytes, pos, "height")?;
    let (maxval, pos) = parse_int(bytes, pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-sized image".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = pos + 1;
    let need = 3 * w * h;
    if bytes.len() < data_start + need {
        return Err(Error::Format(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(data_start)
        )));
    }
    let raster = &bytes[data_start..data_start + need];
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, i, j| {
        raster[3 * (i * w + j) + c] as f32 / 255.0
    }))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

/// Pure overlay compositor; `render_overlay` writes its P6 encoding.
pub fn compose_overlay(
    image: &Tensor<f32>,
    detections: &[Detection],
    drivable_mask: &Tensor<f32>,
    lane_mask: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let [_, _, h, w] = image.dims();
    for m in [drivable_mask, lane_mask] {
        if m.h() != h || m.w() != w {
            return Err(Error::InvalidInput(format!(
                "mask {:?} does not match image {:?}",
                m.dims(),
                image.dims()
            )));
        }
    }
    let mut out = image.clone();
    for i in 0..h {
        for j in 0..w {
            if drivable_mask.at(0, 0, i, j) == 1.0 {
                let v = (out.at(0, 1, i, j) + TINT).min(1.0);
                out.set(0, 1, i, j, v);
            }
            if lane_mask.at(0, 0, i, j) == 1.0 {
                let v = (out.at(0, 0, i, j) + TINT).min(1.0);
                out.set(0, 0, i, j, v);
            }
        }
    }
    for d in detections {
        let col = class_color(d.class_id);
        let [cx, cy, bw, bh] = d.bbox;
        let x0 = ((cx - bw / 2.0).round().max(0.0) as usize).min(w - 1);
        let x1 = ((cx + bw / 2.0).round().max(0.0) as usize).min(w - 1);
        let y0 = ((cy - bh / 2.0).round().max(0.0) as usize).min(h - 1);
        let y1 = ((cy + bh / 2.0).round().max(0.0) as usize).min(h - 1);
        // 2-px-thick rectangle perimeter
        for t in 0..2usize {
            for j in x0..=x1 {
                for i in [y0.saturating_add(t).min(h - 1), y1.saturating_sub(t)] {
                    for c in 0..3 {
                        out.set(0, c, i, j, col[c]);
                    }
                }
            }
            for i in y0..=y1 {
                for j in [x0.saturating_add(t).min(w - 1), x1.saturating_sub(t)] {
                    for c in 0..3 {
                        out.set(0, c, i, j, col[c]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn render_overlay(
    image: &Tensor<f32>,
    detections: &[Detection],
    drivable_mask: &Tensor<f32>,
    lane_mask: &Tensor<f32>,
    out_path: &Path,
) -> Result<()> {
    let composed = compose_overlay(image, detections, drivable_mask, lane_mask)?;
    write_ppm(out_path, &composed)
}
