//! Binary PPM (P6) heatmaps of attention weight blocks. PPM needs no image
//! dependency and opens in any viewer.

use mvaformer_core::nn::AttentionRecord;
use mvaformer_core::{Elem, Error, Result};

/// Renders a grayscale P6 image. `pixels` holds row-major intensities in
/// [0, 1]; each becomes one 8-bit gray triple.
pub fn write_gray_p6(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Contract(format!(
            "expected {}x{} = {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &p in pixels {
        let v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
        out.extend_from_slice(&[v, v, v]);
    }
    Ok(out)
}

/// Heatmap of one record's weight block for the queries of `query_view`:
/// `t` rows (that view's query tokens) by `views*t` columns (all keys),
/// scaled so the block's maximum weight is white. Masked positions carry
/// exactly zero weight and render black.
pub fn attention_heatmap<T: Elem>(rec: &AttentionRecord<T>, query_view: usize) -> Result<Vec<u8>> {
    if query_view >= rec.views {
        return Err(Error::Contract(format!(
            "query view {query_view} outside {} views",
            rec.views
        )));
    }
    let t = rec.tokens_per_view;
    let n = rec.views * t;
    let data = rec.weights.data();
    let mut block = Vec::with_capacity(t * n);
    for q in query_view * t..(query_view + 1) * t {
        for k in 0..n {
            block.push(Elem::to_f64(data[q * n + k]));
        }
    }
    let max = block.iter().cloned().fold(0.0_f64, f64::max);
    if max > 0.0 {
        for v in &mut block {
            *v /= max;
        }
    }
    write_gray_p6(n, t, &block)
}

/// Parses a P6 image back into (width, height, gray intensities in [0,1]).
/// Only the subset this crate writes; used by tests to round-trip heatmaps.
pub fn read_gray_p6(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |msg: &str| Error::Format(format!("ppm: {msg}"));
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-utf8 header"))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P6") {
        return Err(bad("not a P6 file"));
    }
    let width: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing width"))?;
    let height: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing height"))?;
    if fields.next() != Some("255") {
        return Err(bad("expected maxval 255"));
    }
    let body = &bytes[header_end + 1..];
    if body.len() != width * height * 3 {
        return Err(bad("body length mismatch"));
    }
    let pixels = body
        .chunks_exact(3)
        .map(|px| {
            if px[0] != px[1] || px[1] != px[2] {
                return Err(bad("not grayscale"));
            }
            Ok(px[0] as f64 / 255.0)
        })
        .collect::<Result<_>>()?;
    Ok((width, height, pixels))
}
