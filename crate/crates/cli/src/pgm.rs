//! Binary portable graymap (P5) output.

use std::path::Path;

/// Map a `[0, 1]` intensity to a byte, clamping out-of-range values.
pub fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lay `frames` (each `h·w`, row-major) out on a grid with `cols` columns
/// and a one-pixel mid-grey gutter.
pub fn grid(frames: &[Vec<f64>], h: usize, w: usize, cols: usize) -> (Vec<u8>, usize, usize) {
    let cols = cols.max(1);
    let rows = frames.len().div_ceil(cols).max(1);
    let gw = cols * w + cols - 1;
    let gh = rows * h + rows - 1;
    let mut img = vec![128u8; gw * gh];
    for (k, f) in frames.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                img[(r0 + i) * gw + c0 + j] = to_byte(f[i * w + j]);
            }
        }
    }
    (img, gh, gw)
}

pub fn write(path: &Path, pixels: &[u8], h: usize, w: usize) -> std::io::Result<()> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out)
}

pub fn write_frame(path: &Path, frame: &[f64], h: usize, w: usize) -> std::io::Result<()> {
    let px: Vec<u8> = frame.iter().map(|&v| to_byte(v)).collect();
    write(path, &px, h, w)
}
