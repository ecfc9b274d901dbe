use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{dim_err, Result};
use crate::sparsifier::TokenMask;

/// Binary P6 encoding of packed RGB rows.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return dim_err(format!("{} bytes do not form a {width}x{height} RGB image", rgb.len()));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Original image (left) beside a copy with pruned patches blacked out
/// (right). Input is planar `[C, S, S]` (1 or 3 channels); every pixel is
/// repeated `scale` times in both directions.
pub fn render_mask(
    image: &[u8],
    channels: usize,
    size: usize,
    patch: usize,
    mask: &TokenMask,
    scale: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if image.len() != channels * size * size || !(channels == 1 || channels == 3) {
        return dim_err(format!("{} bytes are not a {channels}x{size}x{size} image", image.len()));
    }
    if patch == 0 || !size.is_multiple_of(patch) || mask.len() != (size / patch).pow(2) + 1 {
        return dim_err(format!(
            "mask over {} positions does not match a {size}px image with {patch}px patches",
            mask.len()
        ));
    }
    let scale = scale.max(1);
    let grid = size / patch;
    let (w, h) = (2 * size * scale, size * scale);
    let mut rgb = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = ((x / scale) % size, y / scale);
            let right = x >= size * scale;
            let kept = !right || mask.bits()[1 + (sy / patch) * grid + sx / patch];
            for c in 0..3 {
                let plane = if channels == 1 { 0 } else { c };
                let v = image[(plane * size + sy) * size + sx];
                rgb[(y * w + x) * 3 + c] = if kept { v } else { 0 };
            }
        }
    }
    Ok((w, h, rgb))
}

/// Writes the side-by-side PPM and a `.txt` sidecar holding the kept
/// density. Returns the sidecar path.
pub fn visualize_mask(
    image: &[u8],
    channels: usize,
    size: usize,
    patch: usize,
    mask: &TokenMask,
    scale: usize,
    out_path: &Path,
) -> Result<PathBuf> {
    let (w, h, rgb) = render_mask(image, channels, size, patch, mask, scale)?;
    fs::write(out_path, encode_ppm(w, h, &rgb)?)?;
    let sidecar = out_path.with_extension("txt");
    fs::write(&sidecar, format!("density {:.6}\nkept {} of {} tokens\n", mask.density(), mask.kept(), mask.len()))?;
    Ok(sidecar)
}
