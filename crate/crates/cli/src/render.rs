//! PNG label masks and colour overlays.

use std::path::Path;

use anyhow::{bail, Context, Result};
use diffseg::LabelMap;
use image::{imageops::FilterType, GrayImage, Luma, Rgb, RgbImage};

/// Golden-ratio hue stepping; consecutive labels land far apart on the colour wheel.
pub fn palette() -> [[u8; 3]; 256] {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    let mut colors = [[0u8; 3]; 256];
    for (i, c) in colors.iter_mut().enumerate() {
        let hue = (i as f64 * GOLDEN).fract();
        *c = hsv_to_rgb(hue, 0.65, 0.95);
    }
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let sector = h * 6.0;
    let i = sector.floor() as i32 % 6;
    let f = sector - sector.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let to_u8 = |x: f64| (x * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_u8(r), to_u8(g), to_u8(b)]
}

/// Write labels as an 8-bit single-channel PNG (pixel value = label id).
pub fn write_mask(labels: &LabelMap, path: &Path) -> Result<()> {
    if let Some(&too_big) = labels.data.iter().find(|&&l| l > 255) {
        bail!("label {too_big} does not fit in an 8-bit mask");
    }
    let img = GrayImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        Luma([labels.get(y as usize, x as usize) as u8])
    });
    img.save(path)
        .with_context(|| format!("writing mask {}", path.display()))
}

/// Read a single-channel label PNG. Colour PNGs are rejected, not converted.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => bail!(
            "{}: expected an 8-bit single-channel label PNG, found {:?}",
            path.display(),
            other.color()
        ),
    };
    let (w, h) = gray.dimensions();
    Ok(LabelMap::new(
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(u32::from).collect(),
    )?)
}

/// Blend the palette colour of each label over `image`, resized to the mask.
pub fn overlay(image_path: &Path, labels: &LabelMap, alpha: f32, out: &Path) -> Result<()> {
    let base = image::open(image_path)
        .with_context(|| format!("reading {}", image_path.display()))?
        .to_rgb8();
    let (w, h) = (labels.width as u32, labels.height as u32);
    let base = if base.dimensions() == (w, h) {
        base
    } else {
        image::imageops::resize(&base, w, h, FilterType::Triangle)
    };
    let colors = palette();
    let blended = RgbImage::from_fn(w, h, |x, y| {
        let src = base.get_pixel(x, y).0;
        let tint = colors[(labels.get(y as usize, x as usize) & 0xff) as usize];
        let mut px = [0u8; 3];
        for c in 0..3 {
            let v = (1.0 - alpha) * src[c] as f32 + alpha * tint[c] as f32;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    });
    blended
        .save(out)
        .with_context(|| format!("writing overlay {}", out.display()))
}
