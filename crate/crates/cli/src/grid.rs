//! PNG grid emission and PNG loading.

use std::path::Path;

use hyperdomain::generator::{to_unit_range, Image};
use hyperdomain::{Error, Result};
use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};

fn to_byte(v: f64) -> u8 {
    (to_unit_range(v) * 255.0).round() as u8
}

/// Tiles equally sized 3-channel images row-major into a `rows × cols` grid;
/// unused cells stay black.
pub fn grid(images: &[Image], cols: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::Input("no images to tile".into()))?;
    let (c, h, w) = first.dim();
    if c != 3 || images.iter().any(|i| i.dim() != (c, h, w)) {
        return Err(Error::Input("grid images must share one 3-channel shape".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out: RgbImage = ImageBuffer::new((cols * w) as u32, (rows * h) as u32);
    for (n, img) in images.iter().enumerate() {
        let (ox, oy) = ((n % cols) * w, (n / cols) * h);
        for y in 0..h {
            for x in 0..w {
                let px = Rgb([
                    to_byte(img[[0, y, x]]),
                    to_byte(img[[1, y, x]]),
                    to_byte(img[[2, y, x]]),
                ]);
                out.put_pixel((ox + x) as u32, (oy + y) as u32, px);
            }
        }
    }
    Ok(out)
}

pub fn save_grid(images: &[Image], cols: usize, path: &Path) -> Result<()> {
    grid(images, cols)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Loads an image, resizes it to `res × res` and maps bytes to [-1, 1].
pub fn load_image(path: &Path, res: usize) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.dimensions() == (res as u32, res as u32) {
        img
    } else {
        image::imageops::resize(&img, res as u32, res as u32, FilterType::Triangle)
    };
    Ok(Image::from_shape_fn((3, res, res), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0 * 2.0 - 1.0
    }))
}
