//! 8-bit RGB image files (binary PPM or PNG).

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat as Codec, RgbImage};
use irtrack_core::image::Image;

use crate::config::ImageFormat;
use crate::error::{CliError, Result};

fn image_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Image { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_image(path: &Path, img: &Image, format: ImageFormat) -> Result<()> {
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, img.to_rgb8()).expect("buffer matches dimensions");
    match format {
        ImageFormat::Ppm => {
            let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
            let enc = PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
            enc.write_image(buf.as_raw(), buf.width(), buf.height(), ExtendedColorType::Rgb8).map_err(|e| image_error(path, e))
        }
        ImageFormat::Png => buf.save_with_format(path, Codec::Png).map_err(|e| image_error(path, e)),
    }
}

pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = image::open(path).map_err(|e| image_error(path, e))?.to_rgb8();
    Ok(Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())?)
}
