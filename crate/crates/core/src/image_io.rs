//! 8-bit grayscale PGM input and output, and PSNR.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};

use crate::analysis::Image;
use crate::error::{Error, Result};

/// Reads a square 8-bit PGM (`P2` or `P5`) into an image with samples in
/// `[0, 255]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e.to_string()))?;
    decode_pgm_bytes(&bytes).map_err(|e| match e {
        Error::UnsupportedInput(msg) => Error::UnsupportedInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Decodes a PGM from memory.
pub fn decode_pgm_bytes(bytes: &[u8]) -> Result<Image> {
    if !(bytes.starts_with(b"P5") || bytes.starts_with(b"P2")) {
        return Err(Error::UnsupportedInput("not a grayscale PGM".into()));
    }
    let decoder = PnmDecoder::new(bytes).map_err(|e| Error::UnsupportedInput(e.to_string()))?;
    let img = DynamicImage::from_decoder(decoder).map_err(|e| Error::UnsupportedInput(e.to_string()))?;
    if img.color() != ColorType::L8 {
        return Err(Error::UnsupportedInput(format!("expected 8-bit grayscale, found {:?}", img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::UnsupportedInput(format!("image is {w}x{h}, only square images are supported")));
    }
    let data = img.into_luma8().into_raw().into_iter().map(f64::from).collect();
    Image::new(w, data)
}

/// Rounds and clamps samples to 8 bits.
pub fn quantize(img: &Image) -> Vec<u8> {
    img.as_slice().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
}

/// Writes a binary (`P5`) PGM after [`quantize`].
pub fn write_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::storage(path, e.to_string()))?;
    let mut w = BufWriter::new(file);
    encode_pgm(&mut w, img).map_err(|e| Error::storage(path, e.to_string()))?;
    w.flush().map_err(|e| Error::storage(path, e.to_string()))
}

fn encode_pgm(w: &mut impl Write, img: &Image) -> image::ImageResult<()> {
    let side = img.side() as u32;
    PnmEncoder::new(w)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&quantize(img), side, side, ExtendedColorType::L8)
}

/// Encodes an image as binary PGM bytes.
pub fn encode_pgm_bytes(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_pgm(&mut out, img).map_err(|e| Error::Consistency(e.to_string()))?;
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for peak value `max`. Identical inputs
/// give `+inf`.
pub fn psnr(a: &[f64], b: &[f64], max: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("cannot compare {} samples with {}", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max * max / mse).log10())
}

/// PSNR of two images against an 8-bit peak of 255.
pub fn psnr_8bit(a: &Image, b: &Image) -> Result<f64> {
    if a.side() != b.side() {
        return Err(Error::invalid(format!("image sides differ: {} and {}", a.side(), b.side())));
    }
    psnr(a.as_slice(), b.as_slice(), 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_give_infinity() {
        let img = Image::from_fn(4, |x, y| (x * 4 + y) as f64);
        assert_eq!(psnr_8bit(&img, &img).unwrap(), f64::INFINITY);
    }

    #[test]
    fn black_against_white_is_zero_db() {
        let black = Image::zeros(3);
        let white = Image::from_fn(3, |_, _| 255.0);
        assert_eq!(psnr_8bit(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn psnr_matches_scalar_formula() {
        let a = [10.0, 20.0, 30.0, 40.0];
        let b = [11.0, 18.0, 30.0, 43.0];
        let mse = (1.0 + 4.0 + 0.0 + 9.0) / 4.0;
        let want = 10.0 * (255.0f64 * 255.0 / mse).log10();
        assert!((psnr(&a, &b, 255.0).unwrap() - want).abs() < 1e-12);
        assert!(psnr(&a, &b[..3], 255.0).is_err());
    }

    #[test]
    fn pgm_round_trip_is_binary_and_row_major() {
        let img = Image::from_fn(5, |x, y| (x * 50 + y) as f64);
        let bytes = encode_pgm_bytes(&img).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 25..bytes.len() - 20], &[0, 1, 2, 3, 4]);
        assert_eq!(decode_pgm_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        let img = Image::new(2, vec![-3.0, 12.5, 254.6, 999.0]).unwrap();
        assert_eq!(quantize(&img), vec![0, 13, 255, 255]);
    }

    #[test]
    fn rejects_non_square_and_wide_samples() {
        assert!(matches!(decode_pgm_bytes(b"P5 3 2 255\n\0\0\0\0\0\0"), Err(Error::UnsupportedInput(_))));
        assert!(matches!(decode_pgm_bytes(b"P5 1 1 65535\n\0\0"), Err(Error::UnsupportedInput(_))));
        assert!(matches!(decode_pgm_bytes(b"P6 1 1 255\n\0\0\0"), Err(Error::UnsupportedInput(_))));
    }

    #[test]
    fn reads_ascii_pgm() {
        let img = decode_pgm_bytes(b"P2\n2 2\n255\n0 1\n2 255\n").unwrap();
        assert_eq!(img.as_slice(), &[0.0, 1.0, 2.0, 255.0]);
    }
}
