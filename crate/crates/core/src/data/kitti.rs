//! 16-bit PNG disparity maps in the KITTI devkit convention:
//! disparity = stored / 256.0, stored 0 marks an invalid pixel.

use crate::error::{Error, Result};
use image::{DynamicImage, ImageBuffer, Luma};
use std::path::Path;

/// Returns (disparity, validity mask), both row-major HxW.
pub fn read_kitti_png(path: &Path) -> Result<(Vec<f32>, Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let gray = match img {
        DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::format(
                path,
                format!(
                    "expected 16-bit single-channel PNG, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut disp = vec![0.0f32; w * h];
    let mut mask = vec![0.0f32; w * h];
    for (i, px) in gray.pixels().enumerate() {
        let stored = px.0[0];
        if stored > 0 {
            disp[i] = stored as f32 / 256.0;
            mask[i] = 1.0;
        }
    }
    Ok((disp, mask, h, w))
}

/// Rounds to the nearest 1/256; non-positive disparities are stored as
/// invalid (0).
pub fn write_kitti_png(path: &Path, disp: &[f32], height: usize, width: usize) -> Result<()> {
    if disp.len() != height * width {
        return Err(Error::Config(format!(
            "disparity payload of {} values does not match {height}x{width}",
            disp.len()
        )));
    }
    let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::new(width as u32, height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let d = disp[i];
        let stored = if d > 0.0 {
            ((d * 256.0).round() as u32).min(u16::MAX as u32) as u16
        } else {
            0
        };
        px.0[0] = stored;
    }
    buf.save(path).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn devkit_scaling_and_invalid_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        // Store 11712 and 0 directly.
        let mut buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(2, 1);
        buf.put_pixel(0, 0, Luma([11712u16]));
        buf.put_pixel(1, 0, Luma([0u16]));
        buf.save(&path).unwrap();
        let (disp, mask, h, w) = read_kitti_png(&path).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(disp[0], 45.75);
        assert_eq!(mask[0], 1.0);
        assert_eq!(mask[1], 0.0, "stored zero is invalid");
    }

    #[test]
    fn round_trip_error_within_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let disp: Vec<f32> = (0..64).map(|_| rng.random_range(0.01..230.0)).collect();
        write_kitti_png(&path, &disp, 8, 8).unwrap();
        let (back, mask, _, _) = read_kitti_png(&path).unwrap();
        for i in 0..64 {
            assert_eq!(mask[i], 1.0);
            assert!(
                (back[i] - disp[i]).abs() <= 1.0 / 512.0 + 1e-6,
                "error {} exceeds half a step",
                (back[i] - disp[i]).abs()
            );
        }
    }

    #[test]
    fn negative_disparity_becomes_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.png");
        write_kitti_png(&path, &[-3.0, 1.5], 1, 2).unwrap();
        let (_, mask, _, _) = read_kitti_png(&path).unwrap();
        assert_eq!(mask, vec![0.0, 1.0]);
    }

    #[test]
    fn eight_bit_png_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("8bit.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(2, 2);
        buf.save(&path).unwrap();
        let err = read_kitti_png(&path).unwrap_err();
        assert!(err.to_string().contains("16-bit"), "got: {err}");
    }
}
