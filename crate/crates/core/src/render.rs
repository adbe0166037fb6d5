//! Binary PGM/PPM output for predicted masks, patch probabilities, and
//! boundary overlays.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn dims(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w, c] if c == channels => Ok((h, w)),
        _ => Err(Error::Invalid(format!("{what} must be H×W×{channels}, got {:?}", t.shape()))),
    }
}

/// `P5` grayscale image of an `[H × W × 1]` tensor with values in `[0, 1]`.
pub fn pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = dims(t, 1, "grayscale image")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// `P6` colour image of an `[H × W × 3]` tensor with values in `[0, 1]`.
pub fn ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = dims(t, 3, "colour image")?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Patch probabilities `[N_v × 1]` laid out on the patch grid and enlarged
/// by nearest-neighbour replication to `[gh·P × gw·P × 1]`.
pub fn upscale_patches(probs: &Tensor, gh: usize, gw: usize, p: usize) -> Result<Tensor> {
    if probs.shape() != [gh * gw, 1] {
        return Err(Error::shape("upscale_patches", probs.shape(), &[gh * gw, 1]));
    }
    let (h, w) = (gh * p, gw * p);
    let data = (0..h * w)
        .map(|i| probs.data()[(i / w / p) * gw + (i % w) / p])
        .collect();
    Tensor::new(&[h, w, 1], data)
}

/// Pixels of `mask` with a 4-neighbour outside the mask (or the canvas).
pub fn boundary(mask: &Tensor) -> Result<Vec<bool>> {
    let (h, w) = dims(mask, 1, "mask")?;
    let on = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask.data()[y as usize * w + x as usize] != 0.0
    };
    Ok((0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))
        })
        .collect())
}

/// The image with the mask boundary painted magenta.
pub fn overlay(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (h, w) = dims(image, 3, "image")?;
    if dims(mask, 1, "mask")? != (h, w) {
        return Err(Error::shape("overlay", image.shape(), mask.shape()));
    }
    let mut out = image.clone();
    for (i, edge) in boundary(mask)?.into_iter().enumerate() {
        if edge {
            out.data_mut()[i * 3..i * 3 + 3].copy_from_slice(&[1.0, 0.0, 1.0]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_and_sizes() {
        let t = Tensor::new(&[2, 3, 1], vec![0.0, 1.0, 0.5, 2.0, -1.0, 1.0]).unwrap();
        let bytes = pgm(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 255, 128, 255, 0, 255]);
        assert!(pgm(&Tensor::zeros(&[2, 2, 3])).is_err());
        let c = ppm(&Tensor::zeros(&[2, 2, 3])).unwrap();
        assert_eq!(c.len(), b"P6\n2 2\n255\n".len() + 12);
    }

    #[test]
    fn patch_upscale() {
        let probs = Tensor::new(&[6, 1], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        let up = upscale_patches(&probs, 2, 3, 2).unwrap();
        assert_eq!(up.shape(), &[4, 6, 1]);
        assert_eq!(up.at(&[0, 0, 0]), 0.0);
        assert_eq!(up.at(&[1, 5, 0]), 0.2);
        assert_eq!(up.at(&[3, 2, 0]), 0.4);
    }

    #[test]
    fn boundary_of_block() {
        let mut m = Tensor::zeros(&[5, 5, 1]);
        for y in 1..4 {
            for x in 1..4 {
                m.data_mut()[y * 5 + x] = 1.0;
            }
        }
        let b = boundary(&m).unwrap();
        assert_eq!(b.iter().filter(|&&e| e).count(), 8);
        assert!(!b[2 * 5 + 2]);
        let o = overlay(&Tensor::zeros(&[5, 5, 3]), &m).unwrap();
        assert_eq!(o.at(&[1, 1, 0]), 1.0);
        assert_eq!(o.at(&[2, 2, 0]), 0.0);
    }
}
