use rand::Rng;

use super::Image;

pub const CROP_SCALE: (f64, f64) = (0.6, 1.0);

/// One draw of the training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Fraction of the image area kept by the square crop.
    pub scale: f64,
    /// Top-left corner of the crop in source pixels.
    pub offset_y: f64,
    pub offset_x: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        offset_y: 0.0,
        offset_x: 0.0,
        flip: false,
    };

    pub fn sample(side: usize, rng: &mut impl Rng) -> Self {
        let scale = rng.random_range(CROP_SCALE.0..=CROP_SCALE.1);
        let crop = side as f64 * scale.sqrt();
        let slack = side as f64 - crop;
        Self {
            scale,
            offset_y: rng.random_range(0.0..=slack),
            offset_x: rng.random_range(0.0..=slack),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Random resized square crop (bilinear back to full size), then an optional
/// horizontal flip.
pub fn apply_augment(image: &Image, p: &AugmentParams) -> Image {
    let side = image.side();
    let crop = side as f64 * p.scale.sqrt();
    let step = crop / side as f64;
    let max = (side - 1) as f64;
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        let sy = (p.offset_y + (y as f64 + 0.5) * step - 0.5).clamp(0.0, max);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(side - 1);
        for x in 0..side {
            let sx = (p.offset_x + (x as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(side - 1);
            let v = |yy: usize, xx: usize| f64::from(image.pixel(yy, xx));
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            let value = top * (1.0 - fy) + bottom * fy;
            let xo = if p.flip { side - 1 - x } else { x };
            out[y * side + xo] = value as f32;
        }
    }
    Image::new(side, out).expect("same geometry as input")
}

pub fn augment(image: &Image, rng: &mut impl Rng) -> Image {
    apply_augment(image, &AugmentParams::sample(image.side(), rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp() -> Image {
        Image::new(8, (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn identity_params_are_exact() {
        let img = ramp();
        assert_eq!(apply_augment(&img, &AugmentParams::IDENTITY), img);
    }

    #[test]
    fn double_flip_restores() {
        let img = ramp();
        let flip = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = apply_augment(&img, &flip);
        assert_ne!(once, img);
        assert_eq!(apply_augment(&once, &flip), img);
    }

    #[test]
    fn shape_preserved_and_seeded() {
        let img = ramp();
        let a = augment(&img, &mut rng::stream(1, "aug"));
        let b = augment(&img, &mut rng::stream(1, "aug"));
        assert_eq!(a, b);
        assert_eq!(a.side(), 8);
        assert_eq!(a.pixels().len(), 64);
    }
}
