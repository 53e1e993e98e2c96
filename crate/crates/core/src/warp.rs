//! Bilinear sampling, perspective warping and resizing.

use crate::geometry::{GeometryError, Homography};
use crate::image::{Image, PixelCoord};

/// Bilinear sample of channel `c` at `(x, y)`; `None` outside the lattice hull.
#[inline]
pub fn sample_bilinear(img: &Image, x: f64, y: f64, c: usize) -> Option<f64> {
    let (w, h) = (img.width(), img.height());
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let j0 = (x.floor() as usize).min(w.saturating_sub(2));
    let i0 = (y.floor() as usize).min(h.saturating_sub(2));
    let j1 = (j0 + 1).min(w - 1);
    let i1 = (i0 + 1).min(h - 1);
    let fx = x - j0 as f64;
    let fy = y - i0 as f64;
    let top = img.get(i0, j0, c) * (1.0 - fx) + img.get(i0, j1, c) * fx;
    let bottom = img.get(i1, j0, c) * (1.0 - fx) + img.get(i1, j1, c) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Output of [`warp_perspective`]: the image and which pixels had a source.
#[derive(Debug, Clone)]
pub struct Warped {
    pub image: Image,
    pub valid: Vec<bool>,
}

impl Warped {
    /// True when every pixel of the `size x size` window at `(x0, y0)` is valid.
    pub fn window_valid(&self, x0: usize, y0: usize, size: usize) -> bool {
        let w = self.image.width();
        (y0..y0 + size).all(|i| (x0..x0 + size).all(|j| self.valid[i * w + j]))
    }
}

/// Resamples `src` into a `width x height` frame so that output pixel `p`
/// takes the value of `src` at `h⁻¹(p)`. Pixels without a source are zero.
pub fn warp_perspective(src: &Image, h: &Homography, width: usize, height: usize) -> Result<Warped, GeometryError> {
    let inv = h.invert()?;
    let ch = src.channels();
    let mut data = vec![0.0; width * height * ch];
    let mut valid = vec![false; width * height];
    for i in 0..height {
        for j in 0..width {
            let Ok(q) = inv.apply(PixelCoord::new(j as f64, i as f64)) else { continue };
            let k = i * width + j;
            let mut ok = true;
            for c in 0..ch {
                match sample_bilinear(src, q.x, q.y, c) {
                    Some(v) => data[k * ch + c] = v.clamp(0.0, 1.0),
                    None => ok = false,
                }
            }
            if ok {
                valid[k] = true;
            } else {
                data[k * ch..(k + 1) * ch].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let image = Image::new(width, height, ch, data).expect("warp output dimensions");
    Ok(Warped { image, valid })
}

/// Target size that sets the shorter side to `shorter` with aspect preserved.
pub fn resized_dims(width: usize, height: usize, shorter: usize) -> (usize, usize) {
    let s = shorter as f64 / width.min(height) as f64;
    (((width as f64 * s).round() as usize).max(1), ((height as f64 * s).round() as usize).max(1))
}

/// Bilinear resize. Output pixel `(x', y')` samples the input at
/// `(x' / sx, y' / sy)` with `sx = new_w / w`, `sy = new_h / h`, clamped to the
/// lattice; [`resize_scale`] returns the same map as a homography.
pub fn resize(img: &Image, new_w: usize, new_h: usize) -> Image {
    let (sx, sy) = (new_w as f64 / img.width() as f64, new_h as f64 / img.height() as f64);
    let (max_x, max_y) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
    let ch = img.channels();
    let mut data = Vec::with_capacity(new_w * new_h * ch);
    for i in 0..new_h {
        let y = (i as f64 / sy).min(max_y);
        for j in 0..new_w {
            let x = (j as f64 / sx).min(max_x);
            for c in 0..ch {
                data.push(sample_bilinear(img, x, y, c).unwrap_or(0.0).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(new_w, new_h, ch, data).expect("resize output dimensions")
}

/// Diagonal scale that maps original pixel coordinates to resized ones.
pub fn resize_scale(width: usize, height: usize, new_w: usize, new_h: usize) -> Homography {
    Homography::scaling(new_w as f64 / width as f64, new_h as f64 / height as f64).expect("positive scale")
}

/// Rescales `h` (A → B) to resized frames: `S_B · h · S_A⁻¹`.
pub fn rescale_homography(h: &Homography, scale_a: &Homography, scale_b: &Homography) -> Result<Homography, GeometryError> {
    Homography::compose(&Homography::compose(scale_b, h)?, &scale_a.invert()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::corner_error;
    use nalgebra::Matrix3;

    fn smooth(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |i, j| {
            0.5 + 0.25 * ((i as f64) / 9.0).sin() * ((j as f64) / 13.0).cos() + 0.2 * ((i + 2 * j) as f64 / 31.0).sin()
        })
    }

    #[test]
    fn bilinear_on_grid_and_between() {
        let img = Image::from_fn(3, 3, |i, j| (i * 3 + j) as f64 / 8.0);
        assert_eq!(sample_bilinear(&img, 1.0, 2.0, 0), Some(7.0 / 8.0));
        assert!((sample_bilinear(&img, 0.5, 0.5, 0).unwrap() - 2.0 / 8.0).abs() < 1e-15);
        assert_eq!(sample_bilinear(&img, 2.0, 2.0, 0), Some(1.0));
        assert_eq!(sample_bilinear(&img, 2.01, 0.0, 0), None);
        assert_eq!(sample_bilinear(&img, -0.01, 0.0, 0), None);
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = smooth(20, 15);
        let w = warp_perspective(&img, &Homography::identity(), 20, 15).unwrap();
        assert_eq!(w.image, img);
        assert!(w.valid.iter().all(|&v| v));
    }

    #[test]
    fn translation_warp_zero_fills() {
        let img = smooth(10, 10);
        let w = warp_perspective(&img, &Homography::translation(2.0, 0.0), 10, 10).unwrap();
        assert_eq!(w.image.at(4, 5), img.at(4, 3));
        assert_eq!(w.image.at(4, 1), 0.0);
        assert!(!w.valid[4 * 10 + 1]);
        assert!(w.window_valid(2, 0, 8));
        assert!(!w.window_valid(1, 0, 8));
    }

    #[test]
    fn warp_roundtrip_smooth_image() {
        let img = smooth(96, 96);
        let h = Homography::from_matrix(Matrix3::new(0.95, 0.05, 3.0, -0.04, 1.02, 2.0, 1e-4, -5e-5, 1.0)).unwrap();
        let fwd = warp_perspective(&img, &h, 96, 96).unwrap();
        let back = warp_perspective(&fwd.image, &h.invert().unwrap(), 96, 96).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for i in 16..80 {
            for j in 16..80 {
                if back.valid[i * 96 + j] {
                    total += (back.image.at(i, j) - img.at(i, j)).abs();
                    n += 1;
                }
            }
        }
        assert!(n > 3000);
        assert!(total / (n as f64) < 0.02);
    }

    #[test]
    fn resize_dims_and_rescale() {
        assert_eq!(resized_dims(640, 320, 480), (960, 480));
        assert_eq!(resized_dims(256, 256, 480), (480, 480));
        let img = smooth(40, 20);
        let r = resize(&img, 80, 40);
        assert_eq!((r.width(), r.height()), (80, 40));
        assert!((r.at(10, 20) - img.at(5, 10)).abs() < 1e-12);

        let h = Homography::from_matrix(Matrix3::new(1.0, 0.1, 3.0, 0.0, 0.9, 1.0, 1e-4, 0.0, 1.0)).unwrap();
        let sa = resize_scale(40, 20, 80, 40);
        let sb = resize_scale(50, 30, 100, 60);
        let hr = rescale_homography(&h, &sa, &sb).unwrap();
        assert_eq!(corner_error(&hr, &hr, 80, 40).unwrap(), 0.0);
        let pa = PixelCoord::new(7.0, 5.0);
        let direct = h.apply(pa).unwrap();
        let via = hr.apply(PixelCoord::new(14.0, 10.0)).unwrap();
        assert!((via.x - 2.0 * direct.x).abs() < 1e-9 && (via.y - 2.0 * direct.y).abs() < 1e-9);
    }
}
