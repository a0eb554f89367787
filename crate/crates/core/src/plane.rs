//! Single-channel row-major image planes and the resampling helpers shared by
//! the flow solver and the augmentation pipeline.

use crate::error::{MffError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Plane<P> {
    width: usize,
    height: usize,
    data: Vec<P>,
}

impl<P: Copy> Plane<P> {
    pub fn new(width: usize, height: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != width * height {
            return Err(MffError::Shape(format!(
                "plane {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: P) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> P) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> P {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: P) {
        self.data[y * self.width + x] = value;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[P] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Plane<Q> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Plane<P> {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.row(y)[x0..x0 + w]);
        }
        Plane {
            width: w,
            height: h,
            data,
        }
    }

    pub fn mirror_horizontal(&self) -> Plane<P> {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            data.extend(self.row(y).iter().rev());
        }
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

impl<T: Scalar> Plane<T> {
    /// Bilinear sample at continuous pixel coordinates; samples outside the
    /// image are clamped to the border.
    #[inline]
    pub fn sample_clamped(&self, x: T, y: T) -> T {
        let max_x = T::of((self.width - 1) as f64);
        let max_y = T::of((self.height - 1) as f64);
        let x = x.max(T::zero()).min(max_x);
        let y = y.max(T::zero()).min(max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0.to_usize().unwrap_or(0);
        let y0 = y0.to_usize().unwrap_or(0);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0) * (T::one() - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (T::one() - fx) + self.get(x1, y1) * fx;
        top * (T::one() - fy) + bottom * fy
    }

    /// Bilinear resize with pixel-centre alignment. `offset` shifts the
    /// source sampling grid (in source pixels).
    pub fn resize_bilinear_offset(&self, width: usize, height: usize, offset: T) -> Plane<T> {
        if width == self.width && height == self.height && offset == T::zero() {
            return self.clone();
        }
        let rx = T::of(self.width as f64 / width as f64);
        let ry = T::of(self.height as f64 / height as f64);
        let half = T::of(0.5);
        Plane::from_fn(width, height, |x, y| {
            let sx = (T::of(x as f64) + half) * rx - half + offset;
            let sy = (T::of(y as f64) + half) * ry - half + offset;
            self.sample_clamped(sx, sy)
        })
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Plane<T> {
        self.resize_bilinear_offset(width, height, T::zero())
    }
}

impl Plane<u8> {
    pub fn to_float<T: Scalar>(&self) -> Plane<T> {
        self.map(|c| T::of(c as f64))
    }
}

/// Rounds half-up and clamps into the 8-bit range.
#[inline]
pub fn to_code<T: Scalar>(v: T) -> u8 {
    let r = (v + T::of(0.5)).floor().to_f64_lossy();
    r.clamp(0.0, 255.0) as u8
}

impl<T: Scalar> Plane<T> {
    pub fn to_codes(&self) -> Plane<u8> {
        self.map(to_code)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Plane::new(3, 2, vec![0u8; 5]).is_err());
    }

    #[test]
    fn bilinear_on_ramp_is_linear() {
        let ramp = Plane::from_fn(8, 4, |x, _| x as f64 * 2.0);
        assert!((ramp.sample_clamped(2.25, 1.0) - 4.5).abs() < 1e-12);
        // clamped past the right border
        assert_eq!(ramp.sample_clamped(20.0, 1.0), 14.0);
        assert_eq!(ramp.sample_clamped(-3.0, 1.0), 0.0);
    }

    #[test]
    fn resize_preserves_constants() {
        let p = Plane::filled(10, 7, 0.3f32);
        let r = p.resize_bilinear(23, 5);
        assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn crop_and_mirror() {
        let p = Plane::from_fn(4, 3, |x, y| (10 * y + x) as u8);
        let c = p.crop(1, 1, 2, 2);
        assert_eq!(c.data(), &[11, 12, 21, 22]);
        assert_eq!(p.mirror_horizontal().row(0), &[3, 2, 1, 0]);
    }

    #[test]
    fn code_rounding() {
        assert_eq!(to_code(127.5f32), 128);
        assert_eq!(to_code(127.49f32), 127);
        assert_eq!(to_code(-4.0f32), 0);
        assert_eq!(to_code(300.0f64), 255);
    }
}
