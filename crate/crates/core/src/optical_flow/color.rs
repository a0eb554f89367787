use image::RgbImage;

use crate::scalar::Scalar;

use super::FlowField;

fn hsv_to_rgb(hue_deg: f64, sat: f64, val: f64) -> [u8; 3] {
    let c = val * sat;
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    let q = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// HSV color wheel: hue is the flow direction `atan2(v, u)`, saturation the
/// magnitude relative to the field's maximum, value 1. Zero flow is white.
pub fn flow_to_color<T: Scalar>(flow: &FlowField<T>) -> RgbImage {
    let (w, h) = (flow.width(), flow.height());
    let mag = |i: usize| {
        let u = flow.u.data()[i].to_f64_lossy();
        let v = flow.v.data()[i].to_f64_lossy();
        (u * u + v * v).sqrt()
    };
    let max = (0..w * h).map(mag).fold(0.0f64, f64::max);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if max == 0.0 {
            return image::Rgb([255, 255, 255]);
        }
        let u = flow.u.data()[i].to_f64_lossy();
        let v = flow.v.data()[i].to_f64_lossy();
        let hue = v.atan2(u).to_degrees();
        image::Rgb(hsv_to_rgb(hue, mag(i) / max, 1.0))
    })
}

/// Inverse of the hue mapping.
#[cfg(test)]
pub(crate) fn rgb_hue(px: [u8; 3]) -> Option<f64> {
    let [r, g, b] = px.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h * 60.0)
}
