use super::RgbImage;
use crate::flow::FlowField;
use crate::tensor::Element;

/// HSV (hue in degrees) to RGB, all components in `[0, 1]`.
pub fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let channel = |n: f64| {
        let k = (n + h) % 6.0;
        value - value * saturation * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [channel(5.0), channel(3.0), channel(1.0)]
}

/// Color-wheel rendering of the first field in the batch.
///
/// Hue encodes direction (`atan2(v, u)`, 0° = +u is red), saturation encodes
/// `|f| / max_magnitude` clipped to 1, value is 1. Zero flow is white and
/// invalid pixels are black. Without `max_magnitude` the largest valid
/// magnitude in the field is used.
pub fn flow_to_color<T: Element>(flow: &FlowField<T>, max_magnitude: Option<f64>) -> RgbImage {
    let (w, h) = (flow.width(), flow.height());
    let mut img = RgbImage::new(w, h);
    let max = max_magnitude.unwrap_or_else(|| {
        let mut m = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                if flow.is_valid(0, y, x) {
                    let (u, v) = flow.at(0, y, x);
                    m = m.max(u.as_f64().hypot(v.as_f64()));
                }
            }
        }
        m
    });
    for y in 0..h {
        for x in 0..w {
            if !flow.is_valid(0, y, x) {
                img.set_pixel(x, y, [0, 0, 0]);
                continue;
            }
            let (u, v) = flow.at(0, y, x);
            let (u, v) = (u.as_f64(), v.as_f64());
            let mag = u.hypot(v);
            let sat = if max > 0.0 { (mag / max).min(1.0) } else { 0.0 };
            let hue = v.atan2(u).to_degrees();
            let rgb = hsv_to_rgb(hue, sat, 1.0);
            img.set_pixel(x, y, rgb.map(|c| (c * 255.0).round() as u8));
        }
    }
    img
}
