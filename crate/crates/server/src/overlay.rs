//! Argmax part map blended over the model-size input image.

use image::{Rgb, RgbImage};
use kpr::model::head::PartAttention;

/// Part colors, cycled when there are more parts than entries. Class 0 is
/// background and is left uncolored.
pub const PART_COLORS: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

pub const BLEND: f32 = 0.55;

pub fn part_color(part: usize) -> [u8; 3] {
    PART_COLORS[part % PART_COLORS.len()]
}

/// Each pixel takes the argmax class of the token cell it falls in.
pub fn render(img: &RgbImage, attention: &PartAttention) -> RgbImage {
    let classes = attention.argmax();
    let (w, h) = img.dimensions();
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let gx = (x as usize * attention.width) / w as usize;
        let gy = (y as usize * attention.height) / h as usize;
        let class = classes[gy * attention.width + gx] as usize;
        if class == 0 {
            continue;
        }
        let c = part_color(class - 1);
        *px = Rgb(std::array::from_fn(|i| {
            (px.0[i] as f32 * (1.0 - BLEND) + c[i] as f32 * BLEND).round() as u8
        }));
    }
    out
}
