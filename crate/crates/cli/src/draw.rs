//! Box outlines and a small bitmap font for annotated output images.

use objdist::image::RgbImage;
use objdist::kitti_io::BBox2;

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

/// 5×7 glyphs, one byte per row, most significant of the low five bits on
/// the left.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        ' ' => [0; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, rgb: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.set(x as u32, y as u32, rgb);
    }
}

pub fn draw_box(img: &mut RgbImage, b: &BBox2, rgb: [f32; 3]) {
    let (l, t) = (b.left.round() as i64, b.top.round() as i64);
    let (r, bt) = (b.right.round() as i64, b.bottom.round() as i64);
    for x in l..=r {
        put(img, x, t, rgb);
        put(img, x, bt, rgb);
    }
    for y in t..=bt {
        put(img, l, y, rgb);
        put(img, r, y, rgb);
    }
}

pub fn text_width(text: &str, scale: u32) -> u32 {
    text.chars().count() as u32 * (GLYPH_W + 1) * scale
}

/// Draws `text` with its top-left corner at `(x, y)` on a dark backing
/// rectangle so it stays legible on any background.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, rgb: [f32; 3]) {
    let s = scale as i64;
    let w = text_width(text, scale) as i64;
    let h = (GLYPH_H as i64 + 2) * s;
    for yy in y - s..y - s + h {
        for xx in x - s..x + w {
            put(img, xx, yy, [0.0, 0.0, 0.0]);
        }
    }
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as i64 * (GLYPH_W as i64 + 1) * s;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, gx + col as i64 * s + dx, y + row as i64 * s + dy, rgb);
                        }
                    }
                }
            }
        }
    }
}

/// Text label `"GT/pred"` with one decimal, `-` for a missing estimate.
pub fn distance_label(gt: f64, pred: Option<f64>) -> String {
    match pred {
        Some(p) => format!("{gt:.1}/{p:.1}"),
        None => format!("{gt:.1}/-"),
    }
}

/// Outlines the box and writes its label just above it, or inside the top
/// edge when there is no room above.
pub fn annotate(img: &mut RgbImage, b: &BBox2, label: &str, rgb: [f32; 3]) {
    draw_box(img, b, rgb);
    let scale = if img.height() >= 300 { 2 } else { 1 };
    let h = ((GLYPH_H + 2) * scale) as i64;
    let above = b.top.round() as i64 - h;
    let y = if above >= 0 { above + scale as i64 } else { b.top.round() as i64 + 2 };
    draw_text(img, b.left.round() as i64, y, label, scale, rgb);
}
