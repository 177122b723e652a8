//! Burns detection boxes and labels into an image with a 3×5 bitmap font.

use pdd_core::data::Pixels;
use pdd_core::postprocess::Detection;

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [1.0, 0.9, 0.1],
    [0.2, 0.6, 1.0],
    [1.0, 0.3, 1.0],
    [0.2, 1.0, 1.0],
    [1.0, 1.0, 1.0],
];

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_lowercase() {
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'k' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b110, 0b101, 0b101, 0b101, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b010, 0b101, 0b101, 0b011, 0b001],
        'r' => [0b110, 0b101, 0b110, 0b101, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b110],
        '_' => [0, 0, 0, 0, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        _ => [0; 5],
    }
}

fn put(px: &mut Pixels, x: i64, y: i64, c: [f64; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < px.width && (y as usize) < px.height {
        px.set(y as usize, x as usize, c);
    }
}

pub fn draw_text(px: &mut Pixels, x: i64, y: i64, text: &str, scale: i64, c: [f64; 3]) {
    for (k, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let ox = x + k as i64 * 4 * scale;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(px, ox + col * scale + dx, y + r as i64 * scale + dy, c);
                        }
                    }
                }
            }
        }
    }
}

/// Outlines each detection and writes `class score` above it (inside when
/// there is no room above).
pub fn annotate(pixels: &Pixels, dets: &[Detection], class_names: &[&str]) -> Pixels {
    let mut px = pixels.clone();
    let (w, h) = (px.width as f64, px.height as f64);
    let scale = (px.width.min(px.height) / 160).max(1) as i64;
    for d in dets {
        let c = PALETTE[d.class_id % PALETTE.len()];
        let (x1, y1, x2, y2) = d.bbox.corners();
        let (x1, y1) = ((x1 * w).floor() as i64, (y1 * h).floor() as i64);
        let (x2, y2) = ((x2 * w).ceil() as i64 - 1, (y2 * h).ceil() as i64 - 1);
        for x in x1..=x2 {
            put(&mut px, x, y1, c);
            put(&mut px, x, y2, c);
        }
        for y in y1..=y2 {
            put(&mut px, x1, y, c);
            put(&mut px, x2, y, c);
        }
        let name = class_names.get(d.class_id).copied().unwrap_or("?");
        let label = format!("{name} {:.2}", d.score);
        let ty = if y1 >= 6 * scale { y1 - 6 * scale } else { y1 + 2 };
        draw_text(&mut px, x1 + 1, ty, &label, scale, c);
    }
    px
}
