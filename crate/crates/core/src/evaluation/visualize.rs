use std::path::Path;

use image::{Rgb, RgbImage};

use crate::detection::Detection;
use crate::error::Result;

use super::FrameMatch;

pub const GT_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const TP_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const FP_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

// 3x5 glyphs, one row per u8 (low three bits, MSB = left column)
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];
const DOT: [u8; 5] = [0, 0, 0, 0, 2];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_rect(img: &mut RgbImage, d: &Detection, c: Rgb<u8>) {
    let (x1, y1, x2, y2) = d.corners();
    let (x1, y1) = (x1.round() as i64, y1.round() as i64);
    let (x2, y2) = (x2.round() as i64 - 1, y2.round() as i64 - 1);
    for x in x1..=x2 {
        put(img, x, y1, c);
        put(img, x, y2, c);
    }
    for y in y1..=y2 {
        put(img, x1, y, c);
        put(img, x2, y, c);
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x: i64, y: i64, c: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let glyph = match ch {
            '0'..='9' => DIGITS[ch as usize - '0' as usize],
            '.' => DOT,
            _ => [0; 5],
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    put(img, cx + col, y + row as i64, c);
                }
            }
        }
        cx += 4;
    }
}

/// Ground truth in yellow, matched predictions in green, unmatched in red,
/// each prediction's score printed above its top-left corner.
pub fn render_overlay(frame: &RgbImage, gts: &[Detection], preds: &[Detection], m: &FrameMatch) -> RgbImage {
    let mut img = frame.clone();
    for g in gts {
        draw_rect(&mut img, g, GT_COLOR);
    }
    for (i, p) in preds.iter().enumerate() {
        let color = if m.pred_matches.get(i).copied().flatten().is_some() {
            TP_COLOR
        } else {
            FP_COLOR
        };
        draw_rect(&mut img, p, color);
        let (x1, y1, _, _) = p.corners();
        let label = format!("{:.2}", p.score);
        let ty = if y1.round() as i64 >= 6 { y1.round() as i64 - 6 } else { y1.round() as i64 + 1 };
        draw_text(&mut img, &label, x1.round() as i64, ty, color);
    }
    img
}

pub fn save_overlay(
    path: &Path,
    frame: &RgbImage,
    gts: &[Detection],
    preds: &[Detection],
    m: &FrameMatch,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    render_overlay(frame, gts, preds, m).save(path)?;
    Ok(())
}
