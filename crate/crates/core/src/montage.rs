//! Result grids: one row per query, the query leftmost and its top results to
//! the right, correct-class results outlined in red.

use image::{Rgb, RgbImage};

use crate::dataset::{load_image, tensor_to_rgb, DatasetManifest};
use crate::error::{Error, Result};
use crate::retrieval::RankedList;

pub const HIGHLIGHT: Rgb<u8> = Rgb([220, 20, 20]);
pub const PLACEHOLDER: Rgb<u8> = Rgb([128, 128, 128]);
const TEXT: Rgb<u8> = Rgb([255, 255, 255]);
const BORDER: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MontageLayout {
    /// Side of one square tile in pixels.
    pub tile: u32,
    /// Results per row after the query.
    pub results: usize,
}

impl Default for MontageLayout {
    fn default() -> Self {
        Self { tile: 64, results: 8 }
    }
}

/// 3x5 glyphs, rows top to bottom, `#` marks a set pixel.
fn glyph(c: char) -> [&'static str; 5] {
    match c.to_ascii_lowercase() {
        '0' => ["###", "#.#", "#.#", "#.#", "###"],
        '1' => [".#.", "##.", ".#.", ".#.", "###"],
        '2' => ["###", "..#", "###", "#..", "###"],
        '3' => ["###", "..#", "###", "..#", "###"],
        '4' => ["#.#", "#.#", "###", "..#", "..#"],
        '5' => ["###", "#..", "###", "..#", "###"],
        '6' => ["###", "#..", "###", "#.#", "###"],
        '7' => ["###", "..#", "..#", ".#.", ".#."],
        '8' => ["###", "#.#", "###", "#.#", "###"],
        '9' => ["###", "#.#", "###", "..#", "###"],
        'a' => [".#.", "#.#", "###", "#.#", "#.#"],
        'b' => ["##.", "#.#", "##.", "#.#", "##."],
        'c' => [".##", "#..", "#..", "#..", ".##"],
        'd' => ["##.", "#.#", "#.#", "#.#", "##."],
        'e' => ["###", "#..", "##.", "#..", "###"],
        'f' => ["###", "#..", "##.", "#..", "#.."],
        'g' => [".##", "#..", "#.#", "#.#", ".##"],
        'h' => ["#.#", "#.#", "###", "#.#", "#.#"],
        'i' => ["###", ".#.", ".#.", ".#.", "###"],
        'j' => ["..#", "..#", "..#", "#.#", ".#."],
        'k' => ["#.#", "#.#", "##.", "#.#", "#.#"],
        'l' => ["#..", "#..", "#..", "#..", "###"],
        'm' => ["#.#", "###", "###", "#.#", "#.#"],
        'n' => ["##.", "#.#", "#.#", "#.#", "#.#"],
        'o' => [".#.", "#.#", "#.#", "#.#", ".#."],
        'p' => ["##.", "#.#", "##.", "#..", "#.."],
        'q' => [".#.", "#.#", "#.#", "##.", ".##"],
        'r' => ["##.", "#.#", "##.", "#.#", "#.#"],
        's' => [".##", "#..", ".#.", "..#", "##."],
        't' => ["###", ".#.", ".#.", ".#.", ".#."],
        'u' => ["#.#", "#.#", "#.#", "#.#", "###"],
        'v' => ["#.#", "#.#", "#.#", "#.#", ".#."],
        'w' => ["#.#", "#.#", "###", "###", "#.#"],
        'x' => ["#.#", "#.#", ".#.", "#.#", "#.#"],
        'y' => ["#.#", "#.#", ".#.", ".#.", ".#."],
        'z' => ["###", "..#", ".#.", "#..", "###"],
        '_' => ["...", "...", "...", "...", "###"],
        '#' => ["#.#", "###", "#.#", "###", "#.#"],
        '-' => ["...", "...", "###", "...", "..."],
        '.' => ["...", "...", "...", "...", ".#."],
        ' ' => ["...", "...", "...", "...", "..."],
        _ => ["###", "..#", ".#.", "...", ".#."],
    }
}

/// Draw `text` wrapped to the tile width, starting at `(x0, y0)`.
fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, width: u32) {
    let per_line = ((width.saturating_sub(4)) / 4).max(1) as usize;
    let chars: Vec<char> = text.chars().collect();
    for (line, chunk) in chars.chunks(per_line).enumerate() {
        for (i, &c) in chunk.iter().enumerate() {
            let gx = x0 + 2 + 4 * i as u32;
            let gy = y0 + 2 + 6 * line as u32;
            for (r, row) in glyph(c).iter().enumerate() {
                for (col, px) in row.chars().enumerate() {
                    let (x, y) = (gx + col as u32, gy + r as u32);
                    if px == '#' && x < img.width() && y < img.height() {
                        img.put_pixel(x, y, TEXT);
                    }
                }
            }
        }
    }
}

fn draw_border(img: &mut RgbImage, x0: u32, y0: u32, side: u32, color: Rgb<u8>) {
    for dy in 0..side {
        for dx in 0..side {
            if dx < BORDER || dy < BORDER || dx >= side - BORDER || dy >= side - BORDER {
                img.put_pixel(x0 + dx, y0 + dy, color);
            }
        }
    }
}

fn paste_tile(img: &mut RgbImage, manifest: &DatasetManifest, id: &str, x0: u32, y0: u32, side: u32) {
    let loaded = manifest
        .find(id)
        .ok_or_else(|| Error::Lookup(id.to_string()))
        .and_then(|s| load_image(&manifest.image_file(s), side as usize));
    match loaded {
        Ok(t) => {
            let tile = tensor_to_rgb(&t);
            for (x, y, p) in tile.enumerate_pixels() {
                img.put_pixel(x0 + x, y0 + y, *p);
            }
        }
        Err(e) => {
            log::warn!("placeholder for `{id}`: {e}");
            for y in 0..side {
                for x in 0..side {
                    img.put_pixel(x0 + x, y0 + y, PLACEHOLDER);
                }
            }
            draw_text(img, id, x0, y0, side);
        }
    }
}

/// Grid of `lists.len()` rows by `1 + layout.results` columns.
pub fn render_montage(lists: &[RankedList], manifest: &DatasetManifest, layout: MontageLayout) -> Result<RgbImage> {
    if lists.is_empty() {
        return Err(Error::domain("no ranked lists to draw"));
    }
    if layout.tile < 2 * BORDER + 1 || layout.results == 0 {
        return Err(Error::domain("tile too small or no result columns"));
    }
    let t = layout.tile;
    let cols = 1 + layout.results as u32;
    let mut img = RgbImage::from_pixel(cols * t, lists.len() as u32 * t, Rgb([0, 0, 0]));
    for (r, list) in lists.iter().enumerate() {
        let y0 = r as u32 * t;
        paste_tile(&mut img, manifest, &list.query_id, 0, y0, t);
        let query_label = manifest.find(&list.query_id).map(|s| s.label);
        for (c, id) in list.ranked_ids.iter().take(layout.results).enumerate() {
            let x0 = (c as u32 + 1) * t;
            paste_tile(&mut img, manifest, id, x0, y0, t);
            let label = manifest.find(id).map(|s| s.label);
            if label.is_some() && label == query_label {
                draw_border(&mut img, x0, y0, t, HIGHLIGHT);
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &std::path::Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
