//! Tiling of oversized diagram images and pixel-level rendering for visual
//! grounding: colored box overlays, box erasure, and context crops.
//!
//! Rasters are 8-bit RGB in memory and PNG at interface boundaries.

use crate::model::BoundingBox;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

/// Position of a tile in the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileIndex {
    pub row: u32,
    pub col: u32,
}

impl std::fmt::Display for TileIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}_c{}", self.row, self.col)
    }
}

/// One crop of the diagram: grid position, window in diagram coordinates,
/// and the raster.
///
/// Windows are `tile_size` square except at the right/bottom edges, where
/// they are truncated to end exactly at the image border.
#[derive(Debug, Clone)]
pub struct Tile {
    pub index: TileIndex,
    pub window: BoundingBox,
    pub image: RgbImage,
}

impl Tile {
    /// File name under the emitted-crops convention.
    pub fn file_name(&self, diagram_id: &str) -> String {
        format!("{diagram_id}_{}.png", self.index)
    }
}

/// All tiles of one diagram.
#[derive(Debug, Clone)]
pub struct TileGrid {
    pub diagram_id: String,
    pub tile_size: u32,
    pub stride: u32,
    pub tiles: Vec<Tile>,
}

/// Outline color and stroke width for box overlays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayStyle {
    pub color: [u8; 3],
    pub thickness: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        // Red, matching the judge prompts' wording.
        Self { color: [255, 0, 0], thickness: 3 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TilingError {
    #[error("invalid tiling: tile_size={tile_size}, stride={stride} ({detail})")]
    InvalidParams {
        tile_size: u32,
        stride: u32,
        detail: String,
    },
}

fn check_params(tile_size: u32, stride: u32) -> Result<(), TilingError> {
    if tile_size == 0 || stride == 0 {
        return Err(TilingError::InvalidParams {
            tile_size,
            stride,
            detail: "tile_size and stride must be positive".into(),
        });
    }
    if stride > tile_size {
        return Err(TilingError::InvalidParams {
            tile_size,
            stride,
            detail: "stride must not exceed tile_size".into(),
        });
    }
    Ok(())
}

fn axis_steps(extent: u32, tile_size: u32, stride: u32) -> u32 {
    if extent <= tile_size {
        1
    } else {
        ((extent - tile_size) as u64).div_ceil(stride as u64) as u32 + 1
    }
}

/// Tile windows for a `width x height` image, without touching pixels.
///
/// Row/column counts follow `ceil((extent - tile_size) / stride) + 1`
/// (one when the extent fits in a single tile); edge windows are truncated
/// so they end exactly at the image border. The union of windows covers
/// every pixel.
pub fn tile_windows(
    width: u32,
    height: u32,
    tile_size: u32,
    stride: u32,
) -> Result<Vec<(TileIndex, BoundingBox)>, TilingError> {
    check_params(tile_size, stride)?;
    let rows = axis_steps(height, tile_size, stride);
    let cols = axis_steps(width, tile_size, stride);
    let mut windows = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        let y = row * stride;
        let h = tile_size.min(height - y);
        for col in 0..cols {
            let x = col * stride;
            let w = tile_size.min(width - x);
            windows.push((TileIndex { row, col }, BoundingBox { x, y, w, h }));
        }
    }
    Ok(windows)
}

/// Cuts a diagram raster into overlapping tiles.
pub fn tile_diagram(
    diagram_id: &str,
    image: &RgbImage,
    tile_size: u32,
    stride: u32,
) -> Result<TileGrid, TilingError> {
    let windows = tile_windows(image.width(), image.height(), tile_size, stride)?;
    let tiles = windows
        .into_iter()
        .map(|(index, window)| Tile {
            index,
            window,
            image: image::imageops::crop_imm(image, window.x, window.y, window.w, window.h)
                .to_image(),
        })
        .collect();
    Ok(TileGrid {
        diagram_id: diagram_id.to_string(),
        tile_size,
        stride,
        tiles,
    })
}

/// Box extent in tile-local signed coordinates (may poke outside the tile).
fn to_local(window: &BoundingBox, b: &BoundingBox) -> (i64, i64, i64, i64) {
    (
        b.x as i64 - window.x as i64,
        b.y as i64 - window.y as i64,
        b.w as i64,
        b.h as i64,
    )
}

fn put_clipped(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

/// Copies the tile image and outlines each box (diagram coordinates,
/// translated into the tile and clipped at its borders). The stroke runs
/// inward from the box boundary: thickness 1 touches exactly the boundary
/// pixels, `2w + 2h - 4` of them for an interior box.
pub fn render_overlay(tile: &Tile, boxes: &[BoundingBox], style: &OverlayStyle) -> RgbImage {
    let mut out = tile.image.clone();
    let thickness = style.thickness.max(1) as i64;
    for b in boxes {
        let (bx, by, bw, bh) = to_local(&tile.window, b);
        if bx + bw <= 0 || by + bh <= 0 || bx >= out.width() as i64 || by >= out.height() as i64 {
            continue;
        }
        for k in 0..thickness {
            let (x0, y0) = (bx + k, by + k);
            let (x1, y1) = (bx + bw - 1 - k, by + bh - 1 - k);
            if x0 > x1 || y0 > y1 {
                break;
            }
            for x in x0..=x1 {
                put_clipped(&mut out, x, y0, style.color);
                put_clipped(&mut out, x, y1, style.color);
            }
            for y in (y0 + 1)..y1 {
                put_clipped(&mut out, x0, y, style.color);
                put_clipped(&mut out, x1, y, style.color);
            }
        }
    }
    out
}

/// Fills box interiors with the tile's background color, leaving every
/// other pixel untouched.
///
/// The background estimate is the per-channel median over pixels outside
/// all boxes (over the whole tile when the boxes cover it completely), so
/// applying the erasure twice yields the identical image.
pub fn erase_boxes(tile: &Tile, boxes: &[BoundingBox]) -> RgbImage {
    let mut out = tile.image.clone();
    if boxes.is_empty() {
        return out;
    }
    let locals: Vec<(i64, i64, i64, i64)> =
        boxes.iter().map(|b| to_local(&tile.window, b)).collect();
    let inside = |x: i64, y: i64| {
        locals
            .iter()
            .any(|&(bx, by, bw, bh)| x >= bx && x < bx + bw && y >= by && y < by + bh)
    };

    let mut channels: [Vec<u8>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (x, y, px) in tile.image.enumerate_pixels() {
        if !inside(x as i64, y as i64) {
            channels[0].push(px[0]);
            channels[1].push(px[1]);
            channels[2].push(px[2]);
        }
    }
    if channels[0].is_empty() {
        for (_, _, px) in tile.image.enumerate_pixels() {
            channels[0].push(px[0]);
            channels[1].push(px[1]);
            channels[2].push(px[2]);
        }
    }
    let background = Rgb([
        median_u8(&mut channels[0]),
        median_u8(&mut channels[1]),
        median_u8(&mut channels[2]),
    ]);

    for &(bx, by, bw, bh) in &locals {
        let x0 = bx.max(0);
        let y0 = by.max(0);
        let x1 = (bx + bw).min(out.width() as i64);
        let y1 = (by + bh).min(out.height() as i64);
        for y in y0..y1 {
            for x in x0..x1 {
                out.put_pixel(x as u32, y as u32, background);
            }
        }
    }
    out
}

fn median_u8(values: &mut [u8]) -> u8 {
    let mid = values.len() / 2;
    let (_, median, _) = values.select_nth_unstable(mid);
    *median
}

/// Cuts a context crop around `bbox`, expanded by `margin_frac * max(w, h)`
/// pixels on each side and clamped to the image. Returns the crop and its
/// diagram-space window.
pub fn crop_region(
    image: &RgbImage,
    bbox: &BoundingBox,
    margin_frac: f64,
) -> (RgbImage, BoundingBox) {
    let margin = (margin_frac * bbox.w.max(bbox.h) as f64).round() as i64;
    let x0 = (bbox.x as i64 - margin).max(0) as u32;
    let y0 = (bbox.y as i64 - margin).max(0) as u32;
    let x1 = (bbox.right() as i64 + margin).min(image.width() as i64) as u32;
    let y1 = (bbox.bottom() as i64 + margin).min(image.height() as i64) as u32;
    let window = BoundingBox {
        x: x0,
        y: y0,
        w: (x1 - x0).max(1),
        h: (y1 - y0).max(1),
    };
    let crop = image::imageops::crop_imm(image, window.x, window.y, window.w, window.h).to_image();
    (crop, window)
}
