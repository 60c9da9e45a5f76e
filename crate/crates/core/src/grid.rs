//! Labeled side-by-side comparison grids with optional zoom insets.

use ndarray::{s, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::Real;

const BORDER: usize = 2;
const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;
const LABEL_BAND: usize = GLYPH_H + 4;
const BOX_COLOR: [f64; 3] = [1.0, 0.1, 0.1];

/// Crop rectangle in image pixels: columns `x..x+w`, rows `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoomBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridOptions {
    pub zoom: Option<ZoomBox>,
    /// Inset magnification; defaults to the largest that fits the tile width.
    pub zoom_scale: Option<usize>,
    /// Tiles per row; defaults to all in one row.
    pub columns: Option<usize>,
}

/// Where each tile landed, as (row, column) of the top-left pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TilePlacement {
    pub image: (usize, usize),
    pub inset: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Grid<T> {
    pub image: Array3<T>,
    pub tiles: Vec<TilePlacement>,
    pub zoom_scale: usize,
}

pub fn make_grid<T: Real>(tiles: &[(&str, ArrayView3<T>)], options: GridOptions) -> Result<Grid<T>> {
    let Some((_, first)) = tiles.first() else {
        return Err(invalid("grid needs at least one image"));
    };
    let (h, w, ch) = first.dim();
    if ch != 3 || h == 0 || w == 0 {
        return Err(invalid(format!("grid tiles must be H × W × 3, got {:?}", first.dim())));
    }
    if let Some((label, im)) = tiles.iter().find(|(_, im)| im.dim() != (h, w, 3)) {
        return Err(Error::ShapeMismatch(format!(
            "tile `{label}` is {:?}, expected {:?}",
            im.dim(),
            (h, w, 3)
        )));
    }
    let scale = match options.zoom {
        Some(b) => {
            if b.w == 0 || b.h == 0 || b.x + b.w > w || b.y + b.h > h {
                return Err(invalid(format!("zoom box {b:?} exceeds the {w}×{h} image")));
            }
            let s = options.zoom_scale.unwrap_or((w / b.w).max(1));
            if s == 0 || b.w * s > w {
                return Err(invalid(format!("zoom scale {s} does not fit a {w}-pixel tile")));
            }
            s
        }
        None => 0,
    };
    let inset_h = options.zoom.map_or(0, |b| b.h * scale + BORDER);
    let cols = options.columns.unwrap_or(tiles.len()).clamp(1, tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let cell_w = w + BORDER;
    let cell_h = LABEL_BAND + h + inset_h + BORDER;
    let mut out = Array3::from_elem((BORDER + rows * cell_h, BORDER + cols * cell_w, 3), T::one());
    let mut placements = Vec::with_capacity(tiles.len());
    for (i, (label, im)) in tiles.iter().enumerate() {
        let top = BORDER + (i / cols) * cell_h;
        let left = BORDER + (i % cols) * cell_w;
        draw_text(&mut out, label, top + 2, left, w);
        let (ir, ic) = (top + LABEL_BAND, left);
        out.slice_mut(s![ir..ir + h, ic..ic + w, ..]).assign(im);
        let mut inset = None;
        if let Some(b) = options.zoom {
            let (zr, zc) = (ir + h + BORDER, ic);
            for r in 0..b.h * scale {
                for c in 0..b.w * scale {
                    for k in 0..3 {
                        out[[zr + r, zc + c, k]] = im[[b.y + r / scale, b.x + c / scale, k]];
                    }
                }
            }
            outline(&mut out, ir + b.y, ic + b.x, b.h, b.w);
            inset = Some((zr, zc));
        }
        placements.push(TilePlacement { image: (ir, ic), inset });
    }
    Ok(Grid {
        image: out,
        tiles: placements,
        zoom_scale: scale,
    })
}

/// One-pixel frame just outside the box.
fn outline<T: Real>(img: &mut Array3<T>, r0: usize, c0: usize, h: usize, w: usize) {
    let color = BOX_COLOR.map(T::lit);
    let mut put = |r: usize, c: usize| {
        for k in 0..3 {
            img[[r, c, k]] = color[k];
        }
    };
    let (top, left) = (r0.saturating_sub(1), c0.saturating_sub(1));
    for c in left..=c0 + w {
        put(top, c);
        put(r0 + h, c);
    }
    for r in top..=r0 + h {
        put(r, left);
        put(r, c0 + w);
    }
}

fn draw_text<T: Real>(img: &mut Array3<T>, text: &str, top: usize, left: usize, max_w: usize) {
    let fits = (max_w + 1) / (GLYPH_W + 1);
    for (n, ch) in text.chars().take(fits).enumerate() {
        let rows = glyph(ch);
        let x0 = left + n * (GLYPH_W + 1);
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - c)) != 0 {
                    for k in 0..3 {
                        img[[top + r, x0 + c, k]] = T::zero();
                    }
                }
            }
        }
    }
}

fn glyph(ch: char) -> [u8; GLYPH_H] {
    match ch.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
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
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        ' ' => [0; GLYPH_H],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tile(seed: usize) -> Array3<f32> {
        Array3::from_shape_fn((16, 20, 3), |(r, c, k)| ((r * 7 + c * 3 + k + seed) % 11) as f32 / 10.0)
    }

    #[test]
    fn single_tile_is_bordered() {
        let a = tile(0);
        let g = make_grid(&[("gt", a.view())], GridOptions::default()).unwrap();
        let (ir, ic) = g.tiles[0].image;
        assert_eq!(g.image.slice(s![ir..ir + 16, ic..ic + 20, ..]), a);
        assert_eq!(g.image.dim(), (BORDER + LABEL_BAND + 16 + BORDER, 20 + 2 * BORDER, 3));
        assert!(g.image.slice(s![.., 0..BORDER, ..]).iter().all(|&v| v == 1.0));
        assert!(g
            .image
            .slice(s![g.image.dim().0 - BORDER.., .., ..])
            .iter()
            .all(|&v| v == 1.0));
        // the label put some ink in its band
        assert!(g.image.slice(s![BORDER..ir, ic..ic + 20, ..]).iter().any(|&v| v == 0.0));
    }

    #[test]
    fn insets_align_across_tiles() {
        let imgs: Vec<Array3<f32>> = (0..5).map(tile).collect();
        let named: Vec<(&str, ArrayView3<f32>)> = ["a", "b", "c", "d", "e"]
            .into_iter()
            .zip(imgs.iter().map(|i| i.view()))
            .collect();
        let zoom = ZoomBox { x: 4, y: 3, w: 6, h: 5 };
        let g = make_grid(
            &named,
            GridOptions {
                zoom: Some(zoom),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(g.zoom_scale, 3);
        let first = g.tiles[0].inset.unwrap();
        for (t, img) in g.tiles.iter().zip(&imgs) {
            let (zr, zc) = t.inset.unwrap();
            assert_eq!(zr, first.0);
            assert_eq!(zc - t.image.1, first.1 - g.tiles[0].image.1);
            for r in 0..zoom.h * 3 {
                for c in 0..zoom.w * 3 {
                    assert_eq!(g.image[[zr + r, zc + c, 1]], img[[zoom.y + r / 3, zoom.x + c / 3, 1]]);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_boxes_and_mixed_sizes() {
        let a = tile(0);
        for zoom in [
            ZoomBox {
                x: 15,
                y: 0,
                w: 6,
                h: 2,
            },
            ZoomBox {
                x: 0,
                y: 12,
                w: 2,
                h: 5,
            },
            ZoomBox { x: 0, y: 0, w: 0, h: 2 },
        ] {
            assert!(make_grid(
                &[("a", a.view())],
                GridOptions {
                    zoom: Some(zoom),
                    ..Default::default()
                }
            )
            .is_err());
        }
        let b = Array3::<f32>::zeros((8, 8, 3));
        assert!(make_grid(&[("a", a.view()), ("b", b.view())], GridOptions::default()).is_err());
        assert!(make_grid::<f32>(&[], GridOptions::default()).is_err());
    }

    #[test]
    fn columns_wrap_rows() {
        let a = tile(1);
        let v = vec![("x", a.view()); 5];
        let g = make_grid(
            &v,
            GridOptions {
                columns: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(g.tiles[2].image.0, g.tiles[0].image.0 + LABEL_BAND + 16 + BORDER);
        assert_eq!(g.tiles[2].image.1, g.tiles[0].image.1);
    }
}
