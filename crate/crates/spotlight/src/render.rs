//! Heatmap rendering of pathway images as binary PPM, with an optional
//! attention overlay and zoomed, annotated views.

use std::ops::Range;

use spotlight_core::model::{AttentionMask, MaskProjection};
use spotlight_core::pathway::PathwayImage;

use crate::error::{Error, Result};

pub const PADDING: [u8; 3] = [22, 26, 52];
pub const EMPTY: [u8; 3] = [238, 238, 238];
pub const WARM: [u8; 3] = [255, 72, 0];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Zoom {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Zoom {
    /// Parses `r0:r1,c0:c1` (half-open ranges).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("zoom {text:?}: expected r0:r1,c0:c1"));
        let (rows, cols) = text.split_once(',').ok_or_else(bad)?;
        let range = |s: &str| -> Result<Range<usize>> {
            let (a, b) = s.split_once(':').ok_or_else(bad)?;
            let a = a.trim().parse().map_err(|_| bad())?;
            let b = b.trim().parse().map_err(|_| bad())?;
            if a >= b {
                return Err(bad());
            }
            Ok(a..b)
        };
        Ok(Self {
            rows: range(rows)?,
            cols: range(cols)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RenderSpec<'a> {
    pub image: &'a PathwayImage,
    /// Mask over the model input (the image without its condition row).
    pub mask: Option<&'a AttentionMask>,
    /// How the mask maps onto the input; nearest-neighbour when `None`.
    pub projection: Option<&'a MaskProjection>,
    /// Image row excluded from the model input; `None` when the image is
    /// already condition-free.
    pub condition_row: Option<usize>,
    pub zoom: Option<Zoom>,
    /// Pixels per cell side.
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Raster {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    fn fill(&mut self, x0: usize, y0: usize, size: usize, color: [u8; 3]) {
        for y in y0..y0 + size {
            let row = y * self.width;
            self.pixels[row + x0..row + x0 + size].fill(color);
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

fn blend(base: [u8; 3], over: [u8; 3], alpha: f64) -> [u8; 3] {
    let mix = |a: u8, b: u8| (f64::from(a) * (1.0 - alpha) + f64::from(b) * alpha).round() as u8;
    [
        mix(base[0], over[0]),
        mix(base[1], over[1]),
        mix(base[2], over[2]),
    ]
}

fn cell_color(value: u32, max_index: u32, padding: bool) -> [u8; 3] {
    if padding {
        return PADDING;
    }
    if value == 0 {
        return EMPTY;
    }
    // higher indices are darker; 200 … 70
    let t = f64::from(value) / f64::from(max_index.max(1));
    let g = (200.0 - 130.0 * t).round() as u8;
    [g, g, g]
}

/// 3×5 digit glyphs, one bit per pixel, rows top to bottom.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

/// Writes `value` centred in the block at `(x0, y0)` if it fits.
fn annotate(
    raster: &mut Raster,
    x0: usize,
    y0: usize,
    block: usize,
    value: u32,
    background: [u8; 3],
) {
    let text = value.to_string();
    let text_w = text.len() * 4 - 1;
    if text_w + 2 > block || 7 > block {
        return;
    }
    let luma = 0.299 * f64::from(background[0])
        + 0.587 * f64::from(background[1])
        + 0.114 * f64::from(background[2]);
    let ink = if luma > 128.0 {
        [0, 0, 0]
    } else {
        [255, 255, 255]
    };
    let left = x0 + (block - text_w) / 2;
    let top = y0 + (block - 5) / 2;
    for (i, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (dy, bits) in glyph.iter().enumerate() {
            for dx in 0..3 {
                if bits & (0b100 >> dx) != 0 {
                    let x = left + i * 4 + dx;
                    raster.pixels[(top + dy) * raster.width + x] = ink;
                }
            }
        }
    }
}

pub fn render_heatmap(spec: &RenderSpec<'_>) -> Result<Raster> {
    let image = spec.image;
    let (h, w) = (image.height(), image.width());
    if spec.block == 0 {
        return Err(Error::Usage("block size must be positive".into()));
    }
    let zoom = spec.zoom.clone().unwrap_or(Zoom {
        rows: 0..h,
        cols: 0..w,
    });
    if zoom.rows.end > h || zoom.cols.end > w || zoom.rows.is_empty() || zoom.cols.is_empty() {
        return Err(Error::Dimension(format!(
            "zoom {}:{},{}:{} outside {h}×{w} image",
            zoom.rows.start, zoom.rows.end, zoom.cols.start, zoom.cols.end
        )));
    }
    if let Some(c) = spec.condition_row {
        if c >= h {
            return Err(Error::Dimension(format!(
                "condition row {c} outside {h}-row image"
            )));
        }
    }
    let input_rows = h - usize::from(spec.condition_row.is_some());
    let overlay = match spec.mask {
        None => None,
        Some(m) => {
            if m.values.len() != m.rows * m.cols || m.rows == 0 || m.cols == 0 {
                return Err(Error::Dimension(format!(
                    "mask has {} values for a {}×{} grid",
                    m.values.len(),
                    m.rows,
                    m.cols
                )));
            }
            let nearest;
            let projection = match spec.projection {
                Some(p) => p,
                None => {
                    nearest = MaskProjection::nearest(m.rows, m.cols, input_rows, w);
                    &nearest
                }
            };
            if m.rows > input_rows
                || m.cols > w
                || (projection.height, projection.width) != (input_rows, w)
            {
                return Err(Error::Dimension(format!(
                    "{}×{} mask does not fit the {input_rows}×{w} input",
                    m.rows, m.cols
                )));
            }
            let up = projection
                .project(m)
                .map_err(|e| Error::Dimension(e.to_string()))?;
            let max = up.iter().copied().fold(0.0, f64::max);
            Some((up, if max > 0.0 { max } else { 1.0 }))
        }
    };
    let content = image.content_width();
    let max_index = image.max_index();
    let block = spec.block;
    let mut raster = Raster::new(zoom.cols.len() * block, zoom.rows.len() * block);
    for (ry, r) in zoom.rows.clone().enumerate() {
        let input_row = match spec.condition_row {
            Some(c) if r == c => None,
            Some(c) if r > c => Some(r - 1),
            _ => Some(r),
        };
        for (rx, c) in zoom.cols.clone().enumerate() {
            let value = image.get(r, c);
            let mut color = cell_color(value, max_index, c >= content);
            if let (Some((up, max)), Some(ir)) = (&overlay, input_row) {
                let alpha = (up[ir * w + c] / max).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    color = blend(color, WARM, alpha);
                }
            }
            raster.fill(rx * block, ry * block, block, color);
            if value != 0 {
                annotate(&mut raster, rx * block, ry * block, block, value, color);
            }
        }
    }
    Ok(raster)
}
