//! Top-down PPM renders.

use crate::occgrid::OccGrid;

pub type Rgb = [u8; 3];

/// Colors per class (index 0 is the background), plus the waypoint marker.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub classes: Vec<Rgb>,
    pub marker: Rgb,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            classes: vec![
                [0, 0, 0],
                [128, 64, 128],
                [244, 35, 232],
                [70, 70, 70],
                [0, 0, 142],
                [220, 20, 60],
            ],
            marker: [0, 255, 0],
        }
    }
}

impl Palette {
    pub fn color(&self, class: u8) -> Rgb {
        let n = self.classes.len();
        if (class as usize) < n {
            self.classes[class as usize]
        } else {
            // Extra classes cycle through the non-background colors.
            self.classes[1 + (class as usize - 1) % (n - 1)]
        }
    }
}

/// Pixel `(row, col)` of cell `(h, w)`: forward (+h) points up the image and
/// left (+w) points left, so row = H−1−h and col = W−1−w.
pub fn cell_to_pixel(dims: [usize; 3], h: usize, w: usize) -> (usize, usize) {
    (dims[0] - 1 - h, dims[1] - 1 - w)
}

/// A W×H (times `scale`) P6 image of the highest occupied voxel per column;
/// `waypoints` (meters, ego frame) are drawn as single marker cells.
pub fn render_bev(grid: &OccGrid, waypoints: &[[f64; 2]], palette: &Palette, scale: usize) -> Vec<u8> {
    let [hh, ww, dd] = grid.dims();
    let mut cells = vec![palette.color(0); hh * ww];
    for h in 0..hh {
        for w in 0..ww {
            let top = (0..dd).rev().map(|d| grid.get(h, w, d)).find(|&c| c != 0).unwrap_or(0);
            let (r, c) = cell_to_pixel(grid.dims(), h, w);
            cells[r * ww + c] = palette.color(top);
        }
    }
    let vs = grid.voxel_size();
    for p in waypoints {
        let h = (p[0] / vs + hh as f64 / 2.0).floor();
        let w = (p[1] / vs + ww as f64 / 2.0).floor();
        if h >= 0.0 && w >= 0.0 && (h as usize) < hh && (w as usize) < ww {
            let (r, c) = cell_to_pixel(grid.dims(), h as usize, w as usize);
            cells[r * ww + c] = palette.marker;
        }
    }
    let s = scale.max(1);
    let (width, height) = (ww * s, hh * s);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(width * height * 3);
    for r in 0..height {
        for c in 0..width {
            out.extend_from_slice(&cells[(r / s) * ww + c / s]);
        }
    }
    out
}
