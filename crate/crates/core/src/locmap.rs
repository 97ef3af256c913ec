//! Localization maps and their conversion to pixel-space predictions:
//! thresholding, connected components, bounding boxes, rendering.

use crate::tensor::bilinear_resize_plane;

/// Axis-aligned box in pixel coordinates, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        debug_assert!(x1 > x0 && y1 > y0, "degenerate box {x0},{y0},{x1},{y1}");
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Horizontal mirror within an image of width `w`.
    pub fn hflip(&self, w: usize) -> Self {
        Self {
            x0: w - self.x1,
            y0: self.y0,
            x1: w - self.x0,
            y1: self.y1,
        }
    }
}

/// Foreground-probability grid with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct LocMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

impl LocMap {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), h * w);
        Self { h, w, values }
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Self {
        Self {
            h,
            w,
            values: vec![v; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.w + x]
    }

    /// Bilinear upsample (align-corners = false) to the given size.
    pub fn resize(&self, out_h: usize, out_w: usize) -> LocMap {
        let mut out = vec![0.0f32; out_h * out_w];
        bilinear_resize_plane(&self.values, self.h, self.w, out_h, out_w, &mut out);
        LocMap::new(out_h, out_w, out)
    }
}

/// Binary mask over a pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// Tight bounding box of the set pixels, if any.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.data[y * self.w + x] {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1, y1))
    }
}

/// `mask(i,j) = 1` iff `map(i,j) >= tau`.
pub fn threshold_map(map: &LocMap, tau: f32) -> Mask {
    Mask::new(map.h, map.w, map.values.iter().map(|&v| v >= tau).collect())
}

/// Tight box of the 8-connected component with the most pixels; ties go to
/// the component whose first pixel comes earliest in row-major scan order.
pub fn largest_component_bbox(mask: &Mask) -> Option<BBox> {
    let (h, w) = (mask.h, mask.w);
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, usize, BBox)> = None; // (count, first_idx, box)
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut count = 0usize;
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
        while let Some(idx) = stack.pop() {
            count += 1;
            let (y, x) = (idx / w, idx % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if mask.data[nidx] && !visited[nidx] {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let candidate = (count, start, BBox::new(x0, y0, x1, y1));
        best = match best {
            None => Some(candidate),
            Some(cur) if count > cur.0 => Some(candidate),
            Some(cur) => Some(cur), // earlier scan order wins ties by construction
        };
    }
    best.map(|(_, _, b)| b)
}

/// Upsample to image resolution, threshold, take the largest component box.
pub fn extract_box(map: &LocMap, tau: f32, image_h: usize, image_w: usize) -> Option<BBox> {
    let up = if map.h == image_h && map.w == image_w {
        map.clone()
    } else {
        map.resize(image_h, image_w)
    };
    largest_component_bbox(&threshold_map(&up, tau))
}

/// RGB image with channels interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>, // h * w * 3
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), h * w * 3);
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

const GT_COLOR: [f32; 3] = [1.0, 0.0, 0.0]; // ground truth in red
const PRED_COLOR: [f32; 3] = [0.0, 1.0, 0.0]; // prediction in green

/// Blends the upsampled map 50% onto the image and draws the ground-truth
/// box in red and the predicted box in green.
pub fn render_overlay(image: &Image, map: &LocMap, pred: Option<BBox>, gt: Option<BBox>) -> Image {
    let up = if map.h == image.h && map.w == image.w {
        map.clone()
    } else {
        map.resize(image.h, image.w)
    };
    let mut out = image.clone();
    for y in 0..image.h {
        for x in 0..image.w {
            let m = up.at(y, x).clamp(0.0, 1.0);
            let p = image.pixel(y, x);
            out.set_pixel(y, x, [0.5 * p[0] + 0.5 * m, 0.5 * p[1] + 0.5 * m, 0.5 * p[2] + 0.5 * m]);
        }
    }
    if let Some(b) = gt {
        draw_box(&mut out, b, GT_COLOR);
    }
    if let Some(b) = pred {
        draw_box(&mut out, b, PRED_COLOR);
    }
    out
}

fn draw_box(image: &mut Image, b: BBox, color: [f32; 3]) {
    let x1 = b.x1.min(image.w);
    let y1 = b.y1.min(image.h);
    if b.x0 >= x1 || b.y0 >= y1 {
        return;
    }
    for x in b.x0..x1 {
        image.set_pixel(b.y0, x, color);
        image.set_pixel(y1 - 1, x, color);
    }
    for y in b.y0..y1 {
        image.set_pixel(y, b.x0, color);
        image.set_pixel(y, x1 - 1, color);
    }
}
