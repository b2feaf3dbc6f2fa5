//! Procedural world description and per-view rasterization.

use std::f64::consts::PI;

use crate::mask::BinaryMask;

/// Number of category tokens.
pub const VOCAB_SIZE: usize = 32;

pub const CATEGORY_NAMES: [&str; VOCAB_SIZE] = [
    "piano", "knife", "bowl", "cup", "pan", "spoon", "plate", "board", "wrench", "tire", "chain",
    "pump", "bandage", "syringe", "monitor", "glove", "guitar", "violin", "drum", "stand", "ball",
    "hoop", "net", "cone", "cleat", "bottle", "towel", "phone", "book", "bag", "lamp", "box",
];

const OCCLUDER_RGB: [f32; 3] = [0.93, 0.72, 0.58];

/// Flat RGB color of a category. Sixteen hues at two brightness levels.
pub fn category_color(category: usize) -> [f32; 3] {
    let hue = (category % 16) as f64 / 16.0;
    let value = if category < 16 { 0.95 } else { 0.55 };
    hsv_to_rgb(hue, 0.85, value)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// An RGB image, row-major, channels interleaved, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.pixels[(row * self.width + col) * 3 + channel]
    }

    #[inline]
    pub fn set_rgb(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, data: &[u8]) -> Self {
        Self {
            height,
            width,
            pixels: data.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Ellipse { ry: f64, rx: f64, angle: f64 },
    Rect { hy: f64, hx: f64, angle: f64 },
    Triangle { vertices: [(f64, f64); 3] },
}

/// A flat-colored object in world (exo pixel) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub center: (f64, f64),
    pub kind: ShapeKind,
    pub color: [f32; 3],
}

impl Shape {
    pub fn new(center: (f64, f64), radius: f64, category: usize, jitter: [f64; 4]) -> Self {
        let angle = jitter[0] * PI;
        let minor = radius * (0.6 + 0.4 * jitter[1]);
        let kind = match category % 3 {
            0 => ShapeKind::Ellipse {
                ry: radius,
                rx: minor,
                angle,
            },
            1 => ShapeKind::Rect {
                hy: radius * 0.85,
                hx: minor * 0.85,
                angle,
            },
            _ => {
                let mut vertices = [(0.0, 0.0); 3];
                for (k, v) in vertices.iter_mut().enumerate() {
                    let a = angle + k as f64 * 2.0 * PI / 3.0 + (jitter[2 + k.min(1)] - 0.5) * 0.5;
                    *v = (radius * a.sin(), radius * a.cos());
                }
                ShapeKind::Triangle { vertices }
            }
        };
        Self {
            center,
            kind,
            color: category_color(category),
        }
    }

    /// Upper bound on the distance from the center to any point of the shape.
    pub fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Ellipse { ry, rx, .. } => ry.max(rx),
            ShapeKind::Rect { hy, hx, .. } => (hy * hy + hx * hx).sqrt(),
            ShapeKind::Triangle { vertices } => vertices
                .iter()
                .map(|(y, x)| (y * y + x * x).sqrt())
                .fold(0.0, f64::max),
        }
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        match self.kind {
            ShapeKind::Ellipse { ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let u = c * dy + s * dx;
                let v = -s * dy + c * dx;
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            ShapeKind::Rect { hy, hx, angle } => {
                let (s, c) = angle.sin_cos();
                let u = c * dy + s * dx;
                let v = -s * dy + c * dx;
                u.abs() <= hy && v.abs() <= hx
            }
            ShapeKind::Triangle { vertices } => {
                let cross = |a: (f64, f64), b: (f64, f64)| {
                    (b.1 - a.1) * (dy - a.0) - (b.0 - a.0) * (dx - a.1)
                };
                let d0 = cross(vertices[0], vertices[1]);
                let d1 = cross(vertices[1], vertices[2]);
                let d2 = cross(vertices[2], vertices[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }
}

/// Maps ego pixel coordinates to world coordinates: rotation, anisotropic
/// zoom and translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoWarp {
    pub world_center: (f64, f64),
    pub angle: f64,
    /// Ego pixels per world unit along ego rows.
    pub scale_rows: f64,
    /// Ego pixels per world unit along ego columns.
    pub scale_cols: f64,
    pub ego_size: (usize, usize),
}

impl EgoWarp {
    pub fn ego_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        let cy = (self.ego_size.0 as f64 - 1.0) / 2.0;
        let cx = (self.ego_size.1 as f64 - 1.0) / 2.0;
        let u = (row - cy) / self.scale_rows;
        let v = (col - cx) / self.scale_cols;
        let (s, c) = self.angle.sin_cos();
        (
            self.world_center.0 + c * u - s * v,
            self.world_center.1 + s * u + c * v,
        )
    }

    pub fn world_to_ego(&self, y: f64, x: f64) -> (f64, f64) {
        let cy = (self.ego_size.0 as f64 - 1.0) / 2.0;
        let cx = (self.ego_size.1 as f64 - 1.0) / 2.0;
        let (dy, dx) = (y - self.world_center.0, x - self.world_center.1);
        let (s, c) = self.angle.sin_cos();
        let u = c * dy + s * dx;
        let v = -s * dy + c * dx;
        (u * self.scale_rows + cy, v * self.scale_cols + cx)
    }

    /// Radius of the largest world-space disc around `world_center` that is
    /// fully inside the ego frame.
    pub fn inscribed_radius(&self) -> f64 {
        let rows = self.ego_size.0 as f64 / self.scale_rows;
        let cols = self.ego_size.1 as f64 / self.scale_cols;
        rows.min(cols) / 2.0
    }

    /// Nearest-neighbour warp of a world-aligned (exo) mask into the ego frame.
    pub fn warp_exo_mask(&self, exo: &BinaryMask) -> BinaryMask {
        let (h, w) = self.ego_size;
        BinaryMask::from_fn(h, w, |r, c| {
            let (y, x) = self.ego_to_world(r as f64, c as f64);
            let (yr, xr) = (y.round(), x.round());
            yr >= 0.0
                && xr >= 0.0
                && (yr as usize) < exo.height()
                && (xr as usize) < exo.width()
                && exo.get(yr as usize, xr as usize)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum View {
    Ego,
    Exo,
}

/// Everything needed to render both views of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub canvas: (usize, usize),
    pub warp: EgoWarp,
    pub background: [f32; 3],
    pub texture_amplitude: f32,
    pub texture_seed: u64,
    /// Distractors, drawn below the queried objects.
    pub clutter: Vec<Shape>,
    /// Queried objects in z-order (later is on top).
    pub objects: Vec<Shape>,
    pub categories: Vec<usize>,
    /// Per-object occluded view, if any.
    pub occlusion: Vec<Option<View>>,
}

/// A rendered view: the image and the visible mask of every queried object.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub frame: Frame,
    pub object_masks: Vec<BinaryMask>,
}

fn hash2(seed: u64, a: i64, b: i64) -> u64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl World {
    fn view_size(&self, view: View) -> (usize, usize) {
        match view {
            View::Exo => self.canvas,
            View::Ego => self.warp.ego_size,
        }
    }

    fn to_world(&self, view: View, row: f64, col: f64) -> (f64, f64) {
        match view {
            View::Exo => (row, col),
            View::Ego => self.warp.ego_to_world(row, col),
        }
    }

    fn background_at(&self, y: f64, x: f64) -> [f32; 3] {
        let h = hash2(self.texture_seed, y.floor() as i64, x.floor() as i64);
        let n = (h >> 40) as f32 / (1u64 << 24) as f32 - 0.5;
        let a = self.texture_amplitude;
        [
            (self.background[0] + a * n).clamp(0.0, 1.0),
            (self.background[1] + a * n).clamp(0.0, 1.0),
            (self.background[2] + a * n * 0.5).clamp(0.0, 1.0),
        ]
    }

    /// Unoccluded footprint of one queried object rendered alone.
    pub fn render_object_alone(&self, view: View, index: usize) -> BinaryMask {
        let (h, w) = self.view_size(view);
        let shape = &self.objects[index];
        BinaryMask::from_fn(h, w, |r, c| {
            let (y, x) = self.to_world(view, r as f64, c as f64);
            shape.contains(y, x)
        })
    }

    /// Occluder footprint in `view`: bounding boxes (plus one pixel margin) of
    /// every object occluded in that view.
    fn occluder_mask(&self, view: View) -> BinaryMask {
        let (h, w) = self.view_size(view);
        let mut out = BinaryMask::empty(h, w);
        for (k, occ) in self.occlusion.iter().enumerate() {
            if *occ != Some(view) {
                continue;
            }
            if let Some((r0, c0, r1, c1)) = self.render_object_alone(view, k).bounding_box() {
                for r in r0.saturating_sub(1)..=(r1 + 1).min(h - 1) {
                    for c in c0.saturating_sub(1)..=(c1 + 1).min(w - 1) {
                        out.set(r, c, true);
                    }
                }
            }
        }
        out
    }

    pub fn render(&self, view: View) -> RenderedView {
        let (h, w) = self.view_size(view);
        let occluders = self.occluder_mask(view);
        let mut frame = Frame::new(h, w);
        let mut object_masks = vec![BinaryMask::empty(h, w); self.objects.len()];
        for r in 0..h {
            for c in 0..w {
                if occluders.get(r, c) {
                    frame.set_rgb(r, c, OCCLUDER_RGB);
                    continue;
                }
                let (y, x) = self.to_world(view, r as f64, c as f64);
                if let Some(k) = self.objects.iter().rposition(|s| s.contains(y, x)) {
                    frame.set_rgb(r, c, self.objects[k].color);
                    object_masks[k].set(r, c, true);
                } else if let Some(s) = self.clutter.iter().rev().find(|s| s.contains(y, x)) {
                    frame.set_rgb(r, c, s.color);
                } else {
                    frame.set_rgb(r, c, self.background_at(y, x));
                }
            }
        }
        RenderedView {
            frame,
            object_masks,
        }
    }
}
