//! Analytic shape primitives rasterized at pixel centers.

use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    ConvexPolygon,
}

/// Shape geometry in pixel coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeGeom {
    Ellipse {
        cx: f32,
        cy: f32,
        rx: f32,
        ry: f32,
        angle: f32,
    },
    Rectangle {
        cx: f32,
        cy: f32,
        half_w: f32,
        half_h: f32,
        angle: f32,
    },
    /// Counter-clockwise convex vertex loop.
    ConvexPolygon { points: Vec<[f32; 2]> },
}

impl ShapeGeom {
    pub fn kind(&self) -> ShapeKind {
        match self {
            ShapeGeom::Ellipse { .. } => ShapeKind::Ellipse,
            ShapeGeom::Rectangle { .. } => ShapeKind::Rectangle,
            ShapeGeom::ConvexPolygon { .. } => ShapeKind::ConvexPolygon,
        }
    }

    /// Point-in-shape test.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match self {
            ShapeGeom::Ellipse { cx, cy, rx, ry, angle } => {
                let (dx, dy) = rotate(x - cx, y - cy, -*angle);
                let (nx, ny) = (dx / rx, dy / ry);
                nx * nx + ny * ny <= 1.0
            }
            ShapeGeom::Rectangle {
                cx,
                cy,
                half_w,
                half_h,
                angle,
            } => {
                let (dx, dy) = rotate(x - cx, y - cy, -*angle);
                dx.abs() <= *half_w && dy.abs() <= *half_h
            }
            ShapeGeom::ConvexPolygon { points } => {
                if points.len() < 3 {
                    return false;
                }
                for i in 0..points.len() {
                    let a = points[i];
                    let b = points[(i + 1) % points.len()];
                    let cross = (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
        }
    }

    /// Rasterizes onto an `h x w` canvas, sampling pixel centers; pixels
    /// outside the canvas are clipped away.
    pub fn rasterize(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| {
            self.contains(x as f32 + 0.5, y as f32 + 0.5)
        })
    }
}

fn rotate(x: f32, y: f32, angle: f32) -> (f32, f32) {
    let (s, c) = angle.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Convex hull (monotone chain), counter-clockwise in image coordinates.
pub fn convex_hull(mut pts: Vec<[f32; 2]>) -> Vec<[f32; 2]> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f32; 2], a: [f32; 2], b: [f32; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f32; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f32; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_rectangle_pixel_count() {
        let r = ShapeGeom::Rectangle {
            cx: 24.0,
            cy: 32.0,
            half_w: 12.0,
            half_h: 8.0,
            angle: 0.0,
        };
        let m = r.rasterize(64, 64);
        assert_eq!(m.count(), 24 * 16);
    }

    #[test]
    fn ellipse_area_close_to_analytic() {
        let e = ShapeGeom::Ellipse {
            cx: 64.0,
            cy: 64.0,
            rx: 20.0,
            ry: 12.0,
            angle: 0.7,
        };
        let m = e.rasterize(128, 128);
        let analytic = std::f64::consts::PI * 20.0 * 12.0;
        let got = m.count() as f64;
        assert!((got - analytic).abs() / analytic < 0.03, "{got} vs {analytic}");
    }

    #[test]
    fn hull_is_convex_and_contains_inputs() {
        let pts = vec![
            [0.0, 0.0],
            [4.0, 0.0],
            [4.0, 4.0],
            [0.0, 4.0],
            [2.0, 2.0], // interior
        ];
        let hull = convex_hull(pts);
        assert_eq!(hull.len(), 4);
        let poly = ShapeGeom::ConvexPolygon { points: hull };
        assert!(poly.contains(2.0, 2.0));
        assert!(!poly.contains(5.0, 2.0));
    }

    #[test]
    fn clipping_removes_out_of_canvas_pixels() {
        let e = ShapeGeom::Ellipse {
            cx: 0.0,
            cy: 0.0,
            rx: 10.0,
            ry: 10.0,
            angle: 0.0,
        };
        let m = e.rasterize(32, 32);
        // roughly a quarter disk survives
        let quarter = std::f64::consts::PI * 100.0 / 4.0;
        assert!((m.count() as f64 - quarter).abs() < 12.0);
    }
}
