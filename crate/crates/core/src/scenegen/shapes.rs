use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Shape outline in pixels, relative to the placement center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    Circle { radius: f64 },
    /// Axis-aligned, integer sides.
    Rectangle { width: usize, height: usize },
    /// Vertices in counter-clockwise order (y axis pointing down).
    ConvexPolygon { vertices: Vec<(f64, f64)> },
    /// Segment of length `2 * half_length` at `angle`, dilated by `radius`.
    Capsule { half_length: f64, radius: f64, angle: f64 },
}

impl Geometry {
    pub fn kind(&self) -> &'static str {
        match self {
            Geometry::Circle { .. } => "circle",
            Geometry::Rectangle { .. } => "rectangle",
            Geometry::ConvexPolygon { .. } => "convex_polygon",
            Geometry::Capsule { .. } => "capsule",
        }
    }

    /// Radius of a disc about the center containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Geometry::Circle { radius } => *radius,
            Geometry::Rectangle { width, height } => {
                let (w, h) = (*width as f64, *height as f64);
                (w * w + h * h).sqrt() / 2.0 + 1.0
            }
            Geometry::ConvexPolygon { vertices } => vertices.iter().map(|&(x, y)| x.hypot(y)).fold(0.0, f64::max),
            Geometry::Capsule { half_length, radius, .. } => half_length + radius,
        }
    }

    /// Same outline rotated by `theta` radians (rectangles are unchanged).
    pub fn rotated(&self, theta: f64) -> Geometry {
        let (s, c) = theta.sin_cos();
        match self {
            Geometry::ConvexPolygon { vertices } => Geometry::ConvexPolygon {
                vertices: vertices.iter().map(|&(x, y)| (c * x - s * y, s * x + c * y)).collect(),
            },
            Geometry::Capsule { half_length, radius, angle } => Geometry::Capsule {
                half_length: *half_length,
                radius: *radius,
                angle: angle + theta,
            },
            g => g.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generation(format!("degenerate {}: {m}", self.kind())));
        match self {
            Geometry::Circle { radius } if !(*radius > 0.0) => bad("radius must be positive"),
            Geometry::Rectangle { width, height } if *width == 0 || *height == 0 => bad("zero side"),
            Geometry::ConvexPolygon { vertices } => {
                if vertices.len() < 3 {
                    return bad("fewer than 3 vertices");
                }
                let n = vertices.len();
                let mut area2 = 0.0;
                for i in 0..n {
                    let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                    area2 += a.0 * b.1 - b.0 * a.1;
                }
                if !(area2.abs() > 1e-9) {
                    return bad("zero area");
                }
                Ok(())
            }
            Geometry::Capsule { radius, half_length, .. } if !(*radius > 0.0) || *half_length < 0.0 => {
                bad("radius must be positive")
            }
            _ => Ok(()),
        }
    }

    /// Whether the point `(dx, dy)` relative to the center is inside.
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match self {
            Geometry::Circle { radius } => dx * dx + dy * dy <= radius * radius,
            Geometry::Rectangle { .. } => unreachable!("rectangles are rasterized by index"),
            Geometry::ConvexPolygon { vertices } => {
                let n = vertices.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (a, b) = (vertices[i], vertices[(i + 1) % n]);
                    let cross = (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                    if cross != 0.0 {
                        if sign != 0.0 && cross.signum() != sign {
                            return false;
                        }
                        sign = cross.signum();
                    }
                }
                true
            }
            Geometry::Capsule { half_length, radius, angle } => {
                let (ux, uy) = (angle.cos(), angle.sin());
                let t = (dx * ux + dy * uy).clamp(-half_length, *half_length);
                let (px, py) = (dx - t * ux, dy - t * uy);
                px * px + py * py <= radius * radius
            }
        }
    }
}

/// A shape prototype: outline, appearance, and the split pool it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub geometry: Geometry,
    pub color: [u8; 3],
    pub texture_seed: u64,
    /// Catalog index; identifies the prototype across scenes.
    pub prototype: u64,
    pub pool: Split,
}

/// Rasterizes `geometry` centered on pixel `(cx, cy)` into a
/// `scene_side`-square mask. A pixel is set when its center lies inside the
/// outline; rectangles cover exactly `width * height` pixels starting at
/// `(cx - width / 2, cy - height / 2)`. Parts outside the scene are clipped.
pub fn rasterize_shape(geometry: &Geometry, center: (i64, i64), scene_side: usize) -> Result<Mask> {
    geometry.validate()?;
    let side = scene_side as i64;
    if center.0 < 0 || center.1 < 0 || center.0 >= side || center.1 >= side {
        return Err(Error::Generation(format!("center {center:?} outside a {scene_side}-pixel scene")));
    }
    let mut mask = Mask::empty(scene_side, scene_side);
    if let Geometry::Rectangle { width, height } = geometry {
        let (w, h) = (*width as i64, *height as i64);
        let (x0, y0) = (center.0 - w / 2, center.1 - h / 2);
        for y in y0.max(0)..(y0 + h).min(side) {
            for x in x0.max(0)..(x0 + w).min(side) {
                mask.set(x as usize, y as usize, true);
            }
        }
        return Ok(mask);
    }
    let r = geometry.bounding_radius().ceil() as i64 + 1;
    let (cx, cy) = (center.0 as f64 + 0.5, center.1 as f64 + 0.5);
    for y in (center.1 - r).max(0)..(center.1 + r + 1).min(side) {
        for x in (center.0 - r).max(0)..(center.0 + r + 1).min(side) {
            if geometry.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                mask.set(x as usize, y as usize, true);
            }
        }
    }
    Ok(mask)
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ a) ^ b.rotate_left(32))
}

/// Deterministic catalog of shape prototypes. Pool membership is a pure
/// function of `(seed, prototype)`, so the train and val pools never share a
/// prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCatalog {
    pub seed: u64,
    pub size: u64,
    /// Fraction of prototypes assigned to the train pool.
    pub train_fraction: f64,
}

impl ShapeCatalog {
    pub fn pool_of(&self, prototype: u64) -> Split {
        let h = derive_seed(self.seed, 0x706f_6f6c, prototype);
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.train_fraction {
            Split::Train
        } else {
            Split::Val
        }
    }

    pub fn prototype(&self, id: u64) -> ShapeSpec {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(self.seed, 0x7368_6170, id));
        let geometry = match rng.random_range(0..4u8) {
            0 => Geometry::Circle {
                radius: rng.random_range(14.0..30.0),
            },
            1 => Geometry::Rectangle {
                width: rng.random_range(22..56),
                height: rng.random_range(22..56),
            },
            2 => {
                let (a, b) = (rng.random_range(16.0..34.0), rng.random_range(14.0..30.0));
                let n = rng.random_range(5..9usize);
                let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
                angles.sort_by(f64::total_cmp);
                angles.dedup_by(|x, y| (*x - *y).abs() < 0.2);
                if angles.len() < 3 {
                    angles = vec![0.0, 2.1, 4.2];
                }
                Geometry::ConvexPolygon {
                    vertices: angles.iter().map(|t| (a * t.cos(), b * t.sin())).collect(),
                }
            }
            _ => Geometry::Capsule {
                half_length: rng.random_range(8.0..26.0),
                radius: rng.random_range(7.0..15.0),
                angle: 0.0,
            },
        };
        let color = [0, 1, 2].map(|_| rng.random_range(64..=255u8));
        ShapeSpec {
            geometry,
            color,
            texture_seed: rng.random(),
            prototype: id,
            pool: self.pool_of(id),
        }
    }
}
