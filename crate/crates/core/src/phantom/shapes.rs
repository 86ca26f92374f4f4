use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::PhantomError;
use crate::forward::ConductivityImage;

/// Background conductivity of the sensor, S/m.
pub const BACKGROUND: f64 = 1.0;

/// Sampling range of the inclusion conductivity, S/m.
pub const INCLUSION_RANGE: (f64, f64) = (0.1, 0.9);

/// Characteristic shape size as a fraction of the domain width.
pub const SIZE_RANGE: (f64, f64) = (0.1, 0.3);

/// Clearance between any shape and the domain boundary, in pixels.
pub const MARGIN_PX: f64 = 2.0;

pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    SingleCircle,
    DoubleCircle,
    LShape,
    IsoscelesTriangle,
    Rectangle,
    ConcentricRing,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::SingleCircle,
        ShapeClass::DoubleCircle,
        ShapeClass::LShape,
        ShapeClass::IsoscelesTriangle,
        ShapeClass::Rectangle,
        ShapeClass::ConcentricRing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::SingleCircle => "single_circle",
            ShapeClass::DoubleCircle => "double_circle",
            ShapeClass::LShape => "l_shape",
            ShapeClass::IsoscelesTriangle => "isosceles_triangle",
            ShapeClass::Rectangle => "rectangle",
            ShapeClass::ConcentricRing => "concentric_ring",
        }
    }

    /// Stable numeric code used in dataset containers.
    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = PhantomError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| PhantomError::InvalidConfig(format!("unknown shape class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

impl Circle {
    fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.r * self.r
    }

    fn inside_box(&self, lo: f64, hi: f64) -> bool {
        self.cx - self.r >= lo
            && self.cx + self.r <= hi
            && self.cy - self.r >= lo
            && self.cy + self.r <= hi
    }
}

/// Geometry in unit-square coordinates; `x` runs along columns, `y` along
/// rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Circle(Circle),
    TwoCircles(Circle, Circle),
    /// Simple polygon, possibly non-convex.
    Polygon(Vec<(f64, f64)>),
    /// Annulus `inner < |p − c| ≤ outer`.
    Ring {
        cx: f64,
        cy: f64,
        outer: f64,
        inner: f64,
    },
}

impl Geometry {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Geometry::Circle(c) => c.contains(x, y),
            Geometry::TwoCircles(a, b) => a.contains(x, y) || b.contains(x, y),
            Geometry::Polygon(v) => point_in_polygon(v, x, y),
            Geometry::Ring {
                cx,
                cy,
                outer,
                inner,
            } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 <= outer * outer && d2 > inner * inner
            }
        }
    }

    /// True if the shape lies inside `[lo, hi]²`.
    pub fn inside_box(&self, lo: f64, hi: f64) -> bool {
        match self {
            Geometry::Circle(c) => c.inside_box(lo, hi),
            Geometry::TwoCircles(a, b) => a.inside_box(lo, hi) && b.inside_box(lo, hi),
            Geometry::Polygon(v) => v
                .iter()
                .all(|&(x, y)| x >= lo && x <= hi && y >= lo && y <= hi),
            Geometry::Ring { cx, cy, outer, .. } => Circle {
                cx: *cx,
                cy: *cy,
                r: *outer,
            }
            .inside_box(lo, hi),
        }
    }
}

/// Even-odd ray casting.
fn point_in_polygon(v: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (xi, yi) = v[i];
        let (xj, yj) = v[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub class: ShapeClass,
    pub geometry: Geometry,
    pub conductivity: f64,
}

impl ShapeSpec {
    /// Shape kept at least [`MARGIN_PX`] pixels from every side.
    pub fn fits(&self, grid_n: usize) -> bool {
        let m = MARGIN_PX / grid_n as f64;
        self.geometry.inside_box(m, 1.0 - m)
    }

    /// Pixel-centre rasterisation over the background.
    pub fn rasterize(&self, grid_n: usize) -> ConductivityImage {
        let mut img = ConductivityImage::uniform(grid_n, BACKGROUND);
        let h = 1.0 / grid_n as f64;
        for r in 0..grid_n {
            let y = (r as f64 + 0.5) * h;
            for c in 0..grid_n {
                let x = (c as f64 + 0.5) * h;
                if self.geometry.contains(x, y) {
                    img.values_mut()[r * grid_n + c] = self.conductivity;
                }
            }
        }
        img
    }
}

fn rotate_about(points: &mut [(f64, f64)], cx: f64, cy: f64, theta: f64) {
    let (s, c) = theta.sin_cos();
    for p in points.iter_mut() {
        let (x, y) = *p;
        *p = (cx + c * x - s * y, cy + s * x + c * y);
    }
}

/// One proposal; `None` when the draw violates a class constraint.
fn draw_geometry<R: Rng + ?Sized>(
    rng: &mut R,
    class: ShapeClass,
    grid_n: usize,
) -> Option<Geometry> {
    let size = rng.random_range(SIZE_RANGE.0..=SIZE_RANGE.1);
    let cx = rng.random_range(0.0..1.0);
    let cy = rng.random_range(0.0..1.0);
    let theta = rng.random_range(0.0..2.0 * PI);
    let g = match class {
        ShapeClass::SingleCircle => Geometry::Circle(Circle { cx, cy, r: size }),
        ShapeClass::DoubleCircle => {
            let r1 = rng.random_range(0.1..=0.2);
            let r2 = rng.random_range(0.1..=0.2);
            let (x2, y2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
            let a = Circle { cx, cy, r: r1 };
            let b = Circle {
                cx: x2,
                cy: y2,
                r: r2,
            };
            let gap = ((cx - x2).powi(2) + (cy - y2).powi(2)).sqrt();
            if gap < r1 + r2 + MARGIN_PX / grid_n as f64 {
                return None;
            }
            Geometry::TwoCircles(a, b)
        }
        ShapeClass::IsoscelesTriangle => {
            let leg = 2.0 * size;
            // right isosceles, centroid at the origin
            let mut v = vec![(0.0, 0.0), (leg, 0.0), (0.0, leg)];
            v.iter_mut()
                .for_each(|p| *p = (p.0 - leg / 3.0, p.1 - leg / 3.0));
            rotate_about(&mut v, cx, cy, theta);
            Geometry::Polygon(v)
        }
        ShapeClass::Rectangle => {
            let w = 2.0 * size;
            let h = w * rng.random_range(0.4..=1.0);
            let mut v = vec![
                (-w / 2.0, -h / 2.0),
                (w / 2.0, -h / 2.0),
                (w / 2.0, h / 2.0),
                (-w / 2.0, h / 2.0),
            ];
            rotate_about(&mut v, cx, cy, theta);
            Geometry::Polygon(v)
        }
        ShapeClass::LShape => {
            let l = 2.0 * size;
            let arm = l * rng.random_range(0.35..=0.5);
            let mut v = vec![
                (0.0, 0.0),
                (l, 0.0),
                (l, arm),
                (arm, arm),
                (arm, l),
                (0.0, l),
            ];
            v.iter_mut()
                .for_each(|p| *p = (p.0 - l / 2.0, p.1 - l / 2.0));
            rotate_about(&mut v, cx, cy, theta);
            Geometry::Polygon(v)
        }
        ShapeClass::ConcentricRing => {
            let outer = rng.random_range(0.15..=0.3);
            let inner = outer * rng.random_range(0.4..=0.6);
            Geometry::Ring {
                cx,
                cy,
                outer,
                inner,
            }
        }
    };
    Some(g)
}

/// Draws a random shape of `class` that fits the domain with margin and
/// covers at least one pixel centre.
pub fn sample_shape<R: Rng + ?Sized>(
    rng: &mut R,
    class: ShapeClass,
    grid_n: usize,
) -> Result<ShapeSpec, PhantomError> {
    if grid_n < 16 {
        return Err(PhantomError::InvalidConfig(format!(
            "grid_n must be at least 16, got {grid_n}"
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let Some(geometry) = draw_geometry(rng, class, grid_n) else {
            continue;
        };
        let conductivity = rng.random_range(INCLUSION_RANGE.0..=INCLUSION_RANGE.1);
        let spec = ShapeSpec {
            class,
            geometry,
            conductivity,
        };
        if spec.fits(grid_n)
            && spec
                .rasterize(grid_n)
                .values()
                .iter()
                .any(|&v| v != BACKGROUND)
        {
            return Ok(spec);
        }
    }
    Err(PhantomError::Generation {
        class,
        attempts: MAX_ATTEMPTS,
    })
}

/// Random phantom of the given class on an `grid_n × grid_n` image.
pub fn sample_phantom<R: Rng + ?Sized>(
    rng: &mut R,
    class: ShapeClass,
    grid_n: usize,
) -> Result<ConductivityImage, PhantomError> {
    Ok(sample_shape(rng, class, grid_n)?.rasterize(grid_n))
}
