//! Face-template geometry: barycentric anchors, piecewise-affine warping,
//! occluder placement and rasterization.
//!
//! Coordinates are continuous pixel units with the origin at the top-left
//! image corner; pixel `(row, col)` has its center at `(col + 0.5, row + 0.5)`.

mod occluder;
mod template;

pub use occluder::{
    place_occluder, quad_contains, rasterize_quad, render_occlusion, Fill, OccluderPlacement, OccluderSpec, Placement,
    RenderOutcome, SizeMode, DYNAMIC_SIDE_RANGE, NOISE_MEAN_FRACTION, NOISE_STD_FRACTION, STATIC_OCCLUDER_SIZE,
};
pub use template::{FaceTemplate, Region, NUM_BOUNDARY, NUM_LANDMARKS};

use crate::error::{Error, Result};

/// Tolerance on barycentric coordinates when testing containment.
pub const INSIDE_TOLERANCE: f64 = -1e-9;

/// Triangles with twice-area below this are rejected.
pub const MIN_TWICE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

fn cross(a: Point, b: Point) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Twice the signed area of triangle `abc`.
pub fn twice_signed_area(a: Point, b: Point, c: Point) -> f64 {
    cross(b - a, c - a)
}

/// Barycentric coordinates `(alpha, beta, gamma)` of `p` in triangle `abc`.
pub fn barycentric_coords(p: Point, a: Point, b: Point, c: Point) -> Result<[f64; 3]> {
    let d = twice_signed_area(a, b, c);
    if d.abs() < MIN_TWICE_AREA {
        return Err(Error::DegenerateTriangle(d));
    }
    let beta = cross(p - a, c - a) / d;
    let gamma = cross(b - a, p - a) / d;
    Ok([1.0 - beta - gamma, beta, gamma])
}

pub fn from_barycentric(coords: [f64; 3], a: Point, b: Point, c: Point) -> Point {
    Point::new(
        coords[0] * a.x + coords[1] * b.x + coords[2] * c.x,
        coords[0] * a.y + coords[1] * b.y + coords[2] * c.y,
    )
}

/// A point expressed relative to one triangle of a mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarycentricAnchor {
    pub triangle: usize,
    pub coords: [f64; 3],
    /// The located point and its triangle's corners on the source mesh.
    pub source: Point,
    pub source_triangle: [Point; 3],
}

impl BarycentricAnchor {
    /// Evaluate the anchor on a mesh whose vertex positions are `vertices`.
    /// A triangle whose corners did not move maps the source point to itself
    /// exactly, without rounding through the coordinates.
    pub fn resolve(&self, triangles: &[[usize; 3]], vertices: &[Point]) -> Point {
        let [a, b, c] = triangles[self.triangle];
        let corners = [vertices[a], vertices[b], vertices[c]];
        if corners == self.source_triangle {
            return self.source;
        }
        from_barycentric(self.coords, corners[0], corners[1], corners[2])
    }
}

/// First triangle (lowest index) containing `p`, with its coordinates.
pub fn locate(p: Point, triangles: &[[usize; 3]], vertices: &[Point]) -> Option<BarycentricAnchor> {
    triangles.iter().enumerate().find_map(|(i, &[a, b, c])| {
        let coords = barycentric_coords(p, vertices[a], vertices[b], vertices[c]).ok()?;
        coords
            .iter()
            .all(|&v| v >= INSIDE_TOLERANCE)
            .then_some(BarycentricAnchor {
                triangle: i,
                coords,
                source: p,
                source_triangle: [vertices[a], vertices[b], vertices[c]],
            })
    })
}

/// Anchor a template-space point to the extended template mesh.
pub fn anchor_point(p: Point, template: &FaceTemplate) -> Result<BarycentricAnchor> {
    if !(0.0..=template.width).contains(&p.x) || !(0.0..=template.height).contains(&p.y) {
        return Err(Error::OutsideMesh { x: p.x, y: p.y });
    }
    locate(p, &template.triangles, &template.vertices()).ok_or(Error::OutsideMesh { x: p.x, y: p.y })
}

/// Transport anchors onto a target face given its full vertex list
/// (68 landmarks followed by the target image's boundary points).
pub fn warp_anchors(
    anchors: &[BarycentricAnchor; 4],
    template: &FaceTemplate,
    target_vertices: &[Point],
) -> Result<[Point; 4]> {
    template.check_vertices(target_vertices)?;
    Ok(anchors.map(|a| a.resolve(&template.triangles, target_vertices)))
}

/// Map a point of a posed face back to canonical template space.
pub fn to_canonical(p: Point, target_vertices: &[Point], template: &FaceTemplate) -> Result<Point> {
    template.check_vertices(target_vertices)?;
    let anchor = locate(p, &template.triangles, target_vertices).ok_or(Error::OutsideMesh { x: p.x, y: p.y })?;
    Ok(anchor.resolve(&template.triangles, &template.vertices()))
}

/// Map a canonical template point onto a posed face.
pub fn from_canonical(p: Point, target_vertices: &[Point], template: &FaceTemplate) -> Result<Point> {
    template.check_vertices(target_vertices)?;
    let anchor = anchor_point(p, template)?;
    Ok(anchor.resolve(&template.triangles, target_vertices))
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: Point, polygon: &[Point]) -> bool {
    let n = polygon.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| cross(polygon[i], polygon[(i + 1) % n]))
        .sum::<f64>()
        .abs()
        / 2.0
}
