use std::fmt::Write as _;
use std::path::Path;

use super::{locate, twice_signed_area, Point, MIN_TWICE_AREA};
use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;
pub const NUM_BOUNDARY: usize = 8;

const STANDARD_TEMPLATE: &str = include_str!("../../data/face_template.txt");

/// A named canonical-space polygon (eyes, nose, mouth, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub name: String,
    pub polygon: Vec<Point>,
}

/// Frontal face template: 68 landmarks, 8 image-border control points and a
/// triangulation over all 76 vertices covering the full image rectangle.
///
/// The text format is line based:
///
/// ```text
/// frame <width> <height>
/// point <index> <x> <y>      # 0..67 landmarks, 68..75 boundary points
/// tri <a> <b> <c>            # ordered so that (b - a) x (c - a) > 0
/// region <name> <x0> <y0> <x1> <y1> ...
/// ```
///
/// `#` starts a comment. Boundary points are the four corners and four edge
/// midpoints, clockwise from the top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTemplate {
    pub width: f64,
    pub height: f64,
    pub landmarks: Vec<Point>,
    pub boundary: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub regions: Vec<Region>,
}

fn parse_f64(tok: Option<&str>, line: usize) -> Result<f64> {
    tok.ok_or_else(|| Error::Parse(format!("line {}: missing number", line)))?
        .parse()
        .map_err(|e| Error::Parse(format!("line {}: {}", line, e)))
}

fn parse_usize(tok: Option<&str>, line: usize) -> Result<usize> {
    tok.ok_or_else(|| Error::Parse(format!("line {}: missing index", line)))?
        .parse()
        .map_err(|e| Error::Parse(format!("line {}: {}", line, e)))
}

impl FaceTemplate {
    /// The shipped 96x96 template (142 triangles).
    pub fn standard() -> Self {
        FaceTemplate::parse(STANDARD_TEMPLATE).expect("shipped template is valid")
    }

    /// The eight boundary control points of a `width x height` image.
    pub fn boundary_points(width: f64, height: f64) -> Vec<Point> {
        let (hw, hh) = (width / 2.0, height / 2.0);
        vec![
            Point::new(0.0, 0.0),
            Point::new(hw, 0.0),
            Point::new(width, 0.0),
            Point::new(width, hh),
            Point::new(width, height),
            Point::new(hw, height),
            Point::new(0.0, height),
            Point::new(0.0, hh),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut frame = None;
        let mut points: Vec<Option<Point>> = vec![None; NUM_LANDMARKS + NUM_BOUNDARY];
        let mut triangles = Vec::new();
        let mut regions = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut toks = content.split_whitespace();
            match toks.next() {
                Some("frame") => frame = Some((parse_f64(toks.next(), line)?, parse_f64(toks.next(), line)?)),
                Some("point") => {
                    let idx = parse_usize(toks.next(), line)?;
                    let p = Point::new(parse_f64(toks.next(), line)?, parse_f64(toks.next(), line)?);
                    let slot = points
                        .get_mut(idx)
                        .ok_or_else(|| Error::Parse(format!("line {}: point index {} out of range", line, idx)))?;
                    if slot.replace(p).is_some() {
                        return Err(Error::Parse(format!("line {}: duplicate point {}", line, idx)));
                    }
                }
                Some("tri") => {
                    let t = [
                        parse_usize(toks.next(), line)?,
                        parse_usize(toks.next(), line)?,
                        parse_usize(toks.next(), line)?,
                    ];
                    triangles.push(t);
                }
                Some("region") => {
                    let name = toks
                        .next()
                        .ok_or_else(|| Error::Parse(format!("line {}: region without a name", line)))?
                        .to_string();
                    let nums: Vec<f64> = toks
                        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {}", line, e))))
                        .collect::<Result<_>>()?;
                    if nums.len() < 6 || nums.len() % 2 != 0 {
                        return Err(Error::Parse(format!("line {}: region needs at least 3 x/y pairs", line)));
                    }
                    let polygon = nums.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
                    regions.push(Region { name, polygon });
                }
                Some(other) => return Err(Error::Parse(format!("line {}: unknown record `{}`", line, other))),
                None => {}
            }
        }
        let (width, height) = frame.ok_or_else(|| Error::Parse("missing `frame` record".into()))?;
        let points: Vec<Point> = points
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.ok_or_else(|| Error::Parse(format!("missing point {}", i))))
            .collect::<Result<_>>()?;
        let template = FaceTemplate {
            width,
            height,
            landmarks: points[..NUM_LANDMARKS].to_vec(),
            boundary: points[NUM_LANDMARKS..].to_vec(),
            triangles,
            regions,
        };
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<()> {
        if self.boundary != Self::boundary_points(self.width, self.height) {
            return Err(Error::Parse("boundary points must be the frame corners and edge midpoints".into()));
        }
        let verts = self.vertices();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= verts.len()) {
                return Err(Error::Parse(format!("triangle {} references a missing vertex", i)));
            }
            let area = twice_signed_area(verts[t[0]], verts[t[1]], verts[t[2]]);
            if area < MIN_TWICE_AREA {
                return Err(Error::DegenerateTriangle(area));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "frame {} {}", self.width, self.height).unwrap();
        for (i, p) in self.vertices().iter().enumerate() {
            writeln!(s, "point {} {} {}", i, p.x, p.y).unwrap();
        }
        for t in &self.triangles {
            writeln!(s, "tri {} {} {}", t[0], t[1], t[2]).unwrap();
        }
        for r in &self.regions {
            write!(s, "region {}", r.name).unwrap();
            for p in &r.polygon {
                write!(s, " {} {}", p.x, p.y).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    /// Landmarks followed by boundary points.
    pub fn vertices(&self) -> Vec<Point> {
        let mut v = self.landmarks.clone();
        v.extend_from_slice(&self.boundary);
        v
    }

    /// Full vertex list of a posed face inside a `width x height` image.
    pub fn target_vertices(&self, landmarks: &[Point], width: f64, height: f64) -> Result<Vec<Point>> {
        if landmarks.len() != NUM_LANDMARKS {
            return Err(Error::Shape(format!("expected {} landmarks, got {}", NUM_LANDMARKS, landmarks.len())));
        }
        let mut v = landmarks.to_vec();
        v.extend(Self::boundary_points(width, height));
        Ok(v)
    }

    pub(crate) fn check_vertices(&self, vertices: &[Point]) -> Result<()> {
        if vertices.len() != NUM_LANDMARKS + NUM_BOUNDARY {
            return Err(Error::Shape(format!(
                "expected {} mesh vertices, got {}",
                NUM_LANDMARKS + NUM_BOUNDARY,
                vertices.len()
            )));
        }
        Ok(())
    }

    /// Whether every triangle keeps its orientation on a posed vertex set,
    /// i.e. the warped mesh does not fold over itself.
    pub fn mesh_is_valid(&self, vertices: &[Point]) -> bool {
        vertices.len() == NUM_LANDMARKS + NUM_BOUNDARY
            && self
                .triangles
                .iter()
                .all(|t| twice_signed_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]) > MIN_TWICE_AREA)
    }

    /// Indices of triangles spanned by landmarks only: the face region.
    pub fn face_triangles(&self) -> Vec<usize> {
        self.triangles
            .iter()
            .enumerate()
            .filter(|(_, t)| t.iter().all(|&v| v < NUM_LANDMARKS))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn in_face_region(&self, p: Point) -> bool {
        let face: Vec<[usize; 3]> = self.face_triangles().into_iter().map(|i| self.triangles[i]).collect();
        locate(p, &face, &self.vertices()).is_some()
    }

    /// Axis-aligned bounds `(min, max)` of the landmarks.
    pub fn landmark_bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.landmarks {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        (lo, hi)
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// Landmarks rescaled from the template frame to a `size x size` image.
    pub fn landmarks_for_size(&self, size: f64) -> Vec<Point> {
        let s = size / self.width;
        self.landmarks.iter().map(|p| p.scale(s)).collect()
    }
}
