use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{anchor_point, barycentric_coords, polygon_area, BarycentricAnchor, FaceTemplate, Point, INSIDE_TOLERANCE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width and height of the static occluder, in template pixels.
pub const STATIC_OCCLUDER_SIZE: (f64, f64) = (32.0, 12.0);

/// Dynamic occluder sides are drawn from this closed range.
pub const DYNAMIC_SIDE_RANGE: (f64, f64) = (12.0, 32.0);

/// Noise fill mean and standard deviation as fractions of the value range.
pub const NOISE_MEAN_FRACTION: f64 = 0.5;
pub const NOISE_STD_FRACTION: f64 = 0.25;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    Black,
    GaussianNoise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeMode {
    /// 32x12 template pixels.
    Static,
    /// Width and height drawn independently from `[12, 32]`.
    Dynamic,
    /// Explicit width and height, mainly for analysis runs.
    Fixed { width: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Uniform over positions keeping all four corners on the face.
    Random,
    /// Rectangle centered at a fixed template-space point.
    Centered { x: f64, y: f64 },
}

/// A semantic occluder defined in template space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderSpec {
    pub fill: Fill,
    pub size: SizeMode,
    pub placement: Placement,
    pub rng_seed: u64,
}

impl Default for OccluderSpec {
    fn default() -> Self {
        OccluderSpec {
            fill: Fill::Black,
            size: SizeMode::Static,
            placement: Placement::Random,
            rng_seed: 0,
        }
    }
}

impl OccluderSpec {
    /// Generator for the `stream`-th placement drawn from this spec.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(stream);
        rng
    }
}

/// A placed rectangle: its template-space corners and their anchors, both in
/// clockwise order from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccluderPlacement {
    pub corners: [Point; 4],
    pub anchors: [BarycentricAnchor; 4],
    pub width: f64,
    pub height: f64,
}

fn sample_size(mode: SizeMode, rng: &mut impl Rng) -> Result<(f64, f64)> {
    match mode {
        SizeMode::Static => Ok(STATIC_OCCLUDER_SIZE),
        SizeMode::Dynamic => {
            let (lo, hi) = DYNAMIC_SIDE_RANGE;
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            Ok((w, h))
        }
        SizeMode::Fixed { width, height } => {
            if !(width >= 0.0 && height >= 0.0) {
                return Err(Error::InvalidArgument(format!("occluder size {}x{}", width, height)));
            }
            Ok((width, height))
        }
    }
}

fn rect_corners(x0: f64, y0: f64, w: f64, h: f64) -> [Point; 4] {
    [
        Point::new(x0, y0),
        Point::new(x0 + w, y0),
        Point::new(x0 + w, y0 + h),
        Point::new(x0, y0 + h),
    ]
}

/// Place a rectangle on the template face. Random placements retry up to 100
/// times until all corners fall inside the landmark-only part of the mesh;
/// centered placements are accepted as long as they stay inside the frame.
pub fn place_occluder(spec: &OccluderSpec, template: &FaceTemplate, rng: &mut impl Rng) -> Result<OccluderPlacement> {
    let (w, h) = sample_size(spec.size, rng)?;
    let anchor_all = |corners: [Point; 4]| -> Result<[BarycentricAnchor; 4]> {
        Ok([
            anchor_point(corners[0], template)?,
            anchor_point(corners[1], template)?,
            anchor_point(corners[2], template)?,
            anchor_point(corners[3], template)?,
        ])
    };
    match spec.placement {
        Placement::Centered { x, y } => {
            let corners = rect_corners(x - w / 2.0, y - h / 2.0, w, h);
            let anchors = anchor_all(corners).map_err(|_| Error::Placement(1))?;
            Ok(OccluderPlacement { corners, anchors, width: w, height: h })
        }
        Placement::Random => {
            let (lo, hi) = template.landmark_bounds();
            if hi.x - lo.x < w || hi.y - lo.y < h {
                return Err(Error::Placement(0));
            }
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let x0 = rng.random_range(lo.x..=hi.x - w);
                let y0 = rng.random_range(lo.y..=hi.y - h);
                let corners = rect_corners(x0, y0, w, h);
                if corners.iter().all(|&c| template.in_face_region(c)) {
                    let anchors = anchor_all(corners)?;
                    return Ok(OccluderPlacement { corners, anchors, width: w, height: h });
                }
            }
            Err(Error::Placement(MAX_PLACEMENT_ATTEMPTS))
        }
    }
}

/// Result of rasterizing an occluder into an image.
#[derive(Debug, Clone)]
pub struct RenderOutcome {
    pub image: Tensor,
    /// Row-major `H*W` flags of replaced pixels.
    pub occluded: Vec<bool>,
    pub occluded_pixels: usize,
    /// Set when the quad had zero area and the image was returned unchanged.
    pub degenerate: bool,
}

fn inside_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    match barycentric_coords(p, a, b, c) {
        Ok(k) => k.iter().all(|&v| v >= INSIDE_TOLERANCE),
        Err(_) => false,
    }
}

/// Whether the pixel center `p` falls inside the quad split along v0-v2.
pub fn quad_contains(quad: &[Point; 4], p: Point) -> bool {
    inside_triangle(p, quad[0], quad[1], quad[2]) || inside_triangle(p, quad[0], quad[2], quad[3])
}

/// Row-major `H*W` coverage mask of a quad (pixel-center rule).
pub fn rasterize_quad(quad: &[Point; 4], height: usize, width: usize) -> Vec<bool> {
    let clamp = |p: Point| Point::new(p.x.clamp(0.0, width as f64), p.y.clamp(0.0, height as f64));
    let q = quad.map(clamp);
    let mut mask = vec![false; height * width];
    if width == 0 || height == 0 {
        return mask;
    }
    let min_x = q.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = q.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = q.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = q.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let c0 = (min_x - 0.5).floor().max(0.0) as usize;
    let c1 = ((max_x - 0.5).ceil().max(0.0) as usize).min(width.saturating_sub(1));
    let r0 = (min_y - 0.5).floor().max(0.0) as usize;
    let r1 = ((max_y - 0.5).ceil().max(0.0) as usize).min(height.saturating_sub(1));
    for r in r0..=r1 {
        for c in c0..=c1 {
            if quad_contains(&q, Point::new(c as f64 + 0.5, r as f64 + 0.5)) {
                mask[r * width + c] = true;
            }
        }
    }
    mask
}

/// Replace the pixels of `image` covered by `quad`. Values are assumed to lie
/// in `[0, max_value]`; noise is drawn once per pixel and shared by channels.
pub fn render_occlusion(
    image: &Tensor,
    quad: &[Point; 4],
    fill: Fill,
    max_value: f64,
    rng: &mut impl Rng,
) -> Result<RenderOutcome> {
    let (channels, height, width) = image.chw()?;
    if polygon_area(quad) < 1e-12 {
        log::warn!("zero-area occluder quad; image left unchanged");
        return Ok(RenderOutcome {
            image: image.clone(),
            occluded: vec![false; height * width],
            occluded_pixels: 0,
            degenerate: true,
        });
    }
    let occluded = rasterize_quad(quad, height, width);
    let mut out = image.clone();
    let noise = Normal::new(NOISE_MEAN_FRACTION * max_value, NOISE_STD_FRACTION * max_value)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let plane = height * width;
    let values = out.values_mut();
    let mut count = 0;
    for (i, _) in occluded.iter().enumerate().filter(|(_, &m)| m) {
        count += 1;
        let v = match fill {
            Fill::Black => 0.0,
            Fill::GaussianNoise => noise.sample(rng).clamp(0.0, max_value),
        };
        for ch in 0..channels {
            values[ch * plane + i] = v;
        }
    }
    Ok(RenderOutcome { image: out, occluded, occluded_pixels: count, degenerate: false })
}

impl fmt::Display for Fill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fill::Black => "black",
            Fill::GaussianNoise => "gaussian",
        })
    }
}

impl FromStr for Fill {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "black" => Ok(Fill::Black),
            "gaussian" | "gaussian_noise" | "noise" => Ok(Fill::GaussianNoise),
            other => Err(Error::Parse(format!("unknown fill `{}`", other))),
        }
    }
}

impl fmt::Display for SizeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeMode::Static => f.write_str("static"),
            SizeMode::Dynamic => f.write_str("dynamic"),
            SizeMode::Fixed { width, height } => write!(f, "fixed:{}x{}", width, height),
        }
    }
}

impl FromStr for SizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "static" => return Ok(SizeMode::Static),
            "dynamic" => return Ok(SizeMode::Dynamic),
            _ => {}
        }
        let dims = s
            .strip_prefix("fixed:")
            .ok_or_else(|| Error::Parse(format!("unknown size mode `{}`", s)))?;
        let (w, h) = dims
            .split_once('x')
            .ok_or_else(|| Error::Parse(format!("expected fixed:<w>x<h>, got `{}`", s)))?;
        let parse = |t: &str| t.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {}", s, e)));
        Ok(SizeMode::Fixed { width: parse(w)?, height: parse(h)? })
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Random => f.write_str("random"),
            Placement::Centered { x, y } => write!(f, "at:{},{}", x, y),
        }
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "random" {
            return Ok(Placement::Random);
        }
        let (x, y) = s
            .strip_prefix("at:")
            .and_then(|r| r.split_once(','))
            .ok_or_else(|| Error::Parse(format!("expected `random` or `at:<x>,<y>`, got `{}`", s)))?;
        let parse = |t: &str| t.parse::<f64>().map_err(|e| Error::Parse(format!("{}: {}", s, e)));
        Ok(Placement::Centered { x: parse(x)?, y: parse(y)? })
    }
}
