//! Procedural synthetic faces with exact landmarks.
//!
//! Each identity perturbs the frontal template (eye spacing and size, brow
//! height, nose length and width, mouth width and height, jaw width) and fixes
//! per-part gray levels. A sample applies a 2D pose (rotation, anisotropic
//! scale, translation about the image center) to the identity's landmarks and
//! renders the face by inverse-mapping supersampled pixel positions back into
//! template space. Identity is thus carried by part geometry and part tone.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, Error, Result};
use crate::geometry::{point_in_polygon, FaceTemplate, Point, NUM_LANDMARKS};
use crate::tensor::Tensor;

/// Hard limits on pose parameters accepted by [`render_face`].
pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);

/// Largest allowed per-pixel noise standard deviation.
pub const MAX_NOISE_STD: f64 = 0.02;

const JAW: std::ops::Range<usize> = 0..17;
const LEFT_BROW: std::ops::Range<usize> = 17..22;
const RIGHT_BROW: std::ops::Range<usize> = 22..27;
const NOSE_BRIDGE: std::ops::Range<usize> = 27..31;
const NOSE_BASE: std::ops::Range<usize> = 31..36;
const LEFT_EYE: std::ops::Range<usize> = 36..42;
const RIGHT_EYE: std::ops::Range<usize> = 42..48;
const OUTER_MOUTH: std::ops::Range<usize> = 48..60;

/// Half widths of stroked parts, in template pixels.
const BROW_HALF_WIDTH: f64 = 2.2;
const NOSE_HALF_WIDTH: f64 = 1.8;

/// Per-identity shape offsets and part gray levels. Offsets are in template
/// pixels; every field is drawn uniformly from the range in [`Self::BOUNDS`].
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub eye_scale: f64,
    pub brow_height: f64,
    pub nose_length: f64,
    pub nose_width: f64,
    pub mouth_width: f64,
    pub mouth_height: f64,
    pub jaw_width: f64,
    pub skin: f64,
    pub eye_tone: f64,
    pub brow_tone: f64,
    pub nose_tone: f64,
    pub mouth_tone: f64,
}

impl IdentityParams {
    /// `(name, low, high)` for every field, in declaration order.
    pub const BOUNDS: [(&'static str, f64, f64); 14] = [
        ("eye_spacing", -4.0, 4.0),
        ("eye_height", -2.5, 2.5),
        ("eye_scale", 0.8, 1.35),
        ("brow_height", -2.5, 2.0),
        ("nose_length", -4.0, 2.5),
        ("nose_width", 0.75, 1.4),
        ("mouth_width", 0.75, 1.3),
        ("mouth_height", -2.0, 3.0),
        ("jaw_width", 0.9, 1.08),
        ("skin", 0.55, 0.85),
        ("eye_tone", 0.0, 0.3),
        ("brow_tone", 0.05, 0.4),
        ("nose_tone", 0.25, 0.5),
        ("mouth_tone", 0.1, 0.45),
    ];

    fn from_array(v: [f64; 14]) -> Self {
        IdentityParams {
            eye_spacing: v[0],
            eye_height: v[1],
            eye_scale: v[2],
            brow_height: v[3],
            nose_length: v[4],
            nose_width: v[5],
            mouth_width: v[6],
            mouth_height: v[7],
            jaw_width: v[8],
            skin: v[9],
            eye_tone: v[10],
            brow_tone: v[11],
            nose_tone: v[12],
            mouth_tone: v[13],
        }
    }

    pub fn as_array(&self) -> [f64; 14] {
        [
            self.eye_spacing,
            self.eye_height,
            self.eye_scale,
            self.brow_height,
            self.nose_length,
            self.nose_width,
            self.mouth_width,
            self.mouth_height,
            self.jaw_width,
            self.skin,
            self.eye_tone,
            self.brow_tone,
            self.nose_tone,
            self.mouth_tone,
        ]
    }

    /// The neutral identity: the template itself with mid-range tones.
    pub fn neutral() -> Self {
        let mut v = [0.0; 14];
        for (slot, (name, lo, hi)) in v.iter_mut().zip(Self::BOUNDS) {
            *slot = if name.ends_with("scale") || name.ends_with("width") && lo > 0.0 {
                1.0
            } else if lo < 0.0 {
                0.0
            } else {
                (lo + hi) / 2.0
            };
        }
        Self::from_array(v)
    }

    /// Deterministic draw for `identity` under `dataset_seed`.
    pub fn sample(dataset_seed: u64, identity: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed ^ 0x6964_656e_7469_7479);
        rng.set_stream(identity as u64);
        let mut v = [0.0; 14];
        for (slot, (_, lo, hi)) in v.iter_mut().zip(Self::BOUNDS) {
            *slot = rng.random_range(lo..=hi);
        }
        Self::from_array(v)
    }

    pub fn validate(&self) -> Result<()> {
        for (v, (name, lo, hi)) in self.as_array().iter().zip(Self::BOUNDS) {
            if !(lo..=hi).contains(v) {
                return arg_err(format!("identity parameter {} = {} outside [{}, {}]", name, v, lo, hi));
            }
        }
        Ok(())
    }

    /// The identity's frontal landmarks in template space.
    pub fn landmarks(&self, template: &FaceTemplate) -> Vec<Point> {
        let mut p = template.landmarks.clone();
        let center_x = template.width / 2.0;
        let scale_about = |pts: &mut [Point], sx: f64, sy: f64| {
            let n = pts.len() as f64;
            let c = pts.iter().fold(Point::default(), |a, &b| a + b).scale(1.0 / n);
            for q in pts.iter_mut() {
                *q = Point::new(c.x + (q.x - c.x) * sx, c.y + (q.y - c.y) * sy);
            }
        };
        let shift = |pts: &mut [Point], dx: f64, dy: f64| {
            for q in pts.iter_mut() {
                *q = Point::new(q.x + dx, q.y + dy);
            }
        };
        for q in &mut p[JAW] {
            q.x = center_x + (q.x - center_x) * self.jaw_width;
        }
        scale_about(&mut p[LEFT_EYE], self.eye_scale, self.eye_scale);
        scale_about(&mut p[RIGHT_EYE], self.eye_scale, self.eye_scale);
        shift(&mut p[LEFT_EYE], -self.eye_spacing / 2.0, self.eye_height);
        shift(&mut p[RIGHT_EYE], self.eye_spacing / 2.0, self.eye_height);
        shift(&mut p[LEFT_BROW], -self.eye_spacing / 2.0, self.eye_height + self.brow_height);
        shift(&mut p[RIGHT_BROW], self.eye_spacing / 2.0, self.eye_height + self.brow_height);
        // Nose: the bridge stretches, the base moves with the tip.
        let top = p[NOSE_BRIDGE.start].y;
        let tip = p[NOSE_BRIDGE.end - 1].y;
        for q in &mut p[NOSE_BRIDGE] {
            q.y += self.nose_length * (q.y - top) / (tip - top);
        }
        scale_about(&mut p[NOSE_BASE], self.nose_width, 1.0);
        shift(&mut p[NOSE_BASE], 0.0, self.nose_length);
        scale_about(&mut p[48..68], self.mouth_width, 1.0);
        shift(&mut p[48..68], 0.0, self.mouth_height);
        p
    }
}

/// In-plane pose applied about the image center: scale, then rotate, then
/// translate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation_deg: f64,
    pub scale_x: f64,
    pub scale_y: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose { rotation_deg: 0.0, scale_x: 1.0, scale_y: 1.0, tx: 0.0, ty: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = SCALE_RANGE;
        if !(self.rotation_deg.abs() <= MAX_ROTATION_DEG)
            || !(lo..=hi).contains(&self.scale_x)
            || !(lo..=hi).contains(&self.scale_y)
            || !self.tx.is_finite()
            || !self.ty.is_finite()
        {
            return arg_err(format!("pose {:?} outside the supported range", self));
        }
        Ok(())
    }

    /// Map a point given in image pixels of an unposed face.
    pub fn apply(&self, p: Point, size: f64) -> Point {
        let c = size / 2.0;
        let (s, co) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = ((p.x - c) * self.scale_x, (p.y - c) * self.scale_y);
        Point::new(c + co * x - s * y + self.tx, c + s * x + co * y + self.ty)
    }

    pub fn invert(&self, p: Point, size: f64) -> Point {
        let c = size / 2.0;
        let (s, co) = self.rotation_deg.to_radians().sin_cos();
        let (x, y) = (p.x - c - self.tx, p.y - c - self.ty);
        let (rx, ry) = (co * x + s * y, -s * x + co * y);
        Point::new(c + rx / self.scale_x, c + ry / self.scale_y)
    }
}

/// Ranges from which training poses are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRange {
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    /// Largest translation, in output-image pixels.
    pub max_shift: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        PoseRange { max_rotation_deg: 15.0, scale: (0.9, 1.1), max_shift: 1.5 }
    }
}

impl PoseRange {
    pub fn sample(&self, rng: &mut impl Rng) -> Pose {
        let sym = |rng: &mut dyn rand::RngCore, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let rotation_deg = sym(rng, self.max_rotation_deg);
        let scale_x = rng.random_range(self.scale.0..=self.scale.1);
        let scale_y = rng.random_range(self.scale.0..=self.scale.1);
        let tx = sym(rng, self.max_shift);
        let ty = sym(rng, self.max_shift);
        Pose { rotation_deg, scale_x, scale_y, tx, ty }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    /// `[1, size, size]`, values in `[0, 1]` quantized to 1/255.
    pub image: Tensor,
    /// 68 landmarks in image pixels.
    pub landmarks: Vec<Point>,
    pub identity: usize,
    pub pose: Pose,
}

impl FaceSample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Landmarks followed by the image's boundary control points.
    pub fn mesh_vertices(&self, template: &FaceTemplate) -> Result<Vec<Point>> {
        let s = self.size() as f64;
        template.target_vertices(&self.landmarks, s, s)
    }
}

/// Rendering options shared by a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub size: usize,
    /// Supersampling factor per axis.
    pub supersample: usize,
    pub noise_std: f64,
    pub background: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { size: 32, supersample: 4, noise_std: 0.02, background: 0.15 }
    }
}

struct Shader<'a> {
    id: &'a IdentityParams,
    face: Vec<Point>,
    eyes: [&'a [Point]; 2],
    mouth: &'a [Point],
    brows: [&'a [Point]; 2],
    nose: [&'a [Point]; 2],
    background: f64,
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b - a;
    let len2 = ab.x * ab.x + ab.y * ab.y;
    let t = if len2 > 0.0 { (((p - a).x * ab.x + (p - a).y * ab.y) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.dist(a + ab.scale(t))
}

fn near_polyline(p: Point, line: &[Point], half_width: f64) -> bool {
    line.windows(2).any(|w| segment_distance(p, w[0], w[1]) <= half_width)
}

impl<'a> Shader<'a> {
    fn new(id: &'a IdentityParams, lm: &'a [Point], background: f64) -> Self {
        // Face outline: the jaw plus a forehead arc mirrored above the jaw ends.
        let jaw = &lm[JAW];
        let y0 = (jaw[0].y + jaw[jaw.len() - 1].y) / 2.0;
        let mut face: Vec<Point> = jaw.to_vec();
        face.extend(jaw[1..jaw.len() - 1].iter().rev().map(|q| Point::new(q.x, y0 - (q.y - y0) * 0.6)));
        Shader {
            id,
            face,
            eyes: [&lm[LEFT_EYE], &lm[RIGHT_EYE]],
            mouth: &lm[OUTER_MOUTH],
            brows: [&lm[LEFT_BROW], &lm[RIGHT_BROW]],
            nose: [&lm[NOSE_BRIDGE], &lm[NOSE_BASE]],
            background,
        }
    }

    fn eval(&self, p: Point) -> f64 {
        if !point_in_polygon(p, &self.face) {
            return self.background;
        }
        if self.eyes.iter().any(|e| point_in_polygon(p, e)) {
            return self.id.eye_tone;
        }
        if point_in_polygon(p, self.mouth) {
            return self.id.mouth_tone;
        }
        if self.brows.iter().any(|b| near_polyline(p, b, BROW_HALF_WIDTH)) {
            return self.id.brow_tone;
        }
        if self.nose.iter().any(|n| near_polyline(p, n, NOSE_HALF_WIDTH)) {
            return self.id.nose_tone;
        }
        self.id.skin
    }
}

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render one sample. The same arguments always give the same image.
pub fn render_face(
    id: &IdentityParams,
    identity: usize,
    pose: Pose,
    template: &FaceTemplate,
    opts: &RenderOptions,
    noise_rng: &mut impl Rng,
) -> Result<FaceSample> {
    pose.validate()?;
    id.validate()?;
    if opts.size == 0 || opts.supersample == 0 {
        return arg_err("image size and supersampling must be positive");
    }
    if !(0.0..=MAX_NOISE_STD).contains(&opts.noise_std) {
        return arg_err(format!("noise std {} outside [0, {}]", opts.noise_std, MAX_NOISE_STD));
    }
    let size = opts.size as f64;
    let to_image = size / template.width;
    let identity_landmarks = id.landmarks(template);
    let landmarks: Vec<Point> = identity_landmarks.iter().map(|&q| pose.apply(q.scale(to_image), size)).collect();
    let shader = Shader::new(id, &identity_landmarks, opts.background);
    let ss = opts.supersample;
    let noise = Normal::new(0.0, opts.noise_std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut values = Vec::with_capacity(opts.size * opts.size);
    for r in 0..opts.size {
        for c in 0..opts.size {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let q = Point::new(
                        c as f64 + (sx as f64 + 0.5) / ss as f64,
                        r as f64 + (sy as f64 + 0.5) / ss as f64,
                    );
                    acc += shader.eval(pose.invert(q, size).scale(1.0 / to_image));
                }
            }
            let v = acc / (ss * ss) as f64 + if opts.noise_std > 0.0 { noise.sample(noise_rng) } else { 0.0 };
            values.push(quantize(v));
        }
    }
    Ok(FaceSample {
        image: Tensor::new(vec![1, opts.size, opts.size], values)?,
        landmarks,
        identity,
        pose,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub num_ids: usize,
    pub samples_per_id: usize,
    /// Samples per identity held out for testing (the last ones drawn).
    pub test_per_id: usize,
    /// Identity indices run from `first_identity`; a disjoint range gives
    /// unseen people under the same seed.
    pub first_identity: usize,
    pub seed: u64,
    pub pose: PoseRange,
    pub render: RenderOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_ids: 20,
            samples_per_id: 50,
            test_per_id: 10,
            first_identity: 0,
            seed: 0,
            pose: PoseRange::default(),
            render: RenderOptions::default(),
        }
    }
}

/// An in-memory dataset. Labels are `identity - first_identity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FaceSample>,
    pub splits: Vec<Split>,
    pub first_identity: usize,
    pub num_ids: usize,
}

impl Dataset {
    pub fn label(&self, i: usize) -> usize {
        self.samples[i].identity - self.first_identity
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&FaceSample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const MAX_POSE_DRAWS: usize = 50;

fn sample_rng(seed: u64, identity: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((identity as u64) << 32) | index as u64);
    rng
}

/// Render the whole dataset in memory. Poses whose warped mesh would fold
/// are redrawn from the same stream.
pub fn generate(config: &DataConfig, template: &FaceTemplate) -> Result<Dataset> {
    if config.num_ids < 2 {
        return arg_err("a dataset needs at least two identities");
    }
    if config.test_per_id > config.samples_per_id {
        return arg_err("more test samples than samples per identity");
    }
    let mut samples = Vec::with_capacity(config.num_ids * config.samples_per_id);
    let mut splits = Vec::with_capacity(samples.capacity());
    for k in 0..config.num_ids {
        let identity = config.first_identity + k;
        let params = IdentityParams::sample(config.seed, identity);
        for j in 0..config.samples_per_id {
            let mut rng = sample_rng(config.seed, identity, j);
            let mut drawn = None;
            for _ in 0..MAX_POSE_DRAWS {
                let pose = config.pose.sample(&mut rng);
                let s = render_face(&params, identity, pose, template, &config.render, &mut rng)?;
                if template.mesh_is_valid(&s.mesh_vertices(template)?) {
                    drawn = Some(s);
                    break;
                }
                log::debug!("identity {} sample {}: folded mesh, redrawing pose", identity, j);
            }
            let sample = drawn.ok_or_else(|| {
                Error::InvalidArgument(format!("no valid pose for identity {} after {} draws", identity, MAX_POSE_DRAWS))
            })?;
            samples.push(sample);
            splits.push(if j + config.test_per_id >= config.samples_per_id { Split::Test } else { Split::Train });
        }
    }
    Ok(Dataset { samples, splits, first_identity: config.first_identity, num_ids: config.num_ids })
}

/// Write an image with values in `[0, 1]` as binary PGM (maxval 255).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return arg_err(format!("PGM needs one channel, got {}", c));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(image.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(fs::write(path, bytes)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Parse(format!("{}: {}", path.display(), m));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::new(vec![1, h, w], data.iter().map(|&b| b as f64 / maxval as f64).collect())
}

/// Landmark CSV with header `index,x,y`.
pub fn write_landmarks(path: &Path, landmarks: &[Point]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["index", "x", "y"]).map_err(csv_err)?;
    for (i, p) in landmarks.iter().enumerate() {
        w.write_record([i.to_string(), p.x.to_string(), p.y.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Point>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::Parse(format!("{}: short row {}", path.display(), row)))
        };
        let idx: usize = field(0)?.parse().map_err(|e| Error::Parse(format!("{}", e)))?;
        if idx != row {
            return Err(Error::Parse(format!("{}: landmark rows out of order", path.display())));
        }
        let x: f64 = field(1)?.parse().map_err(|e| Error::Parse(format!("{}", e)))?;
        let y: f64 = field(2)?.parse().map_err(|e| Error::Parse(format!("{}", e)))?;
        out.push(Point::new(x, y));
    }
    if out.len() != NUM_LANDMARKS {
        return Err(Error::Parse(format!("{}: expected {} landmarks, got {}", path.display(), NUM_LANDMARKS, out.len())));
    }
    Ok(out)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub identity: usize,
    pub split: Split,
    pub image_path: PathBuf,
    pub landmark_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

/// Write a dataset as `images/*.pgm`, `landmarks/*.csv` and `manifest.csv`
/// (paths relative to `out_dir`).
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("landmarks"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    let mut counters = std::collections::BTreeMap::new();
    for (s, split) in dataset.samples.iter().zip(&dataset.splits) {
        let n = counters.entry(s.identity).or_insert(0usize);
        let stem = format!("id{:04}_{:03}", s.identity, n);
        *n += 1;
        let image_path = PathBuf::from("images").join(format!("{}.pgm", stem));
        let landmark_path = PathBuf::from("landmarks").join(format!("{}.csv", stem));
        write_pgm(&out_dir.join(&image_path), &s.image)?;
        write_landmarks(&out_dir.join(&landmark_path), &s.landmarks)?;
        entries.push(ManifestEntry { identity: s.identity, split: *split, image_path, landmark_path });
    }
    let mut w = csv::Writer::from_path(out_dir.join(MANIFEST_FILE)).map_err(csv_err)?;
    w.write_record(["identity", "split", "image_path", "landmark_path"]).map_err(csv_err)?;
    for e in &entries {
        w.write_record([
            e.identity.to_string(),
            e.split.as_str().to_string(),
            e.image_path.display().to_string(),
            e.landmark_path.display().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(entries)
}

pub fn gen_dataset(config: &DataConfig, template: &FaceTemplate, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let dataset = generate(config, template)?;
    write_dataset(&dataset, out_dir)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!("manifest row has {} fields", rec.len())));
        }
        out.push(ManifestEntry {
            identity: rec[0].parse().map_err(|e| Error::Parse(format!("identity: {}", e)))?,
            split: rec[1].parse()?,
            image_path: PathBuf::from(&rec[2]),
            landmark_path: PathBuf::from(&rec[3]),
        });
    }
    Ok(out)
}

/// Source of face samples. Only the on-disk synthetic layout ships, but a
/// real-data backend would implement the same trait.
pub trait FaceSource {
    fn load(&self) -> Result<Dataset>;
}

/// A dataset directory written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetDir(pub PathBuf);

impl FaceSource for DatasetDir {
    fn load(&self) -> Result<Dataset> {
        let entries = read_manifest(&self.0.join(MANIFEST_FILE))?;
        if entries.is_empty() {
            return arg_err("empty manifest");
        }
        let first_identity = entries.iter().map(|e| e.identity).min().unwrap_or(0);
        let last = entries.iter().map(|e| e.identity).max().unwrap_or(0);
        let mut samples = Vec::with_capacity(entries.len());
        let mut splits = Vec::with_capacity(entries.len());
        for e in entries {
            samples.push(FaceSample {
                image: read_pgm(&self.0.join(&e.image_path))?,
                landmarks: read_landmarks(&self.0.join(&e.landmark_path))?,
                identity: e.identity,
                pose: Pose::IDENTITY,
            });
            splits.push(e.split);
        }
        Ok(Dataset { samples, splits, first_identity, num_ids: last - first_identity + 1 })
    }
}
