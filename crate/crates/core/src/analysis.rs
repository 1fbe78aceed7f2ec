//! Interpretability diagnostics over trained models.
//!
//! Peak statistics locate each filter's strongest positive and negative
//! response on every image, carry the location back to the canonical
//! template frame through the landmark mesh, and average with the peak
//! magnitude as weight. Spreadness summarizes how far apart those average
//! locations are. Feature differences and masked-feature accuracy measure
//! how much an occluder disturbs the identity feature.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{arg_err, Error, Result};
use crate::geometry::{
    place_occluder, point_in_polygon, render_occlusion, to_canonical, warp_anchors, FaceTemplate, OccluderSpec,
    Point,
};
use crate::losses::{self, FeatureMask, ThresholdMode};
use crate::network::Model;
use crate::synthdata::FaceSample;
use crate::tensor::Tensor;

/// Weighted mean location and spread of one filter's peaks of one sign.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakSummary {
    pub mean: Point,
    /// Root of the weighted mean squared distance to `mean`.
    pub std: f64,
    /// Mean absolute peak value over the contributing images.
    pub mean_abs: f64,
    pub count: usize,
}

/// Peak summaries of one filter. `None` when no image contributed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterPeaks {
    pub positive: Option<PeakSummary>,
    pub negative: Option<PeakSummary>,
    /// Images skipped because a peak fell outside the mesh.
    pub skipped: usize,
    /// Images skipped because the peak value was exactly zero.
    pub zero: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakStats {
    pub filters: Vec<FilterPeaks>,
    pub num_images: usize,
}

/// Where one image's peak of a filter landed, before aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakObservation {
    pub location: Point,
    pub value: f64,
}

/// Index of the first maximum and first minimum of `values`.
pub fn arg_extrema(values: &[f64]) -> (usize, usize) {
    let mut hi = 0;
    let mut lo = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[hi] {
            hi = i;
        }
        if v < values[lo] {
            lo = i;
        }
    }
    (hi, lo)
}

/// Image-space center of cell `index` on a `side x side` map over an
/// `image_size` image.
pub fn cell_center(index: usize, side: usize, image_size: usize) -> Point {
    let stride = image_size as f64 / side as f64;
    let (r, c) = (index / side, index % side);
    Point::new((c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride)
}

/// Weighted mean and radial std; weights must be nonnegative with a positive sum.
pub fn summarize(observations: &[PeakObservation]) -> Option<PeakSummary> {
    let total: f64 = observations.iter().map(|o| o.value.abs()).sum();
    if observations.is_empty() || total <= 0.0 {
        return None;
    }
    let mut mean = Point::new(0.0, 0.0);
    for o in observations {
        mean = mean + o.location.scale(o.value.abs() / total);
    }
    let var: f64 = observations
        .iter()
        .map(|o| o.value.abs() / total * o.location.dist(mean).powi(2))
        .sum();
    Some(PeakSummary {
        mean,
        std: var.sqrt(),
        mean_abs: total / observations.len() as f64,
        count: observations.len(),
    })
}

/// Peak statistics from precomputed response maps.
///
/// `maps[n]` is the `[K, side, side]` response of image `n`, whose posed mesh
/// vertices (in image pixels) are `vertices[n]`.
pub fn peak_stats_from_maps(
    maps: &[Tensor],
    vertices: &[Vec<Point>],
    image_size: usize,
    template: &FaceTemplate,
) -> Result<PeakStats> {
    if maps.len() != vertices.len() {
        return arg_err(format!("{} maps but {} vertex sets", maps.len(), vertices.len()));
    }
    let Some(first) = maps.first() else {
        return arg_err("peak statistics need at least one image");
    };
    let (k, h, w) = first.chw()?;
    if h != w {
        return arg_err(format!("response maps must be square, got {}x{}", h, w));
    }
    let mut pos: Vec<Vec<PeakObservation>> = vec![Vec::new(); k];
    let mut neg: Vec<Vec<PeakObservation>> = vec![Vec::new(); k];
    let mut filters = vec![FilterPeaks::default(); k];
    for (map, verts) in maps.iter().zip(vertices) {
        if map.shape() != first.shape() {
            return arg_err(format!("map shape {:?} differs from {:?}", map.shape(), first.shape()));
        }
        for f in 0..k {
            let ch = map.channel(f);
            let (hi, lo) = arg_extrema(ch);
            let peaks = [(hi, &mut pos[f]), (lo, &mut neg[f])];
            let mut located = Vec::with_capacity(2);
            for (idx, _) in &peaks {
                if ch[*idx] == 0.0 {
                    located.push(None);
                    continue;
                }
                match to_canonical(cell_center(*idx, w, image_size), verts, template) {
                    Ok(p) => located.push(Some(PeakObservation { location: p, value: ch[*idx] })),
                    Err(Error::OutsideMesh { .. }) => {
                        filters[f].skipped += 1;
                        located.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            if ch[hi] == 0.0 || ch[lo] == 0.0 {
                filters[f].zero += 1;
            }
            for ((_, bucket), obs) in peaks.into_iter().zip(located) {
                bucket.extend(obs);
            }
        }
    }
    for f in 0..k {
        filters[f].positive = summarize(&pos[f]);
        filters[f].negative = summarize(&neg[f]);
    }
    Ok(PeakStats { filters, num_images: maps.len() })
}

/// Peak statistics on the LMF response of `model` over `samples`.
pub fn peak_stats(model: &Model, samples: &[&FaceSample], template: &FaceTemplate) -> Result<PeakStats> {
    let mut maps = Vec::with_capacity(samples.len());
    let mut verts = Vec::with_capacity(samples.len());
    for s in samples {
        maps.push(model.forward(&s.image)?.psi_lmf);
        verts.push(s.mesh_vertices(template)?);
    }
    peak_stats_from_maps(&maps, &verts, model.config().input_size, template)
}

impl PeakStats {
    pub fn positive_locations(&self) -> Vec<Point> {
        self.filters.iter().filter_map(|f| f.positive.map(|s| s.mean)).collect()
    }

    pub fn negative_locations(&self) -> Vec<Point> {
        self.filters.iter().filter_map(|f| f.negative.map(|s| s.mean)).collect()
    }

    /// Mean per-filter peak std over both signs and all summarized filters.
    pub fn mean_std(&self) -> f64 {
        let stds: Vec<f64> = self
            .filters
            .iter()
            .flat_map(|f| [f.positive, f.negative])
            .flatten()
            .map(|s| s.std)
            .collect();
        if stds.is_empty() {
            0.0
        } else {
            stds.iter().sum::<f64>() / stds.len() as f64
        }
    }

    pub fn total_skipped(&self) -> usize {
        self.filters.iter().map(|f| f.skipped).sum()
    }

    pub const CSV_HEADER: &'static str =
        "filter,pos_x,pos_y,pos_std,pos_mean_abs,pos_count,neg_x,neg_y,neg_std,neg_mean_abs,neg_count,skipped,zero";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let cols = |s: Option<PeakSummary>| match s {
            Some(s) => format!("{},{},{},{},{}", s.mean.x, s.mean.y, s.std, s.mean_abs, s.count),
            None => ",,,,0".to_string(),
        };
        for (i, f) in self.filters.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", i, cols(f.positive), cols(f.negative), f.skipped, f.zero);
        }
        out
    }
}

/// Mean distance of `points` from their centroid.
pub fn spread_of(points: &[Point]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let n = points.len() as f64;
    let mut c = Point::new(0.0, 0.0);
    for p in points {
        c = c + p.scale(1.0 / n);
    }
    points.iter().map(|p| p.dist(c)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spreadness {
    pub positive: f64,
    pub negative: f64,
    pub mean: f64,
}

pub fn spreadness(stats: &PeakStats) -> Result<Spreadness> {
    let (p, n) = (stats.positive_locations(), stats.negative_locations());
    if p.is_empty() && n.is_empty() {
        return arg_err("no filter has a located peak");
    }
    let positive = spread_of(&p);
    let negative = spread_of(&n);
    Ok(Spreadness { positive, negative, mean: 0.5 * (positive + negative) })
}

/// Per-filter mean absolute feature change caused by an occluder.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffProfile {
    /// Unsorted, indexed by filter.
    pub m: Vec<f64>,
    pub occluder: OccluderSpec,
}

impl DiffProfile {
    /// Values in descending order, for profile plots.
    pub fn sorted(&self) -> Vec<f64> {
        let mut v = self.m.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }

    pub fn mean(&self) -> f64 {
        if self.m.is_empty() {
            0.0
        } else {
            self.m.iter().sum::<f64>() / self.m.len() as f64
        }
    }

    pub const CSV_HEADER: &'static str = "filter,m,sorted_rank,sorted_m";

    pub fn to_csv(&self) -> String {
        let mut order: Vec<usize> = (0..self.m.len()).collect();
        order.sort_by(|&a, &b| self.m[b].total_cmp(&self.m[a]).then(a.cmp(&b)));
        let mut rank = vec![0; self.m.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let sorted = self.sorted();
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for i in 0..self.m.len() {
            let _ = writeln!(out, "{},{},{},{}", i, self.m[i], rank[i], sorted[i]);
        }
        out
    }
}

/// Clean and occluded copies of `samples` under one occluder placement.
pub fn occlude_samples(
    samples: &[&FaceSample],
    occluder: &OccluderSpec,
    template: &FaceTemplate,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    let placement = place_occluder(occluder, template, rng)?;
    samples
        .iter()
        .map(|s| {
            let quad = warp_anchors(&placement.anchors, template, &s.mesh_vertices(template)?)?;
            Ok(render_occlusion(&s.image, &quad, occluder.fill, 1.0, rng)?.image)
        })
        .collect()
}

fn features(model: &Model, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|im| Ok(model.forward(im)?.feature)).collect()
}

/// Mean absolute feature difference between clean and occluded samples,
/// with one occluder placement shared by all samples.
pub fn feature_diff(
    model: &Model,
    samples: &[&FaceSample],
    occluder: &OccluderSpec,
    template: &FaceTemplate,
    rng: &mut impl Rng,
) -> Result<DiffProfile> {
    if samples.is_empty() {
        return arg_err("feature difference needs at least one sample");
    }
    let occluded = occlude_samples(samples, occluder, template, rng)?;
    let clean = features(model, &samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let occ = features(model, &occluded.iter().collect::<Vec<_>>())?;
    Ok(DiffProfile { m: losses::mean_abs_difference(&clean, &occ)?, occluder: *occluder })
}

/// Accuracy of the shared classifier on clean, occluded and masked occluded
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionEval {
    pub clean_accuracy: f64,
    pub occluded_accuracy: f64,
    /// Occluded features gated by their batch's mask before the classifier.
    pub masked_accuracy: f64,
    /// One selection mask per evaluation batch.
    pub masks: Vec<FeatureMask>,
}

fn argmax(values: &[f64]) -> usize {
    arg_extrema(values).0
}

/// Logits of the model's classifier applied to `feature`.
pub fn classify(model: &Model, feature: &[f64]) -> Result<Vec<f64>> {
    let (w, b) = model.classifier();
    let (classes, k) = (w.shape()[0], w.shape()[1]);
    if feature.len() != k {
        return arg_err(format!("feature length {}, classifier expects {}", feature.len(), k));
    }
    Ok((0..classes)
        .map(|c| b.values()[c] + w.values()[c * k..(c + 1) * k].iter().zip(feature).map(|(a, x)| a * x).sum::<f64>())
        .collect())
}

/// Classify each sample and an occluded copy of it, the way the occluded
/// branch sees them in training: samples are shuffled into batches of
/// `batch_size`, each batch shares one occluder placement, and each batch's
/// selection mask comes from its own clean/occluded pairs.
#[allow(clippy::too_many_arguments)]
pub fn occlusion_eval(
    model: &Model,
    samples: &[&FaceSample],
    labels: &[usize],
    occluder: &OccluderSpec,
    mode: ThresholdMode,
    batch_size: usize,
    template: &FaceTemplate,
    rng: &mut impl Rng,
) -> Result<OcclusionEval> {
    if samples.is_empty() || samples.len() != labels.len() {
        return arg_err("need one label per sample and at least one sample");
    }
    if batch_size == 0 {
        return arg_err("batch size must be positive");
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut hits = [0usize; 3];
    let mut masks = Vec::new();
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&FaceSample> = chunk.iter().map(|&i| samples[i]).collect();
        let occluded = occlude_samples(&batch, occluder, template, rng)?;
        let clean = features(model, &batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let occ = features(model, &occluded.iter().collect::<Vec<_>>())?;
        let mask = losses::fad_mask(&clean, &occ, mode)?;
        let gate = mask.as_f64();
        for ((c, o), &i) in clean.iter().zip(&occ).zip(chunk) {
            let masked: Vec<f64> = o.iter().zip(&gate).map(|(v, g)| v * g).collect();
            for (slot, f) in [c, o, &masked].into_iter().enumerate() {
                if argmax(&classify(model, f)?) == labels[i] {
                    hits[slot] += 1;
                }
            }
        }
        masks.push(mask);
    }
    let n = samples.len() as f64;
    Ok(OcclusionEval {
        clean_accuracy: hits[0] as f64 / n,
        occluded_accuracy: hits[1] as f64 / n,
        masked_accuracy: hits[2] as f64 / n,
        masks,
    })
}

/// Filters whose positive average peak lies inside `polygon`.
pub fn part_filters(stats: &PeakStats, polygon: &[Point]) -> Vec<usize> {
    stats
        .filters
        .iter()
        .enumerate()
        .filter(|(_, f)| f.positive.is_some_and(|s| point_in_polygon(s.mean, polygon)))
        .map(|(i, _)| i)
        .collect()
}

fn masked_cosine(a: &[f64], b: &[f64], part: &[usize]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for &i in part {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if bb == 0.0 {
        // A gallery item with no part response matches nothing.
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Gallery indices ordered by descending cosine similarity of part-masked
/// features; ties keep gallery order.
pub fn retrieve_by_part(gallery: &[Vec<f64>], query: &[f64], part: &[usize]) -> Result<Vec<usize>> {
    if part.is_empty() {
        return arg_err("part filter set is empty");
    }
    if let Some(&bad) = part.iter().find(|&&i| i >= query.len()) {
        return arg_err(format!("filter index {} out of range", bad));
    }
    if gallery.iter().any(|g| g.len() != query.len()) {
        return arg_err("gallery feature length differs from the query");
    }
    if part.iter().all(|&i| query[i] == 0.0) {
        return arg_err("masked query feature is all zero");
    }
    let sims: Vec<f64> = gallery.iter().map(|g| masked_cosine(query, g, part)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Rank-1 accuracy where query `i` should retrieve gallery item `i`.
/// Queries whose masked feature is all zero count as misses.
pub fn paired_rank1(gallery: &[Vec<f64>], queries: &[Vec<f64>], part: &[usize]) -> Result<f64> {
    if gallery.len() != queries.len() || gallery.is_empty() {
        return arg_err("paired retrieval needs equally many queries and gallery items");
    }
    let mut hits = 0;
    for (i, q) in queries.iter().enumerate() {
        match retrieve_by_part(gallery, q, part) {
            Ok(order) if order[0] == i => hits += 1,
            Ok(_) => {}
            Err(Error::InvalidArgument(msg)) if msg.contains("all zero") => {}
            Err(e) => return Err(e),
        }
    }
    Ok(hits as f64 / gallery.len() as f64)
}

/// RGB overlay of one response channel on a grayscale image: positive
/// responses blend toward red, negative toward green, with opacity equal to
/// `|v| / max|v|`. Response cells are upsampled by pixel replication.
pub fn overlay(gray: &[f64], size: usize, response: &[f64], side: usize) -> Result<Vec<[f64; 3]>> {
    if gray.len() != size * size || response.len() != side * side || side == 0 || size % side != 0 {
        return arg_err(format!("cannot overlay a {0}x{0} map on a {1}x{1} image", side, size));
    }
    let peak = response.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stride = size / side;
    Ok((0..size * size)
        .map(|i| {
            let g = gray[i];
            let v = response[(i / size / stride) * side + (i % size) / stride];
            let a = if peak > 0.0 { v.abs() / peak } else { 0.0 };
            let color = if v >= 0.0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            color.map(|c| (1.0 - a) * g + a * c)
        })
        .collect())
}

pub fn write_ppm(path: &Path, pixels: &[[f64; 3]], size: usize) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", size, size).into_bytes();
    for px in pixels {
        bytes.extend(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Write one overlay per (sample, filter) as `s{sample}_f{filter}.ppm`.
pub fn export_heatmaps(
    model: &Model,
    samples: &[&FaceSample],
    filters: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let k = model.config().num_filters;
    if let Some(&bad) = filters.iter().find(|&&f| f >= k) {
        return arg_err(format!("filter {} out of range (K = {})", bad, k));
    }
    fs::create_dir_all(out_dir)?;
    let size = model.config().input_size;
    let side = model.config().hc_resolution;
    let mut paths = Vec::with_capacity(samples.len() * filters.len());
    for (n, s) in samples.iter().enumerate() {
        let r = model.forward(&s.image)?;
        let (c, _, _) = s.image.chw()?;
        let gray: Vec<f64> = (0..size * size)
            .map(|i| (0..c).map(|ch| s.image.channel(ch)[i]).sum::<f64>() / c as f64)
            .collect();
        for &f in filters {
            let px = overlay(&gray, size, r.psi_lmf.channel(f), side)?;
            let path = out_dir.join(format!("s{}_f{}.ppm", n, f));
            write_ppm(&path, &px, size)?;
            paths.push(path);
        }
    }
    Ok(paths)
}
