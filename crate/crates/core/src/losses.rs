//! Diversity losses, feature masks and the combined training objective.
//!
//! The filter-orthogonality and response-decorrelation penalties, the masked
//! feature difference and the masked identity loss all come with analytic
//! gradients; [`crate::graph::Graph`] records them as single ops.

use crate::error::{arg_err, shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops;
use crate::tensor::Tensor;

/// The `K` diversity filters applied to the hypercolumn descriptor,
/// stored as a `[K, C_hc, kh, kw]` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    weights: Tensor,
}

impl FilterBank {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 4 {
            return shape_err(format!("filter bank must be [K,C,kh,kw], got {:?}", weights.shape()));
        }
        Ok(FilterBank { weights })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn num_filters(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Errors with the first filter owning an all-zero column.
    pub fn validate(&self) -> Result<()> {
        column_norms(&self.weights).map(|_| ())
    }
}

/// Threshold rule of the feature selection mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Keep the `t` elements with the smallest mean difference.
    Count(usize),
    /// Keep every element whose mean difference is below `t`.
    Value(f64),
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdMode::Count(t) => write!(f, "count:{}", t),
            ThresholdMode::Value(t) => write!(f, "value:{}", t),
        }
    }
}

impl std::str::FromStr for ThresholdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("threshold mode `{}` (expected count:<n> or value:<x>)", s));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "count" => Ok(ThresholdMode::Count(arg.trim().parse().map_err(|_| bad())?)),
            "value" => Ok(ThresholdMode::Value(arg.trim().parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Binary selection of occlusion-insensitive feature elements.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub bits: Vec<bool>,
    pub mode: ThresholdMode,
}

impl FeatureMask {
    pub fn all(len: usize, set: bool) -> Self {
        FeatureMask {
            bits: vec![set; len],
            mode: ThresholdMode::Count(if set { len } else { 0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Per-position column norms `||F_i^p||`, indexed `[i * P + p]`.
fn column_norms(bank: &Tensor) -> Result<Vec<f64>> {
    let (k, c, p) = bank_dims(bank)?;
    let w = bank.values();
    let mut norms = vec![0.0; k * p];
    for i in 0..k {
        for pos in 0..p {
            let sq: f64 = (0..c).map(|ch| w[(i * c + ch) * p + pos].powi(2)).sum();
            if sq == 0.0 {
                return Err(Error::ZeroFilterColumn { filter: i, position: pos });
            }
            norms[i * p + pos] = sq.sqrt();
        }
    }
    Ok(norms)
}

fn bank_dims(bank: &Tensor) -> Result<(usize, usize, usize)> {
    match bank.shape() {
        &[k, c, kh, kw] => Ok((k, c, kh * kw)),
        s => shape_err(format!("filter bank must be [K,C,kh,kw], got {:?}", s)),
    }
}

/// `S_ij = sum_p cos(F_i^p, F_j^p)` together with the per-position cosines.
fn filter_similarity(bank: &Tensor, norms: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (k, c, p) = bank_dims(bank).expect("validated");
    let w = bank.values();
    let mut cos = vec![0.0; k * k * p];
    let mut s = vec![0.0; k * k];
    for i in 0..k {
        for j in (i + 1)..k {
            let mut total = 0.0;
            for pos in 0..p {
                let dot: f64 = (0..c).map(|ch| w[(i * c + ch) * p + pos] * w[(j * c + ch) * p + pos]).sum();
                let cv = dot / (norms[i * p + pos] * norms[j * p + pos]);
                cos[(i * k + j) * p + pos] = cv;
                cos[(j * k + i) * p + pos] = cv;
                total += cv;
            }
            s[i * k + j] = total;
            s[j * k + i] = total;
        }
    }
    (s, cos)
}

/// Filter orthogonality penalty: `sum_{i != j} | sum_p cos(F_i^p, F_j^p) |`.
pub fn sad_filter_value(bank: &Tensor) -> Result<f64> {
    let norms = column_norms(bank)?;
    let k = bank.shape()[0];
    let (s, _) = filter_similarity(bank, &norms);
    let mut loss = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                loss += s[i * k + j].abs();
            }
        }
    }
    Ok(loss)
}

pub(crate) fn sad_filter_grad(bank: &Tensor) -> Result<Vec<f64>> {
    let norms = column_norms(bank)?;
    let (k, c, p) = bank_dims(bank)?;
    let (s, cos) = filter_similarity(bank, &norms);
    let w = bank.values();
    let mut grad = vec![0.0; w.len()];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            // both ordered pairs (i,j) and (j,i) carry the same term
            let sign = 2.0 * signum0(s[i * k + j]);
            if sign == 0.0 {
                continue;
            }
            for pos in 0..p {
                let (ni, nj) = (norms[i * p + pos], norms[j * p + pos]);
                let cv = cos[(i * k + j) * p + pos];
                for ch in 0..c {
                    let fi = w[(i * c + ch) * p + pos];
                    let fj = w[(j * c + ch) * p + pos];
                    grad[(i * c + ch) * p + pos] += sign * (fj / (ni * nj) - cv * fi / (ni * ni));
                }
            }
        }
    }
    Ok(grad)
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sad_filter_loss(bank: &FilterBank) -> Result<f64> {
    sad_filter_value(bank.weights())
}

/// Channel norms and the cosine matrix of a `[K, H, W]` response map.
/// Zero-norm channels have all cosines set to zero.
fn response_cosines(maps: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (k, _, _) = maps.chw()?;
    let norms: Vec<f64> = (0..k)
        .map(|i| maps.channel(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut cos = vec![0.0; k * k];
    for i in 0..k {
        if norms[i] == 0.0 {
            continue;
        }
        for j in (i + 1)..k {
            if norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = maps.channel(i).iter().zip(maps.channel(j)).map(|(a, b)| a * b).sum();
            let cv = dot / (norms[i] * norms[j]);
            cos[i * k + j] = cv;
            cos[j * k + i] = cv;
        }
    }
    Ok((norms, cos))
}

/// Response decorrelation penalty `sum_{i != j} cos(psi_i, psi_j)^2` on
/// already smoothed maps.
pub fn sad_response_value(maps: &Tensor) -> Result<f64> {
    let (norms, cos) = response_cosines(maps)?;
    let k = norms.len();
    Ok((0..k)
        .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| cos[i * k + j].powi(2))
        .sum())
}

pub(crate) fn sad_response_grad(maps: &Tensor) -> Result<Vec<f64>> {
    let (norms, cos) = response_cosines(maps)?;
    let (k, h, w) = maps.chw()?;
    let plane = h * w;
    let mut grad = vec![0.0; maps.len()];
    for i in 0..k {
        if norms[i] == 0.0 {
            continue;
        }
        let gi = &mut grad[i * plane..(i + 1) * plane];
        let xi = maps.channel(i);
        for j in 0..k {
            if j == i || norms[j] == 0.0 {
                continue;
            }
            let cv = cos[i * k + j];
            // d/dx_i of 2 * cos^2 (both ordered pairs)
            let scale = 4.0 * cv;
            let a = scale / (norms[i] * norms[j]);
            let b = scale * cv / (norms[i] * norms[i]);
            for ((g, &xj), &xv) in gi.iter_mut().zip(maps.channel(j)).zip(xi) {
                *g += a * xj - b * xv;
            }
        }
    }
    Ok(grad)
}

/// `psi' = blur(LMF(response, d), sigma)` followed by the squared-cosine penalty.
pub fn sad_response_loss(response: &Tensor, d_percent: f64, sigma: f64) -> Result<f64> {
    let filtered = ops::lmf(response, d_percent)?;
    let smoothed = ops::gaussian_blur(&filtered, sigma)?;
    sad_response_value(&smoothed)
}

/// Per-element mean absolute difference `m_i = (1/N) sum_n |f_i - f^_i|`.
pub fn mean_abs_difference(clean: &[Vec<f64>], occluded: &[Vec<f64>]) -> Result<Vec<f64>> {
    if clean.is_empty() {
        return arg_err("at least one feature pair is required");
    }
    if clean.len() != occluded.len() {
        return shape_err(format!("{} clean vs {} occluded features", clean.len(), occluded.len()));
    }
    let k = clean[0].len();
    let mut m = vec![0.0; k];
    for (f, g) in clean.iter().zip(occluded) {
        if f.len() != k || g.len() != k {
            return shape_err(format!("feature lengths differ: {} / {} vs {}", f.len(), g.len(), k));
        }
        for ((acc, a), b) in m.iter_mut().zip(f).zip(g) {
            *acc += (a - b).abs();
        }
    }
    let n = clean.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    Ok(m)
}

/// Selection mask from precomputed mean differences.
pub fn mask_from_differences(m: &[f64], mode: ThresholdMode) -> Result<FeatureMask> {
    let k = m.len();
    let bits = match mode {
        ThresholdMode::Value(t) => m.iter().map(|&v| v < t).collect(),
        ThresholdMode::Count(t) => {
            if t < 1 || t > k {
                return arg_err(format!("count threshold {} outside [1, {}]", t, k));
            }
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| m[a].total_cmp(&m[b]).then(a.cmp(&b)));
            let mut bits = vec![false; k];
            for &i in &order[..t] {
                bits[i] = true;
            }
            bits
        }
    };
    Ok(FeatureMask { bits, mode })
}

/// Feature selection mask from `N` clean/occluded pairs sharing one occluder.
pub fn fad_mask(clean: &[Vec<f64>], occluded: &[Vec<f64>], mode: ThresholdMode) -> Result<FeatureMask> {
    let m = mean_abs_difference(clean, occluded)?;
    mask_from_differences(&m, mode)
}

pub(crate) fn masked_l1_value(a: &[f64], b: &[f64], mask: &[f64]) -> f64 {
    a.iter().zip(b).zip(mask).map(|((x, y), m)| (m * (x - y)).abs()).sum()
}

pub(crate) fn masked_l1_grad(a: &[f64], b: &[f64], mask: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let ga: Vec<f64> = a
        .iter()
        .zip(b)
        .zip(mask)
        .map(|((x, y), m)| m.abs() * signum0(x - y))
        .collect();
    let gb = ga.iter().map(|v| -v).collect();
    (ga, gb)
}

/// `sum_i |tau_i (f_i - f^_i)|`.
pub fn fad_loss(f: &[f64], f_hat: &[f64], mask: &FeatureMask) -> Result<f64> {
    if f.len() != f_hat.len() || f.len() != mask.len() {
        return shape_err(format!("fad_loss lengths {} / {} / mask {}", f.len(), f_hat.len(), mask.len()));
    }
    Ok(masked_l1_value(f, f_hat, &mask.as_f64()))
}

/// Identity loss of the occluded branch on the masked feature, in a graph.
/// `weight`/`bias` must be the same classifier nodes the clean branch uses.
pub fn occluded_id_loss_node(
    graph: &mut Graph,
    f_hat: NodeId,
    mask: &FeatureMask,
    weight: NodeId,
    bias: NodeId,
    label: usize,
) -> Result<NodeId> {
    let masked = graph.mask(f_hat, mask.as_f64())?;
    let logits = graph.linear(masked, weight, Some(bias))?;
    graph.softmax_xent(logits, label)
}

/// Value-only form of the occluded identity loss.
pub fn occluded_id_loss(f_hat: &[f64], mask: &FeatureMask, weight: &Tensor, bias: &Tensor, label: usize) -> Result<f64> {
    if f_hat.len() != mask.len() {
        return shape_err("feature and mask lengths differ");
    }
    let masked: Vec<f64> = f_hat.iter().zip(&mask.bits).map(|(v, &b)| if b { *v } else { 0.0 }).collect();
    let logits = ops::linear(&Tensor::vector(masked), weight, Some(bias))?;
    ops::softmax_xent(logits.values(), label)
}

/// Non-negative weights of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub id: f64,
    pub sad_filter: f64,
    pub sad_response: f64,
    pub fad: f64,
    pub occluded: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            id: 1.0,
            sad_filter: 1.0,
            sad_response: 1.0,
            fad: 1.0,
            occluded: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            id: 0.0,
            sad_filter: 0.0,
            sad_response: 0.0,
            fad: 0.0,
            occluded: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.id, self.sad_filter, self.sad_response, self.fad, self.occluded]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["id", "sad_filter", "sad_response", "fad", "occluded"];
        for (n, w) in names.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return arg_err(format!("loss weight `{}` must be a finite non-negative number, got {}", n, w));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossWeights {
            id: self.id * s,
            sad_filter: self.sad_filter * s,
            sad_response: self.sad_response * s,
            fad: self.fad * s,
            occluded: self.occluded * s,
        }
    }

    /// Whether the occluded branch contributes anything.
    pub fn uses_occlusion(&self) -> bool {
        self.fad > 0.0 || self.occluded > 0.0
    }
}

/// Values of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub id: f64,
    pub sad_filter: f64,
    pub sad_response: f64,
    pub fad: f64,
    pub occluded: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 5] {
        [self.id, self.sad_filter, self.sad_response, self.fad, self.occluded]
    }

    pub const NAMES: [&'static str; 5] = ["L_id", "L_sad_f", "L_sad_r", "L_fad", "L_occ"];
}

/// `sum_k weight_k * term_k`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(terms
        .as_array()
        .iter()
        .zip(weights.as_array())
        .map(|(t, w)| t * w)
        .sum())
}
