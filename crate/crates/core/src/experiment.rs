//! Toy-scale training variants and their evaluation.
//!
//! Three variants are compared: a baseline trained on the identity loss
//! alone without large magnitude filtering, a model with the two spatial
//! diversity terms, and a model that also trains the occluded branch.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{self, OcclusionEval, PeakStats, Spreadness};
use crate::error::{Error, Result};
use crate::geometry::{polygon_area, FaceTemplate, Fill, OccluderSpec, Placement, Point, SizeMode};
use crate::losses::{LossWeights, ThresholdMode};
use crate::network::{Model, NetConfig};
use crate::synthdata::{generate, DataConfig, Dataset, FaceSample, Split};
use crate::training::{fit, TrainConfig, TrainLog};

/// LMF percentage used by the diversity-trained variants: 24 of 576 kept on
/// a 24x24 map.
pub const DIVERSITY_D_PERCENT: f64 = 95.83;

/// Feature elements kept by the selection mask on the 32-filter toy model.
pub const TOY_KEEP_COUNT: usize = 26;

/// Pairs per shared occluder placement when evaluating the masked head;
/// the toy training batch size.
pub const EVAL_BATCH_SIZE: usize = 16;

/// Identities of the retrieval protocol, drawn from an index range no
/// training set uses.
pub const RETRIEVAL_IDS: usize = 150;
pub const RETRIEVAL_FIRST_ID: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    SadOnly,
    SadFad,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::SadOnly, Variant::SadFad];

    pub fn default_d_percent(self) -> f64 {
        match self {
            Variant::Baseline => 0.0,
            _ => DIVERSITY_D_PERCENT,
        }
    }

    pub fn loss_weights(self) -> LossWeights {
        let sad = LossWeights { id: 1.0, sad_filter: 0.01, sad_response: 0.01, ..LossWeights::zero() };
        match self {
            Variant::Baseline => LossWeights { id: 1.0, ..LossWeights::zero() },
            Variant::SadOnly => sad,
            Variant::SadFad => LossWeights { fad: 0.02, occluded: 1.0, ..sad },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::SadOnly => "sad",
            Variant::SadFad => "sad-fad",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "sad" => Ok(Variant::SadOnly),
            "sad-fad" => Ok(Variant::SadFad),
            _ => Err(Error::Parse(format!("unknown variant `{}` (baseline, sad, sad-fad)", s))),
        }
    }
}

/// Training settings for the 32x32 toy model.
pub fn toy_train_config(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 0.03,
        batch_size: EVAL_BATCH_SIZE,
        epochs: 15,
        plateau_window: 3,
        loss_weights: variant.loss_weights(),
        fad_mode: ThresholdMode::Count(TOY_KEEP_COUNT),
        response_sigma: 0.5,
        seed,
        ..TrainConfig::default()
    }
}

pub fn toy_net_config(variant: Variant, num_classes: usize) -> NetConfig {
    NetConfig { d_percent: variant.default_d_percent(), ..NetConfig::toy(num_classes) }
}

/// Initialize from `seed` and train on the training split.
pub fn train_model(
    net: NetConfig,
    train: &TrainConfig,
    data: &Dataset,
    template: &FaceTemplate,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainLog)> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(3);
    let model = Model::build(net, &mut rng)?;
    fit(model, data, template, train, checkpoint_dir)
}

/// A black static occluder centered on the canonical eye region.
pub fn eye_occluder(template: &FaceTemplate) -> Result<OccluderSpec> {
    let eyes = template
        .region("eyes")
        .ok_or_else(|| Error::InvalidArgument("template has no `eyes` region".into()))?;
    let c = polygon_centroid(&eyes.polygon);
    Ok(OccluderSpec {
        fill: Fill::Black,
        size: SizeMode::Static,
        placement: Placement::Centered { x: c.x, y: c.y },
        rng_seed: 0,
    })
}

pub fn polygon_centroid(polygon: &[Point]) -> Point {
    let a = polygon_area(polygon);
    let n = polygon.len();
    let (mut cx, mut cy, mut signed) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (p, q) = (polygon[i], polygon[(i + 1) % n]);
        let cross = p.x * q.y - q.x * p.y;
        signed += cross;
        cx += (p.x + q.x) * cross;
        cy += (p.y + q.y) * cross;
    }
    if a == 0.0 || signed == 0.0 {
        let k = n as f64;
        return Point::new(polygon.iter().map(|p| p.x).sum::<f64>() / k, polygon.iter().map(|p| p.y).sum::<f64>() / k);
    }
    Point::new(cx / (3.0 * signed), cy / (3.0 * signed))
}

/// Diagnostics of one trained model on the test split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub stats: PeakStats,
    pub spread: Spreadness,
    pub mean_peak_std: f64,
    /// Mean of the feature difference profile under the eye occluder.
    pub eye_diff: f64,
    pub occlusion: OcclusionEval,
}

pub fn evaluate(model: &Model, data: &Dataset, template: &FaceTemplate, seed: u64) -> Result<Evaluation> {
    let test = data.indices(Split::Test);
    let samples: Vec<&FaceSample> = test.iter().map(|&i| &data.samples[i]).collect();
    let labels: Vec<usize> = test.iter().map(|&i| data.label(i)).collect();
    let stats = analysis::peak_stats(model, &samples, template)?;
    let spread = analysis::spreadness(&stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(5);
    let eye_diff = analysis::feature_diff(model, &samples, &eye_occluder(template)?, template, &mut rng)?.mean();
    let occlusion = analysis::occlusion_eval(
        model,
        &samples,
        &labels,
        &OccluderSpec::default(),
        ThresholdMode::Count(TOY_KEEP_COUNT.min(model.config().num_filters)),
        EVAL_BATCH_SIZE,
        template,
        &mut rng,
    )?;
    Ok(Evaluation { mean_peak_std: stats.mean_std(), stats, spread, eye_diff, occlusion })
}

/// Two images each of `RETRIEVAL_IDS` identities unseen in training.
pub fn retrieval_set(base: &DataConfig, template: &FaceTemplate) -> Result<Dataset> {
    generate(
        &DataConfig {
            num_ids: RETRIEVAL_IDS,
            samples_per_id: 2,
            test_per_id: 1,
            first_identity: RETRIEVAL_FIRST_ID,
            ..base.clone()
        },
        template,
    )
}

/// Rank-1 accuracy per named region: the training-split image of each
/// identity queries a gallery of the test-split images.
#[derive(Debug, Clone, PartialEq)]
pub struct PartRetrieval {
    pub region: String,
    pub filters: Vec<usize>,
    pub rank1: f64,
}

pub fn part_retrieval(
    model: &Model,
    stats: &PeakStats,
    pairs: &Dataset,
    template: &FaceTemplate,
    regions: &[&str],
) -> Result<Vec<PartRetrieval>> {
    let feature = |split| -> Result<Vec<Vec<f64>>> {
        pairs.subset(split).iter().map(|s| Ok(model.forward(&s.image)?.feature)).collect()
    };
    let queries = feature(Split::Train)?;
    let gallery = feature(Split::Test)?;
    regions
        .iter()
        .map(|&name| {
            let region =
                template.region(name).ok_or_else(|| Error::InvalidArgument(format!("no region `{}`", name)))?;
            let filters = analysis::part_filters(stats, &region.polygon);
            let rank1 = if filters.is_empty() { 0.0 } else { analysis::paired_rank1(&gallery, &queries, &filters)? };
            Ok(PartRetrieval { region: name.to_string(), filters, rank1 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("both".parse::<Variant>().is_err());
    }

    #[test]
    fn baseline_has_no_occluded_branch() {
        assert!(!Variant::Baseline.loss_weights().uses_occlusion());
        assert!(!Variant::SadOnly.loss_weights().uses_occlusion());
        assert!(Variant::SadFad.loss_weights().uses_occlusion());
        assert_eq!(Variant::Baseline.default_d_percent(), 0.0);
    }

    #[test]
    fn eye_occluder_sits_on_the_eyes() {
        let t = FaceTemplate::standard();
        let spec = eye_occluder(&t).unwrap();
        let Placement::Centered { x, y } = spec.placement else { panic!("centered") };
        assert!(crate::geometry::point_in_polygon(Point::new(x, y), &t.region("eyes").unwrap().polygon));
    }

    #[test]
    fn centroid_of_rectangle() {
        let r = [Point::new(0.0, 0.0), Point::new(4.0, 0.0), Point::new(4.0, 2.0), Point::new(0.0, 2.0)];
        let c = polygon_centroid(&r);
        assert!((c.x - 2.0).abs() < 1e-12 && (c.y - 1.0).abs() < 1e-12);
    }
}
