//! Two-branch training with shared weights.
//!
//! Every pair in a batch is recorded in its own [`Graph`]; the clean and the
//! occluded pass of one pair live in the same graph, and because parameters
//! are registered by name both passes hold the very same `Arc` the model
//! owns. The feature selection mask is computed from all pairs of the batch
//! before any loss node is recorded, then frozen for the backward pass.
//! Per-pair gradients are reduced in pair order, so updates are
//! deterministic.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{arg_err, Error, Result};
use crate::geometry::{
    place_occluder, render_occlusion, warp_anchors, FaceTemplate, OccluderPlacement, OccluderSpec, Point,
};
use crate::graph::Graph;
use crate::losses::{self, FeatureMask, LossTerms, LossWeights, ThresholdMode};
use crate::network::Model;
use crate::synthdata::{Dataset, FaceSample, Split};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub max_decays: usize,
    /// Epochs over which the loss must improve by at least `plateau_tolerance`.
    pub plateau_window: usize,
    /// Relative improvement below which the loss counts as stalled.
    pub plateau_tolerance: f64,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    pub fad_mode: ThresholdMode,
    pub occluder: OccluderSpec,
    /// Gaussian smoothing of LMF responses in the response diversity term.
    pub response_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            decay_factor: 10.0,
            max_decays: 2,
            plateau_window: 3,
            plateau_tolerance: 0.01,
            epochs: 30,
            loss_weights: LossWeights::default(),
            fad_mode: ThresholdMode::Count(300),
            occluder: OccluderSpec::default(),
            response_sigma: 1.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return arg_err(format!("learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg_err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.plateau_window == 0 {
            return arg_err("batch size and plateau window must be positive");
        }
        if !(self.decay_factor > 1.0) {
            return arg_err(format!("decay factor {} must exceed 1", self.decay_factor));
        }
        if !(self.response_sigma > 0.0) {
            return arg_err(format!("response sigma {}", self.response_sigma));
        }
        Ok(())
    }
}

/// Clean/occluded image pairs sharing one template-space occluder.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub clean: Vec<Tensor>,
    pub occluded: Vec<Tensor>,
    pub landmarks: Vec<Vec<Point>>,
    pub labels: Vec<usize>,
    pub placement: OccluderPlacement,
    /// The occluder quad warped onto each image.
    pub quads: Vec<[Point; 4]>,
    pub occluded_pixels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Place one rectangle for the whole batch and render it onto every image
/// through the image's own landmark mesh.
pub fn make_pair_batch(
    samples: &[&FaceSample],
    labels: &[usize],
    occluder: &OccluderSpec,
    template: &FaceTemplate,
    rng: &mut impl Rng,
) -> Result<PairBatch> {
    if samples.len() != labels.len() {
        return arg_err(format!("{} samples but {} labels", samples.len(), labels.len()));
    }
    let placement = place_occluder(occluder, template, rng)?;
    let mut batch = PairBatch {
        clean: Vec::with_capacity(samples.len()),
        occluded: Vec::with_capacity(samples.len()),
        landmarks: Vec::with_capacity(samples.len()),
        labels: labels.to_vec(),
        placement,
        quads: Vec::with_capacity(samples.len()),
        occluded_pixels: Vec::with_capacity(samples.len()),
    };
    for s in samples {
        let quad = warp_anchors(&placement.anchors, template, &s.mesh_vertices(template)?)?;
        let out = render_occlusion(&s.image, &quad, occluder.fill, 1.0, rng)?;
        batch.clean.push(s.image.clone());
        batch.occluded.push(out.image);
        batch.landmarks.push(s.landmarks.clone());
        batch.quads.push(quad);
        batch.occluded_pixels.push(out.occluded_pixels);
    }
    Ok(batch)
}

/// SGD with momentum: `v <- mu v - lr g`, `w <- w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect() }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return arg_err("gradient list does not match the model");
        }
        for (((_, w), v), g) in model.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let w = Arc::make_mut(w);
            for ((wi, vi), gi) in w.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi - self.lr * gi;
                *wi += *vi;
            }
        }
        Ok(())
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Term values: the filter term once per batch, the rest averaged over pairs.
    pub terms: LossTerms,
    pub total: f64,
    pub mask: Option<FeatureMask>,
}

/// Whether every parameter leaf of `graph` is the model's own storage.
pub fn shares_model_storage(graph: &Graph, model: &Model) -> bool {
    graph.params().iter().all(|(name, id)| {
        model
            .param(name)
            .is_some_and(|t| Arc::ptr_eq(t, graph.value_arc(*id)))
    })
}

fn finite(term: &str, value: f64, detail: impl FnOnce() -> String) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term.into(), detail: detail() })
    }
}

/// Forward both branches, build all losses, backpropagate and return the
/// batch gradient (in model parameter order) without updating the model.
pub fn batch_gradients(model: &Model, batch: &PairBatch, config: &TrainConfig) -> Result<(Vec<Vec<f64>>, StepReport)> {
    if batch.is_empty() {
        return arg_err("empty batch");
    }
    let w = config.loss_weights;
    let occlusion = w.uses_occlusion();
    let n = batch.len() as f64;

    let mut graphs = Vec::with_capacity(batch.len());
    let mut clean_features = Vec::with_capacity(batch.len());
    let mut occluded_features = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let mut g = Graph::new();
        let clean = model.forward_graph(&mut g, batch.clean[i].clone())?;
        clean_features.push(g.value(clean.feature).values().to_vec());
        let occluded = if occlusion {
            let o = model.forward_graph(&mut g, batch.occluded[i].clone())?;
            occluded_features.push(g.value(o.feature).values().to_vec());
            Some(o)
        } else {
            None
        };
        debug_assert!(shares_model_storage(&g, model));
        graphs.push((g, clean, occluded));
    }
    let mask = if occlusion {
        Some(losses::fad_mask(&clean_features, &occluded_features, config.fad_mode)?)
    } else {
        None
    };

    let names = model.params();
    let mut grads: Vec<Vec<f64>> = names.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut terms = LossTerms::default();
    for (i, (mut g, clean, occluded)) in graphs.into_iter().enumerate() {
        let label = batch.labels[i];
        let id = g.softmax_xent(clean.logits, label)?;
        let smoothed = g.gaussian_blur(clean.psi_lmf, config.response_sigma)?;
        let sad_r = g.sad_response(smoothed)?;
        let mut parts = vec![(id, w.id / n), (sad_r, w.sad_response / n)];
        let dump = |name: &str, v: f64| format!("pair {} (label {}): {} = {}", i, label, name, v);
        terms.id += finite("L_id", g.value(id).values()[0], || dump("L_id", g.value(id).values()[0]))? / n;
        let r = g.value(sad_r).values()[0];
        terms.sad_response += finite("L_sad_r", r, || dump("L_sad_r", r))? / n;
        if let (Some(o), Some(mask)) = (occluded, &mask) {
            let fad = g.masked_l1(clean.feature, o.feature, mask.as_f64())?;
            let cw = g.param("classifier.weight", Arc::clone(model.param("classifier.weight").expect("present")));
            let cb = g.param("classifier.bias", Arc::clone(model.param("classifier.bias").expect("present")));
            let occ = losses::occluded_id_loss_node(&mut g, o.feature, mask, cw, cb, label)?;
            let (fv, ov) = (g.value(fad).values()[0], g.value(occ).values()[0]);
            terms.fad += finite("L_fad", fv, || dump("L_fad", fv))? / n;
            terms.occluded += finite("L_occ", ov, || dump("L_occ", ov))? / n;
            parts.push((fad, w.fad / n));
            parts.push((occ, w.occluded / n));
        }
        let loss = g.weighted_sum(&parts)?;
        g.backward(loss)?;
        for ((gsum, (name, _)), (gname, gv)) in grads.iter_mut().zip(names).zip(g.param_grads()) {
            debug_assert_eq!(name, &gname);
            for (a, b) in gsum.iter_mut().zip(gv) {
                *a += b;
            }
        }
    }

    // The filter term depends only on the weights: once per batch.
    let mut g = Graph::new();
    let filters = g.param("filters", Arc::clone(model.param("filters").expect("present")));
    let sad_f = g.sad_filter(filters)?;
    let fv = g.value(sad_f).values()[0];
    terms.sad_filter = finite("L_sad_f", fv, || format!("filter bank term = {}", fv))?;
    if w.sad_filter > 0.0 {
        let scaled = g.weighted_sum(&[(sad_f, w.sad_filter)])?;
        g.backward(scaled)?;
        let fg = g.grad(filters).map(<[f64]>::to_vec).unwrap_or_default();
        let slot = names.iter().position(|(n, _)| n == "filters").expect("present");
        for (a, b) in grads[slot].iter_mut().zip(fg) {
            *a += b;
        }
    }
    let total = losses::total_loss(&terms, &w)?;
    finite("total", total, || format!("{:?}", terms))?;
    Ok((grads, StepReport { terms, total, mask }))
}

/// One SGD step on `batch`.
pub fn train_step(model: &mut Model, opt: &mut Sgd, batch: &PairBatch, config: &TrainConfig) -> Result<StepReport> {
    let (grads, report) = batch_gradients(model, batch, config)?;
    opt.step(model, &grads)?;
    Ok(report)
}

/// Per-epoch log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epochs after which the learning rate was divided.
    pub decays: Vec<usize>,
}

pub const LOG_HEADER: &str = "epoch,lr,L_id,L_sad_f,L_sad_r,L_fad,L_occ,total";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let t = r.terms.as_array();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.lr, t[0], t[1], t[2], t[3], t[4], r.total
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Something that can be trained one epoch at a time at a given rate.
pub trait Learner {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<(LossTerms, f64)>;
    /// Called after each learning-rate decay and once at the end.
    fn checkpoint(&mut self, _tag: &str) -> Result<()> {
        Ok(())
    }
}

/// Plateau-based learning-rate decay: once `window` epochs have passed since
/// the last change, the rate is divided by `factor` if the epoch loss has
/// improved by less than `tolerance` (relative) over those epochs.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    window: usize,
    tolerance: f64,
    max_decays: usize,
    decays: usize,
    history: Vec<f64>,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, window: usize, tolerance: f64, max_decays: usize) -> Self {
        PlateauSchedule { lr, factor, window, tolerance, max_decays, decays: 0, history: Vec::new() }
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Record an epoch's loss; returns true if the rate was just decayed.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        if self.decays >= self.max_decays || self.history.len() <= self.window {
            return false;
        }
        let reference = self.history[self.history.len() - 1 - self.window];
        let improvement = (reference - loss) / reference.abs().max(f64::MIN_POSITIVE);
        if improvement < self.tolerance {
            self.lr /= self.factor;
            self.decays += 1;
            // Fresh window after a change.
            self.history.clear();
            self.history.push(loss);
            true
        } else {
            false
        }
    }
}

/// Run the epoch loop with plateau decay.
pub fn fit_with<L: Learner>(learner: &mut L, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    let mut schedule = PlateauSchedule::new(
        config.lr,
        config.decay_factor,
        config.plateau_window,
        config.plateau_tolerance,
        config.max_decays,
    );
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let lr = schedule.lr;
        let (terms, total) = learner.train_epoch(epoch, lr)?;
        log.records.push(EpochRecord { epoch, lr, terms, total });
        log::info!("epoch {} lr {:e} total {:.6}", epoch, lr, total);
        if schedule.observe(total) {
            log.decays.push(epoch);
            learner.checkpoint(&format!("decay{}", schedule.decays()))?;
        }
    }
    learner.checkpoint("final")?;
    Ok(log)
}

/// Trains a [`Model`] on the training split of a [`Dataset`].
pub struct ModelLearner<'a> {
    pub model: Model,
    pub opt: Sgd,
    dataset: &'a Dataset,
    template: &'a FaceTemplate,
    config: TrainConfig,
    order_rng: ChaCha8Rng,
    occluder_rng: ChaCha8Rng,
    checkpoint_dir: Option<&'a Path>,
}

impl<'a> ModelLearner<'a> {
    pub fn new(
        model: Model,
        dataset: &'a Dataset,
        template: &'a FaceTemplate,
        config: TrainConfig,
        checkpoint_dir: Option<&'a Path>,
    ) -> Self {
        let opt = Sgd::new(&model, config.lr, config.momentum);
        let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
        order_rng.set_stream(1);
        let occluder_rng = config.occluder.rng(config.seed.wrapping_add(1 << 32));
        ModelLearner { model, opt, dataset, template, config, order_rng, occluder_rng, checkpoint_dir }
    }
}

impl Learner for ModelLearner<'_> {
    fn train_epoch(&mut self, _epoch: usize, lr: f64) -> Result<(LossTerms, f64)> {
        self.opt.lr = lr;
        let mut order = self.dataset.indices(Split::Train);
        if order.is_empty() {
            return arg_err("the training split is empty");
        }
        order.shuffle(&mut self.order_rng);
        let mut sum = [0.0; 5];
        let mut total = 0.0;
        let count = order.len() as f64;
        for chunk in order.chunks(self.config.batch_size) {
            let samples: Vec<&FaceSample> = chunk.iter().map(|&i| &self.dataset.samples[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| self.dataset.label(i)).collect();
            let batch = make_pair_batch(&samples, &labels, &self.config.occluder, self.template, &mut self.occluder_rng)?;
            let report = train_step(&mut self.model, &mut self.opt, &batch, &self.config)?;
            let share = chunk.len() as f64 / count;
            for (s, t) in sum.iter_mut().zip(report.terms.as_array()) {
                *s += share * t;
            }
            total += share * report.total;
        }
        let terms = LossTerms { id: sum[0], sad_filter: sum[1], sad_response: sum[2], fad: sum[3], occluded: sum[4] };
        Ok((terms, total))
    }

    fn checkpoint(&mut self, tag: &str) -> Result<()> {
        if let Some(dir) = self.checkpoint_dir {
            fs::create_dir_all(dir)?;
            checkpoint::save(&self.model, &dir.join(format!("{}.ckpt", tag)))?;
        }
        Ok(())
    }
}

/// Train `model` on `dataset` and return it with the training log.
pub fn fit(
    model: Model,
    dataset: &Dataset,
    template: &FaceTemplate,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Model, TrainLog)> {
    if dataset.indices(Split::Train).is_empty() {
        return arg_err("the training split is empty");
    }
    let mut learner = ModelLearner::new(model, dataset, template, config.clone(), checkpoint_dir);
    let log = fit_with(&mut learner, config)?;
    Ok((learner.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Fill, Placement, SizeMode};
    use crate::network::NetConfig;
    use crate::synthdata::{generate, DataConfig, IdentityParams, Pose, RenderOptions};

    fn tiny_data(num_ids: usize, per_id: usize) -> Dataset {
        let cfg = DataConfig {
            num_ids,
            samples_per_id: per_id,
            test_per_id: 0,
            ..DataConfig::default()
        };
        generate(&cfg, &FaceTemplate::standard()).unwrap()
    }

    fn toy(num_classes: usize, seed: u64) -> Model {
        Model::build(NetConfig::toy(num_classes), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn batch_of(d: &Dataset, idx: &[usize], spec: &OccluderSpec, seed: u64) -> PairBatch {
        let samples: Vec<&FaceSample> = idx.iter().map(|&i| &d.samples[i]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| d.label(i)).collect();
        make_pair_batch(&samples, &labels, spec, &FaceTemplate::standard(), &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    }

    #[test]
    fn identical_frontal_faces_get_identical_occlusions() {
        let t = FaceTemplate::standard();
        let id = IdentityParams::sample(0, 0);
        let opts = RenderOptions { noise_std: 0.0, ..RenderOptions::default() };
        let s = crate::synthdata::render_face(&id, 0, Pose::IDENTITY, &t, &opts, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let samples = vec![&s; 4];
        let b = make_pair_batch(&samples, &[0; 4], &OccluderSpec::default(), &t, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        for i in 1..4 {
            assert_eq!(b.occluded[i], b.occluded[0]);
            assert_eq!(b.clean[i].values(), s.image.values());
        }
        assert!(b.occluded_pixels[0] > 0);
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let d = tiny_data(2, 3);
        let mut m = toy(2, 0);
        let before = m.clone();
        let mut cfg = TrainConfig { loss_weights: LossWeights::zero(), ..TrainConfig::default() };
        cfg.fad_mode = ThresholdMode::Count(26);
        let mut opt = Sgd::new(&m, 0.1, 0.9);
        let b = batch_of(&d, &[0, 1, 3, 4], &OccluderSpec::default(), 0);
        for _ in 0..2 {
            train_step(&mut m, &mut opt, &b, &cfg).unwrap();
        }
        for ((_, a), (_, b)) in m.params().iter().zip(before.params()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn branches_share_parameter_storage() {
        let d = tiny_data(2, 2);
        let m = toy(2, 1);
        let mut g = Graph::new();
        m.forward_graph(&mut g, d.samples[0].image.clone()).unwrap();
        m.forward_graph(&mut g, d.samples[1].image.clone()).unwrap();
        assert_eq!(g.params().len(), m.params().len());
        assert!(shares_model_storage(&g, &m));
    }

    #[test]
    fn masked_features_get_no_occlusion_gradient() {
        // With only the FAD and occluded-id terms active, feature elements
        // outside the mask carry zero gradient in both branches.
        let d = tiny_data(2, 2);
        let m = toy(2, 2);
        let b = batch_of(&d, &[0, 2], &OccluderSpec::default(), 3);
        let cfg = TrainConfig {
            loss_weights: LossWeights { fad: 1.0, occluded: 1.0, ..LossWeights::zero() },
            fad_mode: ThresholdMode::Count(10),
            ..TrainConfig::default()
        };
        let (_, report) = batch_gradients(&m, &b, &cfg).unwrap();
        let mask = report.mask.unwrap();
        let mut g = Graph::new();
        let c = m.forward_graph(&mut g, b.clean[0].clone()).unwrap();
        let o = m.forward_graph(&mut g, b.occluded[0].clone()).unwrap();
        let fad = g.masked_l1(c.feature, o.feature, mask.as_f64()).unwrap();
        let cw = g.param("classifier.weight", Arc::clone(m.param("classifier.weight").unwrap()));
        let cb = g.param("classifier.bias", Arc::clone(m.param("classifier.bias").unwrap()));
        let occ = losses::occluded_id_loss_node(&mut g, o.feature, &mask, cw, cb, b.labels[0]).unwrap();
        let loss = g.weighted_sum(&[(fad, 1.0), (occ, 1.0)]).unwrap();
        g.backward(loss).unwrap();
        for (k, &keep) in mask.bits.iter().enumerate() {
            if !keep {
                assert_eq!(g.grad(c.feature).map_or(0.0, |v| v[k]), 0.0);
                assert_eq!(g.grad(o.feature).map_or(0.0, |v| v[k]), 0.0);
            }
        }
    }

    #[test]
    fn identity_loss_decreases_on_two_classes() {
        let d = tiny_data(2, 8);
        let mut m = toy(2, 5);
        let cfg = TrainConfig {
            loss_weights: LossWeights { id: 1.0, ..LossWeights::zero() },
            ..TrainConfig::default()
        };
        let mut opt = Sgd::new(&m, 0.01, 0.9);
        let idx: Vec<usize> = (0..16).collect();
        let b = batch_of(&d, &idx, &OccluderSpec::default(), 0);
        let first = train_step(&mut m, &mut opt, &b, &cfg).unwrap().terms.id;
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut m, &mut opt, &b, &cfg).unwrap().terms.id;
        }
        assert!(last < first, "{} -> {}", first, last);
    }

    struct Constant(usize);
    impl Learner for Constant {
        fn train_epoch(&mut self, _epoch: usize, _lr: f64) -> Result<(LossTerms, f64)> {
            self.0 += 1;
            Ok((LossTerms::default(), 1.0))
        }
    }

    #[test]
    fn constant_loss_decays_exactly_twice() {
        let cfg = TrainConfig { epochs: 20, plateau_window: 3, lr: 0.1, ..TrainConfig::default() };
        let mut l = Constant(0);
        let log = fit_with(&mut l, &cfg).unwrap();
        assert_eq!(l.0, 20);
        assert_eq!(log.records.len(), 20);
        assert_eq!(log.decays.len(), 2);
        let mut rates: Vec<f64> = log.records.iter().map(|r| r.lr).collect();
        rates.dedup();
        assert_eq!(rates.len(), 3);
        assert!((rates[1] - 0.01).abs() < 1e-15 && (rates[2] - 0.001).abs() < 1e-15);
        assert_eq!(log.to_csv().lines().count(), 21);
    }

    #[test]
    fn static_occluder_area_fraction() {
        // 96x96 faces under the default pose range: each image loses between
        // 0.3% and 12% of its pixels to the 32x12 rectangle.
        let t = FaceTemplate::standard();
        let cfg = DataConfig {
            num_ids: 4,
            samples_per_id: 4,
            test_per_id: 0,
            render: RenderOptions { size: 96, supersample: 1, ..RenderOptions::default() },
            ..DataConfig::default()
        };
        let d = generate(&cfg, &t).unwrap();
        let spec = OccluderSpec { fill: Fill::GaussianNoise, size: SizeMode::Static, placement: Placement::Random, rng_seed: 3 };
        let samples: Vec<&FaceSample> = d.samples.iter().collect();
        let labels: Vec<usize> = (0..d.len()).map(|i| d.label(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..40 {
            let b = make_pair_batch(&samples, &labels, &spec, &t, &mut rng).unwrap();
            for &p in &b.occluded_pixels {
                let frac = p as f64 / (96.0 * 96.0);
                assert!((0.003..=0.12).contains(&frac), "{}", frac);
            }
        }
    }
}
