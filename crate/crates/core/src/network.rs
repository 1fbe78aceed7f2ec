//! Hypercolumn backbone.
//!
//! Five convolutional stages (stride 2 at the entry of every stage after the
//! first) feed a hypercolumn descriptor built at a quarter of the input
//! resolution: the third stage's output concatenated with 1x1 projections of
//! the upsampled fourth and fifth stages. A bias-free 3x3 filter bank turns the
//! descriptor into `K` response maps, which are magnitude-filtered, average
//! pooled into the feature vector and classified by a linear layer.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{Padding, UpsampleMode};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 5;

/// Index of the stage whose output resolution equals the hypercolumn's.
const TAP_STAGE: usize = 2;

/// Pixel intensities in `[0, 1]` are mapped to `[-1, 1]` before the first
/// conv. Uncentered inputs leave the ReLU stack dominated by the DC level
/// and training stalls.
pub fn normalize_input(image: &Tensor) -> Tensor {
    image.map(|v| 2.0 * v - 1.0)
}

/// Weight initialization scheme. Both draw from a normal distribution
/// truncated at two standard deviations; biases start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncatedNormal { std: f64 },
    /// `std = sqrt(2 / fan_in)`, per layer.
    ScaledTruncatedNormal,
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Init::TruncatedNormal { std } => write!(f, "normal:{}", std),
            Init::ScaledTruncatedNormal => f.write_str("scaled"),
        }
    }
}

impl std::str::FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "scaled" {
            return Ok(Init::ScaledTruncatedNormal);
        }
        let std = s
            .strip_prefix("normal:")
            .ok_or_else(|| Error::Parse(format!("expected `scaled` or `normal:<std>`, got `{}`", s)))?
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("{}: {}", s, e)))?;
        Ok(Init::TruncatedNormal { std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub input_size: usize,
    pub in_channels: usize,
    /// Output widths of the 3x3 convolutions, grouped by stage.
    pub stages: Vec<Vec<usize>>,
    /// Width of the 1x1 projections of the two deepest stages.
    pub proj_width: usize,
    /// Feature dimension `K` (number of response filters).
    pub num_filters: usize,
    pub hc_resolution: usize,
    /// LMF drop rate in percent.
    pub d_percent: f64,
    pub num_classes: usize,
    pub init: Init,
}

impl NetConfig {
    /// Full-size layout: 96x96 RGB input, 320-dimensional feature.
    pub fn paper(num_classes: usize) -> Self {
        NetConfig {
            input_size: 96,
            in_channels: 3,
            stages: vec![
                vec![32, 64],
                vec![64, 64, 128],
                vec![128, 96, 192],
                vec![192, 128, 256],
                vec![256, 160, 320],
            ],
            proj_width: 192,
            num_filters: 320,
            hc_resolution: 24,
            d_percent: 95.83,
            num_classes,
            init: Init::TruncatedNormal { std: 0.02 },
        }
    }

    /// Desk-scale layout: 32x32 grayscale input, one convolution per stage,
    /// 32-dimensional feature on an 8x8 hypercolumn.
    pub fn toy(num_classes: usize) -> Self {
        NetConfig {
            input_size: 32,
            in_channels: 1,
            stages: vec![vec![8], vec![16], vec![24], vec![32], vec![32]],
            proj_width: 16,
            num_filters: 32,
            hc_resolution: 8,
            d_percent: 95.83,
            num_classes,
            init: Init::ScaledTruncatedNormal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != NUM_STAGES || self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return arg_err(format!("need {} nonempty stages of positive widths", NUM_STAGES));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return arg_err(format!("input size {} must be a positive multiple of 16", self.input_size));
        }
        if self.hc_resolution * 4 != self.input_size {
            return arg_err(format!(
                "hypercolumn resolution {} must be a quarter of the input size {}",
                self.hc_resolution, self.input_size
            ));
        }
        if self.in_channels == 0 || self.proj_width == 0 || self.num_filters == 0 || self.num_classes == 0 {
            return arg_err("channel counts and class count must be positive");
        }
        if !(0.0..100.0).contains(&self.d_percent) {
            return arg_err(format!("LMF rate {} outside [0, 100)", self.d_percent));
        }
        if let Init::TruncatedNormal { std } = self.init {
            if !(std >= 0.0 && std.is_finite()) {
                return arg_err(format!("init std {}", std));
            }
        }
        Ok(())
    }

    /// Channels of the hypercolumn descriptor.
    pub fn phi_channels(&self) -> usize {
        self.stages[TAP_STAGE].last().copied().unwrap_or(0) + 2 * self.proj_width
    }

    /// Spatial side of stage `s`'s output.
    pub fn stage_resolution(&self, s: usize) -> usize {
        self.input_size >> s
    }

    /// Parameter names and shapes in their canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (s, widths) in self.stages.iter().enumerate() {
            for (j, &w) in widths.iter().enumerate() {
                out.push((format!("conv{}{}.weight", s + 1, j + 1), vec![w, c_in, 3, 3]));
                out.push((format!("conv{}{}.bias", s + 1, j + 1), vec![w]));
                c_in = w;
            }
        }
        for s in [3, 4] {
            let c = *self.stages[s].last().expect("validated");
            out.push((format!("proj{}.weight", s + 1), vec![self.proj_width, c, 1, 1]));
            out.push((format!("proj{}.bias", s + 1), vec![self.proj_width]));
        }
        out.push(("filters".into(), vec![self.num_filters, self.phi_channels(), 3, 3]));
        out.push(("classifier.weight".into(), vec![self.num_classes, self.num_filters]));
        out.push(("classifier.bias".into(), vec![self.num_classes]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Node handles of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// Input leaf, holding the normalized image.
    pub image: NodeId,
    pub phi: NodeId,
    pub psi: NodeId,
    pub psi_lmf: NodeId,
    pub feature: NodeId,
    pub logits: NodeId,
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub phi: Tensor,
    pub psi: Tensor,
    pub psi_lmf: Tensor,
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: NetConfig,
    params: Vec<(String, Arc<Tensor>)>,
}

fn truncated_normal(std: f64, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if std == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect())
}

impl Model {
    pub fn build(config: NetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let values = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let std = match config.init {
                    Init::TruncatedNormal { std } => std,
                    Init::ScaledTruncatedNormal => {
                        let fan_in: usize = shape[1..].iter().product();
                        (2.0 / fan_in as f64).sqrt()
                    }
                };
                truncated_normal(std, n, rng)?
            };
            params.push((name, Arc::new(Tensor::new(shape, values)?)));
        }
        Ok(Model { config, params })
    }

    /// Assemble a model from named tensors, checking names and shapes.
    pub fn from_params(config: NetConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return shape_err(format!("expected {} parameters, got {}", expected.len(), params.len()));
        }
        let mut out = Vec::with_capacity(params.len());
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(params) {
            if name != got_name || shape != t.shape() {
                return shape_err(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got_name,
                    t.shape(),
                    name,
                    shape
                ));
            }
            out.push((name, Arc::new(t)));
        }
        Ok(Model { config, params: out })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Change the LMF rate used by subsequent forward passes.
    pub fn set_d_percent(&mut self, d_percent: f64) -> Result<()> {
        if !(0.0..100.0).contains(&d_percent) {
            return arg_err(format!("LMF rate {} outside [0, 100)", d_percent));
        }
        self.config.d_percent = d_percent;
        Ok(())
    }

    pub fn params(&self) -> &[(String, Arc<Tensor>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Arc<Tensor>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// The `[K, C_hc, 3, 3]` response filter bank.
    pub fn filters(&self) -> &Tensor {
        self.param("filters").expect("model always has filters")
    }

    pub fn classifier(&self) -> (&Tensor, &Tensor) {
        (
            self.param("classifier.weight").expect("present"),
            self.param("classifier.bias").expect("present"),
        )
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.in_channels, c.input_size, c.input_size] {
            return shape_err(format!(
                "image shape {:?}, model expects [{}, {}, {}]",
                image.shape(),
                c.in_channels,
                c.input_size,
                c.input_size
            ));
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, name: &str) -> NodeId {
        let t = self.param(name).expect("parameter names come from the config");
        g.param(name, Arc::clone(t))
    }

    /// Record a forward pass in `g`. Parameters are registered by name, so
    /// several passes in one graph share the same parameter nodes.
    pub fn forward_graph(&self, g: &mut Graph, image: Tensor) -> Result<ForwardNodes> {
        self.check_image(&image)?;
        let cfg = &self.config;
        let image = g.input(normalize_input(&image));
        let mut x = image;
        let mut outputs = Vec::with_capacity(NUM_STAGES);
        for (s, widths) in cfg.stages.iter().enumerate() {
            for j in 0..widths.len() {
                let stride = if s > 0 && j == 0 { 2 } else { 1 };
                let w = self.p(g, &format!("conv{}{}.weight", s + 1, j + 1));
                let b = self.p(g, &format!("conv{}{}.bias", s + 1, j + 1));
                let y = g.conv2d(x, w, Some(b), stride, Padding::Same)?;
                x = g.relu(y)?;
            }
            outputs.push(x);
        }
        let mut columns = vec![outputs[TAP_STAGE]];
        for (s, factor) in [(3, 2), (4, 4)] {
            let up = g.upsample(outputs[s], factor, UpsampleMode::Nearest)?;
            let w = self.p(g, &format!("proj{}.weight", s + 1));
            let b = self.p(g, &format!("proj{}.bias", s + 1));
            let y = g.conv2d(up, w, Some(b), 1, Padding::Same)?;
            columns.push(g.relu(y)?);
        }
        let phi = g.concat_channels(&columns)?;
        let filters = self.p(g, "filters");
        let psi = g.conv2d(phi, filters, None, 1, Padding::Same)?;
        let psi_lmf = g.lmf(psi, cfg.d_percent)?;
        let feature = g.global_avg_pool(psi_lmf)?;
        let w = self.p(g, "classifier.weight");
        let b = self.p(g, "classifier.bias");
        let logits = g.linear(feature, w, Some(b))?;
        Ok(ForwardNodes { image, phi, psi, psi_lmf, feature, logits })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardResult> {
        let mut g = Graph::new();
        let n = self.forward_graph(&mut g, image.clone())?;
        Ok(ForwardResult {
            phi: g.value(n.phi).clone(),
            psi: g.value(n.psi).clone(),
            psi_lmf: g.value(n.psi_lmf).clone(),
            feature: g.value(n.feature).values().to_vec(),
            logits: g.value(n.logits).values().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(seed: u64) -> Model {
        Model::build(NetConfig::toy(5), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn paper_hypercolumn_has_576_channels() {
        let cfg = NetConfig::paper(10);
        cfg.validate().unwrap();
        assert_eq!(cfg.phi_channels(), 576);
        let shapes = cfg.param_shapes();
        let filters = shapes.iter().find(|(n, _)| n == "filters").unwrap();
        assert_eq!(filters.1, vec![320, 576, 3, 3]);
    }

    #[test]
    fn toy_param_count_matches_arithmetic() {
        let cfg = NetConfig::toy(5);
        // conv stages (weights + biases)
        let convs = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (24 * 16 * 9 + 24) + (32 * 24 * 9 + 32) + (32 * 32 * 9 + 32);
        let projections = 2 * (16 * 32 + 16);
        let filters = 32 * 56 * 9;
        let classifier = 5 * 32 + 5;
        assert_eq!(cfg.phi_channels(), 56);
        assert_eq!(cfg.param_count(), convs + projections + filters + classifier);
        assert_eq!(toy_model(1).param_count(), 38_269);
    }

    #[test]
    fn builds_are_deterministic() {
        let (a, b) = (toy_model(3), toy_model(3));
        for ((na, ta), (nb, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.values(), tb.values());
        }
        assert_ne!(toy_model(4).filters().values(), a.filters().values());
    }

    #[test]
    fn weights_are_truncated() {
        let mut cfg = NetConfig::toy(3);
        cfg.init = Init::TruncatedNormal { std: 0.02 };
        let m = Model::build(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (name, t) in m.params() {
            if name.ends_with(".bias") {
                assert!(t.values().iter().all(|&v| v == 0.0));
            } else {
                assert!(t.values().iter().all(|&v| v.abs() <= 0.04));
            }
        }
    }

    #[test]
    fn inconsistent_config_rejected() {
        let mut cfg = NetConfig::toy(3);
        cfg.hc_resolution = 16;
        assert!(Model::build(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut cfg = NetConfig::toy(3);
        cfg.stages.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_forward_shapes_and_pooling() {
        let m = toy_model(2);
        let img = Tensor::from_fn(&[1, 32, 32], |i| ((i * 37) % 101) as f64 / 100.0);
        let r = m.forward(&img).unwrap();
        assert_eq!(r.phi.shape(), &[56, 8, 8]);
        assert_eq!(r.psi.shape(), &[32, 8, 8]);
        assert_eq!(r.feature.len(), 32);
        assert_eq!(r.logits.len(), 5);
        let pooled = ops::global_avg_pool(&r.psi_lmf).unwrap();
        assert_eq!(pooled.values(), r.feature.as_slice());
        let keep = ops::lmf_keep_count(64, 95.83).unwrap();
        for k in 0..32 {
            assert!(r.psi_lmf.channel(k).iter().filter(|&&v| v != 0.0).count() <= keep);
        }
        assert!(m.forward(&Tensor::zeros(&[1, 16, 16])).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut cfg = NetConfig::toy(4);
        cfg.init = Init::TruncatedNormal { std: 0.0 };
        let m = Model::build(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = m.forward(&Tensor::zeros(&[1, 32, 32])).unwrap();
        assert!(r.feature.iter().all(|&v| v == 0.0));
        for p in ops::softmax(&r.logits) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn paper_preset_shapes() {
        let m = Model::build(NetConfig::paper(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let img = Tensor::filled(&[3, 96, 96], 0.5);
        let r = m.forward(&img).unwrap();
        assert_eq!(r.phi.shape(), &[576, 24, 24]);
        assert_eq!(r.psi.shape(), &[320, 24, 24]);
        assert_eq!(r.feature.len(), 320);
        for k in [0, 100, 319] {
            assert!(r.psi_lmf.channel(k).iter().filter(|&&v| v != 0.0).count() <= 24);
        }
    }

    #[test]
    fn init_parses() {
        assert_eq!("scaled".parse::<Init>().unwrap(), Init::ScaledTruncatedNormal);
        assert_eq!("normal:0.02".parse::<Init>().unwrap(), Init::TruncatedNormal { std: 0.02 });
        assert!("uniform".parse::<Init>().is_err());
    }
}
