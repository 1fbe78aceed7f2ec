//! Flat TOML run configuration.
//!
//! Every key is optional. A `preset` (`toy` or `paper`) and a `variant`
//! (`baseline`, `sad`, `sad-fad`) pick the starting point; any other key
//! overrides one field of it.
//!
//! ```toml
//! preset = "toy"
//! variant = "sad-fad"
//! seed = 3
//! epochs = 20
//! fad_mode = "count:26"
//! occluder_placement = "at:48,38"
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::experiment::{toy_train_config, Variant};
use crate::network::NetConfig;
use crate::synthdata::DataConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    // data
    pub num_ids: Option<usize>,
    pub samples_per_id: Option<usize>,
    pub test_per_id: Option<usize>,
    pub first_identity: Option<usize>,
    pub data_seed: Option<u64>,
    pub image_size: Option<usize>,
    pub noise_std: Option<f64>,
    pub max_rotation_deg: Option<f64>,
    pub max_shift: Option<f64>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
    // network
    pub in_channels: Option<usize>,
    pub d_percent: Option<f64>,
    pub init: Option<String>,
    // training
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub decay_factor: Option<f64>,
    pub max_decays: Option<usize>,
    pub plateau_window: Option<usize>,
    pub plateau_tolerance: Option<f64>,
    pub weight_id: Option<f64>,
    pub weight_sad_filter: Option<f64>,
    pub weight_sad_response: Option<f64>,
    pub weight_fad: Option<f64>,
    pub weight_occluded: Option<f64>,
    pub fad_mode: Option<String>,
    pub response_sigma: Option<f64>,
    pub occluder_fill: Option<String>,
    pub occluder_size: Option<String>,
    pub occluder_placement: Option<String>,
    pub occluder_seed: Option<u64>,
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

fn parsed<T: FromStr<Err = Error>>(v: &Option<String>) -> Result<Option<T>> {
    v.as_deref().map(str::parse).transpose()
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let variant = parsed::<Variant>(&self.variant)?.unwrap_or(Variant::SadFad);
        let mut data = DataConfig::default();
        let mut net = match self.preset.as_deref().unwrap_or("toy") {
            "toy" => NetConfig::toy(data.num_ids),
            "paper" => NetConfig::paper(data.num_ids),
            other => return Err(Error::Parse(format!("config: unknown preset `{}`", other))),
        };
        let mut train = toy_train_config(variant, 0);
        net.d_percent = variant.default_d_percent();

        if let Some(seed) = self.seed {
            data.seed = seed;
            train.seed = seed;
        }
        set(&mut data.num_ids, self.num_ids);
        set(&mut data.samples_per_id, self.samples_per_id);
        set(&mut data.test_per_id, self.test_per_id);
        set(&mut data.first_identity, self.first_identity);
        set(&mut data.seed, self.data_seed);
        set(&mut data.render.noise_std, self.noise_std);
        set(&mut data.pose.max_rotation_deg, self.max_rotation_deg);
        set(&mut data.pose.max_shift, self.max_shift);
        set(&mut data.pose.scale.0, self.scale_min);
        set(&mut data.pose.scale.1, self.scale_max);
        data.render.size = self.image_size.unwrap_or(net.input_size);
        net.num_classes = data.num_ids;
        if self.preset.as_deref() == Some("paper") {
            // The synthetic faces are grayscale.
            net.in_channels = 1;
        }
        set(&mut net.in_channels, self.in_channels);
        set(&mut net.d_percent, self.d_percent);
        set(&mut net.init, parsed(&self.init)?);

        set(&mut train.lr, self.lr);
        set(&mut train.momentum, self.momentum);
        set(&mut train.batch_size, self.batch_size);
        set(&mut train.epochs, self.epochs);
        set(&mut train.decay_factor, self.decay_factor);
        set(&mut train.max_decays, self.max_decays);
        set(&mut train.plateau_window, self.plateau_window);
        set(&mut train.plateau_tolerance, self.plateau_tolerance);
        let w = &mut train.loss_weights;
        set(&mut w.id, self.weight_id);
        set(&mut w.sad_filter, self.weight_sad_filter);
        set(&mut w.sad_response, self.weight_sad_response);
        set(&mut w.fad, self.weight_fad);
        set(&mut w.occluded, self.weight_occluded);
        set(&mut train.fad_mode, parsed(&self.fad_mode)?);
        set(&mut train.response_sigma, self.response_sigma);
        let o = &mut train.occluder;
        set(&mut o.fill, parsed(&self.occluder_fill)?);
        set(&mut o.size, parsed(&self.occluder_size)?);
        set(&mut o.placement, parsed(&self.occluder_placement)?);
        set(&mut o.rng_seed, self.occluder_seed);

        if data.render.size != net.input_size {
            return Err(Error::InvalidArgument(format!(
                "image_size {} does not match the network input {}",
                data.render.size, net.input_size
            )));
        }
        net.validate()?;
        train.validate()?;
        Ok(RunConfig { data, net, train })
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => ConfigFile::load(p)?.resolve(),
            None => ConfigFile::default().resolve(),
        }
    }
}
