use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use facerep::analysis::{self, OcclusionEval};
use facerep::checkpoint;
use facerep::config::{ConfigFile, RunConfig};
use facerep::experiment::{self, eye_occluder, part_retrieval, retrieval_set};
use facerep::geometry::FaceTemplate;
use facerep::network::Model;
use facerep::synthdata::{self, Dataset, DatasetDir, FaceSample, FaceSource, Split};

#[derive(Parser)]
#[command(name = "facerep", version, about = "Train and inspect interpretable face representation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed for data, training and analysis.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelInput {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by `gen-data`; generated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic face dataset with landmarks and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model; writes checkpoints and the epoch log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-filter peak locations and spreads on the test split.
    Peaks {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
    },
    /// Spreadness of the average peak locations.
    Spread {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
    },
    /// Feature change under an occluder, plus masked-feature accuracy.
    Diff {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        /// Use the configured occluder instead of the eye-region one.
        #[arg(long)]
        configured_occluder: bool,
    },
    /// Part-based retrieval on pairs of unseen identities.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, value_delimiter = ',', default_value = "eyes,nose,mouth")]
        regions: Vec<String>,
    },
    /// Filter response overlays as PPM images.
    Heatmaps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        filters: Vec<usize>,
        /// Number of test samples to render.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Write occluded copies of a dataset.
    Occlude {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut file = match &common.config {
        Some(p) => ConfigFile::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ConfigFile::default(),
    };
    if common.seed.is_some() {
        file.seed = common.seed;
    }
    Ok(file.resolve()?)
}

fn load_data(dir: Option<&Path>, rc: &RunConfig, template: &FaceTemplate) -> Result<Dataset> {
    Ok(match dir {
        Some(d) => DatasetDir(d.to_path_buf()).load().with_context(|| format!("loading {}", d.display()))?,
        None => synthdata::generate(&rc.data, template)?,
    })
}

fn load_model(input: &ModelInput) -> Result<Model> {
    checkpoint::load(&input.checkpoint).with_context(|| format!("loading {}", input.checkpoint.display()))
}

fn test_samples(data: &Dataset) -> Result<Vec<&FaceSample>> {
    let s = data.subset(Split::Test);
    if s.is_empty() {
        bail!("the dataset has no test split");
    }
    Ok(s)
}

fn write(path: PathBuf, text: String) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let template = FaceTemplate::standard();
    match cli.command {
        Command::GenData { common } => {
            let rc = run_config(&common)?;
            let entries = synthdata::gen_dataset(&rc.data, &template, &common.out)?;
            info!("wrote {} samples to {}", entries.len(), common.out.display());
        }
        Command::Train { common, data } => {
            let rc = run_config(&common)?;
            let data = load_data(data.as_deref(), &rc, &template)?;
            let mut net = rc.net.clone();
            net.num_classes = data.num_ids;
            fs::create_dir_all(&common.out)?;
            let (_, log) = experiment::train_model(net, &rc.train, &data, &template, Some(&common.out))?;
            log.write_csv(&common.out.join("train_log.csv"))?;
            info!("trained {} epochs, lr decays after epochs {:?}", log.records.len(), log.decays);
        }
        Command::Peaks { common, input } => {
            let rc = run_config(&common)?;
            let model = load_model(&input)?;
            let data = load_data(input.data.as_deref(), &rc, &template)?;
            let stats = analysis::peak_stats(&model, &test_samples(&data)?, &template)?;
            if stats.total_skipped() > 0 {
                warn!("{} peaks fell outside the mesh and were skipped", stats.total_skipped());
            }
            fs::create_dir_all(&common.out)?;
            write(common.out.join("peaks.csv"), stats.to_csv())?;
        }
        Command::Spread { common, input } => {
            let rc = run_config(&common)?;
            let model = load_model(&input)?;
            let data = load_data(input.data.as_deref(), &rc, &template)?;
            let stats = analysis::peak_stats(&model, &test_samples(&data)?, &template)?;
            let s = analysis::spreadness(&stats)?;
            fs::create_dir_all(&common.out)?;
            write(
                common.out.join("spread.csv"),
                format!(
                    "positive,negative,mean,mean_peak_std\n{},{},{},{}\n",
                    s.positive,
                    s.negative,
                    s.mean,
                    stats.mean_std()
                ),
            )?;
        }
        Command::Diff { common, input, configured_occluder } => {
            let rc = run_config(&common)?;
            let model = load_model(&input)?;
            let data = load_data(input.data.as_deref(), &rc, &template)?;
            let samples = test_samples(&data)?;
            let spec = if configured_occluder { rc.train.occluder } else { eye_occluder(&template)? };
            let mut rng = ChaCha8Rng::seed_from_u64(rc.train.seed);
            let profile = analysis::feature_diff(&model, &samples, &spec, &template, &mut rng)?;
            let labels: Vec<usize> = data.indices(Split::Test).iter().map(|&i| data.label(i)).collect();
            let eval: OcclusionEval = analysis::occlusion_eval(
                &model,
                &samples,
                &labels,
                &rc.train.occluder,
                rc.train.fad_mode,
                rc.train.batch_size,
                &template,
                &mut rng,
            )?;
            fs::create_dir_all(&common.out)?;
            write(common.out.join("diff.csv"), profile.to_csv())?;
            write(
                common.out.join("occlusion_accuracy.csv"),
                format!(
                    "clean,occluded,masked,mask_size\n{},{},{},{}\n",
                    eval.clean_accuracy,
                    eval.occluded_accuracy,
                    eval.masked_accuracy,
                    eval.masks.first().map_or(0, |m| m.count())
                ),
            )?;
            info!("mean feature difference {:.4}", profile.mean());
        }
        Command::Retrieve { common, input, regions } => {
            let rc = run_config(&common)?;
            let model = load_model(&input)?;
            let data = load_data(input.data.as_deref(), &rc, &template)?;
            let stats = analysis::peak_stats(&model, &test_samples(&data)?, &template)?;
            let pairs = retrieval_set(&rc.data, &template)?;
            let names: Vec<&str> = regions.iter().map(String::as_str).collect();
            let results = part_retrieval(&model, &stats, &pairs, &template, &names)?;
            let mut csv = String::from("region,num_filters,filters,rank1\n");
            for r in &results {
                let filters: Vec<String> = r.filters.iter().map(ToString::to_string).collect();
                csv.push_str(&format!("{},{},{},{}\n", r.region, r.filters.len(), filters.join("|"), r.rank1));
            }
            fs::create_dir_all(&common.out)?;
            write(common.out.join("retrieval.csv"), csv)?;
        }
        Command::Heatmaps { common, input, filters, samples } => {
            let rc = run_config(&common)?;
            let model = load_model(&input)?;
            let data = load_data(input.data.as_deref(), &rc, &template)?;
            let test = test_samples(&data)?;
            let chosen = &test[..samples.min(test.len())];
            let paths = analysis::export_heatmaps(&model, chosen, &filters, &common.out)?;
            info!("wrote {} heat maps to {}", paths.len(), common.out.display());
        }
        Command::Occlude { common, data } => {
            let rc = run_config(&common)?;
            let mut data = load_data(data.as_deref(), &rc, &template)?;
            let mut rng = rc.train.occluder.rng(rc.train.seed);
            for s in &mut data.samples {
                let image = analysis::occlude_samples(&[s], &rc.train.occluder, &template, &mut rng)?;
                s.image = image.into_iter().next().expect("one image");
            }
            let entries = synthdata::write_dataset(&data, &common.out)?;
            info!("wrote {} occluded samples to {}", entries.len(), common.out.display());
        }
    }
    Ok(())
}
