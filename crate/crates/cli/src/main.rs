use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spike_sparse::data_io::{load_tensor, read_manifest, save_xyz, write_manifest, DataError, LoadOptions};
use spike_sparse::network::{Network, NetworkError, NetworkSpec, Variant};
use spike_sparse::profiler::{average_stats, estimate_energy, estimate_energy_dense, firing_stats, report_text, EnergyModel};
use spike_sparse::selftest::run_selftest;
use spike_sparse::sparse_conv::{swt, ConvError};
use spike_sparse::sparse_core::{svt, SparseError, SparseVoxelTensor};
use spike_sparse::trainer::{fit, make_toy_dataset, OptimizerKind, Sample, TrainConfig, TrainError, TOY_CLASSES};
use spike_sparse::voxelizer::{FeatureMode, VoxelConfig, VoxelError};

#[derive(Parser)]
#[command(name = "spike-sparse", version, about = "Spiking sparse 3D convolution toolkit")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize a point cloud or mesh into a .svt tensor.
    Voxelize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        voxel: VoxelArgs,
    },
    /// Train a model on a manifest of labelled inputs.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        /// Output weight file; the network config is written next to it.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Line-delimited JSON training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        voxel: VoxelArgs,
    },
    /// Top-1 accuracy of a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        voxel: VoxelArgs,
    },
    /// Per-layer firing rates, operation counts and energy estimate.
    Profile {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input files; averaged when several are given.
        #[arg(long, required_unless_present = "manifest")]
        input: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        voxel: VoxelArgs,
    },
    /// Run the built-in oracle and invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic four-class shape dataset.
    GenToy {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct VoxelArgs {
    /// modelnet or kitti.
    #[arg(long, default_value = "modelnet")]
    preset: String,
    /// One edge length, or three comma-separated.
    #[arg(long)]
    voxel_size: Option<String>,
    /// Symmetric half-width, or min_x,min_y,min_z,max_x,max_y,max_z.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    feature_mode: Option<String>,
    /// Points sampled from each mesh.
    #[arg(long, default_value_t = 1024)]
    mesh_points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value = "T")]
    variant: String,
    #[arg(long, default_value_t = 1)]
    timesteps: usize,
    #[arg(long, default_value_t = 4)]
    dmax: u32,
    /// Defaults to the largest label in the manifest plus one.
    #[arg(long)]
    num_classes: Option<usize>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 0.1)]
    lr: f32,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f32,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// sgd, adam or adamw.
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    #[arg(long)]
    no_cosine: bool,
    #[arg(long)]
    no_calibrate: bool,
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SparseError> for CliError {
    fn from(e: SparseError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConvError> for CliError {
    fn from(e: ConvError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VoxelError> for CliError {
    fn from(e: VoxelError) -> Self {
        match e {
            VoxelError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Usage(m),
            TrainError::Network(n) => n.into(),
            TrainError::Voxel(v) => v.into(),
            TrainError::EmptyDataset => CliError::Data(e.to_string()),
        }
    }
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad {what} {s:?}")))
}

impl VoxelArgs {
    fn config(&self) -> Result<VoxelConfig, CliError> {
        let mut cfg = match self.preset.as_str() {
            "modelnet" => VoxelConfig::modelnet(),
            "kitti" => VoxelConfig::kitti(),
            other => return Err(CliError::Usage(format!("unknown preset {other:?}"))),
        };
        if let Some(v) = &self.voxel_size {
            cfg.voxel_size = match parse_floats(v, "voxel size")?[..] {
                [a] => [a; 3],
                [a, b, c] => [a, b, c],
                _ => return Err(CliError::Usage("voxel size needs 1 or 3 values".into())),
            };
        }
        if let Some(c) = &self.clip {
            match parse_floats(c, "clip range")?[..] {
                [r] => {
                    cfg.clip_min = [-r; 3];
                    cfg.clip_max = [r; 3];
                }
                [a, b, c, d, e, f] => {
                    cfg.clip_min = [a, b, c];
                    cfg.clip_max = [d, e, f];
                }
                _ => return Err(CliError::Usage("clip range needs 1 or 6 values".into())),
            }
        }
        if let Some(m) = &self.feature_mode {
            cfg.feature_mode = m.parse::<FeatureMode>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn load_options(&self) -> Result<LoadOptions, CliError> {
        Ok(LoadOptions {
            voxel: self.config()?,
            mesh_points: self.mesh_points,
            seed: self.seed,
        })
    }
}

fn voxel_json(cfg: &VoxelConfig) -> serde_json::Value {
    json!({
        "clip_min": cfg.clip_min,
        "clip_max": cfg.clip_max,
        "voxel_size": cfg.voxel_size,
        "feature_mode": cfg.feature_mode.name(),
        "grid": cfg.grid_shape(),
    })
}

fn echo(command: &str, config: serde_json::Value) {
    eprintln!("{}", json!({ "command": command, "config": config }));
}

fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("cfg")
}

fn load_model(checkpoint: &Path) -> Result<Network, CliError> {
    let cfg_path = config_path(checkpoint);
    let text = fs::read_to_string(&cfg_path).map_err(|e| CliError::Data(format!("{}: {e}", cfg_path.display())))?;
    let spec = NetworkSpec::from_config_text(&text)?;
    let layers = swt::load_swt(checkpoint)?;
    Ok(Network::from_layers(spec, layers)?)
}

fn load_samples(net: &Network, manifest: &Path, opts: &LoadOptions) -> Result<Vec<Sample>, CliError> {
    let entries = read_manifest(manifest)?;
    entries
        .iter()
        .map(|e| {
            let t = load_tensor(&e.path, opts)?;
            Ok(Sample::new(net, &t, e.label)?)
        })
        .collect()
}

fn load_tensors(paths: &[PathBuf], opts: &LoadOptions) -> Result<Vec<SparseVoxelTensor>, CliError> {
    paths.iter().map(|p| Ok(load_tensor(p, opts)?)).collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Voxelize { input, output, voxel } => {
            let opts = voxel.load_options()?;
            echo(
                "voxelize",
                json!({ "input": input, "output": output, "voxel": voxel_json(&opts.voxel), "mesh_points": opts.mesh_points, "seed": opts.seed }),
            );
            let t = load_tensor(&input, &opts)?;
            svt::save_svt(&t, &output)?;
            println!("{}", json!({ "active": t.num_active(), "channels": t.channels(), "shape": t.spatial_shape() }));
        }
        Command::Train {
            manifest,
            test_manifest,
            checkpoint,
            log,
            model,
            train,
            voxel,
        } => {
            let opts = voxel.load_options()?;
            let entries = read_manifest(&manifest)?;
            if entries.is_empty() {
                return Err(CliError::Data(format!("{}: no entries", manifest.display())));
            }
            let classes = model
                .num_classes
                .unwrap_or_else(|| entries.iter().map(|e| e.label).max().unwrap_or(0) + 1);
            let variant: Variant = model.variant.parse()?;
            if variant == Variant::Custom {
                return Err(CliError::Usage("--variant must be one of T, S, B, L".into()));
            }
            let mut spec = NetworkSpec::variant(variant, opts.voxel.feature_mode.channels(), classes);
            spec.timesteps = model.timesteps;
            spec.neuron.d_max = model.dmax;
            spec.validate()?;
            let cfg = TrainConfig {
                lr: train.lr,
                weight_decay: train.weight_decay,
                batch_size: train.batch_size,
                epochs: train.epochs,
                optimizer: train.optimizer.parse::<OptimizerKind>()?,
                cosine: !train.no_cosine,
                calibrate_rms: if train.no_calibrate { None } else { TrainConfig::default().calibrate_rms },
                seed: voxel.seed,
                ..TrainConfig::default()
            };
            cfg.validate()?;
            echo(
                "train",
                json!({
                    "manifest": manifest,
                    "test_manifest": test_manifest,
                    "checkpoint": checkpoint,
                    "network": spec.to_config_text(),
                    "train": serde_json::to_value(&cfg).map_err(|e| CliError::Usage(e.to_string()))?,
                    "voxel": voxel_json(&opts.voxel),
                }),
            );
            let mut net = Network::new(spec.clone(), cfg.seed)?;
            let train_set = load_samples(&net, &manifest, &opts)?;
            let test_set = test_manifest.map(|m| load_samples(&net, &m, &opts)).transpose()?;
            let log_path = log.unwrap_or_else(|| checkpoint.with_extension("log.jsonl"));
            let mut log_file = BufWriter::new(File::create(&log_path)?);
            let mut io_err = None;
            let history = fit(
                &mut net,
                &train_set,
                test_set.as_deref(),
                &cfg,
                |r| {
                    if let Err(e) = serde_json::to_writer(&mut log_file, r)
                        .map_err(std::io::Error::other)
                        .and_then(|_| writeln!(log_file))
                    {
                        io_err.get_or_insert(e);
                    }
                },
                |e| println!("{}", serde_json::to_string(e).unwrap_or_default()),
            )?;
            log_file.flush()?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            swt::save_swt(&net.weights().to_layers(), &checkpoint)?;
            fs::write(config_path(&checkpoint), spec.to_config_text())?;
            if let Some(last) = history.last() {
                println!("{}", json!({ "final": last, "checkpoint": checkpoint }));
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            voxel,
        } => {
            let opts = voxel.load_options()?;
            let net = load_model(&checkpoint)?;
            echo(
                "eval",
                json!({ "checkpoint": checkpoint, "manifest": manifest, "network": net.spec().to_config_text(), "voxel": voxel_json(&opts.voxel) }),
            );
            let data = load_samples(&net, &manifest, &opts)?;
            let acc = spike_sparse::trainer::evaluate(&net, &data)?;
            println!("{}", json!({ "accuracy": acc, "samples": data.len() }));
        }
        Command::Profile {
            checkpoint,
            mut input,
            manifest,
            voxel,
        } => {
            let opts = voxel.load_options()?;
            let net = load_model(&checkpoint)?;
            if let Some(m) = &manifest {
                input.extend(read_manifest(m)?.into_iter().map(|e| e.path));
            }
            echo(
                "profile",
                json!({ "checkpoint": checkpoint, "inputs": input.len(), "network": net.spec().to_config_text(), "voxel": voxel_json(&opts.voxel) }),
            );
            let tensors = load_tensors(&input, &opts)?;
            let mut per = Vec::with_capacity(tensors.len());
            for t in &tensors {
                let g = net.prepare(t)?;
                let tape = net.forward(&g, t.features())?;
                per.push(firing_stats(net.program(), &tape.trace, net.spec().num_classes, net.spec().d_max()));
            }
            let stats = average_stats(&per).ok_or_else(|| CliError::Data("no inputs".into()))?;
            let model = EnergyModel::default();
            let sparse = estimate_energy(&stats, &model).map_err(|e| CliError::Numeric(e.to_string()))?;
            let dense = estimate_energy_dense(&stats, &model).map_err(|e| CliError::Numeric(e.to_string()))?;
            if !sparse.total.is_finite() {
                return Err(CliError::Numeric("non-finite energy estimate".into()));
            }
            print!("{}", report_text(&stats, &sparse, &dense));
        }
        Command::Selftest { seed } => {
            echo("selftest", json!({ "seed": seed }));
            let results = run_selftest(seed);
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} check(s) failed")));
            }
        }
        Command::GenToy { out_dir, per_class, seed } => {
            echo("gen-toy", json!({ "out_dir": out_dir, "per_class": per_class, "seed": seed }));
            if per_class == 0 {
                return Err(CliError::Usage("--per-class must be at least 1".into()));
            }
            fs::create_dir_all(&out_dir)?;
            let data = make_toy_dataset(seed, per_class);
            let mut rows = Vec::with_capacity(data.len());
            for (i, (pc, label)) in data.iter().enumerate() {
                let name = format!("{}_{i:04}.xyz", TOY_CLASSES[*label]);
                save_xyz(pc, &out_dir.join(&name))?;
                rows.push((name, *label));
            }
            write_manifest(&rows, BufWriter::new(File::create(out_dir.join("manifest.txt"))?))?;
            println!("{}", json!({ "samples": rows.len(), "manifest": out_dir.join("manifest.txt") }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
