//! `scaffusion`: generate synthetic data, train, evaluate, run ablations and
//! infer depth from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scaffusion::checkpoint::Checkpoint;
use scaffusion::config::{read_toml, RunConfig, Stage};
use scaffusion::dataset::{self, GenerateSpec};
use scaffusion::metrics::{depth_map, save_error_map};
use scaffusion::nets::check_resolution;
use scaffusion::pipeline::ablation::{AblationConfig, AblationContext, AblationSuite};
use scaffusion::pipeline::{evaluate_model, fusion_config_for, train_fusionnet, train_scaffnet, Model, RunControl, RunDir};
use scaffusion::sampling::{SamplingStrategy, SparseDepthMap};
use scaffusion::scenegen::Layout;
use scaffusion::{Error, Result};

#[derive(Parser)]
#[command(name = "scaffusion", version, about = "Sparse-to-dense depth completion in two stages")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with sparse depth.
    GenData(GenData),
    /// Train ScaffNet or FusionNet from a config file.
    Train(Train),
    /// Score a checkpoint on a dataset and write error maps.
    Eval(Eval),
    /// Run an ablation suite and report trend verdicts.
    Ablate(Ablate),
    /// Predict dense depth for one image and sparse depth map.
    Infer(Infer),
    /// Colour-map a depth PNG, or its error against ground truth.
    Visualize(Visualize),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sparsity {
    Corner,
    Scanline,
    Uniform,
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// room, corridor or outdoor-strip.
    #[arg(long, default_value = "room")]
    layout: Layout,
    #[arg(long, default_value_t = 1)]
    sequences: usize,
    #[arg(long)]
    frames: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, value_enum, default_value = "corner")]
    sparsity: Sparsity,
    /// Sparse points per frame.
    #[arg(long, conflicts_with = "density")]
    points: Option<usize>,
    /// Fraction of pixels to sample instead of a point count.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Scaffnet,
    Fusionnet,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Top of the error-map colour scale in metres.
    #[arg(long, default_value_t = 1.0)]
    max_error: f64,
    /// Skip writing error-map PNGs.
    #[arg(long)]
    no_maps: bool,
}

#[derive(Args)]
struct Ablate {
    /// spp-on-off, density-sweep or output-head.
    #[arg(long)]
    suite: String,
    /// Ablation config (TOML); desk-scale defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.md and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    checkpoint: PathBuf,
    /// 8-bit RGB PNG.
    #[arg(long)]
    image: PathBuf,
    /// 16-bit depth PNG in millimetres, 0 where there is no measurement.
    #[arg(long)]
    sparse: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Top of the colour scale in metres.
    #[arg(long, default_value_t = 10.0)]
    max_depth: f64,
}

#[derive(Args)]
struct Visualize {
    /// 16-bit depth PNG in millimetres.
    #[arg(long)]
    depth: PathBuf,
    /// Ground truth; draws the absolute error instead of the depth.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Top of the colour scale in metres.
    #[arg(long, default_value_t = 10.0)]
    max: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("cannot start {n} workers: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Infer(a) => infer(a),
        Command::Visualize(a) => visualize(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let points = match (a.points, a.density) {
        (Some(p), _) => p,
        (None, Some(d)) => SamplingStrategy::points_for_density(d, a.width, a.height),
        (None, None) => SamplingStrategy::points_for_density(0.005, a.width, a.height),
    };
    let sampling = match a.sparsity {
        Sparsity::Corner => SamplingStrategy::corners(points),
        Sparsity::Scanline => SamplingStrategy::scanlines(points),
        Sparsity::Uniform => SamplingStrategy::Uniform { points },
    };
    let mut spec = GenerateSpec::new(a.seed, a.layout, a.sequences, a.frames, sampling);
    spec.width = a.width;
    spec.height = a.height;
    let data = dataset::generate(&spec)?;
    let manifest = dataset::save(&data, &a.out)?;
    let densities: Vec<f64> = data.sequences.iter().flat_map(|s| &s.frames).map(|f| f.sparse.density()).collect();
    let min = densities.iter().copied().fold(f64::INFINITY, f64::min);
    let max = densities.iter().copied().fold(0.0, f64::max);
    println!(
        "wrote {} frames in {} sequences ({} triplets) to {}",
        data.frame_count(),
        data.sequences.len(),
        data.triplets().len(),
        a.out.display()
    );
    println!(
        "sparse density: mean {:.3}%, min {:.3}%, max {:.3}%",
        manifest.mean_density * 100.0,
        min * 100.0,
        max * 100.0
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let stage = match a.stage {
        StageArg::Scaffnet => Stage::Scaffnet,
        StageArg::Fusionnet => Stage::Fusionnet,
    };
    if config.stage != stage {
        return Err(Error::Config {
            key: "stage".into(),
            message: format!("config is for {:?} but --stage asks for {:?}", config.stage, stage),
        });
    }
    let train_data = dataset::load(&config.data.train)?;
    let val_data = config.data.validation.as_deref().map(dataset::load).transpose()?;
    let run = RunDir::create(&a.out)?;
    std::fs::write(a.out.join("config.toml"), config.to_toml())?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let ctl = RunControl {
        run_dir: Some(&run),
        validation: val_data.as_ref(),
        resume: resume.as_ref(),
        ..RunControl::default()
    };
    let opts = config.train_options();
    let result = match stage {
        Stage::Scaffnet => train_scaffnet(&train_data, config.scaffnet_config(), &opts, &ctl)?,
        Stage::Fusionnet => {
            let scaff_path = config.model.scaffnet_checkpoint.as_deref().expect("validated");
            let scaff = Checkpoint::load(scaff_path)?;
            let fusion = fusion_config_for(config.preset, &train_data, config.model.head);
            train_fusionnet(&train_data, &scaff, fusion, &opts, &config.fusion_options(), &ctl)?
        }
    };
    let final_path = a.out.join("final.ckpt");
    result.checkpoint.save(&final_path)?;
    if let Some(last) = result.epochs.last() {
        println!("final epoch {}: mean loss {:.5}", last.epoch, last.mean_loss);
        if let Some(m) = last.validation {
            println!("validation MAE {:.1} mm, RMSE {:.1} mm", m.mae, m.rmse);
        }
    }
    println!("checkpoint written to {}", final_path.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = dataset::load(&a.dataset)?;
    let (w, h) = data.resolution()?;
    check_resolution(w, h)?;
    let model = Model::from_checkpoint(&ck)?;
    let table = evaluate_model(&model, &data, None)?;
    std::fs::create_dir_all(&a.out)?;
    table.save(&a.out.join("metrics.csv"), &a.out.join("metrics.json"))?;
    if !a.no_maps {
        let maps = a.out.join("error_maps");
        std::fs::create_dir_all(&maps)?;
        for seq in &data.sequences {
            for (i, f) in seq.frames.iter().enumerate() {
                let pred = model.predict(&f.image, &f.sparse)?;
                let valid: Vec<bool> = f.depth.data().iter().map(|&d| d > 0.0).collect();
                let path = maps.join(format!("{}_{i:06}.png", seq.name));
                save_error_map(&path, &pred, &f.depth, Some(&valid), a.max_error)?;
            }
        }
    }
    let m = table.aggregate;
    println!(
        "MAE {:.1} mm, RMSE {:.1} mm, iMAE {:.2} 1/km, iRMSE {:.2} 1/km over {} pixels",
        m.mae, m.rmse, m.imae, m.irmse, m.count
    );
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let suite: AblationSuite = a.suite.parse()?;
    let config = match &a.config {
        Some(path) => read_toml::<AblationConfig>(path)?,
        None => AblationConfig::desk_scale(a.seed),
    };
    let report = AblationContext::new(config)?.run(suite)?;
    let md = report.to_markdown();
    print!("{md}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("report.md"), &md)?;
        std::fs::write(out.join("report.csv"), report.to_csv())?;
        std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    }
    println!("verdict: {}", if report.passed() { "pass" } else { "fail" });
    Ok(())
}

fn infer(a: Infer) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let image = dataset::read_rgb(&a.image)?;
    let sparse = SparseDepthMap::from_values(dataset::read_depth(&a.sparse)?)?;
    if (image.width(), image.height()) != (sparse.width(), sparse.height()) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{} but sparse depth is {}x{}",
            image.width(),
            image.height(),
            sparse.width(),
            sparse.height()
        )));
    }
    std::fs::create_dir_all(&a.out)?;
    let (depth, topology) = match &model {
        Model::Scaffnet(m) => (m.predict(&sparse)?, None),
        Model::Fusionnet(m) => {
            let out = m.infer(&image, &sparse)?;
            (out.depth, Some(out.topology))
        }
    };
    write_depth_pair(&a.out, "depth", &depth, a.max_depth)?;
    if let Some(t) = &topology {
        write_depth_pair(&a.out, "topology", t, a.max_depth)?;
    }
    println!("wrote {}", a.out.join("depth.png").display());
    Ok(())
}

fn write_depth_pair(dir: &Path, name: &str, depth: &scaffusion::Tensor, max_depth: f64) -> Result<()> {
    dataset::write_depth(&dir.join(format!("{name}.png")), depth)?;
    depth_map(depth, max_depth)?.save(dir.join(format!("{name}_color.png")))?;
    Ok(())
}

fn visualize(a: Visualize) -> Result<()> {
    let depth = dataset::read_depth(&a.depth)?;
    match &a.gt {
        Some(gt) => {
            let gt = dataset::read_depth(gt)?;
            let valid: Vec<bool> = gt.data().iter().zip(depth.data()).map(|(&g, &d)| g > 0.0 && d > 0.0).collect();
            save_error_map(&a.out, &depth, &gt, Some(&valid), a.max)?;
        }
        None => depth_map(&depth, a.max)?.save(&a.out)?,
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
