//! Command-line front end. Every subcommand resolves a [`RunConfig`] from
//! defaults, an optional `--config` file and its flags, in that order, and
//! writes the result as `run.cfg` into its output directory.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classical::{tv_reconstruct, NoserOperator};
use crate::forward::{
    compute_jacobian, solve_forward, ConductivityImage, Mesh, Protocol, VoltageFrame,
};
use crate::io::{self, Array, BaselineRow, IoError, RunConfig};
use crate::metrics::{evaluate, write_metrics_csv};
use crate::phantom::{generate_dataset, Dataset};
use crate::phydnn::{
    self, evaluate_recon, grid_search_beta, write_history_csv, ReconNet, ReconNetConfig,
};
use crate::surrogate::{
    build_forward_net, eval_forward_net, train_forward_net, ForwardNet, SurrogateHistory,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const TRAIN_FILE: &str = "train.eitd";
pub const TEST_FILE: &str = "test.eitd";
pub const SURROGATE_FILE: &str = "surrogate.eitd";
pub const RECON_FILE: &str = "recon.eitd";
pub const IMAGES_FILE: &str = "images.eitd";

#[derive(Parser, Debug)]
#[command(
    name = "tacteit",
    version,
    about = "Tomographic tactile sensor reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// key = value file; flags take precedence over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for dataset generation.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct Grid {
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    skip: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct Training {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Use only the first N training samples; 0 keeps all.
    #[arg(long)]
    max_train: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate train and test phantom sets.
    GenDataset {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Fit the learned forward operator on a training set.
    TrainForwardOp {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Compare the learned forward operator with the linearised one.
    EvalForwardOp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        surrogate: Option<PathBuf>,
    },
    /// Train one reconstruction network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[command(flatten)]
        training: Training,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train one network per physics weight and score each on the test set.
    GridSearchBeta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[command(flatten)]
        training: Training,
        /// Comma-separated list.
        #[arg(long, conflicts_with = "betas_log", allow_hyphen_values = true)]
        betas: Option<String>,
        /// `lo:hi:count`, log10 exponents.
        #[arg(long, allow_hyphen_values = true)]
        betas_log: Option<String>,
        /// Also train the β = 0 reference model.
        #[arg(long)]
        include_zero: Option<bool>,
    },
    /// Reconstruct conductivity images from voltages.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
        #[arg(long, value_parser = ["noser", "tv", "dnn", "phydnn"])]
        method: Option<String>,
        /// Trained network for `dnn` and `phydnn`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Measured frames CSV; the baseline row is used as V₀.
        #[arg(long, conflicts_with = "data")]
        input: Option<PathBuf>,
        /// Dataset directory; its test split is reconstructed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        baseline_row: Option<usize>,
        #[arg(long)]
        lambda_noser: Option<f64>,
        #[arg(long)]
        lambda_tv: Option<f64>,
        #[arg(long)]
        tv_iters: Option<usize>,
        #[arg(long)]
        tv_eps: Option<f64>,
    },
    /// Score reconstructed images against a test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Image stack written by `reconstruct`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Convert a measured-frames CSV to a container archive.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        baseline_row: Option<usize>,
    },
    /// Write images from an image stack as 8-bit graymaps.
    ExportImage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Zero-based image index; all images when absent.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Print mesh and protocol sizes.
    MeshInfo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        grid: Grid,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Flag overrides as `(key, value)` pairs.
struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn new() -> Self {
        Self(Vec::new())
    }

    fn opt<T: ToString>(&mut self, key: &'static str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
        self
    }

    fn path(&mut self, key: &'static str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key, v.display().to_string()));
        }
        self
    }

    fn common(&mut self, c: &Common) -> &mut Self {
        self.opt("seed", &c.seed)
            .opt("threads", &c.threads)
            .path("out", &c.out)
    }

    fn grid(&mut self, g: &Grid) -> &mut Self {
        self.opt("grid", &g.grid).opt("skip", &g.skip)
    }

    fn training(&mut self, t: &Training) -> &mut Self {
        self.opt("epochs", &t.epochs)
            .opt("warmup", &t.warmup)
            .opt("lr", &t.lr)
            .opt("batch", &t.batch)
            .opt("alpha", &t.alpha)
            .opt("base_channels", &t.base_channels)
            .opt("val_fraction", &t.val_fraction)
            .opt("max_train", &t.max_train)
    }
}

fn resolve(name: &str, common: &Common, overrides: &Overrides) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    cfg.command = name.to_string();
    for (k, v) in &overrides.0 {
        cfg.set(k, v).map_err(|e| usage(e.to_string()))?;
    }
    if cfg.threads == 0 {
        return Err(usage("threads must be at least 1"));
    }
    // fails harmlessly when a pool already exists in this process
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global();
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    v.as_deref()
        .ok_or_else(|| usage(format!("--{flag} is required")))
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let out = required(&cfg.out, "out")?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.write_resolved(&out)?;
    Ok(out)
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn geometry(grid: usize, skip: usize) -> anyhow::Result<(Mesh, Protocol)> {
    Ok((Mesh::with_default_width(grid)?, Protocol::new(skip)?))
}

fn load_split(data: &Path, file: &str) -> anyhow::Result<Dataset> {
    let p = data.join(file);
    io::load_dataset(&p).with_context(|| format!("reading {}", p.display()))
}

fn load_surrogate(p: &Path) -> anyhow::Result<ForwardNet<f32>> {
    let ar = io::load_archive(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(io::forward_net_from_archive(&ar)?)
}

fn training_set(cfg: &RunConfig, data: &Path) -> anyhow::Result<Dataset> {
    let d = load_split(data, TRAIN_FILE)?;
    if cfg.max_train > 0 && cfg.max_train < d.len() {
        let idx: Vec<usize> = (0..cfg.max_train).collect();
        return Ok(d.subset(&idx));
    }
    Ok(d)
}

fn fresh_net(cfg: &RunConfig, surrogate: &ForwardNet<f32>) -> anyhow::Result<ReconNet<f32>> {
    let net_cfg =
        ReconNetConfig::for_grid(surrogate.grid_n()).with_base_channels(cfg.base_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(ReconNet::new(net_cfg, surrogate.v0(), &mut rng)?)
}

fn csv_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_surrogate_history(path: &Path, h: &SurrogateHistory) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(csv_file(path)?);
    w.write_record(["epoch", "train_mse", "val_mse", "gamma"])?;
    for e in 0..h.train_mse.len() {
        let val = h
            .val_mse
            .get(e)
            .map(|v| format!("{v:e}"))
            .unwrap_or_default();
        w.write_record([
            e.to_string(),
            format!("{:e}", h.train_mse[e]),
            val,
            format!("{:e}", h.gamma[e]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn gen_dataset(cfg: &RunConfig) -> Outcome {
    let out = prepare_out(cfg)?;
    let (mesh, proto) = geometry(cfg.grid, cfg.skip)?;
    for (dc, file) in [
        (cfg.train_dataset(), TRAIN_FILE),
        (cfg.test_dataset(), TEST_FILE),
    ] {
        let d = generate_dataset(&dc, &mesh, &proto).map_err(anyhow::Error::from)?;
        io::save_dataset(&out.join(file), &d)?;
        println!("{file}: {} samples, {} noisy", d.len(), d.noisy_count());
    }
    Ok(())
}

fn mesh_info(cfg: &RunConfig) -> Outcome {
    let (mesh, proto) = geometry(cfg.grid, cfg.skip)?;
    if cfg.out.is_some() {
        prepare_out(cfg)?;
    }
    println!("grid          {0}×{0}", mesh.grid_n());
    println!("nodes         {}", mesh.node_count());
    println!("elements      {}", mesh.element_count());
    println!(
        "electrodes    {} × {} nodes",
        mesh.electrodes().len(),
        mesh.electrode_width()
    );
    println!("drive pairs   {}", proto.drive_pairs().len());
    println!("measurements  {}", proto.n_measurements());
    println!("bandwidth     {}", mesh.bandwidth());
    Ok(())
}

fn train_forward_op(cfg: &RunConfig) -> Outcome {
    let data = required(&cfg.data, "data")?;
    let train = load_split(data, TRAIN_FILE)?;
    let mut cfg = cfg.clone();
    cfg.grid = train.grid_n;
    let out = prepare_out(&cfg)?;
    let (mesh, proto) = geometry(cfg.grid, cfg.skip)?;
    let s0 = ConductivityImage::uniform(cfg.grid, 1.0);
    let j = compute_jacobian(&mesh, &s0, &proto).map_err(anyhow::Error::from)?;
    let v0 = solve_forward(&mesh, &s0, &proto).map_err(anyhow::Error::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = build_forward_net(j, v0, cfg.grid, &mut rng).map_err(anyhow::Error::from)?;
    let history = train_forward_net(&mut net, &train, &cfg.surrogate_training())
        .map_err(anyhow::Error::from)?;
    io::save_archive(
        &out.join(SURROGATE_FILE),
        &io::forward_net_to_archive(&net)?,
    )?;
    write_surrogate_history(&out.join("surrogate_history.csv"), &history)?;
    println!("trained forward operator, gamma {:.6}", net.gamma());
    if data.join(TEST_FILE).exists() {
        print_forward_eval(&net, &load_split(data, TEST_FILE)?, None)?;
    }
    Ok(())
}

fn print_forward_eval(
    net: &ForwardNet<f32>,
    test: &Dataset,
    csv_path: Option<&Path>,
) -> anyhow::Result<()> {
    let r = eval_forward_net(net, test)?;
    println!(
        "test mse   learned {:.4e}  linear {:.4e}  ratio {:.4}",
        r.mse_learned,
        r.mse_linear,
        r.mse_learned / r.mse_linear
    );
    println!(
        "test r     learned {:.6}  linear {:.6}",
        r.r_learned, r.r_linear
    );
    if let Some(p) = csv_path {
        let mut w = csv::Writer::from_writer(csv_file(p)?);
        w.write_record(["operator", "mse", "r", "samples"])?;
        w.write_record([
            "learned",
            &format!("{:e}", r.mse_learned),
            &r.r_learned.to_string(),
            &r.samples.to_string(),
        ])?;
        w.write_record([
            "linear",
            &format!("{:e}", r.mse_linear),
            &r.r_linear.to_string(),
            &r.samples.to_string(),
        ])?;
        w.flush()?;
    }
    Ok(())
}

fn eval_forward_op(cfg: &RunConfig) -> Outcome {
    let data = required(&cfg.data, "data")?;
    let sur = load_surrogate(required(&cfg.surrogate, "surrogate")?)?;
    let test = load_split(data, TEST_FILE)?;
    let csv_path = match cfg.out {
        Some(_) => Some(prepare_out(cfg)?.join("forward_eval.csv")),
        None => None,
    };
    print_forward_eval(&sur, &test, csv_path.as_deref())?;
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> Outcome {
    let data = required(&cfg.data, "data")?;
    let sur = load_surrogate(required(&cfg.surrogate, "surrogate")?)?;
    let train = training_set(cfg, data)?;
    let out = prepare_out(cfg)?;
    let net = fresh_net(cfg, &sur)?;
    let (net, history) =
        phydnn::train(net, &train, &cfg.training(), &sur).map_err(anyhow::Error::from)?;
    io::save_archive(
        &out.join(RECON_FILE),
        &io::recon_net_to_archive(&net, cfg.beta)?,
    )?;
    write_history_csv(csv_file(&out.join("history.csv"))?, &history)
        .map_err(anyhow::Error::from)?;
    println!(
        "beta {:e}: final L_data {:.4e} (val {:.4e}), L_phy {:.4e} (val {:.4e})",
        cfg.beta,
        history.l_data_train.last().copied().unwrap_or(f64::NAN),
        history.l_data_val.last().copied().unwrap_or(f64::NAN),
        history.l_phy_train.last().copied().unwrap_or(f64::NAN),
        history.l_phy_val.last().copied().unwrap_or(f64::NAN),
    );
    if data.join(TEST_FILE).exists() {
        let test = load_split(data, TEST_FILE)?;
        let (reports, _) = evaluate_recon(&net, &test).map_err(anyhow::Error::from)?;
        let s = write_metrics_csv(csv_file(&out.join("metrics.csv"))?, &reports)
            .map_err(anyhow::Error::from)?;
        println!(
            "test: S {:.4}  SSIM {:.4}  CC {:.4}  RIE {:.4}  PSNR {:.2} dB",
            s.score_s, s.ssim, s.cc, s.rie, s.psnr_db
        );
    }
    Ok(())
}

fn grid_search_cmd(cfg: &RunConfig) -> Outcome {
    if cfg.betas.is_empty() {
        return Err(usage("no beta values given"));
    }
    let data = required(&cfg.data, "data")?;
    let sur = load_surrogate(required(&cfg.surrogate, "surrogate")?)?;
    let train = training_set(cfg, data)?;
    let test = load_split(data, TEST_FILE)?;
    let out = prepare_out(cfg)?;
    let mut betas = cfg.betas.clone();
    if cfg.include_zero && !betas.contains(&0.0) {
        betas.insert(0, 0.0);
    }
    let net = fresh_net(cfg, &sur)?;
    let search = grid_search_beta(&betas, &net, &train, &test, &cfg.training(), &sur)
        .map_err(anyhow::Error::from)?;

    let mut w = csv::Writer::from_writer(csv_file(&out.join("beta_scores.csv"))?);
    w.write_record(["beta", "ssim", "cc", "rie", "psnr_db", "score_s"])
        .map_err(anyhow::Error::from)?;
    println!(
        "{:>12} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "beta", "SSIM", "CC", "RIE", "PSNR", "S"
    );
    let mut best: Option<usize> = None;
    for (k, row) in search.rows.iter().enumerate() {
        let s = &row.summary;
        w.write_record([
            format!("{:e}", row.beta),
            s.ssim.to_string(),
            s.cc.to_string(),
            s.rie.to_string(),
            s.psnr_db.to_string(),
            s.score_s.to_string(),
        ])
        .map_err(anyhow::Error::from)?;
        write_history_csv(
            csv_file(&out.join(format!("history_{k:02}.csv")))?,
            &row.history,
        )
        .map_err(anyhow::Error::from)?;
        if row.beta == 0.0 && !cfg.betas.contains(&0.0) {
            continue;
        }
        println!(
            "{:>12.4e} {:>8.4} {:>8.4} {:>8.4} {:>8.3} {:>8.4}",
            row.beta, s.ssim, s.cc, s.rie, s.psnr_db, s.score_s
        );
        if s.score_s.is_finite() && best.is_none_or(|b| s.score_s > search.rows[b].summary.score_s)
        {
            best = Some(k);
        }
    }
    w.flush().map_err(anyhow::Error::from)?;
    if let Some(zero) = search.row_for(0.0) {
        println!("beta = 0 reference: S {:.4}", zero.summary.score_s);
        io::save_archive(
            &out.join("dnn.eitd"),
            &io::recon_net_to_archive(&zero.net, 0.0)?,
        )?;
    }
    let best = best.ok_or_else(|| anyhow!("no beta produced a finite score"))?;
    let row = &search.rows[best];
    println!("best beta {:.4e}: S {:.4}", row.beta, row.summary.score_s);
    io::save_archive(
        &out.join("best.eitd"),
        &io::recon_net_to_archive(&row.net, row.beta)?,
    )?;
    Ok(())
}

struct Frames {
    grid: usize,
    baseline: VoltageFrame,
    frames: Vec<VoltageFrame>,
    /// True for measured data, whose baseline replaces the simulated one.
    measured: bool,
}

fn reconstruct_inputs(cfg: &RunConfig) -> Result<Frames, Failure> {
    match (&cfg.input, &cfg.data) {
        (Some(csv), _) => {
            let (_, proto) = geometry(cfg.grid, cfg.skip)?;
            let m = io::ingest_measured_frames(
                csv,
                proto.n_measurements(),
                BaselineRow::Index(cfg.baseline_row - 1),
            )?;
            Ok(Frames {
                grid: cfg.grid,
                baseline: m.baseline,
                frames: m.frames,
                measured: true,
            })
        }
        (None, Some(data)) => {
            let test = load_split(data, TEST_FILE)?;
            let (mesh, proto) = geometry(test.grid_n, cfg.skip)?;
            let v0 = solve_forward(&mesh, &ConductivityImage::uniform(test.grid_n, 1.0), &proto)
                .map_err(anyhow::Error::from)?;
            Ok(Frames {
                grid: test.grid_n,
                baseline: v0,
                frames: test.voltages,
                measured: false,
            })
        }
        (None, None) => Err(usage("one of --input or --data is required")),
    }
}

fn reconstruct_cmd(cfg: &RunConfig) -> Outcome {
    let method = cfg.method.as_str();
    if !["noser", "tv", "dnn", "phydnn"].contains(&method) {
        return Err(usage(format!("unknown method `{method}`")));
    }
    let rc = cfg.reconstruction();
    rc.validate().map_err(|e| usage(e.to_string()))?;
    if matches!(method, "dnn" | "phydnn") {
        required(&cfg.checkpoint, "checkpoint")?;
    }
    let input = reconstruct_inputs(cfg)?;
    let out = prepare_out(cfg)?;
    let n = input.grid;
    let mut images = Vec::with_capacity(input.frames.len());
    let mut latency = Duration::ZERO;
    match method {
        "noser" | "tv" => {
            let (mesh, proto) = geometry(n, cfg.skip)?;
            let s0 = ConductivityImage::uniform(n, 1.0);
            let j = compute_jacobian(&mesh, &s0, &proto).map_err(anyhow::Error::from)?;
            let op = if method == "noser" {
                Some(NoserOperator::new(&j, rc.lambda_noser).map_err(anyhow::Error::from)?)
            } else {
                None
            };
            for f in &input.frames {
                let dv = f.sub(&input.baseline);
                let t = std::time::Instant::now();
                let delta = match &op {
                    Some(op) => op.apply(&dv),
                    None => tv_reconstruct(&j, &dv, rc.lambda_tv, rc.tv_iters, rc.tv_eps),
                }
                .map_err(anyhow::Error::from)?;
                latency += t.elapsed();
                images.push(s0.add(&delta));
            }
        }
        _ => {
            let path = required(&cfg.checkpoint, "checkpoint")?;
            let ar =
                io::load_archive(path).with_context(|| format!("reading {}", path.display()))?;
            let ck = io::recon_net_from_archive(&ar)?;
            if (method == "dnn") != (ck.beta == 0.0) {
                return Err(Failure::Runtime(anyhow!(
                    "checkpoint was trained with beta {} and is not a {method} model",
                    ck.beta
                )));
            }
            if ck.net.config().grid_n != n && !input.measured {
                return Err(Failure::Runtime(anyhow!(
                    "checkpoint grid {} does not match data grid {n}",
                    ck.net.config().grid_n
                )));
            }
            let net = if input.measured {
                ReconNet::from_parts(*ck.net.config(), &input.baseline, ck.net.params().clone())
                    .map_err(anyhow::Error::from)?
            } else {
                ck.net
            };
            for f in &input.frames {
                let r = phydnn::reconstruct(&net, f).map_err(anyhow::Error::from)?;
                latency += r.latency;
                images.push(r.image);
            }
        }
    }
    let stack = if images.is_empty() {
        Array::f64(&[0, n, n], Vec::new())?
    } else {
        io::images_to_array(&images)?
    };
    let path = out.join(IMAGES_FILE);
    io::write_container(
        &mut BufWriter::new(File::create(&path).map_err(IoError::from)?),
        &stack,
    )?;
    let per = latency.as_secs_f64() * 1e3 / images.len().max(1) as f64;
    println!("{method}: {} images, {per:.2} ms per frame", images.len());
    Ok(())
}

fn read_images(path: &Path) -> anyhow::Result<Vec<ConductivityImage>> {
    let mut r = std::io::BufReader::new(
        File::open(path).with_context(|| format!("reading {}", path.display()))?,
    );
    let a = io::read_container(&mut r)?;
    if let &[n, m] = a.dims() {
        return Ok(io::images_from_array(&Array::f64(&[1, n, m], a.to_f64())?)?);
    }
    Ok(io::images_from_array(&a)?)
}

fn evaluate_cmd(cfg: &RunConfig) -> Outcome {
    let images = read_images(required(&cfg.input, "input")?)?;
    let test = load_split(required(&cfg.data, "data")?, TEST_FILE)?;
    if images.len() != test.len() {
        return Err(Failure::Runtime(anyhow!(
            "{} images for {} test samples",
            images.len(),
            test.len()
        )));
    }
    let out = prepare_out(cfg)?;
    let reports = images
        .iter()
        .zip(&test.sigmas)
        .map(|(e, g)| evaluate(e, g))
        .collect::<Result<Vec<_>, _>>()
        .map_err(anyhow::Error::from)?;
    let s = write_metrics_csv(csv_file(&out.join("metrics.csv"))?, &reports)
        .map_err(anyhow::Error::from)?;
    println!(
        "{} samples: S {:.4}  SSIM {:.4}  CC {:.4}  RIE {:.4}  PSNR {:.2} dB",
        s.samples, s.score_s, s.ssim, s.cc, s.rie, s.psnr_db
    );
    if s.infinite_psnr > 0 {
        println!(
            "{} exact reconstructions excluded from the PSNR mean",
            s.infinite_psnr
        );
    }
    Ok(())
}

fn ingest_cmd(cfg: &RunConfig) -> Outcome {
    let input = required(&cfg.input, "input")?;
    let (_, proto) = geometry(cfg.grid, cfg.skip)?;
    let m = io::ingest_measured_frames(
        input,
        proto.n_measurements(),
        BaselineRow::Index(cfg.baseline_row - 1),
    )?;
    let out = prepare_out(cfg)?;
    let mut ar = io::Archive::new();
    ar.insert(
        "baseline",
        Array::f64(&[m.baseline.len()], m.baseline.values().to_vec())?,
    );
    let stack = |frames: &[VoltageFrame]| -> Result<Array, IoError> {
        if frames.is_empty() {
            Array::f64(&[0, m.baseline.len()], Vec::new())
        } else {
            io::frames_to_array(frames)
        }
    };
    ar.insert("frames", stack(&m.frames)?);
    ar.insert("dv", stack(&m.differences())?);
    io::save_archive(&out.join("frames.eitd"), &ar)?;
    println!(
        "baseline row {}, {} contact frames",
        cfg.baseline_row,
        m.frames.len()
    );
    Ok(())
}

fn export_cmd(cfg: &RunConfig) -> Outcome {
    let images = read_images(required(&cfg.input, "input")?)?;
    let out = prepare_out(cfg)?;
    let picks: Vec<usize> = match cfg.index {
        Some(k) if k >= images.len() => {
            return Err(Failure::Runtime(anyhow!(
                "index {k} out of range for {} images",
                images.len()
            )))
        }
        Some(k) => vec![k],
        None => (0..images.len()).collect(),
    };
    for k in picks {
        let p = out.join(format!("image_{k:03}.pgm"));
        let info = io::export_image(&images[k], &p)?;
        let flag = if info.constant { "  constant" } else { "" };
        println!("{}: [{:.4}, {:.4}]{flag}", p.display(), info.min, info.max);
    }
    Ok(())
}

fn dispatch(command: Command) -> Outcome {
    let mut o = Overrides::new();
    match command {
        Command::GenDataset {
            common,
            grid,
            train,
            test,
        } => {
            o.common(&common)
                .grid(&grid)
                .opt("train", &train)
                .opt("test", &test);
            gen_dataset(&resolve("gen-dataset", &common, &o)?)
        }
        Command::TrainForwardOp {
            common,
            data,
            epochs,
            lr,
            batch,
            val_fraction,
        } => {
            o.common(&common)
                .path("data", &data)
                .opt("sur_epochs", &epochs)
                .opt("sur_lr", &lr)
                .opt("sur_batch", &batch)
                .opt("val_fraction", &val_fraction);
            train_forward_op(&resolve("train-forward-op", &common, &o)?)
        }
        Command::EvalForwardOp {
            common,
            data,
            surrogate,
        } => {
            o.common(&common)
                .path("data", &data)
                .path("surrogate", &surrogate);
            eval_forward_op(&resolve("eval-forward-op", &common, &o)?)
        }
        Command::Train {
            common,
            data,
            surrogate,
            training,
            beta,
        } => {
            o.common(&common)
                .path("data", &data)
                .path("surrogate", &surrogate)
                .training(&training)
                .opt("beta", &beta);
            train_cmd(&resolve("train", &common, &o)?)
        }
        Command::GridSearchBeta {
            common,
            data,
            surrogate,
            training,
            betas,
            betas_log,
            include_zero,
        } => {
            o.common(&common)
                .path("data", &data)
                .path("surrogate", &surrogate)
                .training(&training)
                .opt("betas", &betas)
                .opt("betas_log", &betas_log)
                .opt("include_zero", &include_zero);
            grid_search_cmd(&resolve("grid-search-beta", &common, &o)?)
        }
        Command::Reconstruct {
            common,
            grid,
            method,
            checkpoint,
            input,
            data,
            baseline_row,
            lambda_noser,
            lambda_tv,
            tv_iters,
            tv_eps,
        } => {
            o.common(&common)
                .grid(&grid)
                .opt("method", &method)
                .path("checkpoint", &checkpoint)
                .path("input", &input)
                .path("data", &data)
                .opt("baseline_row", &baseline_row)
                .opt("lambda_noser", &lambda_noser)
                .opt("lambda_tv", &lambda_tv)
                .opt("tv_iters", &tv_iters)
                .opt("tv_eps", &tv_eps);
            reconstruct_cmd(&resolve("reconstruct", &common, &o)?)
        }
        Command::Evaluate {
            common,
            input,
            data,
        } => {
            o.common(&common).path("input", &input).path("data", &data);
            evaluate_cmd(&resolve("evaluate", &common, &o)?)
        }
        Command::Ingest {
            common,
            grid,
            input,
            baseline_row,
        } => {
            o.common(&common)
                .grid(&grid)
                .path("input", &input)
                .opt("baseline_row", &baseline_row);
            ingest_cmd(&resolve("ingest", &common, &o)?)
        }
        Command::ExportImage {
            common,
            input,
            index,
        } => {
            o.common(&common).path("input", &input).opt("index", &index);
            export_cmd(&resolve("export-image", &common, &o)?)
        }
        Command::MeshInfo { common, grid } => {
            o.common(&common).grid(&grid);
            mesh_info(&resolve("mesh-info", &common, &o)?)
        }
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["tacteit", "no-such-command"]), EXIT_USAGE);
        assert_eq!(run(["tacteit", "mesh-info", "--bogus"]), EXIT_USAGE);
        assert_eq!(
            run(["tacteit", "reconstruct", "--method", "fft", "--data", "x"]),
            EXIT_USAGE
        );
        assert_eq!(run(["tacteit", "gen-dataset"]), EXIT_USAGE);
        assert_eq!(run(["tacteit", "--help"]), EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_two() {
        assert_eq!(run(["tacteit", "mesh-info", "--grid", "3"]), EXIT_RUNTIME);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing");
        let out = dir.path().join("out");
        let code = run([
            OsString::from("tacteit"),
            "evaluate".into(),
            "--input".into(),
            missing.clone().into(),
            "--data".into(),
            missing.into(),
            "--out".into(),
            out.into(),
        ]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn bad_config_file_is_usage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "grid = 8\nunknown_key = 1\n").unwrap();
        let code = run([
            OsString::from("tacteit"),
            "mesh-info".into(),
            "--config".into(),
            p.into(),
        ]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn betas_log_accepts_negative_exponents() {
        let cli =
            Cli::try_parse_from(["tacteit", "grid-search-beta", "--betas-log", "-4:-0.301:9"])
                .unwrap();
        let Command::GridSearchBeta { betas_log, .. } = cli.command else {
            panic!()
        };
        assert_eq!(betas_log.as_deref(), Some("-4:-0.301:9"));
    }
}
