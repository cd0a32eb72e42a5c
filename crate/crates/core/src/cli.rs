//! Command-line front end. Exit codes: 0 success, 2 configuration, 3 I/O,
//! 4 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::backbone::{init_backbone, vit_forward, BackboneWeights, TeacherSource};
use crate::config::DistillConfig;
use crate::data::{load_samples, read_image, square_crop, two_region_image, write_image, DataSource, Rgb8};
use crate::error::{Error, Result};
use crate::eval::{
    bilinear_baseline, cost_svg, cost_tsv, fidelity, flop_model, probe_metrics, rgb_basis, to_rgb, FidelityReport,
    ProbeConfig, ProbeSample, SegMetrics,
};
use crate::refiner::{student_forward, StudentParams};
use crate::tensor::{resize_bilinear, save_tensor};
use crate::trainer::{load_checkpoint, run_distill, RESOLVED_CONFIG};
use crate::{FeatureMap, ImageTensor};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const THREADS_ENV: &str = "BRIXEL_THREADS";
pub const PANEL_DIR: &str = "panels";
pub const EVAL_FILE: &str = "eval.tsv";
pub const PROBE_FILE: &str = "probe.tsv";
pub const COST_TSV: &str = "cost.tsv";
pub const COST_SVG: &str = "cost.svg";
pub const PANELS: [&str; 4] = ["input", "teacher", "baseline", "student"];

/// Images per split of the two-region probe set.
const PROBE_IMAGES: usize = 8;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::TapeConsumed => EXIT_NUMERIC,
        Error::BadMagic(_)
        | Error::VersionMismatch { .. }
        | Error::TruncatedPayload { .. }
        | Error::PayloadMismatch { .. }
        | Error::DType { .. }
        | Error::Checkpoint(_)
        | Error::Image(_)
        | Error::Io { .. } => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(name = "brixel", version, about = "Distil high-resolution dense features from a frozen ViT")]
pub struct Cli {
    /// Overrides the `seed` config key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// key=value config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            Self::Ppm => "ppm",
            Self::Png => "png",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the student and write metrics.tsv, config.resolved, checkpoints/.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Image directory, `synthetic` or `synthetic:<count>`.
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the latest checkpoint under `<out>/checkpoints`.
        #[arg(long)]
        resume: bool,
    },
    /// Dump teacher maps as `<out>/<id>.brxt` for `teacher=file:<out>`.
    Extract {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fidelity of the student and of the bilinear baseline per sample.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Also run the linear probe on two-region images.
        #[arg(long)]
        probe: bool,
    },
    /// Input, teacher, low-resolution baseline and student PCA panels.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ppm")]
        format: ImageFormat,
    },
    /// Analytic cost table and plot, with measured forward times.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output grid sides.
        #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
        sizes: Vec<usize>,
        /// Write cost.tsv and cost.svg here; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip wall-clock timing above this output grid.
        #[arg(long, default_value_t = 64)]
        max_timed_grid: usize,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    configure_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn load_config(args: &ConfigArgs, seed: Option<u64>) -> Result<DistillConfig> {
    let mut cfg = match &args.config {
        Some(p) => DistillConfig::load(p)?,
        None => DistillConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Distill {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(config, cli.seed)?;
            let samples = load_samples(
                &DataSource::parse(data, cfg.synthetic_count, cfg.seed)?,
                cfg.teacher_resolution(),
            )?;
            let t = run_distill(&cfg, &samples, out, *resume)?;
            println!("trained {} iterations into {}", t.iter(), out.display());
            Ok(())
        }
        Command::Extract { config, data, out } => {
            let cfg = load_config(config, cli.seed)?;
            let samples = load_samples(
                &DataSource::parse(data, cfg.synthetic_count, cfg.seed)?,
                cfg.teacher_resolution(),
            )?;
            let backbone = init_backbone::<f32>(&cfg.vit, cfg.backbone_seed)?;
            mkdir(out)?;
            for s in &samples {
                let fm = vit_forward(&s.image, &cfg.vit, &backbone)?;
                save_tensor(fm.tensor(), TeacherSource::file_path(out, &s.id))?;
            }
            println!("wrote {} teacher maps to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            probe,
        } => eval_command(checkpoint, data, out, *probe, cli.seed),
        Command::Viz {
            checkpoint,
            image,
            out,
            format,
        } => viz_command(checkpoint, image, out, *format),
        Command::Bench {
            config,
            sizes,
            out,
            max_timed_grid,
        } => bench_command(&load_config(config, cli.seed)?, sizes, out.as_deref(), *max_timed_grid),
    }
}

/// Config, frozen backbone and student weights stored in a checkpoint.
pub struct LoadedModel {
    pub cfg: DistillConfig,
    pub backbone: BackboneWeights<f32>,
    pub student: StudentParams<f32>,
}

pub fn load_model(checkpoint: &Path) -> Result<LoadedModel> {
    let cfg = DistillConfig::load(&checkpoint.join(RESOLVED_CONFIG))?;
    let student = load_checkpoint(checkpoint, &cfg)?.student;
    let backbone = init_backbone(&cfg.vit, cfg.backbone_seed)?;
    Ok(LoadedModel { cfg, backbone, student })
}

/// Teacher map, low-resolution backbone map and student map of one image at
/// teacher resolution.
pub struct Maps {
    pub low: ImageTensor<f32>,
    pub teacher: FeatureMap<f32>,
    pub backbone: FeatureMap<f32>,
    pub student: FeatureMap<f32>,
}

impl LoadedModel {
    pub fn maps(&self, high: &ImageTensor<f32>) -> Result<Maps> {
        let s = self.cfg.student_resolution;
        let low = resize_bilinear(high, s, s, true)?;
        Ok(Maps {
            teacher: vit_forward(high, &self.cfg.vit, &self.backbone)?,
            backbone: vit_forward(&low, &self.cfg.vit, &self.backbone)?,
            student: student_forward(&low, &self.cfg.vit, &self.cfg.adapter, &self.backbone, &self.student)?,
            low,
        })
    }

    /// Two-region probe: student features against bilinear-baseline features,
    /// each trained on one split and scored on the other.
    pub fn probe(&self, seed: u64, cfg: &ProbeConfig) -> Result<(SegMetrics, SegMetrics)> {
        let s = self.cfg.student_resolution;
        let (_, gh, gw) = self.cfg.teacher_shape();
        let mut student = Vec::new();
        let mut baseline = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * PROBE_IMAGES {
            let (img, lab) = two_region_image(seed.wrapping_mul(7919).wrapping_add(i as u64), s);
            let bb = vit_forward(&img, &self.cfg.vit, &self.backbone)?;
            baseline.push(bilinear_baseline(&bb, gh, gw)?);
            student.push(student_forward(&img, &self.cfg.vit, &self.cfg.adapter, &self.backbone, &self.student)?);
            labels.push(lab);
        }
        let run = |maps: &[FeatureMap<f32>]| {
            let set: Vec<ProbeSample<'_, f32>> = maps
                .iter()
                .zip(&labels)
                .map(|(m, l)| ProbeSample {
                    features: m,
                    labels: l,
                    label_h: s,
                    label_w: s,
                })
                .collect();
            let (train, test) = set.split_at(PROBE_IMAGES);
            probe_metrics(train, test, 2, cfg)
        };
        Ok((run(&student)?, run(&baseline)?))
    }
}

pub const EVAL_HEADER: &str = "# sample\tl1\tcosine\tspectral_gap\tbaseline_l1\tbaseline_cosine\tbaseline_spectral_gap";

fn report_cols(r: &FidelityReport) -> String {
    format!("{}\t{}\t{}", r.l1, r.cosine, r.spectral_gap)
}

fn eval_command(checkpoint: &Path, data: &str, out: &Path, probe: bool, seed: Option<u64>) -> Result<()> {
    let model = load_model(checkpoint)?;
    let seed = seed.unwrap_or(model.cfg.seed);
    let samples = load_samples(
        &DataSource::parse(data, model.cfg.synthetic_count, seed)?,
        model.cfg.teacher_resolution(),
    )?;
    let (_, gh, gw) = model.cfg.teacher_shape();
    let mut text = format!("{EVAL_HEADER}\n");
    let mut sums = [0.0f64; 6];
    for s in &samples {
        let m = model.maps(&s.image)?;
        let st = fidelity(&m.student, &m.teacher, &model.cfg.spectral)?;
        let bl = fidelity(&bilinear_baseline(&m.backbone, gh, gw)?, &m.teacher, &model.cfg.spectral)?;
        text += &format!("{}\t{}\t{}\n", s.id, report_cols(&st), report_cols(&bl));
        for (acc, v) in sums.iter_mut().zip([st.l1, st.cosine, st.spectral_gap, bl.l1, bl.cosine, bl.spectral_gap]) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    let means: Vec<String> = sums.iter().map(|v| (v / n).to_string()).collect();
    text += &format!("mean\t{}\n", means.join("\t"));
    mkdir(out)?;
    write_text(&out.join(EVAL_FILE), &text)?;
    print!("{text}");
    if probe {
        let (st, bl) = model.probe(seed, &ProbeConfig::default())?;
        let probe_text = format!(
            "# features\tmiou\taccuracy\tabsent_classes\nstudent\t{}\t{}\t{}\nbaseline\t{}\t{}\t{}\n",
            st.miou,
            st.accuracy,
            st.absent.len(),
            bl.miou,
            bl.accuracy,
            bl.absent.len()
        );
        write_text(&out.join(PROBE_FILE), &probe_text)?;
        print!("{probe_text}");
    }
    Ok(())
}

fn viz_command(checkpoint: &Path, image: &Path, out: &Path, format: ImageFormat) -> Result<()> {
    let model = load_model(checkpoint)?;
    let high = square_crop(&read_image(image)?.to_image(), model.cfg.teacher_resolution())?;
    let m = model.maps(&high)?;
    let basis = rgb_basis(&m.teacher)?;
    let panels = [
        Rgb8::from_image(&high),
        to_rgb(&m.teacher, &basis)?,
        to_rgb(&m.backbone, &basis)?,
        to_rgb(&m.student, &basis)?,
    ];
    let dir = out.join(PANEL_DIR);
    mkdir(&dir)?;
    for (name, img) in PANELS.iter().zip(&panels) {
        let path = dir.join(format!("{name}.{}", format.ext()));
        write_image(&path, img)?;
        println!("{}\t{}x{}", path.display(), img.width, img.height);
    }
    Ok(())
}

fn bench_command(cfg: &DistillConfig, sizes: &[usize], out: Option<&Path>, max_timed: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("--sizes needs at least one grid".into()));
    }
    let reports = sizes
        .iter()
        .map(|&g| flop_model(&cfg.vit, &cfg.adapter, g))
        .collect::<Result<Vec<_>>>()?;
    let backbone = init_backbone::<f32>(&cfg.vit, cfg.backbone_seed)?;
    let student = StudentParams::<f32>::init(&cfg.vit, &cfg.adapter, cfg.seed)?;
    let mut wall = Vec::new();
    for &g in sizes {
        if g > max_timed {
            log::info!("grid {g} above --max-timed-grid {max_timed}; timing skipped");
            wall.push((None, None));
            continue;
        }
        let side = g * cfg.vit.patch_size;
        let high = crate::data::synthetic_image(cfg.seed, side);
        let low_side = side / cfg.adapter.upsample_factor;
        let low = resize_bilinear(&high, low_side, low_side, true)?;
        let t0 = Instant::now();
        vit_forward(&high, &cfg.vit, &backbone)?;
        let teacher_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t0 = Instant::now();
        student_forward(&low, &cfg.vit, &cfg.adapter, &backbone, &student)?;
        wall.push((Some(teacher_ms), Some(t0.elapsed().as_secs_f64() * 1e3)));
    }
    let tsv = cost_tsv(&reports, &wall);
    print!("{tsv}");
    if let Some(dir) = out {
        mkdir(dir)?;
        write_text(&dir.join(COST_TSV), &tsv)?;
        write_text(&dir.join(COST_SVG), &cost_svg(&reports))?;
    }
    Ok(())
}
