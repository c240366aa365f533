//! Command-line driver: train the toy donor, bootstrap students against it,
//! densify token grids, check gradients, count costs, and render RoI traces.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sparseformer::analysis::{count_flops, render_roi_svg};
use sparseformer::bootstrap::{
    bootstrap_run, continue_with_more_tokens, mean_alignment_loss, teacher_accuracy,
    train_toy_teacher, write_loss_csv, BootstrapConfig, BootstrapReport, Objective,
    TeacherTrainConfig,
};
use sparseformer::cortex::Student;
use sparseformer::data::{discs_dataset, eval_resize, shapes_dataset, unlabeled_shapes};
use sparseformer::dense_head::{
    pixel_accuracy, predict_segmentation, train_segmenter, HeadSpec, SegHead, SegTrainConfig,
};
use sparseformer::io::images::{list_images, load_image, save_label_map};
use sparseformer::io::{load_checkpoint, save_checkpoint, RunConfig, SpecSnapshot};
use sparseformer::model::{SfSpec, TeacherSpec};
use sparseformer::numerics::gradcheck::run_full_suite;
use sparseformer::vit::Teacher;
use sparseformer::Tensor32;

#[derive(Parser)]
#[command(name = "sparseformer", version, about = "SparseFormer training and analysis tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy donor classifier on synthetic shapes and save it.
    TeacherTrain(TeacherTrainArgs),
    /// Align a fresh student to a trained donor and save the result.
    Bootstrap(BootstrapArgs),
    /// Re-initialize a trained student with more tokens and keep aligning.
    Continue(ContinueArgs),
    /// Mean cosine alignment loss of a student against its donor.
    EvalAlign(EvalAlignArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Parameter and multiply-accumulate counts as JSON.
    Count(CountArgs),
    /// Render the RoI refinement of one image as an SVG overlay.
    Visualize(VisualizeArgs),
    /// Train the dense prediction head on synthetic disc images.
    SegmentToy(SegmentToyArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::TeacherTrain(a) => teacher_train(a),
        Cmd::Bootstrap(a) => bootstrap(a),
        Cmd::Continue(a) => continue_cmd(a),
        Cmd::EvalAlign(a) => eval_align(a),
        Cmd::Gradcheck(a) => gradcheck(a),
        Cmd::Count(a) => count(a),
        Cmd::Visualize(a) => visualize(a),
        Cmd::SegmentToy(a) => segment_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_teacher(path: &Path) -> Result<Teacher<f32>> {
    let (store, snap) =
        load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    match snap {
        SpecSnapshot::Teacher(spec) => Ok(Teacher::from_store(spec, store)),
        SpecSnapshot::Student(_) => {
            bail!("{} holds a student model, expected a donor", path.display())
        }
    }
}

fn load_student(path: &Path) -> Result<Student<f32>> {
    let (store, snap) =
        load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    match snap {
        SpecSnapshot::Student(spec) => Ok(Student { spec, store }),
        SpecSnapshot::Teacher(_) => {
            bail!("{} holds a donor model, expected a student", path.display())
        }
    }
}

/// Images from a directory, or seeded synthetic shapes when none is given.
fn gather_images(
    dir: Option<&Path>,
    synthetic: usize,
    side: usize,
    seed: u64,
) -> Result<Vec<Tensor32>> {
    match dir {
        Some(d) => {
            let paths = list_images(d)?;
            if paths.is_empty() {
                bail!("no images under {}", d.display());
            }
            paths
                .iter()
                .map(|p| load_image(p).with_context(|| format!("reading {}", p.display())))
                .collect()
        }
        None => Ok(unlabeled_shapes(synthetic, side, seed)),
    }
}

fn print_curve(epoch_mean_loss: &[f64]) {
    if let (Some(first), Some(last)) = (epoch_mean_loss.first(), epoch_mean_loss.last()) {
        println!("epoch mean loss: {first:.4} -> {last:.4}");
    }
}

#[derive(Args)]
struct TeacherTrainArgs {
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    train_count: usize,
    #[arg(long, default_value_t = 64)]
    eval_count: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn teacher_train(a: TeacherTrainArgs) -> Result<()> {
    let spec = TeacherSpec::toy();
    let side = spec.image;
    let mut teacher: Teacher<f32> = Teacher::init(spec, a.seed);
    let train = shapes_dataset(a.train_count, side, a.seed.wrapping_add(1));
    let eval = shapes_dataset(a.eval_count, side, a.seed.wrapping_add(2));
    let cfg = TeacherTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        base_lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let losses = train_toy_teacher(&mut teacher, &train, &cfg)?;
    print_curve(&losses);
    let train_acc = teacher_accuracy(&teacher, &train)?;
    let eval_acc = teacher_accuracy(&teacher, &eval)?;
    println!("train accuracy {train_acc:.4}, eval accuracy {eval_acc:.4}");
    save_checkpoint(&teacher.store, &SpecSnapshot::Teacher(teacher.spec.clone()), &a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct BootstrapArgs {
    /// Donor checkpoint providing inherited weights and alignment targets.
    #[arg(long)]
    teacher: PathBuf,
    /// Student checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value run configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images; synthetic shapes when absent.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Synthetic image count used when --images is absent.
    #[arg(long, default_value_t = 256)]
    synthetic: usize,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss curve CSV path; defaults to the checkpoint path with `.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_file(p)
            .with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = a.tokens {
        rc.tokens = Some(v);
    }
    if let Some(v) = a.epochs {
        rc.epochs = v;
    }
    if let Some(v) = a.batch_size {
        rc.batch_size = v;
    }
    if let Some(v) = a.lr {
        rc.base_lr = v;
    }
    if let Some(v) = a.warmup_epochs {
        rc.warmup_epochs = v;
    }
    if let Some(v) = a.seed {
        rc.seed = v;
    }

    let teacher = load_teacher(&a.teacher)?;
    let spec = SfSpec::from_teacher(&teacher.spec, rc.tokens.unwrap_or(16));
    let images = gather_images(
        a.images.as_deref(),
        a.synthetic,
        teacher.spec.image,
        rc.seed.wrapping_add(7),
    )?;
    let mut student = Student::bootstrapped_from(spec, &teacher, rc.seed)?;
    let cfg = BootstrapConfig::from(&rc);
    let report = bootstrap_run(&teacher, &mut student, &images, &Objective::Cosine, &cfg)?;
    print_curve(&report.epoch_mean_loss);
    finish_run(&student, &report, &a.out, a.csv.as_deref())
}

/// Saves the student checkpoint plus its loss curve CSV.
fn finish_run(
    student: &Student<f32>,
    report: &BootstrapReport,
    out: &Path,
    csv: Option<&Path>,
) -> Result<()> {
    save_checkpoint(&student.store, &SpecSnapshot::Student(student.spec.clone()), out)?;
    let csv = csv.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"));
    write_loss_csv(&report.curve, &csv)?;
    println!("saved {} and {}", out.display(), csv.display());
    Ok(())
}

#[derive(Args)]
struct ContinueArgs {
    /// Trained student checkpoint to densify.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Donor checkpoint the student was aligned against.
    #[arg(long)]
    teacher: PathBuf,
    /// New token count; must exceed the stored one.
    #[arg(long)]
    tokens: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    synthetic: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn continue_cmd(a: ContinueArgs) -> Result<()> {
    let teacher = load_teacher(&a.teacher)?;
    let mut student = load_student(&a.checkpoint)?;
    let images = gather_images(
        a.images.as_deref(),
        a.synthetic,
        student.spec.image,
        a.seed.wrapping_add(7),
    )?;
    let cfg = BootstrapConfig {
        epochs: a.epochs,
        base_lr: a.lr,
        ..BootstrapConfig::continued(a.seed)
    };
    let report = continue_with_more_tokens(&teacher, &mut student, &images, a.tokens, &cfg)?;
    print_curve(&report.epoch_mean_loss);
    finish_run(&student, &report, &a.out, a.csv.as_deref())
}

#[derive(Args)]
struct EvalAlignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    teacher: PathBuf,
    /// Directory of evaluation images; synthetic shapes when absent.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    synthetic: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn eval_align(a: EvalAlignArgs) -> Result<()> {
    let teacher = load_teacher(&a.teacher)?;
    let student = load_student(&a.checkpoint)?;
    let images = gather_images(
        a.images.as_deref(),
        a.synthetic,
        student.spec.image,
        a.seed.wrapping_add(7),
    )?;
    let loss = mean_alignment_loss(&teacher, &student, &images)?;
    println!("mean cosine alignment loss over {} images: {loss:.6}", images.len());
    Ok(())
}

#[derive(Args)]
struct GradcheckArgs {
    /// Relative tolerance against central finite differences.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reports = run_full_suite(a.tol);
    let mut bad = 0usize;
    for r in &reports {
        println!("{}", r.line());
        if !r.pass {
            bad += 1;
        }
    }
    if bad > 0 {
        bail!("{bad} of {} operations failed the finite-difference check", reports.len());
    }
    println!("all {} operations within {:.1e}", reports.len(), a.tol);
    Ok(())
}

#[derive(Args)]
struct CountArgs {
    /// Architecture: sf-b, sf-l, or toy.
    #[arg(long, default_value = "sf-b")]
    spec: String,
    /// Keep every donor block instead of discarding the leading third.
    #[arg(long)]
    no_truncation: bool,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    /// Also count the dense prediction head for this many classes.
    #[arg(long)]
    dense_classes: Option<usize>,
}

fn count(a: CountArgs) -> Result<()> {
    let base = match a.spec.as_str() {
        "sf-b" => SfSpec::sf_b(),
        "sf-l" => SfSpec::sf_l(),
        "toy" => SfSpec::toy(a.tokens.unwrap_or(16)),
        other => bail!("unknown spec `{other}` (expected sf-b, sf-l, or toy)"),
    };
    let spec = if a.no_truncation { base.without_truncation() } else { base };
    let head = a.dense_classes.map(HeadSpec::full_scale);
    let report = count_flops(
        &spec,
        a.resolution.unwrap_or(spec.image),
        a.tokens.unwrap_or(spec.n_tokens),
        head.as_ref(),
    )?;
    println!("{}", report.to_json());
    Ok(())
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image; a seeded synthetic shape image is used when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn visualize(a: VisualizeArgs) -> Result<()> {
    let student = load_student(&a.checkpoint)?;
    let side = student.spec.image;
    let image: Tensor32 = match &a.image {
        Some(p) => {
            let raw = load_image(p).with_context(|| format!("reading {}", p.display()))?;
            if raw.dim(0) == side && raw.dim(1) == side {
                raw
            } else {
                eval_resize(&raw, side)
            }
        }
        None => unlabeled_shapes(1, side, a.seed).pop().unwrap(),
    };
    let (_, trace) = student.representation_traced(&image)?;
    render_roi_svg(&image, &trace, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Args)]
struct SegmentToyArgs {
    /// Start from this student checkpoint instead of random weights.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    tokens: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    train_count: usize,
    #[arg(long, default_value_t = 8)]
    eval_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the first held-out prediction as a gray label map.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn segment_toy(a: SegmentToyArgs) -> Result<()> {
    let mut student = match &a.checkpoint {
        Some(p) => load_student(p)?,
        None => Student::init(SfSpec::toy(a.tokens), a.seed)?,
    };
    let side = student.spec.image;
    let mut head = SegHead::init(&student.spec, HeadSpec::toy(2), a.seed.wrapping_add(1));
    let data = discs_dataset(a.train_count + a.eval_count, side, a.seed.wrapping_add(2));
    let (train, eval) = data.split_at(a.train_count);
    let cfg = SegTrainConfig { epochs: a.epochs, seed: a.seed, ..Default::default() };
    let losses = train_segmenter(&mut student, &mut head, train, &cfg)?;
    print_curve(&losses);
    let acc = pixel_accuracy(&student, &head, eval)?;
    println!("held-out pixel accuracy {acc:.4}");
    if let Some(p) = &a.out {
        let pred = predict_segmentation(&student, &head, &eval[0].image)?;
        save_label_map(&pred, side, side, p)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}
