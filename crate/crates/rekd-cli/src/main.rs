//! `rekd` command-line frontend: synthetic data, training, detection,
//! matching, evaluation and self-tests.
//!
//! Machine-readable outputs go to files; human-readable logs go to stderr.
//! Exit codes: 0 success, 2 usage error, 3 missing file, 4 checkpoint or
//! config mismatch, 5 numerical failure.

use clap::{Args, Parser, Subcommand};
use rekd_core::datagen::{self, RigidPair, Split};
use rekd_core::evalkit::{self, PointMap};
use rekd_core::inference;
use rekd_core::io as rio;
use rekd_core::matching;
use rekd_core::model::{Model, RekdConfig};
use rekd_core::tensor::BnMode;
use rekd_core::{Error, Tensor};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rekd", version, about = "Rotation-equivariant oriented keypoint detection")]
struct Cli {
    /// Force sequential numerics (single worker thread).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker thread cap (also honors REKD_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Cyclic group order.
    #[arg(long, default_value_t = 36)]
    group: usize,
    /// Channels per group element.
    #[arg(long, default_value_t = 2)]
    channels: usize,
    /// Internal scale-space depth.
    #[arg(long, default_value_t = 3)]
    scales: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic rotation-pair dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pairs: usize,
        #[arg(long, default_value_t = 192)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a synthetic dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 100.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Detect keypoints on one image.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num_kpts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect, describe and match two images.
    Match {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num_kpts: usize,
        #[arg(long)]
        out: PathBuf,
        /// Apply orientation-consensus outlier filtering.
        #[arg(long)]
        filter_orientation: bool,
        /// Outlier threshold in degrees.
        #[arg(long, default_value_t = 30.0)]
        t: f64,
    },
    /// Repeatability over a synthetic pair directory or HPatches-style dir.
    EvalRep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num_kpts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean matching accuracy over a pair directory or HPatches-style dir.
    EvalMma {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        num_kpts: usize,
        #[arg(long)]
        filter_orientation: bool,
        #[arg(long, default_value_t = 30.0)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Orientation-estimation accuracy over a synthetic pair directory.
    EvalOri {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 15.0)]
        thresh_deg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-angle repeatability / orientation-accuracy curves.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of PGM images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 4.0 / 255.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 300)]
        num_kpts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient self-test; nonzero exit on failure.
    Gradcheck,
    /// Equivariance self-test; nonzero exit on failure.
    EquivCheck {
        #[arg(long, default_value_t = 20)]
        inits: usize,
        /// Also report the non-gating approximate check at 10-degree steps.
        #[arg(long)]
        approx: bool,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::BadMagic | Error::Truncated | Error::ConfigMismatch(_) => 4,
        Error::NonFinite { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    rekd_core::par::init_threads(if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    });
    rekd_core::par::set_sequential(cli.deterministic);
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// Write the fully resolved configuration next to an output path.
fn echo_config(out: &Path, cfg_text: &str) -> rekd_core::Result<()> {
    let path = if out.is_dir() {
        out.join("config.txt")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".config.txt");
        out.with_file_name(name)
    };
    std::fs::write(path, cfg_text)?;
    Ok(())
}

fn load_model(path: &Path) -> rekd_core::Result<Model<f32>> {
    Model::<f32>::load_checkpoint(path)
}

/// Data source for the eval commands: synthetic pair dirs and
/// HPatches-style scene dirs both reduce to image pairs with a point map.
struct EvalPair {
    name: String,
    img_a: Tensor<f32>,
    img_b: Tensor<f32>,
    map: Box<dyn PointMap>,
    gt_angle: Option<f64>,
}

fn load_eval_pairs(data: &Path) -> rekd_core::Result<Vec<EvalPair>> {
    if data.join("manifest.txt").exists() {
        let records = datagen::read_manifest(data)?;
        let mut out = Vec::new();
        for rec in records {
            let pair = datagen::load_pair(data, rec.index)?;
            out.push(EvalPair {
                name: format!("{:04}", rec.index),
                img_a: pair.img_a,
                img_b: pair.img_b,
                gt_angle: Some(pair.t.angle_deg),
                map: Box::new(pair.t),
            });
        }
        Ok(out)
    } else {
        let scenes = evalkit::load_hpatches_dir(data)?;
        Ok(scenes
            .into_iter()
            .map(|s| EvalPair {
                name: format!("{}/1-{}", s.scene, s.k),
                img_a: s.img_a,
                img_b: s.img_b,
                gt_angle: None,
                map: Box::new(s.map),
            })
            .collect())
    }
}

fn run(cli: Cli) -> rekd_core::Result<ExitCode> {
    match cli.command {
        Command::Synth {
            out,
            pairs,
            size,
            seed,
        } => {
            datagen::make_dataset(pairs, size, seed, &out)?;
            echo_config(
                &out,
                &format!("command=synth\npairs={pairs}\nsize={size}\nseed={seed}\n"),
            )?;
            eprintln!("wrote {pairs} pairs to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            data,
            out,
            model,
            epochs,
            lr,
            batch,
            beta,
            seed,
        } => {
            let cfg = RekdConfig {
                group_order: model.group,
                channels: model.channels,
                scales: model.scales,
                epochs,
                lr,
                batch,
                beta,
                ..Default::default()
            };
            let records = datagen::read_manifest(&data)?;
            let mut train_pairs: Vec<RigidPair> = Vec::new();
            let mut val_pairs: Vec<RigidPair> = Vec::new();
            for rec in &records {
                let pair = datagen::load_pair(&data, rec.index)?;
                match rec.split {
                    Split::Train => train_pairs.push(pair),
                    Split::Val => val_pairs.push(pair),
                }
            }
            eprintln!(
                "training on {} pairs ({} validation), config: |G|={} C={} epochs={}",
                train_pairs.len(),
                val_pairs.len(),
                cfg.group_order,
                cfg.channels,
                cfg.epochs
            );
            let mut net = Model::<f32>::new(cfg.clone(), seed)?;
            let log_path = out.with_extension("log.csv");
            let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
            writeln!(log, "epoch,loss_total,loss_ori,loss_kpts,val_repeatability,lr")?;
            let report = rekd_core::train::train(&mut net, &train_pairs, &val_pairs, seed, |stats| {
                eprintln!(
                    "epoch {:>3}: loss {:.4} (ori {:.4}, kpts {:.4}) val-rep {:.3} lr {:.5}",
                    stats.epoch,
                    stats.loss.total,
                    stats.loss.ori,
                    stats.loss.kpts,
                    stats.val_repeatability,
                    stats.lr
                );
                let _ = writeln!(
                    log,
                    "{},{},{},{},{},{}",
                    stats.epoch,
                    stats.loss.total,
                    stats.loss.ori,
                    stats.loss.kpts,
                    stats.val_repeatability,
                    stats.lr
                );
            })?;
            eprintln!(
                "best epoch {} (val repeatability {:.3})",
                report.best_epoch, report.best_val_repeatability
            );
            net.save_checkpoint(&out)?;
            echo_config(&out, &net.cfg.to_text())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Detect {
            ckpt,
            image,
            num_kpts,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let img = rio::read_pgm(&image)?;
            let kps = inference::detect(&model, &img, num_kpts)?;
            rio::write_keypoints(&out, &kps, img.shape()[1], img.shape()[0])?;
            echo_config(&out, &model.cfg.to_text())?;
            eprintln!("{} keypoints -> {}", kps.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Match {
            ckpt,
            image_a,
            image_b,
            num_kpts,
            out,
            filter_orientation,
            t,
        } => {
            let model = load_model(&ckpt)?;
            let img_a = rio::read_pgm(&image_a)?;
            let img_b = rio::read_pgm(&image_b)?;
            let (pairs, dists, flags, _, _) =
                match_images(&model, &img_a, &img_b, num_kpts, filter_orientation, t)?;
            rio::write_matches(&out, &pairs, &dists, &flags)?;
            echo_config(&out, &model.cfg.to_text())?;
            eprintln!("{} matches -> {}", pairs.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalRep {
            ckpt,
            data,
            num_kpts,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let pairs = load_eval_pairs(&data)?;
            let mut rows = Vec::new();
            for p in &pairs {
                let a = inference::detect(&model, &p.img_a, num_kpts)?;
                let b = inference::detect(&model, &p.img_b, num_kpts)?;
                rows.push((
                    p.name.clone(),
                    evalkit::repeatability(&a, &b, p.map.as_ref(), 3.0),
                ));
            }
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "pair,repeatability")?;
            for (name, rep) in &rows {
                writeln!(w, "{name},{rep:.6}")?;
            }
            let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len().max(1) as f64;
            writeln!(w, "mean,{mean:.6}")?;
            echo_config(&out, &model.cfg.to_text())?;
            eprintln!("repeatability over {} pairs: {:.4}", rows.len(), mean);
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalMma {
            ckpt,
            data,
            num_kpts,
            filter_orientation,
            t,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let pairs = load_eval_pairs(&data)?;
            let mut rows = Vec::new();
            for p in &pairs {
                let (mpairs, dists, flags, kps_a, kps_b) =
                    match_images(&model, &p.img_a, &p.img_b, num_kpts, filter_orientation, t)?;
                let kept = matching::MatchSet {
                    pairs: mpairs
                        .iter()
                        .zip(&flags)
                        .filter_map(|(&m, &f)| f.then_some(m))
                        .collect(),
                    distances: dists
                        .iter()
                        .zip(&flags)
                        .filter_map(|(&d, &f)| f.then_some(d))
                        .collect(),
                };
                let acc = evalkit::mma(&kept, &kps_a, &kps_b, p.map.as_ref(), &[3.0, 5.0]);
                rows.push((p.name.clone(), acc[0], acc[1], kept.len()));
            }
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "pair,mma3,mma5,matches")?;
            for (name, m3, m5, n) in &rows {
                writeln!(w, "{name},{m3:.6},{m5:.6},{n}")?;
            }
            let n = rows.len().max(1) as f64;
            let mean3 = rows.iter().map(|r| r.1).sum::<f64>() / n;
            let mean5 = rows.iter().map(|r| r.2).sum::<f64>() / n;
            writeln!(w, "mean,{mean3:.6},{mean5:.6},")?;
            echo_config(&out, &model.cfg.to_text())?;
            eprintln!(
                "MMA@3 {:.4} MMA@5 {:.4} over {} pairs",
                mean3,
                mean5,
                rows.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalOri {
            ckpt,
            data,
            thresh_deg,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let pairs = load_eval_pairs(&data)?;
            let mut rows = Vec::new();
            for p in &pairs {
                let Some(angle) = p.gt_angle else {
                    continue; // orientation accuracy needs a known rotation
                };
                let o_a = model.forward(&p.img_a, BnMode::Eval)?.output.o;
                let o_b = model.forward(&p.img_b, BnMode::Eval)?.output.o;
                let (h, w) = (p.img_a.shape()[0], p.img_a.shape()[1]);
                let ones = Tensor::<f32>::full(&[h, w], 1.0);
                let t = rekd_core::RotTransform::rotation(angle, (w, h));
                let mask = rekd_core::geometry::warp_image(&ones, &t.inverse())?.1;
                let acc = evalkit::orientation_accuracy(&o_a, &o_b, &t, angle, &mask, thresh_deg);
                rows.push((p.name.clone(), acc));
            }
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "pair,ori_accuracy")?;
            for (name, acc) in &rows {
                writeln!(w, "{name},{acc:.6}")?;
            }
            let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len().max(1) as f64;
            writeln!(w, "mean,{mean:.6}")?;
            echo_config(&out, &model.cfg.to_text())?;
            eprintln!("orientation accuracy over {} pairs: {:.4}", rows.len(), mean);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            ckpt,
            images,
            noise_sigma,
            num_kpts,
            out,
        } => {
            let model = load_model(&ckpt)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&images)?
                .filter_map(|e| {
                    let p = e.ok()?.path();
                    (p.extension().map(|x| x == "pgm"))
                        .unwrap_or(false)
                        .then_some(p)
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "no .pgm images under {}",
                    images.display()
                )));
            }
            let imgs: Vec<Tensor<f32>> = paths
                .iter()
                .map(|p| rio::read_pgm(p))
                .collect::<rekd_core::Result<_>>()?;
            let angles: Vec<f64> = (0..360).map(|a| a as f64).collect();
            let rows = evalkit::rotation_sweep(&model, &imgs, &angles, noise_sigma, num_kpts)?;
            evalkit::write_sweep_csv(&out, &rows)?;
            echo_config(&out, &model.cfg.to_text())?;
            eprintln!("sweep over {} images -> {}", imgs.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck => {
            let rows = rekd_core::selftest::run_grad_check()?;
            let mut ok = true;
            for row in &rows {
                let status = if row.pass() { "pass" } else { "FAIL" };
                eprintln!(
                    "{status}  {:<28} {:>12.3e} < {:.0e}",
                    row.name, row.value, row.bound
                );
                ok &= row.pass();
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::EquivCheck { inits, approx } => {
            let rows = rekd_core::selftest::run_equiv_check(&[4, 8, 36], inits, 32)?;
            let mut ok = true;
            for row in &rows {
                let status = if row.pass() { "pass" } else { "FAIL" };
                eprintln!(
                    "{status}  {:<44} {:>12.3e} < {:.0e}",
                    row.name, row.value, row.bound
                );
                ok &= row.pass();
            }
            if approx {
                for row in rekd_core::selftest::run_equiv_check_approx(48)? {
                    eprintln!(
                        "info  {:<44} {:>12.3e} (tracked, not gating)",
                        row.name, row.value
                    );
                }
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

/// Detect, describe and match two images; returns
/// `(pairs, distances, inlier flags, keypoints_a, keypoints_b)` where pair
/// indices refer to the keypoint lists.
#[allow(clippy::type_complexity)]
fn match_images(
    model: &Model<f32>,
    img_a: &Tensor<f32>,
    img_b: &Tensor<f32>,
    num_kpts: usize,
    filter_orientation: bool,
    t: f64,
) -> rekd_core::Result<(
    Vec<(usize, usize)>,
    Vec<f32>,
    Vec<bool>,
    Vec<inference::Keypoint>,
    Vec<inference::Keypoint>,
)> {
    let kps_a = inference::detect(model, img_a, num_kpts)?;
    let kps_b = inference::detect(model, img_b, num_kpts)?;
    let desc_a = matching::describe_all(img_a, &kps_a, matching::DESCRIPTOR_SIDE);
    let desc_b = matching::describe_all(img_b, &kps_b, matching::DESCRIPTOR_SIDE);
    // drop invalid (flat) descriptors but keep original indices
    let (ia, da): (Vec<usize>, Vec<Vec<f32>>) = desc_a
        .into_iter()
        .enumerate()
        .filter_map(|(i, (d, ok))| ok.then_some((i, d)))
        .unzip();
    let (ib, db): (Vec<usize>, Vec<Vec<f32>>) = desc_b
        .into_iter()
        .enumerate()
        .filter_map(|(i, (d, ok))| ok.then_some((i, d)))
        .unzip();
    let matches = matching::mnn_match(&da, &db);
    let remapped = matching::MatchSet {
        pairs: matches.pairs.iter().map(|&(i, j)| (ia[i], ib[j])).collect(),
        distances: matches.distances.clone(),
    };
    let flags = if filter_orientation {
        let ori_a: Vec<f64> = kps_a.iter().map(|k| k.orientation_deg).collect();
        let ori_b: Vec<f64> = kps_b.iter().map(|k| k.orientation_deg).collect();
        matching::orientation_outlier_filter(&remapped, &ori_a, &ori_b, model.group(), t)
    } else {
        vec![true; remapped.len()]
    };
    Ok((remapped.pairs, remapped.distances, flags, kps_a, kps_b))
}
