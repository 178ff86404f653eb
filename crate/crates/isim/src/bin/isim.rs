use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use isim::camops::{generate_pseudo_label, read_cam_dump};
use isim::dataio::{generate_shapes_dataset, load_dataset_dir, save_dataset_dir, ShapesConfig};
use isim::dcrf::CrfParams;
use isim::harness::{
    classification_accuracy, default_palette, eval_ablation, export_masks, predict_logits,
    run_experiment, AccuracyMode, RunConfig,
};
use isim::numcore::Tensor;
use isim::pipeline::load_train_state;

#[derive(Parser)]
#[command(name = "isim", about = "Iterative pseudo-label segmentation from image-level labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset directory.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        num_images: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 2)]
        max_shapes: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_level: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run a full training experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a trained checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional run config; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Export the checkpoint's pseudo-label archive as palette PNGs.
    ExportMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standalone dense-CRF refinement of a saved CAM dump.
    CrfRefine {
        #[arg(long)]
        cam_dump: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        tau: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_image_hwc(path: &PathBuf) -> isim::Result<Tensor> {
    let rgb = image::open(path)
        .map_err(|e| isim::IsimError::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let p = rgb.get_pixel(x as u32, y as u32);
            let px = (y * w + x) * 3;
            data[px] = p[0] as f64 / 255.0;
            data[px + 1] = p[1] as f64 / 255.0;
            data[px + 2] = p[2] as f64 / 255.0;
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

fn run(cli: Cli) -> isim::Result<()> {
    match cli.command {
        Command::GenerateData {
            out,
            num_images,
            image_size,
            max_shapes,
            noise_level,
            seed,
        } => {
            let samples = generate_shapes_dataset(&ShapesConfig {
                num_images,
                image_size,
                max_shapes,
                noise_level,
                seed,
                ..ShapesConfig::default()
            })?;
            save_dataset_dir(&samples, &out)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = run_experiment(&cfg)?;
            print!("{}", summary.table());
            println!("metrics: {}", summary.csv_path.display());
            println!("checkpoint: {}", summary.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
        } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let state = load_train_state(&checkpoint)?;
            let samples = load_dataset_dir(&data)?;
            let logits = predict_logits(&state.model, &samples)?;
            let targets: Vec<f64> = samples
                .iter()
                .flat_map(|s| s.class_labels.iter().copied())
                .collect();
            let acc = classification_accuracy(
                &logits,
                &targets,
                cfg.accuracy_threshold,
                AccuracyMode::PerClass,
            )?;
            println!("classification accuracy: {acc:.4}");
            if samples.iter().any(|s| s.gt_mask.is_some()) {
                let abl = eval_ablation(&state, &samples, &cfg.train)?;
                println!("threshold-only mIoU: {:.4}", abl.threshold_miou);
                println!("CRF-refined mIoU:    {:.4}", abl.crf_miou);
                println!(
                    "CRF >= threshold on {:.1}% of images",
                    abl.crf_at_least_threshold * 100.0
                );
            }
        }
        Command::ExportMasks { checkpoint, out } => {
            let state = load_train_state(&checkpoint)?;
            let palette = default_palette(state.model.num_classes + 1);
            let files = export_masks(&state.pseudo_labels, &palette, &out, state.epoch)?;
            println!("wrote {} masks to {}", files.len(), out.display());
        }
        Command::CrfRefine {
            cam_dump,
            image,
            tau,
            iterations,
            out,
        } => {
            let cams = read_cam_dump(&cam_dump)?;
            let img = load_image_hwc(&image)?;
            let crf = CrfParams {
                iterations,
                ..CrfParams::default()
            };
            let result = generate_pseudo_label(&cams, &img, tau, &crf)?;
            let palette = default_palette(cams.num_classes() + 1);
            let mut masks = BTreeMap::new();
            masks.insert("refined".to_string(), result.mask);
            masks.insert("threshold_only".to_string(), result.threshold_only);
            let parent = out.clone();
            let files = export_masks(&masks, &palette, &parent, 0)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
