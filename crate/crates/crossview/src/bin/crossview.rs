//! Command-line front end: every capability of the library as one
//! subcommand. Exits 0 on success, 1 with a one-line diagnostic on any
//! error.

use clap::{Parser, Subcommand};
use crossview::crop;
use crossview::data::{self, DatasetModes, Placement, RenderParams, SceneSpec};
use crossview::geo;
use crossview::pipeline::{self, RunConfig};
use crossview::vit::ViTConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "crossview", version, about = "Cross-view geo-localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-view dataset
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// aligned | offset
        #[arg(long, default_value = "aligned")]
        mode: String,
        #[arg(long, default_value_t = false)]
        unknown_orientation: bool,
        #[arg(long, default_value_t = 360.0)]
        fov: f64,
        #[arg(long, default_value_t = 480.0)]
        world_side: f64,
        #[arg(long, default_value_t = 64)]
        landmarks: usize,
        #[arg(long, default_value_t = 64)]
        pano_h: usize,
        #[arg(long, default_value_t = 256)]
        pano_w: usize,
        #[arg(long, default_value_t = 128)]
        aerial_px: usize,
        #[arg(long, default_value_t = 40.0)]
        extent: f64,
        #[arg(long, default_value_t = 2.0)]
        radius_min: f64,
        #[arg(long, default_value_t = 6.0)]
        radius_max: f64,
        #[arg(long, default_value_t = 12)]
        palette: usize,
        #[arg(long, default_value_t = 0.0)]
        terrain: f64,
    },
    /// Stage-1 training from a config file
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Export per-reference attention maps from a stage-1 checkpoint
    ExportAttn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-2 training with attention-guided cropping
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        attn: PathBuf,
    },
    /// Evaluate a checkpoint: R@k, hit rate, meter curve
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// write the metrics CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic multiply-add breakdown for an encoder forward pass
    Flops {
        #[arg(long)]
        tokens: usize,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 384)]
        dim: usize,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 6)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        ratio: usize,
        #[arg(long, default_value_t = 1000)]
        embed_out: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
    },
    /// Polar-warp an aerial image into a panorama-like layout
    Polar {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 112)]
        out_h: usize,
        #[arg(long, default_value_t = 616)]
        out_w: usize,
        /// recenter on this pixel instead of the image center
        #[arg(long)]
        query_x: Option<f64>,
        #[arg(long)]
        query_y: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::SynthGen {
            out,
            n,
            seed,
            mode,
            unknown_orientation,
            fov,
            world_side,
            landmarks,
            pano_h,
            pano_w,
            aerial_px,
            extent,
            radius_min,
            radius_max,
            palette,
            terrain,
        } => {
            let placement = match mode.as_str() {
                "aligned" => Placement::Aligned,
                "offset" => Placement::Offset,
                other => return Err(format!("unknown mode {other:?} (aligned|offset)")),
            };
            let spec = SceneSpec {
                seed,
                world_side_m: world_side,
                landmarks,
                radius_range_m: (radius_min, radius_max),
                palette,
                terrain_amp: terrain,
            };
            let modes = DatasetModes {
                placement,
                unknown_orientation,
                fov_deg: fov,
            };
            let params = RenderParams {
                pano_h,
                pano_w,
                aerial_px,
                tile_extent_m: extent,
            };
            let index =
                data::emit_dataset(&spec, n, &modes, &params, &out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} samples to {} (index.csv, street/, aerial/)",
                index.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainStage1 { config } => {
            let cfg = RunConfig::from_file(&config).map_err(|e| e.to_string())?;
            let out = pipeline::train_stage1(&cfg).map_err(|e| e.to_string())?;
            println!(
                "stage-1 done: {} steps, first loss {:.4}, train R@1 {:.2}, checkpoint {}",
                out.steps,
                out.first_loss,
                out.final_train_r1,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::ExportAttn {
            config,
            checkpoint,
            out,
        } => {
            let cfg = RunConfig::from_file(&config).map_err(|e| e.to_string())?;
            let count = pipeline::export_attention(&cfg, &checkpoint, &out)
                .map_err(|e| e.to_string())?;
            println!("wrote {count} attention maps to {}", out.display());
            Ok(())
        }
        Command::TrainStage2 {
            config,
            checkpoint,
            attn,
        } => {
            let cfg = RunConfig::from_file(&config).map_err(|e| e.to_string())?;
            let out =
                pipeline::train_stage2(&cfg, &checkpoint, &attn).map_err(|e| e.to_string())?;
            println!(
                "stage-2 done: {} steps, train R@1 {:.2}, checkpoint {}",
                out.steps,
                out.final_train_r1,
                out.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            out,
        } => {
            let cfg = RunConfig::from_file(&config).map_err(|e| e.to_string())?;
            let metrics =
                pipeline::evaluate(&cfg, &checkpoint, &split).map_err(|e| e.to_string())?;
            match out {
                Some(path) => {
                    std::fs::write(&path, metrics.csv()).map_err(|e| e.to_string())?;
                    println!("metrics written to {}", path.display());
                }
                None => print!("{}", metrics.csv()),
            }
            Ok(())
        }
        Command::Flops {
            tokens,
            patch,
            dim,
            layers,
            heads,
            ratio,
            embed_out,
            channels,
        } => {
            let cfg = ViTConfig {
                patch_size: patch,
                model_dim: dim,
                layers,
                heads,
                mlp_ratio: ratio,
                embed_out,
                pos_embed: crossview::vit::PosEmbedKind::Learnable,
            };
            cfg.validate().map_err(|e| e.to_string())?;
            print!("{}", crop::flops(&cfg, tokens, channels).csv());
            Ok(())
        }
        Command::Polar {
            input,
            output,
            out_h,
            out_w,
            query_x,
            query_y,
        } => {
            let img = data::load_ppm(&input).map_err(|e| e.to_string())?;
            let warped = match (query_x, query_y) {
                (Some(x), Some(y)) => {
                    geo::polar_transform_at(&img, (x, y), out_h, out_w).map_err(|e| e.to_string())?
                }
                (None, None) => {
                    geo::polar_transform(&img, out_h, out_w).map_err(|e| e.to_string())?
                }
                _ => return Err("--query-x and --query-y must be given together".into()),
            };
            data::save_ppm(&warped, &output).map_err(|e| e.to_string())?;
            println!("wrote {}", output.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
