//! End-to-end two-stage training on a small synthetic dataset:
//! stage-1 metric training, attention export, stage-2 with non-uniform
//! cropping, and retrieval evaluation of both checkpoints.
//!
//! Sized to finish in about two minutes; see the README for the full
//! desk-scale run.

use crossview::data::{emit_dataset, DatasetModes, RenderParams, SceneSpec};
use crossview::pipeline::{
    evaluate, export_attention, train_stage1, train_stage2, RunConfig,
};
use std::path::PathBuf;

fn main() {
    let root = PathBuf::from("target/example_out/train_toy");
    let _ = std::fs::remove_dir_all(&root);
    let data_dir = root.join("data");

    println!("generating 32 aligned street/aerial pairs...");
    emit_dataset(
        &SceneSpec {
            seed: 17,
            world_side_m: 320.0,
            landmarks: 120,
            radius_range_m: (6.0, 13.0),
            palette: 12,
            terrain_amp: 0.9,
        },
        32,
        &DatasetModes::default(),
        &RenderParams {
            pano_h: 16,
            pano_w: 32,
            aerial_px: 32,
            tile_extent_m: 40.0,
        },
        &data_dir,
    )
    .unwrap();

    let cfg = RunConfig {
        seed: 3,
        out_dir: root.join("run"),
        data_index: data_dir.join("index.csv"),
        patch_size: 8,
        model_dim: 64,
        layers: 4,
        heads: 4,
        mlp_ratio: 4,
        embed_out: 64,
        alpha: 10.0,
        lr: 1e-4,
        weight_decay: 0.03,
        rho: 0.5,
        eta: 0.01,
        asam: true,
        batch_size: 4,
        epochs_stage1: 60,
        epochs_stage2: 20,
        beta: 0.64,
        gamma: 1.0,
        ..Default::default()
    };

    println!("stage-1: training both streams ({} epochs)...", cfg.epochs_stage1);
    let s1 = train_stage1(&cfg).unwrap();
    println!(
        "  first loss {:.4} (ln 2 = 0.6931), final train R@1 {:.1}%",
        s1.first_loss, s1.final_train_r1
    );

    println!("exporting per-reference attention maps...");
    let attn_dir = root.join("attn");
    let count = export_attention(&cfg, &s1.checkpoint, &attn_dir).unwrap();
    println!("  {count} maps written");

    println!(
        "stage-2: cropping to beta = {} of the aerial tokens ({} epochs)...",
        cfg.beta, cfg.epochs_stage2
    );
    let s2 = train_stage2(&cfg, &s1.checkpoint, &attn_dir).unwrap();
    println!("  final train R@1 {:.1}%", s2.final_train_r1);

    for (tag, ckpt) in [("stage-1", &s1.checkpoint), ("stage-2", &s2.checkpoint)] {
        let metrics = evaluate(&cfg, ckpt, "train").unwrap();
        println!("\n{tag} metrics:");
        for (k, v) in &metrics.rows {
            println!("  {k:<10} {v:8.2}");
        }
    }
    println!("\nartifacts under {}", root.display());
}
