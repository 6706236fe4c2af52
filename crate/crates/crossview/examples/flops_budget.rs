//! The analytic multiply-add model behind token cropping: what a
//! forward pass costs at different token counts, and how the keep
//! fraction and resolution scale trade off inside a fixed budget.

use crossview::crop::{flops, scaled_grid, select_tokens, CropPolicy};
use crossview::vit::{AttentionMap, PosEmbedKind, ViTConfig};

fn main() {
    let cfg = ViTConfig {
        patch_size: 16,
        model_dim: 384,
        layers: 12,
        heads: 6,
        mlp_ratio: 4,
        embed_out: 1000,
        pos_embed: PosEmbedKind::Learnable,
    };

    println!("token-count arithmetic for a 256 px aerial tile, patch 16:");
    println!("{:>6} {:>6} {:>9} {:>9} {:>8}", "beta", "gamma", "res (px)", "tokens", "vs full");
    let full = flops(&cfg, 257, 3).total();
    for (beta, gamma) in [(1.0, 1.0), (0.79, 1.0), (0.64, 1.0), (0.53, 1.0), (0.64, 1.56), (0.53, 1.88)] {
        CropPolicy::new(beta, gamma, 16).unwrap();
        let (res, grid) = scaled_grid(256, gamma, 16).unwrap();
        let uniform = AttentionMap {
            grid_shape: grid,
            values: vec![1.0; grid.0 * grid.1],
            class_weight: 0.0,
        };
        let kept = select_tokens(&uniform, beta).unwrap().kept.len();
        let cost = flops(&cfg, kept + 1, 3).total();
        println!(
            "{:>6.2} {:>6.2} {:>9} {:>9} {:>7.1}%",
            beta,
            gamma,
            res,
            kept,
            100.0 * cost as f64 / full as f64
        );
    }

    println!("\nfull multiply-add breakdown at 257 tokens (256 patches + class):");
    print!("{}", flops(&cfg, 257, 3).csv());

    let cropped = flops(&cfg, 164, 3);
    println!("\ncropped to 163 patches + class:");
    print!("{}", cropped.csv());
    println!(
        "\ncropped/full total ratio: {:.3}",
        cropped.total() as f64 / full as f64
    );

    // the street stream never participates in cropping, so its cost is
    // the same in both stages
    let street = flops(&cfg, 7 * 38 + 1, 3);
    println!(
        "street stream ({} tokens) costs {} multiply-adds in either stage",
        street.n_tokens,
        street.total()
    );
}
