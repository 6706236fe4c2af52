//! Attention-guided non-uniform cropping, end to end on one image:
//! read the class-token attention map out of an encoder, rescale the
//! grid, keep the β highest-scoring patches, and verify the published
//! keep-count arithmetic.

use crossview::crop::{crop_tokens, resize_attention, scaled_grid, select_tokens};
use crossview::data::{generate_world, render_aerial, world_to_geo, SceneSpec};
use crossview::geo::AerialTile;
use crossview::tensor::Tape;
use crossview::vit::{PosEmbedKind, ViTConfig, ViTEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    // published keep counts: the four (resolution, gamma, beta) cells
    println!("keep-count arithmetic (patch 16):");
    println!("{:>8} {:>6} {:>6} {:>10} {:>7}", "side px", "gamma", "beta", "grid", "kept");
    for (side, gamma, beta) in [
        (256usize, 1.0, 0.64),
        (256, 1.56, 0.64),
        (320, 1.0, 0.64),
        (320, 1.56, 0.64),
    ] {
        let (scaled, grid) = scaled_grid(side, gamma, 16).unwrap();
        let uniform = crossview::vit::AttentionMap {
            grid_shape: grid,
            values: vec![1.0; grid.0 * grid.1],
            class_weight: 0.0,
        };
        let kept = select_tokens(&uniform, beta).unwrap().kept.len();
        println!(
            "{side:>8} {gamma:>6.2} {beta:>6.2} {:>10} {kept:>7}",
            format!("{}x{} @{scaled}", grid.0, grid.1)
        );
    }

    // live attention from a small encoder over a rendered tile
    let world = generate_world(&SceneSpec {
        seed: 21,
        world_side_m: 80.0,
        landmarks: 10,
        radius_range_m: (4.0, 9.0),
        palette: 12,
        terrain_amp: 0.6,
    });
    let tile = AerialTile {
        center: world_to_geo(0.0, 0.0),
        extent_m: 80.0,
        side_px: 64,
    };
    let img = render_aerial(&world, &tile);

    let cfg = ViTConfig {
        patch_size: 8,
        model_dim: 32,
        layers: 2,
        heads: 4,
        mlp_ratio: 2,
        embed_out: 16,
        pos_embed: PosEmbedKind::Learnable,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = ViTEncoder::<f32>::new(cfg, (8, 8), 3, &mut rng).unwrap();

    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, false).unwrap();
    let ts = enc.embed(&mut tape, &bound, &img, None).unwrap();
    let ts = enc.add_position(&mut tape, &bound, ts).unwrap();
    let (_, attn) = enc.forward(&mut tape, &bound, &ts, true).unwrap();
    let map = attn.unwrap();
    println!(
        "\nclass-token attention over the 8x8 grid (sums to {:.4}, class self-weight {:.4}):",
        map.values.iter().sum::<f64>(),
        map.class_weight
    );

    // upscale the map as if zooming in by gamma = 1.56, then keep 64%
    let (_, new_grid) = scaled_grid(64, 1.56, 8).unwrap();
    let resized = resize_attention(&map, new_grid);
    let mask = select_tokens(&resized, 0.64).unwrap();
    println!(
        "gamma 1.56 rescales the grid to {}x{}; beta 0.64 keeps {} of {} patches",
        new_grid.0,
        new_grid.1,
        mask.kept.len(),
        new_grid.0 * new_grid.1
    );

    // ascii view of which patches survive on the original grid
    let mask_orig = select_tokens(&map, 0.64).unwrap();
    println!("\nsurviving patches at beta 0.64 on the original grid (# kept, . dropped):");
    for r in 0..8 {
        let row: String = (0..8)
            .map(|c| {
                if mask_orig.kept.contains(&(r * 8 + c)) {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        println!("  {row}");
    }

    // cropping a token set keeps the class token plus the survivors
    let cropped = crop_tokens(&mut tape, &ts, &mask_orig).unwrap();
    println!(
        "\ntoken set: {} -> {} patch tokens (plus the class token)",
        ts.n_patches(),
        cropped.n_patches()
    );
}
