//! Polar-warp an aerial tile into a panorama-like strip, centered and
//! recentered, and verify the mapping by inverting it for a probe pixel.

use crossview::data::{generate_world, render_aerial, save_ppm, world_to_geo, Image, SceneSpec};
use crossview::geo::{polar_transform, polar_transform_at, AerialTile};
use std::path::PathBuf;

fn main() {
    let out = PathBuf::from("target/example_out/polar");
    std::fs::create_dir_all(&out).unwrap();

    // render a busy aerial tile
    let world = generate_world(&SceneSpec {
        seed: 3,
        world_side_m: 60.0,
        landmarks: 14,
        radius_range_m: (2.5, 7.0),
        palette: 12,
                terrain_amp: 0.0,
    });
    let tile = AerialTile {
        center: world_to_geo(0.0, 0.0),
        extent_m: 60.0,
        side_px: 128,
    };
    let aerial = render_aerial(&world, &tile);
    save_ppm(&aerial, &out.join("aerial.ppm")).unwrap();

    let warped = polar_transform(&aerial, 48, 192).unwrap();
    save_ppm(&warped, &out.join("polar_centered.ppm")).unwrap();

    // recenter on an off-center query pixel, as when the street query
    // is not at the tile center
    let shifted = polar_transform_at(&aerial, (40.0, 88.0), 48, 192).unwrap();
    save_ppm(&shifted, &out.join("polar_recentered.ppm")).unwrap();

    // single-pixel probe: invert the mapping analytically
    let a = 128usize;
    let (px, py) = (90usize, 30usize);
    let mut probe = Image::new(a, a, 1);
    probe.set(py, px, 0, 1.0);
    let (oh, ow) = (64usize, 256usize);
    let warped_probe = polar_transform(&probe, oh, ow).unwrap();

    let c = a as f64 / 2.0;
    let (dx, dy) = (px as f64 + 0.5 - c, py as f64 + 0.5 - c);
    let r0 = (dx * dx + dy * dy).sqrt();
    let mut theta0 = dx.atan2(-dy);
    if theta0 < 0.0 {
        theta0 += std::f64::consts::TAU;
    }
    let expect_col = theta0 * ow as f64 / std::f64::consts::TAU;
    let expect_row = oh as f64 * (1.0 - 2.0 * r0 / a as f64);

    let mut best = (0usize, 0usize, -1.0f32);
    for i in 0..oh {
        for j in 0..ow {
            if warped_probe.get(i, j, 0) > best.2 {
                best = (i, j, warped_probe.get(i, j, 0));
            }
        }
    }
    println!("probe pixel ({px}, {py}): radius {r0:.1} px, azimuth {:.1} deg", theta0.to_degrees());
    println!("predicted warp position: row {expect_row:.1}, col {expect_col:.1}");
    println!("brightest output pixel:  row {}, col {}", best.0, best.1);
    let row_err = (best.0 as f64 - expect_row).abs();
    let col_err = (best.1 as f64 - expect_col).abs();
    println!("error: {row_err:.2} rows, {col_err:.2} cols (within 1 px each)");
    assert!(row_err <= 1.0 && col_err <= 1.0);

    println!("\nwrote aerial.ppm, polar_centered.ppm, polar_recentered.ppm to {}", out.display());
}
