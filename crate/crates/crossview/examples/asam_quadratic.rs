//! Sharpness-aware minimization on a bowl with one sharp and one flat
//! valley: ASAM's perturb-then-step escapes toward the flatter side,
//! and its normalized perturbation always has length rho.

use crossview::optim::{
    asam_perturb, asam_step, sharpness_estimate, AdamWState, AsamConfig, GradSource,
    LossAndGrads, OptimError, ParamSet,
};
use crossview::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// L(w) = w0^2 / 2 + curvature * w1^2 / 2
struct Bowl {
    w: Tensor<f64>,
    curvature: f64,
}

impl ParamSet<f64> for Bowl {
    fn params(&self) -> Vec<&Tensor<f64>> {
        vec![&self.w]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        vec![&mut self.w]
    }
}

impl GradSource<f64> for Bowl {
    fn grads_at_current(&self) -> Result<Vec<Tensor<f64>>, OptimError> {
        let d = self.w.data();
        Ok(vec![Tensor::new(
            vec![1, 2],
            vec![d[0], self.curvature * d[1]],
        )
        .unwrap()])
    }
}

fn bowl_loss(b: &Bowl) -> LossAndGrads<f64> {
    let d = b.w.data();
    let loss = 0.5 * d[0] * d[0] + 0.5 * b.curvature * d[1] * d[1];
    Ok((loss, b.grads_at_current()?))
}

fn main() {
    // sharpness estimates: the steep direction reads much sharper
    let flat = &mut Bowl {
        w: Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
        curvature: 25.0,
    };
    let steep = &mut Bowl {
        w: Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
        curvature: 25.0,
    };
    let loss_of = |b: &Bowl| -> Result<f64, OptimError> { Ok(bowl_loss(b)?.0) };
    let s_flat = sharpness_estimate(flat, loss_of, 0.1, 0.01, false).unwrap();
    let s_steep = sharpness_estimate(steep, loss_of, 0.1, 0.01, false).unwrap();
    println!("SAM sharpness at rho 0.1: flat valley {s_flat:.4}, steep valley {s_steep:.4}");
    assert!(s_steep > s_flat);

    // the adaptive constraint |T_w^-1 eps| = rho holds exactly
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = AsamConfig::new(2.5, 0.01).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..24);
        let w = Tensor::new(vec![1, n], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let g = Tensor::new(vec![1, n], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let eps = asam_perturb(&[&w], &[g], &cfg).unwrap();
        let norm: f64 = w
            .data()
            .iter()
            .zip(eps[0].data())
            .map(|(&wi, &ei): (&f64, &f64)| {
                let t = wi.abs() + cfg.eta;
                (ei / t) * (ei / t)
            })
            .sum::<f64>()
            .sqrt();
        worst = worst.max((norm - cfg.rho).abs());
    }
    println!("max |  |T^-1 eps| - rho  | over 100 random sets: {worst:.2e}");
    assert!(worst < 1e-6);

    // full training comparison on the anisotropic bowl
    println!("\n{:>6} {:>14} {:>14}", "step", "AdamW loss", "ASAM loss");
    let mut plain = Bowl {
        w: Tensor::new(vec![1, 2], vec![1.5, 0.4]).unwrap(),
        curvature: 25.0,
    };
    let mut sharp = Bowl {
        w: Tensor::new(vec![1, 2], vec![1.5, 0.4]).unwrap(),
        curvature: 25.0,
    };
    let mut st_plain = AdamWState::new(0.0);
    let mut st_sharp = AdamWState::new(0.0);
    let off = AsamConfig { rho: 0.0, eta: 0.01 };
    let on = AsamConfig { rho: 0.05, eta: 0.01 };
    for step in 0..400 {
        let lp = asam_step(&mut plain, bowl_loss, &off, &mut st_plain, 0.01).unwrap();
        let ls = asam_step(&mut sharp, bowl_loss, &on, &mut st_sharp, 0.01).unwrap();
        if step % 80 == 0 {
            println!("{step:>6} {lp:>14.6} {ls:>14.6}");
        }
    }
    let d_plain = plain.w.data();
    let d_sharp = sharp.w.data();
    println!("\nfinal weights: AdamW ({:.4}, {:.4}), ASAM ({:.4}, {:.4})", d_plain[0], d_plain[1], d_sharp[0], d_sharp[1]);
    println!(
        "ASAM keeps the sharp coordinate smaller: |w1| {:.5} vs {:.5}",
        d_sharp[1].abs(),
        d_plain[1].abs()
    );
}
