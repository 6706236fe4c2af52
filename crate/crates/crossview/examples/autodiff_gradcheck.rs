//! Gradient checking the autodiff engine against central finite
//! differences at 64-bit.
//!
//! Builds a small attention block plus MLP on the tape, backpropagates,
//! and compares every parameter gradient to the independent
//! finite-difference oracle.

use crossview::tensor::{gradcheck, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// One self-attention head + MLP over 4 tokens, reduced to a scalar.
fn forward(tape: &mut Tape<f64>, vars: &[Var]) -> Var {
    let [x, wq, wk, wv, w1, w2] = vars else { panic!("six parameters") };
    let q = tape.matmul(*x, *wq).unwrap();
    let k = tape.matmul(*x, *wk).unwrap();
    let v = tape.matmul(*x, *wv).unwrap();
    let kt = tape.transpose(k).unwrap();
    let scores = tape.matmul(q, kt).unwrap();
    let scores = tape.scale(scores, 1.0 / (6f64).sqrt()).unwrap();
    let attn = tape.softmax(scores, 1).unwrap();
    let ctx = tape.matmul(attn, v).unwrap();
    let h = tape.matmul(ctx, *w1).unwrap();
    let h = tape.gelu(h).unwrap();
    let out = tape.matmul(h, *w2).unwrap();
    let sq = tape.mul(out, out).unwrap();
    tape.sum_all(sq).unwrap()
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![
        rand_t(&mut rng, 4, 6), // tokens
        rand_t(&mut rng, 6, 6), // Wq
        rand_t(&mut rng, 6, 6), // Wk
        rand_t(&mut rng, 6, 6), // Wv
        rand_t(&mut rng, 6, 12),
        rand_t(&mut rng, 12, 2),
    ];
    let names = ["x", "Wq", "Wk", "Wv", "W1", "W2"];

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true).unwrap())
        .collect();
    let loss = forward(&mut tape, &vars);
    println!("loss = {:.6}", tape.value(loss).data()[0]);
    tape.backward(loss).unwrap();

    // finite-difference oracle
    let f = |ps: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone(), true).unwrap()).collect();
        let l = forward(&mut t, &vs);
        t.value(l).data()[0]
    };
    let numeric = gradcheck::central_diff(&f, &params, 1e-5);

    println!("\n{:<4} {:>10} {:>14}", "grad", "elements", "max rel err");
    let mut worst = 0.0f64;
    for (i, name) in names.iter().enumerate() {
        let analytic = tape.grad(vars[i]).unwrap();
        let err = gradcheck::max_rel_err(&analytic, &numeric[i]);
        worst = worst.max(err);
        println!("{:<4} {:>10} {:>14.3e}", name, analytic.numel(), err);
    }
    println!("\nworst max relative error: {worst:.3e} (tolerance 1e-5)");
    assert!(worst < 1e-5);
    println!("all gradients match the finite-difference oracle");
}
