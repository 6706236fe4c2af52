use crossview::data::DatasetIndex;
use crossview::loss::{triplet_loss, PairBatch, TripletLossConfig};
use crossview::optim::{asam_perturb, AsamConfig, ParamSet};
use crossview::pipeline::{RunConfig, TwoStreamModel};
use crossview::tensor::{Tape, Tensor};
use std::path::Path;

fn main() {
    let cfg = RunConfig::from_file(Path::new("/tmp/bench4.cfg")).unwrap();
    let index = DatasetIndex::load(&cfg.data_index).unwrap();
    let model = TwoStreamModel::<f32>::new(&cfg, (2, 4), (4, 4)).unwrap();

    // one batch forward/backward
    let mut tape = Tape::new();
    let bs = model.street.bind(&mut tape, true).unwrap();
    let ba = model.aerial.bind(&mut tape, true).unwrap();
    let mut se = vec![];
    let mut ae = vec![];
    for i in 0..4 {
        let simg = index.street_image(i).unwrap();
        let aimg = index.aerial_image(i).unwrap();
        let (es, _) = model.street.forward_image(&mut tape, &bs, &simg, None, false).unwrap();
        let (ea, _) = model.aerial.forward_image(&mut tape, &ba, &aimg, None, false).unwrap();
        se.push(es);
        ae.push(ea);
    }
    let s = tape.concat(&se, 0).unwrap();
    let a = tape.concat(&ae, 0).unwrap();
    let pb = PairBatch::new(&tape, s, a, vec![0, 1, 2, 3]).unwrap();
    let tl = triplet_loss(&mut tape, &pb, &TripletLossConfig { alpha: 10.0 }).unwrap();
    tape.backward(tl.loss).unwrap();

    let mut vars = bs.vars();
    vars.extend(ba.vars());
    let grads: Vec<Tensor<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec())))
        .collect();

    let params = model.params();
    let eps = asam_perturb(&params, &grads, &AsamConfig { rho: 2.5, eta: 0.01 }).unwrap();

    let names: Vec<String> = model
        .street
        .param_names()
        .iter()
        .map(|n| format!("street/{n}"))
        .chain(model.aerial.param_names().iter().map(|n| format!("aerial/{n}")))
        .collect();

    let mut worst_rel = 0.0f32;
    let mut rows: Vec<(String, f32, f32)> = vec![];
    for ((name, p), e) in names.iter().zip(&params).zip(&eps) {
        let wn = p.norm();
        let en = e.norm();
        for (&w, &ei) in p.data().iter().zip(e.data()) {
            worst_rel = worst_rel.max((ei / (w.abs() + 0.01)).abs());
        }
        rows.push((name.clone(), en, en / wn.max(1e-9)));
    }
    rows.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
    println!("{:<22} {:>12} {:>12}", "param", "|eps|", "|eps|/|w|");
    for (n, en, rel) in rows.iter().take(12) {
        println!("{n:<22} {en:>12.4} {rel:>12.4}");
    }
    println!("\nmax_i |eps_i| / (|w_i|+eta) = {worst_rel:.4} (rho = 2.5)");
    let total_eps: f32 = eps.iter().map(|e| e.norm().powi(2)).sum::<f32>().sqrt();
    let total_w: f32 = params.iter().map(|p| p.norm().powi(2)).sum::<f32>().sqrt();
    println!("global |eps| = {total_eps:.4}, |w| = {total_w:.4}");
}
