use crossview::data::DatasetIndex;
use crossview::loss::{triplet_loss, PairBatch, TripletLossConfig};
use crossview::optim::{asam_perturb, AsamConfig, ParamSet};
use crossview::pipeline::{RunConfig, TwoStreamModel};
use crossview::tensor::{Tape, Tensor};
use std::path::Path;

fn grads_of(model: &TwoStreamModel<f32>, index: &DatasetIndex) -> (f32, Vec<Tensor<f32>>) {
    let mut tape = Tape::new();
    let bs = model.street.bind(&mut tape, true).unwrap();
    let ba = model.aerial.bind(&mut tape, true).unwrap();
    let mut se = vec![];
    let mut ae = vec![];
    for i in 0..8 {
        let simg = index.street_image(i).unwrap();
        let aimg = index.aerial_image(i).unwrap();
        let (es, _) = model.street.forward_image(&mut tape, &bs, &simg, None, false).unwrap();
        let (ea, _) = model.aerial.forward_image(&mut tape, &ba, &aimg, None, false).unwrap();
        se.push(es);
        ae.push(ea);
    }
    let s = tape.concat(&se, 0).unwrap();
    let a = tape.concat(&ae, 0).unwrap();
    let pb = PairBatch::new(&tape, s, a, (0..8).collect()).unwrap();
    let tl = triplet_loss(&mut tape, &pb, &TripletLossConfig { alpha: 10.0 }).unwrap();
    let loss = tape.value(tl.loss).data()[0];
    tape.backward(tl.loss).unwrap();
    let mut vars = bs.vars();
    vars.extend(ba.vars());
    (loss, vars.iter().map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))).collect())
}

fn main() {
    let cfg = RunConfig::from_file(Path::new("/tmp/expL.cfg")).unwrap();
    let index = DatasetIndex::load(&cfg.data_index).unwrap();
    for rho in [0.1f64, 0.5, 2.5] {
        let mut model = TwoStreamModel::<f32>::new(&cfg, (2, 4), (4, 4)).unwrap();
        let (loss0, g) = grads_of(&model, &index);
        let flags = model.perturb_flags();
        let (eps, idxs): (Vec<Tensor<f32>>, Vec<usize>) = {
            let params = model.params();
            let sub_p: Vec<&Tensor<f32>> = params.iter().zip(&flags).filter(|(_, &f)| f).map(|(p, _)| *p).collect();
            let sub_g: Vec<Tensor<f32>> = g.iter().zip(&flags).filter(|(_, &f)| f).map(|(x, _)| x.clone()).collect();
            let eps = asam_perturb(&sub_p, &sub_g, &AsamConfig { rho, eta: 0.01 }).unwrap();
            let idxs = flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
            (eps, idxs)
        };
        for (k, &pi) in idxs.iter().enumerate() {
            let p = &mut model.params_mut()[pi];
            for (w, &e) in p.data_mut().iter_mut().zip(eps[k].data()) {
                *w += e;
            }
        }
        let (loss1, g2) = grads_of(&model, &index);
        let dot: f64 = g.iter().zip(&g2).flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64) * (y as f64))).sum();
        let n1: f64 = g.iter().flat_map(|t| t.data().iter().map(|&x| (x as f64).powi(2))).sum::<f64>().sqrt();
        let n2: f64 = g2.iter().flat_map(|t| t.data().iter().map(|&x| (x as f64).powi(2))).sum::<f64>().sqrt();
        println!("rho {rho}: loss {loss0:.4} -> perturbed {loss1:.4}; |g| {n1:.3e} |g2| {n2:.3e} cos(g,g2) = {:.4}", dot / (n1 * n2));
    }
}
