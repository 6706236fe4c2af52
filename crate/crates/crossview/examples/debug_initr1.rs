use crossview::data::DatasetIndex;
use crossview::eval::{rank_references, recall_at_k};
use crossview::pipeline::{RunConfig, TwoStreamModel};
use crossview::tensor::{Tape, Tensor};
use std::path::Path;

fn main() {
    let cfg = RunConfig::from_file(Path::new("/tmp/expL.cfg")).unwrap();
    let index = DatasetIndex::load(&cfg.data_index).unwrap();
    let model = TwoStreamModel::<f32>::new(&cfg, (2, 4), (4, 4)).unwrap();
    let n = index.len();
    let e = cfg.embed_out;
    let mut sdata = Vec::new();
    let mut adata = Vec::new();
    for i in 0..n {
        let simg = index.street_image(i).unwrap();
        let aimg = index.aerial_image(i).unwrap();
        let mut tape = Tape::new();
        let bs = model.street.bind(&mut tape, false).unwrap();
        let ba = model.aerial.bind(&mut tape, false).unwrap();
        let (es, _) = model.street.forward_image(&mut tape, &bs, &simg, None, false).unwrap();
        let (ea, _) = model.aerial.forward_image(&mut tape, &ba, &aimg, None, false).unwrap();
        sdata.extend_from_slice(tape.value(es).data());
        adata.extend_from_slice(tape.value(ea).data());
    }
    let q = Tensor::new(vec![n, e], sdata).unwrap();
    let r = Tensor::new(vec![n, e], adata).unwrap();
    let res = rank_references(&q, &r, 5).unwrap();
    println!("init R@1 = {:.4}", recall_at_k(&res, 1));
    println!("init R@5 = {:.4}", recall_at_k(&res, 5));
    println!("gt ranks of first 10 queries: {:?}", &res.gt_rank[..10]);
    println!("top1 of first 10 queries: {:?}", res.ranked[..10].iter().map(|l| l[0]).collect::<Vec<_>>());

    // margin stats
    let mut margins = Vec::new();
    for i in 0..n {
        let pos: f32 = q.row(i).iter().zip(r.row(i)).map(|(a, b)| a * b).sum();
        for j in 0..n {
            if j != i {
                let neg: f32 = q.row(i).iter().zip(r.row(j)).map(|(a, b)| a * b).sum();
                margins.push(pos - neg);
            }
        }
    }
    let mean = margins.iter().sum::<f32>() / margins.len() as f32;
    let sd = (margins.iter().map(|m| (m - mean).powi(2)).sum::<f32>() / margins.len() as f32).sqrt();
    println!("cos margin mean {mean:.6} sd {sd:.6}");
}
