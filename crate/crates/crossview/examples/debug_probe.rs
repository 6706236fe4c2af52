use crossview::data::DatasetIndex;
use crossview::pipeline::RunConfig;
use crossview::pipeline::TwoStreamModel;
use crossview::tensor::Tape;
use std::path::Path;

fn main() {
    let cfg = RunConfig::from_file(Path::new("/tmp/bench2.cfg")).unwrap();
    let index = DatasetIndex::load(&cfg.data_index).unwrap();
    let s0 = index.street_image(0).unwrap();
    let s1 = index.street_image(1).unwrap();
    let a0 = index.aerial_image(0).unwrap();
    let a1 = index.aerial_image(1).unwrap();

    let d_img: f32 = s0
        .data()
        .iter()
        .zip(s1.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("street image L1 diff: {d_img}");
    let d_a: f32 = a0
        .data()
        .iter()
        .zip(a1.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("aerial image L1 diff: {d_a}");

    let model = if std::env::args().nth(1).as_deref() == Some("trained") {
        let ck = crossview::checkpoint::Checkpoint::load(Path::new("/tmp/bench2_run/stage1.ckpt")).unwrap();
        TwoStreamModel::<f32>::load(&cfg, &ck).unwrap()
    } else {
        TwoStreamModel::<f32>::new(&cfg, (2, 4), (4, 4)).unwrap()
    };
    let emb = |img: &crossview::data::Image, enc: &crossview::vit::ViTEncoder<f32>| -> Vec<f32> {
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape, false).unwrap();
        let (e, _) = enc.forward_image(&mut tape, &b, img, None, false).unwrap();
        tape.value(e).data().to_vec()
    };
    let e0 = emb(&s0, &model.street);
    let e1 = emb(&s1, &model.street);
    let cos: f32 = e0.iter().zip(&e1).map(|(a, b)| a * b).sum();
    println!("street emb cos(0,1) = {cos}");
    println!("e0[..6] = {:?}", &e0[..6]);
    println!("e1[..6] = {:?}", &e1[..6]);

    let ea0 = emb(&a0, &model.aerial);
    let ea1 = emb(&a1, &model.aerial);
    let cosa: f32 = ea0.iter().zip(&ea1).map(|(a, b)| a * b).sum();
    println!("aerial emb cos(0,1) = {cosa}");
    let cross: f32 = e0.iter().zip(&ea0).map(|(a, b)| a * b).sum();
    let cross_neg: f32 = e0.iter().zip(&ea1).map(|(a, b)| a * b).sum();
    println!("cross cos(s0,a0) = {cross}, cos(s0,a1) = {cross_neg}");
}
