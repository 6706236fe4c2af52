//! Retrieval metrics on synthetic embeddings: recall@k, hit rate with
//! semi-positive neighbors, and the meter-level accuracy curve.

use crossview::data::{DatasetIndex, SampleRecord, DEG_PER_M};
use crossview::eval::{
    hit_rate, meter_curve, one_percent_k, rank_references, recall_at_k, recall_at_one_percent,
};
use crossview::geo::{AerialTile, GeoLocation};
use crossview::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, e) = (200usize, 32usize);

    // references: random unit vectors; queries: noisy copies, so the
    // ground truth usually but not always ranks first
    let mut refs = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    for _ in 0..n {
        let r: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rn = normalize(&r);
        let q: Vec<f64> = rn.iter().map(|v| v + rng.gen_range(-0.4..0.4)).collect();
        refs.push(rn);
        queries.push(normalize(&q));
    }
    let q = Tensor::from_rows(&queries).unwrap();
    let r = Tensor::from_rows(&refs).unwrap();

    let result = rank_references(&q, &r, 10).unwrap();
    println!("retrieval over {n} queries x {n} references (dim {e})");
    for k in [1, 5, 10] {
        println!("  R@{k:<3} = {:6.2}%", recall_at_k(&result, k));
    }
    println!(
        "  R@1% = {:6.2}%  (k = {})",
        recall_at_one_percent(&result),
        one_percent_k(n)
    );

    // a toy geographic index: tiles on a line, every adjacent pair
    // declared neighbors, so near-misses still count for the hit rate
    let spacing = 30.0;
    let records: Vec<SampleRecord> = (0..n)
        .map(|i| {
            let lat = i as f64 * spacing * DEG_PER_M;
            SampleRecord {
                id: format!("{i:04}"),
                street_path: String::new(),
                aerial_path: String::new(),
                query: GeoLocation { lat, lon: 0.0 },
                tile: AerialTile {
                    center: GeoLocation { lat, lon: 0.0 },
                    extent_m: 2.0 * spacing,
                    side_px: 64,
                },
                offset_m: (0.0, 0.0),
                split: "train".into(),
                neighbors: vec![],
            }
        })
        .collect();
    let mut index = DatasetIndex::from_records(records);
    for i in 0..n {
        let mut nb = vec![];
        if i > 0 {
            nb.push(format!("{:04}", i - 1));
        }
        if i + 1 < n {
            nb.push(format!("{:04}", i + 1));
        }
        index.records[i].neighbors = nb;
    }

    let hit = hit_rate(&result, &index).unwrap();
    let r1 = recall_at_k(&result, 1);
    println!("\nhit rate (gt or declared neighbor at top-1): {hit:.2}% >= R@1 = {r1:.2}%");
    assert!(hit >= r1);

    println!("\nmeter-level accuracy (top-1 tile center vs query):");
    let curve = meter_curve(&result, &index, &[1.0, 10.0, 35.0, 70.0, 200.0]).unwrap();
    for (tau, acc) in &curve {
        println!("  < {tau:>5.0} m: {acc:6.2}%");
    }
    assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}
