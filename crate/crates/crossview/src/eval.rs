//! Retrieval evaluation: exact cosine ranking, recall@k, hit rate and
//! meter-level accuracy. Query i's ground truth is reference i.

use crate::data::DatasetIndex;
use crate::geo::geodesic_m;
use crate::tensor::{Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("queries have dim {0} but references dim {1}")]
    DimMismatch(usize, usize),
    #[error("empty query or reference set")]
    Empty,
    #[error("{side} row {row} is not unit-normalized (norm {norm})")]
    NotNormalized {
        side: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("result covers {0} queries but the index has {1} records")]
    IndexMismatch(usize, usize),
    #[error("thresholds must be ascending")]
    BadThresholds,
}

/// Ranked retrieval lists plus the rank of each query's ground truth.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    /// per query: reference indices by descending cosine similarity,
    /// ties broken by ascending index; truncated to the requested k
    pub ranked: Vec<Vec<usize>>,
    /// per query: 1-based rank of reference i for query i
    pub gt_rank: Vec<usize>,
    pub n_refs: usize,
}

fn check_rows<S: Scalar>(side: &'static str, t: &Tensor<S>) -> Result<(), EvalError> {
    for i in 0..t.rows() {
        let norm = t
            .row(i)
            .iter()
            .map(|&v| (v * v).as_f64())
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(EvalError::NotNormalized {
                side,
                row: i,
                norm,
            });
        }
    }
    Ok(())
}

/// Exact brute-force cosine ranking of every reference for every query.
pub fn rank_references<S: Scalar>(
    queries: &Tensor<S>,
    refs: &Tensor<S>,
    k: usize,
) -> Result<RetrievalResult, EvalError> {
    if queries.cols() != refs.cols() {
        return Err(EvalError::DimMismatch(queries.cols(), refs.cols()));
    }
    let (q, r) = (queries.rows(), refs.rows());
    if q == 0 || r == 0 {
        return Err(EvalError::Empty);
    }
    check_rows("query", queries)?;
    check_rows("reference", refs)?;

    let mut ranked = Vec::with_capacity(q);
    let mut gt_rank = Vec::with_capacity(q);
    for qi in 0..q {
        let qrow = queries.row(qi);
        let mut sims: Vec<(usize, f64)> = (0..r)
            .map(|ri| {
                let dot: f64 = qrow
                    .iter()
                    .zip(refs.row(ri))
                    .map(|(&a, &b)| (a * b).as_f64())
                    .sum();
                (ri, dot)
            })
            .collect();
        sims.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite similarities")
                .then(a.0.cmp(&b.0))
        });
        let rank = sims.iter().position(|&(ri, _)| ri == qi).map(|p| p + 1);
        gt_rank.push(rank.unwrap_or(r + 1));
        ranked.push(sims.iter().take(k.min(r)).map(|&(ri, _)| ri).collect());
    }
    Ok(RetrievalResult {
        ranked,
        gt_rank,
        n_refs: r,
    })
}

/// Percentage of queries whose ground truth ranks in the top k.
pub fn recall_at_k(result: &RetrievalResult, k: usize) -> f64 {
    let hits = result.gt_rank.iter().filter(|&&rank| rank <= k).count();
    100.0 * hits as f64 / result.gt_rank.len() as f64
}

/// k for the R@1% metric: 1% of the reference count, ceiling, floor 1.
pub fn one_percent_k(n_refs: usize) -> usize {
    ((n_refs as f64 * 0.01).ceil() as usize).max(1)
}

pub fn recall_at_one_percent(result: &RetrievalResult) -> f64 {
    recall_at_k(result, one_percent_k(result.n_refs))
}

/// Percentage of queries whose top-1 tile covers the query location:
/// the ground truth itself, or any declared neighbor.
pub fn hit_rate(result: &RetrievalResult, index: &DatasetIndex) -> Result<f64, EvalError> {
    if result.ranked.len() != index.len() || result.n_refs != index.len() {
        return Err(EvalError::IndexMismatch(result.ranked.len(), index.len()));
    }
    let mut hits = 0usize;
    for (qi, list) in result.ranked.iter().enumerate() {
        let top1 = match list.first() {
            Some(&t) => t,
            None => continue,
        };
        let covered = top1 == qi
            || index.records[qi]
                .neighbors
                .contains(&index.records[top1].id);
        hits += covered as usize;
    }
    Ok(100.0 * hits as f64 / result.ranked.len() as f64)
}

/// Accuracy under each distance threshold, with the top-1 tile center
/// standing in for the predicted location.
pub fn meter_curve(
    result: &RetrievalResult,
    index: &DatasetIndex,
    thresholds_m: &[f64],
) -> Result<Vec<(f64, f64)>, EvalError> {
    if result.ranked.len() != index.len() || result.n_refs != index.len() {
        return Err(EvalError::IndexMismatch(result.ranked.len(), index.len()));
    }
    if thresholds_m.windows(2).any(|w| w[0] > w[1]) {
        return Err(EvalError::BadThresholds);
    }
    let dists: Vec<f64> = result
        .ranked
        .iter()
        .enumerate()
        .map(|(qi, list)| {
            let top1 = list.first().copied().unwrap_or(qi);
            geodesic_m(index.records[top1].tile.center, index.records[qi].query)
        })
        .collect();
    Ok(thresholds_m
        .iter()
        .map(|&tau| {
            let within = dists.iter().filter(|&&d| d < tau).count();
            (tau, 100.0 * within as f64 / dists.len() as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetIndex, SampleRecord};
    use crate::geo::{AerialTile, GeoLocation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    fn rand_unit(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Tensor<f64> {
        unit((0..n)
            .map(|_| (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect())
    }

    fn toy_index(n: usize, neighbors: &[(usize, usize)], spread_m: f64) -> DatasetIndex {
        let records: Vec<SampleRecord> = (0..n)
            .map(|i| {
                let lat = i as f64 * spread_m * crate::data::DEG_PER_M;
                SampleRecord {
                    id: format!("{i:04}"),
                    street_path: String::new(),
                    aerial_path: String::new(),
                    query: GeoLocation { lat, lon: 0.0 },
                    tile: AerialTile {
                        center: GeoLocation { lat, lon: 0.0 },
                        extent_m: 10.0,
                        side_px: 16,
                    },
                    offset_m: (0.0, 0.0),
                    split: "train".into(),
                    neighbors: vec![],
                }
            })
            .collect();
        let mut idx = DatasetIndex::from_records(records);
        for &(a, b) in neighbors {
            let (ida, idb) = (idx.records[a].id.clone(), idx.records[b].id.clone());
            idx.records[a].neighbors.push(idb);
            idx.records[b].neighbors.push(ida);
        }
        idx
    }

    #[test]
    fn identical_sets_rank_ground_truth_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let e = rand_unit(&mut rng, 6, 8);
        let res = rank_references(&e, &e, 3).unwrap();
        assert!(res.gt_rank.iter().all(|&r| r == 1));
        assert_eq!(recall_at_k(&res, 1), 100.0);
    }

    #[test]
    fn orthogonal_query_falls_back_to_id_order() {
        let refs = unit(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]);
        let query = unit(vec![vec![0.0, 0.0, 0.0, 1.0]]);
        let res = rank_references(&query, &refs, 3).unwrap();
        assert_eq!(res.ranked[0], vec![0, 1, 2]);
    }

    #[test]
    fn matches_independent_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let q = rand_unit(&mut rng, 5, 6);
        let r = rand_unit(&mut rng, 5, 6);
        let res = rank_references(&q, &r, 5).unwrap();
        for qi in 0..5 {
            let mut oracle: Vec<(usize, f64)> = (0..5)
                .map(|ri| {
                    (
                        ri,
                        q.row(qi).iter().zip(r.row(ri)).map(|(a, b)| a * b).sum(),
                    )
                })
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = oracle.iter().map(|&(i, _)| i).collect();
            assert_eq!(res.ranked[qi], want);
        }
    }

    #[test]
    fn recall_responds_to_rank_position() {
        let res = RetrievalResult {
            ranked: vec![vec![1, 0]; 4],
            gt_rank: vec![2; 4],
            n_refs: 4,
        };
        assert_eq!(recall_at_k(&res, 1), 0.0);
        assert_eq!(recall_at_k(&res, 5), 100.0);
        for k in 1..6 {
            assert!(recall_at_k(&res, k) <= recall_at_k(&res, k + 1));
        }
    }

    #[test]
    fn one_percent_rule() {
        assert_eq!(one_percent_k(250), 3);
        assert_eq!(one_percent_k(100), 1);
        assert_eq!(one_percent_k(5), 1);
        assert_eq!(one_percent_k(1000), 10);
    }

    #[test]
    fn dim_mismatch_and_empty_are_errors() {
        let a = unit(vec![vec![1.0, 0.0]]);
        let b = unit(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            rank_references(&a, &b, 1),
            Err(EvalError::DimMismatch(2, 3))
        ));
        let bad = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert!(matches!(
            rank_references(&bad, &a, 1),
            Err(EvalError::NotNormalized { .. })
        ));
    }

    #[test]
    fn hit_counts_ground_truth_and_semi_positives() {
        // query 0 retrieves its neighbor 1 at top-1: a hit, not an R@1
        let idx = toy_index(3, &[(0, 1)], 1000.0);
        let res = RetrievalResult {
            ranked: vec![vec![1, 0, 2], vec![1, 0, 2], vec![2, 0, 1]],
            gt_rank: vec![2, 1, 1],
            n_refs: 3,
        };
        let hit = hit_rate(&res, &idx).unwrap();
        let r1 = recall_at_k(&res, 1);
        assert!((hit - 100.0).abs() < 1e-12);
        assert!((r1 - 66.66667).abs() < 1e-3);
        assert!(hit >= r1);
    }

    #[test]
    fn aligned_mode_hit_rate_collapses_to_recall() {
        let idx = toy_index(4, &[], 1000.0);
        let res = RetrievalResult {
            ranked: vec![vec![0], vec![2], vec![2], vec![0]],
            gt_rank: vec![1, 3, 1, 2],
            n_refs: 4,
        };
        assert_eq!(hit_rate(&res, &idx).unwrap(), recall_at_k(&res, 1));
    }

    #[test]
    fn meter_curve_hand_case() {
        // top-1 tile centers sit 5, 15 and 50 m from the queries
        let mut idx = toy_index(3, &[], 0.0);
        let deg_per_meter = 180.0 / (std::f64::consts::PI * crate::geo::EARTH_RADIUS_M);
        for (i, d) in [5.0, 15.0, 50.0].iter().enumerate() {
            idx.records[i].tile.center = GeoLocation {
                lat: d * deg_per_meter,
                lon: 0.0,
            };
        }
        let res = RetrievalResult {
            ranked: vec![vec![0], vec![1], vec![2]],
            gt_rank: vec![1, 1, 1],
            n_refs: 3,
        };
        let curve = meter_curve(&res, &idx, &[0.0, 20.0, 100.0]).unwrap();
        assert_eq!(curve[0].1, 0.0);
        assert!((curve[1].1 - 66.66667).abs() < 1e-3, "{:?}", curve);
        assert_eq!(curve[2].1, 100.0);
        assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn descending_thresholds_rejected() {
        let idx = toy_index(2, &[], 10.0);
        let res = RetrievalResult {
            ranked: vec![vec![0], vec![1]],
            gt_rank: vec![1, 1],
            n_refs: 2,
        };
        assert!(matches!(
            meter_curve(&res, &idx, &[10.0, 5.0]),
            Err(EvalError::BadThresholds)
        ));
    }

    #[test]
    fn ranking_invariant_under_common_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let e = 6;
        let q = rand_unit(&mut rng, 4, e);
        let r = rand_unit(&mut rng, 7, e);
        let base = rank_references(&q, &r, 7).unwrap();

        // random rotation from composed Givens rotations
        let mut rot: Vec<Vec<f64>> = (0..e)
            .map(|i| (0..e).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        for _ in 0..12 {
            let i = rng.gen_range(0..e);
            let mut j = rng.gen_range(0..e - 1);
            if j >= i {
                j += 1;
            }
            let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (s, c) = th.sin_cos();
            for row in rot.iter_mut() {
                let (a, b) = (row[i], row[j]);
                row[i] = c * a - s * b;
                row[j] = s * a + c * b;
            }
        }
        let apply = |t: &Tensor<f64>| -> Tensor<f64> {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|ri| {
                    (0..e)
                        .map(|j| (0..e).map(|p| t.row(ri)[p] * rot[p][j]).sum())
                        .collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let rotated = rank_references(&apply(&q), &apply(&r), 7).unwrap();
        assert_eq!(base.ranked, rotated.ranked);
        assert_eq!(base.gt_rank, rotated.gt_rank);
    }
}
