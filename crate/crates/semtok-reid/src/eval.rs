//! Retrieval evaluation: feature extraction, cosine similarity and the
//! cross-camera CMC/mAP protocol.
//!
//! Gallery entries sharing both identity and camera with the query are
//! excluded from its ranking; ties in similarity break toward the lower
//! gallery index; queries without any cross-camera match are skipped and
//! reported.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{BatchItem, ForwardOptions, ReidModel};

pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    /// Row-major features.
    pub data: Vec<f64>,
    pub identities: Vec<u32>,
    pub cameras: Vec<u32>,
}

/// Run the full pipeline over the given dataset records (index order,
/// no augmentation) and collect one feature row per image.
pub fn extract_features(
    model: &ReidModel,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let dim = model.settings.dim;
    let mut data = Vec::with_capacity(indices.len() * dim);
    let mut identities = Vec::with_capacity(indices.len());
    let mut cameras = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let s = dataset.sample(i);
            items.push(BatchItem {
                patches: model.patches_of(&s.pixels)?,
                camera: s.camera as usize,
                class: None,
            });
            identities.push(s.identity);
            cameras.push(s.camera);
        }
        let patches = model.pack_batch(&items)?;
        let cams: Vec<usize> = items.iter().map(|it| it.camera).collect();
        let out = model.forward(&patches, &cams, &ForwardOptions::default())?;
        data.extend_from_slice(&out.features.data());
    }
    Ok(FeatureMatrix {
        rows: indices.len(),
        dim,
        data,
        identities,
        cameras,
    })
}

/// Cosine similarity of every query row against every gallery row.
/// Rows are L2-normalized first; zero-norm rows map to the zero vector.
pub fn cosine_similarity(queries: &FeatureMatrix, gallery: &FeatureMatrix) -> Result<Vec<f64>> {
    if queries.dim != gallery.dim {
        return Err(Error::Shape {
            op: "cosine_similarity",
            lhs: vec![queries.rows, queries.dim],
            rhs: vec![gallery.rows, gallery.dim],
        });
    }
    let normalize = |m: &FeatureMatrix| -> Vec<f64> {
        let mut out = m.data.clone();
        for row in out.chunks_mut(m.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            } else {
                row.fill(0.0);
            }
        }
        out
    };
    let qn = normalize(queries);
    let gn = normalize(gallery);
    let mut sim = vec![0.0; queries.rows * gallery.rows];
    for (qi, q) in qn.chunks(queries.dim).enumerate() {
        for (gi, g) in gn.chunks(gallery.dim).enumerate() {
            sim[qi * gallery.rows + gi] = q.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    Ok(sim)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub map: f64,
    /// CMC at ranks 1..=max_rank.
    pub cmc: Vec<f64>,
    /// AP per evaluated (non-skipped) query, in query order.
    pub per_query_ap: Vec<f64>,
    /// Valid (non-filtered) gallery entries per query, in query order.
    pub valid_gallery_counts: Vec<usize>,
    /// Query indices that had no cross-camera relevant entry.
    pub skipped_queries: Vec<usize>,
    pub num_queries: usize,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc.get(r - 1).copied().unwrap_or(1.0)
    }

    /// UTF-8 key=value lines plus a trailing CMC CSV row.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("mAP={:.8}\n", self.map));
        out.push_str(&format!("Rank-1={:.8}\n", self.rank(1)));
        if self.cmc.len() >= 5 {
            out.push_str(&format!("Rank-5={:.8}\n", self.rank(5)));
        }
        out.push_str(&format!("num_queries={}\n", self.num_queries));
        out.push_str(&format!(
            "evaluated_queries={}\n",
            self.num_queries - self.skipped_queries.len()
        ));
        out.push_str(&format!("skipped_queries={}\n", self.skipped_queries.len()));
        out.push_str(&format!("max_rank={}\n", self.cmc.len()));
        let cmc_row: Vec<String> = self.cmc.iter().map(|v| format!("{v:.8}")).collect();
        out.push_str(&format!("cmc,{}\n", cmc_row.join(",")));
        out
    }
}

/// Average precision and CMC under the cross-camera protocol.
/// `sim` is row-major (queries × gallery).
pub fn cmc_map(
    sim: &[f64],
    q_ids: &[u32],
    q_cams: &[u32],
    g_ids: &[u32],
    g_cams: &[u32],
    max_rank: usize,
) -> Result<EvalReport> {
    let (nq, ng) = (q_ids.len(), g_ids.len());
    if sim.len() != nq * ng || q_cams.len() != nq || g_cams.len() != ng {
        return Err(Error::Shape {
            op: "cmc_map",
            lhs: vec![sim.len()],
            rhs: vec![nq, ng],
        });
    }
    let mut per_query_ap = Vec::new();
    let mut valid_counts = Vec::with_capacity(nq);
    let mut skipped = Vec::new();
    let mut warnings = Vec::new();
    let mut cmc_hits = vec![0usize; max_rank];

    for q in 0..nq {
        let row = &sim[q * ng..(q + 1) * ng];
        // same-identity same-camera entries never take part in the ranking
        let mut order: Vec<usize> = (0..ng)
            .filter(|&g| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q]))
            .collect();
        valid_counts.push(order.len());
        order.sort_by(|&a, &b| {
            row[b]
                .total_cmp(&row[a])
                .then_with(|| a.cmp(&b))
        });

        let total_relevant = order.iter().filter(|&&g| g_ids[g] == q_ids[q]).count();
        if total_relevant == 0 {
            warnings.push(format!(
                "query {q} (identity {}, camera {}) has no cross-camera match; skipped",
                q_ids[q], q_cams[q]
            ));
            skipped.push(q);
            continue;
        }

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_correct: Option<usize> = None;
        for (pos, &g) in order.iter().enumerate() {
            if g_ids[g] == q_ids[q] {
                hits += 1;
                precision_sum += hits as f64 / (pos + 1) as f64;
                if first_correct.is_none() {
                    first_correct = Some(pos);
                }
            }
        }
        per_query_ap.push(precision_sum / total_relevant as f64);
        if let Some(pos) = first_correct {
            if pos < max_rank {
                cmc_hits[pos] += 1;
            }
        }
    }

    let evaluated = nq - skipped.len();
    if evaluated == 0 {
        return Err(Error::Data("every query was skipped; nothing to evaluate".into()));
    }
    let map = per_query_ap.iter().sum::<f64>() / evaluated as f64;
    let mut cmc = Vec::with_capacity(max_rank);
    let mut cum = 0usize;
    for hits in cmc_hits {
        cum += hits;
        cmc.push(cum as f64 / evaluated as f64);
    }
    Ok(EvalReport {
        map,
        cmc,
        per_query_ap,
        valid_gallery_counts: valid_counts,
        skipped_queries: skipped,
        num_queries: nq,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(data: Vec<f64>, dim: usize, ids: Vec<u32>, cams: Vec<u32>) -> FeatureMatrix {
        FeatureMatrix {
            rows: ids.len(),
            dim,
            data,
            identities: ids,
            cameras: cams,
        }
    }

    #[test]
    fn cosine_identical_and_orthogonal() {
        let q = fm(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], vec![0, 0]);
        let g = fm(vec![2.0, 0.0, 0.0, 3.0], 2, vec![0, 1], vec![1, 1]);
        let sim = cosine_similarity(&q, &g).unwrap();
        assert!((sim[0] - 1.0).abs() < 1e-12); // identical direction
        assert!(sim[1].abs() < 1e-12); // orthogonal
        assert!((sim[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_row_maps_to_zero() {
        let q = fm(vec![0.0, 0.0], 2, vec![0], vec![0]);
        let g = fm(vec![1.0, 1.0], 2, vec![0], vec![1]);
        let sim = cosine_similarity(&q, &g).unwrap();
        assert_eq!(sim[0], 0.0);
    }

    #[test]
    fn cosine_matches_direct_formula() {
        let qd: Vec<f64> = (0..3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let gd: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.3).cos()).collect();
        let q = fm(qd.clone(), 4, vec![0, 1, 2], vec![0; 3]);
        let g = fm(gd.clone(), 4, vec![0, 1, 2, 3, 4], vec![1; 5]);
        let sim = cosine_similarity(&q, &g).unwrap();
        for qi in 0..3 {
            for gi in 0..5 {
                let a = &qd[qi * 4..(qi + 1) * 4];
                let b = &gd[gi * 4..(gi + 1) * 4];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let expected = dot / (na * nb);
                assert!((sim[qi * 5 + gi] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        // gallery ranking [correct, wrong, wrong]
        let sim = vec![0.9, 0.5, 0.1];
        let report = cmc_map(&sim, &[7], &[0], &[7, 8, 9], &[1, 1, 1], 3).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.rank(1), 1.0);
    }

    #[test]
    fn wrong_then_correct_gives_half_ap() {
        let sim = vec![0.9, 0.5];
        let report = cmc_map(&sim, &[7], &[0], &[8, 7], &[1, 1], 2).unwrap();
        assert!((report.map - 0.5).abs() < 1e-15);
        assert_eq!(report.rank(1), 0.0);
        assert_eq!(report.rank(2), 1.0);
    }

    #[test]
    fn same_camera_same_identity_entries_are_filtered() {
        // the same-camera copy would rank first; it must be excluded
        let sim = vec![0.99, 0.5, 0.4];
        let report = cmc_map(&sim, &[7], &[0], &[7, 7, 8], &[0, 1, 1], 3).unwrap();
        assert_eq!(report.valid_gallery_counts[0], 2);
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn query_without_cross_camera_match_is_skipped_with_warning() {
        // query 0 (id 1) only matches a same-camera entry → skipped;
        // query 1 (id 2) has a real cross-camera match → evaluated
        let sim = vec![0.9, 0.8, 0.7, 0.6];
        let report = cmc_map(&sim, &[1, 2], &[0, 0], &[1, 2], &[0, 1], 2).unwrap();
        assert_eq!(report.skipped_queries, vec![0]);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.num_queries, 2);
        assert_eq!(report.per_query_ap.len(), 1);
    }

    #[test]
    fn ties_break_toward_lower_gallery_index() {
        // both gallery entries have equal similarity; index 0 is wrong, so AP = 1/2
        let sim = vec![0.5, 0.5];
        let report = cmc_map(&sim, &[1], &[0], &[2, 1], &[1, 1], 2).unwrap();
        assert!((report.map - 0.5).abs() < 1e-15);
        // now the correct one sits at the lower index and wins the tie
        let report = cmc_map(&sim, &[2], &[0], &[2, 1], &[1, 1], 2).unwrap();
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn report_serialization_has_required_lines() {
        let sim = vec![0.9, 0.5];
        let report = cmc_map(&sim, &[1], &[0], &[1, 2], &[1, 1], 2).unwrap();
        let text = report.serialize();
        assert!(text.contains("mAP="));
        assert!(text.contains("Rank-1="));
        assert!(text.lines().last().unwrap().starts_with("cmc,"));
    }

    // Definitional oracle: recompute AP/CMC per query from scratch.
    fn oracle(
        sim: &[f64],
        q_ids: &[u32],
        q_cams: &[u32],
        g_ids: &[u32],
        g_cams: &[u32],
        max_rank: usize,
    ) -> (f64, Vec<f64>) {
        let ng = g_ids.len();
        let mut aps = Vec::new();
        let mut cmc = vec![0.0; max_rank];
        let mut evaluated = 0usize;
        for q in 0..q_ids.len() {
            let mut entries: Vec<(f64, usize)> = (0..ng)
                .filter(|&g| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q]))
                .map(|g| (sim[q * ng + g], g))
                .collect();
            entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let relevant: Vec<bool> = entries.iter().map(|&(_, g)| g_ids[g] == q_ids[q]).collect();
            let total: usize = relevant.iter().filter(|&&r| r).count();
            if total == 0 {
                continue;
            }
            evaluated += 1;
            let mut seen = 0;
            let mut ap = 0.0;
            for (k, &rel) in relevant.iter().enumerate() {
                if rel {
                    seen += 1;
                    ap += seen as f64 / (k + 1) as f64;
                }
            }
            aps.push(ap / total as f64);
            if let Some(first) = relevant.iter().position(|&r| r) {
                for r in first..max_rank {
                    cmc[r] += 1.0;
                }
            }
        }
        for v in &mut cmc {
            *v /= evaluated as f64;
        }
        (aps.iter().sum::<f64>() / evaluated as f64, cmc)
    }

    #[test]
    fn matches_brute_force_oracle_on_random_instances() {
        use rand::Rng;
        let mut rng = crate::rng::stream(99, crate::rng::StreamTag::GradCheck, 1, 0, 0);
        for trial in 0..100 {
            let nq = rng.gen_range(3..20);
            let ng = rng.gen_range(10..50);
            let ids_q: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..6)).collect();
            let cams_q: Vec<u32> = (0..nq).map(|_| rng.gen_range(0..3)).collect();
            let ids_g: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..6)).collect();
            let cams_g: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..3)).collect();
            let sim: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let report = match cmc_map(&sim, &ids_q, &cams_q, &ids_g, &cams_g, 10) {
                Ok(r) => r,
                // all queries skipped is a legal random draw; the oracle
                // cannot divide by zero either
                Err(_) => continue,
            };
            let (o_map, o_cmc) = oracle(&sim, &ids_q, &cams_q, &ids_g, &cams_g, 10);
            assert!(
                (report.map - o_map).abs() < 1e-12,
                "trial {trial}: mAP {} vs oracle {o_map}",
                report.map
            );
            for (a, b) in report.cmc.iter().zip(&o_cmc) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: CMC mismatch");
            }
            // CMC is monotone non-decreasing in [0, 1]
            for w in report.cmc.windows(2) {
                assert!(w[0] <= w[1] + 1e-15);
            }
            assert!(report.cmc.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn scaling_all_features_uniformly_changes_nothing() {
        use rand::Rng;
        let mut rng = crate::rng::stream(7, crate::rng::StreamTag::GradCheck, 2, 0, 0);
        let dim = 6;
        let qd: Vec<f64> = (0..4 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gd: Vec<f64> = (0..9 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ids_q = vec![0, 1, 2, 3];
        let cams_q = vec![0; 4];
        let ids_g = vec![0, 1, 2, 3, 0, 1, 2, 3, 4];
        let cams_g = vec![1; 9];
        let base = {
            let q = fm(qd.clone(), dim, ids_q.clone(), cams_q.clone());
            let g = fm(gd.clone(), dim, ids_g.clone(), cams_g.clone());
            let sim = cosine_similarity(&q, &g).unwrap();
            cmc_map(&sim, &ids_q, &cams_q, &ids_g, &cams_g, 5).unwrap()
        };
        let scaled = {
            let q = fm(qd.iter().map(|v| v * 37.5).collect(), dim, ids_q.clone(), cams_q.clone());
            let g = fm(gd.iter().map(|v| v * 37.5).collect(), dim, ids_g.clone(), cams_g.clone());
            let sim = cosine_similarity(&q, &g).unwrap();
            cmc_map(&sim, &ids_q, &cams_q, &ids_g, &cams_g, 5).unwrap()
        };
        assert!((base.map - scaled.map).abs() < 1e-12);
        assert_eq!(base.cmc, scaled.cmc);
    }

    #[test]
    fn appending_same_camera_same_identity_row_never_changes_ap() {
        use rand::Rng;
        let mut rng = crate::rng::stream(8, crate::rng::StreamTag::GradCheck, 3, 0, 0);
        for _ in 0..20 {
            let ng = rng.gen_range(5..15);
            let ids_g: Vec<u32> = (0..ng).map(|_| rng.gen_range(0..4)).collect();
            let cams_g: Vec<u32> = (0..ng).map(|_| rng.gen_range(1..3)).collect();
            let sim: Vec<f64> = (0..ng).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let before = cmc_map(&sim, &[2], &[0], &ids_g, &cams_g, 5);

            // append a same-id same-camera row with top similarity
            let mut ids2 = ids_g.clone();
            let mut cams2 = cams_g.clone();
            let mut sim2 = sim.clone();
            ids2.push(2);
            cams2.push(0);
            sim2.push(2.0);
            let after = cmc_map(&sim2, &[2], &[0], &ids2, &cams2, 5);
            match (before, after) {
                (Ok(b), Ok(a)) => {
                    assert!((b.map - a.map).abs() < 1e-15);
                    assert_eq!(b.cmc, a.cmc);
                }
                (Err(_), Err(_)) => {}
                _ => panic!("filter changed skip behavior"),
            }
        }
    }
}
