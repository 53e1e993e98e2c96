use std::f64::consts::TAU;

use irap_core::geometry::{auc_corner_error, estimate_dlt, Correspondence, Homography};
use irap_core::gradient::{inconsistency_q, orientation_bin, patch_gradient, PatchGradient};
use irap_core::image::{GradientField, PixelCoord};
use irap_core::irap::{compose_gt, transfer_cross_modality, AnnotationRecord, DatasetManifest, ImageSet, Quadruplet, Scene, Status};
use irap_core::semantic::{semantic_triplet_loss, sim_refine, DescriptorBatch, LossWeights, SemanticLabelMap, SemanticVector, SimParams};
use proptest::prelude::*;

fn patch(magnitude: f64, bin: usize, bins: usize) -> PatchGradient {
    PatchGradient { magnitude, orientation: bin as f64 * TAU / bins as f64, origin: PixelCoord::new(0.0, 0.0), size: 16, bins }
}

/// Bin by scanning the half-open intervals one at a time.
fn oracle_bin(o: f64, bins: usize) -> usize {
    if o == 0.0 {
        return bins;
    }
    (1..=bins).find(|&k| o > (k - 1) as f64 * TAU / bins as f64 && o <= k as f64 * TAU / bins as f64).unwrap_or(bins)
}

fn homography() -> impl Strategy<Value = Homography> {
    (0.8..1.2f64, -0.15..0.15f64, -20.0..20.0f64, -0.15..0.15f64, 0.8..1.2f64, -20.0..20.0f64, -5e-4..5e-4f64, -5e-4..5e-4f64)
        .prop_map(|(a, b, c, d, e, f, g, h)| Homography::from_row_major([a, b, c, d, e, f, g, h, 1.0]).unwrap())
}

proptest! {
    #[test]
    fn bins_match_interval_scan(o in 0.0..TAU, bins in 2usize..17) {
        prop_assert_eq!(orientation_bin(o, bins) + 1, oracle_bin(o, bins));
    }

    #[test]
    fn bin_edges_are_inclusive_above(k in 1usize..9) {
        let edge = k as f64 * TAU / 8.0;
        if edge < TAU {
            prop_assert_eq!(orientation_bin(edge, 8) + 1, k);
        }
    }

    #[test]
    fn q_is_symmetric_and_bounded(m1 in 0.0..50.0f64, m2 in 0.0..50.0f64, k1 in 1usize..9, k2 in 1usize..9) {
        let (a, b) = (patch(m1, k1, 8), patch(m2, k2, 8));
        let q = inconsistency_q(&a, &b).unwrap();
        prop_assert_eq!(q, inconsistency_q(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert_eq!(inconsistency_q(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn patch_gradient_dominant_bin_is_maximal(mags in prop::collection::vec(0.0..1.0f64, 64), oris in prop::collection::vec(0.0..TAU, 64)) {
        let field = GradientField::from_parts(8, 8, mags.clone(), oris.clone()).unwrap();
        let pg = patch_gradient(&field, PixelCoord::new(0.0, 0.0), 8, 8).unwrap();
        let mut sums = [0.0; 8];
        for (m, o) in mags.iter().zip(&oris) {
            sums[oracle_bin(*o, 8) - 1] += m;
        }
        let best = (pg.orientation / (TAU / 8.0)).round() as usize;
        prop_assert_eq!(pg.magnitude, sums[best - 1]);
        prop_assert!(sums.iter().all(|&s| s <= pg.magnitude));
        prop_assert!(sums[..best - 1].iter().all(|&s| s < pg.magnitude));
    }

    #[test]
    fn compose_gt_applies_h1_first(h1 in homography(), h2 in homography(), x in 0.0..256.0f64, y in 0.0..256.0f64) {
        let gt = compose_gt(&h2, &h1).unwrap();
        let p = PixelCoord::new(x, y);
        let direct = gt.apply(p).unwrap();
        let chained = h2.apply(h1.apply(p).unwrap()).unwrap();
        prop_assert!(direct.distance(&chained) < 1e-6);
    }

    #[test]
    fn dlt_recovers_planted_model(h in homography()) {
        let pts = [(10.0, 12.0), (200.0, 15.0), (190.0, 220.0), (20.0, 230.0), (100.0, 90.0), (60.0, 170.0)];
        let corrs: Vec<_> = pts.iter().map(|&(x, y)| {
            let p = PixelCoord::new(x, y);
            Correspondence::new(p, h.apply(p).unwrap())
        }).collect();
        let est = estimate_dlt(&corrs).unwrap();
        for c in &corrs {
            prop_assert!(est.apply(c.src).unwrap().distance(&c.dst) < 1e-6);
        }
    }

    #[test]
    fn auc_is_monotone_in_threshold(errors in prop::collection::vec(0.0..20.0f64, 1..40), t in 0.5..10.0f64) {
        let lo = auc_corner_error(&errors, t).unwrap();
        let hi = auc_corner_error(&errors, t * 1.5).unwrap();
        prop_assert!(hi >= lo - 1e-12);
        prop_assert!((0.0..=100.0).contains(&lo));
    }

    #[test]
    fn transfer_carries_identical_ground_truth(h in homography()) {
        let record = AnnotationRecord { h_gt: Some(h), status: Status::Refined, ..AnnotationRecord::draft("q") };
        let pairs = transfer_cross_modality(&record).unwrap();
        prop_assert_eq!(pairs.len(), 4);
        for p in &pairs {
            prop_assert_eq!(p.h_gt.to_row_major().map(f64::to_bits), h.to_row_major().map(f64::to_bits));
        }
    }

    #[test]
    fn manifest_roundtrip_is_structural_identity(hs in prop::collection::vec(homography(), 1..6), scenes in 1usize..4) {
        let mut out: Vec<Scene> = (0..scenes)
            .map(|s| Scene { name: format!("scene{s}"), illumination: "day".into(), quadruplets: Vec::new() })
            .collect();
        for (k, h) in hs.iter().enumerate() {
            let id = format!("q{k}");
            let status = if k % 2 == 0 { Status::Accepted } else { Status::Refined };
            let record = AnnotationRecord { h1: Some(*h), h2: Some(Homography::identity()), h_gt: Some(*h), residual_inlier_count: 6, status, ..AnnotationRecord::draft(&id) };
            let images = ImageSet { a_rgb: format!("{id}/a.png"), a_nir: format!("{id}/an.png"), b_rgb: format!("{id}/b.png"), b_nir: format!("{id}/bn.png") };
            out[k % scenes].quadruplets.push(Quadruplet { id, images, record, planted: None });
        }
        let m = DatasetManifest::new(out).unwrap();
        let back = DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn sim_standardizes_channels(rows in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 3), 2..30)) {
        let batch = DescriptorBatch::from_rows(&rows).unwrap();
        let (_, std_in) = batch.channel_stats();
        prop_assume!(std_in.iter().all(|s| *s > 1e-3));
        let out = sim_refine(&batch, &SemanticVector(vec![0.3, 0.7]), &SimParams::standardizing(2, 3)).unwrap();
        let (mean, std) = out.channel_stats();
        prop_assert!(mean.iter().all(|m| m.abs() < 1e-6));
        prop_assert!(std.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn triplet_loss_is_non_negative_and_translation_invariant(
        rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 4..16),
        shift in -3.0..3.0f64,
    ) {
        let n = rows.len();
        let ids: Vec<u32> = (0..n).map(|k| (k % 2) as u32 + 1).collect();
        let labels = SemanticLabelMap::new(n, 1, 16, 2, ids, vec![1.0; n]).unwrap();
        let w = LossWeights::default();
        let batch = DescriptorBatch::from_rows(&rows).unwrap();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
        let l = semantic_triplet_loss(&batch, &labels, &w).unwrap();
        let ls = semantic_triplet_loss(&DescriptorBatch::from_rows(&shifted).unwrap(), &labels, &w).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - ls).abs() < 1e-9);
    }
}
