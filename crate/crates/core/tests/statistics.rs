//! Monte-Carlo checks of the random generators against their analytic rates.

use hqp_core::data::{Dataset, GenConfig, Split};
use hqp_core::geom::{perturb_box, BoxCxCyWH};
use hqp_core::proposals::{emulate_sam, proposal_recall, EmulatorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn std_dev(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn corner_noise_has_the_analytic_spread() {
    let b = BoxCxCyWH::new(0.5, 0.5, 0.4, 0.4);
    let c = b.to_xyxy();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut deltas = [vec![], vec![], vec![], vec![]];
    for _ in 0..100_000 {
        let p = perturb_box(&b, 0.1, &mut rng).to_xyxy();
        for (k, d) in [p.x0 - c.x0, p.y0 - c.y0, p.x1 - c.x1, p.y1 - c.y1].into_iter().enumerate() {
            deltas[k].push(d);
        }
    }
    for d in &deltas {
        let s = std_dev(d);
        assert!((s - 0.04).abs() < 1e-3, "std {s}");
    }
}

#[test]
fn emulated_proposals_cover_objects_at_the_hit_rate() {
    let gen = GenConfig {
        n_scenes: 100,
        ..Default::default()
    };
    let ds = Dataset::generate(&gen, Split::Train, 0);
    let cfg = EmulatorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut hits, mut gts, mut count, mut expected) = (0.0, 0usize, 0usize, 0.0);
    for scene in &ds.scenes {
        let props = emulate_sam(scene, &cfg, &mut rng);
        assert!(!props.is_empty() && props.len() <= cfg.target_count);
        let boxes: Vec<BoxCxCyWH> = scene.gts.iter().map(|g| g.bbox).collect();
        hits += proposal_recall(&props, &boxes, 0.5) * boxes.len() as f64;
        gts += boxes.len();
        count += props.len();
        expected += boxes.len() as f64 * cfg.gt_hit_rate + cfg.distractor_count as f64;
    }
    let recall = hits / gts as f64;
    assert!(recall >= 0.9, "recall {recall}");
    let ratio = count as f64 / expected;
    assert!((ratio - 1.0).abs() < 0.1, "count ratio {ratio}");
}

#[test]
fn class_frequencies_follow_tier_weights() {
    let gen = GenConfig {
        n_scenes: 10_000,
        image_size: 16,
        ..Default::default()
    };
    let ds = Dataset::generate(&gen, Split::Train, 0);
    let mut counts = vec![0usize; gen.n_classes];
    for s in &ds.scenes {
        assert!((1..=4).contains(&s.gts.len()));
        for g in &s.gts {
            counts[g.class] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let w = gen.class_weights();
    let wsum: f64 = w.iter().sum();
    for (c, &n) in counts.iter().enumerate() {
        let freq = n as f64 / total as f64;
        assert!((freq - w[c] / wsum).abs() < 0.02, "class {c}: {freq}");
    }
}
