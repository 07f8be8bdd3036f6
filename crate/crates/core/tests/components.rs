use hqp_core::cascade::CascadeConfig;
use hqp_core::data::{scene_from_seed, GenConfig, GroundTruth, Scene};
use hqp_core::decoder::{forward, run_scene, DnWeighting};
use hqp_core::encode::positional_queries;
use hqp_core::features::{encode_features, grid_positions, patch_embed};
use hqp_core::geom::BoxCxCyWH;
use hqp_core::image::Image;
use hqp_core::losses::scene_objective;
use hqp_core::model::{Model, ModelConfig, SceneMemory};
use hqp_core::proposals::Proposal;
use hqp_core::queries::{build_queries, region_contents, DnConfig};
use hqp_core::tensor::{grad_check, Graph, Tensor};
use hqp_core::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch: 4,
        d_model: 8,
        n_heads: 2,
        ffn_dim: 16,
        enc_layers: 1,
        dec_layers: 2,
        roi_size: 2,
        neck_hidden: 8,
        ..Default::default()
    }
}

fn scene(id: u64) -> Scene {
    let gen = GenConfig {
        image_size: 16,
        ..Default::default()
    };
    let mut s = scene_from_seed(&gen, id);
    s.proposals = Some(vec![
        Proposal::emulated(BoxCxCyWH::new(0.3, 0.3, 0.3, 0.3)),
        Proposal::emulated(BoxCxCyWH::new(0.7, 0.6, 0.4, 0.5)),
    ]);
    s
}

#[test]
fn positional_query_norm_gradient() {
    let model = Model::new(tiny(), 1).unwrap();
    let anchors = [BoxCxCyWH::new(0.4, 0.5, 0.2, 0.3), BoxCxCyWH::new(0.7, 0.2, 0.5, 0.1)];
    let report = grad_check(
        |g, flat| {
            let p = model.store.bind_from_flat(g, flat)?;
            let q = positional_queries(g, &p, &model.pos_mlp, &anchors, &model.cfg.pe())?;
            let sq = g.mul(q, q)?;
            Ok(g.sum(sq))
        },
        &model.store.flatten_trainable(),
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn region_content_gradient_through_backbone_and_neck() {
    let model = Model::new(tiny(), 2).unwrap();
    let s = scene(3);
    let boxes: Vec<BoxCxCyWH> = s.proposals.as_ref().unwrap().iter().map(|p| p.bbox).collect();
    let report = grad_check(
        |g, flat| {
            let p = model.store.bind_from_flat(g, flat)?;
            let mem = model.encode(g, &p, &s.image).expect("encode");
            let c = region_contents(g, &p, &model, mem.backbone, &boxes).expect("contents");
            let sq = g.mul(c, c)?;
            let m = g.sum(sq);
            let kk = g.mul(mem.memory, mem.memory)?;
            let k = g.mean(kk);
            g.add(m, k)
        },
        &model.store.flatten_trainable(),
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn encoder_layer_changes_its_input() {
    let model = Model::new(tiny(), 3).unwrap();
    let s = scene(4);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let bb = patch_embed(&mut g, &p, &model.patch, &s.image, 4).unwrap();
    let pos = g.constant(&grid_positions(4, 4, 8, model.cfg.pe_temperature));
    let enc = encode_features(&mut g, &p, &model.encoder, bb, pos, 2).unwrap();
    assert_eq!(g.shape(enc.var), g.shape(bb.var));
    assert_ne!(g.value(enc.var), g.value(bb.var));
}

#[test]
fn fusion_shapes_the_decoder_output() {
    let model = Model::new(tiny(), 4).unwrap();
    let s = scene(5);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mem = model.encode(&mut g, &p, &s.image).unwrap();
    assert_eq!(g.shape(mem.memory), (16, 8));
    let pos = g.constant(&grid_positions(4, 4, 8, model.cfg.pe_temperature));
    let keys = g.add(mem.backbone.var, pos).unwrap();
    let unfused = SceneMemory {
        backbone: mem.backbone,
        memory: mem.backbone.var,
        keys,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let props = s.proposals.as_deref().unwrap();
    let qs = build_queries(&mut g, &p, &model, mem.backbone, props, None, &mut rng).unwrap();
    let a = forward(&mut g, &p, &model, &mem, &qs, &DnWeighting::Uniform).unwrap();
    let b = forward(&mut g, &p, &model, &unfused, &qs, &DnWeighting::Uniform).unwrap();
    assert_ne!(g.value(a[1].match_logits), g.value(b[1].match_logits));
}

#[test]
fn contents_follow_the_pooled_regions() {
    let model = Model::new(tiny(), 5).unwrap();
    let mut image = Image::new(16, 16);
    for y in 0..16 {
        for x in 0..16 {
            image.set(y, x, if x < 8 { [220, 30, 30] } else { [20, 40, 230] });
        }
    }
    let left = BoxCxCyWH::new(0.25, 0.5, 0.4, 0.8);
    let right = BoxCxCyWH::new(0.75, 0.5, 0.4, 0.8);
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mem = model.encode(&mut g, &p, &image).unwrap();
    let c = region_contents(&mut g, &p, &model, mem.backbone, &[left, right, left]).unwrap();
    let rows: Vec<&[f64]> = g.value(c).chunks(8).collect();
    assert_ne!(rows[0], rows[1]);
    assert_eq!(rows[0], rows[2]);
}

#[test]
fn four_objects_in_five_groups_make_twenty_denoising_queries() {
    let model = Model::new(tiny(), 6).unwrap();
    let s = scene(6);
    let gts: Vec<GroundTruth> = (0..4)
        .map(|i| GroundTruth::new(BoxCxCyWH::new(0.2 + 0.2 * i as f64, 0.5, 0.15, 0.3), i % 3))
        .collect();
    let dn = DnConfig { groups: 5, box_noise: 0.4 };
    let mut g = Graph::new();
    let p = model.store.bind(&mut g);
    let mem = model.encode(&mut g, &p, &s.image).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let qs = build_queries(&mut g, &p, &model, mem.backbone, s.proposals.as_deref().unwrap(), Some((&gts, &dn)), &mut rng).unwrap();
    assert_eq!(qs.n_dn(), 20);
    assert_eq!(qs.dn_groups, vec![4; 5]);
    assert_eq!(qs.anchors.len(), 22);
}

/// Central-difference gradient of `f` at `x`.
fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let eps = 1e-6;
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

#[test]
fn feature_gradient_scales_with_the_weight() {
    let model = Model::new(tiny(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feature: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = |omega: f64| {
        let grad = numeric_gradient(&feature, |f| {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let x = g.constant(&Tensor::new(2, 8, f.to_vec()).unwrap());
            let m = g.scale_rows(x, &[omega, omega]).unwrap();
            let logits = model.class_head.forward(&mut g, &p, m).unwrap();
            let s = g.sum(logits);
            g.scalar(s)
        });
        grad.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let ratio = norm(0.5) / norm(1.0);
    assert!((ratio - 0.5).abs() < 0.025, "ratio {ratio}");
}

#[test]
fn flat_cascade_at_huge_temperature_matches_half_weights() {
    let cfg = TrainConfig {
        model: tiny(),
        dn: DnConfig { groups: 2, box_noise: 0.4 },
        ..Default::default()
    };
    let model = Model::new(cfg.model.clone(), 8).unwrap();
    let s = scene(7);
    let loss = |w: DnWeighting| {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (qs, outs) = run_scene(&mut g, &p, &model, &s, Some(&cfg.dn), &w, &mut rng).unwrap();
        let weights: Vec<f64> = outs.iter().flat_map(|o| o.dn_weights.clone()).collect();
        let (l, _) = scene_objective(&mut g, &outs, &s.gts, &qs.dn_targets, 3, &cfg.objective).unwrap();
        (g.scalar(l), weights)
    };
    let flat = CascadeConfig {
        theta1: 0.5,
        delta_theta: 0.0,
        tau: 1e12,
        n_layers: 2,
    };
    let (a, wa) = loss(DnWeighting::Cascade(flat));
    let (b, wb) = loss(DnWeighting::Constant(0.5));
    assert!(wa.iter().all(|w| (w - 0.5).abs() < 1e-12));
    assert!(wb.iter().all(|&w| w == 0.5));
    assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    let (u, _) = loss(DnWeighting::Uniform);
    assert!((u - a).abs() > 1e-6);
}
