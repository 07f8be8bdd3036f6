use hqp_core::cascade::CascadeConfig;
use hqp_core::data::{scene_from_seed, GenConfig, Scene};
use hqp_core::decoder::{run_scene, DnWeighting};
use hqp_core::geom::BoxCxCyWH;
use hqp_core::losses::scene_objective;
use hqp_core::model::{Model, ModelConfig};
use hqp_core::proposals::{attach_proposals, EmulatorConfig, Proposal};
use hqp_core::queries::DnConfig;
use hqp_core::tensor::{grad_check_coords, Graph};
use hqp_core::trainer::{scene_loss, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(dec_layers: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            image_size: 16,
            patch: 4,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 16,
            enc_layers: 1,
            dec_layers,
            roi_size: 2,
            neck_hidden: 8,
            ..Default::default()
        },
        dn: DnConfig {
            groups: 2,
            box_noise: 0.4,
        },
        cascade: CascadeConfig {
            n_layers: dec_layers,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Two objects and three proposals on a 16 x 16 image (a 4 x 4 grid).
fn two_object_scene() -> Scene {
    let gen = GenConfig {
        image_size: 16,
        min_objects: 2,
        max_objects: 2,
        ..Default::default()
    };
    let mut scene = scene_from_seed(&gen, 5);
    let props = vec![
        Proposal::emulated(BoxCxCyWH::new(0.3, 0.35, 0.3, 0.4)),
        Proposal::emulated(BoxCxCyWH::new(0.65, 0.6, 0.4, 0.3)),
        Proposal::emulated(BoxCxCyWH::new(0.5, 0.5, 0.6, 0.6)),
    ];
    scene.proposals = Some(props);
    scene
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let cfg = small_config(2);
    let model = Model::new(cfg.model.clone(), 3).unwrap();
    let scene = two_object_scene();
    assert_eq!(scene.gts.len(), 2);
    let flat = model.store.flatten_trainable();
    let weighting = cfg.weighting();
    let coords: Vec<usize> = (0..flat.data.len()).collect();
    let report = grad_check_coords(
        |g, x| {
            let p = model.store.bind_from_flat(g, x)?;
            Ok(scene_loss(g, &p, &model, &scene, &cfg, &weighting, 11).expect("loss").0)
        },
        &flat,
        1e-5,
        &coords,
    )
    .unwrap();
    println!("checked {} coords, max rel err {:e}", report.checked, report.max_rel_error);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn matching_outputs_ignore_the_denoising_branch() {
    let cfg = small_config(3);
    let model = Model::new(cfg.model.clone(), 4).unwrap();
    let gen = GenConfig {
        image_size: 16,
        n_scenes: 20,
        ..Default::default()
    };
    let mut ds = hqp_core::data::Dataset::generate(&gen, hqp_core::data::Split::Train, 0);
    attach_proposals(&mut ds, &EmulatorConfig::default(), 1);
    for scene in &ds.scenes {
        let run = |dn: Option<&DnConfig>| {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (_, outs) = run_scene(&mut g, &p, &model, scene, dn, &DnWeighting::Cascade(cfg.cascade), &mut rng).unwrap();
            outs.iter()
                .map(|o| (g.value(o.match_logits).to_vec(), g.value(o.match_boxes).to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(Some(&cfg.dn)), run(None), "scene {}", scene.id);
    }
}

#[test]
fn unit_weights_reproduce_uniform_denoising() {
    let cfg = small_config(2);
    let model = Model::new(cfg.model.clone(), 6).unwrap();
    let scene = two_object_scene();
    let loss = |w: DnWeighting| {
        let mut g = Graph::new();
        let p = model.store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (qs, outs) = run_scene(&mut g, &p, &model, &scene, Some(&cfg.dn), &w, &mut rng).unwrap();
        let (l, r) = scene_objective(&mut g, &outs, &scene.gts, &qs.dn_targets, 3, &cfg.objective).unwrap();
        let grads = g.backward(l).unwrap();
        (r, model.store.gradients(&p, &grads))
    };
    assert_eq!(loss(DnWeighting::Constant(1.0)), loss(DnWeighting::Uniform));
}
