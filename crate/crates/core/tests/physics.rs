use hoi_refine::autodiff::{Tape, Tensor};
use hoi_refine::model::{pose_scene, world_sdf, BodyModel, ParamVector, SceneModels, TemplateRegistry};
use hoi_refine::physics::{loss_total, predict_contact_masks, ContactMasks, GuidanceWeights, MinMode};
use hoi_refine::model::PosedSdf;
use hoi_refine::scenegen::{sample_scene, GeneratorConfig, PerturbationModel, ScenarioKind, ScenarioSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Oracle {
    ho: f64,
    of: f64,
    pt: f64,
    penetrating: usize,
}

fn oracle(x: &ParamVector, masks: &ContactMasks, models: SceneModels<'_>) -> Oracle {
    let p = pose_scene(x, models).unwrap();
    let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum::<f64>();
    let mut ho = 0.0;
    for (i, &h) in p.human.iter().enumerate() {
        if masks.m_h[i] > 0.0 {
            let best = p.object.iter().map(|&o| sq(h, o)).fold(f64::INFINITY, f64::min);
            ho += masks.m_h[i] * best;
        }
    }
    for (j, &o) in p.object.iter().enumerate() {
        if masks.m_o[j] > 0.0 {
            let best = p.human.iter().map(|&h| sq(o, h)).fold(f64::INFINITY, f64::min);
            ho += masks.m_o[j] * best;
        }
    }
    let of = p.object.iter().zip(&masks.m_f).map(|(o, m)| m * o[1].abs()).sum();
    let mut depth = 0.0;
    let mut penetrating = 0;
    for &h in &p.human {
        let phi = world_sdf(models.object, x.rot_o(), x.trans_o(), h).unwrap();
        if phi < 0.0 {
            depth += -phi;
            penetrating += 1;
        }
    }
    Oracle {
        ho: ho.sqrt(),
        of,
        pt: depth / p.human.len() as f64,
        penetrating,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + b.abs())
}

#[test]
fn losses_match_brute_force() {
    let body = BodyModel::mini();
    let registry = TemplateRegistry::builtin();
    let gen = GeneratorConfig {
        perturbation: PerturbationModel::default().scaled(2.0),
        ..GeneratorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut saw_penetration = false;
    for i in 0..20u64 {
        let kind = ScenarioKind::ALL[i as usize % 5];
        let scene = sample_scene(&ScenarioSpec::new(kind), &gen, 900 + i, &body, &registry).unwrap();
        let tmpl = registry.get(&scene.template_id).unwrap();
        let models = SceneModels::new(&body, &tmpl);
        for x in [&scene.gt, &scene.init] {
            let posed = pose_scene(x, models).unwrap();
            let sdf = PosedSdf::new(&tmpl, x.rot_o(), x.trans_o()).unwrap();
            let mut masks = predict_contact_masks(&posed.human, &posed.object, &sdf, 0.05).unwrap();
            // Add a few arbitrary weighted entries so the oracle sees non-geometric masks.
            for _ in 0..3 {
                let h = rng.gen_range(0..masks.m_h.len());
                masks.m_h[h] = rng.gen_range(0.5..2.0);
                let o = rng.gen_range(0..masks.m_o.len());
                masks.m_o[o] = 1.0;
                masks.m_f[o] = 1.0;
            }
            let tape = Tape::inference();
            let xv = tape.constant(Tensor::vector(x.as_slice().to_vec()));
            let terms = loss_total(xv, &masks, &GuidanceWeights::default(), models, MinMode::Hard).unwrap();
            let o = oracle(x, &masks, models);
            assert!(close(terms.ho, o.ho), "ho {} vs {}", terms.ho, o.ho);
            assert!(close(terms.of, o.of), "of {} vs {}", terms.of, o.of);
            assert!(close(terms.pt, o.pt), "pt {} vs {}", terms.pt, o.pt);
            assert_eq!(terms.pt == 0.0, o.penetrating == 0);
            saw_penetration |= o.penetrating > 0;
            let total = terms.total.item().unwrap();
            assert!(close(total, o.ho + o.of + o.pt));
        }
    }
    assert!(saw_penetration, "perturbed scenes never penetrated");
}

#[test]
fn soft_min_never_undercuts_hard_min() {
    let body = BodyModel::mini();
    let registry = TemplateRegistry::builtin();
    let scene =
        sample_scene(&ScenarioSpec::new(ScenarioKind::CarryBox), &GeneratorConfig::default(), 4, &body, &registry).unwrap();
    let tmpl = registry.get(&scene.template_id).unwrap();
    let models = SceneModels::new(&body, &tmpl);
    let posed = pose_scene(&scene.init, models).unwrap();
    let sdf = PosedSdf::new(&tmpl, scene.init.rot_o(), scene.init.trans_o()).unwrap();
    let masks = predict_contact_masks(&posed.human, &posed.object, &sdf, 0.05).unwrap();
    let eval = |mode| {
        let tape = Tape::inference();
        let xv = tape.constant(Tensor::vector(scene.init.as_slice().to_vec()));
        loss_total(xv, &masks, &GuidanceWeights::default(), models, mode).unwrap().ho
    };
    let hard = eval(MinMode::Hard);
    let mut prev = f64::INFINITY;
    for temperature in [0.05, 0.01, 0.001, 1e-5] {
        let soft = eval(MinMode::Soft { temperature });
        assert!(soft >= hard - 1e-12);
        assert!(soft <= prev + 1e-12);
        prev = soft;
    }
    assert!((prev - hard).abs() < 1e-6);
}

#[test]
fn zero_weights_leave_total_at_zero() {
    let body = BodyModel::mini();
    let registry = TemplateRegistry::builtin();
    let scene =
        sample_scene(&ScenarioSpec::new(ScenarioKind::SitOnBox), &GeneratorConfig::default(), 8, &body, &registry).unwrap();
    let tmpl = registry.get(&scene.template_id).unwrap();
    let models = SceneModels::new(&body, &tmpl);
    let masks = ContactMasks {
        m_h: vec![1.0; body.vertex_count()],
        m_o: vec![1.0; tmpl.vertex_count()],
        m_f: vec![1.0; tmpl.vertex_count()],
    };
    let tape = Tape::new();
    let xv = tape.leaf(Tensor::vector(scene.init.as_slice().to_vec()));
    let w = GuidanceWeights {
        lambda_ho: 0.0,
        lambda_of: 0.0,
        lambda_pt: 0.0,
        ..GuidanceWeights::default()
    };
    let terms = loss_total(xv, &masks, &w, models, MinMode::Hard).unwrap();
    assert_eq!(terms.total.item().unwrap(), 0.0);
    assert!(terms.ho > 0.0 && terms.of > 0.0);
    let g = tape.backward(terms.total).unwrap();
    assert!(g.get(xv).data().iter().all(|&v| v == 0.0));
}
