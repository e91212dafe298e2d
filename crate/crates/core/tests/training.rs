use persona_core::config::ExperimentConfig;
use persona_core::rng::Rng;
use persona_core::strategy::MODES;
use persona_core::trainer::{train_run, BaseModel, TrainConfig, TrainState};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.d = 8;
    cfg.model.visual_tokens = 2;
    cfg.model.text_tokens = 4;
    cfg.model.heads = 2;
    cfg.model.hidden = 8;
    cfg.model.hidden_tokens = 2;
    cfg.model.latent_dim = 4;
    cfg.model.identity_dim = 4;
    cfg.model.diffusion_steps = 20;
    cfg.model.ff_dim = 8;
    cfg.world.table_size = 32;
    cfg.world.pretrain_steps = 40;
    cfg.train.steps = 20;
    cfg.train.eval_batch = 8;
    cfg
}

fn base(seed: u64) -> (ExperimentConfig, BaseModel) {
    let cfg = small();
    let b = cfg.build_base(seed).unwrap();
    (cfg, b)
}

#[test]
fn identical_seeds_give_identical_reports() {
    let (cfg, b) = base(3);
    let b2 = cfg.build_base(3).unwrap();
    let mut r1 = train_run(&b, &cfg.train).unwrap().report;
    let mut r2 = train_run(&b2, &cfg.train).unwrap().report;
    r1.elapsed_s = 0.0;
    r2.elapsed_s = 0.0;
    assert_eq!(r1, r2);
    let bits = |r: &persona_core::trainer::TrainReport| r.loss_curve.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&r1), bits(&r2));
}

#[test]
fn different_seeds_differ() {
    let (cfg, b) = base(1);
    let a = train_run(&b, &cfg.train).unwrap().report;
    let other = TrainConfig { seed: 2, ..cfg.train.clone() };
    let c = train_run(&b, &other).unwrap().report;
    assert_ne!(a.loss_curve, c.loss_curve);
}

#[test]
fn frozen_digest_survives_training_in_every_mode() {
    let (cfg, b) = base(1);
    for mode in MODES {
        let tc = TrainConfig { ablation_mode: mode.into(), ..cfg.train.clone() };
        let r = train_run(&b, &tc).unwrap().report;
        assert_eq!(r.frozen_digest_before, r.frozen_digest_after, "{mode}");
        assert_eq!(r.frozen_digest_before.len(), 64);
        for name in &r.trainable {
            let frozen_unet = name.starts_with("unet.") && !(name.ends_with(".key") || name.ends_with(".value"));
            assert!(!frozen_unet, "{mode}: {name} is trainable");
        }
        assert!(r.trainable.iter().any(|n| n == "concept.v_star"));
    }
}

#[test]
fn only_cross_attention_key_value_move() {
    let (cfg, b) = base(2);
    let out = train_run(&b, &cfg.train).unwrap();
    let before = &b.store;
    let after = &out.state.store;
    for (id, p) in before.iter() {
        let q = after.get(id);
        let moved = !p.value.bit_eq(&q.value);
        if !p.name.starts_with("unet.") {
            continue;
        }
        let kv = p.name.contains(".cross.") && (p.name.ends_with(".key") || p.name.ends_with(".value"));
        assert_eq!(moved, kv, "{}", p.name);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    // Configs reject lr = 0, so the optimizer is swapped in directly.
    let (cfg, b) = base(1);
    let mut s = TrainState::new(&b, &cfg.train).unwrap();
    let start = s.store.clone();
    for name in ["adam", "sgd"] {
        s.optimizer = persona_core::optim::build(name, 0.0).unwrap();
        let mut rng = Rng::new(9, "batches");
        let draws = s.draw(&mut rng, 4);
        let before = s.loss_on(&draws).unwrap();
        let reported = s.train_step_on(&draws).unwrap();
        assert_eq!(before, reported);
        assert_eq!(s.loss_on(&draws).unwrap(), before);
    }
    for (id, p) in start.iter() {
        assert!(p.value.bit_eq(&s.store.get(id).value), "{}", p.name);
    }
}

#[test]
fn one_step_gives_one_curve_point() {
    let (cfg, b) = base(1);
    let tc = TrainConfig { steps: 1, ..cfg.train.clone() };
    let r = train_run(&b, &tc).unwrap().report;
    assert_eq!(r.loss_curve.len(), 1);
    assert_eq!(r.steps, 1);
}

#[test]
fn first_step_loss_matches_unadapted_model() {
    let (cfg, b) = base(4);
    let fresh = TrainState::new(&b, &cfg.train).unwrap();
    let draws = fresh.draw(&mut Rng::new(cfg.train.seed, "batches"), cfg.train.batch_size);
    let unadapted = fresh.unadapted_loss_on(&draws).unwrap();
    let r = train_run(&b, &cfg.train).unwrap().report;
    assert!((r.loss_curve[0] - unadapted).abs() <= 1e-12);
    assert_eq!(r.initial_loss, r.unadapted_initial_loss);
}

#[test]
fn no_ida_context_is_the_encoded_prompt() {
    let (cfg, b) = base(1);
    let tc = TrainConfig { ablation_mode: "no_ida".into(), ..cfg.train.clone() };
    let s = TrainState::new(&b, &tc).unwrap();
    let tpl = b.testbed.train_template();
    let mut g = persona_core::graph::Graph::new();
    let text = s.text_node(&mut g, tpl).unwrap();
    assert!(s.context(tpl).unwrap().bit_eq(g.value(text)));
}

#[test]
fn naive_concat_widens_the_context() {
    let (cfg, b) = base(1);
    let tc = TrainConfig { ablation_mode: "naive_concat".into(), ..cfg.train.clone() };
    let s = TrainState::new(&b, &tc).unwrap();
    let ctx = s.context(b.testbed.train_template()).unwrap();
    assert_eq!(ctx.shape(), (cfg.model.text_tokens + cfg.model.visual_tokens, cfg.model.d));
}

#[test]
fn modes_share_initial_v_star() {
    let (cfg, b) = base(5);
    let v: Vec<_> = MODES
        .iter()
        .map(|m| {
            let tc = TrainConfig { ablation_mode: (*m).into(), ..cfg.train.clone() };
            TrainState::new(&b, &tc).unwrap().v_star().clone()
        })
        .collect();
    for w in &v[1..] {
        assert!(w.bit_eq(&v[0]));
    }
}

#[test]
fn invalid_train_config_is_rejected() {
    let (cfg, b) = base(1);
    for bad in [
        TrainConfig { ablation_mode: "everything".into(), ..cfg.train.clone() },
        TrainConfig { optimizer: "lbfgs".into(), ..cfg.train.clone() },
        TrainConfig { batch_size: 0, ..cfg.train.clone() },
        TrainConfig { learning_rate: f64::NAN, ..cfg.train.clone() },
    ] {
        assert!(matches!(TrainState::new(&b, &bad), Err(persona_core::Error::Config(_))));
    }
}
