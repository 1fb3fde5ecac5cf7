mod common;

use common::{tiny_model, tiny_train_config, vocab};
use unitok::checkpoint::Checkpoint;
use unitok::data::Corpus;
use unitok::model::Tokenizer;
use unitok::tensor::optim::{adamw_step, AdamState, AdamWConfig, ParamSlot};
use unitok::tensor::Graph;
use unitok::train::{
    batch_indices, lr_at, read_curves, run_ablation_suite, write_curves, AblationSummary, LossReport, Mode,
    StageData, TrainConfig, Trainer, CURVE_HEADER,
};
use unitok::Error;

fn corpus(cfg: &TrainConfig) -> Corpus {
    Corpus::synthetic(cfg.data.train_size, cfg.data.seed, cfg.data.master_resolution)
}

fn quiet() -> impl FnMut(&LossReport) -> unitok::Result<()> {
    |_| Ok(())
}

#[test]
fn schedule_endpoints() {
    let s = TrainConfig::desk().stages[0].clone();
    assert_eq!(lr_at(0, &s), 0.0);
    assert!((lr_at(s.warmup_steps, &s) - s.base_lr).abs() < 1e-15);
    assert!(lr_at(s.total_steps, &s).abs() < 1e-15);
    let mid = (s.warmup_steps + s.total_steps) / 2;
    assert!((lr_at(mid, &s) - s.base_lr / 2.0).abs() < 1e-12);
    for t in 1..s.warmup_steps {
        assert!(lr_at(t, &s) > lr_at(t - 1, &s));
    }
    for t in s.warmup_steps + 1..=s.total_steps {
        assert!(lr_at(t, &s) <= lr_at(t - 1, &s));
    }
}

#[test]
fn presets() {
    let d = TrainConfig::desk();
    assert_eq!(d.stages[0].total_steps, 10 * d.stages[1].total_steps);
    assert_eq!((d.stage_lambda(0), d.stage_lambda(1)), (0.0, 0.5));
    assert!(d.stages[1].base_lr < d.stages[0].base_lr);
    assert!(d.validate().is_ok() && TrainConfig::compact().validate().is_ok());
}

#[test]
fn config_text_round_trip_and_errors() {
    for c in [TrainConfig::desk(), TrainConfig::compact(), tiny_train_config()] {
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }
    let c = TrainConfig::parse("[train]\nmode = \"rec_only\"\n\n[stage2]\nbatch_size = 8\n").unwrap();
    assert_eq!(c.mode, Mode::RecOnly);
    assert_eq!(c.stages[1].batch_size, 8);
    assert_eq!(c.stages[0], TrainConfig::desk().stages[0]);

    match TrainConfig::parse("[train]\nseed = 1\n\n[vit]\ndepht = 3\n") {
        Err(Error::Config { line, msg }) => {
            assert_eq!(line, 5);
            assert!(msg.contains("vit.depht"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(TrainConfig::parse("[train]\nmode = \"both\"\n"), Err(Error::Config { line: 2, .. })));
    assert!(matches!(TrainConfig::parse("[vit]\ndepth = -1\n"), Err(Error::Config { line: 2, .. })));
    assert!(TrainConfig::parse("[vit\n").is_err());
    assert!(TrainConfig::parse("[stage1]\nwarmup_steps = 5000\n").is_err());
    assert!(TrainConfig::parse("[stage2]\nresolution = 60\n").is_err());
    assert!("und_only".parse::<Mode>().is_ok() && "x".parse::<Mode>().is_err());
}

#[test]
fn batch_order_is_a_seeded_permutation_per_epoch() {
    let n = 10;
    let epoch: Vec<usize> = (0..5).flat_map(|s| batch_indices(4, 0, s, 2, n)).collect();
    let mut sorted = epoch.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..n).collect::<Vec<_>>());
    assert_eq!(batch_indices(4, 0, 3, 4, n), batch_indices(4, 0, 3, 4, n));
    assert_ne!(epoch, (0..5).flat_map(|s| batch_indices(5, 0, s, 2, n)).collect::<Vec<_>>());
    assert_ne!(batch_indices(4, 0, 0, 10, n), batch_indices(4, 1, 0, 10, n));
}

#[test]
fn runs_are_bit_identical_and_logs_are_consistent() {
    let cfg = tiny_train_config();
    let data = corpus(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let mut t = Trainer::new(cfg.clone(), vocab()).unwrap();
        let log = t.run(&data, None, &mut quiet()).unwrap();
        let path = dir.path().join(format!("run{k}.csv"));
        write_curves(&path, &log).unwrap();
        runs.push((std::fs::read(&path).unwrap(), log, t.checkpoint().to_bytes().unwrap()));
    }
    assert_eq!(runs[0].0, runs[1].0);
    assert_eq!(runs[0].2, runs[1].2);

    let log = &runs[0].1;
    let total: usize = cfg.stages.iter().map(|s| s.total_steps).sum();
    assert_eq!(log.len(), total);
    let text = String::from_utf8(runs[0].0.clone()).unwrap();
    assert_eq!(text.lines().next(), Some(CURVE_HEADER));
    assert_eq!(text.lines().count(), total + 1);
    assert_eq!(&read_curves(&text).unwrap(), log);

    let t = Trainer::new(cfg.clone(), vocab()).unwrap();
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.step, i);
        let w = t.weights(r.stage - 1);
        let want = w.omega_rec * (r.pixel_l1 + w.beta * r.latent_l1 + w.lambda * r.perceptual)
            + w.omega_und * (r.caption_ce + w.alpha * r.contrastive);
        assert!((r.weighted_total - want).abs() <= 1e-6);
        assert_eq!(r.stage, if i < cfg.stages[0].total_steps { 1 } else { 2 });
    }
    assert_eq!(log[0].lr, 0.0);
    assert_eq!(log[cfg.stages[0].total_steps].lr, 0.0);
}

#[test]
fn curve_parse_errors_cite_lines() {
    assert!(matches!(read_curves("step,stage\n"), Err(Error::Config { line: 1, .. })));
    let bad = format!("{CURVE_HEADER}\n0,1,0,1,1,1,1,1,1\n1,1,zero,1,1,1,1,1,1\n");
    assert!(matches!(read_curves(&bad), Err(Error::Config { line: 3, .. })));
    assert_eq!(read_curves(&format!("{CURVE_HEADER}\n")).unwrap(), vec![]);
}

#[test]
fn resume_from_checkpoint_continues_identically() {
    let mut cfg = tiny_train_config();
    cfg.stages[0].total_steps = 12;
    let data = corpus(&cfg);
    let mut full = Trainer::new(cfg.clone(), vocab()).unwrap();
    let reference = full.run(&data, None, &mut quiet()).unwrap();

    let mut part = Trainer::new(cfg.clone(), vocab()).unwrap();
    let sd = StageData::new(&data, &part.vocab, cfg.stages[0].resolution, cfg.text.max_len).unwrap();
    for _ in 0..2 {
        part.train_step(&sd).unwrap();
    }
    let bytes = part.checkpoint().to_bytes().unwrap();
    drop(part);
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.position(), (0, 2, 2));
    let rest = resumed.run(&data, None, &mut quiet()).unwrap();
    assert!(rest.len() >= 10);
    assert_eq!(&rest[..], &reference[2..]);
    assert_eq!(resumed.model.params, full.model.params);

    let model_only = full.model.to_checkpoint(&full.vocab);
    assert!(matches!(Trainer::from_checkpoint(&model_only), Err(Error::Checkpoint(_))));
}

#[test]
fn empty_stage_writes_checkpoint_and_keeps_parameters() {
    let mut cfg = tiny_train_config();
    cfg.stages[1].resolution = cfg.stages[0].resolution;
    cfg.stages[1].total_steps = 0;
    cfg.stages[1].warmup_steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg.clone(), vocab()).unwrap();
    let log = t.run(&corpus(&cfg), Some(dir.path()), &mut quiet()).unwrap();
    assert_eq!(log.len(), cfg.stages[0].total_steps);
    let s1 = Checkpoint::load(&dir.path().join("stage1.ckpt")).unwrap();
    let s2 = Checkpoint::load(&dir.path().join("stage2.ckpt")).unwrap();
    let (m1, _) = Tokenizer::from_checkpoint(&s1).unwrap();
    let (m2, _) = Tokenizer::from_checkpoint(&s2).unwrap();
    assert_eq!(m1.params, m2.params);
}

#[test]
fn second_stage_uses_interpolated_positions() {
    let cfg = tiny_train_config();
    let mut t = Trainer::new(cfg.clone(), vocab()).unwrap();
    t.run(&corpus(&cfg), None, &mut quiet()).unwrap();
    assert_eq!(t.model.grid(), (4, 4));
    assert_eq!(t.model.params.get("dec.pos").unwrap().shape(), &[16, 16]);
    assert_eq!(t.position(), (1, 3, 11));
}

#[test]
fn ablation_modes_share_step_zero_and_freeze_unused_branches() {
    let cfg = tiny_train_config();
    let v = vocab();
    let init = Trainer::new(cfg.clone(), v.clone()).unwrap().model;
    let runs = run_ablation_suite(&cfg, &v, &corpus(&cfg), &mut |_, _| Ok(())).unwrap();
    assert_eq!(runs.iter().map(|r| r.mode).collect::<Vec<_>>(), [Mode::Joint, Mode::UndOnly, Mode::RecOnly]);
    assert_eq!(runs[0].log[0], runs[1].log[0]);
    assert_eq!(runs[0].log[0], runs[2].log[0]);

    let unchanged = |m: &Tokenizer, prefixes: &[&str]| {
        for (name, t) in m.params.iter() {
            // positional tables are resampled between stages regardless
            if prefixes.iter().any(|p| name.starts_with(p)) && !name.ends_with(".pos") {
                assert_eq!(Some(t), init.params.get(name), "{name} moved");
            }
        }
    };
    unchanged(&runs[1].trainer.model, &["dec."]);
    unchanged(&runs[2].trainer.model, &["txt.", "cap.", "pool.", "logit_scale"]);
    assert_ne!(runs[0].trainer.model.params.get("dec.head.w"), init.params.get("dec.head.w"));

    let summary = AblationSummary::from_runs(runs.iter().map(|r| (r.mode, r.log.as_slice())));
    let s = summary.get(Mode::Joint, "caption_ce").unwrap();
    assert_eq!(s.initial, runs[0].log[0].caption_ce);
    assert_eq!(s.r#final, runs[0].log.last().unwrap().caption_ce);
    assert!((s.ratio - s.r#final / s.initial).abs() < 1e-15);
    assert!(summary.get(Mode::RecOnly, "nope").is_none());
}

#[test]
fn non_finite_loss_names_its_component() {
    let cfg = tiny_train_config();
    let mut t = Trainer::new(cfg.clone(), vocab()).unwrap();
    t.model.params.get_mut("dec.head.b").unwrap().data_mut()[0] = f32::NAN;
    let err = t.run(&corpus(&cfg), None, &mut quiet()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { component: "pixel_l1", step: 0 }), "{err}");
    assert!(err.to_string().contains("pixel_l1"));
}

#[test]
fn caption_loss_falls_steadily_on_a_fixed_batch() {
    let v = vocab();
    let mut m: Tokenizer<f32> = tiny_model(&v);
    let bt = common::batch::<f32>(&Corpus::synthetic(8, 21, 16), &v, 16, 32);
    let mut adam = AdamState::new(m.params.values());
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut prev = f64::INFINITY;
    for step in 0..200 {
        let g = Graph::new();
        let (loss, grads) = {
            let b = m.params.bind(&g);
            let z = m.unified(&b, g.constant(m.encode_latents(&bt.images).unwrap().values)).unwrap();
            let l = m.caption_loss(&b, &z, &bt.captions).unwrap();
            g.backward(l).unwrap();
            (f64::from(l.item()), b.reached_grads())
        };
        assert!(loss < prev, "step {step}: {loss} after {prev}");
        prev = loss;
        let mut slots: Vec<_> = m
            .params
            .iter_mut()
            .zip(&grads)
            .map(|((name, value), g)| ParamSlot { name, value, grad: g.as_deref(), decay: false })
            .collect();
        adamw_step(&mut slots, &mut adam, 1e-3, &cfg).unwrap();
    }
    assert!(prev < 1.0, "{prev}");
}
