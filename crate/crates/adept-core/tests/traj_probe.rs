//! Temporary: epoch-by-epoch loss trajectories for acceptance-config tuning.

use adept_core::config::RunConfig;
use adept_core::pipeline::pretrain;

fn base_cfg() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.strict = true;
    cfg.dataset.canvas = 32;
    cfg.dataset.patch = 8;
    cfg.dataset.train_samples = 64;
    cfg.dataset.probe_train_samples = 48;
    cfg.dataset.probe_eval_samples = 16;
    cfg.dataset.seed = 9000;
    cfg.encoder.embed_dim = 32;
    cfg.encoder.depth = 1;
    cfg.encoder.heads = 4;
    cfg.encoder.proj_dim = 16;
    cfg.train.batch_size = 16;
    cfg.train.seed = 700;
    cfg.train.queue_capacity = 64;
    cfg.train.momentum = 0.99;
    cfg.train.stage1_epochs = 60;
    cfg.train.stage2_epochs = 40;
    cfg
}

fn row(vals: &[f64]) -> String {
    vals.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
}

fn show(tag: &str, cfg: &RunConfig) {
    let out = pretrain(cfg, None).expect("run");
    let s1 = &out.stage1.epochs;
    let s2 = &out.stage2.epochs;
    println!("{tag} s1 l_ctr: {}", row(&s1.iter().map(|m| m.l_ctr).collect::<Vec<_>>()));
    println!("{tag} s1 gnorm: {}", row(&s1.iter().map(|m| m.grad_norm).collect::<Vec<_>>()));
    println!("{tag} s2 l_ctr: {}", row(&s2.iter().map(|m| m.l_ctr).collect::<Vec<_>>()));
    println!("{tag} s2 l_kp : {}", row(&s2.iter().map(|m| m.l_kp).collect::<Vec<_>>()));
    println!("{tag} s2 l_dct: {}", row(&s2.iter().map(|m| m.l_dct).collect::<Vec<_>>()));
    println!("{tag} s2 gnorm: {}", row(&s2.iter().map(|m| m.grad_norm).collect::<Vec<_>>()));
}

#[test]
fn trajectories() {
    for noise in [0.15, 0.2] {
        let mut cfg = base_cfg();
        cfg.train.queue_capacity = 16;
        cfg.train.learning_rate = 0.001;
        cfg.train.momentum = 0.9;
        cfg.train.lambda1 = 1.0;
        cfg.train.lambda2 = 1.0;
        cfg.train.head_lr_mult = 50.0;
        cfg.train.noise_scale = noise;
        cfg.augment.crop_min_frac = 0.85;
        cfg.augment.brightness = 0.05;
        cfg.augment.color_jitter = 0.02;
        cfg.train.stage1_epochs = 130;
        cfg.train.stage2_epochs = 120;
        let out = pretrain(&cfg, None).expect("run");
        let pick = |v: &[f64]| -> String {
            v.iter().step_by(10).map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
        };
        let s1c: Vec<f64> = out.stage1.epochs.iter().map(|e| e.l_ctr).collect();
        let kp: Vec<f64> = out.stage2.epochs.iter().map(|e| e.l_kp).collect();
        let de: Vec<f64> = out.stage2.epochs.iter().map(|e| e.l_de).collect();
        let s1_drop = 1.0 - s1c.last().unwrap() / s1c[0];
        let de_drop = 1.0 - de.last().unwrap() / de[0];
        println!("N{noise} s1 l_ctr {} last {:.3} drop {:.1}%", pick(&s1c), s1c.last().unwrap(), s1_drop * 100.0);
        println!("N{noise} s2 l_kp  {} last {:.3}", pick(&kp), kp.last().unwrap());
        println!("N{noise} s2 l_de  {} last {:.3} drop {:.1}%", pick(&de), de.last().unwrap(), de_drop * 100.0);
    }
}
