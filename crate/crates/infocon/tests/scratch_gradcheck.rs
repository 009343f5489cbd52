use infocon::config::TrainConfig;
use infocon::synthdata::{generate_dataset, normalize_dataset, standard_fixture_spec, Trajectory};
use infocon::training::{gradient_check, train};
use std::time::Instant;

fn truncated_dataset(n: usize, t_len: usize, seed: u64) -> infocon::synthdata::Dataset {
    let spec = standard_fixture_spec();
    let mut raw = generate_dataset(&spec, n, seed).unwrap();
    raw.trajectories = raw
        .trajectories
        .iter()
        .map(|t| Trajectory {
            states: t.states.slice(ndarray::s![..t_len, ..]).to_owned(),
            actions: t.actions.slice(ndarray::s![..t_len, ..]).to_owned(),
            gt_phase: None,
            gt_key_times: None,
        })
        .collect();
    normalize_dataset(&raw).unwrap()
}

#[test]
fn scratch_full_gradient_check() {
    let data = truncated_dataset(2, 12, 77);
    let cfg = TrainConfig::tiny(8, 2);
    let t0 = Instant::now();
    let report = gradient_check(&data, &cfg, 1e-4).unwrap();
    println!("gradcheck: {} params in {:.1?}", report.params_checked, t0.elapsed());
    for g in &report.groups {
        println!("  {:<10} rel_err {:.3e}  |grad| {:.3e}", g.group, g.rel_err, g.grad_norm);
    }
    assert!(report.max_rel_err < 1e-4, "max rel err {}", report.max_rel_err);
}

#[test]
fn scratch_iteration_timing() {
    let spec = standard_fixture_spec();
    let raw = generate_dataset(&spec, 16, 3).unwrap();
    let data = normalize_dataset(&raw).unwrap();
    let mut cfg = TrainConfig::desk(8, 2);
    cfg.pretrain_iters = 2;
    cfg.total_iters = 10;
    cfg.warmup_iters = 2;
    let t0 = Instant::now();
    let out = train(&data, &cfg).unwrap();
    let dt = t0.elapsed();
    println!("12 iters in {:.2?} -> {:.1} ms/iter", dt, dt.as_secs_f64() * 1000.0 / 12.0);
    let last = out.history.last().unwrap();
    println!("last losses: total {:.4} gen {:.4} dis_a {:.4} dis_c {:.4} ent {:.4} rec {:.4}",
        last.parts.total, last.parts.gen, last.parts.dis_a, last.parts.dis_c, last.parts.ent, last.parts.rec);
}
