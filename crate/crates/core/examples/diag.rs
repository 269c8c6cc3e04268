//! Scratch diagnostics for training behavior.
//!
//! Modes:
//!   overfit <cfg> <steps>   train on scene 0 only, eval on the same scene
//!   probs <cfg> <ckpt>      probability quantiles on validation scenes
use bevscan_core::config::RunConfig;
use bevscan_core::metrics::evaluate;
use bevscan_core::nn::{BevSegModel, Forward};
use bevscan_core::scene::{make_rig, Split};
use bevscan_core::tensor::{checkpoint, Tape};
use bevscan_core::train::{forward_sample, train};

fn prob_stats(
    cfg: &RunConfig,
    store: &bevscan_core::nn::ParamStore,
    model: &BevSegModel,
    data: &bevscan_core::scene::Dataset,
    n: usize,
) {
    let grid = data.grid.clone();
    let mut pos: Vec<f64> = Vec::new();
    let mut neg_hi = 0usize;
    let mut all_max = 0.0f64;
    for sample in data.iter().take(n) {
        let sample = sample.unwrap();
        let fw = Forward::new(Tape::new(), store);
        let out = forward_sample(&fw, model, &sample, &grid).unwrap();
        let probs: Vec<f64> = out
            .seg_logits
            .value()
            .iter()
            .map(|l| 1.0 / (1.0 + (-l).exp()))
            .collect();
        for (&p, &y) in probs.iter().zip(sample.targets.seg.iter()) {
            if y > 0.5 {
                pos.push(p);
            } else if p > 0.5 {
                neg_hi += 1;
            }
            all_max = all_max.max(p);
        }
    }
    pos.sort_by(f64::total_cmp);
    let q = |f: f64| pos[((pos.len() - 1) as f64 * f) as usize];
    println!(
        "cfg grid {}x{} | pos probs p10 {:.3} p50 {:.3} p90 {:.3} max {:.3} | overall max {:.3} | false-high {}",
        cfg.grid_nz,
        cfg.grid_nx,
        q(0.1),
        q(0.5),
        q(0.9),
        q(1.0),
        all_max,
        neg_hi
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args[1].as_str();
    let cfg = RunConfig::load(std::path::Path::new(&args[2])).unwrap();
    match mode {
        "overfit" => {
            let steps: usize = args[3].parse().unwrap();
            let mut cfg = cfg;
            cfg.train_scenes = 1;
            cfg.steps = steps;
            cfg.accum = 1;
            let mut store = cfg.param_store();
            let rig = make_rig(cfg.img_h, cfg.img_w);
            let model = BevSegModel::new(&mut store, cfg.model_config(), &rig).unwrap();
            let weighting = cfg.weighting(&mut store).unwrap();
            let data = cfg.dataset(Split::Train).unwrap();
            let logs = train(&mut store, &model, &weighting, &data, &cfg.train_config(), None)
                .unwrap();
            for l in logs.iter().filter(|l| l.step % 50 == 0 || l.step + 1 == steps) {
                println!(
                    "step {:4} lr {:.5} l_seg {:.4} l_cen {:.4} l_off {:.4}",
                    l.step, l.lr, l.l_seg, l.l_cen, l.l_off
                );
            }
            let report = evaluate(&store, &model, &data).unwrap();
            println!(
                "train-scene IoU filtered {:.4} unfiltered {:.4}",
                report.filtered.overall, report.unfiltered.overall
            );
            prob_stats(&cfg, &store, &model, &data, 1);
        }
        "probs" => {
            let mut store = cfg.param_store();
            let rig = make_rig(cfg.img_h, cfg.img_w);
            let model = BevSegModel::new(&mut store, cfg.model_config(), &rig).unwrap();
            cfg.weighting(&mut store).unwrap();
            let map = checkpoint::load(std::path::Path::new(&args[3])).unwrap();
            store.load_map(&map).unwrap();
            let val = cfg.dataset(Split::Val).unwrap();
            prob_stats(&cfg, &store, &model, &val, 10);
        }
        other => panic!("unknown mode {other}"),
    }
}
