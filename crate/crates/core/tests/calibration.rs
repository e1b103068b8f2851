//! Temporary sizing experiment (run with --ignored).
use std::time::Instant;
use stmd_core::data::{BenchmarkConfig, Split, TrackerConfig};
use stmd_core::eval::{center_distance, iou3d, run_ope, StaticBaseline};
use stmd_core::model::StmdModel;
use stmd_core::train::{evaluate_model, train_loop, TrainConfig};

#[test]
#[ignore]
fn calibrate_full_scale_training() {
    let bench = BenchmarkConfig {
        train_sequences: 150,
        eval_sequences: 12,
        ..Default::default()
    };
    let train = bench.generate(Split::Train).unwrap();
    let eval = bench.generate(Split::Eval).unwrap();

    let mut s_sum = 0.0;
    for s in &eval {
        let mut b = StaticBaseline::default();
        s_sum += run_ope(&mut b, s).unwrap().success;
    }
    println!("static baseline Success: {:.4}", s_sum / eval.len() as f64);

    let cfg = TrackerConfig::default();
    let mut model: StmdModel<f32> = StmdModel::new(cfg).unwrap();
    let tcfg = TrainConfig { epochs: 12, batch_size: 4, lr: 2e-3, eval_every_epochs: 3, ..Default::default() };
    let t2 = Instant::now();
    let out = train_loop(&mut model, &tcfg, &train, &eval).unwrap();
    println!("train {} steps in {:?}; per-step {:?}", out.steps, t2.elapsed(), t2.elapsed() / out.steps as u32);
    let k = out.history.len();
    let avg = |lo: usize, hi: usize| out.history[lo..hi].iter().map(|h| h.loss).sum::<f64>() / (hi - lo) as f64;
    println!("loss first5 {:.4} last5 {:.4}", avg(0, 5), avg(k - 5, k));
    let h = out.history.last().unwrap();
    println!("terms at end: mask {:.4} vote {:.4} obj {:.4} box {:.4}", h.mask, h.vote, h.objectness, h.box_term);
    for e in &out.evals {
        println!("eval @step {}: S={:.4} P={:.4}", e.step, e.mean_success, e.mean_precision);
    }

    // Teacher-forced localization: predict each frame from the ground-truth
    // previous box; measures pure localization quality without drift.
    let mut tf_iou = 0.0;
    let mut tf_dist = 0.0;
    let mut count = 0;
    for s in &eval {
        let l = model.cfg.frames;
        for t in 1..s.len() {
            let mut window: Vec<&stmd_core::data::PointFrame> = Vec::new();
            for kk in 0..l {
                let idx = (t + 1 + kk).saturating_sub(l).min(t);
                window.push(&s.frames[idx]);
            }
            let prev = s.gt_boxes[t - 1];
            let pred = model.track_window(&window, &prev, s.target_size, t as u64).unwrap();
            tf_iou += iou3d(&pred, &s.gt_boxes[t]);
            tf_dist += center_distance(&pred, &s.gt_boxes[t]);
            count += 1;
        }
    }
    println!("teacher-forced: mean IoU {:.4} mean dist {:.4} over {} frames",
             tf_iou / count as f64, tf_dist / count as f64, count);

    let (s_final, p_final) = evaluate_model(&model, &eval).unwrap();
    println!("one-pass final: S={:.4} P={:.4}", s_final, p_final);
}
