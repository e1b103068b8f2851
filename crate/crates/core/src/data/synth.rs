//! Synthetic tracking episodes: a rigid target box on a smooth trajectory,
//! nearby distractor boxes, background clutter, and scheduled occlusion.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{normalize_theta, Box3D, PointFrame, ScenarioConfig, SequenceSample};
use crate::error::Result;

/// Generate one episode. Deterministic for a fixed config (the seed is part
/// of the config), with per-frame target-membership labels attached.
pub fn generate_synthetic_sequence(cfg: &ScenarioConfig) -> Result<SequenceSample> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let size = [
        rng.gen_range(cfg.target_size_range.0 .0..=cfg.target_size_range.0 .1),
        rng.gen_range(cfg.target_size_range.1 .0..=cfg.target_size_range.1 .1),
        rng.gen_range(cfg.target_size_range.2 .0..=cfg.target_size_range.2 .1),
    ];
    let speed = rng.gen_range(cfg.target_speed.0..=cfg.target_speed.1);
    let gt_boxes = target_trajectory(cfg, &mut rng, size, speed)?;
    let distractors = distractor_trajectories(cfg, &mut rng, &gt_boxes, size)?;

    let n = cfg.points_per_frame;
    let n_target_base = ((cfg.target_fraction * n as f64).round() as usize).max(1);
    let n_distractor_each = if cfg.num_distractors == 0 {
        0
    } else {
        let nominal = (0.5 * n_target_base as f64).round() as usize;
        nominal.min((n - n_target_base) / (cfg.num_distractors + 1))
    };

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for (t, gt) in gt_boxes.iter().enumerate() {
        let occ = cfg.occlusion.get(&t).copied().unwrap_or(0.0);
        let n_target = ((n_target_base as f64) * (1.0 - occ)).round() as usize;
        let n_distractor = n_distractor_each * cfg.num_distractors;
        let n_clutter = n - n_target - n_distractor;

        let mut coords = Array2::zeros((n, 3));
        let mut mask = vec![false; n];
        let mut row = 0;
        for _ in 0..n_target {
            let p = sample_shell_point(&mut rng, gt, cfg.noise_sigma);
            coords.row_mut(row).assign(&ndarray::arr1(&p));
            mask[row] = true;
            row += 1;
        }
        for d in &distractors {
            for _ in 0..n_distractor_each {
                let p = sample_shell_point(&mut rng, &d[t], cfg.noise_sigma);
                coords.row_mut(row).assign(&ndarray::arr1(&p));
                row += 1;
            }
        }
        for _ in 0..n_clutter {
            let p = [
                gt.center[0] + rng.gen_range(-6.0..6.0),
                gt.center[1] + rng.gen_range(-6.0..6.0),
                gt.center[2] + rng.gen_range(-1.5..1.5),
            ];
            coords.row_mut(row).assign(&ndarray::arr1(&p));
            row += 1;
        }
        debug_assert_eq!(row, n);
        frames.push(PointFrame::new(coords, None, t)?);
        masks.push(mask);
    }

    let sample = SequenceSample {
        frames,
        gt_boxes,
        target_size: size,
        target_mask: Some(masks),
    };
    sample.validate()?;
    Ok(sample)
}

fn target_trajectory(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha12Rng,
    size: [f64; 3],
    speed: f64,
) -> Result<Vec<Box3D>> {
    let mut heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let mut center = [0.0, 0.0, size[2] / 2.0];
    let mut boxes = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        boxes.push(Box3D::new(center, size, heading)?);
        heading = normalize_theta(heading + rng.gen_range(-0.08..0.08));
        center[0] += speed * heading.cos();
        center[1] += speed * heading.sin();
        center[2] += rng.gen_range(-0.01..0.01);
    }
    Ok(boxes)
}

fn distractor_trajectories(
    cfg: &ScenarioConfig,
    rng: &mut ChaCha12Rng,
    gt: &[Box3D],
    target_size: [f64; 3],
) -> Result<Vec<Vec<Box3D>>> {
    let mut all = Vec::with_capacity(cfg.num_distractors);
    for _ in 0..cfg.num_distractors {
        let size = [
            (target_size[0] * rng.gen_range(0.85..1.15)).max(0.2),
            (target_size[1] * rng.gen_range(0.85..1.15)).max(0.2),
            (target_size[2] * rng.gen_range(0.85..1.15)).max(0.2),
        ];
        let gap = cfg.distractor_min_gap;
        let mut dist = rng.gen_range(gap..gap + 2.5);
        let mut bearing = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mut heading = normalize_theta(gt[0].theta + rng.gen_range(-0.4..0.4));
        let mut traj = Vec::with_capacity(gt.len());
        for g in gt {
            let center = [
                g.center[0] + dist * bearing.cos(),
                g.center[1] + dist * bearing.sin(),
                g.center[2],
            ];
            traj.push(Box3D::new(center, size, heading)?);
            // Drift around the target while honoring the minimum gap.
            dist = (dist + rng.gen_range(-0.15..0.15)).max(gap);
            bearing = normalize_theta(bearing + rng.gen_range(-0.06..0.06));
            heading = normalize_theta(heading + rng.gen_range(-0.08..0.08));
        }
        all.push(traj);
    }
    Ok(all)
}

/// Sample one surface point on a box shell with truncated Gaussian noise
/// (each local component clamped to 3 sigma, so labeled points stay inside
/// the 3-sigma-dilated box).
fn sample_shell_point(rng: &mut ChaCha12Rng, b: &Box3D, sigma: f64) -> [f64; 3] {
    let (w, l, h) = (b.size[0], b.size[1], b.size[2]);
    // Face areas: +-x span w*h, +-y span l*h, +-z span l*w.
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 0;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let u = rng.gen_range(-0.5..0.5);
    let v = rng.gen_range(-0.5..0.5);
    let local = match face {
        0 => [l / 2.0, u * w, v * h],
        1 => [-l / 2.0, u * w, v * h],
        2 => [u * l, w / 2.0, v * h],
        3 => [u * l, -w / 2.0, v * h],
        4 => [u * l, v * w, h / 2.0],
        _ => [u * l, v * w, -h / 2.0],
    };
    let noisy = [
        local[0] + trunc_normal(rng, sigma),
        local[1] + trunc_normal(rng, sigma),
        local[2] + trunc_normal(rng, sigma),
    ];
    b.local_to_world(noisy)
}

fn trunc_normal(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    let raw: f64 = StandardNormal.sample(rng);
    (raw * sigma).clamp(-3.0 * sigma, 3.0 * sigma)
}
