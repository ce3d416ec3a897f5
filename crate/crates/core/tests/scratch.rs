//! Temporary calibration harness (deleted before release).

use std::time::Instant;

use neurovit::data::{dt_labels, gen_phantom, partition_blocks, Volume, DEFAULT_DECAY};
use neurovit::metrics::{dice, BinaryMask};
use neurovit::model::{EmbedStrategy, ModelConfig, SegModel};
use neurovit::morpho::{neuron_distance, trace, SwcTree};
use neurovit::transfer::Checkpoint2D;

fn cfg(strategy: EmbedStrategy, seed: u64) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        layers: 2,
        heads: 2,
        block_depth: 5,
        block_h: 48,
        block_w: 48,
        strategy,
        up1: 4,
        up2: 4,
        seed,
    }
}

fn phantom_suite(
    base_seed: u64,
    count: usize,
    branches: usize,
    radius: (f64, f64),
    noise: f64,
) -> Vec<(Volume, SwcTree)> {
    (0..count)
        .map(|i| gen_phantom(base_seed + i as u64, (16, 48, 48), branches, radius, noise).unwrap())
        .collect()
}

fn mean_test_dice(model: &SegModel<f64>, test: &[(Volume, SwcTree)]) -> f64 {
    let mut acc = 0.0;
    for (i, (vol, tree)) in test.iter().enumerate() {
        let labels = dt_labels(vol.shape, tree, DEFAULT_DECAY).unwrap();
        let prob = model.segment_volume(vol).unwrap();
        let gt = BinaryMask::from_volume(&labels, 0.5);
        let pred = BinaryMask::from_volume(&prob, 0.5);
        let d = dice(&pred, &gt).unwrap();
        if i == 0 && std::env::var("SLICES").is_ok() {
            let (dd, h, w) = vol.shape;
            for z in 0..dd {
                let gs = &gt.bits()[z*h*w..(z+1)*h*w];
                let ps = &pred.bits()[z*h*w..(z+1)*h*w];
                let inter = gs.iter().zip(ps).filter(|(&a,&b)| a&&b).count();
                let tot = gs.iter().filter(|&&a| a).count() + ps.iter().filter(|&&a| a).count();
                println!("  slice {z}: dice {:.3} (gt {} pred {})", 2.0*inter as f64/tot.max(1) as f64, gs.iter().filter(|&&a| a).count(), ps.iter().filter(|&&a| a).count());
            }
        }
        acc += d;
    }
    acc / test.len() as f64
}

#[test]
#[ignore]
fn calibrate() {
    let radius: (f64,f64) = { let r: f64 = std::env::var("R").ok().and_then(|v| v.parse().ok()).unwrap_or(4.0); (r - 0.5, r + 0.5) };
    let noise: f64 = std::env::var("NOISE").ok().and_then(|v| v.parse().ok()).unwrap_or(0.05);
    let branches = 3;
    let steps = 500;
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.05);

    let train = phantom_suite(1000, 10, branches, radius, noise);
    let test = phantom_suite(2000, 3, branches, radius, noise);
    let mut blocks = Vec::new();
    for (vol, tree) in &train {
        let labels = dt_labels(vol.shape, tree, DEFAULT_DECAY).unwrap();
        blocks.extend(partition_blocks(vol, &labels, (5, 48, 48), 50, std::env::var("TH").ok().and_then(|v| v.parse().ok()).unwrap_or(0.02)).unwrap());
    }
    println!("blocks: {}", blocks.len());
    let mean_fg: f64 = blocks.iter().map(|b| b.foreground_ratio).sum::<f64>() / blocks.len() as f64;
    println!("mean fg ratio: {mean_fg:.4}");

    let ck = Checkpoint2D::<f64>::synthetic(8, 3, 2, 2, 9, 77);

    let only = std::env::var("ONLY").unwrap_or_default();
    for (name, strategy, from_ck) in [
        ("random", EmbedStrategy::Center, false),
        ("average", EmbedStrategy::Average, true),
        ("center", EmbedStrategy::Center, true),
        ("tubular", EmbedStrategy::Tubular, true),
    ] {
        if !only.is_empty() && name != only {
            continue;
        }
        let t0 = Instant::now();
        let mut model = if from_ck {
            SegModel::from_checkpoint(&ck, cfg(strategy, 42)).unwrap()
        } else {
            SegModel::init_random(cfg(strategy, 42)).unwrap()
        };
        let batch: usize = std::env::var("B").ok().and_then(|v| v.parse().ok()).unwrap_or(1);
        let trace_losses = model.train_batched(&blocks, steps, lr, batch, 7).unwrap();
        let d = mean_test_dice(&model, &test);
        let first: f64 = trace_losses[..20.min(trace_losses.len())].iter().sum::<f64>() / 20.0;
        let last: f64 =
            trace_losses[trace_losses.len().saturating_sub(20)..].iter().sum::<f64>() / 20.0;
        println!(
            "{name:8} lr={lr} loss {first:.4} -> {last:.4} dice={d:.4} ({:.1}s)",
            t0.elapsed().as_secs_f64()
        );
        if std::env::var("TRACE").is_ok() {
            let pts: Vec<String> = (0..10)
                .map(|k| format!("{:.3}", trace_losses[k * steps / 10]))
                .collect();
            println!("  trace: {}", pts.join(" "));
        }

        if name == "tubular" {
            let (tube_vol, tube_tree) =
                gen_phantom(3000, (16, 48, 48), 1, (2.5, 3.2), 0.03).unwrap();
            let prob = model.segment_volume(&tube_vol).unwrap();
            match trace(&prob, 0.5, 5.0) {
                Ok(traced) => {
                    let nd = neuron_distance(&traced, &tube_tree, 2.0).unwrap();
                    println!("  model trace ESA={:.3} DSA={:.3} PDS={:.3}", nd.esa, nd.dsa, nd.pds);
                }
                Err(e) => println!("  model trace failed: {e}"),
            }
            let gt_labels = dt_labels(tube_vol.shape, &tube_tree, DEFAULT_DECAY).unwrap();
            let traced_gt = trace(&gt_labels, 0.5, 5.0).unwrap();
            let nd = neuron_distance(&traced_gt, &tube_tree, 2.0).unwrap();
            println!("  gt trace ESA={:.3} DSA={:.3} PDS={:.3}", nd.esa, nd.dsa, nd.pds);
        }
    }
}
