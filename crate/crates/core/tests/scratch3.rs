//! Temporary probe (deleted before release).

use neurovit::data::{dt_labels, gen_phantom, partition_blocks, DEFAULT_DECAY};
use neurovit::model::{EmbedStrategy, ModelConfig, SegModel};
use neurovit::tensor::graph::Graph;
use neurovit::transfer::Checkpoint2D;

fn cfg(strategy: EmbedStrategy) -> ModelConfig {
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
        seed: 42,
    }
}

#[test]
#[ignore]
fn probe_logits() {
    let (vol, tree) = gen_phantom(1001, (16, 48, 48), 3, (3.5, 4.5), 0.08).unwrap();
    let labels = dt_labels(vol.shape, &tree, DEFAULT_DECAY).unwrap();
    let blocks = partition_blocks(&vol, &labels, (5, 48, 48), 50, 0.02).unwrap();
    let block = &blocks[blocks.len() / 2];
    let ck = Checkpoint2D::<f64>::synthetic(8, 3, 2, 2, 9, 77);

    for (name, strategy) in [
        ("center", EmbedStrategy::Center),
        ("tubular", EmbedStrategy::Tubular),
    ] {
        let model = SegModel::from_checkpoint(&ck, cfg(strategy)).unwrap();
        // Tokens entering the encoder.
        let mut g = Graph::new();
        let vars: std::collections::BTreeMap<String, _> = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), false)))
            .collect();
        let bv = g.constant(block.data.cast::<f64>());
        let logits_var = model.forward_on(&mut g, &vars, bv).unwrap();
        let logits = g.value(logits_var);
        let n = logits.numel() as f64;
        let mean: f64 = logits.data().iter().sum::<f64>() / n;
        let var: f64 = logits.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mn = logits.data().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let mx = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        println!(
            "{name:8} logits mean {mean:+.4} std {:.4} min {mn:+.4} max {mx:+.4}",
            var.sqrt()
        );

        // Token matrix spread across anchors (rows) after the embedding,
        // taken as the input to block0.ln1 minus pos embed.
        // Recompute tokens cheaply: run forward pieces.
        // (For simplicity inspect pairwise distances of final_ln rows.)
    }
}

#[test]
#[ignore]
fn probe_tubular_token_rows() {
    let (vol, tree) = gen_phantom(1001, (16, 48, 48), 3, (3.5, 4.5), 0.08).unwrap();
    let labels = dt_labels(vol.shape, &tree, DEFAULT_DECAY).unwrap();
    let blocks = partition_blocks(&vol, &labels, (5, 48, 48), 50, 0.02).unwrap();
    let block = &blocks[blocks.len() / 2];
    let ck = Checkpoint2D::<f64>::synthetic(8, 3, 2, 2, 9, 77);
    let model = SegModel::from_checkpoint(&ck, cfg(EmbedStrategy::Tubular)).unwrap();

    let anchors = neurovit::tubular::anchor_grid(5, 48, 48);
    let mut g = Graph::new();
    let bv = g.constant(block.data.cast::<f64>());
    let mut toks = Vec::new();
    for axis in neurovit::tubular::Axis::ALL {
        let wv = g.constant(model.params[&format!("embed.offs.{axis}.w")].clone());
        let biasv = g.constant(model.params[&format!("embed.offs.{axis}.b")].clone());
        let offs = neurovit::tubular::predict_offsets(&mut g, bv, wv, biasv).unwrap();
        let coords = neurovit::tubular::accumulate_tubes(&mut g, offs, &anchors, axis).unwrap();
        let kw = g.constant(model.params[&format!("embed.tube.{axis}")].clone());
        let tok = neurovit::tubular::embed_view_var(&mut g, bv, kw, coords, anchors.len()).unwrap();
        toks.push(tok);
    }
    let gamma = g.constant(model.params["fuse.ln.g"].clone());
    let beta = g.constant(model.params["fuse.ln.b"].clone());
    let fused =
        neurovit::tubular::fuse_views_var(&mut g, toks[0], toks[1], toks[2], gamma, beta, 1e-6)
            .unwrap();
    for (label, var) in [("tok_z", toks[0]), ("tok_y", toks[1]), ("tok_x", toks[2]), ("fused", fused)] {
        let t = g.value(var);
        println!("{label}:");
        for a in 0..anchors.len() {
            let row: Vec<String> = (0..8).map(|e| format!("{:+.3}", t.at(&[a, e]))).collect();
            println!("  anchor {a}: {}", row.join(" "));
        }
    }
}

#[test]
#[ignore]
fn probe_tubular_training_dynamics() {
    use neurovit::model::seg_loss;
    let mut blocks = Vec::new();
    for i in 0..10u64 {
        let (vol, tree) = gen_phantom(1000 + i, (16, 48, 48), 3, (3.5, 4.5), 0.08).unwrap();
        let labels = dt_labels(vol.shape, &tree, DEFAULT_DECAY).unwrap();
        blocks.extend(partition_blocks(&vol, &labels, (5, 48, 48), 50, 0.02).unwrap());
    }
    let ck = Checkpoint2D::<f64>::synthetic(8, 3, 2, 2, 9, 77);
    let mut model = SegModel::from_checkpoint(&ck, cfg(EmbedStrategy::Tubular)).unwrap();
    let lr = 0.1;
    let momentum = 0.9;
    let mut velocity: std::collections::BTreeMap<String, neurovit::Tensor<f64>> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), neurovit::Tensor::zeros(v.shape())))
        .collect();
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for step in 0..300 {
        let block = &blocks[rng.random_range(0..blocks.len())];
        let mut g = Graph::new();
        let vars: std::collections::BTreeMap<String, _> = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone(), true)))
            .collect();
        let bv = g.constant(block.data.cast::<f64>());
        let logits = model.forward_on(&mut g, &vars, bv).unwrap();
        let loss = seg_loss(&mut g, logits, &block.soft_label.cast()).unwrap();
        g.backward(loss.total).unwrap();
        if step % 50 == 0 {
            let lv = g.value(logits);
            let mean: f64 = lv.data().iter().sum::<f64>() / lv.numel() as f64;
            let std: f64 = (lv.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / lv.numel() as f64)
                .sqrt();
            let gn = |n: &str| {
                g.grad(vars[n])
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            };
            println!(
                "step {step:3} loss {:.4} logits {mean:+.3}±{std:.4} |g head.out.w| {:.2e} |g conv1.w| {:.2e} |g tube.z| {:.2e} |g attn.q| {:.2e} |g fuse.g| {:.2e}",
                g.value(loss.total).item().unwrap(),
                gn("head.out.w"),
                gn("head.conv1.w"),
                gn("embed.tube.z"),
                gn("block0.attn.q"),
                gn("fuse.ln.g"),
            );
        }
        for (name, var) in &vars {
            let Some(grad) = g.grad(*var) else { continue };
            let vel = velocity.get_mut(name).unwrap();
            let par = model.params.get_mut(name).unwrap();
            for ((vi, &gi), pi) in vel
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(par.data_mut().iter_mut())
            {
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}
