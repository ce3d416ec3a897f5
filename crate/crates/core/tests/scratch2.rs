//! Temporary probes (deleted before release).

use neurovit::data::{dt_labels, gen_phantom, partition_blocks, DEFAULT_DECAY};
use neurovit::model::{seg_loss, EmbedStrategy, ModelConfig, SegModel};
use neurovit::tensor::graph::Graph;
use neurovit::transfer::Checkpoint2D;
use neurovit::Tensor;

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

fn block_dice(model: &SegModel<f64>, block: &neurovit::data::Block) -> f64 {
    let logits = model.forward(&block.data.cast::<f64>()).unwrap();
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&z, &l) in logits.data().iter().zip(block.soft_label.data()) {
        let p = z > 0.0;
        let t = l >= 0.5;
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    2.0 * inter as f64 / (a + b).max(1) as f64
}

#[test]
#[ignore]
fn probe_overfit_ceiling() {
    let (vol, tree) = gen_phantom(1000, (16, 48, 48), 3, (3.0, 4.0), 0.04).unwrap();
    let labels = dt_labels(vol.shape, &tree, DEFAULT_DECAY).unwrap();
    let blocks = partition_blocks(&vol, &labels, (5, 48, 48), 50, 0.01).unwrap();
    let block = blocks
        .iter()
        .max_by(|a, b| a.foreground_ratio.partial_cmp(&b.foreground_ratio).unwrap())
        .unwrap()
        .clone();
    println!("block fg ratio {:.3}", block.foreground_ratio);
    for lr in [0.1, 0.3] {
        let mut model = SegModel::<f64>::init_random(cfg(EmbedStrategy::Center)).unwrap();
        let tr = model.train(std::slice::from_ref(&block), 2000, lr, 3).unwrap();
        println!(
            "overfit lr={lr}: loss {:.4} -> {:.4}, block dice {:.4}",
            tr[0],
            tr.last().unwrap(),
            block_dice(&model, &block)
        );
    }
}

#[test]
#[ignore]
fn probe_tubular_tokens() {
    let (vol, tree) = gen_phantom(1000, (16, 48, 48), 3, (3.0, 4.0), 0.04).unwrap();
    let labels = dt_labels(vol.shape, &tree, DEFAULT_DECAY).unwrap();
    let blocks = partition_blocks(&vol, &labels, (5, 48, 48), 50, 0.01).unwrap();
    let block = &blocks[0];
    let ck = Checkpoint2D::<f64>::synthetic(8, 3, 2, 2, 9, 77);
    let model = SegModel::from_checkpoint(&ck, cfg(EmbedStrategy::Tubular)).unwrap();

    // Token statistics straight out of the fused embedding.
    let mut g = Graph::new();
    let vars: std::collections::BTreeMap<String, _> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), g.leaf(v.clone(), true)))
        .collect();
    let bv = g.constant(block.data.cast::<f64>());
    let logits = model.forward_on(&mut g, &vars, bv).unwrap();
    let label = block.soft_label.cast::<f64>();
    let loss = seg_loss(&mut g, logits, &label).unwrap();
    g.backward(loss.total).unwrap();

    for name in [
        "embed.tube.z",
        "embed.tube.y",
        "embed.offs.z.w",
        "fuse.ln.g",
        "pos.embed",
        "block0.attn.q",
        "head.conv1.w",
        "head.out.w",
        "head.out.b",
    ] {
        let grad = g.grad(vars[name]).unwrap();
        let norm: f64 = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let pnorm: f64 = model.params[name]
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        println!("{name:16} |param|={pnorm:10.4e} |grad|={norm:10.4e}");
    }
    // Raw tubular tokens per view for anchor variation.
    let e = 8;
    let anchors = 9;
    for axis in ["z", "y", "x"] {
        let w = &model.params[&format!("embed.tube.{axis}")];
        // straight tubes: offsets zero at init
        let anchors_v = neurovit::tubular::anchor_grid(5, 48, 48);
        let mut g2 = Graph::new();
        let bv2 = g2.constant(block.data.cast::<f64>());
        let wv = g2.constant(Tensor::zeros(&[510, 5, 16, 16]));
        let biasv = g2.constant(Tensor::zeros(&[510]));
        let offs = neurovit::tubular::predict_offsets(&mut g2, bv2, wv, biasv).unwrap();
        let coords =
            neurovit::tubular::accumulate_tubes(&mut g2, offs, &anchors_v, axis.parse().unwrap())
                .unwrap();
        let wvar = g2.constant(w.clone());
        let tok =
            neurovit::tubular::embed_view_var(&mut g2, bv2, wvar, coords, anchors).unwrap();
        let t = g2.value(tok);
        let mut mins = vec![f64::INFINITY; e];
        let mut maxs = vec![f64::NEG_INFINITY; e];
        for a in 0..anchors {
            for ei in 0..e {
                mins[ei] = mins[ei].min(t.at(&[a, ei]));
                maxs[ei] = maxs[ei].max(t.at(&[a, ei]));
            }
        }
        let spread: Vec<f64> = (0..e).map(|ei| maxs[ei] - mins[ei]).collect();
        let mags: Vec<f64> = (0..e).map(|ei| maxs[ei].abs().max(mins[ei].abs())).collect();
        println!(
            "view {axis}: token spread {:?}",
            spread.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
        println!(
            "view {axis}: token magnitude {:?}",
            mags.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        );
    }
}
