use std::time::Instant;
use tessella_core::augment::{AugmentationConfig, TileF};
use tessella_core::encoder::{Encoder, EncoderConfig};
use tessella_core::slide::{generate_synthetic_slide, read_tile, SyntheticSlideSpec, TileRef, TileImage, LABEL_LESION, LABEL_TISSUE};
use tessella_core::ssl::*;
use tessella_core::tensor::ParamSet;

fn labeled_tiles(n_per_class: usize, size: usize) -> (Vec<TileImage>, Vec<u8>) {
    let mut tiles = Vec::new();
    let mut labels = Vec::new();
    let mut ss = 0u64;
    let dim = 1792usize; // 8x8 tiles of 224
    while tiles.len() < 2 * n_per_class {
        let spec = SyntheticSlideSpec { width: dim, height: dim, tissue_fraction: 1.0,
            lesion_present: true, lesion_fraction_of_tissue: 0.5,
            texture_seed: ss, ..Default::default() };
        let slide = generate_synthetic_slide(&spec, 500 + ss).unwrap();
        let mask = slide.label_mask.clone().unwrap();
        for row in 0..dim / size { for col in 0..dim / size {
            let (x, y) = (col * size, row * size);
            let mut counts = [0usize; 3];
            for yy in (y..y + size).step_by(4) { for xx in (x..x + size).step_by(4) {
                counts[mask[yy * dim + xx] as usize] += 1;
            }}
            let total: usize = counts.iter().sum();
            let want = if counts[LABEL_LESION as usize] == total { Some(1u8) }
                else if counts[LABEL_TISSUE as usize] == total { Some(0u8) } else { None };
            if let Some(lbl) = want {
                let n1 = labels.iter().filter(|&&l| l == 1).count();
                let n0 = labels.len() - n1;
                if (lbl == 1 && n1 < n_per_class) || (lbl == 0 && n0 < n_per_class) {
                    let r = TileRef { row, col, x, y, tissue_frac: 1.0, lesion_frac: 0.0 };
                    tiles.push(read_tile(&slide, &r, size).unwrap());
                    labels.push(lbl);
                }
            }
        }}
        ss += 1;
    }
    (tiles, labels)
}

fn lda_auc(enc: &Encoder, ps: &ParamSet<f32>, tiles: &[TileImage], labels: &[u8]) -> f64 {
    let d = enc.cfg.feature_dim;
    let mut feats: Vec<Vec<f32>> = Vec::new();
    for chunk in tiles.chunks(32) {
        let views: Vec<TileF> = chunk.iter().map(TileF::from_u8).collect();
        let f = enc.encode(ps, &views).unwrap();
        for r in 0..chunk.len() { feats.push(f.data()[r*d..(r+1)*d].to_vec()); }
    }
    let mut mean1 = vec![0.0f64; d]; let mut mean0 = vec![0.0f64; d];
    let n1 = labels.iter().filter(|&&l| l == 1).count();
    let n0 = labels.len() - n1;
    for (f, &l) in feats.iter().zip(labels) {
        let m = if l == 1 { &mut mean1 } else { &mut mean0 };
        for j in 0..d { m[j] += f[j] as f64; }
    }
    for j in 0..d { mean1[j] /= n1 as f64; mean0[j] /= n0 as f64; }
    let scores: Vec<f64> = feats.iter().map(|f| (0..d).map(|j| f[j] as f64 * (mean1[j] - mean0[j])).sum()).collect();
    let mut wins = 0.0f64;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 { continue; }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 { continue; }
            wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
        }
    }
    wins / (n1 as f64 * n0 as f64)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let tau: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);

    let t0 = Instant::now();
    let (tiles, labels) = labeled_tiles(450, 224);
    println!("corpus: {} tiles in {:.1}s", tiles.len(), t0.elapsed().as_secs_f64());
    let cfg = EncoderConfig {
        stage_channels: vec![8, 16, 32], blocks_per_stage: 2, feature_dim: 64,
        projection_dim: 32, input_size: 224, ..Default::default()
    };
    let enc = Encoder::new(cfg).unwrap();
    let random_ps = enc.init::<f32>(7);
    let t0 = Instant::now();
    println!("random LDA AUC: {:.4} ({:.1}s)", lda_auc(&enc, &random_ps, &tiles, &labels), t0.elapsed().as_secs_f64());

    let aug = AugmentationConfig::default();
    let moco = MoCoConfig { queue_size: 256, batch_size: 32, epochs, temperature: tau,
        lars: LarsConfig { lr, ..Default::default() }, ..Default::default() };
    let t0 = Instant::now();
    let mut state = MoCoState::init(&enc, &moco, 42).unwrap();
    let total = total_steps(tiles.len(), &moco).unwrap();
    let mut next = 0u64;
    while next < total {
        next = (next + 150).min(total);
        train_until(&mut state, &tiles, &enc, &aug, &moco, 42, next).unwrap();
        let last: Vec<f64> = state.history.iter().rev().take(30).map(|r| r.loss).collect();
        let lmean = last.iter().sum::<f64>() / last.len() as f64;
        println!("step {:5} loss {lmean:.4} LDA AUC {:.4} ({:.0}s)",
            state.step, lda_auc(&enc, &state.query, &tiles, &labels), t0.elapsed().as_secs_f64());
    }
}
