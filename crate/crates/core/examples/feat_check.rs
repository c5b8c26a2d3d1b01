use std::path::Path;
use tessella_core::config::ExperimentConfig;
use tessella_core::evalharness::auc;
use tessella_core::pipeline::{self, LESION_TILE_THRESHOLD};

fn main() {
    let cfg = ExperimentConfig::load(Path::new("configs/mini.toml")).unwrap();
    let (_, grids) = pipeline::load_grids(&cfg).unwrap();
    let truth: Vec<bool> = grids.iter().flat_map(|g| g.tiles.iter().map(|t| t.lesion_frac >= LESION_TILE_THRESHOLD)).collect();
    let frac_pos = truth.iter().filter(|&&b| b).count() as f64 / truth.len() as f64;
    println!("tiles {} lesion frac {:.3}", truth.len(), frac_pos);
    for tag in ["ssl", "random", "ood"] {
        let (_, features) = pipeline::load_feature_corpus(&cfg, tag).unwrap();
        let dim = features[0].dim;
        let mut rows: Vec<&[f32]> = Vec::new();
        for fm in &features { for t in 0..fm.tile_count() { rows.push(fm.row(t)); } }
        // LDA direction from class means
        let (mut m1, mut m0) = (vec![0.0f64; dim], vec![0.0f64; dim]);
        let (mut n1, mut n0) = (0.0, 0.0);
        for (r, &t) in rows.iter().zip(&truth) {
            let m = if t { &mut m1 } else { &mut m0 };
            if t { n1 += 1.0 } else { n0 += 1.0 };
            for j in 0..dim { m[j] += r[j] as f64; }
        }
        for j in 0..dim { m1[j] /= n1; m0[j] /= n0; }
        let scores: Vec<f64> = rows.iter().map(|r| (0..dim).map(|j| r[j] as f64 * (m1[j] - m0[j])).sum()).collect();
        let a = auc(&scores, &truth).unwrap();
        // per-feature spread sanity
        let std0: f64 = {
            let col: Vec<f64> = rows.iter().map(|r| r[0] as f64).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt()
        };
        println!("{tag}: tile LDA AUC {a:.4} (feat0 std {std0:.4})");

        // in-sample bag AUC: train on every bag, score the same bags
        use tessella_core::mil::{train_mil, predict, Bag, HeadKind, MilTrainConfig};
        let (index, _) = pipeline::load_feature_corpus(&cfg, tag).unwrap();
        let labels: Vec<u32> = index.entries.iter().map(|e| e.label).collect();
        for kind in [HeadKind::Weldon, HeadKind::DeepMil] {
            let bags: Vec<Bag> = features.iter().zip(&labels).map(|(fm, &l)| Bag { features: fm, label: l }).collect();
            let (model, losses) = train_mil(kind, &bags, &MilTrainConfig::default(), 7).unwrap();
            let scores: Vec<f64> = features.iter().map(|fm| predict(&model, fm).unwrap().positive() as f64).collect();
            let truth_b: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            let a = auc(&scores, &truth_b).unwrap();
            println!("  {kind:?} in-sample bag AUC {a:.4} (final loss {:.4})", losses.last().unwrap());
        }
    }
}
