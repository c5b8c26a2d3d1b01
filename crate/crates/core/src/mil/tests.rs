use super::*;
use crate::features::TileCoord;
use crate::tensor::grad_check;

fn fm(slide_id: &str, dim: usize, rows: Vec<Vec<f32>>) -> FeatureMatrix {
    let n = rows.len();
    FeatureMatrix {
        slide_id: slide_id.into(),
        dim,
        coords: (0..n)
            .map(|i| TileCoord { row: 0, col: i as u32, x: (i * 224) as u32, y: 0 })
            .collect(),
        data: rows.concat(),
        fingerprint: [1u8; 32],
    }
}

fn random_fm(slide_id: &str, n: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = Rng::from_seed(seed);
    fm(slide_id, dim, (0..n).map(|_| (0..dim).map(|_| rng.normal_f64() as f32).collect()).collect())
}

fn zero_params(kind: HeadKind, dim: usize, cfg: &MilTrainConfig) -> ParamSet<f32> {
    let mut ps = init_head::<f32>(kind, dim, cfg, 1);
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    for name in names {
        let shape = ps.get(&name).unwrap().shape().to_vec();
        ps.set(&name, Tensor::zeros(&shape)).unwrap();
    }
    ps
}

// -- extreme scores ---------------------------------------------------------

#[test]
fn extreme_scores_r2_case() {
    let scores = [0.9f32, -0.5, 0.3, 0.1, -0.2, 0.7];
    let (vals, idx) = extreme_scores(&scores, 2).unwrap();
    assert_eq!(vals, vec![0.9, 0.7, -0.5, -0.2]);
    assert_eq!(idx, vec![0, 5, 1, 4]);
}

#[test]
fn extreme_scores_all_equal() {
    let scores = [0.4f32; 7];
    let (vals, idx) = extreme_scores(&scores, 3).unwrap();
    assert_eq!(vals, vec![0.4; 6]);
    // disjoint index sets, ties resolved toward lower indices
    let set: std::collections::HashSet<usize> = idx.iter().copied().collect();
    assert_eq!(set.len(), 6);
    assert_eq!(&idx[..3], &[0, 1, 2]);
    assert_eq!(&idx[3..], &[3, 4, 5]);
}

#[test]
fn extreme_scores_boundary_and_rejection() {
    let scores = [3.0f32, 1.0, 2.0, 0.0];
    let (vals, _) = extreme_scores(&scores, 2).unwrap();
    assert_eq!(vals, vec![3.0, 2.0, 0.0, 1.0]);
    assert!(extreme_scores(&scores, 3).is_err());
}

#[test]
fn extreme_scores_matches_sort_oracle() {
    let mut rng = Rng::from_seed(5);
    for _ in 0..1000 {
        let n = 2 + rng.below(30);
        let r = 1 + rng.below(n / 2);
        // coarse grid so ties happen often
        let scores: Vec<f32> = (0..n).map(|_| (rng.below(6) as f32) * 0.25).collect();

        // oracle: stable sort of (value, index)
        let mut by_desc: Vec<usize> = (0..n).collect();
        by_desc.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
        });
        let top: Vec<usize> = by_desc[..r].to_vec();
        let mut rest: Vec<usize> = by_desc[r..].to_vec();
        rest.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        let bottom: Vec<usize> = rest[..r].to_vec();

        let (_, idx) = extreme_scores(&scores, r).unwrap();
        assert_eq!(&idx[..r], &top[..]);
        assert_eq!(&idx[r..], &bottom[..]);
    }
}

// -- head forward contracts ---------------------------------------------------

#[test]
fn weldon_hand_case_sigma_of_mean_extremes() {
    // identity scorer: score = the single feature
    let cfg = MilTrainConfig { r: 2, ..Default::default() };
    let mut ps: ParamSet<f32> = ParamSet::new();
    let mut w1 = Tensor::zeros(&[1, 128]);
    w1.data_mut()[0] = 1.0;
    ps.insert_param("scorer.fc1.w", w1).unwrap();
    ps.insert_param("scorer.fc1.b", Tensor::zeros(&[128])).unwrap();
    let mut w2 = Tensor::zeros(&[128, 1]);
    w2.data_mut()[0] = 1.0;
    ps.insert_param("scorer.fc2.w", w2).unwrap();
    ps.insert_param("scorer.fc2.b", Tensor::zeros(&[1])).unwrap();
    let model = MilModel {
        kind: HeadKind::Weldon,
        num_classes: 2,
        r: 2,
        feature_dim: 1,
        params: ps,
        config: cfg,
    };
    let bag = fm("b", 1, vec![vec![0.9], vec![-0.5], vec![0.3], vec![0.1], vec![-0.2], vec![0.7]]);
    let pred = predict(&model, &bag).unwrap();
    // extremes {0.9, 0.7, -0.5, -0.2} average 0.225
    let want = 1.0 / (1.0 + (-0.225f64).exp());
    assert!((pred.positive() as f64 - want).abs() < 1e-6, "{} vs {want}", pred.positive());
}

#[test]
fn zero_initialized_heads_output_half() {
    let cfg = MilTrainConfig::default();
    let bag = random_fm("b", 20, 16, 3);
    for kind in [HeadKind::Weldon, HeadKind::Chowder, HeadKind::DeepMil] {
        let model = MilModel {
            kind,
            num_classes: 2,
            r: cfg.r,
            feature_dim: 16,
            params: zero_params(kind, 16, &cfg),
            config: cfg.clone(),
        };
        let pred = predict(&model, &bag).unwrap();
        assert_eq!(pred.positive(), 0.5, "{kind:?}");
    }
}

#[test]
fn weldon_identical_tiles_gives_sigma_of_score() {
    let cfg = MilTrainConfig::default();
    let params = init_head::<f32>(HeadKind::Weldon, 8, &cfg, 9);
    let model = MilModel {
        kind: HeadKind::Weldon,
        num_classes: 2,
        r: cfg.r,
        feature_dim: 8,
        params,
        config: cfg,
    };
    let row: Vec<f32> = (0..8).map(|i| 0.2 * i as f32 - 0.7).collect();
    let bag = fm("b", 8, vec![row.clone(); 12]);
    let pred = predict(&model, &bag).unwrap();
    // single-tile bag of the same row: same score everywhere
    let one = fm("one", 8, vec![row; 2]);
    let pred_one = predict(&model, &one).unwrap();
    assert!((pred.positive() - pred_one.positive()).abs() < 1e-6);
}

#[test]
fn deepmil_equal_tiles_attention_uniform() {
    let cfg = MilTrainConfig::default();
    let params = init_head::<f32>(HeadKind::DeepMil, 8, &cfg, 4);
    let model = MilModel {
        kind: HeadKind::DeepMil,
        num_classes: 2,
        r: cfg.r,
        feature_dim: 8,
        params,
        config: cfg,
    };
    let row: Vec<f32> = (0..8).map(|i| (i as f32) * 0.1).collect();
    let n = 7;
    let bag = fm("b", 8, vec![row; n]);
    let w = attention_weights(&model, &bag).unwrap();
    assert_eq!(w.len(), n);
    for &wi in &w {
        assert!((wi - 1.0 / n as f32).abs() < 1e-6);
    }
    let s: f32 = w.iter().sum();
    assert!((s - 1.0).abs() < 1e-6);
}

#[test]
fn deepmil_singleton_bag() {
    let cfg = MilTrainConfig::default();
    let params = init_head::<f32>(HeadKind::DeepMil, 8, &cfg, 5);
    let model = MilModel {
        kind: HeadKind::DeepMil,
        num_classes: 2,
        r: cfg.r,
        feature_dim: 8,
        params,
        config: cfg,
    };
    let bag = random_fm("b", 1, 8, 6);
    let w = attention_weights(&model, &bag).unwrap();
    assert_eq!(w, vec![1.0]);
    assert!(predict(&model, &bag).is_ok());
}

#[test]
fn deepmil_two_tile_bag_matches_scalar_reimplementation() {
    let cfg = MilTrainConfig::default();
    let params = init_head::<f32>(HeadKind::DeepMil, 4, &cfg, 11);
    let model = MilModel {
        kind: HeadKind::DeepMil,
        num_classes: 2,
        r: cfg.r,
        feature_dim: 4,
        params: params.clone(),
        config: cfg,
    };
    let rows = vec![vec![0.3f32, -0.2, 0.8, 0.05], vec![-0.6, 0.4, 0.0, 1.1]];
    let bag = fm("b", 4, rows.clone());
    let pred = predict(&model, &bag).unwrap();

    // independent scalar evaluation of the layer table
    let get = |n: &str| params.get(n).unwrap();
    let matvec = |x: &[f64], w: &Tensor<f32>, b: &Tensor<f32>| -> Vec<f64> {
        let (fi, fo) = (w.shape()[0], w.shape()[1]);
        (0..fo)
            .map(|j| {
                (0..fi).map(|i| x[i] * w.data()[i * fo + j] as f64).sum::<f64>()
                    + b.data()[j] as f64
            })
            .collect()
    };
    let h: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let x: Vec<f64> = r.iter().map(|&v| v as f64).collect();
            matvec(&x, get("embed.w"), get("embed.b"))
        })
        .collect();
    let mut att = Vec::new();
    for hi in &h {
        let a1: Vec<f64> =
            matvec(hi, get("att.v.w"), get("att.v.b")).iter().map(|v| v.tanh()).collect();
        let a2: Vec<f64> = matvec(hi, get("att.u.w"), get("att.u.b"))
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let gated: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x * y).collect();
        att.push(matvec(&gated, get("att.w.w"), get("att.w.b"))[0]);
    }
    let m = att[0].max(att[1]);
    let e: Vec<f64> = att.iter().map(|&a| (a - m).exp()).collect();
    let denom: f64 = e.iter().sum();
    let a: Vec<f64> = e.iter().map(|&x| x / denom).collect();
    let pooled: Vec<f64> = (0..128).map(|j| a[0] * h[0][j] + a[1] * h[1][j]).collect();
    let z1: Vec<f64> =
        matvec(&pooled, get("clf.fc1.w"), get("clf.fc1.b")).iter().map(|v| v.max(0.0)).collect();
    let z2: Vec<f64> =
        matvec(&z1, get("clf.fc2.w"), get("clf.fc2.b")).iter().map(|v| v.max(0.0)).collect();
    let logit = matvec(&z2, get("clf.fc3.w"), get("clf.fc3.b"))[0];
    let want = 1.0 / (1.0 + (-logit).exp());
    assert!((pred.positive() as f64 - want).abs() < 1e-6, "{} vs {want}", pred.positive());
}

#[test]
fn heads_are_permutation_invariant_bitwise() {
    let cfg = MilTrainConfig::default();
    let mut rng = Rng::from_seed(31);
    for kind in [HeadKind::Weldon, HeadKind::Chowder, HeadKind::DeepMil] {
        let params = init_head::<f32>(kind, 12, &cfg, 21);
        let model = MilModel {
            kind,
            num_classes: 2,
            r: cfg.r,
            feature_dim: 12,
            params,
            config: cfg.clone(),
        };
        let bag = random_fm("b", 24, 12, 77);
        let base = predict(&model, &bag).unwrap();
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..24).collect();
            rng.shuffle(&mut perm);
            let rows: Vec<Vec<f32>> = perm.iter().map(|&i| bag.row(i).to_vec()).collect();
            let shuffled = fm("b", 12, rows);
            let p = predict(&model, &shuffled).unwrap();
            assert_eq!(
                base.positive().to_bits(),
                p.positive().to_bits(),
                "{kind:?} changed under permutation"
            );
        }
    }
}

#[test]
fn chowder_gradients_match_finite_differences() {
    let cfg = MilTrainConfig::default();
    let params: ParamSet<f64> = init_head(HeadKind::Chowder, 16, &cfg, 13);
    let bag = random_fm("b", 20, 16, 14);
    let feats = Tensor::new(vec![20, 16], bag.data.iter().map(|&v| v as f64).collect()).unwrap();
    let mut hf = forward_head(HeadKind::Chowder, &params, &feats, &cfg, Some(1), false).unwrap();
    let loss = hf.loss.unwrap();
    let report = grad_check(&mut hf.graph, loss, &[], BnMode::Eval, 1e-4).unwrap();
    assert!(report.all_pass(), "max rel err {:.3e}", report.max_rel_err());
}

#[test]
fn multiclass_probabilities_sum_to_one() {
    let cfg = MilTrainConfig { num_classes: 4, ..Default::default() };
    for kind in [HeadKind::Weldon, HeadKind::Chowder, HeadKind::DeepMil] {
        let params = init_head::<f32>(kind, 12, &cfg, 31);
        let model = MilModel {
            kind,
            num_classes: 4,
            r: cfg.r,
            feature_dim: 12,
            params,
            config: cfg.clone(),
        };
        let bag = random_fm("b", 15, 12, 32);
        let pred = predict(&model, &bag).unwrap();
        assert_eq!(pred.probs.len(), 4);
        let s: f32 = pred.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-6, "{kind:?} sums to {s}");
    }
}

#[test]
fn deepmil_duplicated_bag_same_prediction() {
    let cfg = MilTrainConfig::default();
    let params = init_head::<f32>(HeadKind::DeepMil, 8, &cfg, 41);
    let model = MilModel {
        kind: HeadKind::DeepMil,
        num_classes: 2,
        r: cfg.r,
        feature_dim: 8,
        params,
        config: cfg,
    };
    let bag = random_fm("b", 9, 8, 42);
    let doubled_rows: Vec<Vec<f32>> =
        (0..18).map(|i| bag.row(i % 9).to_vec()).collect();
    let doubled = fm("b2", 8, doubled_rows);
    let a = predict(&model, &bag).unwrap();
    let b = predict(&model, &doubled).unwrap();
    assert!((a.positive() - b.positive()).abs() < 1e-6);
}

#[test]
fn small_bag_shrinks_r_at_inference_only() {
    let cfg = MilTrainConfig::default(); // r = 5
    let params = init_head::<f32>(HeadKind::Weldon, 8, &cfg, 51);
    let model = MilModel {
        kind: HeadKind::Weldon,
        num_classes: 2,
        r: 5,
        feature_dim: 8,
        params,
        config: cfg.clone(),
    };
    let tiny = random_fm("tiny", 4, 8, 52);
    let pred = predict(&model, &tiny).unwrap();
    assert_eq!(pred.shrunk_r, Some(2));

    // training rejects the same bag
    let bags = [Bag { features: &tiny, label: 0 }];
    assert!(train_mil(HeadKind::Weldon, &bags, &cfg, 1).is_err());
}

// -- training ----------------------------------------------------------------

/// Positive bags carry a few rows of a distinctive pattern.
fn separable_bags(n_bags: usize, dim: usize, seed: u64) -> Vec<FeatureMatrix> {
    let mut rng = Rng::from_seed(seed);
    (0..n_bags)
        .map(|b| {
            let positive = b % 2 == 1;
            let rows: Vec<Vec<f32>> = (0..24)
                .map(|i| {
                    let mut row: Vec<f32> =
                        (0..dim).map(|_| rng.normal_f64() as f32 * 0.3).collect();
                    if positive && i < 6 {
                        row[0] += 4.0;
                        row[1] -= 4.0;
                    }
                    row
                })
                .collect();
            fm(&format!("bag{b}"), dim, rows)
        })
        .collect()
}

#[test]
fn separable_features_reach_low_training_loss() {
    let mats = separable_bags(240, 8, 61);
    let bags: Vec<Bag> = mats
        .iter()
        .enumerate()
        .map(|(i, m)| Bag { features: m, label: (i % 2) as u32 })
        .collect();
    for kind in [HeadKind::Weldon, HeadKind::Chowder, HeadKind::DeepMil] {
        let (_, losses) = train_mil(kind, &bags, &MilTrainConfig::default(), 7).unwrap();
        let last = *losses.last().unwrap();
        assert!(last < 0.1, "{kind:?} final loss {last}");
    }
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_init() {
    let mats = separable_bags(12, 8, 62);
    let bags: Vec<Bag> = mats
        .iter()
        .enumerate()
        .map(|(i, m)| Bag { features: m, label: (i % 2) as u32 })
        .collect();
    let cfg = MilTrainConfig { epochs: 3, ..Default::default() };
    let (a, _) = train_mil(HeadKind::Chowder, &bags, &cfg, 5).unwrap();
    let (b, _) = train_mil(HeadKind::Chowder, &bags, &cfg, 5).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());

    let zero_cfg = MilTrainConfig { epochs: 0, ..Default::default() };
    let (m0, losses) = train_mil(HeadKind::Chowder, &bags, &zero_cfg, 5).unwrap();
    assert!(losses.is_empty());
    let init: ParamSet<f32> = init_head(HeadKind::Chowder, 8, &zero_cfg, 5);
    assert_eq!(m0.params.to_bytes(), init.to_bytes());
}

#[test]
fn missing_class_rejected() {
    let mats = separable_bags(6, 8, 63);
    let bags: Vec<Bag> = mats.iter().map(|m| Bag { features: m, label: 0 }).collect();
    let err = train_mil(HeadKind::Weldon, &bags, &MilTrainConfig::default(), 1).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn predict_rejects_dimension_mismatch() {
    let cfg = MilTrainConfig::default();
    let params = init_head::<f32>(HeadKind::Weldon, 8, &cfg, 71);
    let model = MilModel {
        kind: HeadKind::Weldon,
        num_classes: 2,
        r: cfg.r,
        feature_dim: 8,
        params,
        config: cfg,
    };
    let bag = random_fm("b", 12, 16, 72);
    assert!(predict(&model, &bag).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let mats = separable_bags(12, 8, 64);
    let bags: Vec<Bag> = mats
        .iter()
        .enumerate()
        .map(|(i, m)| Bag { features: m, label: (i % 2) as u32 })
        .collect();
    let cfg = MilTrainConfig { epochs: 2, ..Default::default() };
    let (model, _) = train_mil(HeadKind::DeepMil, &bags, &cfg, 9).unwrap();
    let dir = std::env::temp_dir().join("tessella_mil_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.milm");
    model.save(&path).unwrap();
    let back = MilModel::load(&path).unwrap();
    assert_eq!(back.kind, model.kind);
    assert_eq!(back.num_classes, model.num_classes);
    assert_eq!(back.r, model.r);
    assert_eq!(back.feature_dim, model.feature_dim);
    assert_eq!(back.params.to_bytes(), model.params.to_bytes());
    let bag = &mats[0];
    let a = predict(&model, bag).unwrap();
    let b = predict(&back, bag).unwrap();
    assert_eq!(a.positive().to_bits(), b.positive().to_bits());
}
