//! Feature extraction must leave encoder weights untouched: MIL training
//! operates purely on stored features, checked here by checksum.

use tessella_core::encoder::{Encoder, EncoderConfig};
use tessella_core::features::{extract_slide_features, FeatureMatrix};
use tessella_core::mil::{train_mil, Bag, HeadKind, MilTrainConfig};
use tessella_core::slide::{detect_tissue, extract_grid, generate_synthetic_slide, SyntheticSlideSpec};
use tessella_core::tensor::ParamSet;

#[test]
fn mil_training_never_mutates_encoder_params() {
    let spec = SyntheticSlideSpec {
        width: 448,
        height: 448,
        tissue_fraction: 1.0,
        lesion_present: true,
        lesion_fraction_of_tissue: 0.5,
        ..Default::default()
    };
    let enc = Encoder::new(EncoderConfig {
        stage_channels: vec![4, 8],
        blocks_per_stage: 1,
        feature_dim: 16,
        projection_dim: 8,
        input_size: 224,
        ..Default::default()
    })
    .unwrap();
    let params: ParamSet<f32> = enc.init(5);
    let checksum_before = params.fingerprint();

    let mut features: Vec<FeatureMatrix> = Vec::new();
    let mut labels = Vec::new();
    for i in 0..6u64 {
        let s = SyntheticSlideSpec {
            lesion_present: i % 2 == 1,
            lesion_fraction_of_tissue: if i % 2 == 1 { 0.5 } else { 0.0 },
            texture_seed: i,
            ..spec.clone()
        };
        let raster = generate_synthetic_slide(&s, 100 + i).unwrap();
        let mask = detect_tissue(&raster);
        let grid = extract_grid(&raster, &mask, 224, 0.5).unwrap();
        features.push(
            extract_slide_features(&format!("s{i}"), &raster, &grid, &enc, &params, checksum_before, 2)
                .unwrap(),
        );
        labels.push((i % 2) as u32);
    }

    let bags: Vec<Bag> = features
        .iter()
        .zip(&labels)
        .map(|(fm, &l)| Bag { features: fm, label: l })
        .collect();
    let cfg = MilTrainConfig { epochs: 3, batch_size: 2, r: 2, ..Default::default() };
    let (_model, _) = train_mil(HeadKind::DeepMil, &bags, &cfg, 3).unwrap();

    assert_eq!(params.fingerprint(), checksum_before, "encoder weights changed during MIL training");
}
