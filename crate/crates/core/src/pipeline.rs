//! End-to-end pipeline stages behind the CLI commands.
//!
//! Every stage is a pure function of (config, seed, input files); reruns
//! produce byte-identical artifacts. Stage outputs live under the config's
//! `out_dir`:
//!
//! ```text
//! slides/slide_NNNN.png     masks/slide_NNNN.png     corpus.jsonl
//! tiles.csv
//! pretrain/moco.ckpt        pretrain/encoder.tnsr    pretrain/loss.csv
//! features/<tag>/*.hfsx     features/<tag>/index.jsonl
//! train/<head>.milm         train/<head>_log.csv
//! eval/<head>_results.csv   eval/<head>_summary.txt
//! interpret/<tag>/clusters.csv, heatmaps, representatives
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::evalharness::{run_experiment, CvPlan, MetricReport, RunRecord};
use crate::features::{extract_slide_features, CorpusEntry, CorpusIndex, FeatureMatrix};
use crate::interpret;
use crate::mil::{train_mil, Bag, HeadKind, MilModel};
use crate::rng::{derive_seed_indexed, Rng};
use crate::slide::{
    detect_tissue, extract_grid, generate_abstract_slide, generate_synthetic_slide, manifest,
    png_io, read_tile, sample_tiles, CorpusManifest, SlideRaster, SlideRecord, SyntheticSlideSpec,
    TileGrid, TileImage, TileRef, LABEL_LESION,
};
use crate::ssl::{self, MoCoState};
use crate::tensor::ParamSet;

/// A tile counts as lesional when at least half its area is lesion.
pub const LESION_TILE_THRESHOLD: f32 = 0.5;

pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Workspace { root: PathBuf::from(&cfg.out_dir) }
    }

    pub fn slide_png(&self, id: &str) -> PathBuf {
        self.root.join("slides").join(format!("{id}.png"))
    }

    pub fn mask_png(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn tiles_csv(&self) -> PathBuf {
        self.root.join("tiles.csv")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn features_dir(&self, tag: &str) -> PathBuf {
        self.root.join("features").join(tag)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn interpret_dir(&self, tag: &str) -> PathBuf {
        self.root.join("interpret").join(tag)
    }
}

fn slide_id(i: usize) -> String {
    format!("slide_{i:04}")
}

/// Generate the synthetic corpus: rasters, ground-truth masks, manifest.
pub fn cmd_synth(cfg: &ExperimentConfig, force: bool) -> Result<CorpusManifest> {
    let ws = Workspace::new(cfg);
    if ws.manifest().exists() && !force {
        return Err(Error::Config(format!(
            "{} already contains a corpus; pass --force to overwrite",
            ws.root.display()
        )));
    }
    std::fs::create_dir_all(ws.root.join("slides"))?;
    std::fs::create_dir_all(ws.root.join("masks"))?;

    let n = cfg.corpus.slides;
    let n_pos = (n as f64 * cfg.corpus.positive_fraction).round() as usize;
    let mut positive = vec![false; n];
    for flag in positive.iter_mut().take(n_pos) {
        *flag = true;
    }
    let mut label_rng = Rng::stream(cfg.seed, "corpus.labels");
    label_rng.shuffle(&mut positive);

    let specs: Vec<SyntheticSlideSpec> = (0..n)
        .map(|i| {
            let mut srng = Rng::stream_indexed(cfg.seed, "corpus.slide", i as u64);
            let tissue = srng
                .range_f64(cfg.corpus.tissue_fraction_min, cfg.corpus.tissue_fraction_max);
            let lesion = if positive[i] {
                srng.range_f64(cfg.corpus.lesion_fraction_min, cfg.corpus.lesion_fraction_max)
            } else {
                0.0
            };
            SyntheticSlideSpec {
                width: cfg.corpus.width,
                height: cfg.corpus.height,
                microns_per_pixel: 0.5,
                tissue_fraction: tissue,
                lesion_present: positive[i],
                lesion_fraction_of_tissue: lesion,
                texture_seed: i as u64,
            }
        })
        .collect();

    let abstract_kind = cfg.corpus.kind == "abstract";
    let results: Vec<Result<()>> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let slide = if abstract_kind {
                generate_abstract_slide(spec, cfg.seed)?
            } else {
                generate_synthetic_slide(spec, cfg.seed)?
            };
            let id = slide_id(i);
            png_io::write_rgb(&ws.slide_png(&id), slide.width, slide.height, &slide.pixels)?;
            png_io::write_mask(
                &ws.mask_png(&id),
                slide.width,
                slide.height,
                slide.label_mask.as_ref().unwrap(),
            )?;
            Ok(())
        })
        .collect();
    results.into_iter().collect::<Result<Vec<_>>>()?;

    let manifest = CorpusManifest {
        slides: (0..n)
            .map(|i| {
                let id = slide_id(i);
                SlideRecord {
                    slide_id: id.clone(),
                    raster_path: format!("slides/{id}.png"),
                    mask_path: Some(format!("masks/{id}.png")),
                    label: u32::from(positive[i]),
                    split_hint: None,
                }
            })
            .collect(),
    };
    manifest.save(&ws.manifest())?;
    Ok(manifest)
}

pub fn load_raster(ws: &Workspace, rec: &SlideRecord) -> Result<SlideRaster> {
    let (w, h, pixels) = png_io::read_rgb(&ws.root.join(&rec.raster_path))?;
    let label_mask = match &rec.mask_path {
        None => None,
        Some(p) => {
            let (mw, mh, mask) = png_io::read_mask(&ws.root.join(p))?;
            if (mw, mh) != (w, h) {
                return Err(Error::Data(format!(
                    "{}: mask {mw}x{mh} does not match raster {w}x{h}",
                    rec.slide_id
                )));
            }
            Some(mask)
        }
    };
    SlideRaster::new(w, h, 0.5, pixels, label_mask)
}

/// Detect tissue, build the tile grid, apply the per-slide cap, and write
/// one `tiles.csv` covering the whole corpus.
pub fn cmd_tile(cfg: &ExperimentConfig) -> Result<usize> {
    let ws = Workspace::new(cfg);
    let man = CorpusManifest::load(&ws.manifest())?;

    let grids: Vec<Result<TileGrid>> = man
        .slides
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let raster = load_raster(&ws, rec)?;
            let mask = detect_tissue(&raster);
            let grid = extract_grid(&raster, &mask, cfg.tiling.tile_size, cfg.tiling.min_tissue_fraction)?;
            let capped = sample_tiles(
                &grid,
                cfg.tiling.max_tiles_per_slide,
                derive_seed_indexed(cfg.seed, "tile.sample", i as u64),
            );
            // slide label consistency: positive <=> some tile carries lesion
            let has_lesion = capped.tiles.iter().any(|t| t.lesion_frac > 0.0);
            if has_lesion != (rec.label == 1) {
                return Err(Error::Data(format!(
                    "{}: label {} inconsistent with retained tiles (lesion present: {has_lesion})",
                    rec.slide_id, rec.label
                )));
            }
            Ok(capped)
        })
        .collect();

    let mut total = 0usize;
    let mut out = Vec::new();
    manifest::write_tile_csv_header(&mut out)?;
    for (rec, grid) in man.slides.iter().zip(grids) {
        let grid = grid?;
        total += grid.tiles.len();
        manifest::write_tile_csv(&mut out, &rec.slide_id, &grid)?;
    }
    std::fs::write(ws.tiles_csv(), out)?;
    Ok(total)
}

/// Reload per-slide grids from `tiles.csv` (tile order preserved).
pub fn load_grids(cfg: &ExperimentConfig) -> Result<(CorpusManifest, Vec<TileGrid>)> {
    let ws = Workspace::new(cfg);
    let man = CorpusManifest::load(&ws.manifest())?;
    let rows = manifest::read_tile_csv(&ws.tiles_csv())?;
    let mut by_slide: BTreeMap<&str, Vec<TileRef>> = BTreeMap::new();
    for (id, tile) in &rows {
        by_slide.entry(id.as_str()).or_default().push(*tile);
    }
    let grids = man
        .slides
        .iter()
        .map(|rec| TileGrid {
            tile_size: cfg.tiling.tile_size,
            stride: cfg.tiling.tile_size,
            grid_rows: cfg.corpus.height / cfg.tiling.tile_size,
            grid_cols: cfg.corpus.width / cfg.tiling.tile_size,
            tiles: by_slide.remove(rec.slide_id.as_str()).unwrap_or_default(),
        })
        .collect();
    Ok((man, grids))
}

/// Load the in-memory pre-training tile bank (optionally capped).
pub fn load_tile_bank(cfg: &ExperimentConfig) -> Result<Vec<TileImage>> {
    let ws = Workspace::new(cfg);
    let (man, grids) = load_grids(cfg)?;
    let total: usize = grids.iter().map(|g| g.tiles.len()).sum();
    let cap = if cfg.moco.max_pretrain_tiles == 0 {
        total
    } else {
        cfg.moco.max_pretrain_tiles.min(total)
    };
    let keep: Vec<usize> = if cap < total {
        Rng::stream(cfg.seed, "pretrain.bank").sample_indices(total, cap)
    } else {
        (0..total).collect()
    };
    let keep_set: std::collections::HashSet<usize> = keep.iter().copied().collect();

    let mut bank = Vec::with_capacity(cap);
    let mut flat = 0usize;
    for (rec, grid) in man.slides.iter().zip(&grids) {
        let wanted: Vec<&TileRef> = grid
            .tiles
            .iter()
            .filter(|_| {
                let hit = keep_set.contains(&flat);
                flat += 1;
                hit
            })
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let raster = load_raster(&ws, rec)?;
        for tile in wanted {
            bank.push(read_tile(&raster, tile, grid.tile_size)?);
        }
    }
    Ok(bank)
}

/// Pre-train (or resume) the contrastive encoder; writes the full training
/// state, the query-encoder checkpoint, and the loss history.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<MoCoState> {
    let ws = Workspace::new(cfg);
    std::fs::create_dir_all(ws.pretrain_dir())?;
    let encoder = Encoder::new(cfg.encoder.build()?)?;
    let aug = cfg.augment.build()?;
    let moco = cfg.moco.build()?;
    if moco.momentum == 1.0 {
        eprintln!("warning: EMA momentum 1.0 freezes the key encoder");
    }
    let bank = load_tile_bank(cfg)?;
    let total = ssl::total_steps(bank.len(), &moco)?;

    let ckpt = ws.pretrain_dir().join("moco.ckpt");
    let resumed = ckpt.exists();
    let mut state = if resumed {
        MoCoState::load(&ckpt)?
    } else {
        MoCoState::init(&encoder, &moco, cfg.seed)?
    };
    ssl::train_until(&mut state, &bank, &encoder, &aug, &moco, cfg.seed, total)?;
    state.save(&ckpt)?;
    state.query.save(&ws.pretrain_dir().join("encoder.tnsr"))?;
    let loss_csv = ws.pretrain_dir().join("loss.csv");
    if resumed {
        ssl::append_loss_history(&loss_csv, &state.history)?;
    } else {
        ssl::write_loss_history(&loss_csv, &state.history)?;
    }
    Ok(state)
}

/// Extract frozen features for every slide with the given encoder weights.
pub fn cmd_extract(cfg: &ExperimentConfig, encoder_path: &Path, tag: &str) -> Result<CorpusIndex> {
    let ws = Workspace::new(cfg);
    let params: ParamSet<f32> = ParamSet::load(encoder_path)?;
    let fingerprint = params.fingerprint();
    let encoder = Encoder::new(cfg.encoder.build()?)?;
    let (man, grids) = load_grids(cfg)?;
    let out_dir = ws.features_dir(tag);
    std::fs::create_dir_all(&out_dir)?;

    let mut index = CorpusIndex::default();
    for (rec, grid) in man.slides.iter().zip(&grids) {
        let raster = load_raster(&ws, rec)?;
        let fm = extract_slide_features(
            &rec.slide_id,
            &raster,
            grid,
            &encoder,
            &params,
            fingerprint,
            cfg.moco.batch_size.max(1),
        )?;
        let rel = format!("{}.hfsx", rec.slide_id);
        fm.save(&out_dir.join(&rel))?;
        index.push(
            CorpusEntry {
                slide_id: rec.slide_id.clone(),
                label: rec.label,
                path: rel,
                tile_count: fm.tile_count(),
            },
            fingerprint,
        )?;
    }
    index.save(&out_dir.join("index.jsonl"))?;
    Ok(index)
}

/// Write a randomly initialized (never trained) encoder checkpoint.
pub fn write_random_encoder(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let encoder = Encoder::new(cfg.encoder.build()?)?;
    let params: ParamSet<f32> = encoder.init(crate::rng::derive_seed(cfg.seed, "encoder.random"));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    params.save(path)
}

pub fn load_feature_corpus(cfg: &ExperimentConfig, tag: &str) -> Result<(CorpusIndex, Vec<FeatureMatrix>)> {
    let ws = Workspace::new(cfg);
    let dir = ws.features_dir(tag);
    let index = CorpusIndex::load(&dir.join("index.jsonl"))?;
    let features = index.load_features(&dir)?;
    Ok((index, features))
}

/// Train one head on the full corpus; writes the model and training log.
pub fn cmd_train(cfg: &ExperimentConfig, head: HeadKind, tag: &str) -> Result<MilModel> {
    let ws = Workspace::new(cfg);
    std::fs::create_dir_all(ws.train_dir())?;
    let (index, features) = load_feature_corpus(cfg, tag)?;
    let bags: Vec<Bag> = features
        .iter()
        .zip(&index.entries)
        .map(|(fm, e)| Bag { features: fm, label: e.label })
        .collect();
    let mil_cfg = cfg.mil.build()?;
    let (model, losses) =
        train_mil(head, &bags, &mil_cfg, crate::rng::derive_seed(cfg.seed, "mil.train"))?;
    model.save(&ws.train_dir().join(format!("{}.milm", head.as_str())))?;
    crate::mil::write_training_log(
        &ws.train_dir().join(format!("{}_log.csv", head.as_str())),
        &losses,
    )?;
    Ok(model)
}

/// Repeated k-fold evaluation; writes per-run CSV and a formatted summary.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    head: HeadKind,
    tag: &str,
) -> Result<(MetricReport, Vec<RunRecord>)> {
    let ws = Workspace::new(cfg);
    std::fs::create_dir_all(ws.eval_dir())?;
    let (index, features) = load_feature_corpus(cfg, tag)?;
    let labels: Vec<u32> = index.entries.iter().map(|e| e.label).collect();
    let plan = CvPlan {
        folds: cfg.eval.folds,
        repeats: cfg.eval.repeats,
        seed: cfg.seed,
        stratified: cfg.eval.stratified,
    };
    let mil_cfg = cfg.mil.build()?;
    let (report, records) = run_experiment(head, &features, &labels, &plan, &mil_cfg)?;
    crate::evalharness::write_results_csv(
        &ws.eval_dir().join(format!("{}_{tag}_results.csv", head.as_str())),
        &records,
    )?;
    let mut summary = String::new();
    summary.push_str(&format!(
        "head={} features={tag} folds={} repeats={} runs={}\n",
        head.as_str(),
        plan.folds,
        plan.repeats,
        report.values.len()
    ));
    summary.push_str(&format!("auc mean(std): {}\n", report.formatted()));
    if cfg.mil.num_classes > 2 {
        for (c, s) in report.formatted_per_class(cfg.mil.num_classes).iter().enumerate() {
            summary.push_str(&format!("class {c}: {s}\n"));
        }
    }
    std::fs::write(ws.eval_dir().join(format!("{}_{tag}_summary.txt", head.as_str())), &summary)?;
    Ok((report, records))
}

/// Tile-level lesion truth for a whole corpus, aligned with corpus_rows.
pub fn tile_truth(grids: &[TileGrid]) -> Vec<bool> {
    grids
        .iter()
        .flat_map(|g| g.tiles.iter().map(|t| t.lesion_frac >= LESION_TILE_THRESHOLD))
        .collect()
}

pub struct ClusterOutcome {
    pub model: interpret::ClusterModel,
    pub best: usize,
    pub aucs: Vec<f64>,
}

/// K-means the corpus features, score every cluster against tile-level
/// lesion truth, and write the report plus per-cluster representative
/// montages.
pub fn cmd_cluster(cfg: &ExperimentConfig, tag: &str) -> Result<ClusterOutcome> {
    let ws = Workspace::new(cfg);
    let out = ws.interpret_dir(tag);
    std::fs::create_dir_all(&out)?;
    let (index, features) = load_feature_corpus(cfg, tag)?;
    let (man, grids) = load_grids(cfg)?;
    if index.entries.len() != man.slides.len() {
        return Err(Error::Data("feature corpus does not match the slide manifest".into()));
    }
    let (rows, keys) = interpret::corpus_rows(&features);
    let truth_flat = tile_truth(&grids);
    if truth_flat.len() != rows.len() {
        return Err(Error::Data(format!(
            "{} tiles in grids vs {} feature rows",
            truth_flat.len(),
            rows.len()
        )));
    }
    let dim = features[0].dim;
    let model = interpret::kmeans(&rows, dim, cfg.interpret.k, crate::rng::derive_seed(cfg.seed, "kmeans"))?;

    // flatten key -> corpus-wide index for truth lookup
    let mut offset = vec![0usize; features.len()];
    let mut acc = 0;
    for (s, fm) in features.iter().enumerate() {
        offset[s] = acc;
        acc += fm.tile_count();
    }
    let truth = |k: interpret::TileKey| truth_flat[offset[k.slide] + k.tile];
    let (best, aucs) = interpret::best_cluster(&model, &rows, &keys, truth)?;
    interpret::write_cluster_report(&out.join("clusters.csv"), &aucs, &model.counts)?;

    // top representatives per cluster: montage + CSV
    let reps = interpret::top_representatives(&model, &rows, &keys, cfg.interpret.top_n);
    let mut reps_csv = String::from("cluster,rank,slide_id,tile,similarity\n");
    for (c, members) in reps.iter().enumerate() {
        let mut tiles_px = Vec::new();
        for (rank, (key, sim)) in members.iter().enumerate() {
            let rec = &man.slides[key.slide];
            let raster = load_raster(&ws, rec)?;
            let tile_ref = grids[key.slide].tiles[key.tile];
            tiles_px.push(read_tile(&raster, &tile_ref, cfg.tiling.tile_size)?);
            reps_csv.push_str(&format!(
                "{c},{rank},{},{},{:.6}\n",
                rec.slide_id, key.tile, sim
            ));
        }
        if !tiles_px.is_empty() {
            interpret::write_montage(&out.join(format!("reps_cluster_{c:02}.png")), &tiles_px)?;
        }
    }
    std::fs::write(out.join("representatives.csv"), reps_csv)?;
    Ok(ClusterOutcome { model, best, aucs })
}

/// Per-cluster similarity heatmaps for the first `heatmap_slides` slides.
pub fn cmd_heatmap(cfg: &ExperimentConfig, tag: &str) -> Result<usize> {
    let ws = Workspace::new(cfg);
    let out = ws.interpret_dir(tag);
    std::fs::create_dir_all(&out)?;
    let (_, features) = load_feature_corpus(cfg, tag)?;
    let (man, grids) = load_grids(cfg)?;
    let (rows, keys) = interpret::corpus_rows(&features);
    let dim = features[0].dim;
    let model = interpret::kmeans(&rows, dim, cfg.interpret.k, crate::rng::derive_seed(cfg.seed, "kmeans"))?;

    let n_slides = cfg.interpret.heatmap_slides.min(man.slides.len());
    let mut written = 0usize;
    for s in 0..n_slides {
        let grid = &grids[s];
        let tiles: Vec<(usize, usize)> = grid.tiles.iter().map(|t| (t.row, t.col)).collect();
        for c in 0..model.k {
            let centroid = model.centroid(c);
            let scores: Vec<f32> = (0..features[s].tile_count())
                .map(|t| {
                    let ranking_row = features[s].row(t);
                    cosine_score(ranking_row, centroid)
                })
                .collect();
            let grid_map =
                interpret::render_heatmap(grid.grid_rows, grid.grid_cols, &tiles, &scores)?;
            let base = format!("heatmap_{}_c{c:02}", man.slides[s].slide_id);
            grid_map.save_png(&out.join(format!("{base}.png")), cfg.interpret.heatmap_upscale)?;
            grid_map.save_csv(&out.join(format!("{base}.csv")))?;
            written += 1;
        }
    }
    let _ = keys;
    Ok(written)
}

fn cosine_score(row: &[f32], centroid: &[f64]) -> f32 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in row.iter().zip(centroid) {
        dot += a as f64 * b;
        na += a as f64 * a as f64;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na.sqrt() * nb.sqrt())) as f32
    }
}

/// Per-tile mask lesion fraction check used by the synth smoke tests.
pub fn mask_lesion_fraction(raster: &SlideRaster) -> f64 {
    match &raster.label_mask {
        None => 0.0,
        Some(mask) => {
            let lesion = mask.iter().filter(|&&m| m == LABEL_LESION).count();
            lesion as f64 / mask.len() as f64
        }
    }
}
