//! Subcommand implementations. Each one reads its prerequisites through the
//! artifact store (verifying recorded hashes), does its work, writes its
//! outputs content-addressed, and records a run manifest.

use crate::config::Config;
use crate::error::CliError;
use crate::store::{file_sha256, ArtifactStore, Manifest};
use geoplace_core::classify::{train_flat, train_hc, train_mvmf, AnyHead, FlatHead, HcHead, MvmfHead};
use geoplace_core::data::{generate_synthetic, Dataset, Split};
use geoplace_core::evaluate::{accuracy_at, format_table, AccuracyReport, EvalPair, RangeSet};
use geoplace_core::geo::GeoPoint;
use geoplace_core::hash::sha256_hex;
use geoplace_core::index::{build_background, BackgroundIndex, Embedder};
use geoplace_core::numerics::Checkpoint;
use geoplace_core::partition::{nested_snapshots, Partition};
use geoplace_core::retrieve::{train_rrm, RrmParams};
use geoplace_core::swc::{
    predict_retrieval_only, predict_swc, write_predictions, Aggregator, Prediction, SwcConfig,
};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

fn store(config: &Config) -> Result<ArtifactStore, CliError> {
    ArtifactStore::open(&config.paths.artifacts)
}

fn load_train(config: &Config) -> Result<Dataset, CliError> {
    Ok(Dataset::load(
        &config.paths.train_metadata,
        &config.paths.train_features,
        Split::Train,
    )?)
}

fn load_test(config: &Config) -> Result<Dataset, CliError> {
    Ok(Dataset::load(
        &config.paths.test_metadata,
        &config.paths.test_features,
        Split::Test,
    )?)
}

fn dataset_input_hashes(
    manifest: &mut Manifest,
    config: &Config,
    train: bool,
    test: bool,
) -> Result<(), CliError> {
    if train {
        manifest.input("train_metadata", &file_sha256(&config.paths.train_metadata)?);
        manifest.input("train_features", &file_sha256(&config.paths.train_features)?);
    }
    if test {
        manifest.input("test_metadata", &file_sha256(&config.paths.test_metadata)?);
        manifest.input("test_features", &file_sha256(&config.paths.test_features)?);
    }
    Ok(())
}

/// `geoplace synth`: generate the configured synthetic dataset files.
pub fn cmd_synth(config: &Config) -> Result<(), CliError> {
    let started = Instant::now();
    let spec = config.synthetic.spec(config.seed);
    let (train, test) = generate_synthetic(&spec)?;
    train.save(&config.paths.train_metadata, &config.paths.train_features)?;
    test.save(&config.paths.test_metadata, &config.paths.test_features)?;
    println!(
        "synth: {} train / {} test images, dim {} (seed {})",
        train.len(),
        test.len(),
        train.dim(),
        config.seed
    );
    let st = store(config)?;
    let mut manifest = Manifest::new("synth", config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, true, true)?; // outputs double as inputs downstream
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("synth", &manifest)?;
    Ok(())
}

/// `geoplace partition`: one greedy run, three nested snapshots.
pub fn cmd_partition(config: &Config) -> Result<(), CliError> {
    let started = Instant::now();
    let train = load_train(config)?;
    let images: Vec<(u64, GeoPoint)> = train
        .ids
        .iter()
        .zip(train.locations.iter())
        .map(|(&id, &loc)| (id, loc))
        .collect();
    let p = &config.partition;
    let (coarse, mid, fine) =
        nested_snapshots(&images, (p.coarse, p.mid, p.fine), p.min_split_size)?;
    let st = store(config)?;
    let mut manifest = Manifest::new("partition", config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, true, false)?;
    for (name, part) in [("coarse", &coarse), ("mid", &mid), ("fine", &fine)] {
        let bytes = part.to_bytes();
        let (path, hash) = st.write(&format!("partition-{name}"), "gprt", &bytes)?;
        manifest.artifact(name, &path, &hash);
        println!(
            "partition {name}: {} leaves -> {}",
            part.leaf_count(),
            path.display()
        );
    }
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("partition", &manifest)?;
    Ok(())
}

pub fn load_partition(st: &ArtifactStore, name: &str) -> Result<(Partition, String), CliError> {
    let (_, bytes, hash) = st.resolve("partition", name)?;
    Ok((Partition::from_bytes(&bytes)?, hash))
}

/// `geoplace train-classifier`: train the configured head kind.
pub fn cmd_train_classifier(config: &Config) -> Result<(), CliError> {
    let started = Instant::now();
    config.classifier.validate_kind()?;
    let train = load_train(config)?;
    let st = store(config)?;
    let (fine, fine_hash) = load_partition(&st, "fine")?;
    let train_cfg = config.classifier.train_config(config.seed)?;

    let (head, curve): (AnyHead, Vec<f64>) = match config.classifier.kind.as_str() {
        "flat" => {
            let (h, c) = train_flat(&train, &fine, &train_cfg)?;
            (AnyHead::Flat(h), c)
        }
        "hc" => {
            let (coarse, _) = load_partition(&st, "coarse")?;
            let (mid, _) = load_partition(&st, "mid")?;
            let (h, c) = train_hc(&train, &coarse, &mid, &fine, &train_cfg)?;
            (AnyHead::Hc(h), c)
        }
        "mvmf" => {
            let (flat, _) = train_flat(&train, &fine, &train_cfg)?;
            let (h, c) = train_mvmf(&train, &fine, &flat, &train_cfg)?;
            (AnyHead::Mvmf(h), c)
        }
        _ => unreachable!("validated above"),
    };

    let bytes = head.to_checkpoint().to_bytes();
    let (path, hash) = st.write("classifier", "gpnn", &bytes)?;
    println!(
        "classifier ({}): {} epochs, final loss {:.6} -> {}",
        config.classifier.kind,
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    let mut manifest = Manifest::new("train-classifier", config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, true, false)?;
    manifest.input("partition_fine", &fine_hash);
    manifest.artifact("classifier", &path, &hash);
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("train-classifier", &manifest)?;
    Ok(())
}

pub fn load_classifier(
    st: &ArtifactStore,
    coarse: &Partition,
    mid: &Partition,
    fine: &Partition,
) -> Result<(AnyHead, String), CliError> {
    let (_, bytes, hash) = st.resolve("train-classifier", "classifier")?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let head = match ck.require_meta("head_kind")? {
        "flat" => AnyHead::Flat(FlatHead::from_checkpoint(&ck, fine)?),
        "hc" => AnyHead::Hc(HcHead::from_checkpoint(&ck, coarse, mid, fine)?),
        "mvmf" => AnyHead::Mvmf(MvmfHead::from_checkpoint(&ck, fine)?),
        other => return Err(CliError::Format(format!("unknown head kind `{other}`"))),
    };
    Ok((head, hash))
}

/// `geoplace train-rrm`: train the retrieval module on the fine partition.
pub fn cmd_train_rrm(
    config: &Config,
    loss_override: Option<&str>,
    residual_override: Option<bool>,
    placement_override: Option<&str>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut section = config.rrm.clone();
    if let Some(loss) = loss_override {
        section.loss = loss.to_string();
    }
    if let Some(residual) = residual_override {
        section.residual = residual;
    }
    if let Some(placement) = placement_override {
        section.placement = placement.to_string();
    }
    let rrm_cfg = section.rrm_config(config.seed)?;
    let train = load_train(config)?;
    let st = store(config)?;
    let (fine, fine_hash) = load_partition(&st, "fine")?;
    let (params, curve) = train_rrm(&train, &fine, &rrm_cfg)?;
    let bytes = params
        .to_checkpoint(&fine.content_hash(), rrm_cfg.loss, rrm_cfg.tau)
        .to_bytes();
    let (path, hash) = st.write("rrm", "gpnn", &bytes)?;
    println!(
        "rrm ({}, residual={}): {} epochs, final loss {:.6} -> {}",
        rrm_cfg.loss.as_str(),
        rrm_cfg.residual,
        curve.len(),
        curve.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    let mut manifest = Manifest::new("train-rrm", config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, true, false)?;
    manifest.input("partition_fine", &fine_hash);
    manifest.artifact("rrm", &path, &hash);
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("train-rrm", &manifest)?;
    Ok(())
}

pub fn load_rrm(st: &ArtifactStore, fine: &Partition) -> Result<(RrmParams, String), CliError> {
    let (_, bytes, hash) = st.resolve("train-rrm", "rrm")?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    Ok((RrmParams::from_checkpoint(&ck, fine)?, hash))
}

/// `geoplace build-index`: placeable filter + embedding + posting lists.
pub fn cmd_build_index(config: &Config, embedder_kind: &str) -> Result<(), CliError> {
    let started = Instant::now();
    let train = load_train(config)?;
    let st = store(config)?;
    let (coarse, _) = load_partition(&st, "coarse")?;
    let (mid, _) = load_partition(&st, "mid")?;
    let (fine, fine_hash) = load_partition(&st, "fine")?;
    let (classifier, classifier_hash) = load_classifier(&st, &coarse, &mid, &fine)?;

    let mut manifest = Manifest::new("build-index", config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, true, false)?;
    manifest.input("partition_fine", &fine_hash);
    manifest.input("classifier", &classifier_hash);

    let mut classifier_digest = [0u8; 32];
    hex_to_bytes(&classifier_hash, &mut classifier_digest)?;

    let index = match embedder_kind {
        "rrm" => {
            let (rrm, rrm_hash) = load_rrm(&st, &fine)?;
            manifest.input("rrm", &rrm_hash);
            build_background(
                &train,
                &classifier,
                &Embedder::Rrm(&rrm),
                &fine,
                classifier_digest,
            )?
        }
        "raw" => build_background(
            &train,
            &classifier,
            &Embedder::RawNormalized,
            &fine,
            classifier_digest,
        )?,
        other => {
            return Err(CliError::Config(format!(
                "unknown embedder `{other}` (expected rrm|raw)"
            )))
        }
    };
    let bytes = index.to_bytes();
    let (path, hash) = st.write("index", "gpix", &bytes)?;
    println!(
        "index ({embedder_kind}): {} placeable of {} train images -> {}",
        index.len(),
        train.len(),
        path.display()
    );
    manifest.artifact("index", &path, &hash);
    manifest
        .inputs
        .insert("embedder".into(), embedder_kind.to_string());
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("build-index", &manifest)?;
    Ok(())
}

fn hex_to_bytes(hex: &str, out: &mut [u8; 32]) -> Result<(), CliError> {
    if hex.len() != 64 {
        return Err(CliError::Format(format!("bad hash literal `{hex}`")));
    }
    for (i, byte) in out.iter_mut().enumerate() {
        *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
            .map_err(|_| CliError::Format(format!("bad hash literal `{hex}`")))?;
    }
    Ok(())
}

pub fn load_index(st: &ArtifactStore) -> Result<(BackgroundIndex, String, String), CliError> {
    let manifest = st.read_manifest("build-index")?;
    let embedder = manifest
        .inputs
        .get("embedder")
        .cloned()
        .unwrap_or_else(|| "rrm".into());
    let (_, bytes, hash) = st.resolve("build-index", "index")?;
    Ok((BackgroundIndex::from_bytes(&bytes)?, hash, embedder))
}

/// Loads the retrieval module for querying an index and verifies it is the
/// same module the index was embedded with; queries through a retrained
/// module against a stale index would silently disagree otherwise.
fn load_query_rrm(st: &ArtifactStore, fine: &Partition) -> Result<(RrmParams, String), CliError> {
    let (rrm, rrm_hash) = load_rrm(st, fine)?;
    let index_manifest = st.read_manifest("build-index")?;
    if let Some(recorded) = index_manifest.inputs.get("rrm") {
        if recorded != &rrm_hash {
            return Err(CliError::HashMismatch(format!(
                "index was embedded with rrm {recorded}, current rrm is {rrm_hash}; rerun build-index"
            )));
        }
    }
    Ok((rrm, rrm_hash))
}

fn predict_rows_swc(
    test: &Dataset,
    classifier: &AnyHead,
    embedder: &Embedder,
    index: &BackgroundIndex,
    fine: &Partition,
    swc: &SwcConfig,
) -> Result<Vec<(u64, Prediction)>, CliError> {
    (0..test.len())
        .map(|i| {
            let p = predict_swc(
                &test.feature_row_f64(i),
                classifier,
                embedder,
                index,
                fine,
                swc,
            )?;
            Ok((test.ids[i], p))
        })
        .collect()
}

fn predict_rows_retrieval(
    test: &Dataset,
    embedder: &Embedder,
    index: &BackgroundIndex,
    swc: &SwcConfig,
) -> Result<Vec<(u64, Prediction)>, CliError> {
    (0..test.len())
        .map(|i| {
            let p = predict_retrieval_only(&test.feature_row_f64(i), embedder, index, swc)?;
            Ok((test.ids[i], p))
        })
        .collect()
}

/// `geoplace predict`: batch inference over the test set.
pub fn cmd_predict(
    config: &Config,
    mode: &str,
    k_override: Option<usize>,
    aggregator_override: Option<&str>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut section = config.swc.clone();
    if let Some(k) = k_override {
        section.k = k;
    }
    if let Some(agg) = aggregator_override {
        section.aggregator = agg.to_string();
    }
    let swc_cfg = section.swc_config()?;
    let test = load_test(config)?;
    let st = store(config)?;
    let (coarse, _) = load_partition(&st, "coarse")?;
    let (mid, _) = load_partition(&st, "mid")?;
    let (fine, fine_hash) = load_partition(&st, "fine")?;
    let (index, index_hash, embedder_kind) = load_index(&st)?;
    let rrm_loaded;
    let embedder = match embedder_kind.as_str() {
        "raw" => Embedder::RawNormalized,
        _ => {
            let (rrm, _) = load_query_rrm(&st, &fine)?;
            rrm_loaded = rrm;
            Embedder::Rrm(&rrm_loaded)
        }
    };

    let mut manifest = Manifest::new("predict", config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, false, true)?;
    manifest.input("partition_fine", &fine_hash);
    manifest.input("index", &index_hash);

    let (records, classifier_note) = match mode {
        "swc" => {
            let (classifier, classifier_hash) = load_classifier(&st, &coarse, &mid, &fine)?;
            manifest.input("classifier", &classifier_hash);
            (
                predict_rows_swc(&test, &classifier, &embedder, &index, &fine, &swc_cfg)?,
                classifier_hash,
            )
        }
        "retrieval" => (
            predict_rows_retrieval(&test, &embedder, &index, &swc_cfg)?,
            "-".to_string(),
        ),
        other => {
            return Err(CliError::Config(format!(
                "unknown predict mode `{other}` (expected swc|retrieval)"
            )))
        }
    };

    let mut out = Vec::new();
    use std::io::Write;
    writeln!(
        out,
        "# inputs partition={} classifier={} index={} test={}",
        &fine_hash[..12],
        &classifier_note[..classifier_note.len().min(12)],
        &index_hash[..12],
        &manifest.inputs["test_features"][..12],
    )?;
    write_predictions(&mut out, &records)?;
    let (path, hash) = st.write("predictions", "tsv", &out)?;
    let fallbacks = records.iter().filter(|(_, p)| p.fallback).count();
    println!(
        "predict ({mode}): {} queries, {} fallbacks -> {}",
        records.len(),
        fallbacks,
        path.display()
    );
    manifest.artifact("predictions", &path, &hash);
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("predict", &manifest)?;
    Ok(())
}

fn truth_pairs(
    predictions: &[(u64, GeoPoint)],
    test: &Dataset,
) -> Result<Vec<EvalPair>, CliError> {
    let truth: BTreeMap<u64, GeoPoint> = test
        .ids
        .iter()
        .zip(test.locations.iter())
        .map(|(&id, &loc)| (id, loc))
        .collect();
    if predictions.len() != truth.len() {
        return Err(CliError::HashMismatch(format!(
            "prediction file covers {} queries, test set has {}",
            predictions.len(),
            truth.len()
        )));
    }
    predictions
        .iter()
        .map(|&(id, estimate)| {
            let &t = truth.get(&id).ok_or_else(|| {
                CliError::HashMismatch(format!("prediction id {id} not in the test set"))
            })?;
            Ok(EvalPair {
                id,
                estimate,
                truth: t,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct Evaluation {
    reports: BTreeMap<String, AccuracyReport>,
}

/// `geoplace evaluate`: accuracy-at-range tables for a prediction file.
pub fn cmd_evaluate(
    config: &Config,
    predictions_path: Option<&Path>,
    ranges: &str,
) -> Result<(), CliError> {
    let started = Instant::now();
    let st = store(config)?;
    let (path, bytes) = match predictions_path {
        Some(p) => (
            p.to_path_buf(),
            std::fs::read(p).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?,
        ),
        None => {
            let (p, b, _) = st.resolve("predict", "predictions")?;
            (p, b)
        }
    };
    let estimates = geoplace_core::swc::read_prediction_estimates(&bytes[..])?;
    let test = load_test(config)?;
    let pairs = truth_pairs(&estimates, &test)?;

    let mut sets: Vec<(&str, RangeSet)> = Vec::new();
    match ranges {
        "baseline" => sets.push(("baseline", RangeSet::baseline())),
        "fine" => sets.push(("fine", RangeSet::fine_grained())),
        "both" => {
            sets.push(("baseline", RangeSet::baseline()));
            sets.push(("fine", RangeSet::fine_grained()));
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown range set `{other}` (expected baseline|fine|both)"
            )))
        }
    }
    let mut evaluation = Evaluation {
        reports: BTreeMap::new(),
    };
    for (name, set) in &sets {
        let report = accuracy_at(&pairs, set)?;
        print!("{}", format_table(name, &report));
        evaluation.reports.insert(name.to_string(), report);
    }
    let json = serde_json::to_vec_pretty(&evaluation).map_err(|e| CliError::Other(e.to_string()))?;
    let (out_path, hash) = st.write("evaluation", "json", &json)?;
    println!("evaluation -> {}", out_path.display());

    let mut manifest = Manifest::new("evaluate", config.seed, config.snapshot());
    manifest.input("predictions", &sha256_hex(&bytes));
    let _ = path;
    dataset_input_hashes(&mut manifest, config, false, true)?;
    manifest.artifact("evaluation", &out_path, &hash);
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest("evaluate", &manifest)?;
    Ok(())
}

/// `geoplace inspect`: print the header of any artifact file.
pub fn cmd_inspect(path: &Path) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    if bytes.len() < 4 {
        return Err(CliError::Format("file shorter than a magic number".into()));
    }
    let described = match &bytes[..4] {
        b"GPRT" => {
            let p = Partition::from_bytes(&bytes)?;
            format!(
                "GPRT partition: {} leaves, target {}, min_split {}, tag {:?}",
                p.leaf_count(),
                p.target_leaf_count,
                p.min_split_size,
                p.snapshot_tag
            )
        }
        b"GPNN" => {
            let ck = Checkpoint::from_bytes(&bytes)?;
            let meta: Vec<String> = ck.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let params: Vec<String> = ck
                .params
                .iter()
                .map(|p| format!("{}{:?}", p.name, p.shape))
                .collect();
            format!(
                "GPNN checkpoint: {}; params: {}",
                meta.join(", "),
                params.join(", ")
            )
        }
        b"GPIX" => {
            let ix = BackgroundIndex::from_bytes(&bytes)?;
            format!(
                "GPIX index: {} entries, dim {}, partition {}, classifier {}",
                ix.len(),
                ix.dim(),
                &geoplace_core::hash::to_hex(ix.partition_hash())[..12],
                &geoplace_core::hash::to_hex(ix.classifier_hash())[..12],
            )
        }
        b"GPFV" => geoplace_core::data::describe_features(&bytes)?,
        other => {
            return Err(CliError::Format(format!(
                "unrecognized magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    println!("{described}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationContext {
    train: Dataset,
    test: Dataset,
    fine: Partition,
    classifier: AnyHead,
    classifier_digest: [u8; 32],
}

fn ablation_context(config: &Config, st: &ArtifactStore) -> Result<AblationContext, CliError> {
    let train = load_train(config)?;
    let test = load_test(config)?;
    let (coarse, _) = load_partition(st, "coarse")?;
    let (mid, _) = load_partition(st, "mid")?;
    let (fine, _) = load_partition(st, "fine")?;
    let (classifier, classifier_hash) = load_classifier(st, &coarse, &mid, &fine)?;
    let mut classifier_digest = [0u8; 32];
    hex_to_bytes(&classifier_hash, &mut classifier_digest)?;
    Ok(AblationContext {
        train,
        test,
        fine,
        classifier,
        classifier_digest,
    })
}

fn eval_records(
    records: &[(u64, Prediction)],
    test: &Dataset,
    set: &RangeSet,
) -> Result<AccuracyReport, CliError> {
    let estimates: Vec<(u64, GeoPoint)> =
        records.iter().map(|(id, p)| (*id, p.estimate)).collect();
    let pairs = truth_pairs(&estimates, test)?;
    Ok(accuracy_at(&pairs, set)?)
}

/// `geoplace ablate --grid <k|loss|residual|aggregation>`.
pub fn cmd_ablate(config: &Config, grid: &str) -> Result<(), CliError> {
    let started = Instant::now();
    let st = store(config)?;
    let ctx = ablation_context(config, &st)?;
    let mut tables: BTreeMap<String, AccuracyReport> = BTreeMap::new();

    match grid {
        // Neighbor-count sweep on the regular SwC chain; fine ranges.
        "k" => {
            let (index, _, embedder_kind) = load_index(&st)?;
            let rrm_loaded;
            let embedder = match embedder_kind.as_str() {
                "raw" => Embedder::RawNormalized,
                _ => {
                    let (rrm, _) = load_query_rrm(&st, &ctx.fine)?;
                    rrm_loaded = rrm;
                    Embedder::Rrm(&rrm_loaded)
                }
            };
            let set = RangeSet::fine_grained();
            let ks = [1usize, 5, 10, 15, 20];
            let mut per_k: Vec<AccuracyReport> = Vec::new();
            for &k in &ks {
                let swc = SwcConfig {
                    k,
                    ..config.swc.swc_config()?
                };
                let records =
                    predict_rows_swc(&ctx.test, &ctx.classifier, &embedder, &index, &ctx.fine, &swc)?;
                let report = eval_records(&records, &ctx.test, &set)?;
                print!("{}", format_table(&format!("K={k}"), &report));
                tables.insert(format!("k={k}"), report.clone());
                per_k.push(report);
            }
            // Monotonicity report: how accuracy moves as K grows, per range.
            println!("monotonicity (accuracy vs K, per range):");
            for (ri, range) in set.thresholds_km().iter().enumerate() {
                let series: Vec<f64> = per_k.iter().map(|r| r.accuracy[ri]).collect();
                let non_decreasing = series.windows(2).all(|w| w[1] >= w[0]);
                let non_increasing = series.windows(2).all(|w| w[1] <= w[0]);
                let best = series
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| ks[i])
                    .unwrap();
                let trend = if non_decreasing && non_increasing {
                    "flat"
                } else if non_decreasing {
                    "non-decreasing"
                } else if non_increasing {
                    "non-increasing"
                } else {
                    "peaked"
                };
                println!("  @{range} km: {trend}, best K={best}");
            }
        }
        // Retrieval training objective: raw baseline vs triplet vs infoNCE;
        // retrieval-only over the whole collection, baseline ranges.
        "loss" => {
            let set = RangeSet::baseline();
            for variant in ["baseline", "triplet", "infonce"] {
                let report = match variant {
                    "baseline" => {
                        let index = build_background(
                            &ctx.train,
                            &ctx.classifier,
                            &Embedder::RawNormalized,
                            &ctx.fine,
                            ctx.classifier_digest,
                        )?;
                        let records = predict_rows_retrieval(
                            &ctx.test,
                            &Embedder::RawNormalized,
                            &index,
                            &config.swc.swc_config()?,
                        )?;
                        eval_records(&records, &ctx.test, &set)?
                    }
                    loss_name => {
                        let mut section = config.rrm.clone();
                        section.loss = loss_name.to_string();
                        let rrm_cfg = section.rrm_config(config.seed)?;
                        let (params, _) = train_rrm(&ctx.train, &ctx.fine, &rrm_cfg)?;
                        let index = build_background(
                            &ctx.train,
                            &ctx.classifier,
                            &Embedder::Rrm(&params),
                            &ctx.fine,
                            ctx.classifier_digest,
                        )?;
                        let records = predict_rows_retrieval(
                            &ctx.test,
                            &Embedder::Rrm(&params),
                            &index,
                            &config.swc.swc_config()?,
                        )?;
                        eval_records(&records, &ctx.test, &set)?
                    }
                };
                print!("{}", format_table(variant, &report));
                tables.insert(format!("loss={variant}"), report);
            }
        }
        // Residual connection on/off; retrieval-only, baseline ranges.
        "residual" => {
            let set = RangeSet::baseline();
            for residual in [true, false] {
                let mut section = config.rrm.clone();
                section.residual = residual;
                let rrm_cfg = section.rrm_config(config.seed)?;
                let (params, _) = train_rrm(&ctx.train, &ctx.fine, &rrm_cfg)?;
                let index = build_background(
                    &ctx.train,
                    &ctx.classifier,
                    &Embedder::Rrm(&params),
                    &ctx.fine,
                    ctx.classifier_digest,
                )?;
                let records = predict_rows_retrieval(
                    &ctx.test,
                    &Embedder::Rrm(&params),
                    &index,
                    &config.swc.swc_config()?,
                )?;
                let label = if residual { "w/ residual" } else { "w/o residual" };
                let report = eval_records(&records, &ctx.test, &set)?;
                print!("{}", format_table(label, &report));
                tables.insert(format!("residual={residual}"), report);
            }
        }
        // Aggregation scheme on the regular SwC chain; fine ranges.
        "aggregation" => {
            let (index, _, embedder_kind) = load_index(&st)?;
            let rrm_loaded;
            let embedder = match embedder_kind.as_str() {
                "raw" => Embedder::RawNormalized,
                _ => {
                    let (rrm, _) = load_query_rrm(&st, &ctx.fine)?;
                    rrm_loaded = rrm;
                    Embedder::Rrm(&rrm_loaded)
                }
            };
            let set = RangeSet::fine_grained();
            for aggregator in [Aggregator::Average, Aggregator::SpatialClustering] {
                let swc = SwcConfig {
                    aggregator,
                    ..config.swc.swc_config()?
                };
                let records =
                    predict_rows_swc(&ctx.test, &ctx.classifier, &embedder, &index, &ctx.fine, &swc)?;
                let report = eval_records(&records, &ctx.test, &set)?;
                print!("{}", format_table(aggregator.as_str(), &report));
                tables.insert(format!("aggregation={}", aggregator.as_str()), report);
            }
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown grid `{other}` (expected k|loss|residual|aggregation)"
            )))
        }
    }

    let json = serde_json::to_vec_pretty(&tables).map_err(|e| CliError::Other(e.to_string()))?;
    let (path, hash) = st.write(&format!("ablation-{grid}"), "json", &json)?;
    println!("ablation tables -> {}", path.display());
    let mut manifest = Manifest::new(&format!("ablate-{grid}"), config.seed, config.snapshot());
    dataset_input_hashes(&mut manifest, config, true, true)?;
    manifest.artifact("tables", &path, &hash);
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    st.write_manifest(&format!("ablate-{grid}"), &manifest)?;
    Ok(())
}
