use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ube_core::backbone::Backbone;
use ube_core::eval::{
    adjusted_rand_index, cluster_top_images, evaluate_subject, kmeans, median_test_correlation, pooled_embeddings,
    pooled_test_targets, retrieval_test, test_responses, ClusterReport, MetricReport, RetrievalResult,
};
use ube_core::format::write_file;
use ube_core::registry::DatasetManifest;
use ube_core::synthetic::{generate_archetypes, generate_dataset, generate_subject, load_truth, SubjectTruth};
use ube_core::train::checkpoint::{config_hash, file_hash, load_checkpoint, save_checkpoint, Checkpoint};
use ube_core::train::data::TrainingData;
use ube_core::train::engine::{fit, train, transfer_learn, EpochInfo, EvalHook, ModelState, TrainConfig};
use ube_core::{Error, Result};

use crate::config::RunConfig;

/// Everything `train`, `transfer` and `eval` write to `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub run_hash: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    #[serde(default)]
    pub epochs: Vec<EpochRecord>,
    pub subjects: Vec<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub step: u64,
}

impl From<&EpochInfo> for EpochRecord {
    fn from(e: &EpochInfo) -> Self {
        EpochRecord { epoch: e.epoch, mean_loss: e.mean_loss, step: e.step }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn load_data(cfg: &RunConfig, bb: &Backbone<f64>) -> Result<TrainingData<f64>> {
    if cfg.manifests.is_empty() {
        return Err(Error::Config("no dataset manifests given".into()));
    }
    let mut data = TrainingData::default();
    for m in &cfg.manifests {
        data.load_dataset(m, bb, cfg.train.zscore)?;
    }
    Ok(data)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint.as_deref().ok_or_else(|| Error::Config("this command needs a checkpoint".into()))
}

fn open_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint<f64>, String)> {
    let path = checkpoint_path(cfg)?;
    let ck = load_checkpoint::<f64>(path)?;
    Ok((ck, file_hash(path)?))
}

fn evaluate_all(
    state: &ModelState<f64>,
    data: &TrainingData<f64>,
    ids: &[String],
    cfg: &RunConfig,
    config_hash: &str,
    checkpoint_hash: &str,
) -> Result<Vec<MetricReport>> {
    ids.iter()
        .map(|id| {
            let mut r = evaluate_subject(state, data, id, &cfg.eval)?;
            r.config_hash = Some(config_hash.to_string());
            r.checkpoint_hash = Some(checkpoint_hash.to_string());
            Ok(r)
        })
        .collect()
}

fn write_reports(out: &Path, report: &RunReport) -> Result<()> {
    write_json(&out.join("report.json"), report)?;
    write_file(&out.join("summary.csv"), summary_csv(&report.subjects).as_bytes())?;
    for r in &report.subjects {
        write_file(&out.join(format!("voxels/{}.csv", r.subject_id)), r.to_csv().as_bytes())?;
    }
    Ok(())
}

fn summary_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{}\n", MetricReport::SUMMARY_HEADER);
    for r in reports {
        s.push_str(&r.summary_row());
        s.push('\n');
    }
    s
}

fn print_summary(reports: &[MetricReport]) {
    for r in reports {
        let acc = r.mean_encoding_accuracy.map(|a| format!(", encoding accuracy {a:.4}")).unwrap_or_default();
        println!("{}: median r {:.4} over {} voxels{acc}", r.subject_id, r.median_r, r.voxels);
    }
}

fn progress_hook<'a>(data: &'a TrainingData<f64>) -> impl FnMut(&EpochInfo, &ModelState<f64>) -> Result<()> + 'a {
    move |info, state| {
        for s in &data.subjects {
            let r = median_test_correlation(state, data, &s.subject_id)?;
            log::info!("epoch {} {}: median test r {r:.4}", info.epoch, s.subject_id);
        }
        Ok(())
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<()> {
    let sim = &cfg.simulate;
    let bb = Backbone::<f64>::new(cfg.backbone.clone())?;
    let grid = bb.config.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed());
    let archetypes = generate_archetypes(sim.archetypes, bb.config.levels, grid, bb.config.raw_channels, &mut rng)?;
    let spec = &sim.dataset;
    let truth = (0..sim.subjects)
        .map(|i| {
            let voxels = generate_subject(&archetypes, sim.voxels, sim.jitter, grid, &mut rng)?;
            Ok(SubjectTruth { subject_id: format!("{}-s{i}", spec.dataset_id), voxels }.with_noise(sim.noise))
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = generate_dataset(spec, truth, &bb, &mut rng)?;
    ds.write(&cfg.out)?;
    write_json(&cfg.out.join("truth/archetypes.json"), &archetypes)?;
    write_json(&cfg.out.join("simulate.json"), &serde_json::json!({ "run_hash": cfg.hash(), "config": cfg }))?;
    let m = &ds.manifest;
    let train_total: usize = m.subjects.iter().map(|s| s.train.len()).sum();
    println!(
        "dataset {}: {} stimuli, {} subjects x {} voxels, {} train stimuli, {} test stimuli x {} repeats",
        m.dataset_id,
        m.stimuli.len(),
        m.subjects.len(),
        sim.voxels,
        train_total,
        spec.n_test,
        spec.repeats_test
    );
    println!("manifest: {}", cfg.out.join("manifest.json").display());
    Ok(())
}

/// Computes feature files for image-only stimuli and records them in the
/// manifest.
pub fn features(cfg: &RunConfig) -> Result<()> {
    if cfg.manifests.is_empty() {
        return Err(Error::Config("no dataset manifests given".into()));
    }
    let bb = Backbone::<f64>::new(cfg.backbone.clone())?;
    for path in &cfg.manifests {
        let mut manifest = DatasetManifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut written = 0;
        for s in manifest.stimuli.iter_mut().filter(|s| s.features.is_none()) {
            let Some(img) = &s.image else { continue };
            let raw = bb.raw_features(&ube_core::backbone::Image::load(&base.join(img))?)?;
            let rel = PathBuf::from(format!("features/{}.ubef", s.id));
            raw.save(&base.join(&rel))?;
            s.features = Some(rel);
            written += 1;
        }
        manifest.validate()?;
        manifest.save(path)?;
        println!("{}: {written} feature files written", path.display());
    }
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let bb = Backbone::<f64>::new(cfg.backbone.clone())?;
    let data = load_data(cfg, &bb)?;
    let mut hook = progress_hook(&data);
    let hook: Option<&mut EvalHook<f64>> = Some(&mut hook);
    let (state, log) = match &cfg.checkpoint {
        Some(path) => {
            let ck = load_checkpoint::<f64>(path)?;
            if let Some(w) = ck.resume_warning(&cfg.train) {
                eprintln!("warning: {w}");
            }
            let mut state = ck.state;
            state.register_all(&data, cfg.train.seed)?;
            state.round_f32();
            let log = fit(&mut state, &data, &cfg.train, hook)?;
            state.round_f32();
            (state, log)
        }
        None => train(cfg.backbone.clone(), cfg.encoder.clone(), &data, &cfg.train, hook)?,
    };
    let ids: Vec<String> = data.subjects.iter().map(|s| s.subject_id.clone()).collect();
    finish("train", cfg, &state, &cfg.train, &data, &ids, &log)
}

fn finish(
    command: &str,
    cfg: &RunConfig,
    state: &ModelState<f64>,
    train_cfg: &TrainConfig,
    data: &TrainingData<f64>,
    ids: &[String],
    log: &[EpochInfo],
) -> Result<()> {
    let ck_path = cfg.out.join("checkpoint.ubec");
    save_checkpoint(state, train_cfg, &ck_path)?;
    let ck_hash = file_hash(&ck_path)?;
    let c_hash = config_hash(&state.model.backbone.config, &state.model.encoder, train_cfg);
    let subjects = evaluate_all(state, data, ids, cfg, &c_hash, &ck_hash)?;
    print_summary(&subjects);
    let report = RunReport {
        command: command.into(),
        run_hash: cfg.hash(),
        config_hash: c_hash,
        checkpoint_hash: ck_hash.clone(),
        epochs: log.iter().map(EpochRecord::from).collect(),
        subjects,
    };
    write_reports(&cfg.out, &report)?;
    println!("checkpoint {} (sha256 {ck_hash})", ck_path.display());
    Ok(())
}

pub fn transfer(cfg: &RunConfig) -> Result<()> {
    let (ck, _) = open_checkpoint(cfg)?;
    let bb = ck.state.model.backbone.clone();
    let data = load_data(cfg, &bb)?;
    let new_ids: Vec<String> = data
        .subjects
        .iter()
        .map(|s| s.subject_id.clone())
        .filter(|id| ck.state.registry.subject(id).is_err())
        .collect();
    if new_ids.is_empty() {
        return Err(Error::Config("every subject in the manifests is already in the checkpoint".into()));
    }
    let refs: Vec<&str> = new_ids.iter().map(String::as_str).collect();
    let mut new = data.only(&refs)?;
    if let Some(n) = cfg.transfer.examples {
        for id in &new_ids {
            new.truncate_train(id, n)?;
        }
    }
    let state = transfer_learn(&ck.state, &new, &cfg.train)?;
    finish("transfer", cfg, &state, &cfg.train, &new, &new_ids, &[])
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let (ck, ck_hash) = open_checkpoint(cfg)?;
    let data = load_data(cfg, &ck.state.model.backbone)?;
    let ids: Vec<String> = data.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let subjects = evaluate_all(&ck.state, &data, &ids, cfg, &ck.config_hash, &ck_hash)?;
    print_summary(&subjects);
    let report = RunReport {
        command: "eval".into(),
        run_hash: cfg.hash(),
        config_hash: ck.config_hash.clone(),
        checkpoint_hash: ck_hash,
        epochs: Vec::new(),
        subjects,
    };
    write_reports(&cfg.out, &report)
}

#[derive(Debug, Serialize)]
struct RetrievalReport {
    run_hash: String,
    config_hash: String,
    checkpoint_hash: String,
    seed: u64,
    subjects: BTreeMap<String, RetrievalResult>,
}

pub fn retrieve(cfg: &RunConfig) -> Result<()> {
    let (ck, ck_hash) = open_checkpoint(cfg)?;
    let data = load_data(cfg, &ck.state.model.backbone)?;
    let mut subjects = BTreeMap::new();
    for s in &data.subjects {
        let (pred, meas) = test_responses(&ck.state, &data, &s.subject_id)?;
        let n = cfg.eval.retrieval_n.min(meas.len());
        if n < cfg.eval.retrieval_n {
            log::warn!("{}: retrieval N reduced to the {n} test stimuli", s.subject_id);
        }
        let r = retrieval_test(&meas, &pred, n, cfg.eval.retrieval_resamples, cfg.eval.seed)?;
        println!("{}: N={} top-1 {:.4} top-5 {:.4}", s.subject_id, r.n, r.top1, r.top5);
        subjects.insert(s.subject_id.clone(), r);
    }
    let report = RetrievalReport {
        run_hash: cfg.hash(),
        config_hash: ck.config_hash.clone(),
        checkpoint_hash: ck_hash,
        seed: cfg.eval.seed,
        subjects,
    };
    write_json(&cfg.out.join("retrieval.json"), &report)
}

#[derive(Debug, Serialize)]
struct ClusterOutput {
    run_hash: String,
    config_hash: String,
    checkpoint_hash: String,
    subjects: Vec<String>,
    #[serde(flatten)]
    report: ClusterReport,
}

/// Ground-truth archetype labels when every subject has a `truth/` file
/// next to its manifest.
fn truth_labels(cfg: &RunConfig, data: &TrainingData<f64>) -> Option<Vec<usize>> {
    let mut labels = Vec::new();
    for s in &data.subjects {
        let found = cfg.manifests.iter().find_map(|m| {
            let p = m.parent().unwrap_or(Path::new(".")).join(format!("truth/{}.json", s.subject_id));
            p.exists().then(|| load_truth(&p).ok()).flatten()
        })?;
        labels.extend(found.labels());
    }
    Some(labels)
}

pub fn cluster(cfg: &RunConfig) -> Result<()> {
    let (ck, ck_hash) = open_checkpoint(cfg)?;
    let data = load_data(cfg, &ck.state.model.backbone)?;
    let ids: Vec<String> = data.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let (emb, owner) = pooled_embeddings(&ck.state, &refs)?;
    let fit = kmeans(&emb, cfg.cluster.k, cfg.eval.seed)?;
    let responses = pooled_test_targets(&data, &refs)?;
    let first = data.subject(&ids[0])?;
    let stimulus_ids: Vec<String> = first.test.iter().map(|&i| data.stimulus_ids[i].clone()).collect();
    let mut report = cluster_top_images(&fit.labels, cfg.cluster.k, &responses, &stimulus_ids, cfg.cluster.top_n)?;
    if ids.len() > 1 {
        report.subject_ari = Some(adjusted_rand_index(&fit.labels, &owner)?);
    }
    if let Some(truth) = truth_labels(cfg, &data) {
        report.ari = Some(adjusted_rand_index(&fit.labels, &truth)?);
    }
    for c in &report.clusters {
        println!("cluster {}: {} voxels", c.cluster, c.size);
    }
    if let Some(a) = report.ari {
        println!("ARI vs ground-truth archetypes: {a:.4}");
    }
    if let Some(a) = report.subject_ari {
        println!("ARI vs subject: {a:.4}");
    }
    let out = ClusterOutput { run_hash: cfg.hash(), config_hash: ck.config_hash.clone(), checkpoint_hash: ck_hash, subjects: ids, report };
    write_json(&cfg.out.join("cluster.json"), &out)
}

/// Collects `report.json` files into one summary table.
pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let inputs: Vec<PathBuf> = if inputs.is_empty() { vec![cfg.out.join("report.json")] } else { inputs.to_vec() };
    let mut all = Vec::new();
    for p in &inputs {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let r: RunReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        all.extend(r.subjects);
    }
    let csv = summary_csv(&all);
    print!("{csv}");
    write_file(&cfg.out.join("summary.csv"), csv.as_bytes())
}
