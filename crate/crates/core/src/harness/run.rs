use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::report::{write_metrics_csv, MetricsRow};
use crate::attacks::{self, AttackerMapping, SurrogateTraining};
use crate::data::{blobs, Dataset};
use crate::dp::{protect, DpActivationBatch};
use crate::error::{Result, StageExt};
use crate::labelspace::{expand_dataset, ExpandedDataset, LabelMap};
use crate::nn::{save_checkpoint, Segment};
use crate::pipeline::{
    init_client_segment, make_transport, negotiate, run_training, ExperimentPlan, TrainingHistory,
};
use crate::rng::derive_seed;
use crate::verifier::{
    assemble, verify, AccuracyRequirement, AssembledModel, ChainManifest, PseudoTestSet,
    VerificationReport, MANIFEST_VERSION,
};
use crate::watermark::{embed, EmbedContext, EmbedReport, PublicLink, WatermarkLink};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_secs: f64,
    pub embed_ms: Vec<f64>,
    pub verify_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkBytes {
    pub from: String,
    pub to: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub cluster_kmeans: f64,
    pub cluster_k_found: usize,
    pub extraction_random: f64,
    pub extraction_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub run_id: String,
    pub plan: ExperimentPlan,
    pub gamma: f64,
    pub epsilon: Option<f64>,
    pub bits: usize,
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
    /// Demasked test accuracy of the trained model before embedding.
    pub acc_pre_embed: f64,
    /// Demasked test accuracy of the released model.
    pub acc_main: f64,
    pub links: Vec<PublicLink>,
    pub embed_rounds: Vec<usize>,
    pub verification: Option<VerificationReport>,
    pub link_bytes: Vec<LinkBytes>,
    pub attacks: Option<AttackMetrics>,
    pub timings: Timings,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// In-memory products of a run, for callers that want more than the record.
pub struct RunArtifacts {
    pub record: RunRecord,
    pub train: Dataset,
    pub test: Dataset,
    pub label_map: LabelMap,
    pub pseudo_labels: Vec<usize>,
    pub client: Segment,
    pub cache: DpActivationBatch,
    pub trained: Vec<Segment>,
    pub released: Vec<Segment>,
    pub links: Vec<WatermarkLink>,
    pub history: TrainingHistory,
    pub manifest: ChainManifest,
    pub test_set: PseudoTestSet,
}

pub fn run_id(cfg: &RunConfig) -> Result<String> {
    let h = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(h[..6].iter().map(|b| format!("{b:02x}")).collect())
}

/// Demasked accuracy: pseudo predictions mapped back through the secret map.
pub fn demasked_accuracy(model: &AssembledModel, data: &Dataset, map: &LabelMap) -> Result<f64> {
    let pred = map.demask_all(&model.predict(&data.features)?)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len().max(1) as f64)
}

pub fn pseudo_test_set(test: &Dataset, map: &LabelMap) -> PseudoTestSet {
    PseudoTestSet {
        features: test.features.iter_rows().map(<[f64]>::to_vec).collect(),
        groups: test.labels.iter().map(|&y| map.forward(y).to_vec()).collect(),
    }
}

/// Embeds the chain link by link: `T_i` embeds against frozen `T_1..T_{i-1}`
/// and the converged downstream segments.
pub fn embed_chain(
    plan: &ExperimentPlan,
    trained: &[Segment],
    cache: &DpActivationBatch,
    pseudo_labels: &[usize],
) -> Result<(Vec<Segment>, Vec<WatermarkLink>, Vec<EmbedReport>)> {
    let mut segs = trained.to_vec();
    let mut links = Vec::with_capacity(segs.len());
    let mut reports = Vec::with_capacity(segs.len());
    for i in 0..segs.len() {
        let (done, rest) = segs.split_at_mut(i);
        let (current, downstream) = rest.split_first_mut().unwrap();
        let ctx = EmbedContext {
            upstream: done,
            downstream,
            cache,
            pseudo_labels,
            batch_size: plan.batch_size,
            momentum: plan.momentum,
            seed: derive_seed(plan.seeds.trainers[i], "embed"),
        };
        let (link, report) = embed(
            current,
            i as u32 + 1,
            plan.nonces[i],
            plan.identities[i].as_bytes(),
            &ctx,
            &plan.watermark,
        )?;
        links.push(link);
        reports.push(report);
    }
    Ok((segs, links, reports))
}

/// The data client's side of a run: data, label expansion and the DP
/// release of the encoder's activations.
pub struct Release {
    pub train: Dataset,
    pub test: Dataset,
    pub map: LabelMap,
    pub expanded: ExpandedDataset,
    pub pseudo_labels: Vec<usize>,
    pub client: Segment,
    pub cache: DpActivationBatch,
}

pub fn prepare_release(cfg: &RunConfig) -> Result<Release> {
    let plan = &cfg.plan;
    negotiate(plan).stage("negotiate")?;
    let data = blobs(&cfg.data).stage("data")?;
    let (train, test) = data.split(cfg.test_fraction, cfg.split_seed).stage("data")?;
    let map = LabelMap::build(plan.label.q, &plan.label.g, plan.seeds.label_map).stage("expand")?;
    let expanded = expand_dataset(
        &train.features,
        &train.labels,
        &map,
        plan.label.augment_sigma,
        plan.seeds.expand,
    )
    .stage("expand")?;
    let client = init_client_segment(plan, &train.features).stage("protect")?;
    let params = plan.dp.params().stage("protect")?;
    let cache = protect(&client, &expanded, params, plan.seeds.dp_noise).stage("protect")?;
    Ok(Release {
        train,
        test,
        map,
        pseudo_labels: expanded.pseudo_labels.clone(),
        expanded,
        client,
        cache,
    })
}

/// Label expansion, DP release, relay training, chain embedding and
/// verification, in that order.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunArtifacts> {
    let plan = &cfg.plan;
    let Release {
        train,
        test,
        map,
        pseudo_labels,
        client,
        cache,
        ..
    } = prepare_release(cfg)?;

    let t0 = Instant::now();
    let mut transport = make_transport(cfg.transport);
    let outcome = run_training(plan, &cache, &pseudo_labels, transport.as_mut()).stage("train")?;
    drop(transport);
    let train_secs = t0.elapsed().as_secs_f64();
    log::info!(
        "trained {} epochs in {train_secs:.2}s, final loss {:?}",
        outcome.history.epoch_losses.len(),
        outcome.history.epoch_losses.last()
    );
    let trained = outcome.segments;

    let pre_model = assemble(&client, &trained, plan.dp.clip_radius).stage("evaluate")?;
    let acc_pre_embed = demasked_accuracy(&pre_model, &test, &map).stage("evaluate")?;

    let (released, links, reports) = if cfg.watermark {
        embed_chain(plan, &trained, &cache, &pseudo_labels).stage("embed")?
    } else {
        let frozen = trained
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.freeze();
                s
            })
            .collect();
        (frozen, Vec::new(), Vec::new())
    };
    let model = assemble(&client, &released, plan.dp.clip_radius).stage("evaluate")?;
    let acc_main = demasked_accuracy(&model, &test, &map).stage("evaluate")?;
    log::info!("demasked accuracy {acc_pre_embed:.4} before embedding, {acc_main:.4} released");

    let manifest = ChainManifest {
        version: MANIFEST_VERSION,
        bits: plan.watermark.bits,
        positions: plan.watermark.position_count(),
        clip_radius: plan.dp.clip_radius,
        links: links.iter().map(WatermarkLink::public).collect(),
    };
    let test_set = pseudo_test_set(&test, &map);
    let mut verify_ms = 0.0;
    let verification = if cfg.watermark {
        let t = Instant::now();
        let report = verify(
            &released,
            &cache,
            &manifest,
            cfg.verify_eta_goal,
            Some(AccuracyRequirement {
                client: &client,
                test: &test_set,
                threshold: cfg.gate_threshold,
            }),
        )
        .stage("verify")?;
        verify_ms = t.elapsed().as_secs_f64() * 1e3;
        log::info!("verification {:?} in {verify_ms:.1}ms", report.overall);
        Some(report)
    } else {
        None
    };

    let attacks = if cfg.attacks {
        Some(run_attacks(cfg, &cache, &pseudo_labels, &map, &model, &train, &test).stage("attack")?)
    } else {
        None
    };

    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        run_id: run_id(cfg)?,
        plan: plan.clone(),
        gamma: plan.label.gamma(),
        epsilon: plan.dp.epsilon,
        bits: plan.watermark.bits,
        epoch_losses: outcome.history.epoch_losses.clone(),
        stopped_early: outcome.history.stopped_early,
        acc_pre_embed,
        acc_main,
        links: manifest.links.clone(),
        embed_rounds: reports.iter().map(|r| r.rounds).collect(),
        verification,
        link_bytes: outcome
            .history
            .link_bytes
            .iter()
            .map(|(&(f, t), &b)| LinkBytes {
                from: f.to_string(),
                to: t.to_string(),
                bytes: b,
            })
            .collect(),
        attacks,
        timings: Timings {
            train_secs,
            embed_ms: reports.iter().map(|r| r.millis).collect(),
            verify_ms,
        },
    };
    Ok(RunArtifacts {
        record,
        train,
        test,
        label_map: map,
        pseudo_labels,
        client,
        cache,
        trained,
        released,
        links,
        history: outcome.history,
        manifest,
        test_set,
    })
}

fn run_attacks(
    cfg: &RunConfig,
    cache: &DpActivationBatch,
    pseudo_labels: &[usize],
    map: &LabelMap,
    model: &AssembledModel,
    train: &Dataset,
    test: &Dataset,
) -> Result<AttackMetrics> {
    let q = map.q();
    let groups = map.demask_all(pseudo_labels)?;
    let seed = derive_seed(cfg.plan.seeds.dp_noise, "attacks");
    let cluster = attacks::kmeans_auto(&cache.values, 2..=8, &groups, q, seed)?;
    let probe = train.jittered(0.05, derive_seed(seed, "probe"));
    let api = |x: &crate::tensor::TensorF64| model.predict(x);
    let st = SurrogateTraining {
        dims: vec![train.features.cols(), 32],
        ..SurrogateTraining::default()
    };
    let random = attacks::extraction_attack(
        api,
        map.pseudo_count(),
        &probe,
        q,
        AttackerMapping::Random,
        &test.features,
        &test.labels,
        &st,
        seed,
    )?;
    let inverse: Vec<usize> = (0..map.pseudo_count()).map(|p| map.demask(p)).collect::<Result<_>>()?;
    let control = attacks::extraction_attack(
        api,
        map.pseudo_count(),
        &probe,
        q,
        AttackerMapping::Given(&inverse),
        &test.features,
        &test.labels,
        &st,
        seed,
    )?;
    Ok(AttackMetrics {
        cluster_kmeans: cluster.perfect_accuracy,
        cluster_k_found: cluster.k_found,
        extraction_random: random.surrogate_true_accuracy,
        extraction_control: control.surrogate_true_accuracy,
    })
}

/// Writes checkpoints, the DP cache, the public manifest, the verifier's
/// test set, `report.json` and `metrics.csv` into `dir`.
pub fn persist(art: &RunArtifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&art.client, &dir.join("client.clwc"))?;
    for (i, s) in art.released.iter().enumerate() {
        save_checkpoint(s, &dir.join(format!("trainer_{}.clwc", i + 1)))?;
    }
    art.cache.save(&dir.join("cache.cldp"))?;
    art.manifest.save(&dir.join("manifest.json"))?;
    art.test_set.save(&dir.join("test_pseudo.json"))?;
    std::fs::write(dir.join("label_map.json"), art.label_map.to_json()?)?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&art.record)?)?;
    let f = std::fs::File::create(dir.join("metrics.csv"))?;
    write_metrics_csv(f, &[MetricsRow::from_record(&art.record)])?;
    Ok(())
}

/// Runs one experiment and persists it under `dir`.
pub fn run_to_dir(cfg: &RunConfig, dir: &Path) -> Result<RunRecord> {
    let art = run_experiment(cfg)?;
    persist(&art, dir).stage("persist")?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(art.record)
}
