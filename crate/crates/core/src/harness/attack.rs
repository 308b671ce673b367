use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{demasked_accuracy, prepare_release, run_experiment, run_id, Release};
use crate::attacks::{
    dbscan, extraction_attack, kmeans_auto, score_reconstructions, unsplit_invert, AttackerMapping,
    InvertConfig, SurrogateInit, SurrogateTraining,
};
use crate::error::{Error, Result, StageExt};
use crate::rng::derive_seed;
use crate::verifier::assemble;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Dbscan,
}

/// One attack measurement: what was attacked, with which parameters, and
/// the headline metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub run_id: String,
    pub attack: String,
    pub params: BTreeMap<String, String>,
    pub metric_name: String,
    pub metric: f64,
    pub details: serde_json::Value,
}

impl AttackResult {
    pub fn write_csv_row<W: Write>(&self, w: W, header: bool) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        if header {
            out.write_record(["run_id", "attack", "params", "metric_name", "metric"])?;
        }
        let params = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        out.write_record([
            self.run_id.as_str(),
            self.attack.as_str(),
            params.as_str(),
            self.metric_name.as_str(),
            &self.metric.to_string(),
        ])?;
        out.flush()?;
        Ok(())
    }
}

fn base_params(cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut p = BTreeMap::new();
    p.insert(
        "epsilon".into(),
        cfg.plan.dp.epsilon.map_or("inf".into(), |e| e.to_string()),
    );
    p.insert("gamma".into(), cfg.plan.label.gamma().to_string());
    p
}

/// Clusters the cached activations `T1` receives and scores recovery of the
/// true-label groups.
pub fn attack_cluster(cfg: &RunConfig, method: ClusterMethod, min_pts: usize) -> Result<AttackResult> {
    let rel = prepare_release(cfg)?;
    cluster_release(cfg, &rel, method, min_pts)
}

pub fn cluster_release(
    cfg: &RunConfig,
    rel: &Release,
    method: ClusterMethod,
    min_pts: usize,
) -> Result<AttackResult> {
    let q = rel.map.q();
    let groups = rel.map.demask_all(&rel.pseudo_labels)?;
    let out = match method {
        ClusterMethod::Kmeans => kmeans_auto(
            &rel.cache.values,
            2..=(2 * q).max(8),
            &groups,
            q,
            derive_seed(cfg.plan.seeds.dp_noise, "attack/cluster"),
        ),
        ClusterMethod::Dbscan => dbscan(&rel.cache.values, min_pts, &groups, q),
    }
    .stage("attack")?;
    let mut params = base_params(cfg);
    params.insert("method".into(), format!("{method:?}").to_lowercase());
    if method == ClusterMethod::Dbscan {
        params.insert("min_pts".into(), min_pts.to_string());
    }
    Ok(AttackResult {
        run_id: run_id(cfg)?,
        attack: "cluster".into(),
        params,
        metric_name: "perfect_cluster_accuracy".into(),
        metric: out.perfect_accuracy,
        details: serde_json::json!({ "k_found": out.k_found }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Known,
}

/// Reconstructs the first `samples` cached rows and scores them against the
/// encoder inputs that produced them.
pub fn attack_invert(
    cfg: &RunConfig,
    samples: usize,
    init: InitMode,
    invert: &InvertConfig,
) -> Result<AttackResult> {
    let rel = prepare_release(cfg)?;
    invert_release(cfg, &rel, samples, init, invert)
}

pub fn invert_release(
    cfg: &RunConfig,
    rel: &Release,
    samples: usize,
    init: InitMode,
    invert: &InvertConfig,
) -> Result<AttackResult> {
    let n = samples.min(rel.cache.rows());
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample to invert".into()));
    }
    let idx: Vec<usize> = (0..n).collect();
    let observed = rel.cache.values.select_rows(&idx);
    let targets = rel.expanded.features.select_rows(&idx);
    let surrogate_init = match init {
        InitMode::Random => SurrogateInit::Random {
            seed: derive_seed(cfg.plan.seeds.dp_noise, "attack/invert"),
        },
        InitMode::Known => SurrogateInit::Known(rel.client.flatten_params()),
    };
    let mut icfg = invert.clone();
    icfg.clip_radius = Some(cfg.plan.dp.clip_radius);
    let out = unsplit_invert(
        &observed,
        &cfg.plan.client_dims,
        cfg.plan.encoder.activation(),
        &surrogate_init,
        &icfg,
    ).stage("attack")?;
    let side = (targets.cols() as f64).sqrt().round() as usize;
    let (ssims, mses) = score_reconstructions(&out.reconstructions, &targets, side, 1.0)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut params = base_params(cfg);
    params.insert("init".into(), format!("{init:?}").to_lowercase());
    params.insert("samples".into(), n.to_string());
    Ok(AttackResult {
        run_id: run_id(cfg)?,
        attack: "invert".into(),
        params,
        metric_name: "mean_ssim".into(),
        metric: mean(&ssims),
        details: serde_json::json!({
            "mean_mse": mean(&mses),
            "final_loss": out.loss_trace.last(),
        }),
    })
}

/// Trains the full pipeline, then extracts a surrogate through the
/// pseudo-label API with a random pseudo-to-true guess and, as a control,
/// with the true inverse map.
pub fn attack_extract(cfg: &RunConfig, surrogate: &SurrogateTraining) -> Result<AttackResult> {
    let art = run_experiment(cfg)?;
    let model = assemble(&art.client, &art.released, cfg.plan.dp.clip_radius)?;
    let victim = demasked_accuracy(&model, &art.test, &art.label_map)?;
    let map = &art.label_map;
    let seed = derive_seed(cfg.plan.seeds.dp_noise, "attack/extract");
    let probe = art.train.jittered(0.05, derive_seed(seed, "probe"));
    let api = |x: &crate::tensor::TensorF64| model.predict(x);
    let random = extraction_attack(
        api,
        map.pseudo_count(),
        &probe,
        map.q(),
        AttackerMapping::Random,
        &art.test.features,
        &art.test.labels,
        surrogate,
        seed,
    )?;
    let inverse: Vec<usize> = (0..map.pseudo_count()).map(|p| map.demask(p)).collect::<Result<_>>()?;
    let control = extraction_attack(
        api,
        map.pseudo_count(),
        &probe,
        map.q(),
        AttackerMapping::Given(&inverse),
        &art.test.features,
        &art.test.labels,
        surrogate,
        seed,
    )?;
    Ok(AttackResult {
        run_id: art.record.run_id.clone(),
        attack: "extract".into(),
        params: base_params(cfg),
        metric_name: "surrogate_true_accuracy".into(),
        metric: random.surrogate_true_accuracy,
        details: serde_json::json!({
            "queries": random.pseudo_label_queries,
            "victim_demasked_accuracy": victim,
            "control_accuracy": control.surrogate_true_accuracy,
        }),
    })
}
