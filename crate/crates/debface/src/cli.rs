//! Command-line orchestration: generate, train, evaluate, report.
//!
//! All command outputs are deterministic functions of (config, seed);
//! wall-clock timestamps are confined to sidecar files under `meta/`.

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, ModelCheckpoint};
use crate::config::{load_config, ExperimentConfig};
use crate::error::{DebfaceError, Result};
use crate::evalkit::{
    self, BiasReport, CrossDemographicReport, EmbeddingTable, PercentileReport, Provenance,
};
use crate::netcore::Attribute;
use crate::report;
use crate::synthgen::{self, LabeledSample};
use crate::trainloop::{self, Mode, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "debface",
    about = "Disentangled face-representation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Dotted-path config overrides, e.g. `train.debface.epochs=3`.
    #[arg(long = "set", global = true)]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset and print its cohort census.
    Generate,
    /// Train one model role.
    Train {
        #[arg(long)]
        mode: Mode,
    },
    /// Evaluate trained checkpoints and emit reports.
    Evaluate,
    /// Render plots from evaluation outputs.
    Report,
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.dataset.seed = seed;
        cfg.train.baseface.seed = seed;
        cfg.train.debface.seed = seed;
        cfg.train.aggregator.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train { mode } => cmd_train(&cfg, *mode),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, mode: Mode) -> PathBuf {
    let name = match mode {
        Mode::Baseface => "baseface.ckpt",
        Mode::Debface => "debface.ckpt",
        Mode::Aggregator => "debface_aggregator.ckpt",
    };
    cfg.output_dir.join("checkpoints").join(name)
}

pub fn history_path(cfg: &ExperimentConfig, mode: Mode) -> PathBuf {
    cfg.output_dir.join("history").join(format!("{mode}.jsonl"))
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("eval")
}

pub fn plots_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("plots")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DebfaceError::io(dir, e))
}

/// Wall-clock sidecar; the only place timestamps are written.
fn write_meta(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let dir = cfg.output_dir.join("meta");
    ensure_dir(&dir)?;
    let path = dir.join(format!("{command}.txt"));
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::write(&path, format!("command: {command}\nunix_time: {now}\n"))
        .map_err(|e| DebfaceError::io(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| DebfaceError::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DebfaceError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(DebfaceError::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| DebfaceError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DebfaceError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    let dataset = synthgen::make_dataset(&cfg.dataset)?;
    let dir = dataset_dir(cfg);
    ensure_dir(&dir)?;
    synthgen::write_dataset(&dir, &cfg.dataset, &dataset)?;
    write_meta(cfg, "generate")?;
    let census = synthgen::cohort_counts(&dataset)?;
    println!("dataset: {} samples at {}", dataset.len(), dir.display());
    let mut total = 0usize;
    for (key, n) in &census {
        println!(
            "cohort g{} a{} r{}: {n} samples",
            key.gender, key.age_group, key.race
        );
        total += n;
    }
    println!("total: {total}");
    Ok(())
}

fn load_split(cfg: &ExperimentConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let (_, samples) = synthgen::read_dataset(&dataset_dir(cfg))?;
    synthgen::split_by_identity(&samples, cfg.eval.train_fraction, cfg.eval.seed, false)
}

fn net_for_dataset(cfg: &ExperimentConfig) -> Result<crate::netcore::NetConfig> {
    let (dims, _) = synthgen::read_dataset(&dataset_dir(cfg))?;
    let mut net = cfg.net.clone();
    net.in_channels = dims.channels;
    net.in_height = dims.height;
    net.in_width = dims.width;
    net.k_gender = dims.genders;
    net.k_age = dims.ages;
    net.k_race = dims.races;
    Ok(net)
}

fn write_history<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| DebfaceError::Config(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| DebfaceError::io(path, e))
}

pub fn cmd_train(cfg: &ExperimentConfig, mode: Mode) -> Result<()> {
    let (train_set, _) = load_split(cfg)?;
    let net = net_for_dataset(cfg)?;
    ensure_dir(&cfg.output_dir.join("checkpoints"))?;
    ensure_dir(&cfg.output_dir.join("history"))?;
    let train_cfg: &TrainConfig = cfg.train_for(mode);
    match mode {
        Mode::Baseface | Mode::Debface => {
            let mut tc = train_cfg.clone();
            tc.mode = mode;
            let (state, history) = trainloop::train(&tc, &net, &train_set)?;
            checkpoint::save_model(
                &checkpoint_path(cfg, mode),
                &ModelCheckpoint::from_state(&state),
            )?;
            write_history(&history_path(cfg, mode), &history)?;
            if let Some(last) = history.last() {
                println!(
                    "{mode}: {} epochs, final total loss {:.6}",
                    history.len(),
                    last.total
                );
            }
        }
        Mode::Aggregator => {
            let base = checkpoint::load_model(&checkpoint_path(cfg, Mode::Debface))?;
            base.require_mode(Mode::Debface)?;
            // Rehydrate a frozen state around the checkpointed params.
            let id_classes = trainloop::identity_class_map(&train_set);
            let mut frozen =
                trainloop::TrainState::init(&base.net, Mode::Debface, train_cfg.seed, id_classes);
            frozen.encoder = base.encoder.clone();
            frozen.heads = base.heads.clone();
            let mut tc = train_cfg.clone();
            tc.mode = Mode::Aggregator;
            let (agg, history) = trainloop::train_aggregator(&tc, &frozen, &train_set)?;
            let combined = ModelCheckpoint {
                aggregator: Some(agg),
                ..base
            };
            checkpoint::save_model(&checkpoint_path(cfg, Mode::Aggregator), &combined)?;
            write_history(&history_path(cfg, mode), &history)?;
            if let Some(last) = history.last() {
                println!(
                    "aggregator: {} epochs, final triplet loss {:.6}",
                    history.len(),
                    last.triplet
                );
            }
        }
    }
    write_meta(cfg, &format!("train-{mode}"))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub overall_auc: f64,
    pub biasness_overall: f64,
    pub biasness_gender: f64,
    pub biasness_age: f64,
    pub biasness_race: f64,
    pub leakage: BTreeMap<String, f64>,
    pub heterogeneous_false_accept_share: f64,
    pub percentile_spread: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub far: f64,
    pub percentile: f64,
    pub models: BTreeMap<String, ModelSummary>,
}

fn overall_auc(table: &EmbeddingTable, policy: &evalkit::PairPolicy) -> Result<f64> {
    let rows: Vec<usize> = (0..table.len()).collect();
    let pairs = evalkit::build_pairs(&table.identity, &rows, policy, 0);
    let mut scores = Vec::with_capacity(pairs.len());
    let mut flags = Vec::with_capacity(pairs.len());
    for p in &pairs {
        scores.push(evalkit::cosine_score(
            &table.embeddings.row(p.a),
            &table.embeddings.row(p.b),
        )?);
        flags.push(p.genuine);
    }
    evalkit::roc_auc(&scores, &flags)
}

fn bias_report_text(report: &BiasReport) -> String {
    let mut out = String::new();
    writeln!(out, "bias report: {}", report.provenance).unwrap();
    writeln!(out, "cohort  gender age race  rows  genuine imposter  auc").unwrap();
    for c in &report.cohorts {
        let auc = match c.auc {
            Some(v) => format!("{v:.4}"),
            None => "absent".to_string(),
        };
        writeln!(
            out,
            "        {:>6} {:>3} {:>4}  {:>4}  {:>7} {:>8}  {auc}",
            c.cohort.gender,
            c.cohort.age_group,
            c.cohort.race,
            c.rows,
            c.genuine_pairs,
            c.imposter_pairs
        )
        .unwrap();
    }
    writeln!(out, "marginal AUCs:").unwrap();
    for m in &report.marginals {
        let auc = match m.auc {
            Some(v) => format!("{v:.4}"),
            None => "absent".to_string(),
        };
        writeln!(out, "  {:?} = {}: {auc}", m.attribute, m.value).unwrap();
    }
    writeln!(out, "biasness overall: {:.6}", report.biasness_overall).unwrap();
    writeln!(out, "biasness gender:  {:.6}", report.biasness_gender).unwrap();
    writeln!(out, "biasness age:     {:.6}", report.biasness_age).unwrap();
    writeln!(out, "biasness race:    {:.6}", report.biasness_race).unwrap();
    out
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<()> {
    let (_, eval_set) = load_split(cfg)?;
    let dir = eval_dir(cfg);
    ensure_dir(&dir)?;
    let policy = cfg.eval.pair_policy();

    let baseface = checkpoint::load_model(&checkpoint_path(cfg, Mode::Baseface))?;
    // Prefer the aggregator-bearing debface checkpoint when present.
    let agg_path = checkpoint_path(cfg, Mode::Aggregator);
    let debface = if agg_path.exists() {
        checkpoint::load_model(&agg_path)?
    } else {
        checkpoint::load_model(&checkpoint_path(cfg, Mode::Debface))?
    };
    baseface.require_mode(Mode::Baseface)?;
    debface.require_mode(Mode::Debface)?;

    let mut tables: Vec<EmbeddingTable> = vec![
        evalkit::extract_embeddings(&baseface, &eval_set, Provenance::Baseface)?,
        evalkit::extract_embeddings(&debface, &eval_set, Provenance::DebfaceId)?,
    ];
    if debface.aggregator.is_some() {
        tables.push(evalkit::extract_embeddings(
            &debface,
            &eval_set,
            Provenance::Demoid,
        )?);
    }

    let mut summary = EvalSummary {
        far: cfg.eval.far,
        percentile: cfg.eval.percentile,
        models: BTreeMap::new(),
    };
    let mut leakage_text = String::from("leakage probe accuracy\nmodel\tgender\tage\trace\n");
    for table in &tables {
        let prov = table.provenance.to_string();
        table.write(&dir.join(format!("{prov}.tsv")))?;

        let bias = evalkit::cohort_auc_matrix(table, &policy)?;
        write_json(&dir.join(format!("{prov}_bias.json")), &bias)?;
        std::fs::write(
            dir.join(format!("{prov}_bias.txt")),
            bias_report_text(&bias),
        )
        .map_err(|e| DebfaceError::io(&dir, e))?;
        write_history(&dir.join(format!("{prov}_cohorts.jsonl")), &bias.cohorts)?;

        let fa = evalkit::cross_demographic_false_accepts(table, &policy, cfg.eval.far)?;
        write_json(&dir.join(format!("{prov}_false_accepts.json")), &fa)?;

        let pct = evalkit::imposter_percentile_by_homogeneity(table, &policy, cfg.eval.percentile)?;
        write_json(&dir.join(format!("{prov}_percentiles.json")), &pct)?;

        let mut leakage = BTreeMap::new();
        for attr in [Attribute::Gender, Attribute::Age, Attribute::Race] {
            let acc = evalkit::leakage_probe(table, attr, cfg.eval.seed)?;
            leakage.insert(format!("{attr:?}").to_lowercase(), acc);
        }
        writeln!(
            leakage_text,
            "{prov}\t{:.4}\t{:.4}\t{:.4}",
            leakage["gender"], leakage["age"], leakage["race"]
        )
        .unwrap();

        summary.models.insert(
            prov,
            ModelSummary {
                overall_auc: overall_auc(table, &policy)?,
                biasness_overall: bias.biasness_overall,
                biasness_gender: bias.biasness_gender,
                biasness_age: bias.biasness_age,
                biasness_race: bias.biasness_race,
                leakage,
                heterogeneous_false_accept_share: fa.heterogeneous_share,
                percentile_spread: pct.spread,
            },
        );
    }

    let estimation = evalkit::demographic_estimation_bias(&debface, &eval_set)?;
    write_json(&dir.join("estimation_bias.json"), &estimation)?;

    let leakage_map: BTreeMap<String, BTreeMap<String, f64>> = summary
        .models
        .iter()
        .map(|(k, v)| (k.clone(), v.leakage.clone()))
        .collect();
    write_json(&dir.join("leakage.json"), &leakage_map)?;
    std::fs::write(dir.join("leakage.txt"), leakage_text).map_err(|e| DebfaceError::io(&dir, e))?;
    write_json(&dir.join("summary.json"), &summary)?;

    let mut text = String::from("model comparison\n");
    for (name, m) in &summary.models {
        writeln!(
            text,
            "{name}: auc {:.4}, biasness {:.6}, hetero-FA {:.2}%, spread {:.6}",
            m.overall_auc,
            m.biasness_overall,
            m.heterogeneous_false_accept_share,
            m.percentile_spread
        )
        .unwrap();
    }
    std::fs::write(dir.join("summary.txt"), text).map_err(|e| DebfaceError::io(&dir, e))?;
    write_meta(cfg, "evaluate")?;
    println!("evaluation written to {}", dir.display());
    Ok(())
}

pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let dir = eval_dir(cfg);
    let out = plots_dir(cfg);
    ensure_dir(&out)?;
    let provenances = ["baseface", "debface_id", "demoid"];
    let mut bias_reports: Vec<BiasReport> = Vec::new();
    let mut pct_reports: Vec<PercentileReport> = Vec::new();
    for prov in provenances {
        let bias_path = dir.join(format!("{prov}_bias.json"));
        if prov != "demoid" && !bias_path.exists() {
            return Err(DebfaceError::MissingArtifact(bias_path));
        }
        if !bias_path.exists() {
            continue;
        }
        let bias: BiasReport = read_json(&bias_path)?;
        report::render_cohort_heatmap(&bias, &out.join(format!("{prov}_cohort_auc.png")))?;
        bias_reports.push(bias);

        let fa: CrossDemographicReport =
            read_json(&dir.join(format!("{prov}_false_accepts.json")))?;
        for m in &fa.matrices {
            let attr = format!("{:?}", m.attribute).to_lowercase();
            report::render_false_accept_matrix(
                m,
                &out.join(format!("{prov}_false_accepts_{attr}.png")),
            )?;
        }
        pct_reports.push(read_json(&dir.join(format!("{prov}_percentiles.json")))?);
    }
    let refs: Vec<&BiasReport> = bias_reports.iter().collect();
    report::render_marginal_bars(&refs, &out.join("marginal_auc.png"))?;
    let prefs: Vec<&PercentileReport> = pct_reports.iter().collect();
    report::render_percentile_comparison(&prefs, &out.join("percentile_comparison.png"))?;
    write_meta(cfg, "report")?;
    println!("plots written to {}", out.display());
    Ok(())
}
