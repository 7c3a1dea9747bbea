use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use speechllm_core::annotate::{
    self, mock, AnnotateOptions, AnnotatorClient, FilterConfig, FilterReport, HttpClient,
    PromptSpec, RetryPolicy, Verifier,
};
use speechllm_core::beam::DecodeConfig;
use speechllm_core::checkpoint;
use speechllm_core::codec::EntityTag;
use speechllm_core::corpus::{Corpus, CorpusConfig};
use speechllm_core::data::{load_manifest, write_manifest, Utterance};
use speechllm_core::metrics::{slue_score, MetricsReport, SlueInputs};
use speechllm_core::regularizer::pos_weights;
use speechllm_core::tokenizer::Task;
use speechllm_core::trainer::{
    decode_all, encode_all, run_curriculum, score_ner, score_sa, score_wer, Curriculum, Prediction,
    PresetScale,
};

#[derive(Parser)]
#[command(name = "speechllm", version, about = "Speech-to-LLM adapter toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training curriculum.
    Train(TrainArgs),
    /// Decode a manifest with a checkpoint.
    Decode(DecodeArgs),
    /// Score predictions against a gold manifest.
    Score(ScoreArgs),
    /// Annotate transcripts with entities and filter the result.
    Annotate(AnnotateArgs),
    /// Count entity spans per tag in manifests.
    Stats(StatsArgs),
    /// Write a synthetic desk corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of random, ls-asr, ls-asr+ner.
    #[arg(long)]
    preset: Option<String>,
    /// Corpus directory for presets.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_scale)]
    scale: Option<PresetScale>,
    #[arg(long, env = "SPEECHLLM_SEED")]
    seed: Option<u64>,
    /// Override every stage's epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

fn parse_scale(s: &str) -> std::result::Result<PresetScale, String> {
    match s {
        "desk" => Ok(PresetScale::Desk),
        "full" => Ok(PresetScale::Full),
        _ => Err(format!("expected desk or full, got {s:?}")),
    }
}

/// Train config file; all fields optional so flags can fill the gaps.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    preset: Option<String>,
    data_dir: Option<PathBuf>,
    scale: Option<PresetScale>,
    seed: Option<u64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    decode: Option<DecodeConfig>,
    curriculum: Option<Curriculum>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_curriculum(a: &TrainArgs) -> Result<Curriculum> {
    let file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    let seed = a.seed.or(file.seed);
    let preset = a.preset.clone().or_else(|| file.preset.clone());
    let mut c = match (&preset, file.curriculum) {
        (Some(name), curriculum) => {
            if a.preset.is_none() && curriculum.is_some() {
                bail!("config sets both preset and curriculum");
            }
            let data = a
                .data
                .clone()
                .or(file.data_dir)
                .context("data_dir (or --data) is required with a preset")?;
            let scale = a.scale.or(file.scale).unwrap_or(PresetScale::Desk);
            Curriculum::preset(name, &data, scale, seed.unwrap_or(0))?
        }
        (None, Some(mut c)) => {
            if let Some(s) = seed {
                c.model_seed = s;
                for (k, st) in c.stages.iter_mut().enumerate() {
                    st.seed = s.wrapping_add(k as u64 + 1);
                }
            }
            c
        }
        (None, None) => bail!("give --preset or a config with a curriculum"),
    };
    if let Some(d) = file.decode {
        c.decode = d;
    }
    for st in &mut c.stages {
        if let Some(e) = a.epochs.or(file.epochs) {
            st.epochs = e;
        }
        if let Some(lr) = a.lr.or(file.lr) {
            st.lr = lr;
        }
        if let Some(b) = a.batch_size.or(file.batch_size) {
            st.batch_size = b;
        }
    }
    c.validate()?;
    check_paths(&c)?;
    Ok(c)
}

/// Fails with the config field naming the first missing manifest.
fn check_paths(c: &Curriculum) -> Result<()> {
    let mut paths = vec![("test_manifest".to_string(), &c.test_manifest)];
    for (i, s) in c.stages.iter().enumerate() {
        paths.push((format!("stages[{i}].train_manifest"), &s.train_manifest));
        paths.push((format!("stages[{i}].dev_manifest"), &s.dev_manifest));
    }
    for (field, p) in paths {
        if !p.is_file() {
            bail!("{field}: {} does not exist", p.display());
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let c = resolve_curriculum(&a)?;
    log::info!("effective config: {}", serde_json::to_string(&c)?);
    let run = run_curriculum(&c, Some(&a.out))?;
    for m in &run.metas {
        log::info!(
            "stage {} selected epoch {} ({:?} {:.4})",
            m.stage,
            m.epoch,
            m.metric,
            m.dev_metric
        );
    }
    print!("{}", run.report.to_json());
    Ok(())
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    repetition_penalty: Option<f64>,
    #[arg(long)]
    length_penalty: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl DecodeFlags {
    fn apply(&self, mut d: DecodeConfig) -> DecodeConfig {
        d.beam = self.beam.unwrap_or(d.beam);
        d.temperature = self.temperature.unwrap_or(d.temperature);
        d.repetition_penalty = self.repetition_penalty.unwrap_or(d.repetition_penalty);
        d.length_penalty = self.length_penalty.unwrap_or(d.length_penalty);
        d.max_new_tokens = self.max_new_tokens.unwrap_or(d.max_new_tokens);
        d
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Predictions JSONL to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "NER")]
    task: Task,
    /// JSON decode config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: DecodeFlags,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Serialize)]
struct DecodeEcho<'a> {
    checkpoint: &'a Path,
    manifest: &'a Path,
    task: Task,
    decode: &'a DecodeConfig,
}

fn echo_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".config.json");
    out.with_file_name(name)
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => read_json(p)?,
        None => DecodeConfig::default(),
    };
    let cfg = a.flags.apply(base);
    cfg.validate()?;
    let echo = DecodeEcho {
        checkpoint: &a.checkpoint,
        manifest: &a.manifest,
        task: a.task,
        decode: &cfg,
    };
    write_file(&echo_path(&a.out), &serde_json::to_string_pretty(&echo)?)?;
    let (model, _) = checkpoint::load(&a.checkpoint, true)?;
    let utts = load_manifest(&a.manifest)?;
    let encoded = encode_all(&model, &utts)?;
    let preds = decode_all(&model, &utts, &encoded, a.task, &cfg, a.threads)?;
    let mut s = String::new();
    for p in &preds {
        s.push_str(&serde_json::to_string(p)?);
        s.push('\n');
    }
    write_file(&a.out, &s)?;
    log::info!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, required_unless_present = "slue_only")]
    gold: Option<PathBuf>,
    #[arg(long, required_unless_present = "slue_only")]
    pred: Option<PathBuf>,
    /// Score only the composite from a JSON file of the four task numbers.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["gold", "pred"])]
    slue_only: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

/// Orders `preds` as `gold`, failing on missing or unknown ids.
fn align(gold: &[Utterance], preds: Vec<Prediction>, task: Task) -> Result<Vec<Prediction>> {
    let mut by_id: BTreeMap<String, Prediction> = BTreeMap::new();
    for p in preds {
        if let Some(dup) = by_id.insert(p.id.clone(), p) {
            bail!("duplicate {task} prediction for {}", dup.id);
        }
    }
    let missing: Vec<&str> = gold
        .iter()
        .filter(|u| !by_id.contains_key(&u.id))
        .map(|u| u.id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!("{task} predictions missing ids: {}", missing.join(", "));
    }
    let out: Vec<Prediction> = gold
        .iter()
        .map(|u| by_id.remove(&u.id).expect("checked"))
        .collect();
    if !by_id.is_empty() {
        let extra: Vec<&String> = by_id.keys().collect();
        bail!("{task} predictions for ids not in gold: {extra:?}");
    }
    Ok(out)
}

fn score_files(gold: &Path, pred: &Path) -> Result<MetricsReport> {
    let gold = load_manifest(gold)?;
    let mut groups: BTreeMap<Task, Vec<Prediction>> = BTreeMap::new();
    for p in load_predictions(pred)? {
        groups.entry(p.task).or_default().push(p);
    }
    let mut aligned = BTreeMap::new();
    for (task, ps) in groups {
        aligned.insert(task, align(&gold, ps, task)?);
    }
    let Some((first_task, first)) = aligned.iter().next() else {
        bail!("{}: no predictions", pred.display());
    };
    let mut r = MetricsReport {
        utterances: gold.len(),
        wer: Some(score_wer(&gold, *first_task, first)?),
        ..Default::default()
    };
    if gold.iter().any(|u| u.tagged.is_some()) {
        let (pair, label) = score_ner(&gold, aligned.get(&Task::Ner).unwrap_or(first))?;
        r.ner = Some(pair);
        r.ner_label = Some(label);
    }
    if let Some((f1, per_class)) = score_sa(&gold, aligned.get(&Task::Sa).unwrap_or(first))? {
        r.sa_macro_f1 = Some(f1);
        r.per_class = per_class;
    }
    Ok(r)
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let report = match (&a.slue_only, &a.gold, &a.pred) {
        (Some(f), _, _) => {
            let x: SlueInputs = read_json(f)?;
            MetricsReport {
                slue: Some(slue_score(&x)),
                ..Default::default()
            }
        }
        (None, Some(g), Some(p)) => score_files(g, p)?,
        _ => bail!("give --gold and --pred, or --slue-only"),
    };
    let json = report.to_json();
    if let Some(out) = &a.out {
        write_file(out, &json)?;
    }
    print!("{json}");
    Ok(())
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON annotate config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// http, mock:echo, mock:lexicon, mock:garbage or mock:hallucinate.
    #[arg(long)]
    client: Option<String>,
    /// approve, short:N or http.
    #[arg(long)]
    verifier: Option<String>,
    #[arg(long, env = "SPEECHLLM_ANNOTATOR_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, env = "SPEECHLLM_ANNOTATOR_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Few-shot examples drawn from --pool.
    #[arg(long)]
    shots: Option<usize>,
    /// Tagged manifest to draw few-shot examples (and the mock lexicon) from.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    max_edit_distance: Option<f64>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    attempts: Option<usize>,
    #[arg(long)]
    retry_delay_ms: Option<u64>,
    #[arg(long, env = "SPEECHLLM_SEED")]
    seed: Option<u64>,
}

/// Effective annotate settings; also the config file format. The auth
/// token is never part of it.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnnotateConfig {
    client: String,
    verifier: String,
    endpoint: Option<String>,
    shots: usize,
    pool: Option<PathBuf>,
    filter: FilterConfig,
    options: AnnotateOptions,
    verify_batch: usize,
    timeout_secs: u64,
    seed: u64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            client: "mock:echo".into(),
            verifier: "approve".into(),
            endpoint: None,
            shots: 0,
            pool: None,
            filter: FilterConfig::default(),
            options: AnnotateOptions::default(),
            verify_batch: 50,
            timeout_secs: 60,
            seed: 0,
        }
    }
}

fn resolve_annotate(a: &AnnotateArgs) -> Result<AnnotateConfig> {
    let mut c: AnnotateConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AnnotateConfig::default(),
    };
    if let Some(v) = &a.client {
        c.client = v.clone();
    }
    if let Some(v) = &a.verifier {
        c.verifier = v.clone();
    }
    if a.endpoint.is_some() {
        c.endpoint = a.endpoint.clone();
    }
    if let Some(v) = a.shots {
        c.shots = v;
    }
    if a.pool.is_some() {
        c.pool = a.pool.clone();
    }
    if let Some(v) = a.max_edit_distance {
        c.filter.max_edit_distance = v;
    }
    if let Some(v) = a.parallelism {
        c.options.parallelism = v;
    }
    let retry = &mut c.options.retry;
    *retry = RetryPolicy {
        attempts: a.attempts.unwrap_or(retry.attempts),
        base_delay_ms: a.retry_delay_ms.unwrap_or(retry.base_delay_ms),
    };
    if let Some(v) = a.seed {
        c.seed = v;
    }
    Ok(c)
}

fn http_client(c: &AnnotateConfig, token: Option<String>) -> Result<HttpClient> {
    let endpoint = c
        .endpoint
        .clone()
        .context("endpoint: set --endpoint or SPEECHLLM_ANNOTATOR_ENDPOINT for the http client")?;
    Ok(HttpClient::new(
        endpoint,
        token,
        Duration::from_secs(c.timeout_secs),
    ))
}

fn build_client(
    c: &AnnotateConfig,
    input: &[Utterance],
    pool: &[Utterance],
    token: Option<String>,
) -> Result<Box<dyn AnnotatorClient>> {
    Ok(match c.client.as_str() {
        "http" => Box::new(http_client(c, token)?),
        "mock:echo" => Box::new(mock::EchoClient::from_utterances(input)?),
        "mock:lexicon" => Box::new(mock::LexiconClient::from_utterances(if pool.is_empty() {
            input
        } else {
            pool
        })),
        "mock:garbage" => Box::new(mock::GarbageClient { seed: c.seed }),
        "mock:hallucinate" => Box::new(mock::HallucinatingClient {
            inner: mock::EchoClient::from_utterances(input)?,
            targets: input
                .iter()
                .step_by(4)
                .map(|u| u.transcript.clone())
                .collect(),
            invented: (EntityTag::Place, "atlantis".into()),
        }),
        other => bail!("client: unknown annotator {other:?}"),
    })
}

fn build_verifier(c: &AnnotateConfig, token: Option<String>) -> Result<Box<dyn Verifier>> {
    Ok(match c.verifier.as_str() {
        "approve" => Box::new(mock::ApproveAll),
        "http" => Box::new(http_client(c, token)?),
        v => match v.strip_prefix("short:").map(str::parse::<usize>) {
            Some(Ok(max_len)) => Box::new(mock::ShortPhraseVerifier { max_len }),
            _ => bail!("verifier: unknown verifier {v:?}"),
        },
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i)?);
        s.push('\n');
    }
    Ok(s)
}

fn cmd_annotate(a: AnnotateArgs) -> Result<()> {
    let c = resolve_annotate(&a)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut files = Vec::new();
    let mut put = |name: &str, contents: String| -> Result<()> {
        write_file(&a.out.join(name), &contents)?;
        files.push(name.to_string());
        Ok(())
    };
    put("annotate_config.json", serde_json::to_string_pretty(&c)?)?;

    let input = load_manifest(&a.manifest)?;
    let pool = match &c.pool {
        Some(p) => load_manifest(p)?,
        None => Vec::new(),
    };
    let spec = if c.shots > 0 {
        let tagged: Vec<_> = pool.iter().filter_map(|u| u.tagged.clone()).collect();
        if tagged.is_empty() {
            bail!("pool: few-shot prompting needs a tagged pool manifest");
        }
        PromptSpec::few_shot(&annotate::balanced_fewshot(&tagged, c.shots, c.seed)?)?
    } else {
        PromptSpec::zero_shot()
    };
    put("prompt.txt", spec.render())?;
    let client = build_client(&c, &input, &pool, a.token.clone())?;
    let verifier = build_verifier(&c, a.token.clone())?;

    let items = annotate::annotate_corpus(&input, client.as_ref(), &spec, &c.options);
    put("annotations.jsonl", jsonl(&items)?)?;
    let (ok, failed): (Vec<_>, Vec<_>) = items.into_iter().partition(|i| !i.failed());
    put("failed.jsonl", jsonl(&failed)?)?;
    let (clean, first) = annotate::hallucination_filter(&ok, &c.filter);
    let (verified, second) = annotate::reverify_entities(&clean, verifier.as_ref(), c.verify_batch);
    let report = FilterReport::chain(&first, &second);
    put("filter_report.json", serde_json::to_string_pretty(&report)?)?;
    let utts: Vec<Utterance> = verified.iter().map(|i| i.to_utterance()).collect();
    write_manifest(&utts, &a.out.join("annotated.jsonl"))?;
    files.push("annotated.jsonl".into());
    files.push("files.txt".into());
    write_file(&a.out.join("files.txt"), &(files.join("\n") + "\n"))?;
    log::info!(
        "annotated {} items: {} failed, {} dropped as hallucinated, {} pairs rejected, {} kept",
        ok.len() + failed.len(),
        failed.len(),
        report.dropped_hallucination.count,
        report.dropped_reverify.count,
        report.output
    );
    if !failed.is_empty() {
        bail!(
            "{} of {} items failed after retries; see {}",
            failed.len(),
            ok.len() + failed.len(),
            a.out.join("failed.jsonl").display()
        );
    }
    Ok(())
}

#[derive(Args)]
struct StatsArgs {
    /// Manifests to count; each becomes a split named after the file stem.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
}

#[derive(Serialize)]
struct SplitStats {
    counts: BTreeMap<EntityTag, usize>,
    pos_weights: Option<BTreeMap<EntityTag, f64>>,
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let mut splits = BTreeMap::new();
    for p in &a.manifest {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        splits.insert(name, load_manifest(p)?);
    }
    let stats: BTreeMap<String, SplitStats> = annotate::dataset_stats(&splits)
        .into_iter()
        .map(|(name, counts)| {
            let pos_weights = pos_weights(&counts)
                .ok()
                .map(|w| EntityTag::ALL.iter().map(|t| (*t, w[t.index()])).collect());
            (
                name,
                SplitStats {
                    counts,
                    pos_weights,
                },
            )
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON corpus config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "SPEECHLLM_SEED")]
    seed: Option<u64>,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: CorpusConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CorpusConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let corpus = Corpus::generate(&cfg)?;
    let written = corpus.write(&a.out)?;
    write_file(
        &a.out.join("corpus_config.json"),
        &serde_json::to_string_pretty(&cfg)?,
    )?;
    log::info!("wrote {} manifests to {}", written.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Score(a) => cmd_score(a),
        Command::Annotate(a) => cmd_annotate(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
