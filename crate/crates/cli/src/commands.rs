//! Batch commands behind the `partaog` binary.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use partaog::eval::{evaluate, EvalRecord, EvalSummary};
use partaog::fmap::{Corpus, NormStatistic};
use partaog::miner::{learn_model, MinerConfig};
use partaog::model::{load_model, save_model, ScoreWeights};
use partaog::oracle::{OracleRecord, ScriptedOracle};
use partaog::parser::{parse_all, ParseRecord};
use partaog::qa::{run_session, QaConfig, QaSession};
use partaog::records::{read_jsonl, write_jsonl, AnnotationRecord};
use partaog::stats::pattern_activation_stats;
use partaog::synth::{synth_generate, write_synth, SynthSpec};

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let corpus = Corpus::load_dir(dir, NormStatistic::MeanPositive)
        .with_context(|| format!("loading feature maps from {}", dir.display()))?;
    if corpus.is_empty() {
        bail!("no .fmap files in {}", dir.display());
    }
    Ok(corpus)
}

fn read_model(path: &Path) -> Result<partaog::model::AogModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_model(&text).with_context(|| format!("loading model {}", path.display()))
}

fn write_model(path: &Path, model: &partaog::model::AogModel) -> Result<()> {
    fs::write(path, save_model(model)?).with_context(|| format!("writing {}", path.display()))
}

pub struct LearnArgs<'a> {
    pub fmaps: &'a Path,
    pub annotations: &'a Path,
    pub out: &'a Path,
    pub layers: usize,
    pub epsilon: usize,
    pub part: &'a str,
}

pub fn learn(a: &LearnArgs<'_>) -> Result<()> {
    let corpus = load_corpus(a.fmaps)?;
    let records: Vec<AnnotationRecord> =
        read_jsonl(a.annotations).with_context(|| format!("reading {}", a.annotations.display()))?;
    let cfg = MinerConfig {
        valid_layers: a.layers,
        epsilon_cells: a.epsilon,
        ..MinerConfig::default()
    };
    let model = learn_model(a.part, &corpus, &records, &cfg, ScoreWeights::default())?;
    write_model(a.out, &model)
}

/// Parses every image in `fmaps`; activations are normalized with that directory's own
/// corpus statistics.
pub fn parse(model: &Path, fmaps: &Path, out: &Path) -> Result<()> {
    let model = read_model(model)?;
    let corpus = load_corpus(fmaps)?;
    let parses = parse_all(&model, corpus.maps())?;
    let records: Vec<ParseRecord> = parses.iter().map(ParseRecord::from).collect();
    write_jsonl(out, &records).with_context(|| format!("writing {}", out.display()))
}

pub struct QaRunArgs<'a> {
    pub fmaps: &'a Path,
    pub oracle: &'a Path,
    pub budget: usize,
    pub out: &'a Path,
    pub log: &'a Path,
    pub config: QaConfig,
    pub part: &'a str,
}

pub fn qa_run(a: QaRunArgs<'_>) -> Result<()> {
    let corpus = Arc::new(load_corpus(a.fmaps)?);
    let mut oracle = ScriptedOracle::load(a.oracle).with_context(|| format!("reading {}", a.oracle.display()))?;
    let config = QaConfig {
        budget: a.budget,
        ..a.config
    };
    let (model, log) = run_session(corpus, a.part, &mut oracle, config)?;
    write_model(a.out, &model)?;
    write_jsonl(a.log, &log).with_context(|| format!("writing {}", a.log.display()))
}

pub fn new_session(fmaps: &Path, budget: usize, part: &str, config: QaConfig) -> Result<QaSession> {
    let corpus = Arc::new(load_corpus(fmaps)?);
    Ok(QaSession::new(corpus, part, QaConfig { budget, ..config })?)
}

/// Per-image records and their summary.
pub fn eval(parses: &Path, oracle: &Path) -> Result<(Vec<EvalRecord>, EvalSummary)> {
    let parses: Vec<ParseRecord> = read_jsonl(parses).with_context(|| format!("reading {}", parses.display()))?;
    let truth: Vec<OracleRecord> = read_jsonl(oracle).with_context(|| format!("reading {}", oracle.display()))?;
    let records = evaluate(&parses, &truth)?;
    let summary = EvalSummary::of(&records);
    Ok((records, summary))
}

pub fn synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    let corpus = synth_generate(spec)?;
    write_synth(spec, &corpus, out).with_context(|| format!("writing {}", out.display()))
}

pub fn read_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub const STATS_HEADER: [&str; 6] = [
    "image_id",
    "layer",
    "inferred_units",
    "energy_ratio",
    "relative_magnitude",
    "activation_ratio",
];

/// One CSV row per image and layer holding inferred units.
pub fn stats<W: Write>(model: &Path, fmaps: &Path, out: W) -> Result<()> {
    let model = read_model(model)?;
    let corpus = load_corpus(fmaps)?;
    let parses = parse_all(&model, corpus.maps())?;
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(STATS_HEADER)?;
    for (parse, fmap) in parses.iter().zip(corpus.maps()) {
        for s in pattern_activation_stats(&model, parse, fmap)? {
            csv.write_record([
                parse.image_id.clone(),
                s.layer,
                s.inferred_units.to_string(),
                s.energy_ratio.to_string(),
                s.relative_magnitude.to_string(),
                s.activation_ratio.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}
