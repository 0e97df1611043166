use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use geounify_core::fixtures::MANIFEST_NAME;
use geounify_core::gradsuite::{gradient_suite, SuiteOptions};
use geounify_core::pipeline::{
    build_index, evaluate, run_query, run_split_traced, train_bundle, Stage, DESCRIPTOR_MODEL, UNIFIED_MODEL,
};
use geounify_core::train::last_checkpoint;
use geounify_core::{
    Bundle, Dataset, Engine, Error, FeatureSet, GroundTruthLabel, Index, PipelineConfig, QueryResult, Split,
    TrainOptions, TrainState,
};

use crate::{CliError, CliResult, Cli, Command, DataArgs, IndexAction, SplitArg};

pub const CONFIG_NAME: &str = "config.toml";
pub const RESULTS_NAME: &str = "results.jsonl";
pub const LABELS_NAME: &str = "labels.json";
pub const REPORT_NAME: &str = "report.json";
const INDEX_NAME: &str = "index.guix";

/// Where each command reads and writes under `--out`.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn fixtures(&self) -> PathBuf {
        self.root.join("fixtures")
    }

    pub fn adversarial(&self) -> PathBuf {
        self.root.join("fixtures_adversarial")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn index(&self) -> PathBuf {
        self.root.join(INDEX_NAME)
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }

    pub fn run(&self) -> PathBuf {
        self.root.join("run")
    }
}

pub(crate) fn dispatch(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let layout = Layout { root: cli.global.out.clone() };
    match &cli.command {
        Command::Fixtures(a) => fixtures(&cfg, &layout, a.force, a.adversarial),
        Command::Encode(a) => encode(&cfg, &layout, &a.data, a.split, a.detail, a.force),
        Command::Index { action } => match action {
            IndexAction::Build { features } => index_build(&cfg, &layout, features.as_deref()),
            IndexAction::Query { query, k, features } => index_query(&cfg, &layout, query, *k, features.as_deref()),
        },
        Command::Train(a) => train(&cfg, &layout, a),
        Command::Run(a) => run(cfg, &layout, a),
        Command::Eval(a) => eval(&layout, a.run.as_deref(), a.table),
        Command::Gradcheck(a) => gradcheck(a.samples, a.probe_seed),
    }
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.global.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
        cfg.fixture.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_NAME);
    std::fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_file(path: &Path) -> CliResult<String> {
    Ok(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn is_non_empty_dir(dir: &Path) -> CliResult<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    Ok(std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some())
}

fn load_dataset(cfg: &PipelineConfig, layout: &Layout, data: &DataArgs) -> CliResult<Dataset> {
    let dir = data.fixtures.clone().unwrap_or_else(|| layout.fixtures());
    if !dir.join(MANIFEST_NAME).exists() {
        return Err(CliError::Usage(format!(
            "no fixtures at {}; run `geounify fixtures` first",
            dir.display()
        )));
    }
    let ds = Dataset::load(&dir)?;
    if ds.spec != cfg.fixture {
        return Err(CliError::Usage(format!(
            "fixtures at {} were generated from a different fixture spec than the config",
            dir.display()
        )));
    }
    Ok(ds)
}

fn load_bundle(cfg: &PipelineConfig, layout: &Layout) -> CliResult<Bundle> {
    let dir = layout.model();
    if !dir.join(UNIFIED_MODEL).exists() && !dir.join(DESCRIPTOR_MODEL).exists() {
        return Err(CliError::Usage(format!(
            "no trained model in {}; run `geounify train` first",
            dir.display()
        )));
    }
    Ok(Bundle::load(&dir, cfg)?)
}

fn fixtures(cfg: &PipelineConfig, layout: &Layout, force: bool, adversarial: bool) -> CliResult<()> {
    let (ds, dir) = if adversarial {
        (Dataset::generate_adversarial(&cfg.fixture)?, layout.adversarial())
    } else {
        (Dataset::generate(&cfg.fixture)?, layout.fixtures())
    };
    ds.write(&dir, force)?;
    write_config(&dir, cfg)?;
    println!(
        "wrote {} tiles, {} test and {} train queries to {}",
        ds.tiles.len(),
        ds.split(Split::Test).count(),
        ds.split(Split::Train).count(),
        dir.display()
    );
    Ok(())
}

fn encode(
    cfg: &PipelineConfig,
    layout: &Layout,
    data: &DataArgs,
    split: SplitArg,
    detail: bool,
    force: bool,
) -> CliResult<()> {
    let ds = load_dataset(cfg, layout, data)?;
    let bundle = load_bundle(cfg, layout)?;
    let model = if detail { bundle.detail() } else { &bundle.retrieval };
    let splits = match split {
        SplitArg::Test => vec![Split::Test],
        SplitArg::Train => vec![Split::Train],
        SplitArg::All => vec![Split::Test, Split::Train],
    };
    let fs = FeatureSet::encode(model, &ds, &splits)?;
    let dir = layout.features();
    fs.export(&dir, force)?;
    write_config(&dir, cfg)?;
    println!("encoded {} tiles and {} queries to {}", fs.tiles.len(), fs.queries.len(), dir.display());
    Ok(())
}

fn index_build(cfg: &PipelineConfig, layout: &Layout, features: Option<&Path>) -> CliResult<()> {
    let fs = FeatureSet::ingest(features.map_or_else(|| layout.features(), Path::to_path_buf))?;
    let bundle = load_bundle(cfg, layout)?;
    let index = build_index(&bundle.retrieval, &fs)?;
    let path = layout.index();
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    index.save(&path)?;
    println!("indexed {} tiles of dimension {} to {}", index.len(), index.dim(), path.display());
    Ok(())
}

fn index_query(
    cfg: &PipelineConfig,
    layout: &Layout,
    query: &str,
    k: usize,
    features: Option<&Path>,
) -> CliResult<()> {
    let path = layout.index();
    if !path.exists() {
        return Err(CliError::Usage(format!("no index at {}; run `geounify index build` first", path.display())));
    }
    let index = Index::load(&path)?;
    let fs = FeatureSet::ingest(features.map_or_else(|| layout.features(), Path::to_path_buf))?;
    let q = fs
        .queries
        .iter()
        .find(|q| q.label.query_id == query)
        .ok_or_else(|| CliError::Usage(format!("query {query} has no features")))?;
    let bundle = load_bundle(cfg, layout)?;
    let heads = bundle.retrieval.ground_heads(&q.features)?;
    let hits = index.knn_query(&heads.descriptor, k)?;
    let mut out = std::io::stdout().lock();
    for (rank, h) in hits.hits.iter().enumerate() {
        let line = serde_json::json!({
            "rank": rank + 1,
            "image_id": h.image_id,
            "score": h.score,
            "distance": h.distance,
        });
        writeln!(out, "{line}").map_err(|e| Error::io("stdout", e))?;
    }
    Ok(())
}

fn train(cfg: &PipelineConfig, layout: &Layout, a: &crate::TrainArgs) -> CliResult<()> {
    let ds = load_dataset(cfg, layout, &a.data)?;
    let dir = layout.model();
    if !a.resume && is_non_empty_dir(&dir)? {
        if !a.force {
            return Err(Error::Exists(dir).into());
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_config(&dir, cfg)?;
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        stop_after: a.stop_after,
        resume: a.resume,
        verbose: !a.quiet,
    };
    let t = Instant::now();
    let bundle = train_bundle(cfg, &ds, &opts)?;
    let runs: Vec<PathBuf> = if cfg.train.unified {
        vec![dir.clone()]
    } else {
        vec![dir.join("descriptor"), dir.join("detail")]
    };
    let mut finished = true;
    for r in &runs {
        finished &= TrainState::load(last_checkpoint(r), cfg)?.finished(cfg);
    }
    if finished {
        bundle.save(&dir, cfg)?;
        println!("trained in {:.1}s; model saved to {}", t.elapsed().as_secs_f64(), dir.display());
    } else {
        println!("stopped early; continue with `geounify train --resume`");
    }
    Ok(())
}

fn run(mut cfg: PipelineConfig, layout: &Layout, a: &crate::RunArgs) -> CliResult<()> {
    if let Some(k) = a.k {
        cfg.run.k = k;
    }
    if a.no_rerank {
        cfg.run.rerank = false;
    }
    cfg.validate()?;
    let bundle = load_bundle(&cfg, layout)?;
    let (fr, fd) = match &a.features {
        Some(path) => {
            if !bundle.is_unified() {
                return Err(CliError::Usage("ingested features need a unified model".into()));
            }
            (FeatureSet::ingest(path)?, None)
        }
        None => {
            let ds = load_dataset(&cfg, layout, &a.data)?;
            let fr = FeatureSet::encode(&bundle.retrieval, &ds, &[Split::Test])?;
            let fd = match &bundle.detail {
                Some(m) => Some(FeatureSet::encode(m, &ds, &[Split::Test])?),
                None => None,
            };
            (fr, fd)
        }
    };
    let engine = Engine::new(
        Stage { model: &bundle.retrieval, features: &fr },
        Stage { model: bundle.detail(), features: fd.as_ref().unwrap_or(&fr) },
    )?;
    if let Some(id) = &a.query {
        let qi = fr
            .queries
            .iter()
            .position(|q| q.label.query_id == *id)
            .ok_or_else(|| CliError::Usage(format!("query {id} has no features")))?;
        let (result, _) = run_query(&engine, qi, &cfg.run)?;
        println!("{}", serde_json::to_string_pretty(&result).map_err(Error::from)?);
        return Ok(());
    }
    let traced = run_split_traced(&engine, Split::Test, &cfg.run)?;
    let labels = fr.labels(Split::Test);
    let results: Vec<QueryResult> = traced.iter().map(|(r, _)| r.clone()).collect();
    let report = evaluate(&results, &labels, &cfg.run)?;

    let dir = layout.run();
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_config(&dir, &cfg)?;
    let mut lines = String::new();
    for r in &results {
        lines.push_str(&serde_json::to_string(r).map_err(Error::from)?);
        lines.push('\n');
    }
    write_file(&dir.join(RESULTS_NAME), lines.as_bytes())?;
    write_file(&dir.join(LABELS_NAME), serde_json::to_string_pretty(&labels).map_err(Error::from)?.as_bytes())?;
    write_file(&dir.join(REPORT_NAME), report.to_json().as_bytes())?;
    if a.traces {
        let traces = dir.join("traces");
        std::fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
        for (r, d) in &traced {
            d.d.save(traces.join(format!("{}.gutn", r.query_id)))?;
        }
    }
    print!("{}", report.to_table());
    Ok(())
}

fn eval(layout: &Layout, run_dir: Option<&Path>, table: bool) -> CliResult<()> {
    let dir = run_dir.map_or_else(|| layout.run(), Path::to_path_buf);
    let results_path = dir.join(RESULTS_NAME);
    if !results_path.exists() {
        return Err(CliError::Usage(format!("no stored run at {}; run `geounify run` first", dir.display())));
    }
    let cfg = PipelineConfig::load(dir.join(CONFIG_NAME))?;
    let mut results = Vec::new();
    for (i, line) in read_file(&results_path)?.lines().enumerate() {
        let r: QueryResult = serde_json::from_str(line)
            .map_err(|e| Error::corrupt(&results_path, format!("line {}: {e}", i + 1)))?;
        results.push(r);
    }
    let labels_path = dir.join(LABELS_NAME);
    let labels: Vec<GroundTruthLabel> =
        serde_json::from_str(&read_file(&labels_path)?).map_err(|e| Error::corrupt(&labels_path, e.to_string()))?;
    let report = evaluate(&results, &labels, &cfg.run)?;
    let json = report.to_json();
    let stored = dir.join(REPORT_NAME);
    if stored.exists() && read_file(&stored)? != json {
        return Err(CliError::Internal(format!("recomputed report differs from {}", stored.display())));
    }
    if table {
        print!("{}", report.to_table());
    } else {
        println!("{json}");
    }
    Ok(())
}

fn gradcheck(samples: usize, seed: u64) -> CliResult<()> {
    if samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let t = Instant::now();
    let report = gradient_suite(&SuiteOptions { samples, seed })?;
    print!("{}", report.render());
    let failed = report.groups.iter().filter(|g| !g.passed).count();
    println!(
        "{} groups, {failed} failed, max rel err {:.3e}, {:.1}s",
        report.groups.len(),
        report.max_rel_err(),
        t.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::Internal(format!("gradient check failed in {failed} groups")));
    }
    Ok(())
}
