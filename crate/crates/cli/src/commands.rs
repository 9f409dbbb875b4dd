use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kicrank::demo::DemoCache;
use kicrank::eval::{
    aggregate_metrics, longtail_report, retriever_metrics, EvalReport, Metrics, Pipeline, QueryResult,
};
use kicrank::gateway::Gateway;
use kicrank::prompt::{Conductor, Style, Templates};
use kicrank::retriever::{load_model, save_model, train as train_model, RetrieverModel};
use kicrank::verbalize::{load_templates, save_templates, Scheme, Verbalizer};
use kicrank::{load_dataset, Direction, KnowledgeGraph, Query, Split};

use crate::config::RunConfig;

pub const DEMOS: &str = "demos.jsonl";
pub const ALIGNED: &str = "templates.tsv";
pub const MANIFEST: &str = "preprocess.json";
pub const CHECKPOINT: &str = "retriever.ckpt";
pub const TRAINING: &str = "training.json";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const CONVERSATIONS: &str = "conversations.jsonl";
pub const RESULTS: &str = "results.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const LONGTAIL: &str = "longtail.csv";

/// What the demonstration cache was built from; predict/evaluate refuse a
/// cache built under different settings.
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    split: Split,
    style: Style,
    aligned_templates: bool,
    bm25: [f64; 2],
    entities: usize,
    relations: usize,
}

impl Manifest {
    fn of(cfg: &RunConfig, kg: &KnowledgeGraph) -> Self {
        Self {
            seed: cfg.seed,
            split: cfg.split,
            style: cfg.style(),
            aligned_templates: cfg.aligned_templates,
            bm25: [cfg.bm25.k1, cfg.bm25.b],
            entities: kg.num_entities(),
            relations: kg.num_relations(),
        }
    }
}

fn dataset(cfg: &RunConfig) -> Result<KnowledgeGraph> {
    let kg = load_dataset(&cfg.dataset).with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    log::info!(
        "dataset {}: {} entities, {} relations",
        cfg.dataset.display(),
        kg.num_entities(),
        kg.num_relations()
    );
    Ok(kg)
}

fn prompt_templates(cfg: &RunConfig) -> Result<Templates> {
    match &cfg.prompt_templates {
        Some(p) => Templates::load(p).with_context(|| format!("loading prompt templates {}", p.display())),
        None => Ok(Templates::builtin()),
    }
}

fn base_scheme(style: Style) -> Scheme {
    match style {
        Style::Freebase => Scheme::FreebaseOfJoin,
        Style::Wordnet => Scheme::WordnetInfix,
    }
}

fn require(path: &Path, what: &str, command: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "{what} {} not found; run `kicrank {command} --config <file>` first",
            path.display()
        );
    }
    Ok(())
}

fn verbalizer<'a>(cfg: &RunConfig, kg: &'a KnowledgeGraph) -> Result<Verbalizer<'a>> {
    if !cfg.aligned_templates {
        return Ok(Verbalizer::new(kg, base_scheme(cfg.style())));
    }
    let path = cfg.path(ALIGNED);
    require(&path, "aligned templates", "preprocess")?;
    let templates = load_templates(&path, kg).with_context(|| format!("loading {}", path.display()))?;
    Ok(Verbalizer::new(kg, Scheme::Aligned)
        .with_templates(templates)
        .with_fallback_templates())
}

fn queries(cfg: &RunConfig, kg: &KnowledgeGraph) -> Vec<Query> {
    let mut qs = kg.make_queries(cfg.split);
    if let Some(n) = cfg.limit {
        qs.truncate(n);
    }
    qs
}

fn gateway(cfg: &RunConfig, queries: &[Query]) -> Result<Gateway> {
    Ok(Gateway::new(cfg.gateway.clone())
        .context("starting the LLM gateway")?
        .with_oracle_queries(queries))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn finish_gateway(gw: &Gateway) -> Result<()> {
    if gw.config().cache_path.is_some() {
        let n = gw.flush_cache().context("flushing the response cache")?;
        log::info!("response cache: {n} entries");
    }
    log::info!("gateway: {:?}", gw.stats());
    Ok(())
}

/// Demonstration orders for the configured split and, when enabled,
/// aligned relation templates.
pub fn preprocess(cfg: &RunConfig) -> Result<()> {
    let kg = dataset(cfg)?;
    let analogy = DemoCache::build_analogy(&kg, cfg.seed);
    let mut verbalizer = Verbalizer::new(&kg, base_scheme(cfg.style()));
    if cfg.aligned_templates {
        let gw = gateway(cfg, &[])?;
        let templates_cfg = prompt_templates(cfg)?;
        let prompt = cfg.prompt();
        let conductor = Conductor::new(&verbalizer, &templates_cfg, &prompt);
        let mut aligned = HashMap::new();
        let mut fallbacks = 0;
        for (&r, ids) in &analogy {
            let order: Vec<_> = ids.iter().map(|&i| kg.triple_by_id(i)).collect();
            let out = conductor
                .align_relation(r, &order, &gw)
                .with_context(|| format!("aligning relation {}", kg.relation_name(r)))?;
            fallbacks += usize::from(out.fallback);
            aligned.insert(r, out.template);
        }
        finish_gateway(&gw)?;
        let path = cfg.path(ALIGNED);
        save_templates(&path, &kg, &aligned).with_context(|| format!("writing {}", path.display()))?;
        log::info!(
            "{} aligned templates ({fallbacks} fallbacks) -> {}",
            aligned.len(),
            path.display()
        );
        verbalizer = Verbalizer::new(&kg, Scheme::Aligned).with_templates(aligned);
    }
    let mut cache = DemoCache::build(&kg, &verbalizer, &kg.make_queries(cfg.split), cfg.seed, cfg.bm25);
    cache.analogy = analogy;
    let path = cfg.path(DEMOS);
    cache
        .save(&path, &kg)
        .with_context(|| format!("writing {}", path.display()))?;
    write_json(&cfg.path(MANIFEST), &Manifest::of(cfg, &kg))?;
    log::info!(
        "{} analogy orders, {} supplement orders -> {}",
        cache.analogy.len(),
        cache.supplement.len(),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainingSummary {
    steps: usize,
    first_loss: Option<f64>,
    final_loss: Option<f64>,
    max_modulus_deviation: f64,
    valid: Option<Metrics>,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let kg = dataset(cfg)?;
    let mut model = cfg.retriever.init_model(&kg);
    let report = train_model(&mut model, &kg, &cfg.retriever).context("training the retriever")?;
    let path = cfg.path(CHECKPOINT);
    save_model(&model, &path).with_context(|| format!("writing {}", path.display()))?;
    let valid = kg.make_queries(Split::Valid);
    let summary = TrainingSummary {
        steps: report.steps,
        first_loss: report.losses.first().copied(),
        final_loss: report.losses.last().copied(),
        max_modulus_deviation: report.max_modulus_deviation,
        valid: if valid.is_empty() {
            None
        } else {
            Some(retriever_metrics(&kg, &model, &valid)?)
        },
    };
    write_json(&cfg.path(TRAINING), &summary)?;
    if let Some(m) = &summary.valid {
        log::info!("valid filtered MRR {:.4}, Hits@10 {:.4}", m.mrr, m.hits10);
    }
    log::info!("checkpoint -> {}", path.display());
    Ok(())
}

fn model(cfg: &RunConfig, kg: &KnowledgeGraph) -> Result<RetrieverModel> {
    let path = cfg.path(CHECKPOINT);
    require(&path, "retriever checkpoint", "train")?;
    let model = load_model(&path).with_context(|| format!("loading {}", path.display()))?;
    if model.num_entities() != kg.num_entities() || model.num_relations() != kg.num_relations() {
        bail!(
            "checkpoint {} was trained on a different graph; rerun `kicrank train`",
            path.display()
        );
    }
    Ok(model)
}

fn demo_cache(cfg: &RunConfig, kg: &KnowledgeGraph) -> Result<DemoCache> {
    let path = cfg.path(DEMOS);
    require(&path, "demonstration cache", "preprocess")?;
    let manifest_path = cfg.path(MANIFEST);
    require(&manifest_path, "preprocess manifest", "preprocess")?;
    let text = fs::read_to_string(&manifest_path)?;
    let found: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    if found != Manifest::of(cfg, kg) {
        bail!(
            "{} was built with different settings (seed, split, style, alignment or BM25); rerun `kicrank preprocess`",
            path.display()
        );
    }
    DemoCache::load(&path, kg).with_context(|| format!("loading {}", path.display()))
}

fn run(cfg: &RunConfig) -> Result<(KnowledgeGraph, Vec<QueryResult>)> {
    let mut results = Vec::new();
    let kg = with_pipeline(cfg, |pipeline, qs, gw| {
        if cfg.save_conversations {
            let convs = qs
                .iter()
                .enumerate()
                .map(|(i, q)| pipeline.conversation(i, q))
                .collect::<Result<Vec<_>, _>>()?;
            write_jsonl(&cfg.path(CONVERSATIONS), &convs)?;
        }
        log::info!("re-ranking {} queries (m = {}, {} mode)", qs.len(), cfg.m, cfg.mode());
        results = pipeline.run(qs, gw)?.0;
        Ok(())
    })?;
    Ok((kg, results))
}

fn with_pipeline(
    cfg: &RunConfig,
    body: impl FnOnce(&Pipeline<'_>, &[Query], &Gateway) -> Result<()>,
) -> Result<KnowledgeGraph> {
    let kg = dataset(cfg)?;
    let model = model(cfg, &kg)?;
    let cache = demo_cache(cfg, &kg)?;
    let verbalizer = verbalizer(cfg, &kg)?;
    let templates = prompt_templates(cfg)?;
    let qs = queries(cfg, &kg);
    if qs.is_empty() {
        bail!("the {:?} split has no queries", cfg.split);
    }
    let gw = gateway(cfg, &qs)?;
    let pipeline = Pipeline {
        kg: &kg,
        model: &model,
        verbalizer: &verbalizer,
        templates: &templates,
        demos: Some(&cache),
        config: cfg.pipeline(),
    };
    body(&pipeline, &qs, &gw)?;
    finish_gateway(&gw)?;
    Ok(kg)
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let (kg, results) = run(cfg)?;
    let names = |v: &[kicrank::EntityId]| v.iter().map(|&e| kg.entity_name(e)).collect::<Vec<_>>();
    let rows = results.iter().map(|r| {
        let q = &r.query;
        serde_json::json!({
            "direction": q.direction,
            "anchor": kg.entity_name(q.anchor),
            "relation": kg.relation_name(q.relation),
            "candidates": names(&r.top_m_before),
            "reranked": names(&r.r_llm),
            "repairs": r.repairs,
        })
    });
    let path = cfg.path(PREDICTIONS);
    write_jsonl(&path, rows)?;
    log::info!("{} predictions -> {}", results.len(), path.display());
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (kg, results) = run(cfg)?;
    let report = EvalReport::from_results(&results, &kg)?;
    write_jsonl(&cfg.path(RESULTS), results.iter().map(|r| r.record(&kg)))?;
    write_json(&cfg.path(REPORT_JSON), &report)?;
    fs::write(cfg.path(REPORT_CSV), report.to_csv())?;
    let m = &report.metrics;
    let b = &report.retriever;
    println!("queries   {}", report.count);
    println!("            MRR     Hits@1  Hits@3  Hits@10");
    println!(
        "retriever   {:.4}  {:.4}  {:.4}  {:.4}",
        b.mrr, b.hits1, b.hits3, b.hits10
    );
    println!(
        "re-ranked   {:.4}  {:.4}  {:.4}  {:.4}",
        m.mrr, m.hits1, m.hits3, m.hits10
    );
    println!(
        "repairs   dropped {} appended {} clamped {} hard failures {}",
        report.repairs.dropped, report.repairs.appended, report.repairs.clamped, report.repairs.hard_failures
    );
    Ok(())
}

#[derive(Deserialize)]
struct RecordQuery {
    direction: Direction,
    anchor: String,
    relation: String,
    answer: String,
}

#[derive(Deserialize)]
struct Record {
    query: RecordQuery,
    filtered_rank: usize,
    retriever_filtered_rank: usize,
}

/// Lowest and highest degree in group `g` (degrees `2^g - 1 ..= 2^(g+1) - 2`).
fn group_bounds(g: u32) -> (u64, u64) {
    ((1u64 << g) - 1, (1u64 << (g + 1)) - 2)
}

/// Degree-grouped metrics of the last evaluation, re-ranked and retriever-only.
pub fn longtail(cfg: &RunConfig) -> Result<()> {
    let kg = dataset(cfg)?;
    let path = cfg.path(RESULTS);
    require(&path, "evaluation results", "evaluate")?;
    let text = fs::read_to_string(&path)?;
    let mut reranked = Vec::new();
    let mut retriever = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: Record = serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let lookup = |kind: &str, found: Option<u32>, name: &str| {
            found.with_context(|| format!("{}:{}: unknown {kind} `{name}`", path.display(), i + 1))
        };
        let q = &rec.query;
        let anchor = lookup("entity", kg.entity(&q.anchor).map(|e| e.0), &q.anchor)?;
        let answer = lookup("entity", kg.entity(&q.answer).map(|e| e.0), &q.answer)?;
        let relation = lookup("relation", kg.relation(&q.relation).map(|r| r.0), &q.relation)?;
        let query = Query {
            direction: q.direction,
            anchor: kicrank::EntityId(anchor),
            relation: kicrank::RelationId(relation),
            answer: kicrank::EntityId(answer),
        };
        let result = |rank| QueryResult {
            query,
            top_m_before: Vec::new(),
            r_llm: Vec::new(),
            filtered_rank: rank,
            retriever_filtered_rank: rank,
            repairs: Default::default(),
        };
        reranked.push(result(rec.filtered_rank));
        retriever.push(result(rec.retriever_filtered_rank));
    }
    if reranked.is_empty() {
        bail!("{} is empty; rerun `kicrank evaluate`", path.display());
    }
    let mut out = String::from("system,group,min_degree,max_degree,metric,value\n");
    for (system, results) in [("reranked", &reranked), ("retriever", &retriever)] {
        let ranks: Vec<usize> = results.iter().map(|r| r.filtered_rank).collect();
        let all = aggregate_metrics(&ranks)?;
        let mut emit = |group: &str, lo: &str, hi: &str, m: &Metrics| {
            for (name, v) in m.rows() {
                out.push_str(&format!("{system},{group},{lo},{hi},{name},{v}\n"));
            }
            out.push_str(&format!("{system},{group},{lo},{hi},count,{}\n", m.count));
        };
        emit("all", "", "", &all);
        for (g, m) in longtail_report(results, &kg) {
            let (lo, hi) = group_bounds(g);
            emit(&g.to_string(), &lo.to_string(), &hi.to_string(), &m);
        }
    }
    let out_path = cfg.path(LONGTAIL);
    fs::write(&out_path, out).with_context(|| format!("writing {}", out_path.display()))?;
    log::info!("long-tail report -> {}", out_path.display());
    Ok(())
}
