use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use asmrag_core::calibrate::{grid_search, parse_grid};
use asmrag_core::corpus::{read_samples, write_samples, OptLevel, SampleRecord};
use asmrag_core::eval::{
    build_kb, chronological_split, evaluate, loo_opt_split, validation_samples, EvalMetrics, SplitSpec,
};
use asmrag_core::explain::{build_prompt, generate, Explanation, ExplanationRequest, ProofProvenance};
use asmrag_core::ingest::{canonicalize, parse_listing, ListingFormat};
use asmrag_core::pipeline::{build_library, prepare_sample, ScanReport, Scanner};
use asmrag_core::synth::{generate as synth_generate, library_range, SynthCorpus, SynthParams};
use asmrag_core::{
    AddrRange, Blocklist, EmbeddingVector, KnowledgeBase, LibFilter, LibIndex, Provider, SampleVerdict, Thresholds,
    Verdict,
};
use asmrag_service::{ServiceConfig, TriageService};
use serde::Serialize;

use crate::args::{
    kb_provider, read_input, write_json, EmbedArgs, GeneratorArgs, LibArgs, ListingArgs, ThresholdArgs, BLOCKLIST_FILE,
};

fn create(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    })
}

pub fn ingest(listing: &ListingArgs, out: Option<&Path>) -> Result<()> {
    let range = listing.range()?;
    let (_, functions) = listing.read()?;
    let mut w = create(out)?;
    for f in &functions {
        let c = canonicalize(f, range);
        writeln!(w, "{}", c.to_record().to_json_line())?;
    }
    w.flush()?;
    log::info!("canonicalized {} functions", functions.len());
    Ok(())
}

pub fn synth(out: &Path, params: SynthParams) -> Result<()> {
    let corpus = synth_generate(&params);
    fs::create_dir_all(out)?;
    write_samples(&out.join("corpus.jsonl"), &corpus.samples)?;
    let mut w = create(Some(&out.join("library.jsonl")))?;
    for f in &corpus.library {
        writeln!(w, "{}", canonicalize(f, library_range()).to_record().to_json_line())?;
    }
    w.flush()?;
    write_json(Some(&out.join("params.json")), &corpus.params)?;
    log::info!(
        "wrote {} samples ({} library functions at {})",
        corpus.samples.len(),
        corpus.library.len(),
        library_range()
    );
    Ok(())
}

pub fn split(corpus: &Path, out_dir: &Path, loo_opt: Option<OptLevel>, wild: Option<&Path>) -> Result<()> {
    let samples = read_samples(corpus)?;
    fs::create_dir_all(out_dir)?;
    match loo_opt {
        Some(level) => {
            let wild = match wild {
                Some(p) => read_samples(p)?,
                None => Vec::new(),
            };
            let (kb, test) = loo_opt_split(&samples, level, &wild)?;
            write_samples(&out_dir.join("kb.jsonl"), &kb)?;
            write_samples(&out_dir.join("test.jsonl"), &test)?;
            println!("kb={} test={}", kb.len(), test.len());
        }
        None => {
            ensure!(wild.is_none(), "--wild only applies to --loo-opt splits");
            let s = chronological_split(&samples, &SplitSpec::standard())?;
            write_samples(&out_dir.join("kb.jsonl"), &s.kb)?;
            write_samples(&out_dir.join("val.jsonl"), &s.val)?;
            write_samples(&out_dir.join("test.jsonl"), &s.test)?;
            println!(
                "kb={} val={} test={} unassigned={}",
                s.kb.len(),
                s.val.len(),
                s.test.len(),
                s.unassigned.len()
            );
        }
    }
    Ok(())
}

pub fn kb_build(corpus: &Path, out: &Path, embed: &EmbedArgs, lib: &LibArgs) -> Result<()> {
    let samples = read_samples(corpus)?;
    let cfg = embed.config();
    let provider = Provider::from_config(&cfg)?;
    let loaded = lib.load()?;
    let kb = build_kb(&samples, &provider, &loaded.filter())?;
    fs::create_dir_all(out)?;
    kb.save(out)?;
    cfg.save(out)?;
    print_json(&kb.stats())
}

pub fn kb_stats(kb: &Path) -> Result<()> {
    let kb = KnowledgeBase::load(kb)?;
    print_json(&kb.stats())
}

pub fn kb_promote(kb_dir: &Path, report: &Path, family: Option<&str>) -> Result<()> {
    let report = read_report(report)?;
    let v = &report.verdict;
    ensure!(v.verdict == Verdict::Malicious, "report `{}` is not malicious", v.sample_id);
    let anchor = v.anchor.as_ref().context("report has no anchor")?;
    let family = family
        .map(str::to_string)
        .or_else(|| v.c_best.clone())
        .context("no family to promote under")?;
    let mut kb = KnowledgeBase::load(kb_dir)?;
    let vector = EmbeddingVector::from_unit(anchor.vector.clone())?;
    let id = kb.promote(
        vector,
        &family,
        &v.sample_id,
        &anchor.function_name,
        Some(chrono::Utc::now().date_naive()),
        anchor.text.clone(),
    )?;
    kb.save(kb_dir)?;
    println!("promoted entry {id} ({family})");
    Ok(())
}

pub fn lib_build(
    input: &Path,
    format: ListingFormat,
    range: Option<AddrRange>,
    out: &Path,
    embed: &EmbedArgs,
) -> Result<()> {
    let bytes = read_input(input)?;
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let functions = parse_listing(&bytes, format, &format!("lib:{stem}"))?;
    ensure!(!functions.is_empty(), "library listing is empty");
    let cfg = embed.config();
    let provider = Provider::from_config(&cfg)?;
    let (index, blocklist) = build_library(&functions, range, &provider)?;
    fs::create_dir_all(out)?;
    index.save(out)?;
    fs::write(out.join(BLOCKLIST_FILE), blocklist.to_text())?;
    cfg.save(out)?;
    println!("library index: {} functions, {} blocklisted hashes", index.len(), blocklist.len());
    Ok(())
}

pub fn lib_apply(lib: &LibArgs, listing: &ListingArgs) -> Result<()> {
    ensure!(lib.lib.is_some(), "--lib is required");
    let loaded = lib.load()?;
    let dir = lib.lib.as_deref().expect("checked");
    let provider = kb_provider(dir)?;
    let (sample_id, functions) = listing.read()?;
    let prepared = prepare_sample(&sample_id, &functions, listing.range()?, &provider, &loaded.filter())?;
    let mut w = create(None)?;
    for d in &prepared.decisions {
        writeln!(w, "{}", serde_json::to_string(d)?)?;
    }
    w.flush()?;
    Ok(())
}

fn read_canonical_vectors(path: &Path, provider: &Provider) -> Result<Vec<EmbeddingVector>> {
    let functions = parse_listing(&read_input(path)?, ListingFormat::FunctionJsonl, "")?;
    let texts: Vec<String> = functions.iter().map(|f| f.lines.join("\n")).collect();
    Ok(provider.embed_batch(&texts)?)
}

#[allow(clippy::too_many_arguments)]
pub fn lib_calibrate(
    lib_dir: &Path,
    pos: &Path,
    neg: &Path,
    kb_dir: &Path,
    val: &Path,
    grid: &str,
    thresholds: &ThresholdArgs,
    out: Option<&Path>,
) -> Result<()> {
    let lib = LibIndex::load(lib_dir)?;
    let blocklist = load_blocklist(lib_dir)?;
    let kb = KnowledgeBase::load(kb_dir)?;
    let provider = kb_provider(kb_dir)?;
    let t = thresholds.thresholds()?;
    let pos = read_canonical_vectors(pos, &provider)?;
    let neg = read_canonical_vectors(neg, &provider)?;
    let val = read_samples(val)?;
    let grid = parse_grid(grid)?;
    let mut failure = None;
    let report = asmrag_core::libfilter::calibrate_tau_lib(&lib, &pos, &neg, &grid, |tau| {
        let filter = LibFilter {
            lib: Some(&lib),
            blocklist: blocklist.as_ref(),
            tau_lib: tau,
        };
        match detection_f1(&val, &kb, &provider, filter, t) {
            Ok(f1) => f1,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_json(out, &report)
}

fn detection_f1(
    val: &[SampleRecord],
    kb: &KnowledgeBase,
    provider: &Provider,
    filter: LibFilter<'_>,
    thresholds: Thresholds,
) -> Result<f64> {
    let scanner = Scanner {
        kb,
        filter,
        thresholds,
        provider,
    };
    Ok(evaluate(val, &scanner, &[1])?.detection.f1)
}

fn load_blocklist(lib_dir: &Path) -> Result<Option<Blocklist>> {
    let p = lib_dir.join(BLOCKLIST_FILE);
    if !p.is_file() {
        return Ok(None);
    }
    Ok(Some(Blocklist::parse(&fs::read_to_string(p)?)?))
}

#[derive(Serialize)]
struct ScanOutput<'a> {
    #[serde(flatten)]
    report: &'a ScanReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    explanation: Option<Explanation>,
}

pub fn scan(
    kb_dir: &Path,
    listing: &ListingArgs,
    lib: &LibArgs,
    thresholds: &ThresholdArgs,
    generator: Option<&GeneratorArgs>,
    out: Option<&Path>,
) -> Result<()> {
    let kb = KnowledgeBase::load(kb_dir)?;
    let provider = kb_provider(kb_dir)?;
    let loaded = lib.load()?;
    let scanner = Scanner {
        kb: &kb,
        filter: loaded.filter(),
        thresholds: thresholds.thresholds()?,
        provider: &provider,
    };
    let (sample_id, functions) = listing.read()?;
    let report = scanner.scan(&sample_id, &functions, listing.range()?)?;
    let explanation = match generator {
        Some(g) if report.verdict.verdict == Verdict::Malicious => {
            Some(generate(&explanation_request(&report.verdict)?, &g.config()?)?)
        }
        _ => None,
    };
    eprintln!(
        "{}: {:?} omega={:.4} family={}",
        report.verdict.sample_id,
        report.verdict.verdict,
        report.verdict.omega,
        report.verdict.c_best.as_deref().unwrap_or("-")
    );
    write_json(
        out,
        &ScanOutput {
            report: &report,
            explanation,
        },
    )
}

fn explanation_request(v: &SampleVerdict) -> Result<ExplanationRequest> {
    let anchor = v.anchor.as_ref().context("verdict has no anchor")?;
    let proof = v.proof.as_ref().context("verdict has no proof function")?;
    Ok(ExplanationRequest {
        anchor_text: anchor.text.clone().context("anchor text missing")?,
        proof_text: proof.text.clone().context("proof text missing")?,
        family: v.c_best.clone().context("verdict has no family")?,
        proof_provenance: ProofProvenance {
            sample_id: proof.sample_id.clone(),
            first_seen: proof.first_seen,
        },
    })
}

fn read_report(path: &Path) -> Result<ScanReport> {
    serde_json::from_slice(&read_input(path)?).with_context(|| format!("parsing scan report {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    kb_dir: &Path,
    val: &Path,
    lib: &LibArgs,
    grid_func: &str,
    grid_file: &str,
    fpr_cap: f64,
    k: usize,
    out: Option<&Path>,
) -> Result<()> {
    let kb = KnowledgeBase::load(kb_dir)?;
    let provider = kb_provider(kb_dir)?;
    let loaded = lib.load()?;
    let val = validation_samples(&read_samples(val)?, &provider, &loaded.filter())?;
    let report = grid_search(&val, &parse_grid(grid_func)?, &parse_grid(grid_file)?, fpr_cap, &kb, k)?;
    let row = report.selected_row();
    eprintln!(
        "selected tau_func={} tau_file={} f1={:.4} func_fpr={:.4}",
        row.tau_func, row.tau_file, row.f1, row.func_fpr
    );
    write_json(out, &report)
}

pub fn explain(report: &Path, generator: &GeneratorArgs, show_prompt: bool) -> Result<()> {
    let report = read_report(report)?;
    ensure!(
        report.verdict.verdict == Verdict::Malicious,
        "only malicious verdicts are explained"
    );
    let req = explanation_request(&report.verdict)?;
    if show_prompt {
        println!("{}", build_prompt(&req));
        return Ok(());
    }
    let e = generate(&req, &generator.config()?)?;
    println!("{}", e.text);
    Ok(())
}

pub struct EvalArgs {
    pub kb: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub synth_seed: u64,
    pub loo_opt: Option<OptLevel>,
    pub calibrate: bool,
    pub ks: Vec<usize>,
    pub embed: EmbedArgs,
    pub lib: LibArgs,
    pub thresholds: ThresholdArgs,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalOutput {
    corpus: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth_params: Option<SynthParams>,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    kb_samples: Option<usize>,
    test_samples: usize,
    kb_entries: usize,
    thresholds: Thresholds,
    tau_lib: f64,
    metrics: EvalMetrics,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    ensure!(!a.ks.is_empty() && !a.ks.contains(&0), "--k cutoffs must be positive");
    if let (Some(kb_dir), Some(test)) = (&a.kb, &a.test) {
        ensure!(!a.calibrate, "--calibrate needs a corpus to split");
        let kb = KnowledgeBase::load(kb_dir)?;
        let provider = kb_provider(kb_dir)?;
        let loaded = a.lib.load()?;
        let test_set = read_samples(test)?;
        let thresholds = a.thresholds.thresholds()?;
        let scanner = Scanner {
            kb: &kb,
            filter: loaded.filter(),
            thresholds,
            provider: &provider,
        };
        let metrics = evaluate(&test_set, &scanner, &a.ks)?;
        log_metrics(&metrics);
        let out = EvalOutput {
            corpus: test.display().to_string(),
            synth_params: None,
            split: "given".into(),
            kb_samples: None,
            test_samples: test_set.len(),
            kb_entries: kb.len(),
            thresholds,
            tau_lib: loaded.tau_lib,
            metrics,
        };
        return write_json(a.out.as_deref(), &out);
    }

    let cfg = a.embed.config();
    let provider = Provider::from_config(&cfg)?;
    let (samples, synth): (Vec<SampleRecord>, Option<SynthCorpus>) = match &a.corpus {
        Some(p) => (read_samples(p)?, None),
        None => {
            let c = synth_generate(&SynthParams {
                seed: a.synth_seed,
                ..SynthParams::default()
            });
            (c.samples.clone(), Some(c))
        }
    };

    let mut loaded = a.lib.load()?;
    if let (None, Some(c)) = (&loaded.index, &synth) {
        let (index, blocklist) = build_library(&c.library, Some(library_range()), &provider)?;
        loaded.index = Some(index);
        loaded.blocklist = Some(blocklist);
    }
    let filter = loaded.filter();

    let (kb_set, val_set, test_set, split_name) = match a.loo_opt {
        Some(level) => {
            let (kb, test) = loo_opt_split(&samples, level, &[])?;
            (kb, Vec::new(), test, format!("loo-opt:{level}"))
        }
        None => {
            let s = chronological_split(&samples, &SplitSpec::standard())?;
            (s.kb, s.val, s.test, "chronological".to_string())
        }
    };
    ensure!(!kb_set.is_empty(), "KB split is empty");
    let kb = build_kb(&kb_set, &provider, &filter)?;

    let mut thresholds = a.thresholds.thresholds()?;
    if a.calibrate {
        if val_set.is_empty() {
            bail!("--calibrate needs a validation split");
        }
        let val = validation_samples(&val_set, &provider, &filter)?;
        let report = grid_search(
            &val,
            &parse_grid("0.5:0.85:0.05")?,
            &parse_grid("0.05:0.30:0.05")?,
            0.01,
            &kb,
            thresholds.k,
        )?;
        (thresholds.tau_func, thresholds.tau_file) = report.selected;
    }

    let scanner = Scanner {
        kb: &kb,
        filter,
        thresholds,
        provider: &provider,
    };
    let metrics = evaluate(&test_set, &scanner, &a.ks)?;
    log_metrics(&metrics);
    let out = EvalOutput {
        corpus: a
            .corpus
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "synthetic".into()),
        synth_params: synth.map(|c| c.params),
        split: split_name,
        kb_samples: Some(kb_set.len()),
        test_samples: test_set.len(),
        kb_entries: kb.len(),
        thresholds,
        tau_lib: loaded.tau_lib,
        metrics,
    };
    write_json(a.out.as_deref(), &out)
}

fn log_metrics(m: &EvalMetrics) {
    let recall: Vec<String> = m.recall_at_k.iter().map(|(k, r)| format!("@{k}={r:.4}")).collect();
    eprintln!(
        "detection f1={:.4} acc={:.4}  attribution macro-f1={:.4}  recall {}",
        m.detection.f1,
        m.detection.accuracy,
        m.attribution.macro_f1,
        recall.join(" ")
    );
}

pub struct ServeArgs {
    pub kb: PathBuf,
    pub lib: LibArgs,
    pub thresholds: ThresholdArgs,
    pub generator: GeneratorArgs,
    pub host: String,
    pub port: u16,
    pub static_dir: Option<PathBuf>,
    pub audit: Option<PathBuf>,
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::new(&a.kb);
    cfg.lib_dir = a.lib.lib.clone();
    cfg.blocklist = a.lib.blocklist_path();
    cfg.audit_path = a.audit;
    cfg.thresholds = a.thresholds.thresholds()?;
    cfg.tau_lib = a.lib.tau_lib;
    cfg.generator = a.generator.config()?;
    let svc = Arc::new(TriageService::open(cfg)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("invalid listen address {}:{}", a.host, a.port))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    log::info!("listening on http://{addr}");
    rt.block_on(asmrag_service::http::serve(svc, addr, a.static_dir))?;
    Ok(())
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    write_json(None, v)
}
