//! Command-line verbs.

use std::io::{self, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use chainshift_core::repair::{
    evaluate_repair, teacher_encoder, train_adapter, RepairItem, RepairReport, RepairRow, StudentScorer, TeacherGuide,
    STUDENT_DIM,
};
use chainshift_core::search::Optimizer;
use chainshift_core::scoring::predict;
use chainshift_core::{gen_phantoms, ClassPrototypes, Family, MarginModel, Modality, ZeroShotClassifier};
use clap::{Args, Parser, Subcommand};

use crate::adapter_file::{read_adapter, write_adapter, AdapterMeta};
use crate::archive::{read_archive, verify_archive, Archive};
use crate::campaign::{build_scorer, run_campaign, Classifiers};
use crate::config::{parse_families, CampaignConfig, ScorerConfig};
use crate::dataset::ingest;
use crate::error::{HarnessError, IoContext, Result};
use crate::png_io::write_png16;
use crate::protocol::{serve, serve_tcp};
use crate::report::{self, attack_tables, write_tables, Table};

/// Tolerance on `J` re-evaluated from archived PNGs.
pub const J_TOLERANCE: f64 = 2e-3;

#[derive(Debug, Parser)]
#[command(name = "chainshift", version, about = "Workflow-shift attacks and repair for zero-shot image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Campaign TOML; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated thresholds, e.g. `0.9,0.8`.
    #[arg(long, value_delimiter = ',')]
    pub tau: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<Optimizer>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Comma-separated families (`A,R,D,A∘R,...`) or `all`.
    #[arg(long)]
    pub families: Option<String>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    Optimizer::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded phantoms as 16-bit PNGs plus a labels CSV.
    GenPhantoms {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated modality tags.
        #[arg(long, value_delimiter = ',', default_value = "xray-like")]
        modality: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack every sample at every threshold and archive the results.
    Attack(Common),
    /// Clean zero-shot accuracy per modality.
    EvalZeroshot(Common),
    /// Attack with all families and tabulate single-stage vs chained accuracy.
    AblateStages(Common),
    /// Attack once with traces and tabulate success against budget.
    AblateBudget {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50,100")]
        budgets: Vec<usize>,
    },
    /// Train the token adapter on clean phantoms.
    RepairTrain(Common),
    /// Score an archive before and after adaptation.
    RepairEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        adapter: PathBuf,
    },
    /// Recompute tables from an archive.
    Report {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
    },
    /// Check hashes, files and re-scored objectives of an archive.
    VerifyArchive {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Serve the configured scorer over the wire protocol.
    ServeScorer {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "port")]
        stdio: bool,
        #[arg(long)]
        port: Option<u16>,
    },
}

const DEFAULT_CONFIG: &str = r#"
[dataset]
source = "phantoms"
n = 20
seed = 0
modalities = ["xray-like"]

[scorer]
kind = "synthetic"
seed = 2024
"#;

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve_config(common: &Common) -> Result<CampaignConfig> {
    let mut cfg = match &common.config {
        Some(path) => CampaignConfig::load(path)?,
        None => CampaignConfig::from_toml(DEFAULT_CONFIG)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(taus) = &common.tau {
        cfg.attack.taus.clone_from(taus);
    }
    if let Some(o) = common.optimizer {
        cfg.attack.optimizer = o;
    }
    if let Some(b) = common.budget {
        cfg.attack.budget = b;
    }
    if let Some(f) = &common.families {
        cfg.attack.families = parse_families(f)?;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(out) = &common.out {
        cfg.out.clone_from(out);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_tables(tables: &[Table]) {
    for t in tables {
        println!("[{}]\n{}", t.name, t.to_text());
    }
}

fn attack_and_report(cfg: &CampaignConfig, budgets: &[usize]) -> Result<(Archive, Vec<Table>)> {
    let scorer = build_scorer(&cfg.scorer)?;
    run_campaign(cfg, scorer.as_ref(), &cfg.out)?;
    let archive = read_archive(&cfg.out)?;
    let tables = attack_tables(&archive.records(), budgets);
    write_tables(&cfg.out.join("report"), &tables)?;
    Ok((archive, tables))
}

fn student_seed(cfg: &CampaignConfig) -> Result<u64> {
    match cfg.scorer {
        ScorerConfig::Student { seed } => Ok(seed),
        _ => Err(HarnessError::config("repair needs `[scorer] kind = \"student\"`")),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantoms { n, seed, modality, out } => {
            let images = out.join("images");
            std::fs::create_dir_all(&images).at(&images)?;
            let mut csv = String::from("id,path,label\n");
            for tag in &modality {
                for p in gen_phantoms(n, seed, Modality::parse(tag)?)? {
                    let rel = format!("images/{}.png", p.id);
                    write_png16(&out.join(&rel), &p.image)?;
                    csv += &format!("{},{rel},{}\n", p.id, u8::from(p.label));
                }
            }
            let path = out.join("labels.csv");
            std::fs::write(&path, csv).at(&path)?;
            println!("wrote {} phantoms to {}", n * modality.len(), out.display());
        }
        Command::Attack(common) => {
            let cfg = resolve_config(&common)?;
            let (archive, tables) = attack_and_report(&cfg, &[])?;
            print_tables(&tables);
            println!("archived {} records in {}", archive.entries.len(), cfg.out.display());
        }
        Command::EvalZeroshot(common) => {
            let cfg = resolve_config(&common)?;
            let scorer = build_scorer(&cfg.scorer)?;
            let samples = ingest(&cfg.dataset)?;
            let models = Classifiers::build(scorer.as_ref(), cfg.prompts.as_ref(), samples.iter().map(|s| s.modality))?;
            let mut t = Table { name: "zeroshot", header: vec!["modality".into(), "n".into(), "accuracy".into()], rows: vec![] };
            let mut groups: Vec<(String, usize, usize)> = Vec::new();
            for s in &samples {
                let hit = predict(models.for_sample(s.modality).margin(&s.image)?) == s.label;
                let tag = s.modality.map_or("untagged", |m| m.tag()).to_string();
                for key in [tag, "all".into()] {
                    match groups.iter_mut().find(|g| g.0 == key) {
                        Some(g) => (g.1, g.2) = (g.1 + 1, g.2 + usize::from(hit)),
                        None => groups.push((key, 1, usize::from(hit))),
                    }
                }
            }
            groups.sort_by_key(|g| (g.0 == "all", g.0.clone()));
            for (tag, n, hits) in groups {
                t.rows.push(vec![tag, n.to_string(), format!("{:.4}", hits as f64 / n as f64)]);
            }
            write_tables(&cfg.out, std::slice::from_ref(&t))?;
            print_tables(&[t]);
        }
        Command::AblateStages(common) => {
            let mut cfg = resolve_config(&common)?;
            cfg.attack.families = Family::ALL.to_vec();
            let (archive, _) = attack_and_report(&cfg, &[])?;
            print_tables(&[report::ablation(&archive.records()), report::family_success(&archive.records())]);
        }
        Command::AblateBudget { common, budgets } => {
            let mut cfg = resolve_config(&common)?;
            cfg.attack.record_trace = true;
            cfg.attack.budget = budgets.iter().copied().max().ok_or_else(|| HarnessError::config("no budgets"))?;
            let (archive, _) = attack_and_report(&cfg, &budgets)?;
            let table = report::budget(&archive.records(), &budgets).expect("traces were recorded");
            print_tables(&[table]);
        }
        Command::RepairTrain(common) => {
            let cfg = resolve_config(&common)?;
            let seed = student_seed(&cfg)?;
            let section = &cfg.repair;
            let student = StudentScorer::frozen(seed);
            let teacher = TeacherGuide::new(teacher_encoder(section.teacher_seed), STUDENT_DIM, section.config.teacher_projection_seed);
            let protos = student.prototypes(section.modality)?;
            let clean = gen_phantoms(section.train_n, section.train_seed, section.modality)?;
            let trained = train_adapter(&clean, student.encoder(), &teacher, &protos, &section.config, cfg.seed)?;
            std::fs::create_dir_all(&cfg.out).at(&cfg.out)?;
            let path = cfg.out.join("adapter.codaw");
            let meta = AdapterMeta {
                config: section.config.clone(),
                student_seed: seed,
                teacher_seed: section.teacher_seed,
                train_seed: section.train_seed,
                trace: trained.trace.clone(),
            };
            write_adapter(&path, &trained.w, &meta)?;
            let (first, last) = (trained.trace[0], *trained.trace.last().expect("trace starts at W = 0"));
            println!("loss {first:.6} -> {last:.6} over {} epochs; wrote {}", trained.trace.len() - 1, path.display());
        }
        Command::RepairEval { common, archive, adapter } => {
            let cfg = resolve_config(&common)?;
            let (w, meta) = read_adapter(&adapter)?;
            let frozen = StudentScorer::frozen(meta.student_seed);
            let adapted = frozen.with_adapter(w)?;
            let archive = read_archive(&archive)?;
            let mut items = Vec::new();
            let mut missing: Vec<String> = archive.corrupt.iter().map(|(line, e)| format!("manifest line {line}: {e}")).collect();
            for e in &archive.entries {
                match (archive.image(&e.clean_png), archive.image(&e.adv_png)) {
                    (Ok(clean), Ok(adversarial)) => items.push(RepairItem {
                        sample_id: e.record.sample_id.clone(),
                        modality: e.record.modality,
                        label: e.record.label,
                        clean,
                        adversarial,
                    }),
                    (Err(err), _) | (_, Err(err)) => missing.push(format!("{}: {err}", e.record.sample_id)),
                }
            }
            let mut reports = Vec::new();
            let mut modalities: Vec<Option<Modality>> = items.iter().map(|i| i.modality).collect();
            modalities.sort();
            modalities.dedup();
            // Prototypes come from the frozen text side, so both models share them.
            for m in modalities {
                let protos: ClassPrototypes = frozen.prototypes(m.unwrap_or(cfg.repair.modality))?;
                let before = ZeroShotClassifier::new(&frozen, protos.clone())?;
                let after = ZeroShotClassifier::new(&adapted, protos)?;
                let subset: Vec<RepairItem> = items.iter().filter(|i| i.modality == m).cloned().collect();
                reports.push((before, after, subset));
            }
            let pairs: Vec<(&dyn MarginModel, &dyn MarginModel, &[RepairItem])> =
                reports.iter().map(|(b, a, s)| (b as _, a as _, s.as_slice())).collect();
            let report = evaluate_grouped(&pairs, missing)?;
            let table = report::repair(&report);
            write_tables(&cfg.out, std::slice::from_ref(&table))?;
            print_tables(&[table]);
            for m in &report.missing {
                eprintln!("skipped {m}");
            }
            if !archive.meta.complete {
                return Err(HarnessError::Incomplete(format!("{} is flagged incomplete", archive.root.display())));
            }
        }
        Command::Report { archive, out, budgets } => {
            let archive = read_archive(&archive)?;
            for (line, e) in &archive.corrupt {
                eprintln!("manifest line {line}: {e}");
            }
            let tables = attack_tables(&archive.records(), &budgets);
            write_tables(&out.unwrap_or_else(|| archive.root.join("report")), &tables)?;
            print_tables(&tables);
            if !archive.meta.complete {
                return Err(HarnessError::Incomplete(format!("{} is flagged incomplete", archive.root.display())));
            }
        }
        Command::VerifyArchive { archive } => verify(&archive)?,
        Command::ServeScorer { common, stdio, port } => {
            let cfg = resolve_config(&common)?;
            let scorer = build_scorer(&cfg.scorer)?;
            if stdio {
                serve(scorer.as_ref(), BufReader::new(io::stdin()), io::stdout()).at("<stdio>")?;
            } else {
                let port = port.ok_or_else(|| HarnessError::config("serve-scorer needs --stdio or --port"))?;
                let listener = TcpListener::bind(("127.0.0.1", port)).at(format!("127.0.0.1:{port}"))?;
                eprintln!("serving {} on {}", scorer.name(), listener.local_addr().at("listener")?);
                serve_tcp(scorer.as_ref(), listener).at("listener")?;
            }
        }
    }
    Ok(())
}

/// Evaluates each modality group with its own models and merges the rows.
fn evaluate_grouped(
    groups: &[(&dyn MarginModel, &dyn MarginModel, &[RepairItem])],
    missing: Vec<String>,
) -> Result<RepairReport> {
    let mut rows = Vec::new();
    let mut totals = [0.0f64; 4];
    let mut count = 0;
    for (before, after, items) in groups {
        let r = evaluate_repair(items, *before, *after, Vec::new())?;
        let g = r.overall();
        if g.count > 0 {
            for (t, v) in totals.iter_mut().zip([g.clean_before, g.clean_after, g.adv_before, g.adv_after]) {
                *t += v * g.count as f64;
            }
        }
        count += g.count;
        rows.extend(r.rows.into_iter().filter(|row| row.group != "all"));
    }
    let f = |k: usize| if count == 0 { f64::NAN } else { totals[k] / count as f64 };
    rows.push(RepairRow {
        group: "all".into(),
        count,
        clean_before: f(0),
        clean_after: f(1),
        adv_before: f(2),
        adv_after: f(3),
    });
    Ok(RepairReport { rows, missing })
}

fn verify(root: &Path) -> Result<()> {
    let archive = read_archive(root)?;
    let model_scorer = archive.meta.config.as_ref().map(|c| build_scorer(&c.scorer)).transpose()?;
    let models = match (&model_scorer, &archive.meta.config) {
        (Some(s), Some(c)) => {
            Some(Classifiers::build(s.as_ref(), c.prompts.as_ref(), archive.entries.iter().map(|e| e.record.modality))?)
        }
        _ => None,
    };
    let mut problems = Vec::new();
    let mut drift: f64 = 0.0;
    let mut checked = 0;
    // Verify per modality so each entry is re-scored by its own classifier.
    let mut tags: Vec<Option<Modality>> = archive.entries.iter().map(|e| e.record.modality).collect();
    tags.sort();
    tags.dedup();
    for m in tags {
        let sub = Archive { entries: archive.entries.iter().filter(|e| e.record.modality == m).cloned().collect(), ..archive.clone() };
        let v = verify_archive(&sub, models.as_ref().map(|ms| ms.for_sample(m) as &dyn MarginModel), J_TOLERANCE);
        checked += v.checked;
        drift = drift.max(v.max_j_drift);
        problems.extend(v.problems);
    }
    for (line, e) in &archive.corrupt {
        problems.push((format!("manifest line {line}"), e.clone()));
    }
    println!("checked {checked} entries; max |ΔJ| = {drift:.3e}; {} problems", problems.len());
    for (id, p) in &problems {
        println!("  {id}: {p}");
    }
    if !problems.is_empty() {
        return Err(HarnessError::format(format!("{} verification problems", problems.len())));
    }
    if !archive.meta.complete {
        return Err(HarnessError::Incomplete(format!("{} is flagged incomplete", root.display())));
    }
    Ok(())
}
