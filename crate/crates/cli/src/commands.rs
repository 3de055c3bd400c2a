use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use codebias_core::corpus::{
    generate_biased_corpus, generate_dataset, ingest_professions, parse_professions, professions_to_tsv, BiasSpec,
    Corpus, Dataset, ModifierSet, PromptCase, Sample, Split, DESK_PROFESSIONS,
};
use codebias_core::editor::run_edit;
use codebias_core::locator::{build_mask, locate, Granularity, GranularityMask, ImportanceReport, LocateReports};
use codebias_core::metrics::{evaluate_split, locality_metrics, EvalSummary, GenderProber, Locality};
use codebias_core::model::{MiniTransformer, Tokenizer};
use codebias_core::train::train;

use crate::adapter::{AdapterClient, AdapterEndpoint, Transport};
use crate::config::HarnessConfig;
use crate::error::CliError;
use crate::run::{sha256_hex, RunDir, RunManifest};
use crate::{AdapterArgs, Cli, Command};

pub const DATASET: &str = "dataset.jsonl";
pub const CORPUS_TRAIN: &str = "corpus/train.jsonl";
pub const CORPUS_RECOVERY: &str = "corpus/recovery.jsonl";
pub const CORPUS_HOLDOUT: &str = "corpus/holdout.jsonl";
pub const MODEL: &str = "model.ckpt";
pub const MASK: &str = "mask.json";
pub const EDIT_REPORT: &str = "edit_report.json";
pub const COMPARISON: &str = "comparison.csv";

fn adapter_sets(a: &AdapterArgs) -> Vec<String> {
    if let Some(cmd) = &a.adapter_cmd {
        let parts = toml::Value::Array(cmd.split_whitespace().map(|s| toml::Value::String(s.into())).collect());
        vec!["adapter.transport=\"stdio\"".into(), format!("adapter.command={parts}")]
    } else if let Some(url) = &a.adapter_url {
        vec![
            "adapter.transport=\"http\"".into(),
            format!("adapter.url={}", toml::Value::String(url.clone())),
        ]
    } else {
        Vec::new()
    }
}

pub fn execute(cli: Cli, args: Vec<String>) -> Result<PathBuf, CliError> {
    let mut sets = Vec::new();
    match &cli.command {
        Command::Eval { adapter, .. } | Command::Probe { adapter, .. } => sets.extend(adapter_sets(adapter)),
        _ => {}
    }
    sets.extend(cli.sets.iter().cloned());
    let mut cfg = HarnessConfig::load(cli.config.as_deref(), &sets)?;
    let name = match &cli.command {
        Command::Generate { .. } => "generate",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Locate { .. } => "locate",
        Command::Edit { .. } => "edit",
        Command::Report { .. } => "report",
        Command::Probe { .. } => "probe",
    };
    if let Command::Generate {
        professions,
        modifiers,
        split_plan,
        seed,
    } = &cli.command
    {
        let d = &mut cfg.dataset;
        d.professions = professions.clone().or(d.professions.take());
        d.modifiers = modifiers.clone().or(d.modifiers.take());
        d.split_plan = split_plan.unwrap_or(d.split_plan);
        d.seed = seed.unwrap_or(d.seed);
    }
    let mut run = RunDir::create(&cli.run_root, cli.out.as_deref(), name, args)?;
    run.set_config(&cfg);
    run.write("config.toml", cfg.to_toml())?;
    match cli.command {
        Command::Generate { .. } => generate(&mut run, &cfg)?,
        Command::Train { data } => train_model(&mut run, &cfg, &data)?,
        Command::Eval {
            data,
            model,
            splits,
            limit,
            ..
        } => eval(&mut run, &cfg, &data, model.as_deref(), &splits, limit)?,
        Command::Locate {
            data,
            model,
            level,
            probe_split,
            from,
        } => locate_cmd(&mut run, &cfg, &data, &model, level, probe_split, from.as_deref())?,
        Command::Edit { data, model, mask } => edit(&mut run, &cfg, &data, &model, mask.as_deref())?,
        Command::Report { runs } => report(&mut run, &runs)?,
        Command::Probe { prompt, model, .. } => probe(&mut run, &cfg, &prompt, model.as_deref())?,
    }
    run.finish()
}

// -- loading ------------------------------------------------------------------

fn load_dataset(run: &mut RunDir, data: &Path) -> Result<Dataset, CliError> {
    let path = data.join(DATASET);
    Ok(Dataset::from_jsonl(&run.read_input_string(&path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?)
}

fn load_texts(run: &mut RunDir, data: &Path, name: &str) -> Result<Vec<String>, CliError> {
    let path = data.join(name);
    let text = run.read_input_string(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let s: Sample = serde_json::from_str(line)
            .map_err(|e| CliError::Config(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(s.text);
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("{} has no samples", path.display())));
    }
    Ok(out)
}

fn load_model(run: &mut RunDir, path: &Path) -> Result<MiniTransformer, CliError> {
    let bytes = run.read_input(path)?;
    MiniTransformer::from_bytes(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn split_cases(ds: &Dataset, split: Split) -> Result<Vec<PromptCase>, CliError> {
    let cases = ds.split(split);
    if cases.is_empty() {
        return Err(CliError::Config(format!("the dataset has no {split} cases")));
    }
    Ok(cases)
}

// -- generate -----------------------------------------------------------------

fn generate(run: &mut RunDir, cfg: &HarnessConfig) -> Result<(), CliError> {
    let d = &cfg.dataset;
    let professions = match &d.professions {
        Some(p) => {
            run.read_input(p)?;
            ingest_professions(p)?
        }
        None => parse_professions(DESK_PROFESSIONS)?,
    };
    let modifiers = match &d.modifiers {
        Some(p) => {
            let text = run.read_input_string(p)?;
            ModifierSet::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => ModifierSet::semantic(),
    };
    run.seed("dataset", d.seed);
    run.seed("corpus", cfg.corpus.seed);
    let ds = run.timed("dataset", |_| generate_dataset(&professions, &modifiers, d.split_plan, d.seed))?;
    let mut bias = BiasSpec::amplify(&professions, cfg.bias.strength);
    for (name, p) in &cfg.bias.p_he {
        if !professions.iter().any(|r| &r.name == name) {
            return Err(CliError::Config(format!("bias.p_he names unknown profession {name:?}")));
        }
        bias.set(name, *p);
    }
    let corpus = run.timed("corpus", |_| generate_biased_corpus(&professions, &modifiers, &bias, &cfg.corpus))?;

    run.write(DATASET, ds.to_jsonl())?;
    run.write("professions.tsv", professions_to_tsv(&professions))?;
    let table = ds.format_count_table();
    run.write("counts.txt", &table)?;
    run.write(CORPUS_TRAIN, Corpus::samples_jsonl(&corpus.train))?;
    run.write(CORPUS_RECOVERY, Corpus::samples_jsonl(&corpus.recovery))?;
    run.write(CORPUS_HOLDOUT, Corpus::samples_jsonl(&corpus.holdout))?;
    run.write(
        "corpus/manifest.json",
        serde_json::to_string_pretty(&corpus.manifest).expect("corpus manifest serializes"),
    )?;
    run.say(format!(
        "{} professions x {} modifiers = {} cases ({} plan)",
        professions.len(),
        modifiers.len(),
        ds.len(),
        serde_json::to_value(d.split_plan).expect("plan serializes").as_str().unwrap_or("?")
    ));
    for line in table.lines() {
        run.say(line);
    }
    run.say(format!(
        "corpus: {} training samples, {} recovery, {} holdout",
        corpus.train.len(),
        corpus.recovery.len(),
        corpus.holdout.len()
    ));
    Ok(())
}

// -- train --------------------------------------------------------------------

fn train_model(run: &mut RunDir, cfg: &HarnessConfig, data: &Path) -> Result<(), CliError> {
    let ds = load_dataset(run, data)?;
    let texts = load_texts(run, data, CORPUS_TRAIN)?;
    let recovery = load_texts(run, data, CORPUS_RECOVERY)?;
    let holdout = load_texts(run, data, CORPUS_HOLDOUT)?;
    let tokenizer = Tokenizer::build(
        texts
            .iter()
            .chain(&recovery)
            .chain(&holdout)
            .map(String::as_str)
            .chain(ds.cases.iter().map(|c| c.prompt.as_str())),
    );
    let mcfg = cfg.model.model_config(tokenizer.len());
    run.seed("model", mcfg.seed);
    run.seed("train", cfg.train.seed);
    let mut model = MiniTransformer::new(mcfg, tokenizer)?;
    run.say(format!(
        "model: d_model {} layers {} heads {} d_mlp {} vocab {} ({} parameters)",
        model.config().d_model,
        model.config().n_layers,
        model.config().n_heads,
        model.config().d_mlp,
        model.config().vocab_size,
        model.n_params()
    ));
    let mut epochs = Vec::new();
    let report = run.timed("train", |_| {
        train(&mut model, &texts, &cfg.train, &mut |e, l| {
            log::info!("epoch {e}: mean NLL {l:.4}");
            epochs.push((e, l));
        })
    })?;
    for (e, l) in epochs {
        run.say(format!("epoch {e}: mean NLL {l:.4}"));
    }
    for w in &report.warnings {
        run.say(format!("warning: {w}"));
    }
    run.write(MODEL, model.to_bytes())?;
    run.write(
        "train_report.json",
        serde_json::to_string_pretty(&report).expect("train report serializes"),
    )?;

    let loc = locality_metrics(&model, &holdout)?;
    let uniform = (model.config().vocab_size as f64).ln();
    run.say(format!(
        "holdout NLL {:.4} (uniform {:.4}, ratio {:.3}), accuracy {:.4}",
        loc.nll,
        uniform,
        loc.nll / uniform,
        loc.accuracy
    ));
    run.write("holdout.json", serde_json::to_string_pretty(&loc).expect("locality serializes"))?;

    // mean probe per profession over every dataset case
    let mut per: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
    for c in &ds.cases {
        let p = model.gender_probe(&c.prompt)?;
        let e = per.entry(c.profession.name.clone()).or_insert((c.shares.f_he, 0.0, 0.0, 0));
        e.1 += p.p_he();
        e.2 += p.p_she();
        e.3 += 1;
    }
    let mut csv = String::from("profession,f_he,mean_p_he,mean_p_she,cases\n");
    for (name, (f_he, he, she, n)) in &per {
        let n = *n as f64;
        csv.push_str(&format!("{name},{f_he:.6},{:.6},{:.6},{}\n", he / n, she / n, n as usize));
    }
    run.write("audit.csv", csv)?;
    if let Some((_, he, she, n)) = per.get("nurse") {
        run.say(format!(
            "nurse prompts: mean p_he {:.4}, mean p_she {:.4}",
            he / *n as f64,
            she / *n as f64
        ));
    }
    Ok(())
}

// -- eval / probe ---------------------------------------------------------------

enum Prober {
    Model(MiniTransformer),
    Adapter(AdapterClient),
}

impl Prober {
    fn as_dyn(&self) -> &dyn GenderProber {
        match self {
            Prober::Model(m) => m,
            Prober::Adapter(a) => a,
        }
    }
}

fn prober(run: &mut RunDir, model: Option<&Path>, adapter: Option<&AdapterEndpoint>) -> Result<Prober, CliError> {
    match (model, adapter) {
        (Some(p), _) => Ok(Prober::Model(load_model(run, p)?)),
        (None, Some(a)) => {
            let what = match &a.transport {
                Transport::Stdio { command } => format!("stdio adapter `{}`", command.join(" ")),
                Transport::Http { url } => format!("http adapter {url}"),
            };
            run.say(format!("probing through {what}"));
            Ok(Prober::Adapter(AdapterClient::connect(a)?))
        }
        (None, None) => Err(CliError::Config(
            "give --model, or an adapter via --adapter-cmd, --adapter-url or the [adapter] config".into(),
        )),
    }
}

fn format_summary_table(rows: &[EvalSummary]) -> String {
    let mut s = format!("{:<6}", "split");
    let cats: Vec<_> = codebias_core::corpus::ModifierCategory::ALL.to_vec();
    for c in &cats {
        s.push_str(&format!(" {:>15}", c.name()));
    }
    s.push_str(&format!(" {:>8} {:>6}\n", "Average", "cases"));
    for r in rows {
        s.push_str(&format!("{:<6}", r.split));
        for c in &cats {
            match r.categories.iter().find(|x| x.category == *c) {
                Some(x) => s.push_str(&format!(" {:>15.4}", x.mean_fb)),
                None => s.push_str(&format!(" {:>15}", "-")),
            }
        }
        s.push_str(&format!(" {:>8.4} {:>6}", r.average, r.evaluated));
        if r.partial {
            s.push_str(&format!("  PARTIAL ({} failed)", r.failures.len()));
        }
        s.push('\n');
    }
    s
}

fn eval(
    run: &mut RunDir,
    cfg: &HarnessConfig,
    data: &Path,
    model: Option<&Path>,
    splits: &[Split],
    limit: Option<usize>,
) -> Result<(), CliError> {
    let ds = load_dataset(run, data)?;
    let prober = prober(run, model, cfg.adapter.as_ref())?;
    let holdout = match &prober {
        Prober::Model(_) => Some(load_texts(run, data, CORPUS_HOLDOUT)?),
        Prober::Adapter(_) => None,
    };
    let mut rows = Vec::new();
    for &split in splits {
        let mut cases = split_cases(&ds, split)?;
        cases.sort_by_key(|c| c.id);
        if let Some(n) = limit {
            cases.truncate(n.max(1));
        }
        let mut summary = run.timed(split.name(), |_| evaluate_split(prober.as_dyn(), split.name(), &cases))?;
        if let (Prober::Model(m), Some(h)) = (&prober, &holdout) {
            summary.locality = Some(locality_metrics(m, h)?);
        }
        if cases.len() == 1 {
            for r in &summary.results {
                run.say(format!(
                    "case {} ({} / {}): p_he {:.6} p_she {:.6} FB-Score {:.6}",
                    r.id, r.profession, r.modifier, r.p_he, r.p_she, r.fb_score
                ));
            }
        }
        run.write(&format!("eval_{split}.json"), summary.to_json())?;
        rows.push(summary);
    }
    let mut csv = EvalSummary::csv_header() + "\n";
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    run.write("eval.csv", csv)?;
    for line in format_summary_table(&rows).lines() {
        run.say(line);
    }
    if let Some(l) = rows.iter().find_map(|r| r.locality) {
        run.say(format!("holdout NLL {:.4}, accuracy {:.4}", l.nll, l.accuracy));
    }
    if rows.iter().any(|r| r.partial) {
        log::warn!("some cases failed; the summary is partial");
    }
    Ok(())
}

fn probe(run: &mut RunDir, cfg: &HarnessConfig, prompt: &str, model: Option<&Path>) -> Result<(), CliError> {
    let prober = prober(run, model, cfg.adapter.as_ref())?;
    let p = prober.as_dyn().probe(prompt).map_err(CliError::Runtime)?;
    run.write("probe.json", serde_json::to_string_pretty(&p).expect("probe serializes"))?;
    run.say(format!("p_he {:.6} p_she {:.6}", p.p_he(), p.p_she()));
    Ok(())
}

// -- locate ---------------------------------------------------------------------

fn report_file(level: Granularity) -> String {
    format!("report_{level}.json")
}

fn model_hash(manifest: &RunManifest) -> Option<&str> {
    let model_arg = manifest.args.iter().position(|a| a == "--model").map(|i| &manifest.args[i + 1]);
    manifest
        .inputs
        .iter()
        .find(|a| Some(&a.path) == model_arg)
        .map(|a| a.sha256.as_str())
}

fn format_report(r: &ImportanceReport) -> String {
    let mut s = format!("{} stage ({} cases)\n", r.level, r.cases.len());
    let mut keys: Vec<_> = r.scores.iter().collect();
    keys.sort_by(|a, b| b.1.total_cmp(a.1).then(a.0.cmp(b.0)));
    for (addr, score) in keys.iter().take(12) {
        let votes = r.votes.get(*addr).copied().unwrap_or(0);
        let mark = if r.selected.contains(addr) { "*" } else { " " };
        s.push_str(&format!("{mark} {addr:<28} score {score:>10.6} votes {votes}\n"));
    }
    if keys.len() > 12 {
        s.push_str(&format!("  ... {} more\n", keys.len() - 12));
    }
    s.push_str(&format!("  selected {}\n", r.selected.len()));
    s
}

fn locate_cmd(
    run: &mut RunDir,
    cfg: &HarnessConfig,
    data: &Path,
    model_path: &Path,
    level: Granularity,
    probe_split: Split,
    from: Option<&Path>,
) -> Result<(), CliError> {
    let model = load_model(run, model_path)?;
    let mut reports = LocateReports::default();
    if level == Granularity::Full {
        run.say("full granularity needs no locating");
    } else {
        let ds = load_dataset(run, data)?;
        let cases = split_cases(&ds, probe_split)?;
        if let Some(prev) = from {
            let manifest = RunManifest::load(prev)?;
            let here = sha256_hex(&std::fs::read(model_path).map_err(|e| CliError::io(model_path, e))?);
            if model_hash(&manifest) != Some(here.as_str()) {
                return Err(CliError::Config(format!(
                    "{} was located on a different checkpoint",
                    prev.display()
                )));
            }
            for g in Granularity::ALL.into_iter().skip(1) {
                let p = prev.join(report_file(g));
                if manifest.output(&report_file(g)).is_none() || g > level {
                    continue;
                }
                let r = ImportanceReport::from_json(&run.read_input_string(&p)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                match g {
                    Granularity::Layer => reports.layer = Some(r),
                    Granularity::Module => reports.module = Some(r),
                    Granularity::Row => reports.row = Some(r),
                    Granularity::Neuron => reports.neuron = Some(r),
                    Granularity::Full => unreachable!(),
                }
            }
        }
        reports = run.timed("locate", |_| {
            locate(&model, &cases, probe_split.name(), level, &cfg.locate, reports)
        })?;
        for g in Granularity::ALL.into_iter().skip(1) {
            if let Some(r) = reports.get(g) {
                run.write(&report_file(g), r.to_json())?;
                run.write(&format!("votes_{g}.csv"), r.votes_csv())?;
                for line in format_report(r).lines() {
                    run.say(line);
                }
            }
        }
    }
    let mut mask = build_mask(level, &reports)?;
    if !mask.is_full() {
        mask.arch_hash = Some(model.config().arch_hash());
    }
    let n = model.masked_count(&mask)?;
    run.write(MASK, mask.to_json())?;
    run.say(format!(
        "{level} mask: {} entries, {n} of {} parameters",
        mask.len(),
        model.n_params()
    ));
    Ok(())
}

// -- edit -----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub reliability_fb: f64,
    pub generality_fb: f64,
    pub locality_nll: f64,
    pub locality_accuracy: f64,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("label,reliability_fb,generality_fb,locality_nll,locality_accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.label, r.reliability_fb, r.generality_fb, r.locality_nll, r.locality_accuracy
        ));
    }
    s
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>, CliError> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64, CliError> {
            f.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Config(format!("bad comparison row {line:?}")))
        };
        rows.push(ComparisonRow {
            label: f[0].to_string(),
            reliability_fb: num(1)?,
            generality_fb: num(2)?,
            locality_nll: num(3)?,
            locality_accuracy: num(4)?,
        });
    }
    Ok(rows)
}

fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "  {:<18} {:>14} {:>14} {:>13} {:>13}\n",
        "", "Reliability-FB", "Generality-FB", "Locality-NLL", "Locality-Acc"
    );
    for (i, r) in rows.iter().enumerate() {
        let label = if i == 0 { format!("{} (baseline)", r.label) } else { r.label.clone() };
        let mark = if i == 0 { "*" } else { " " };
        s.push_str(&format!(
            "{mark} {label:<18} {:>14.4} {:>14.4} {:>13.4} {:>13.4}\n",
            r.reliability_fb, r.generality_fb, r.locality_nll, r.locality_accuracy
        ));
    }
    s
}

fn measure(model: &MiniTransformer, label: &str, train: &[PromptCase], test: &[PromptCase], holdout: &[String]) -> Result<(ComparisonRow, Locality), CliError> {
    let rel = evaluate_split(model, "train", train)?;
    let gen = evaluate_split(model, "test", test)?;
    let loc = locality_metrics(model, holdout)?;
    Ok((
        ComparisonRow {
            label: label.to_string(),
            reliability_fb: rel.mean_fb,
            generality_fb: gen.mean_fb,
            locality_nll: loc.nll,
            locality_accuracy: loc.accuracy,
        },
        loc,
    ))
}

fn edit(run: &mut RunDir, cfg: &HarnessConfig, data: &Path, model_path: &Path, mask_path: Option<&Path>) -> Result<(), CliError> {
    let base = load_model(run, model_path)?;
    let mask = match mask_path {
        Some(p) => GranularityMask::from_json(&run.read_input_string(p)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => GranularityMask::full(),
    };
    if let Some(h) = &mask.arch_hash {
        if *h != base.config().arch_hash() {
            return Err(CliError::Config(format!(
                "mask architecture {h} does not match the checkpoint ({})",
                base.config().arch_hash()
            )));
        }
    }
    let ds = load_dataset(run, data)?;
    let train = split_cases(&ds, Split::Train)?;
    let dev = split_cases(&ds, Split::Dev)?;
    let test = split_cases(&ds, Split::Test)?;
    let recovery = load_texts(run, data, CORPUS_RECOVERY)?;
    let holdout = load_texts(run, data, CORPUS_HOLDOUT)?;
    run.seed("edit", cfg.edit.seed);

    let level = mask.level();
    run.say(format!(
        "editing {} parameters at {level} granularity (lr {}, {:?})",
        base.masked_count(&mask)?,
        cfg.edit.lr_for(level),
        cfg.edit.optimizer
    ));
    let (pre, _) = run.timed("pre_eval", |_| measure(&base, "pre-edit", &train, &test, &holdout))?;
    let (edited, report) = run.timed("edit", |_| run_edit(&base, &mask, &cfg.edit, &train, &dev, &recovery))?;
    let (post, _) = run.timed("post_eval", |_| measure(&edited, level.name(), &train, &test, &holdout))?;

    run.write(MODEL, edited.to_bytes())?;
    run.write(EDIT_REPORT, report.to_json())?;
    run.write("trajectory.csv", report.trajectory_csv())?;
    let rows = vec![pre, post];
    run.write(COMPARISON, comparison_csv(&rows))?;
    let table = comparison_table(&rows);
    run.write("comparison.txt", &table)?;
    run.say(format!(
        "stopped after {} steps ({:?}); returned step {} with dev FB-Score {:.4}{}",
        report.steps_taken,
        report.stop_reason,
        report.best_step,
        report.post.mean_fb,
        if report.diverged { " [diverged]" } else { "" }
    ));
    for line in table.lines() {
        run.say(line);
    }
    Ok(())
}

// -- report ---------------------------------------------------------------------

fn report(run: &mut RunDir, runs: &[PathBuf]) -> Result<(), CliError> {
    let mut rows: Vec<(String, ComparisonRow)> = Vec::new();
    let mut baselines: Vec<ComparisonRow> = Vec::new();
    let mut bad = Vec::new();
    for dir in runs {
        let manifest = RunManifest::load(dir)?;
        run.read_input(&dir.join(crate::run::MANIFEST))?;
        let tampered = manifest.verify(dir)?;
        let status = if tampered.is_empty() { "ok".to_string() } else { format!("MODIFIED: {}", tampered.join(", ")) };
        run.say(format!("{} [{}] {status}", dir.display(), manifest.command));
        if !tampered.is_empty() {
            bad.push(dir.display().to_string());
            continue;
        }
        if manifest.command == "edit" {
            let text = run.read_input_string(&dir.join(COMPARISON))?;
            let mut cmp = parse_comparison_csv(&text)?.into_iter();
            if let Some(pre) = cmp.next() {
                if !baselines.contains(&pre) {
                    baselines.push(pre);
                }
            }
            for r in cmp {
                rows.push((dir.display().to_string(), r));
            }
        }
    }
    if !rows.is_empty() {
        let mut table = baselines.clone();
        table.extend(rows.iter().map(|(_, r)| r.clone()));
        run.write(COMPARISON, comparison_csv(&table))?;
        for line in comparison_table(&table).lines() {
            run.say(line);
        }
        if baselines.len() > 1 {
            run.say("note: the edit runs start from different base checkpoints");
        }
    }
    if !bad.is_empty() {
        return Err(CliError::Runtime(format!("artifacts changed since their run: {}", bad.join(", "))));
    }
    Ok(())
}
