use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use flimoe::attribution::{AttributionOptions, IgPath, Method, Scope, Target};
use flimoe::harness::{
    bin_alignment, faithfulness_sweep, maps_for, pair_masking, BinConfig, BinReport, DropCurve,
    PairMaskConfig, PairMaskReport, PairRule, SweepConfig,
};
use flimoe::interaction::{
    rank_pairs, report_table, score_pairs, FeatureUniverse, MaskScope, ModelProbe, PairBudget,
    RankKey, Sampling,
};
use flimoe::model::{ExpertRole, FusionModel, ModelConfig};
use flimoe::synthdata::{
    generate_splits, read_dataset, write_dataset, GenSpec, Sample, LABEL_NAMES,
};
use flimoe::training::{evaluate, train, EncodedSet, TrainConfig};

use crate::config::RunConfig;

pub const RUN_ROOT_ENV: &str = "FLIMOE_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Creates `<root>/<command>-<timestamp>-seed<seed>` and writes the resolved
/// config into it.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let root = run_root();
    fs::create_dir_all(&root).with_context(|| format!("creating run root {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}-seed{}", cfg.raw("seed"));
    let mut dir = root.join(&base);
    let mut n = 1;
    loop {
        match fs::create_dir(&dir) {
            Ok(()) => break,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                n += 1;
                dir = root.join(format!("{base}-{n}"));
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    fs::write(dir.join("config.txt"), cfg.echo())?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

fn gen_spec(cfg: &RunConfig) -> Result<GenSpec> {
    Ok(GenSpec {
        seed: cfg.get("data.seed")?,
        n_samples: 0,
        len_a: cfg.get("data.len_a")?,
        len_b: cfg.get("data.len_b")?,
        vocab_a: cfg.get("data.vocab_a")?,
        vocab_b: cfg.get("data.vocab_b")?,
        noise_rate: cfg.get("data.noise_rate")?,
    })
}

fn model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let spec = gen_spec(cfg)?;
    Ok(ModelConfig {
        flavor: cfg.get("model.flavor")?,
        modalities: vec![(spec.vocab_a, spec.len_a), (spec.vocab_b, spec.len_b)],
        d_raw: cfg.get("model.d_raw")?,
        d_model: cfg.get("model.d_model")?,
        layers: cfg.get("model.layers")?,
        heads: cfg.get("model.heads")?,
        mlp_ratio: cfg.get("model.mlp_ratio")?,
        gate_hidden: cfg.get("model.gate_hidden")?,
        temperature: cfg.get("model.temperature")?,
        encoder_seed: cfg.get("model.encoder_seed")?,
        ..ModelConfig::default()
    })
}

fn attribution_options(cfg: &RunConfig) -> Result<AttributionOptions> {
    Ok(AttributionOptions {
        ig: IgPath {
            steps: cfg.get("attr.ig_steps")?,
            curvature: cfg.get("attr.ig_curvature")?,
            rule: cfg.get("attr.ig_rule")?,
        },
        seed: cfg.get("seed")?,
        chunk: cfg.get("attr.chunk")?,
    })
}

fn pair_budget(cfg: &RunConfig) -> Result<PairBudget> {
    Ok(PairBudget {
        sii_samples: cfg.get("mc.sii_samples")?,
        gap_samples: cfg.get("mc.gap_samples")?,
        sampling: cfg.get::<Sampling>("mc.sampling")?,
    })
}

fn split_path(cfg: &RunConfig, split: &str) -> Result<PathBuf> {
    let path = cfg.path("data.dir")?.join(format!("{split}.jsonl"));
    if !path.is_file() {
        bail!("dataset file {} does not exist", path.display());
    }
    Ok(path)
}

fn read_split(cfg: &RunConfig, split: &str) -> Result<Vec<Sample>> {
    let path = split_path(cfg, split)?;
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

/// The analysis split, truncated to `data.limit` samples.
fn analysis_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut samples = read_split(cfg, cfg.raw("data.split"))?;
    let limit: usize = cfg.get("data.limit")?;
    if limit > 0 {
        samples.truncate(limit);
    }
    if samples.is_empty() {
        bail!("split {} is empty", cfg.raw("data.split"));
    }
    Ok(samples)
}

fn load_model(cfg: &RunConfig) -> Result<FusionModel> {
    let path = cfg.path("model.path")?;
    if !path.is_file() {
        bail!("checkpoint {} does not exist", path.display());
    }
    FusionModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn expert_index(model: &FusionModel, name: &str) -> Result<usize> {
    if let Ok(i) = name.parse::<usize>() {
        if i < model.num_experts() {
            return Ok(i);
        }
        bail!(
            "expert index {i} out of range for a model with {} experts",
            model.num_experts()
        );
    }
    let role: ExpertRole = name.parse().map_err(|e: String| anyhow!(e))?;
    model
        .expert_index(role)
        .ok_or_else(|| anyhow!("a {} model has no {role} expert", model.config().flavor))
}

fn label_index(name: &str) -> Result<usize> {
    LABEL_NAMES
        .iter()
        .position(|l| *l == name)
        .ok_or_else(|| anyhow!("unknown label {name:?} ({})", LABEL_NAMES.join("|")))
}

fn resolve_target(cfg: &RunConfig, model: &FusionModel, scope: Scope) -> Result<Target> {
    match cfg.raw("attr.target") {
        "auto" => Ok(match scope {
            Scope::Model => Target::AllLabels,
            Scope::Expert(e) => Target::for_role(model.roles()[e]),
        }),
        "all" => Ok(Target::AllLabels),
        name => Ok(Target::Label(label_index(name)?)),
    }
}

fn log(msg: impl AsRef<str>) {
    eprintln!("{}", msg.as_ref());
}

pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let spec = gen_spec(cfg)?;
    let splits = generate_splits(
        &spec,
        cfg.get("data.n_train")?,
        cfg.get("data.n_val")?,
        cfg.get("data.n_test")?,
    )?;
    for (name, samples) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        write_dataset(samples, &dir.join(format!("{name}.jsonl")))?;
        log(format!("{name}: {} samples", samples.len()));
    }
    Ok(())
}

pub fn train_model(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let seed: u64 = cfg.get("seed")?;
    let patience: usize = cfg.get("train.patience")?;
    let tcfg = TrainConfig {
        learning_rate: cfg.get("train.lr")?,
        batch_size: cfg.get("train.batch_size")?,
        epochs: cfg.get("train.epochs")?,
        lambda_int: cfg.get("train.lambda_int")?,
        seed,
        patience: (patience > 0).then_some(patience),
    };
    tcfg.validate()?;
    let mut model = FusionModel::new(model_config(cfg)?, seed)?;
    let train_set = EncodedSet::new(&model, &read_split(cfg, "train")?)?;
    let val_set = EncodedSet::new(&model, &read_split(cfg, "val")?)?;
    let test_set = EncodedSet::new(&model, &read_split(cfg, "test")?)?;
    let train_log = train(&mut model, &train_set, &val_set, &tcfg, |r| {
        log(format!(
            "epoch {:>2} {:<5} loss {:.4} accuracy {:?}",
            r.epoch, r.split, r.loss, r.per_label_accuracy
        ))
    })?;
    model.save(&dir.join("model.bin"))?;
    write(dir, "train_log.jsonl", train_log.to_jsonl())?;
    let (test_loss, metrics) = evaluate(&model, &test_set)?;
    let summary = serde_json::json!({
        "flavor": model.config().flavor.to_string(),
        "best_epoch": train_log.best_epoch,
        "best_val_accuracy": train_log.best_val_accuracy,
        "test_loss": test_loss,
        "test": metrics,
    });
    write(
        dir,
        "metrics.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    log(format!(
        "test per-label accuracy {:?}",
        metrics.per_label_accuracy
    ));
    Ok(())
}

fn parse_scope(cfg: &RunConfig, model: &FusionModel) -> Result<Scope> {
    match cfg.raw("attr.scope") {
        "model" => Ok(Scope::Model),
        name => Ok(Scope::Expert(expert_index(model, name)?)),
    }
}

pub fn attribute_maps(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_model(cfg)?;
    let set = EncodedSet::new(&model, &analysis_samples(cfg)?)?;
    let method: Method = cfg.get("attr.method")?;
    let scope = parse_scope(cfg, &model)?;
    let target = resolve_target(cfg, &model, scope)?;
    let ids: Vec<usize> = (0..set.len()).collect();
    let maps = maps_for(
        &model,
        &set,
        &ids,
        scope,
        method,
        target,
        &attribution_options(cfg)?,
    )?;
    let records: Vec<_> = maps
        .iter()
        .zip(&ids)
        .flat_map(|(m, &i)| m.records(i))
        .collect();
    write(dir, "maps.jsonl", jsonl(&records)?)?;
    log(format!("{} maps with {method}", maps.len()));
    Ok(())
}

pub fn faithfulness(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_model(cfg)?;
    let set = EncodedSet::new(&model, &analysis_samples(cfg)?)?;
    let sweep = SweepConfig {
        ks: cfg.list("faith.ks")?,
        seeds: cfg.list("faith.seeds")?,
        metric: cfg.raw("faith.metric").to_string(),
        attribution: attribution_options(cfg)?,
    };
    let methods: Vec<Method> = cfg.list("faith.methods")?;
    let mut curves_csv = format!("{}\n", DropCurve::CSV_HEADER);
    let mut summary_csv = String::from("method,metric,m_base,summary_delta_m\n");
    let mut curves = Vec::new();
    for method in methods {
        let curve = faithfulness_sweep(&model, &set, method, &sweep)?;
        log(format!("{method}: summary drop {:.4}", curve.summary()));
        curves_csv.push_str(&curve.csv_rows());
        let _ = writeln!(
            summary_csv,
            "{method},{},{:.6},{:.6}",
            curve.metric,
            curve.m_base,
            curve.summary()
        );
        curves.push(curve);
    }
    write(dir, "drop_curves.csv", curves_csv)?;
    write(dir, "summary.csv", summary_csv)?;
    write(dir, "drop_curves.jsonl", jsonl(&curves)?)?;
    Ok(())
}

pub fn bins(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_model(cfg)?;
    let set = EncodedSet::new(&model, &analysis_samples(cfg)?)?;
    let bcfg = BinConfig {
        edges: cfg.list("bins.edges")?,
        qs: cfg.list("bins.qs")?,
        budget: pair_budget(cfg)?,
        subsample: cfg.get("bins.subsample")?,
        seed: cfg.get("seed")?,
        scope: cfg.get::<MaskScope>("mc.mask_scope")?,
        attribution: attribution_options(cfg)?,
    };
    let mut csv = format!("{}\n", BinReport::CSV_HEADER);
    let mut reports = Vec::new();
    for name in cfg.list::<String>("bins.experts")? {
        let expert = expert_index(&model, &name)?;
        let report = bin_alignment(&model, expert, &set, &bcfg)?;
        log(format!("{name}: {:?}", report.means_at(bcfg.qs[0])));
        csv.push_str(&report.csv_rows());
        reports.push(report);
    }
    write(dir, "bins.csv", csv)?;
    write(dir, "bins.jsonl", jsonl(&reports)?)?;
    Ok(())
}

pub fn pair_mask(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_model(cfg)?;
    let set = EncodedSet::new(&model, &analysis_samples(cfg)?)?;
    let pcfg = PairMaskConfig {
        pool_fraction: cfg.get("pairmask.pool_fraction")?,
        budget: cfg.get("pairmask.budget")?,
        seeds: cfg.list("pairmask.seeds")?,
        subsample: cfg.get("pairmask.subsample")?,
        subsample_seed: cfg.get("seed")?,
        pair_budget: pair_budget(cfg)?,
        metric: cfg.raw("pairmask.metric").to_string(),
        scope: cfg.get::<MaskScope>("mc.mask_scope")?,
        attribution: attribution_options(cfg)?,
    };
    let mut csv = format!("{}\n", PairMaskReport::CSV_HEADER);
    let mut summary = String::from("expert,rule,budget,metric,m_before,mean_drop\n");
    let mut reports = Vec::new();
    for name in cfg.list::<String>("pairmask.experts")? {
        let expert = expert_index(&model, &name)?;
        let ranked = match model.roles()[expert] {
            ExpertRole::Synergy => PairRule::Sii,
            ExpertRole::Redundancy => PairRule::RRed,
            role => bail!("pair masking needs a synergy or redundancy expert, got {role}"),
        };
        for rule in [PairRule::Random, ranked] {
            let report = pair_masking(&model, expert, &set, rule, &pcfg)?;
            log(format!(
                "{name} {rule}: mean drop {:.4}",
                report.mean_drop()
            ));
            csv.push_str(&report.csv_rows());
            let _ = writeln!(
                summary,
                "{expert},{rule},{},{},{:.6},{:.6}",
                report.budget,
                report.metric,
                report.m_before,
                report.mean_drop()
            );
            reports.push(report);
        }
    }
    write(dir, "pair_mask.csv", csv)?;
    write(dir, "summary.csv", summary)?;
    write(dir, "pair_mask.jsonl", jsonl(&reports)?)?;
    Ok(())
}

pub fn interactions(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = load_model(cfg)?;
    let samples = analysis_samples(cfg)?;
    let set = EncodedSet::new(&model, &samples)?;
    let expert = expert_index(&model, cfg.raw("interactions.expert"))?;
    let role = model.roles()[expert];
    let key = match role {
        ExpertRole::Redundancy => RankKey::RRed,
        _ => RankKey::Sii,
    };
    let method: Method = cfg.get("attr.method")?;
    let rho: f64 = cfg.get("interactions.rho")?;
    let top: f64 = cfg.get("interactions.top")?;
    let budget = pair_budget(cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let scope: MaskScope = cfg.get("mc.mask_scope")?;
    let count = cfg.get::<usize>("interactions.samples")?.min(set.len());
    let ids: Vec<usize> = (0..count).collect();
    let target = resolve_target(cfg, &model, Scope::Expert(expert))?;
    let maps = maps_for(
        &model,
        &set,
        &ids,
        Scope::Expert(expert),
        method,
        target,
        &attribution_options(cfg)?,
    )?;
    let mut table = String::new();
    let mut records = Vec::new();
    for (&id, map) in ids.iter().zip(&maps) {
        let universe = FeatureUniverse::from_map(map, expert, rho)?;
        let pairs = universe.cross_modal_pairs();
        if pairs.is_empty() {
            log(format!("sample {id}: no cross-modal pairs in the universe"));
            continue;
        }
        let weights = target.weights(&set.labels[id])?;
        let mut probe = ModelProbe::new(
            &model,
            expert,
            set.seqs[id].clone(),
            weights,
            universe,
            scope,
        )?;
        let scored = score_pairs(&mut probe, &pairs, &budget, seed, id)?;
        let ranked = rank_pairs(&scored, key, top)?;
        let rows = report_table(&set.seqs[id], &ranked);
        for (i, line) in rows.lines().enumerate() {
            if i == 0 {
                if table.is_empty() {
                    let _ = writeln!(table, "sample\t{line}");
                }
            } else {
                let _ = writeln!(table, "{id}\t{line}");
            }
        }
        records.extend(ranked.into_iter().map(|p| (id, p)));
    }
    write(dir, "interactions.tsv", table)?;
    let json: Vec<_> = records
        .iter()
        .map(|(id, p)| serde_json::json!({ "sample": id, "pair": p }))
        .collect();
    write(dir, "interactions.jsonl", jsonl(&json)?)?;
    log(format!(
        "{} pairs over {count} samples ranked by {key:?}",
        records.len()
    ));
    Ok(())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn command_of(run: &str) -> &str {
    [
        "gen-data",
        "train",
        "attribute",
        "faithfulness",
        "bins",
        "pair-mask",
        "interactions",
        "report",
    ]
    .into_iter()
    .find(|c| run.starts_with(&format!("{c}-")))
    .unwrap_or("")
}

/// Collates earlier runs under the root into summary tables.
pub fn report(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let root = match cfg.raw("report.root") {
        "" => run_root(),
        r => PathBuf::from(r),
    };
    let mut runs: Vec<String> = fs::read_dir(&root)
        .with_context(|| format!("reading run root {}", root.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    runs.sort();

    let mut training = String::from("| run | flavor | best epoch | unique | redundancy | synergy | micro-F1 |\n|---|---|---|---|---|---|---|\n");
    let mut faith =
        String::from("| run | method | metric | base | summary drop |\n|---|---|---|---|---|\n");
    let mut bins = String::from("| run | expert | key | seed | bin | q | mean | pairs |\n|---|---|---|---|---|---|---|---|\n");
    let mut pairs = String::from("| run | expert | rule | budget | metric | before | mean drop |\n|---|---|---|---|---|---|---|\n");
    let mut faith_csv = String::from("run,method,metric,m_base,summary_delta_m\n");
    let mut counts = [0usize; 4];
    for run in &runs {
        let rd = root.join(run);
        match command_of(run) {
            "train" if rd.join("metrics.json").is_file() => {
                let v: serde_json::Value =
                    serde_json::from_str(&fs::read_to_string(rd.join("metrics.json"))?)?;
                let acc = |i: usize| {
                    v["test"]["per_label_accuracy"][i]
                        .as_f64()
                        .unwrap_or(f64::NAN)
                };
                let _ = writeln!(
                    training,
                    "| {run} | {} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    v["flavor"].as_str().unwrap_or("?"),
                    v["best_epoch"],
                    acc(0),
                    acc(1),
                    acc(2),
                    v["test"]["micro_f1"].as_f64().unwrap_or(f64::NAN)
                );
                counts[0] += 1;
            }
            "faithfulness" if rd.join("summary.csv").is_file() => {
                for row in read_csv(&rd.join("summary.csv"))? {
                    let _ = writeln!(faith, "| {run} | {} |", row.join(" | "));
                    let _ = writeln!(faith_csv, "{run},{}", row.join(","));
                }
                counts[1] += 1;
            }
            "bins" if rd.join("bins.csv").is_file() => {
                for row in read_csv(&rd.join("bins.csv"))? {
                    if let [expert, role, key, seed, bin, q, mean, n] = row.as_slice() {
                        let _ = writeln!(bins, "| {run} | {expert} ({role}) | {key} | {seed} | {bin} | {q} | {mean} | {n} |");
                    }
                }
                counts[2] += 1;
            }
            "pair-mask" if rd.join("summary.csv").is_file() => {
                for row in read_csv(&rd.join("summary.csv"))? {
                    let _ = writeln!(pairs, "| {run} | {} |", row.join(" | "));
                }
                counts[3] += 1;
            }
            _ => {}
        }
    }
    let mut md = String::from("# Run report\n\n");
    for (title, body, n) in [
        ("Training", &training, counts[0]),
        ("Faithfulness: average drop over K", &faith, counts[1]),
        (
            "Bin alignment: mean interaction of the top-q pairs per importance bin",
            &bins,
            counts[2],
        ),
        ("Pair masking", &pairs, counts[3]),
    ] {
        let _ = writeln!(md, "## {title}\n");
        if n == 0 {
            md.push_str("No runs.\n\n");
        } else {
            md.push_str(body);
            md.push('\n');
        }
    }
    write(dir, "report.md", &md)?;
    write(dir, "faithfulness.csv", faith_csv)?;
    print!("{md}");
    Ok(())
}
