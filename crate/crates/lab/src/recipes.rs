//! Named experiment recipes. Each recipe has a config file (seed set and
//! overrides) applied on top of the defaults and writes CSV reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use seqens_core::analysis::{four_case_table, parameter_similarity_matrix, prediction_similarity_matrix};
use seqens_core::calibration::{calibrated_combine, confidence_histogram, temperature_sweep, CalibrationConfig};
use seqens_core::ensembling::{combine, Chain, CombineStrategy};
use seqens_core::nets::{BackboneConfig, Conditioning, Generation, Placement};

use crate::config::RunConfig;
use crate::error::{usage, LabError, Result};
use crate::experiment::{Job, Study, CHAIN_STRIDE};
use crate::report::*;

pub const RECIPES: [(&str, &str); 12] = [
    ("seq_vs_sim", include_str!("../recipes/seq_vs_sim.cfg")),
    ("ece_sweep", include_str!("../recipes/ece_sweep.cfg")),
    ("diversity_init", include_str!("../recipes/diversity_init.cfg")),
    ("init_compare", include_str!("../recipes/init_compare.cfg")),
    ("confidence_hist", include_str!("../recipes/confidence_hist.cfg")),
    ("fourcase", include_str!("../recipes/fourcase.cfg")),
    ("forest", include_str!("../recipes/forest.cfg")),
    ("self_loops", include_str!("../recipes/self_loops.cfg")),
    ("sim_star", include_str!("../recipes/sim_star.cfg")),
    ("fusion", include_str!("../recipes/fusion.cfg")),
    ("placement", include_str!("../recipes/placement.cfg")),
    ("generalization", include_str!("../recipes/generalization.cfg")),
];

pub fn recipe_names() -> Vec<&'static str> {
    RECIPES.iter().map(|r| r.0).collect()
}

/// Defaults, then the recipe file, then `overrides` (text and its origin).
pub fn recipe_config(name: &str, overrides: Option<(&str, &Path)>) -> Result<RunConfig> {
    let (_, text) = RECIPES
        .iter()
        .find(|r| r.0 == name)
        .ok_or_else(|| usage(format!("unknown recipe '{}' (known: {})", name, recipe_names().join(", "))))?;
    let mut cfg = RunConfig::parse(text, Path::new(name))?;
    if let Some((text, origin)) = overrides {
        cfg.apply(text, origin)?;
    }
    Ok(cfg)
}

type Reports = BTreeMap<&'static str, Table>;

/// Runs recipe `name` and writes `config.cfg` plus its reports into `out_dir`.
pub fn reproduce_figure(name: &str, out_dir: &Path, overrides: Option<(&str, &Path)>) -> Result<Vec<PathBuf>> {
    let cfg = recipe_config(name, overrides)?;
    std::fs::create_dir_all(out_dir).map_err(LabError::io(out_dir))?;
    let resolved = out_dir.join("config.cfg");
    std::fs::write(&resolved, cfg.to_text()).map_err(LabError::io(&resolved))?;
    let study = Study::new(cfg)?;
    let mut reports = run_recipe(name, &study)?;
    let mut history = history_table();
    for (model, h) in study.histories() {
        push_history(&mut history, &model, &h);
    }
    reports.insert("history.csv", history);
    let mut written = vec![resolved];
    for (file, table) in &reports {
        let path = out_dir.join(file);
        table.write(&path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn run_recipe(name: &str, st: &Study) -> Result<Reports> {
    match name {
        "seq_vs_sim" => seq_vs_sim(st),
        "ece_sweep" => ece_sweep(st),
        "diversity_init" => diversity_init(st),
        "init_compare" => init_compare(st),
        "confidence_hist" => confidence_hist(st),
        "fourcase" => fourcase(st),
        "forest" => forest(st),
        "self_loops" => self_loops(st),
        "sim_star" => sim_star(st),
        "fusion" => fusion(st),
        "placement" => placement(st),
        "generalization" => generalization(st),
        _ => Err(usage(format!("unknown recipe '{}'", name))),
    }
}

fn single(name: &'static str, t: Table) -> Reports {
    BTreeMap::from([(name, t)])
}

fn run_id(group: u64) -> String {
    format!("seed{}", group)
}

fn seeds(st: &Study) -> Vec<u64> {
    st.config().seeds.clone()
}

fn members(st: &Study, group: u64, n: usize) -> Result<Vec<Generation>> {
    (0..n).map(|k| st.base(group, k).map(|g| (*g).clone())).collect()
}

fn prefetch_bases(st: &Study, n: usize) -> Result<()> {
    let jobs: Vec<Job> = seeds(st).into_iter().flat_map(|group| (0..n).map(move |slot| Job::Base { group, slot })).collect();
    st.prefetch(&jobs)
}

struct Row<'a> {
    mode: &'a str,
    member: String,
    n: usize,
    strategy: &'a str,
    t: f64,
}

fn push(st: &Study, table: &mut Table, group: u64, row: Row<'_>, labels: &[seqens_core::LabelMap]) -> Result<()> {
    let rid = run_id(group);
    let key = MetricsKey { run_id: &rid, mode: row.mode, member: row.member, n: row.n, strategy: row.strategy, temperature: row.t };
    push_metrics(table, key, &st.metrics(labels)?);
    Ok(())
}

fn ensemble_row<'a>(mode: &'a str, n: usize, strategy: &'a str) -> Row<'a> {
    Row { mode, member: "ensemble".into(), n, strategy, t: 1.0 }
}

fn seq_vs_sim(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let n_max = cfg.ensemble.n;
    let strategy = cfg.ensemble.strategy;
    let arch = cfg.conditioned_arch();
    prefetch_bases(st, n_max)?;
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let sim = members(st, group, n_max)?;
        let chain = st.chain(group, 0, n_max, &arch)?;
        for n in 1..=n_max {
            let refs: Vec<&Generation> = sim[..n].iter().collect();
            let p = st.combine_members(&refs, strategy)?;
            push(st, &mut t, group, ensemble_row("sim", n, strategy.name()), &p.argmax_labels())?;
            let seq = st.predict_chain(&chain.prefix(n)?)?;
            push(st, &mut t, group, ensemble_row("seq", n, "none"), &seq.labels)?;
        }
    }
    Ok(single("metrics.csv", t))
}

fn calibration_config(cfg: &RunConfig) -> CalibrationConfig {
    CalibrationConfig { num_bins: cfg.num_bins, temperature_grid: cfg.grid.clone(), ignore_label: cfg.train.ignore_label }
}

fn ece_sweep(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let ccfg = calibration_config(cfg);
    let n = cfg.ensemble.n;
    let strategy = cfg.ensemble.strategy;
    prefetch_bases(st, n)?;
    let first = seeds(st)[0];
    let logits = st.predict_member(&*st.base(first, 0)?)?.logits;
    let report = temperature_sweep(&logits, st.val_labels(), &ccfg)?;
    let mut out = single("calibration.csv", calibration_table(&report, ccfg.num_bins));
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let logits = members(st, group, n)?.iter().map(|g| Ok(st.predict_member(g)?.logits)).collect::<Result<Vec<_>>>()?;
        for &temp in &cfg.grid {
            let p = calibrated_combine(&logits, temp, strategy)?;
            let row = Row { mode: "sim_calibrated", member: "ensemble".into(), n, strategy: strategy.name(), t: temp };
            push(st, &mut t, group, row, &p.argmax_labels())?;
        }
    }
    out.insert("metrics.csv", t);
    Ok(out)
}

fn diversity_init(st: &Study) -> Result<Reports> {
    let n = st.config().ensemble.n;
    let mut jobs = Vec::new();
    for group in seeds(st) {
        for slot in 0..n {
            jobs.push(Job::Base { group, slot });
            jobs.push(Job::Warm { group, slot });
        }
    }
    st.prefetch(&jobs)?;
    let mut out = Reports::new();
    let mut summary = Table::new(["run_id", "init", "mean_pred_cosine", "mean_param_cosine"]);
    let first = seeds(st)[0];
    for group in seeds(st) {
        for init in ["random", "warmstart"] {
            let gens = (0..n)
                .map(|k| if init == "random" { st.base(group, k) } else { st.warm(group, k) }.map(|g| (*g).clone()))
                .collect::<Result<Vec<_>>>()?;
            let maps = gens.iter().map(|g| Ok(vec![st.predict_member(g)?.probs])).collect::<Result<Vec<_>>>()?;
            let pred = prediction_similarity_matrix(&maps)?;
            let param = parameter_similarity_matrix(&gens)?;
            summary.push(vec![run_id(group), init.into(), num(pred.mean_off_diagonal()), num(param.mean_off_diagonal())]);
            if group == first {
                let file = if init == "random" { "diversity_random.csv" } else { "diversity_warmstart.csv" };
                out.insert(file, diversity_table(&pred, Some(&param)));
            }
        }
    }
    out.insert("diversity_summary.csv", summary);
    Ok(out)
}

fn init_compare(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let n = cfg.ensemble.n;
    let mut jobs = Vec::new();
    for group in seeds(st) {
        for slot in 0..n {
            jobs.push(Job::Base { group, slot });
            jobs.push(Job::Warm { group, slot });
        }
    }
    st.prefetch(&jobs)?;
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        for init in ["random", "warmstart"] {
            let mut maps = Vec::new();
            for k in 0..n {
                let g = if init == "random" { st.base(group, k)? } else { st.warm(group, k)? };
                let b = st.predict_member(&g)?;
                push(st, &mut t, group, Row { mode: init, member: k.to_string(), n: 1, strategy: "none", t: 1.0 }, &b.labels)?;
                maps.push(b.probs);
            }
            let p = combine(&maps, cfg.ensemble.strategy)?;
            push(st, &mut t, group, ensemble_row(init, n, cfg.ensemble.strategy.name()), &p.argmax_labels())?;
        }
    }
    Ok(single("metrics.csv", t))
}

fn confidence_hist(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let ccfg = calibration_config(cfg);
    let mut t = histogram_table();
    for group in seeds(st) {
        let chain = st.chain(group, 0, cfg.ensemble.n.max(2), &cfg.conditioned_arch())?;
        let g0 = st.predict_member(&chain.generations()[0])?;
        let seq = st.predict_chain(&chain)?;
        for (name, probs) in [("g0", g0.probs), ("seq", seq.probs)] {
            let (ok, bad) = confidence_histogram(&[probs], st.val_labels(), &ccfg)?;
            push_histogram(&mut t, &format!("{}/{}", run_id(group), name), &ok, &bad);
        }
    }
    Ok(single("histogram.csv", t))
}

fn fourcase(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let mut t = fourcase_table();
    for group in seeds(st) {
        let chain = st.chain(group, 0, cfg.ensemble.n.max(2), &cfg.conditioned_arch())?;
        let g0 = st.predict_member(&chain.generations()[0])?.labels;
        let last = st.predict_chain(&chain)?.labels;
        let f = four_case_table(&g0, &last, st.val_labels(), cfg.train.ignore_label)?;
        push_fourcase(&mut t, &run_id(group), &f);
    }
    Ok(single("fourcase.csv", t))
}

fn forest(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let len = cfg.ensemble.n.max(2);
    let arch = cfg.conditioned_arch();
    let jobs: Vec<Job> = seeds(st)
        .into_iter()
        .flat_map(|group| (0..4).map(move |chain| (group, chain)))
        .map(|(group, chain)| Job::Chain { group, chain, len, arch: arch.clone() })
        .collect();
    st.prefetch(&jobs)?;
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let finals = (0..4).map(|m| Ok(st.predict_chain(&st.chain(group, m, len, &arch)?)?.probs)).collect::<Result<Vec<_>>>()?;
        for m in [1, 2, 4] {
            let p = combine(&finals[..m], CombineStrategy::Uniform)?;
            push(st, &mut t, group, ensemble_row("forest", m, "uniform"), &p.argmax_labels())?;
        }
    }
    Ok(single("metrics.csv", t))
}

fn self_loops(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let mut chain = st.chain(group, 0, cfg.ensemble.n.max(2), &cfg.conditioned_arch())?;
        for s in [0, 1, 3] {
            chain.self_loops = s;
            let b = st.predict_chain(&chain)?;
            push(st, &mut t, group, Row { mode: "seq", member: format!("self_loops={}", s), n: chain.len(), strategy: "none", t: 1.0 }, &b.labels)?;
        }
    }
    Ok(single("metrics.csv", t))
}

fn sim_star(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let strategy = cfg.ensemble.strategy;
    let arch = st.adon_arch();
    let mut jobs = Vec::new();
    for group in seeds(st) {
        jobs.extend([Job::Base { group, slot: 0 }, Job::Base { group, slot: 1 }, Job::Fixed { group, slot: 1 }]);
    }
    st.prefetch(&jobs)?;
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let g0 = st.base(group, 0)?;
        let g1 = st.base(group, 1)?;
        let star = st.fixed(group, 1)?;
        push(st, &mut t, group, Row { mode: "single", member: "0".into(), n: 1, strategy: "none", t: 1.0 }, &st.predict_member(&g0)?.labels)?;
        let sim = st.combine_members(&[&g0, &g1], strategy)?;
        push(st, &mut t, group, ensemble_row("sim", 2, strategy.name()), &sim.argmax_labels())?;
        let p_star = st.combine_members(&[&g0, &star], strategy)?;
        push(st, &mut t, group, ensemble_row("sim_star", 2, strategy.name()), &p_star.argmax_labels())?;
        let seq = st.predict_chain(&st.chain(group, 0, 2, &arch)?)?;
        push(st, &mut t, group, ensemble_row("seq", 2, "none"), &seq.labels)?;
    }
    Ok(single("metrics.csv", t))
}

fn conditioned_variants(st: &Study, variants: &[(&'static str, BackboneConfig)]) -> Result<Table> {
    let cfg = st.config();
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let g0 = st.base(group, 0)?;
        push(st, &mut t, group, Row { mode: "single", member: "0".into(), n: 1, strategy: "none", t: 1.0 }, &st.predict_member(&g0)?.labels)?;
        for (name, arch) in variants {
            let b = st.predict_chain(&st.chain(group, 0, 2, arch)?)?;
            push(st, &mut t, group, ensemble_row(name, 2, "none"), &b.labels)?;
        }
    }
    Ok(t)
}

fn fusion(st: &Study) -> Result<Reports> {
    let base = st.adon_arch();
    let plain = |c: Conditioning| BackboneConfig { conditioning: c, adon_placements: Vec::new(), ..base.clone() };
    let variants = [("adon", base.clone()), ("early_fusion", plain(Conditioning::EarlyFusion)), ("late_fusion", plain(Conditioning::LateFusion))];
    Ok(single("metrics.csv", conditioned_variants(st, &variants)?))
}

fn placement(st: &Study) -> Result<Reports> {
    use Placement::*;
    let base = st.adon_arch();
    let with = |p: &[Placement]| BackboneConfig { adon_placements: p.to_vec(), ..base.clone() };
    let variants = [
        ("early", with(&[Early])),
        ("middle", with(&[Middle])),
        ("late", with(&[Late])),
        ("early+middle", with(&[Early, Middle])),
        ("middle+late", with(&[Middle, Late])),
    ];
    Ok(single("metrics.csv", conditioned_variants(st, &variants)?))
}

fn generalization(st: &Study) -> Result<Reports> {
    let cfg = st.config();
    let pool_size = cfg.ensemble.pool_size;
    let arch = cfg.conditioned_arch();
    let slots: Vec<usize> = (0..pool_size).map(|k| k * CHAIN_STRIDE).collect();
    let jobs: Vec<Job> = seeds(st)
        .into_iter()
        .flat_map(|group| slots.iter().map(move |&slot| Job::Base { group, slot }))
        .collect();
    st.prefetch(&jobs)?;
    let mut t = metrics_table(cfg.data.num_classes);
    for group in seeds(st) {
        let g1 = st.generalized(group, &slots, &arch)?;
        for (k, &slot) in slots.iter().enumerate() {
            let g0 = st.base(group, slot)?;
            push(st, &mut t, group, Row { mode: "single", member: k.to_string(), n: 1, strategy: "none", t: 1.0 }, &st.predict_member(&g0)?.labels)?;
            let chain = Chain::new(vec![(*g0).clone(), (*g1).clone()], 0)?;
            let b = st.predict_chain(&chain)?;
            push(st, &mut t, group, Row { mode: "generalized", member: k.to_string(), n: 2, strategy: "none", t: 1.0 }, &b.labels)?;
            let own = st.predict_chain(&st.chain(group, k, 2, &arch)?)?;
            push(st, &mut t, group, Row { mode: "seq", member: k.to_string(), n: 2, strategy: "none", t: 1.0 }, &own.labels)?;
        }
    }
    Ok(single("metrics.csv", t))
}
