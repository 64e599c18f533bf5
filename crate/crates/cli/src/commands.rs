//! The three operations behind the subcommands. Each writes its files into
//! `--out`, prints a short summary to stdout, and leaves a manifest behind.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ridc::infotheory::signal_marginal_entropy;
use ridc::model::{Belief, ChoiceSpec, Market, PreferenceParams};
use ridc::moments::{
    estimate_stage1, estimate_theta, bootstrap_theta, identification_diagnostics, unpack_stage1,
    WeightScheme,
};
use ridc::inversion::pseudo_shocks;
use ridc::persuasion::{persuaded_choice, signal_marginal, PersuasionStrategy};
use ridc::welfare::welfare_distribution;

use crate::config::Config;
use crate::data;
use crate::reports::{self, Manifest, Stage1Report, Stage2Report};
use crate::CliError;

pub struct RunContext {
    pub jobs: Option<usize>,
    pub strict: bool,
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))
}

fn read_config(path: &Path) -> Result<(Config, Vec<u8>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CliError::Config(format!("{}: not UTF-8: {e}", path.display())))?;
    Ok((Config::parse(text)?, bytes))
}

fn manifest_base(command: &str, config_bytes: &[u8], ctx: &RunContext) -> Manifest {
    Manifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        library_version: ridc::VERSION.to_string(),
        config_sha256: reports::sha256_hex(config_bytes),
        data_sha256: None,
        seed: None,
        jobs: ctx.jobs,
        strict: ctx.strict,
        weight: None,
        bootstrap: None,
        outputs: Vec::new(),
        timings_ms: BTreeMap::new(),
    }
}

pub fn cmd_simulate(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    ctx: &RunContext,
) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let (config, config_bytes) = read_config(config_path)?;
    let pair = config.dgp_pair(seed)?;
    let spec = config.spec()?;
    let solver = config.solver_options();
    ensure_out_dir(out)?;

    let t_sim = Instant::now();
    let mut markets = Vec::new();
    let mut truth = Vec::new();
    let mut strategy = None;
    for dgp in [&pair.plain, &pair.exposed].into_iter().flatten() {
        let sim = ridc::simulate::simulate_markets(dgp, &solver)?;
        markets.extend(sim.markets);
        truth.extend(sim.truth);
        if dgp.persuasion.is_some() {
            strategy = dgp.persuasion.clone();
        }
    }
    // The regimes were drawn as separate streams; renumber into one table.
    for (i, m) in markets.iter_mut().enumerate() {
        m.id = format!("m{i:06}");
    }
    let sim_ms = t_sim.elapsed().as_millis();

    let markets_path = out.join("markets.csv");
    let truth_path = out.join("truth.csv");
    data::write_markets(&markets_path, &markets, &spec)?;
    data::write_truth(&truth_path, &markets, &truth, &spec, strategy.as_ref())?;

    let exposed = markets.iter().filter(|m| m.chi).count();
    let mut manifest = manifest_base("simulate", &config_bytes, ctx);
    manifest.seed = Some(pair.seed);
    manifest.outputs = vec!["markets.csv".into(), "truth.csv".into()];
    manifest.timings_ms.insert("simulate".into(), sim_ms);
    manifest.timings_ms.insert("total".into(), t0.elapsed().as_millis());
    reports::write_json(&out.join("manifest.json"), &manifest)?;

    println!(
        "simulated {} markets ({} exposed, {} plain) with seed {}",
        markets.len(),
        exposed,
        markets.len() - exposed,
        pair.seed
    );
    println!("wrote {}", markets_path.display());
    println!("wrote {}", truth_path.display());
    Ok(0)
}

pub struct EstimateFlags {
    pub seed: Option<u64>,
    pub weight: Option<WeightScheme>,
    pub bootstrap: Option<usize>,
}

pub fn cmd_estimate(
    config_path: &Path,
    data_path: &Path,
    out: &Path,
    flags: &EstimateFlags,
    ctx: &RunContext,
) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let (config, config_bytes) = read_config(config_path)?;
    config.validate_estimate()?;
    let spec = config.spec()?;
    let data_bytes =
        std::fs::read(data_path).map_err(|e| CliError::Config(format!("{}: {e}", data_path.display())))?;
    let markets = data::read_markets(data_path, &spec)?;
    ensure_out_dir(out)?;

    let plain: Vec<Market> = markets.iter().filter(|m| !m.chi).cloned().collect();
    let exposed: Vec<Market> = markets.iter().filter(|m| m.chi).cloned().collect();
    if plain.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no unexposed (chi=0) markets; stage one has nothing to fit",
            data_path.display()
        )));
    }

    let mut weak = false;
    let diagnostics = identification_diagnostics(&plain, &spec);
    for d in diagnostics.levels.iter().filter(|d| d.flagged) {
        weak = true;
        eprintln!(
            "warning: level {} demographics are nearly collinear (condition {:.3e}); \
             group-level parameters are weakly identified",
            d.level + 1,
            d.condition
        );
    }

    let stage1_opts = config.stage1_options(flags.weight, flags.seed);
    let t_s1 = Instant::now();
    let stage1 = estimate_stage1(&plain, &spec, &stage1_opts)?;
    let s1_ms = t_s1.elapsed().as_millis();

    let report1 = Stage1Report::from_estimate(&stage1, &spec);
    reports::write_json(&out.join("stage1.json"), &report1)?;
    write_alpha_table(&out.join("alpha.csv"), &report1, &spec)?;
    write_p0_table(&out.join("p0_table.csv"), &stage1.params, &spec)?;

    let t_inv = Instant::now();
    let (prior_hat, shocks) = pseudo_shocks(&plain, &stage1.params, &stage1_opts.inversion)?;
    let inv_ms = t_inv.elapsed().as_millis();
    let plain_ids: Vec<String> = plain.iter().map(|m| m.id.clone()).collect();
    let plain_levels: Vec<usize> = plain.iter().map(|m| m.x_level).collect();
    data::write_shocks(&out.join("shocks.csv"), &plain_ids, &plain_levels, &shocks, spec.j_count())?;

    println!(
        "stage 1: {} ({} plain markets, objective {:.6e}{})",
        if stage1.converged { "converged" } else { "did not converge" },
        plain.len(),
        stage1.objective,
        if stage1.inversion_failures > 0 {
            format!(", {} inverted poorly", stage1.inversion_failures)
        } else {
            String::new()
        }
    );

    let mut outputs = vec![
        "stage1.json".to_string(),
        "alpha.csv".to_string(),
        "p0_table.csv".to_string(),
        "shocks.csv".to_string(),
        "shares_table.csv".to_string(),
        "config_snapshot.toml".to_string(),
    ];

    let mut theta_ms = 0;
    let mut strategy_hat: Option<PersuasionStrategy> = None;
    if exposed.is_empty() {
        println!("stage 2: skipped, no exposed (chi=1) markets in the data");
    } else {
        let theta_opts = config.theta_options();
        let mid = 0.5 * (theta_opts.bounds.0 + theta_opts.bounds.1);
        let template = config.strategy(&spec, Some(mid))?;
        let t_s2 = Instant::now();
        let est = estimate_theta(&exposed, &prior_hat, &template, &stage1.params, &theta_opts)?;
        theta_ms = t_s2.elapsed().as_millis();

        let mut report2 = Stage2Report::from_estimate(&est);
        if let Some(r) = flags.bootstrap.filter(|&r| r > 0).or_else(|| {
            (config.estimate.bootstrap > 0).then_some(config.estimate.bootstrap)
        }) {
            let draws = bootstrap_theta(
                &plain,
                &exposed,
                &spec,
                &stage1_opts,
                &template,
                &theta_opts,
                r,
                config.estimate.bootstrap_seed,
            )?;
            report2.attach_bootstrap(draws, config.estimate.bootstrap_seed);
        }
        reports::write_json(&out.join("stage2.json"), &report2)?;
        write_profile(&out.join("profile.csv"), &report2)?;

        let hat = template.with_theta(&est.theta)?;
        write_entropy_table(&out.join("entropy.csv"), &prior_hat, &hat, &spec)?;
        outputs.extend(["stage2.json".into(), "profile.csv".into(), "entropy.csv".into()]);

        if est.weak_identification {
            weak = true;
            eprintln!("warning: the stage-2 objective profile is flat; theta is weakly identified");
        }
        println!(
            "stage 2: theta = {} ({} exposed markets, objective {:.6e}{})",
            est.theta.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(", "),
            exposed.len(),
            est.objective,
            if est.weak_identification { ", WEAK" } else { "" }
        );
        strategy_hat = Some(hat);
    }

    write_shares_table(
        &out.join("shares_table.csv"),
        &markets,
        &stage1.params,
        strategy_hat.as_ref(),
        &prior_hat,
        &config,
        &spec,
    )?;
    std::fs::write(out.join("config_snapshot.toml"), &config_bytes)
        .map_err(|e| CliError::Config(format!("config_snapshot.toml: {e}")))?;

    let mut manifest = manifest_base("estimate", &config_bytes, ctx);
    manifest.data_sha256 = Some(reports::sha256_hex(&data_bytes));
    manifest.seed = Some(stage1_opts.seed);
    manifest.weight = Some(format!("{:?}", stage1_opts.weight).to_lowercase());
    manifest.bootstrap = flags.bootstrap;
    outputs.sort();
    manifest.outputs = outputs;
    manifest.timings_ms.insert("stage1".into(), s1_ms);
    manifest.timings_ms.insert("inversion".into(), inv_ms);
    if theta_ms > 0 {
        manifest.timings_ms.insert("stage2".into(), theta_ms);
    }
    manifest.timings_ms.insert("total".into(), t0.elapsed().as_millis());
    reports::write_json(&out.join("manifest.json"), &manifest)?;

    if weak && ctx.strict {
        eprintln!("error: weak identification escalated by --strict");
        return Ok(4);
    }
    Ok(0)
}

fn write_alpha_table(path: &Path, report: &Stage1Report, spec: &ChoiceSpec) -> Result<(), CliError> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    w.write_record(["level", "group", "option", "estimate", "std_error"])
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for li in 0..l {
        for ki in 0..k {
            for ji in 0..j - 1 {
                let row = &report.parameters[(li * k + ki) * (j - 1) + ji];
                w.write_record([
                    spec.level_labels()[li].as_str(),
                    spec.group_labels()[ki].as_str(),
                    spec.option_labels()[ji].as_str(),
                    &format!("{}", row.estimate),
                    &format!("{}", row.std_error),
                ])
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_p0_table(path: &Path, params: &PreferenceParams, spec: &ChoiceSpec) -> Result<(), CliError> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut header = vec!["level".to_string(), "group".to_string()];
    header.extend((1..=j).map(|i| format!("p0_{i}")));
    w.write_record(&header).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for li in 0..l {
        for ki in 0..k {
            let p0 = params.p0_slice(ki, li);
            debug_assert!((p0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut row = vec![spec.level_labels()[li].clone(), spec.group_labels()[ki].clone()];
            row.extend(p0.iter().map(|x| format!("{x}")));
            w.write_record(&row).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_profile(path: &Path, report: &Stage2Report) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    w.write_record(["theta", "objective"])
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for [t, q] in &report.profile {
        w.write_record([format!("{t}"), format!("{q}")])
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_entropy_table(
    path: &Path,
    prior: &Belief,
    strategy: &PersuasionStrategy,
    spec: &ChoiceSpec,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    w.write_record(["group", "theta", "prob_plus", "prob_minus", "entropy_bits"])
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for ki in 0..spec.k_count() {
        let marginal = signal_marginal(prior, strategy, ki)?;
        let bits = signal_marginal_entropy(prior, strategy, ki)?;
        let theta = strategy.theta()[strategy.group(ki)?.theta_index];
        w.write_record([
            spec.group_labels()[ki].clone(),
            format!("{theta}"),
            format!("{}", marginal[0]),
            format!("{}", marginal[1]),
            format!("{bits}"),
        ])
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Mean observed versus mean model-implied shares, split by level and
/// exposure. The model column uses `p0` tables for plain markets and the
/// signal-integrated probabilities at the estimated theta for exposed ones.
fn write_shares_table(
    path: &Path,
    markets: &[Market],
    params: &PreferenceParams,
    strategy: Option<&PersuasionStrategy>,
    prior: &Belief,
    config: &Config,
    spec: &ChoiceSpec,
) -> Result<(), CliError> {
    let (j, k, l) = (spec.j_count(), spec.k_count(), spec.l_count());
    let solver = config.solver_options();

    // Signal-integrated choice probabilities per (group, level) at theta-hat.
    let mut h_cells: Vec<Vec<f64>> = Vec::new();
    if let Some(s) = strategy {
        for li in 0..l {
            for ki in 0..k {
                h_cells.push(persuaded_choice(prior, s, ki, li, params, &solver)?.h);
            }
        }
    }

    struct Acc {
        n: usize,
        data: Vec<f64>,
        model: Vec<f64>,
    }
    let mut acc: Vec<Vec<Acc>> = (0..l)
        .map(|_| {
            (0..2)
                .map(|_| Acc { n: 0, data: vec![0.0; j], model: vec![0.0; j] })
                .collect()
        })
        .collect();

    for m in markets {
        let side = usize::from(m.chi);
        if m.chi && strategy.is_none() {
            continue;
        }
        let slot = &mut acc[m.x_level][side];
        slot.n += 1;
        for ji in 0..j {
            slot.data[ji] += m.shares[ji];
            let model: f64 = (0..k)
                .map(|ki| {
                    m.demo[ki]
                        * if m.chi {
                            h_cells[m.x_level * k + ki][ji]
                        } else {
                            params.p0_slice(ki, m.x_level)[ji]
                        }
                })
                .sum();
            slot.model[ji] += model;
        }
    }

    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    w.write_record(["level", "option", "data_plain", "model_plain", "data_exposed", "model_exposed"])
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for li in 0..l {
        for ji in 0..j {
            let cell = |slot: &Acc, v: &[f64]| {
                if slot.n == 0 {
                    String::new()
                } else {
                    format!("{}", v[ji] / slot.n as f64)
                }
            };
            let plain = &acc[li][0];
            let exposed = &acc[li][1];
            w.write_record([
                spec.level_labels()[li].clone(),
                spec.option_labels()[ji].clone(),
                cell(plain, &plain.data),
                cell(plain, &plain.model),
                cell(exposed, &exposed.data),
                cell(exposed, &exposed.model),
            ])
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        }
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn cmd_welfare(estimates: &Path, out: &Path, ctx: &RunContext) -> Result<i32, CliError> {
    let t0 = Instant::now();
    let snapshot = estimates.join("config_snapshot.toml");
    let (config, config_bytes) = read_config(&snapshot)?;
    let spec = config.spec()?;
    let solver = config.solver_options();

    let report1: Stage1Report = reports::read_json(&estimates.join("stage1.json"))?;
    let params = unpack_stage1(&spec, &report1.point)?;
    let sample = data::read_shocks(&estimates.join("shocks.csv"), spec.j_count())?;

    let stage2_path = estimates.join("stage2.json");
    let stage2: Option<Stage2Report> =
        if stage2_path.exists() { Some(reports::read_json(&stage2_path)?) } else { None };

    ensure_out_dir(out)?;

    let baseline = welfare_distribution(&sample.shocks, &sample.levels, &params, None, &solver)?;
    let persuaded = match &stage2 {
        Some(r) => {
            let strategy = config.strategy(&spec, None)?.with_theta(&r.theta)?;
            let weights = vec![1.0 / sample.shocks.len() as f64; sample.shocks.len()];
            let prior = Belief::new(sample.shocks.clone(), weights)?;
            Some(welfare_distribution(
                &sample.shocks,
                &sample.levels,
                &params,
                Some((&strategy, &prior)),
                &solver,
            )?)
        }
        None => None,
    };

    write_welfare(out, &baseline, persuaded.as_deref(), &spec)?;

    let mut manifest = manifest_base("welfare", &config_bytes, ctx);
    manifest.outputs = vec!["welfare_summary.csv".into(), "welfare_hist.csv".into()];
    manifest.timings_ms.insert("total".into(), t0.elapsed().as_millis());
    reports::write_json(&out.join("manifest.json"), &manifest)?;

    println!(
        "welfare over {} recovered shock draws ({} groups{})",
        sample.shocks.len(),
        spec.k_count(),
        if persuaded.is_some() { ", baseline and persuaded" } else { ", baseline only" }
    );
    Ok(0)
}

fn write_welfare(
    out: &Path,
    baseline: &[ridc::welfare::GroupWelfare],
    persuaded: Option<&[ridc::welfare::GroupWelfare]>,
    spec: &ChoiceSpec,
) -> Result<(), CliError> {
    let summary = out.join("welfare_summary.csv");
    let mut w = csv::Writer::from_path(&summary)
        .map_err(|e| CliError::Config(format!("{}: {e}", summary.display())))?;
    w.write_record(["group", "scenario", "mean", "std_dev"])
        .map_err(|e| CliError::Config(format!("{}: {e}", summary.display())))?;
    let scenarios: Vec<(&str, &[ridc::welfare::GroupWelfare])> = match persuaded {
        Some(p) => vec![("baseline", baseline), ("persuaded", p)],
        None => vec![("baseline", baseline)],
    };
    for (name, set) in &scenarios {
        for g in *set {
            w.write_record([
                spec.group_labels()[g.group].clone(),
                name.to_string(),
                format!("{}", g.mean),
                format!("{}", g.std_dev),
            ])
            .map_err(|e| CliError::Config(format!("{}: {e}", summary.display())))?;
        }
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", summary.display())))?;

    let hist = out.join("welfare_hist.csv");
    let mut w = csv::Writer::from_path(&hist)
        .map_err(|e| CliError::Config(format!("{}: {e}", hist.display())))?;
    w.write_record(["group", "scenario", "bin", "lo", "hi", "mass"])
        .map_err(|e| CliError::Config(format!("{}: {e}", hist.display())))?;
    for (name, set) in &scenarios {
        for g in *set {
            let bins = g.histogram.len();
            for (b, &mass) in g.histogram.iter().enumerate() {
                w.write_record([
                    spec.group_labels()[g.group].clone(),
                    name.to_string(),
                    (b + 1).to_string(),
                    format!("{}", b as f64 / bins as f64),
                    format!("{}", (b + 1) as f64 / bins as f64),
                    format!("{mass}"),
                ])
                .map_err(|e| CliError::Config(format!("{}: {e}", hist.display())))?;
            }
        }
    }
    w.flush().map_err(|e| CliError::Config(format!("{}: {e}", hist.display())))?;
    Ok(())
}
