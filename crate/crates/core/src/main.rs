//! Command-line entry point.
//!
//! Exit codes: 0 success (certificate hypotheses may still fail), 1 other hard
//! errors, 2 usage or config schema errors, 3 IO errors, 4 infeasible budget.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use carleman_rt::bench::{bench_metadata, compare_reduction, load_mnist_reduced, train_modes, write_metrics_csv};
use carleman_rt::config::RunConfig;
use carleman_rt::dynamics::write_trajectory_csv;
use carleman_rt::horizon::condition_bounds;
use carleman_rt::manifest::Manifest;
use carleman_rt::polyapprox::{clip_degree_bound, sign_degree_bound};
use carleman_rt::readout::{
    build_system, design_surrogates, extract_terminal, plan_task, prepare_task, run_pipeline_certificate, Assembled,
    PolynomialEntry, PreparedTask, TaskPlan,
};
use carleman_rt::solver::{qlsa_estimate, solve_forward, solve_linear_system, ResourceModel};
use carleman_rt::Error;

const DEFAULT_TASK_PRESET: &str = "toy_affine";

#[derive(Parser)]
#[command(name = "carleman-rt", version, about = "Carleman-lifted horizon systems for projected-gradient robust training")]
struct Cli {
    /// Directory receiving all artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset name (toy_affine, toy_quadratic) or path to a TOML file.
    #[arg(long, global = true)]
    config: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Design and verify the sign and clip polynomials.
    DesignPolys,
    /// Expand the folded step into polynomial-map coefficients.
    ExpandStep,
    /// Build the truncated lifted system.
    BuildLift(Cutoff),
    /// Assemble the horizon system.
    Assemble(Cutoff),
    /// Assemble and solve the horizon system.
    Solve(SolveArgs),
    /// Full pipeline with certificate.
    Certify,
    /// Quantum linear-system resource estimate.
    EstimateResources(ResourceArgs),
    /// Reduced adversarial-training bench.
    BenchTrain(BenchArgs),
    /// Exact vs polynomial-model vs lifted-solve trajectories.
    BenchCompare(Cutoff),
}

#[derive(Args)]
struct Cutoff {
    /// Fixed cutoff instead of the planned one.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Relative residual target; defaults to `eps_LS / (2 kappa)` from the budget.
    #[arg(long)]
    residual: Option<f64>,
}

#[derive(Args)]
struct ResourceArgs {
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    sm: Option<f64>,
    #[arg(long)]
    nh: Option<f64>,
    #[arg(long)]
    eps_ls: Option<f64>,
    /// Polylog right-hand-side preparation.
    #[arg(long)]
    qram: bool,
    #[arg(long)]
    c_prep: Option<f64>,
    #[arg(long)]
    c_sa: Option<f64>,
    #[arg(long)]
    a_a: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    steps: Option<usize>,
    /// Use the long full-scale schedule.
    #[arg(long)]
    full_scale: bool,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) | CliError::Core(Error::Format(_)) => 2,
        CliError::Core(Error::Io(_)) => 3,
        CliError::Core(Error::Infeasible(_)) => 4,
        CliError::Core(_) => 1,
    }
}

/// Output directory plus the list of files written into it.
struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        self.write(name, serde_json::to_string_pretty(v).expect("artifact serializes"))
    }

    fn with<F: FnOnce(&mut Vec<u8>) -> carleman_rt::Result<()>>(&mut self, name: &str, f: F) -> CliResult<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Core(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn needs_task(cmd: &Cmd) -> bool {
    !matches!(cmd, Cmd::DesignPolys | Cmd::EstimateResources(_) | Cmd::BenchTrain(_))
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::DesignPolys => "design-polys",
        Cmd::ExpandStep => "expand-step",
        Cmd::BuildLift(_) => "build-lift",
        Cmd::Assemble(_) => "assemble",
        Cmd::Solve(_) => "solve",
        Cmd::Certify => "certify",
        Cmd::EstimateResources(_) => "estimate-resources",
        Cmd::BenchTrain(_) => "bench-train",
        Cmd::BenchCompare(_) => "bench-compare",
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let (mut cfg, source) = match &cli.config {
        Some(c) => (RunConfig::load(c)?, Some(c.clone())),
        None if needs_task(&cli.cmd) => {
            info!("no --config given, using preset {DEFAULT_TASK_PRESET}");
            (RunConfig::load(DEFAULT_TASK_PRESET)?, Some(format!("{DEFAULT_TASK_PRESET} (default)")))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    fs::create_dir_all(&cli.output_dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", cli.output_dir.display())))
    })?;
    let mut out = Out { dir: cli.output_dir.clone(), files: Vec::new() };
    match &cli.cmd {
        Cmd::DesignPolys => design_polys(&cfg, &mut out)?,
        Cmd::ExpandStep => expand_step(&cfg, &mut out)?,
        Cmd::BuildLift(c) => build_lift(&cfg, c.n, &mut out)?,
        Cmd::Assemble(c) => assemble(&cfg, c.n, &mut out)?,
        Cmd::Solve(a) => solve(&cfg, a, &mut out)?,
        Cmd::Certify => certify(&cfg, &mut out)?,
        Cmd::EstimateResources(a) => estimate_resources(&cfg, a, &mut out)?,
        Cmd::BenchTrain(a) => bench_train(&mut cfg, a, &mut out)?,
        Cmd::BenchCompare(c) => bench_compare(&cfg, c.n, &mut out)?,
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut manifest = Manifest::new(command_name(&cli.cmd), args, source, cfg.to_toml(), cfg.seed());
    manifest.record_outputs(&out.dir, &out.files)?;
    let path = manifest.write(&out.dir)?;
    info!("manifest written to {}", path.display());
    Ok(())
}

fn design_polys(cfg: &RunConfig, out: &mut Out) -> CliResult<()> {
    let d = design_surrogates(&cfg.polys)?;
    let consts = cfg.polys.degree_constants();
    out.write("sign_poly.txt", d.sign.poly.to_text())?;
    out.write("clip_poly.txt", d.clip.poly.to_text())?;
    out.write("sign_monomial.txt", d.sign.poly.to_monomial_text())?;
    out.write("clip_monomial.txt", d.clip.poly.to_monomial_text())?;
    out.json(
        "polys.json",
        &serde_json::json!({
            "sign": PolynomialEntry::from_design(&d.sign, &d.sign_source),
            "clip": PolynomialEntry::from_design(&d.clip, &d.clip_source),
            "delta_s_certified": d.delta_s,
            "delta_c_certified": d.delta_c,
            "sign_degree_bound": sign_degree_bound(&cfg.polys.sign_spec()?, &consts),
            "clip_degree_bound": clip_degree_bound(&cfg.polys.clip_spec()?, &consts),
        }),
    )?;
    println!(
        "sign: degree {} pass {} delta_s {:.3e}; clip: degree {} pass {} delta_c {:.3e}",
        d.sign.poly.degree(),
        d.sign.certificate.pass,
        d.delta_s,
        d.clip.poly.degree(),
        d.clip.certificate.pass,
        d.delta_c
    );
    Ok(())
}

fn warn_domain(prep: &PreparedTask) {
    for (what, rep) in [("polynomial-model trajectory", &prep.domain_poly), ("exact trajectory", &prep.domain_exact)] {
        if !rep.clean() {
            warn!("domain violations along the {what}: {rep:?}");
        }
    }
}

fn expand_step(cfg: &RunConfig, out: &mut Out) -> CliResult<()> {
    let prep = prepare_task(cfg)?;
    warn_domain(&prep);
    let w = &prep.window;
    out.json(
        "window.json",
        &serde_json::json!({
            "d": w.d(),
            "t_len": w.t_len,
            "degree": w.degree(),
            "degree_bound": prep.degree_bound,
            "alpha": prep.sched.alpha(0),
            "alpha_source": prep.alpha_source,
            "distinct_maps": w.maps.len(),
            "maps": w.maps.iter().map(|m| m.to_json()).collect::<Vec<_>>(),
        }),
    )?;
    out.with("trajectory_exact.csv", |b| write_trajectory_csv(b, &prep.exact))?;
    out.with("trajectory_poly.csv", |b| write_trajectory_csv(b, &prep.poly))?;
    out.json(
        "domain.json",
        &serde_json::json!({
            "polynomial_trajectory": prep.domain_poly,
            "exact_trajectory": prep.domain_exact,
            "one_step_measured": prep.one_step_measured,
            "eps_nl_step": prep.eps_nl_step(),
        }),
    )?;
    println!("degree {} (bound {}), d = {}, T = {}", w.degree(), prep.degree_bound, w.d(), w.t_len);
    Ok(())
}

/// Prepared task, budget plan and assembled system at the planned or given cutoff.
fn staged(cfg: &RunConfig, n: Option<usize>) -> CliResult<(PreparedTask, TaskPlan, Assembled)> {
    let mut cfg = cfg.clone();
    if n.is_some() {
        cfg.lift.n = n;
    }
    let prep = prepare_task(&cfg)?;
    warn_domain(&prep);
    let plan = plan_task(&cfg, &prep)?;
    if !plan.budget.feasible {
        warn!("budget infeasible at N = {}", plan.budget.n);
    }
    let asm = build_system(&prep, plan.budget.n, plan.vbar_used, plan.vbar_measured, cfg.lift.dim_cap)?;
    Ok((prep, plan, asm))
}

fn build_lift(cfg: &RunConfig, n: Option<usize>, out: &mut Out) -> CliResult<()> {
    let (_, plan, asm) = staged(cfg, n)?;
    let l = &asm.lifted;
    let (pointwise, stacked) = l.truncation_bounds();
    for (t, s) in l.steps.iter().enumerate() {
        out.with(&format!("B_{t}.mtx"), |b| s.b.write_matrix_market(b, &format!("lifted step B({t}), N = {}", l.n)))?;
        out.write(&format!("c_{t}.txt"), s.c.iter().map(|x| format!("{x:e}\n")).collect::<String>())?;
    }
    out.json(
        "lift.json",
        &serde_json::json!({
            "n": l.n,
            "d": l.d,
            "delta_n": l.delta_n,
            "t_len": l.t_len,
            "distinct_steps": l.steps.len(),
            "contractivity": l.contractivity,
            "gamma_n": l.gamma_n,
            "l_lift": l.l_lift,
            "vbar_used": asm.vbar_used,
            "vbar_measured": asm.vbar_measured,
            "truncation_bound_pointwise": pointwise,
            "truncation_bound_stacked": stacked,
            "budget_feasible": plan.budget.feasible,
        }),
    )?;
    println!("N = {}, Delta_N = {}, rho = {:.6}, Gamma_N = {:.3e}", l.n, l.delta_n, l.rho(), l.gamma_n);
    Ok(())
}

fn assemble(cfg: &RunConfig, n: Option<usize>, out: &mut Out) -> CliResult<()> {
    let (_, _, asm) = staged(cfg, n)?;
    let h = &asm.horizon;
    out.with("M.mtx", |b| h.write_matrix_market(b, false))?;
    out.with("Mbar.mtx", |b| h.write_matrix_market(b, true))?;
    out.with("rhs.txt", |b| h.write_rhs(b))?;
    let cond = condition_bounds(h.rho, h.t_len, Some(&h.m));
    out.json(
        "horizon.json",
        &serde_json::json!({
            "n_h": h.n_h,
            "delta_n": h.delta_n,
            "t_len": h.t_len,
            "rho": h.rho,
            "nnz": h.m.nnz(),
            "measured_s_b": h.measured_s_b(),
            "measured_s_m": h.measured_s_m(),
            "condition": cond,
        }),
    )?;
    println!("N_h = {}, nnz = {}, s_M = {}", h.n_h, h.m.nnz(), h.measured_s_m());
    Ok(())
}

fn solve(cfg: &RunConfig, a: &SolveArgs, out: &mut Out) -> CliResult<()> {
    let (prep, plan, asm) = staged(cfg, a.n)?;
    let h = &asm.horizon;
    let cond = condition_bounds(h.rho, h.t_len, None);
    let kappa = cond.closed_form_bound.min(cond.neumann_bound);
    let target = a.residual.unwrap_or((plan.budget.eps_ls / (2.0 * kappa)).min(0.5));
    let (_, forward_residual) = solve_forward(h);
    let sol = solve_linear_system(h, target)?;
    let range = h.terminal_u_range(prep.task.m);
    let readout = extract_terminal(&sol.normalized, range.clone(), None)?;
    out.write("solution.txt", sol.y.iter().map(|x| format!("{x:e}\n")).collect::<String>())?;
    out.json(
        "solve.json",
        &serde_json::json!({
            "residual_target": target,
            "residual": sol.residual,
            "iterations": sol.iterations,
            "norm": sol.norm,
            "forward_residual": forward_residual,
            "kappa_bound": kappa,
            "terminal_parameters": sol.y[range].to_vec(),
            "terminal_unit": readout.unit,
            "p_term": readout.p_term,
        }),
    )?;
    println!("residual {:.3e} (target {:.3e}) in {} iterations", sol.residual, target, sol.iterations);
    Ok(())
}

fn certify(cfg: &RunConfig, out: &mut Out) -> CliResult<()> {
    let cert = run_pipeline_certificate(cfg)?;
    out.json("certificate.json", &cert)?;
    for h in &cert.hypotheses {
        println!("{:<7} {}  {}", h.id, if h.pass { "pass" } else { "FAIL" }, h.evidence);
    }
    for b in &cert.bounds {
        println!("{:<40} {:.3e} <= {:.3e}  {}", b.name, b.measured, b.bound, if b.holds { "ok" } else { "VIOLATED" });
    }
    println!("terminal parameters {:?}, all pass: {}", cert.terminal.parameters, cert.all_pass);
    if !cert.all_pass {
        warn!("certificate has failing entries");
    }
    Ok(())
}

fn estimate_resources(cfg: &RunConfig, a: &ResourceArgs, out: &mut Out) -> CliResult<()> {
    let r = &cfg.resources;
    let need = |flag: Option<f64>, cfgv: Option<f64>, name: &str| {
        flag.or(cfgv).ok_or_else(|| CliError::Usage(format!("--{name} is required (or set it under [resources])")))
    };
    let mut model = ResourceModel::new(
        need(a.sm, r.s_m, "sm")?,
        need(a.kappa, r.kappa, "kappa")?,
        need(a.nh, r.n_h, "nh")?,
        need(a.eps_ls, r.eps_ls, "eps-ls")?,
    );
    model.qram = a.qram || r.qram;
    model.c_prep = a.c_prep.or(r.c_prep);
    model.c_sa = a.c_sa.unwrap_or(r.c_sa);
    model.a_a = a.a_a.unwrap_or(r.a_a);
    model.constants = r.constants.unwrap_or_default();
    let est = qlsa_estimate(&model).map_err(|e| match e {
        Error::Invalid(m) => CliError::Usage(m),
        e => CliError::Core(e),
    })?;
    out.json("resources.json", &est)?;
    let i = &est.inputs;
    println!("inputs: s_M = {}, kappa = {}, N_h = {}, eps_LS = {:e}, qram = {}", i.s_m, i.kappa, i.n_h, i.eps_ls, i.qram);
    println!("{}\n  = {:.6e}", est.query_formula, est.queries);
    println!("{}\n  = {:.6e} (C_prep: {})", est.gate_formula, est.gates, est.c_prep_model);
    println!("{}\n  = {}", est.qubit_formula, est.qubits);
    Ok(())
}

fn bench_train(cfg: &mut RunConfig, a: &BenchArgs, out: &mut Out) -> CliResult<()> {
    if let Some(s) = a.steps {
        cfg.bench.steps = s;
    }
    cfg.bench.full_scale |= a.full_scale;
    if let Some(d) = &a.data_dir {
        cfg.bench.data_dir = Some(d.to_string_lossy().into_owned());
    }
    let b = cfg.bench.clone();
    let data = load_mnist_reduced(b.data_dir.as_deref().map(Path::new), &b, cfg.seed())?;
    info!("data: {}", data.meta.source);
    let runs = train_modes(&data, &b, cfg.seed())?;
    out.with("metrics.csv", |w| write_metrics_csv(w, &runs))?;
    let meta = bench_metadata(&data, &b, &runs);
    out.json("metadata.json", &meta)?;
    for s in &meta.summaries {
        println!(
            "{:<6} alpha {:.2}: clean {:.3} robust {:.3} plateau {:.3}/{:.3}{}",
            s.mode,
            s.alpha,
            s.final_clean_acc,
            s.final_robust_acc,
            s.plateau_clean,
            s.plateau_robust,
            if s.diverged { " DIVERGED" } else { "" }
        );
        if s.diverged {
            warn!("run alpha = {} diverged", s.alpha);
        }
    }
    Ok(())
}

fn bench_compare(cfg: &RunConfig, n: Option<usize>, out: &mut Out) -> CliResult<()> {
    let n = match n {
        Some(n) => n,
        None => {
            let prep = prepare_task(cfg)?;
            plan_task(cfg, &prep)?.budget.n
        }
    };
    let rep = compare_reduction(cfg, n)?;
    out.json("comparison.json", &rep)?;
    println!("exact vs poly   {:.3e} <= {:.3e}", rep.exact_vs_poly, rep.exact_vs_poly_bound);
    println!("solve vs poly   {:.3e} <= {:.3e}", rep.solve_vs_poly, rep.solve_vs_poly_bound);
    println!("solve vs exact  {:.3e} <= {:.3e}", rep.solve_vs_exact, rep.solve_vs_exact_bound);
    println!("stacked         {:.3e} <= {:.3e}", rep.stacked_solve_vs_poly, rep.stacked_truncation_bound);
    println!("all within bounds: {}", rep.all_within);
    Ok(())
}
