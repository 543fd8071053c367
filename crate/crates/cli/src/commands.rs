use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use scot::dro::{
    gaussian_grid_base, push_forward, radius_factored, radius_upper, rate_experiment,
    sample_classical_ball, sample_gcausal_mc, sample_structural_ball, worst_case_losses,
    AmbiguityConfig, BallKind, GaussianBase, LossFunction, WorstCase,
};
use scot::estimation::{fit_linear_anm_named, stability_curve};
use scot::io::{read_samples_path, write_plan, write_rows, write_samples};
use scot::ot::{exact_ot, CostSpec};
use scot::relaxed::{solve_problem, sweep_problem, ExogenousProblem, RelaxedSolveConfig};
use scot::scm::{model_to_json, Noise, SampleMatrix, ScmModel, Space};
use scot::{Error, Result};

use crate::config::{load, Loaded};
use crate::{Command, Flags};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::GridTooLarge { .. } | Error::InstanceTooLarge { .. } => 3,
        Error::NonConvergence { .. } => 4,
        _ => 2,
    }
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Provenance attached to every output.
#[derive(Debug, Serialize)]
struct Meta {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config_sha256: String,
}

impl Meta {
    fn csv_header(&self) -> String {
        format!(
            "# tool: {} {}\n# command: {}\n# seed: {}\n# config_sha256: {}\n",
            self.tool, self.version, self.command, self.seed, self.config_sha256
        )
    }
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Sample => "sample",
        Command::Solve => "solve",
        Command::Worstcase => "worstcase",
        Command::Radius => "radius",
        Command::Rates => "rates",
        Command::Fit => "fit",
        Command::Stability => "stability",
    }
}

struct Ctx<'a> {
    loaded: Loaded,
    flags: &'a Flags,
    meta: Meta,
}

impl Ctx<'_> {
    fn seed(&self) -> u64 {
        self.meta.seed
    }

    fn out_path(&self) -> Option<PathBuf> {
        self.flags
            .out
            .clone()
            .or_else(|| self.loaded.cfg.out.as_ref().map(|p| self.loaded.resolve(p)))
    }

    fn emit_to(&self, path: Option<&Path>, bytes: &[u8]) -> Result<()> {
        match path {
            Some(p) => std::fs::write(p, bytes).map_err(|e| invalid(&p.display().to_string(), e.to_string())),
            None => std::io::stdout()
                .write_all(bytes)
                .map_err(|e| invalid("stdout", e.to_string())),
        }
    }

    fn emit(&self, bytes: &[u8]) -> Result<()> {
        self.emit_to(self.out_path().as_deref(), bytes)
    }

    fn emit_json(&self, path: Option<&Path>, mut body: Value) -> Result<()> {
        if let Value::Object(map) = &mut body {
            map.insert("meta".into(), serde_json::to_value(&self.meta).expect("plain struct"));
        }
        let mut text = serde_json::to_string_pretty(&body).expect("values serialize");
        text.push('\n');
        self.emit_to(path, text.as_bytes())
    }

    fn csv_with_header(&self, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
        let mut buf = self.meta.csv_header().into_bytes();
        write(&mut buf)?;
        Ok(buf)
    }

    fn samples(&self, field: &str, path: &Option<PathBuf>, model: &ScmModel) -> Result<SampleMatrix> {
        let path = self.loaded.required(field, path)?;
        read_samples_path(&path, model.names(), self.loaded.cfg.space.into())
    }
}

pub fn run(command: Command, flags: &Flags) -> Result<()> {
    let path = flags
        .config
        .as_ref()
        .ok_or_else(|| invalid("--config", "a run configuration is required"))?;
    let loaded = load(path)?;
    let seed = flags.seed.or(loaded.cfg.seed).unwrap_or(0);
    let mut hasher = Sha256::new();
    hasher.update(&loaded.raw);
    hasher.update(
        format!(
            "\0command={};seed={:?};eps={:?};delta={:?};allow_nonconverged={}",
            command_name(command),
            flags.seed,
            flags.eps,
            flags.delta,
            flags.allow_nonconverged
        )
        .as_bytes(),
    );
    let meta = Meta {
        tool: "scot",
        version: env!("CARGO_PKG_VERSION"),
        command: command_name(command),
        seed,
        config_sha256: hex::encode(hasher.finalize()),
    };
    let ctx = Ctx { loaded, flags, meta };
    match command {
        Command::Sample => sample(&ctx),
        Command::Solve => solve(&ctx),
        Command::Worstcase => worstcase(&ctx),
        Command::Radius => radius(&ctx),
        Command::Rates => rates(&ctx),
        Command::Fit => fit(&ctx),
        Command::Stability => stability(&ctx),
    }
}

fn sample(ctx: &Ctx) -> Result<()> {
    let model = ctx.loaded.require_model()?;
    let section = &ctx.loaded.cfg.sample;
    let n = section.n.ok_or_else(|| invalid("sample.N", "missing field"))?;
    let mut s = model.sample(n, ctx.seed())?;
    if Space::from(section.space) == Space::Exogenous {
        s = model.push_to_exogenous(&s)?;
    }
    let bytes = ctx.csv_with_header(|buf| write_samples(buf, &s, model.names()))?;
    ctx.emit(&bytes)
}

/// Exact OT between two exogenous distributions, when the LP accepts them.
fn exact_or_none(
    a: Result<scot::DiscreteDistribution>,
    b: Result<scot::DiscreteDistribution>,
    cost: &CostSpec,
) -> Result<Option<f64>> {
    let (a, b) = (a?, b?);
    match exact_ot(&a, &b, cost) {
        Ok(r) => Ok(Some(r.value)),
        Err(Error::InstanceTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn solve(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.loaded.cfg;
    let model = ctx.loaded.require_model()?;
    let source = ctx.samples("source", &cfg.source, &model)?;
    let target = ctx.samples("target", &cfg.target, &model)?;
    let cost = CostSpec::new(cfg.cost.p)?;
    let solver = ctx.loaded.solver()?;
    let problem = ExogenousProblem::from_samples(&source, &target, &model, cost)?;
    let mean_cost = problem.mean_cost();
    let mut eps_list = ctx
        .flags
        .eps
        .clone()
        .or_else(|| cfg.solve.eps.clone())
        .unwrap_or_else(|| vec![solver.eps]);
    if eps_list.is_empty() {
        return Err(invalid("solve.eps", "needs at least one value"));
    }
    if cfg.solve.eps_relative {
        eps_list.iter_mut().for_each(|e| *e *= mean_cost);
    }

    let structural = problem.structural_exact();
    let expanded = problem.expanded();
    // Both sides are product measures and the exogenous cost is separable, so
    // past the LP cap the classical value is the factored one.
    let (classical_product, classical_method) = match expanded {
        Ok((a, b)) => match exact_or_none(Ok(a), Ok(b), &cost)? {
            Some(w) => (w, "lp"),
            None => (structural, "factored_identity"),
        },
        Err(Error::GridTooLarge { .. }) => (structural, "factored_identity"),
        Err(e) => return Err(e),
    };
    let to_exo = |s: &SampleMatrix| -> Result<scot::DiscreteDistribution> {
        Ok(match s.space() {
            Space::Feature => model.push_to_exogenous(s)?.to_distribution(),
            Space::Exogenous => s.to_distribution(),
        })
    };
    let classical_samples = exact_or_none(to_exo(&source), to_exo(&target), &cost)?;
    let allow = ctx.flags.allow_nonconverged;

    if eps_list.len() == 1 {
        let c = RelaxedSolveConfig {
            eps: eps_list[0],
            ..solver
        };
        let r = solve_problem(&problem, &c, None)?;
        let r = if allow { r } else { r.require_converged()? };
        if let Some(p) = &cfg.solve.plan_out {
            let path = ctx.loaded.resolve(p);
            let bytes = ctx.csv_with_header(|buf| write_plan(buf, &r.plan, model.names()))?;
            ctx.emit_to(Some(&path), &bytes)?;
        }
        return ctx.emit_json(
            ctx.out_path().as_deref(),
            json!({
                "mean_cost": mean_cost,
                "classical_product": classical_product,
                "classical_product_method": classical_method,
                "classical_samples": classical_samples,
                "structural": structural,
                "result": r,
            }),
        );
    }

    let points = sweep_problem(&problem, &eps_list, &solver)?;
    if !allow {
        if let Some(bad) = points.iter().find(|p| !p.converged) {
            return Err(Error::NonConvergence {
                iterations: 0,
                residual: bad.eps,
            });
        }
    }
    let tol = cfg.solve.sandwich_tol;
    let sandwich = points
        .iter()
        .all(|p| classical_product - tol <= p.distance && p.distance <= structural + tol);
    ctx.emit_json(
        ctx.out_path().as_deref(),
        json!({
            "mean_cost": mean_cost,
            "classical_product": classical_product,
            "classical_product_method": classical_method,
            "classical_samples": classical_samples,
            "structural": structural,
            "sandwich_tol": tol,
            "sandwich_holds": sandwich,
            "sweep": points,
        }),
    )
}

#[derive(Debug, Serialize)]
struct WorstRow {
    psi: &'static str,
    delta: f64,
    kind: &'static str,
    worst_loss: f64,
    argmax_index: usize,
    mc_count: usize,
    seed: u64,
    std_error: f64,
    /// `100 (causal − structural) / structural` for the row's (psi, delta).
    gap: Option<f64>,
}

fn worstcase(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.loaded.cfg;
    let a = &cfg.ambiguity;
    let deltas = ctx.flags.delta.clone().unwrap_or_else(|| a.deltas.clone());
    if deltas.is_empty() || a.kinds.is_empty() || a.psi.is_empty() {
        return Err(invalid("ambiguity", "deltas, kinds and psi must be nonempty"));
    }
    let psis = a
        .psi
        .iter()
        .map(|name| LossFunction::from_name(name))
        .collect::<Result<Vec<_>>>()?;
    let model = match ctx.loaded.model()? {
        Some(m) => m,
        None => ScmModel::two_node(a.alpha, Noise::Uniform { a: 0.0, b: 0.0 }),
    };
    let sd = a.sd.clone().unwrap_or_else(|| vec![1.0; model.node_count()]);
    let cost = CostSpec::new(cfg.cost.p)?;
    if a.kinds.contains(&BallKind::GcausalMc) && cost.p != 2.0 {
        return Err(invalid("cost.p", "the causal-plan ball uses the quadratic cost; set p = 2"));
    }
    let (grid_model, base) = gaussian_grid_base(&model, &sd, a.grid)?;
    let exo = grid_model.push_to_exogenous(&base)?.to_distribution();
    let seed = ctx.seed();

    let jobs: Vec<(f64, BallKind)> = deltas
        .iter()
        .flat_map(|&d| a.kinds.iter().map(move |&k| (d, k)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(delta, kind)| -> Result<Vec<WorstCase>> {
            let amb = AmbiguityConfig {
                kind,
                delta,
                mc_count: a.mc_count,
                seed,
            };
            match kind {
                BallKind::Classical => {
                    let ball = sample_classical_ball(&exo, &amb, &cost)?;
                    let draws = ball
                        .iter()
                        .map(|q| q.and_then(|q| push_forward(&grid_model, q)));
                    worst_case_losses(draws, &psis)
                }
                BallKind::Structural => {
                    let ball = sample_structural_ball(&base, &grid_model, &amb, &cost)?;
                    worst_case_losses(ball.iter(), &psis)
                }
                BallKind::GcausalMc => {
                    let gb = GaussianBase {
                        model: model.clone(),
                        sd: sd.clone(),
                        grid: a.grid,
                    };
                    let ball = sample_gcausal_mc(&gb, &amb)?;
                    worst_case_losses(ball.iter(), &psis)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let lookup = |delta: f64, kind: BallKind, j: usize| {
        jobs.iter()
            .position(|&(d, k)| d == delta && k == kind)
            .map(|i| results[i][j].value)
    };
    let mut rows = Vec::with_capacity(jobs.len() * psis.len());
    for (j, psi) in psis.iter().enumerate() {
        for &delta in &deltas {
            let gap = match (lookup(delta, BallKind::GcausalMc, j), lookup(delta, BallKind::Structural, j)) {
                (Some(g), Some(s)) if s != 0.0 => Some(100.0 * (g - s) / s),
                _ => None,
            };
            for &kind in &a.kinds {
                let i = jobs
                    .iter()
                    .position(|&(d, k)| d == delta && k == kind)
                    .expect("every pair was run");
                let w = results[i][j];
                rows.push(WorstRow {
                    psi: psi.name(),
                    delta,
                    kind: kind.name(),
                    worst_loss: w.value,
                    argmax_index: w.argmax_index,
                    mc_count: w.draws,
                    seed,
                    std_error: w.std_error,
                    gap,
                });
            }
        }
    }
    let bytes = ctx.csv_with_header(|buf| write_rows(buf, &rows))?;
    ctx.emit(&bytes)
}

fn radius(ctx: &Ctx) -> Result<()> {
    let params = ctx.loaded.cfg.radius;
    let upper = radius_upper(&params)?;
    let factored = radius_factored(&params)?;
    let ratio = (upper > 0.0 && factored.is_finite()).then(|| factored / upper);
    ctx.emit_json(
        ctx.out_path().as_deref(),
        json!({
            "params": params,
            "upper": upper,
            "factored": if factored.is_finite() { Some(factored) } else { None },
            "ratio_factored_to_upper": ratio,
        }),
    )
}

fn rates(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.loaded.cfg;
    let model = ctx.loaded.require_model()?;
    let r = &cfg.rates;
    let p = r.p.unwrap_or(cfg.cost.p);
    let table = rate_experiment(&model, &r.n_list, r.trials, p, ctx.seed())?;
    let summary = json!({
        "means": table.means,
        "slope_classical": table.slope_classical,
        "slope_factored": table.slope_factored,
        "slopes_absent": table.slope_classical.is_none(),
        "reference_size": table.reference_size,
        "classical_estimator": table.classical_estimator,
        "note": table.note,
    });
    match ctx.out_path() {
        Some(out) => {
            let bytes = ctx.csv_with_header(|buf| write_rows(buf, &table.rows))?;
            ctx.emit_to(Some(&out), &bytes)?;
            ctx.emit_json(Some(&out.with_extension("json")), summary)
        }
        None => {
            let mut body = summary;
            body["rows"] = serde_json::to_value(&table.rows).expect("plain rows");
            ctx.emit_json(None, body)
        }
    }
}

fn fit(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.loaded.cfg;
    let model = ctx.loaded.require_model()?;
    let path = ctx.loaded.required("source", &cfg.source)?;
    let samples = read_samples_path(&path, model.names(), Space::Feature)?;
    let mut report = fit_linear_anm_named(&samples, model.dag(), model.names().to_vec())?;
    if cfg.fit.synthetic {
        report = report.compare_with(&model, &samples)?;
    }
    let mut body = model_to_json(&report.model);
    body["fit"] = json!({
        "nodes": report.nodes,
        "sup_gap": report.sup_gap,
    });
    ctx.emit_json(ctx.out_path().as_deref(), body)
}

fn stability(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.loaded.cfg;
    let model = ctx.loaded.require_model()?;
    let source = ctx.samples("source", &cfg.source, &model)?;
    let target = ctx.samples("target", &cfg.target, &model)?;
    let cost = CostSpec::new(cfg.cost.p)?;
    let mut solver = ctx.loaded.solver()?;
    if let Some(eps) = ctx
        .flags
        .eps
        .as_ref()
        .or(cfg.solve.eps.as_ref())
        .and_then(|l| l.first())
    {
        solver.eps = *eps;
    }
    if cfg.solve.eps_relative {
        solver.eps *= ExogenousProblem::from_samples(&source, &target, &model, cost)?.mean_cost();
    }
    let rows = stability_curve(
        &source,
        &target,
        &model,
        &cfg.stability.scales,
        &cost,
        &solver,
        ctx.seed(),
    )?;
    let bytes = ctx.csv_with_header(|buf| write_rows(buf, &rows))?;
    ctx.emit(&bytes)
}
