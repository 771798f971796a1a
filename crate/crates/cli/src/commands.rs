use crate::config::{DataSection, Method, ProblemConfig, RunConfig, SamplingChoice};
use rand::RngCore;
use robust_dp::ambiguity::{AmbiguityKernel, RadiusSchedule, ReferenceKernel};
use robust_dp::bounds::{bounds_report, measure_values, BoundsSetting};
use robust_dp::dp::{
    backward_induction_exact, best_response_value, brute_force_value, evaluate_policy, sampled_set_value,
    tree_policy_worst_value, ControlProblem, EvalMode, InnerMode, Policy, SolverConfig, TabularPolicy,
    WorstCaseKernel,
};
use robust_dp::hedging::{
    backtest, bs_delta_hedge, estimate_annual_vol, synthetic_gbm, GbmConfig, HedgingFeatures, HedgingProblem,
    HedgingSampler, ReturnSeries,
};
use robust_dp::instances::{
    parametric_audit_instance, random_finite_instance, tracking_instance, uniform_grid, wasserstein_audit_instance,
    RandomInstanceConfig,
};
use robust_dp::measures::LocalSpace;
use robust_dp::neural::{
    log_to_csv, substream, train_algorithm1, train_algorithm2, Featurizer, ModelDump, RawFeatures, Sampling,
    TrainConfig, TrainedModel, ZGrid,
};
use serde_json::{json, Value};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

/// Named random streams derived from the master seed.
#[derive(Clone, Copy)]
enum Stream {
    Solver = 1,
    Training = 2,
    Evaluation = 3,
    Synthetic = 4,
    RobustTraining = 5,
}

fn stream_seed(seed: u64, s: Stream) -> u64 {
    substream(seed, [0x636c_69, s as u64, 0, 0]).next_u64()
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Core(robust_dp::Error),
    /// A check that the command exists to perform did not hold.
    Check(String),
    Output(std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
            CliError::Check(_) => "check_failed",
            CliError::Output(_) => "output",
        }
    }

    /// Error report written to standard error.
    pub fn to_json(&self) -> String {
        json!({
            "schema_version": OUTPUT_SCHEMA_VERSION,
            "error": { "kind": self.kind(), "message": self.to_string() },
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Check(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output(e) => write!(f, "cannot write output: {e}"),
        }
    }
}

impl From<robust_dp::Error> for CliError {
    fn from(e: robust_dp::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Writes artifacts into the output directory and lists them on stdout.
pub struct Output {
    dir: PathBuf,
}

impl Output {
    pub fn new(dir: PathBuf) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(CliError::Output)?;
        Ok(Self { dir })
    }

    fn write(&self, name: &str, body: &str) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(CliError::Output)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn json(&self, name: &str, v: &Value) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(v).expect("json values serialise");
        s.push('\n');
        self.write(name, &s)
    }
}

struct Data {
    train: ReturnSeries,
    test: ReturnSeries,
    c_empirical: f64,
}

/// Reads or generates the return series and splits it at the first test
/// date.
fn load_data(d: &DataSection, seed: u64) -> CliResult<Data> {
    let series = match (&d.csv, &d.synthetic) {
        (Some(p), _) => ReturnSeries::read_csv(p, d.expected_dim, d.bound)?,
        (None, Some(s)) => {
            let (series, _) = synthetic_gbm(&GbmConfig {
                mu: s.mu,
                sigma: s.sigma,
                days: s.days,
                dim: s.dim,
                trading_days: s.trading_days,
                clip: s.clip,
                seed: stream_seed(seed, Stream::Synthetic),
            })?;
            series
        }
        (None, None) => return Err(CliError::Config("data: no source".into())),
    };
    let c_empirical = series.max_abs();
    let (train, test) = series.split_at_date(&d.split_date);
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Config(format!(
            "data.split_date {} leaves an empty training or test period ({} and {} records)",
            d.split_date,
            train.len(),
            test.len()
        )));
    }
    Ok(Data {
        train,
        test,
        c_empirical,
    })
}

struct HedgingSetup {
    hp: HedgingProblem,
    data: Data,
    /// Training returns in the dimension of the problem.
    train: ReturnSeries,
    reference: ReferenceKernel,
}

struct Built {
    problem: ControlProblem,
    bounds: Option<BoundsSetting>,
    hedging: Option<HedgingSetup>,
}

/// All columns of `s` stacked into one single-asset series.
fn pooled(s: &ReturnSeries) -> ReturnSeries {
    let mut out = ReturnSeries {
        dates: Vec::new(),
        returns: Vec::new(),
    };
    for i in 0..s.dim() {
        let c = s.column(i);
        out.dates.extend(c.dates);
        out.returns.extend(c.returns);
    }
    out
}

fn hedging_setup(cfg: &RunConfig) -> CliResult<HedgingSetup> {
    let d = cfg.data.as_ref().ok_or_else(|| CliError::Config("hedging needs [data]".into()))?;
    let data = load_data(d, cfg.seed)?;
    let h = &cfg.hedging;
    let dim = data.train.dim();
    let mut hp = HedgingProblem::atm_call(h.horizon, h.bound_c);
    let train = if dim > 1 && h.basket {
        hp = HedgingProblem {
            d: dim,
            s0: vec![1.0; dim],
            payoff: robust_dp::hedging::Payoff::basket(dim, 1.0),
            ..hp
        };
        data.train.clone()
    } else {
        pooled(&data.train)
    };
    hp.validate()?;
    let returns = train.returns.clone();
    let reference = match h.beta {
        Some(beta) => ReferenceKernel::KernelWeighted { returns, beta },
        None => ReferenceKernel::Empirical0 { returns },
    };
    Ok(HedgingSetup {
        hp,
        data,
        train,
        reference,
    })
}

fn hedging_kernels(setup: &HedgingSetup, radius: f64) -> Vec<AmbiguityKernel> {
    let k = if radius > 0.0 {
        AmbiguityKernel::WassersteinBall {
            reference: setup.reference.clone(),
            radius: RadiusSchedule::Constant(radius),
            q: 1.0,
            space: LocalSpace::bounded(setup.hp.d, setup.hp.bound_c),
        }
    } else {
        AmbiguityKernel::Singleton(setup.reference.clone())
    };
    vec![k; setup.hp.horizon]
}

fn build(cfg: &RunConfig) -> CliResult<Built> {
    let mut built = build_problem(cfg)?;
    if cfg.solver.reference_only {
        built.problem.kernels = built
            .problem
            .kernels
            .iter()
            .map(AmbiguityKernel::reference_singleton)
            .collect::<robust_dp::Result<_>>()?;
    }
    Ok(built)
}

fn build_problem(cfg: &RunConfig) -> CliResult<Built> {
    let plain = |problem| Built {
        problem,
        bounds: None,
        hedging: None,
    };
    Ok(match &cfg.problem {
        ProblemConfig::Tracking { radius } => plain(tracking_instance(*radius)),
        ProblemConfig::RandomFinite { instance } => {
            plain(random_finite_instance(*instance, &RandomInstanceConfig::default())?.0)
        }
        ProblemConfig::WassersteinAudit { instance } => {
            let (problem, set) = wasserstein_audit_instance(*instance)?;
            Built {
                problem,
                bounds: Some(set),
                hedging: None,
            }
        }
        ProblemConfig::ParametricAudit { instance } => {
            let (problem, set) = parametric_audit_instance(*instance)?;
            Built {
                problem,
                bounds: Some(set),
                hedging: None,
            }
        }
        ProblemConfig::Hedging => {
            let setup = hedging_setup(cfg)?;
            let problem = setup.hp.control_problem(hedging_kernels(&setup, cfg.hedging.radius))?;
            Built {
                problem,
                bounds: None,
                hedging: Some(setup),
            }
        }
    })
}

fn solver_config(cfg: &RunConfig, problem: &ControlProblem) -> CliResult<SolverConfig> {
    let s = &cfg.solver;
    let inner = match s.grid_ball {
        None => InnerMode::Candidates,
        Some(n) => {
            let c = problem.space.bound.ok_or_else(|| {
                CliError::Config("solver.grid_ball needs a bounded state space".into())
            })?;
            if problem.space.dim != 1 {
                return Err(CliError::Config("solver.grid_ball needs one-dimensional states".into()));
            }
            InnerMode::GridBall(uniform_grid(c, n))
        }
    };
    Ok(SolverConfig {
        candidates: s.candidates,
        seed: stream_seed(cfg.seed, Stream::Solver),
        atoms: s.atoms,
        inner,
        max_states: s.max_states,
        ..SolverConfig::default()
    })
}

fn featurizer(problem: &ControlProblem, hedging: Option<&HedgingSetup>) -> CliResult<Arc<dyn Featurizer>> {
    Ok(match hedging {
        Some(h) => Arc::new(HedgingFeatures::markov(&h.hp)),
        None => Arc::new(RawFeatures::for_problem(problem)?),
    })
}

fn train_config(cfg: &RunConfig, built: &Built, stream: Stream) -> CliResult<TrainConfig> {
    let t = &cfg.train;
    let p = &built.problem;
    let z_grid = match p.space.bound {
        Some(c) if t.z_fixed && p.space.dim == 1 => ZGrid::Fixed(uniform_grid(c, t.z_points)),
        _ => ZGrid::Uniform(t.z_points),
    };
    let sampling = match (&built.hedging, t.sampling) {
        (Some(h), _) => Sampling::Custom(Arc::new(HedgingSampler {
            returns: h.train.returns.clone(),
            capital: (0.0, 0.04),
            position: (0.0, 1.0),
        })),
        (None, SamplingChoice::Uniform) => Sampling::Uniform,
        (None, SamplingChoice::ActionGrid) => Sampling::ActionGrid,
        (None, SamplingChoice::Reference) => Sampling::Reference,
    };
    let tc = TrainConfig {
        hidden: t.hidden.clone(),
        lr: t.lr,
        batch: t.batch,
        n_measures: t.n_measures,
        n_mc: t.n_mc,
        iter_a: t.iter_a,
        iter_psi: t.iter_psi,
        z_grid,
        seed: stream_seed(cfg.seed, stream),
        sampling,
        exact_discrete: t.exact_discrete,
        lambda_init: t.lambda_init,
        eval_samples: t.eval_samples,
        features: Some(featurizer(p, built.hedging.as_ref())?),
    };
    tc.validate()?;
    Ok(tc)
}

fn run_training(method: Method, problem: &ControlProblem, tc: &TrainConfig) -> CliResult<TrainedModel> {
    Ok(match method {
        Method::Algorithm1 => train_algorithm1(problem, tc)?,
        Method::Algorithm2 => train_algorithm2(problem, tc)?,
        Method::Exact => {
            return Err(CliError::Config(
                "train needs solver.method = \"algorithm1\" or \"algorithm2\"".into(),
            ))
        }
    })
}

fn header(cfg: &RunConfig, command: &str) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("schema_version".into(), json!(OUTPUT_SCHEMA_VERSION));
    m.insert("command".into(), json!(command));
    m.insert("seed".into(), json!(cfg.seed));
    m
}

pub fn solve_exact(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let built = build(cfg)?;
    let sc = solver_config(cfg, &built.problem)?;
    let sol = backward_induction_exact(&built.problem, &sc)?;
    let mut m = header(cfg, "solve-exact");
    m.insert("value".into(), json!(sol.value));
    m.insert(
        "nodes_per_stage".into(),
        json!(sol.tree.stages.iter().map(Vec::len).collect::<Vec<_>>()),
    );
    let root = &sol.tree.stages[0][0];
    let first = &root.actions[sol.policy_actions[0][0]];
    m.insert("first_action".into(), json!(first));
    out.json("solve.json", &Value::Object(m))?;
    out.write("value_table.txt", &sol.table.to_text())
}

pub fn train(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let built = build(cfg)?;
    let tc = train_config(cfg, &built, Stream::Training)?;
    let model = run_training(cfg.solver.method, &built.problem, &tc)?;
    let mut m = header(cfg, "train");
    m.insert("method".into(), json!(cfg.solver.method));
    m.insert("value_network".into(), json!(model.value_network));
    m.insert("value_estimate".into(), json!(model.value_estimate));
    m.insert("lambdas".into(), json!(model.lambdas));
    out.json("train.json", &Value::Object(m))?;
    out.write("model.txt", &model.dump())?;
    out.write("train_log.csv", &log_to_csv(&model.log)?)
}

pub fn evaluate(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let built = build(cfg)?;
    let p = &built.problem;
    let e = &cfg.evaluate;
    let seed = stream_seed(cfg.seed, Stream::Evaluation);
    let mut m = header(cfg, "evaluate");
    let set = match &e.model {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|err| {
                CliError::Config(format!("evaluate.model: cannot read {}: {err}", path.display()))
            })?;
            let dump = ModelDump::parse(&text)?;
            if dump.action_nets.len() != p.horizon {
                return Err(CliError::Config(format!(
                    "model has {} stages, problem has {}",
                    dump.action_nets.len(),
                    p.horizon
                )));
            }
            let policy = dump.policy(p.actions.clone(), featurizer(p, built.hedging.as_ref())?);
            m.insert("policy".into(), json!("network"));
            sampled_set_value(p, &policy, e.members, e.paths, seed)?
        }
        None => {
            let sol = backward_induction_exact(p, &solver_config(cfg, p)?)?;
            let policy = TabularPolicy::from_solution(&sol, p);
            let at_worst = evaluate_policy(p, &policy, &WorstCaseKernel { solution: &sol }, EvalMode::Exact, cfg.solver.atoms)?;
            m.insert("policy".into(), json!("exact"));
            m.insert("exact_value".into(), json!(sol.value));
            m.insert("value_at_worst_case".into(), json!(at_worst.mean));
            sampled_set_value(p, &policy, e.members, e.paths, seed)?
        }
    };
    m.insert("members".into(), json!(e.members));
    m.insert("paths".into(), json!(e.paths));
    m.insert("reference_value".into(), json!(set.per_member[0]));
    m.insert("per_member".into(), json!(set.per_member));
    m.insert("robust_value".into(), json!(set.robust));
    out.json("evaluate.json", &Value::Object(m))
}

pub fn hedge_backtest(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    if !matches!(cfg.problem, ProblemConfig::Hedging) {
        return Err(CliError::Config("hedge-backtest needs problem.kind = \"hedging\"".into()));
    }
    let setup = hedging_setup(cfg)?;
    let h = &cfg.hedging;
    let plain = Built {
        problem: setup.hp.control_problem(hedging_kernels(&setup, 0.0))?,
        bounds: None,
        hedging: Some(setup),
    };
    let tc = train_config(cfg, &plain, Stream::Training)?;
    let nonrobust = train_algorithm1(&plain.problem, &tc)?;
    let setup = plain.hedging.as_ref().expect("hedging setup");
    out.write("model_nonrobust.txt", &nonrobust.dump())?;
    let robust = if h.radius > 0.0 {
        let rp = setup.hp.control_problem(hedging_kernels(setup, h.radius))?;
        let rc = train_config(cfg, &plain, Stream::RobustTraining)?;
        let model = train_algorithm2(&rp, &rc)?;
        out.write("model_robust.txt", &model.dump())?;
        Some(model)
    } else {
        None
    };
    let vol = match h.annual_vol {
        Some(v) => v,
        None => estimate_annual_vol(&setup.train, 0, h.trading_days)?,
    };
    let delta = bs_delta_hedge(&setup.hp, vol, 1.0, h.trading_days)?;
    let nr_policy = nonrobust.policy();
    let r_policy = robust.as_ref().map(TrainedModel::policy);
    let mut policies: Vec<(String, &dyn Policy)> = vec![("nonrobust".into(), &nr_policy)];
    if let Some(p) = &r_policy {
        policies.push(("robust".into(), p));
    }
    policies.push(("bs-delta".into(), &delta));
    let report = backtest(&setup.hp, &policies, &setup.data.test)?;
    out.write("outcomes.csv", &report.outcomes_csv()?)?;
    let mut m = header(cfg, "hedge-backtest");
    m.insert("n_train".into(), json!(setup.data.train.len()));
    m.insert("n_test".into(), json!(setup.data.test.len()));
    m.insert("c_empirical".into(), json!(setup.data.c_empirical));
    m.insert("annual_vol".into(), json!(vol));
    m.insert("radius".into(), json!(h.radius));
    m.insert("report".into(), serde_json::to_value(&report).expect("report serialises"));
    out.json("summary.json", &Value::Object(m))
}

pub fn bounds(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let built = build(cfg)?;
    let set = built.bounds.as_ref().ok_or_else(|| {
        CliError::Config("bounds needs a wasserstein-audit or parametric-audit problem".into())
    })?;
    let sc = solver_config(cfg, &built.problem)?;
    let measured = measure_values(&built.problem, set, &sc)?;
    let report = bounds_report(set, Some(measured), cfg.bounds.tolerance)?;
    let mut body = report.to_json()?;
    body.push('\n');
    out.write("bounds.json", &body)?;
    if report.stability_holds != Some(true) || report.robust_gap_holds != Some(true) {
        return Err(CliError::Check(format!(
            "bound violated: |V_true - V_ref| = {}, stability bound {}; V_true - V_robust = {}, gap bound {}",
            (measured.v_true - measured.v_reference).abs(),
            report.stability_bound,
            measured.v_true - measured.v_robust,
            report.robust_gap_bound
        )));
    }
    println!(
        "bounds hold: stability {:.6e} <= {:.6e}, gap {:.6e} <= {:.6e}",
        (measured.v_true - measured.v_reference).abs(),
        report.stability_bound,
        measured.v_true - measured.v_robust,
        report.robust_gap_bound
    );
    Ok(())
}

pub fn oracle_check(cfg: &RunConfig, out: &Output) -> CliResult<()> {
    let built = build(cfg)?;
    let p = &built.problem;
    let sol = backward_induction_exact(p, &solver_config(cfg, p)?)?;
    let bf = brute_force_value(p, &sol.tree, cfg.oracle.budget)?;
    let policy = TabularPolicy::from_solution(&sol, p);
    let at_saddle = evaluate_policy(p, &policy, &WorstCaseKernel { solution: &sol }, EvalMode::Exact, cfg.solver.atoms)?;
    let checks = [
        ("enumerated max-min", Some(bf.max_min)),
        ("enumerated min-max", bf.min_max_adaptive),
        ("policy worst case", Some(tree_policy_worst_value(p, &sol.tree, &sol.policy_actions))),
        ("best response to the worst kernel", Some(best_response_value(p, &sol)?)),
        ("policy at the worst kernel", Some(at_saddle.mean)),
    ];
    let tol = cfg.oracle.tolerance;
    println!("dynamic programming value {:?}", sol.value);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (name, v) in checks {
        let Some(v) = v else { continue };
        let gap = (v - sol.value).abs();
        let ok = gap <= tol;
        println!("{} {name} {v:?} (gap {gap:.1e})", if ok { "match" } else { "MISMATCH" });
        if !ok {
            failures.push(name);
        }
        rows.push(json!({ "check": name, "value": v, "gap": gap, "ok": ok }));
    }
    let mut m = header(cfg, "oracle-check");
    m.insert("value".into(), json!(sol.value));
    m.insert("policies".into(), json!(bf.policies));
    m.insert("adversaries".into(), json!(bf.adversaries));
    m.insert("tolerance".into(), json!(tol));
    m.insert("checks".into(), Value::Array(rows));
    out.json("oracle.json", &Value::Object(m))?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("oracle mismatch: {}", failures.join(", "))))
    }
}

/// Resolves the output directory: flag, then environment, then config.
pub fn output_dir(flag: Option<&Path>, env: Option<String>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}
