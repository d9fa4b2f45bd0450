use std::error::Error;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use softspread::baselines::{gkr_estimate, histogram_estimate, knn_estimate, AnnotationLog};
use softspread::dataset::{load_dataset, save_dataset, EmbeddedDataset};
use softspread::export::{read_events, write_ci_report, write_estimates, write_events, write_records, ExperimentRecord};
use softspread::graph::{build_graph, normalize};
use softspread::metrics::{kl_divergence, rmse, DEFAULT_KL_FLOOR};
use softspread::session::{
    draw_events, replay_with_checkpoints, run_budget, session_for_dataset, AnnotationEvent, AnnotationSource,
    SessionConfig, SoftLabelEstimate, SpreadSession,
};
use softspread::sim::{derive_seed, make_sine_1d, make_two_moons, rng_stream, FeedbackOracle, RNG_ALGORITHM};
use softspread::solver::SolverConfig;
use softspread::theory::{consistency_experiment, summarize, ConsistencyConfig};
use softspread::uncertainty::{ci_report, CiLevel, HoeffdingParams};

use crate::args::*;

pub type CliResult<T = ()> = Result<T, Box<dyn Error>>;

const DEFAULT_ALPHA: f64 = 0.9;

fn load(data: &DataArg) -> CliResult<Arc<EmbeddedDataset>> {
    Ok(Arc::new(load_dataset(&data.data, data.format.resolve(&data.data))?))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    let f = File::create(path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    let f = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    Ok(BufReader::new(f))
}

fn solver_config(args: &SolverArgs, alpha: f64) -> CliResult<SolverConfig> {
    Ok(SolverConfig::new(alpha)?.with_tolerance(args.tolerance)?)
}

fn classes_of(ds: &EmbeddedDataset, explicit: Option<usize>) -> CliResult<usize> {
    match (explicit, ds.classes()) {
        (Some(c), Some(t)) if c != t => Err(format!("--classes {c} disagrees with the dataset's {t} label columns").into()),
        (Some(c), _) | (None, Some(c)) => Ok(c),
        (None, None) => Err("dataset has no label columns; pass --classes".into()),
    }
}

pub fn generate(args: GenerateArgs) -> CliResult {
    let ds = match args.kind {
        Synthetic::TwoMoons => make_two_moons(args.n, args.noise, args.sharpness, args.seed)?,
        Synthetic::Sine1d => make_sine_1d(args.n, args.lo, args.hi, args.seed)?,
    };
    save_dataset(&ds, &args.out, args.format.resolve(&args.out))?;
    println!("wrote {} points ({} dims) to {}", ds.len(), ds.dim(), args.out.display());
    Ok(())
}

pub fn graph(args: GraphCmdArgs) -> CliResult {
    let ds = load(&args.data)?;
    let g = build_graph(&ds, args.graph.kind()?)?;
    let mut out = create(&args.out)?;
    g.write_edge_list(&mut out)?;
    out.flush()?;
    let components = g.components().into_iter().max().map_or(0, |c| c + 1);
    let sigma = g.sigma2().map_or(String::new(), |s| format!(" sigma2={s}"));
    println!("nodes={} edges={} components={components}{sigma}", g.len(), g.edge_count());
    Ok(())
}

fn check_estimator_flags(args: &RunArgs) -> CliResult {
    let flags = [
        ("--alpha", args.solver.alpha.is_some(), Estimator::Pls),
        ("--gamma", args.gamma.is_some(), Estimator::Gkr),
        ("--neighbors", args.neighbors.is_some(), Estimator::Knn),
    ];
    for (flag, given, owner) in flags {
        if given && args.estimator != owner {
            return Err(format!("{flag} does not apply to the {:?} estimator", args.estimator).into());
        }
    }
    match args.estimator {
        Estimator::Gkr if args.gamma.is_none() => Err("the gkr estimator needs --gamma".into()),
        Estimator::Knn if args.neighbors.is_none() => Err("the knn estimator needs --neighbors".into()),
        _ => Ok(()),
    }
}

fn resolve_checkpoints(args: &RunArgs, n: usize) -> CliResult<(usize, Vec<usize>)> {
    let m = args.budget.resolve(n);
    if m == 0 {
        return Err(format!("budget {:?} rounds to zero annotations for n = {n}", args.budget).into());
    }
    let checkpoints: Vec<usize> = if args.checkpoints.is_empty() {
        vec![m]
    } else {
        args.checkpoints.iter().map(|b| b.resolve(n)).collect()
    };
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[checkpoints.len() - 1] > m {
        return Err(format!("checkpoints {checkpoints:?} must be strictly ascending and at most the budget {m}").into());
    }
    Ok((m, checkpoints))
}

/// Estimate after the first `used` events, or `None` where the estimator is undefined.
fn baseline_estimate(
    args: &RunArgs,
    ds: &EmbeddedDataset,
    classes: usize,
    events: &[(usize, usize)],
) -> CliResult<Option<SoftLabelEstimate>> {
    let log = AnnotationLog::new(ds.len(), classes, events.to_vec())?;
    Ok(match args.estimator {
        Estimator::Histogram => Some(histogram_estimate(&log)),
        Estimator::Gkr => Some(gkr_estimate(ds, &log, args.gamma.expect("checked"))?.estimate),
        Estimator::Knn => {
            let k = args.neighbors.expect("checked");
            let distinct = {
                let mut pts: Vec<usize> = events.iter().map(|e| e.0).collect();
                pts.sort_unstable();
                pts.dedup();
                pts.len()
            };
            // too few annotated points for k neighbours: undefined, reported as NaN
            (distinct >= k).then(|| knn_estimate(ds, &log, k)).transpose()?
        }
        Estimator::Pls => unreachable!("spreading runs through the session"),
    })
}

pub fn run(args: RunArgs) -> CliResult {
    check_estimator_flags(&args)?;
    if args.reps == 0 {
        return Err("--reps must be at least 1".into());
    }
    let ds = load(&args.data)?;
    let truth = ds
        .truth()
        .ok_or("run simulates annotators from ground-truth soft labels; the dataset has none")?
        .clone();
    let n = ds.len();
    let classes = truth.cols();
    let (m, checkpoints) = resolve_checkpoints(&args, n)?;
    let alpha = args.solver.alpha.unwrap_or(DEFAULT_ALPHA);
    let op = match args.estimator {
        Estimator::Pls => {
            solver_config(&args.solver, alpha)?;
            Some(Arc::new(normalize(Arc::new(build_graph(&ds, args.graph.kind()?)?), args.graph.normalization)))
        }
        _ => None,
    };

    let mut records = Vec::new();
    for rep in 0..args.reps {
        let mut oracle = FeedbackOracle::with_rng(truth.clone(), rng_stream(args.seed, 2 * rep as u64))?;
        let events = draw_events(n, m, &mut oracle, derive_seed(args.seed, 2 * rep as u64 + 1))?;
        let start = Instant::now();
        let mut snapshots: Vec<(usize, Option<SoftLabelEstimate>, f64)> = Vec::new();
        let mut log: Vec<AnnotationEvent> = Vec::new();
        if let Some(op) = &op {
            let config = SessionConfig::new(solver_config(&args.solver, alpha)?, classes);
            let mut session = SpreadSession::new(op.clone(), Some(ds.clone()), config)?;
            for (cp, est) in replay_with_checkpoints(&mut session, &events, AnnotationSource::Simulated, &checkpoints)? {
                snapshots.push((cp, Some(est), start.elapsed().as_secs_f64() * 1e3));
            }
            log = session.log().to_vec();
        } else {
            for &cp in &checkpoints {
                let est = baseline_estimate(&args, &ds, classes, &events[..cp])?;
                snapshots.push((cp, est, start.elapsed().as_secs_f64() * 1e3));
            }
            if args.events_out.is_some() {
                log = events
                    .iter()
                    .enumerate()
                    .map(|(i, &(point, class))| AnnotationEvent {
                        point,
                        class,
                        sequence: i as u64,
                        source: AnnotationSource::Simulated,
                    })
                    .collect();
            }
        }
        for (cp, est, wall_ms) in &snapshots {
            let (r, kl) = match est {
                Some(e) => (rmse(&e.probabilities, &truth)?, kl_divergence(&e.probabilities, &truth, DEFAULT_KL_FLOOR)?),
                None => {
                    eprintln!("warning: fewer annotated points than --neighbors at checkpoint {cp}; recording NaN");
                    (f64::NAN, f64::NAN)
                }
            };
            records.push(ExperimentRecord {
                budget: *cp,
                repetition: rep,
                rmse: r,
                kl,
                wall_ms: *wall_ms,
            });
        }
        if rep == 0 {
            if let Some(path) = &args.estimates_out {
                match snapshots.last() {
                    Some((_, Some(est), _)) => {
                        let mut out = create(path)?;
                        write_estimates(&mut out, ds.ids(), est)?;
                        out.flush()?;
                    }
                    _ => return Err("no estimate at the final checkpoint to export".into()),
                }
            }
            if let Some(path) = &args.events_out {
                let mut out = create(path)?;
                write_events(&mut out, &ds, &log)?;
                out.flush()?;
            }
        }
    }

    let estimator_desc = match args.estimator {
        Estimator::Pls => format!(
            "estimator=pls alpha={alpha} graph={:?} normalization={}",
            args.graph.kind()?,
            args.graph.normalization.name()
        ),
        Estimator::Gkr => format!("estimator=gkr gamma={}", args.gamma.expect("checked")),
        Estimator::Knn => format!("estimator=knn neighbors={}", args.neighbors.expect("checked")),
        Estimator::Histogram => "estimator=histogram".to_string(),
    };
    let comment = format!("rng={RNG_ALGORITHM} seed={} n={n} budget={m} {estimator_desc}", args.seed);
    let mut out = create(&args.out)?;
    write_records(&mut out, &comment, &records)?;
    out.flush()?;
    for r in records.iter().filter(|r| r.repetition == 0) {
        println!("budget={} rmse={} kl={}", r.budget, r.rmse, r.kl);
    }
    Ok(())
}

pub fn ci(args: CiArgs) -> CliResult {
    let ds = load(&args.data)?;
    let classes = classes_of(&ds, args.classes)?;
    let level = match args.method {
        CiChoice::Wilson => CiLevel::Wilson { z: args.z },
        CiChoice::Hoeffding => {
            if args.lipschitz.is_none() {
                return Err("hoeffding intervals need --lipschitz".into());
            }
            CiLevel::Hoeffding(HoeffdingParams {
                delta: args.delta,
                union_bound: args.union_bound,
            })
        }
    };
    let alpha = args.solver.alpha.unwrap_or(DEFAULT_ALPHA);
    let mut config = SessionConfig::new(solver_config(&args.solver, alpha)?, classes);
    config.lipschitz = args.lipschitz;
    let mut session = session_for_dataset(ds.clone(), args.graph.kind()?, args.graph.normalization, config)?;
    if let Some(path) = &args.events {
        for event in read_events(open(path)?, &ds)? {
            session.apply_event(&event)?;
        }
    } else if let Some(budget) = args.budget {
        let truth = ds.truth().ok_or("--budget simulates annotators and needs ground-truth labels")?;
        let m = budget.resolve(ds.len());
        let mut oracle = FeedbackOracle::with_rng(truth.clone(), rng_stream(args.seed, 0))?;
        run_budget(&mut session, &mut oracle, m, derive_seed(args.seed, 1), &[])?;
    }
    let rows = ci_report(&session, level)?;
    let mut out = create(&args.out)?;
    write_ci_report(&mut out, ds.ids(), &rows)?;
    out.flush()?;
    let vacuous = rows.iter().filter(|r| r.interval.vacuous).count();
    println!("rows={} vacuous={vacuous} annotations={}", rows.len(), session.log().len());
    if let Some(truth) = ds.truth() {
        let covered = rows.iter().filter(|r| r.interval.contains(truth.get(r.point, r.class))).count();
        println!("coverage={covered}/{} ({})", rows.len(), covered as f64 / rows.len() as f64);
    }
    Ok(())
}

#[derive(Serialize)]
struct ConsistencyRow {
    n: usize,
    repetition: usize,
    alpha: f64,
    path_length: u64,
    bandwidth: f64,
    budget: usize,
    max_error: f64,
    mean_error: f64,
    rmse: f64,
    kl: f64,
    components: usize,
    isolated: usize,
    row_sum_error: f64,
    wall_ms: f64,
    failure: String,
}

pub fn consistency(args: ConsistencyArgs) -> CliResult {
    let config = ConsistencyConfig {
        eps: args.eps,
        lipschitz: args.lipschitz,
        kappa: args.kappa,
        variant: args.variant.into(),
        reps: args.reps,
        rng_seed: args.seed,
        lo: args.lo,
        hi: args.hi,
        ..ConsistencyConfig::default()
    };
    let records = consistency_experiment(&args.ns, &config)?;
    let rows: Vec<ConsistencyRow> = records
        .iter()
        .map(|r| ConsistencyRow {
            n: r.n,
            repetition: r.repetition,
            alpha: r.schedule.alpha,
            path_length: r.schedule.path_length,
            bandwidth: r.schedule.bandwidth,
            budget: r.schedule.budget,
            max_error: r.max_error,
            mean_error: r.mean_error,
            rmse: r.rmse,
            kl: r.kl,
            components: r.components,
            isolated: r.isolated,
            row_sum_error: r.row_sum_error,
            wall_ms: r.wall_ms,
            failure: r.failure.clone().unwrap_or_default(),
        })
        .collect();
    let comment = format!(
        "rng={RNG_ALGORITHM} seed={} eps={} lipschitz={} kappa={} variant={:?} domain=[{}, {}]",
        args.seed, args.eps, args.lipschitz, args.kappa, config.variant, args.lo, args.hi
    );
    let mut out = create(&args.out)?;
    write_records(&mut out, &comment, &rows)?;
    out.flush()?;
    for s in summarize(&records) {
        println!(
            "n={} mean_max_error={} mean_mean_error={} completed={}/{}",
            s.n, s.mean_max_error, s.mean_mean_error, s.completed, args.reps
        );
    }
    Ok(())
}

pub fn replay(args: ReplayArgs) -> CliResult {
    let ds = load(&args.data)?;
    let classes = classes_of(&ds, args.classes)?;
    let alpha = args.solver.alpha.unwrap_or(DEFAULT_ALPHA);
    let config = SessionConfig::new(solver_config(&args.solver, alpha)?, classes);
    let mut session = session_for_dataset(ds.clone(), args.graph.kind()?, args.graph.normalization, config)?;
    let events = read_events(open(&args.events)?, &ds)?;
    session.prefetch(events.iter().map(|e| e.point))?;
    for event in &events {
        session.apply_event(event)?;
    }
    let mut out = create(&args.out)?;
    write_estimates(&mut out, ds.ids(), &session.estimates())?;
    out.flush()?;
    println!("replayed {} events", events.len());
    Ok(())
}
