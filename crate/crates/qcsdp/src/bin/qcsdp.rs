//! Command-line front end for the moment-hierarchy toolkit: solve the
//! relaxation of a game, round a solution into an explicit strategy, sweep
//! levels, extract assignments from constraint-game strategies, and run the
//! numeric fixture suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qcsdp::extraction::{soundness_check, soundness_csv, SoundnessReport};
use qcsdp::games::{
    chsh, honest_strategy, load_csp, load_game, oracularize,
    satisfying_assignment, Game, OracleGame, Strategy,
};
use qcsdp::hierarchy::{build_level, gram_from_strategy, GramSolution};
use qcsdp::linalg::{
    check_com_power_bound, check_sq_bound, commutator, operator_norm,
    random_psd, voiculescu_pair, CMatrix,
};
use qcsdp::rounding::{
    build_projectors, round, study_convergence, study_csv, verify_commutators,
    verify_identities, verify_value, GramSource, RoundedStrategy,
    rounded_strategy_to_text, ROUNDING_COMMUTATOR_CONST,
};
use qcsdp::solver::{extract_gram, solution_to_text, solve};
use qcsdp::Error;

#[derive(Parser)]
#[command(name = "qcsdp", about = "Moment-hierarchy toolkit for two-prover games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GameInput {
    /// Path to a game file in JSON form.
    #[arg(long, conflicts_with = "builtin")]
    game: Option<PathBuf>,
    /// Built-in game: "chsh" or "trivial".
    #[arg(long)]
    builtin: Option<String>,
}

impl GameInput {
    fn load(&self) -> Result<Game, Error> {
        match (&self.game, &self.builtin) {
            (Some(path), None) => load_game(path),
            (None, Some(name)) => match name.as_str() {
                "chsh" => Ok(chsh()),
                "trivial" => Ok(Game {
                    qx: 1,
                    ax: 1,
                    qy: 1,
                    ay: 1,
                    mu: vec![vec![1.0]],
                    predicate: vec![vec![vec![vec![true]]]],
                }),
                other => Err(Error::InvalidInput(format!(
                    "unknown builtin game '{other}' (expected 'chsh' or 'trivial')"
                ))),
            },
            _ => Err(Error::InvalidInput(
                "exactly one of --game or --builtin is required".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the level-N relaxation and write the solution artifact.
    Solve {
        #[command(flatten)]
        input: GameInput,
        /// Hierarchy level (N >= 1).
        #[arg(long, default_value_t = 1)]
        level: usize,
        /// Solver tolerance on the convergence gap.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Output directory for artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve, round into an explicit strategy, and verify the result.
    Round {
        #[command(flatten)]
        input: GameInput,
        /// Hierarchy level (N >= 2).
        #[arg(long, default_value_t = 2)]
        level: usize,
        /// Solver tolerance on the convergence gap.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Optional weight profile file: N+1 whitespace-separated reals,
        /// applied to both parties.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Fail (exit 4) if any verification exceeds its tolerance.
        #[arg(long)]
        strict: bool,
        /// Output directory for artifacts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep levels and emit the convergence study CSV.
    Study {
        #[command(flatten)]
        input: GameInput,
        /// Level range "a..b" (inclusive) or a single level.
        #[arg(long)]
        levels: String,
        /// Solver tolerance on the convergence gap.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Output directory; the CSV also prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract an assignment distribution from a strategy for the
    /// oracularized game of a constraint system.
    Extract {
        /// Path to the constraint-system file in JSON form.
        #[arg(long)]
        csp: PathBuf,
        /// Strategy source: "honest" (best assignment found by search) or
        /// "rounded" (full pipeline at the given level).
        #[arg(long, default_value = "honest")]
        strategy: String,
        /// Hierarchy level for the rounded source.
        #[arg(long, default_value_t = 2)]
        level: usize,
        /// Monte-Carlo sample budget (used above the exact-enumeration
        /// variable limit).
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; the CSV also prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numeric fixture suites (commuting-unitary table,
    /// commutator-power inequality, square-root perturbation bounds).
    Fixtures {
        /// RNG seed for the randomized suites.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Solver(_) => 3,
        Error::Verification(_) | Error::NotPsd(_) | Error::NotHermitian(_) => 4,
        _ => 2,
    }
}

fn write_artifact(out: &Option<PathBuf>, name: &str, text: &str) -> Result<(), Error> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(name);
        std::fs::write(&path, text)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_levels(range: &str) -> Result<Vec<usize>, Error> {
    let parse_one = |s: &str| -> Result<usize, Error> {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("bad level '{s}'")))
    };
    let levels: Vec<usize> = if let Some((a, b)) = range.split_once("..") {
        let (a, b) = (parse_one(a)?, parse_one(b)?);
        if a > b {
            return Err(Error::InvalidInput(format!("empty level range '{range}'")));
        }
        (a..=b).collect()
    } else {
        vec![parse_one(range)?]
    };
    if levels.is_empty() || levels.contains(&0) {
        return Err(Error::InvalidInput("levels must be >= 1".into()));
    }
    Ok(levels)
}

fn cmd_solve(
    input: &GameInput,
    level: usize,
    tol: f64,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let g = input.load()?;
    let p = build_level(&g, level)?;
    let sol = solve(&g, &p, tol)?;
    write_artifact(out, &format!("solution_level{level}.txt"), &solution_to_text(&sol))?;
    println!("level {level} optimum {:.9} gap {:.3e}", sol.optimum, sol.gap_estimate);
    Ok(())
}

struct RoundedPipeline {
    gs: GramSolution,
    value: f64,
    rs: RoundedStrategy,
    identity_residual: f64,
    /// Verification tolerance scaled with Gram rank and solver accuracy.
    verify_tol: f64,
}

fn run_round_pipeline(
    g: &Game,
    level: usize,
    tol: f64,
    weights: Option<&[f64]>,
) -> Result<RoundedPipeline, Error> {
    let p = build_level(g, level)?;
    let sol = solve(g, &p, tol)?;
    let clamp = (sol.gap_estimate * 10.0).max(1e-9);
    let gs = extract_gram(&sol, &p.index, clamp)?;
    let psd_tol = (10.0 * gs.rank() as f64 * sol.gap_estimate).max(1e-8);
    let pf = build_projectors(&gs)?;
    let identity_residual = verify_identities(&pf, &gs).max_residual();
    let rs = round(&gs, &pf, weights, weights, psd_tol)?;
    Ok(RoundedPipeline {
        gs,
        value: sol.optimum,
        rs,
        identity_residual,
        verify_tol: psd_tol,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_round(
    input: &GameInput,
    level: usize,
    tol: f64,
    weights: &Option<PathBuf>,
    strict: bool,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let g = input.load()?;
    let weight_vec: Option<Vec<f64>> = match weights {
        None => None,
        Some(path) => {
            let text =
                std::fs::read_to_string(path)?;
            let vals: Result<Vec<f64>, Error> = text
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad weight '{t}'")))
                })
                .collect();
            Some(vals?)
        }
    };
    let pipe = run_round_pipeline(&g, level, tol, weight_vec.as_deref())?;
    let _ = &pipe.gs;
    let vr = verify_value(&g, &pipe.rs, pipe.value);
    let cb = verify_commutators(&pipe.rs);
    write_artifact(
        out,
        &format!("rounded_level{level}.txt"),
        &rounded_strategy_to_text(&pipe.rs),
    )?;
    let value_ok = vr.value_gap() <= 1e-6;
    let garbage_tol = pipe.verify_tol.max(1e-8);
    let garbage_ok = vr.max_garbage_probability <= garbage_tol;
    let ident_ok = pipe.identity_residual <= 1e-5;
    println!(
        "value match 1e-6 {}; maxComm {:.6e}; bound {ROUNDING_COMMUTATOR_CONST}/sqrt(N-1) {}; \
         garbageMax {:.3e} {}; identityResidual {:.3e} {}",
        if value_ok { "OK" } else { "FAIL" },
        cb.max_commutator,
        if cb.pass() { "OK" } else { "FAIL" },
        vr.max_garbage_probability,
        if garbage_ok { "OK" } else { "FAIL" },
        pipe.identity_residual,
        if ident_ok { "OK" } else { "FAIL" },
    );
    if strict && !(value_ok && garbage_ok && ident_ok && cb.pass()) {
        return Err(Error::Verification(
            "strict mode: a rounding verification exceeded its tolerance".into(),
        ));
    }
    Ok(())
}

fn cmd_study(
    input: &GameInput,
    levels: &str,
    tol: f64,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let g = input.load()?;
    let levels = parse_levels(levels)?;
    let rows = study_convergence(&g, &levels, &GramSource::Ipm { tol });
    let csv = study_csv(&rows);
    print!("{csv}");
    write_artifact(out, "study.csv", &csv)?;
    Ok(())
}

/// Turns a rounded strategy into an explicit complex strategy for the game,
/// folding each garbage element into the answer-0 element so every POVM is
/// complete. The fold leaves the value unchanged up to the (numerically zero)
/// garbage probability on the rounded state.
fn complete_strategy(rs: &RoundedStrategy, g: &Game) -> Strategy {
    let lift = |m: &DMatrix<f64>| -> CMatrix {
        CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| Complex64::new(m[(i, j)], 0.0))
    };
    let povm_a: Vec<Vec<CMatrix>> = (0..g.qx)
        .map(|x| {
            (0..g.ax)
                .map(|a| {
                    if a == 0 {
                        lift(&(&rs.p_tilde[x][0] + &rs.p_garbage[x]))
                    } else {
                        lift(&rs.p_tilde[x][a])
                    }
                })
                .collect()
        })
        .collect();
    let povm_b: Vec<Vec<CMatrix>> = (0..g.qy)
        .map(|y| {
            (0..g.ay)
                .map(|b| {
                    if b == 0 {
                        lift(&(&rs.q_tilde[y][0] + &rs.q_garbage[y]))
                    } else {
                        lift(&rs.q_tilde[y][b])
                    }
                })
                .collect()
        })
        .collect();
    let state = lift(&DMatrix::from_fn(rs.rank, 1, |i, _| rs.state[i]));
    let rho = &state * state.adjoint();
    Strategy {
        dim: rs.rank,
        povm_a,
        povm_b,
        rho,
    }
}

fn cmd_extract(
    csp_path: &PathBuf,
    strategy: &str,
    level: usize,
    samples: usize,
    seed: u64,
    out: &Option<PathBuf>,
) -> Result<(), Error> {
    let csp = load_csp(csp_path)?;
    let og: OracleGame = oracularize(&csp)?;
    let report: SoundnessReport = match strategy {
        "honest" => {
            let assignment = satisfying_assignment(&csp).ok_or_else(|| {
                Error::InvalidInput(
                    "no satisfying assignment found; the honest source needs a \
                     satisfiable instance"
                        .into(),
                )
            })?;
            let s = honest_strategy(&og, &assignment);
            soundness_check(&csp, &og, &s, samples, seed)?
        }
        "rounded" => {
            // Feasible moment matrix induced by the best honest strategy,
            // rounded through the full pipeline, then completed to a POVM
            // strategy for the extraction machinery.
            let assignment = satisfying_assignment(&csp).ok_or_else(|| {
                Error::InvalidInput(
                    "no satisfying assignment found; the rounded source rounds \
                     the honest strategy's induced moment matrix"
                        .into(),
                )
            })?;
            let base = honest_strategy(&og, &assignment);
            let gs = gram_from_strategy(&og.game, &base, level)?;
            let pf = build_projectors(&gs)?;
            let rs = round(&gs, &pf, None, None, 1e-8)?;
            let s = complete_strategy(&rs, &og.game);
            soundness_check(&csp, &og, &s, samples, seed)?
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown strategy source '{other}' (expected 'honest' or 'rounded')"
            )))
        }
    };
    let csv = soundness_csv(std::slice::from_ref(&report));
    print!("{csv}");
    write_artifact(out, "extraction.csv", &csv)?;
    Ok(())
}

fn cmd_fixtures(seed: u64) -> Result<(), Error> {
    let mut failures = 0usize;

    // Commuting-unitary table: shift and phase unitaries with commutator
    // norm exactly 2 sin(pi/d), decaying like 1/d.
    let mut worst = 0.0f64;
    let mut d = 2usize;
    while d <= 256 {
        let (u1, u2) = voiculescu_pair(d)?;
        let norm = operator_norm(&commutator(&u1, &u2));
        let want = 2.0 * (std::f64::consts::PI / d as f64).sin();
        worst = worst.max((norm - want).abs());
        println!("unitary-pair d={d} commutator {norm:.12}");
        d *= 2;
    }
    let ok = worst <= 1e-10;
    println!(
        "suite unitary-pair: {} (max deviation {worst:.3e})",
        if ok { "pass" } else { "FAIL" }
    );
    failures += usize::from(!ok);

    // Commutator-power inequality on random PSD pairs.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut holds = true;
    for trial in 0..1000 {
        let dim = 2 + (trial % 15);
        let a = random_psd(&mut rng, dim);
        let b = random_psd(&mut rng, dim);
        for r in [0.125, 0.25, 0.5] {
            let rep = check_com_power_bound(&a, &b, r)?;
            if !rep.holds {
                holds = false;
            }
        }
    }
    println!(
        "suite commutator-power: {} (1000 pairs, r in {{1/8, 1/4, 1/2}})",
        if holds { "pass" } else { "FAIL" }
    );
    failures += usize::from(!holds);

    // Square-root perturbation bounds on structured near-commuting families.
    let mut sq_ok = true;
    for trial in 0..100 {
        let dim = 4 + (trial % 5);
        let mut a0 = CMatrix::zeros(dim, dim);
        for k in 0..dim / 2 {
            a0[(k, k)] = Complex64::new(1.0, 0.0);
        }
        let eps = 1e-3 * (1.0 + (trial % 7) as f64);
        let noise = random_psd(&mut rng, dim);
        let nn = operator_norm(&noise).max(1.0);
        let pert = &a0 + &noise * Complex64::new(eps / nn, 0.0);
        let sum = &pert + (CMatrix::identity(dim, dim) - &a0);
        let isq = qcsdp::linalg::psd_power(&sum, -0.5)?;
        let b0 = &isq * &pert * &isq;
        let b1 = CMatrix::identity(dim, dim) - &b0;
        let a1 = CMatrix::identity(dim, dim) - &a0;
        let raw = random_psd(&mut rng, dim) + CMatrix::identity(dim, dim);
        let rho = &raw / Complex64::new(raw.trace().re, 0.0);
        let rep = check_sq_bound(
            &[a0.clone(), a1.clone()],
            &[b0.clone(), b1.clone()],
            &rho,
        )?;
        if !(rep.sq_holds && rep.trace_holds) {
            sq_ok = false;
        }
    }
    println!(
        "suite sqrt-perturbation: {} (100 structured families)",
        if sq_ok { "pass" } else { "FAIL" }
    );
    failures += usize::from(!sq_ok);

    if failures > 0 {
        return Err(Error::Verification(format!("{failures} fixture suite(s) failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve { input, level, tol, out } => cmd_solve(input, *level, *tol, out),
        Command::Round {
            input,
            level,
            tol,
            weights,
            strict,
            out,
        } => cmd_round(input, *level, *tol, weights, *strict, out),
        Command::Study { input, levels, tol, out } => cmd_study(input, levels, *tol, out),
        Command::Extract {
            csp,
            strategy,
            level,
            samples,
            seed,
            out,
        } => cmd_extract(csp, strategy, *level, *samples, *seed, out),
        Command::Fixtures { seed } => cmd_fixtures(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
