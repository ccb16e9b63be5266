//! The selection master: a cutting-plane method over the k-of-N asset
//! selections.
//!
//! The selection objective f(z) — the worst-case loss of the best portfolio
//! on support z — is evaluated by `lower_level` and underestimated by the
//! subgradient cuts it produces. This module minimizes f over all
//! cardinality-k selections in two interchangeable ways:
//!
//! * **iterative** — the textbook loop: solve the cut-pool master to
//!   optimality, evaluate f at its argmin, add a cut, repeat until the
//!   bounds meet;
//! * **single-tree** — one branch-and-bound run in which every integral
//!   candidate triggers a lower-level solve and, when the pool undervalues
//!   it, a lazy cut; the node is then re-examined against the grown pool.
//!
//! Both modes share the same deterministic search core: best-bound node
//! selection (ties to the lowest node id), branching on the most fractional
//! coordinate (ties to the lowest index), the zero-branch explored first,
//! and a certified-completion shortcut that closes a node as soon as the
//! lexicographically smallest completion already attains the node's linear
//! relaxation value. Identical inputs reproduce identical runs bit for bit.
//!
//! The engine itself is objective-agnostic: candidates are priced through
//! a callback, and the pool holds value cuts plus exclusion rows for
//! selections that turn out infeasible. The mean-variance comparator in
//! `baselines` drives the same engine with quadratic-program pricing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, Cone, ConeProgram, IpmSettings, SolveStatus};
use crate::lower_level::{
    lift, recover_portfolio, solve_full_dual, solve_lower, subgradient_cut, Cut, LowerLevelError,
};
use crate::model::{Instance, Portfolio, Selection};

/// A coordinate counts as integral when it sits within this distance of
/// 0 or 1 in a node relaxation.
const INT_TOL: f64 = 1e-6;

/// Relative slack for value comparisons that involve one linear-program
/// solve: certified completions and lazy-cut triggers. Ten times the
/// relaxation solver's own tolerance, far below any meaningful objective
/// difference.
fn value_slack(v: f64) -> f64 {
    1e-7 * (1.0 + v.abs())
}

/// Node budget used when the master relaxation is solved standalone.
const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

#[derive(Debug, Error)]
pub enum UpperLevelError {
    #[error(transparent)]
    Lower(#[from] LowerLevelError),
    #[error(transparent)]
    Program(#[from] conic::ProgramError),
    #[error("master relaxation solve ended with status {status:?}")]
    MasterLp { status: SolveStatus },
    #[error("master search exhausted its node budget after {explored} nodes")]
    NodeBudget { explored: u64 },
}

/// How the master problem is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MasterMode {
    /// Alternate full master solves with single cut additions.
    Iterative,
    /// One branch-and-bound run with lazy cuts at integral candidates.
    SingleTree,
}

impl fmt::Display for MasterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MasterMode::Iterative => write!(f, "iterative"),
            MasterMode::SingleTree => write!(f, "single-tree"),
        }
    }
}

impl std::str::FromStr for MasterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iterative" => Ok(MasterMode::Iterative),
            "single-tree" => Ok(MasterMode::SingleTree),
            other => Err(format!(
                "unknown mode {other:?}: expected \"iterative\" or \"single-tree\""
            )),
        }
    }
}

/// Why a solve stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// The bound gap closed to within epsilon.
    EpsOptimal,
    /// The wall-clock limit expired; the result carries the incumbent and
    /// its proven gap.
    TimeLimit,
    /// The node budget ran out first.
    IterLimit,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::EpsOptimal => write!(f, "eps-optimal"),
            Termination::TimeLimit => write!(f, "time-limit"),
            Termination::IterLimit => write!(f, "iter-limit"),
        }
    }
}

/// Run controls for [`cutting_plane_solve`].
#[derive(Debug, Clone)]
pub struct CutPlaneConfig {
    /// Terminate when upper and lower bound are within this.
    pub epsilon: f64,
    /// Wall-clock budget for the whole solve.
    pub time_limit: Duration,
    pub mode: MasterMode,
    /// Total branch-and-bound nodes across all master solves.
    pub node_budget: u64,
    /// Settings for every cone solve, lower-level and master alike.
    pub ipm: IpmSettings,
}

impl Default for CutPlaneConfig {
    fn default() -> Self {
        CutPlaneConfig {
            epsilon: 1e-5,
            time_limit: Duration::from_secs(3600),
            mode: MasterMode::SingleTree,
            node_budget: DEFAULT_NODE_BUDGET,
            ipm: IpmSettings::default(),
        }
    }
}

/// Bookkeeping of the iterative loop: the cut pool, the incumbent, and the
/// two bound ledgers. The upper bound never increases, the lower bound
/// never decreases, and `theta_lb` is a floor for both.
#[derive(Debug, Clone)]
pub struct MasterState {
    pub iteration: usize,
    pub pool: Vec<Cut>,
    pub incumbent: Option<Selection>,
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub theta_lb: f64,
    pub epsilon: f64,
    pub nodes: u64,
}

impl MasterState {
    pub fn new(theta_lb: f64, epsilon: f64) -> Self {
        MasterState {
            iteration: 0,
            pool: Vec::new(),
            incumbent: None,
            upper_bound: f64::INFINITY,
            lower_bound: theta_lb,
            theta_lb,
            epsilon,
            nodes: 0,
        }
    }
}

/// One line of the solve trace, emitted per finite-valued candidate
/// evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Evaluation counter, starting at 1.
    pub t: usize,
    pub lb: f64,
    pub ub: f64,
    /// Cuts (and exclusions) pooled after processing this anchor.
    pub pool: usize,
    /// The selection just evaluated.
    pub anchor: Vec<usize>,
}

/// Outcome of a full solve: the chosen selection, its portfolio, and the
/// certificates. `objective` is the selection's value recomputed at the
/// end; the portfolio comes from the primal recovery on the final support
/// and matches `objective` to 1e-6 relative.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub selection: Selection,
    pub portfolio: Portfolio,
    pub objective: f64,
    /// Proven optimality gap at termination, at most epsilon after a
    /// normal stop.
    pub gap: f64,
    /// Master iterations (iterative) or candidate evaluations
    /// (single-tree).
    pub iterations: usize,
    /// Constraints generated: value cuts plus infeasibility exclusions.
    pub cuts: usize,
    pub nodes: u64,
    pub wall_time_s: f64,
    pub mode: MasterMode,
    pub termination: Termination,
}

/// A floor for the optimum over every cardinality: the objective with all
/// assets selectable. Dropping the cardinality constraint can only enlarge
/// the feasible set, so this value bounds f(z) from below for every z.
pub fn initial_lower_bound(
    instance: &Instance,
    settings: &IpmSettings,
) -> Result<f64, UpperLevelError> {
    let n = instance.n_assets();
    let mut relaxed = instance.clone();
    relaxed.k = n;
    let sol = solve_full_dual(&relaxed, &Selection::all(n), settings)?;
    Ok(sol.f_prime)
}

/// Best value a set of cuts certifies at `z`, never below the floor.
fn cuts_value(cuts: &[Cut], floor: f64, z: &Selection) -> f64 {
    cuts.iter().map(|c| c.bound_at(z)).fold(floor, f64::max)
}

/// The master's working constraint set: a floor, value cuts, and exact
/// exclusions for selections proven infeasible.
pub(crate) struct Pool {
    pub(crate) floor: f64,
    pub(crate) cuts: Vec<Cut>,
    pub(crate) bans: Vec<Selection>,
}

impl Pool {
    fn new(floor: f64) -> Self {
        Pool {
            floor,
            cuts: Vec::new(),
            bans: Vec::new(),
        }
    }

    /// Surrogate objective at `z`: the best pooled bound, or infinity on a
    /// banned selection.
    fn value(&self, z: &Selection) -> f64 {
        if self.bans.iter().any(|b| b == z) {
            return f64::INFINITY;
        }
        cuts_value(&self.cuts, self.floor, z)
    }

    fn len(&self) -> usize {
        self.cuts.len() + self.bans.len()
    }
}

const FIX_FREE: u8 = 0;
const FIX_ONE: u8 = 1;
const FIX_ZERO: u8 = 2;

/// A branch-and-bound node: branching decisions plus the best bound known
/// for its subtree (inherited from the parent relaxation, refreshed when
/// the node is processed).
struct Node {
    bound: f64,
    id: u64,
    fix: Vec<u8>,
}

// The heap must pop the node with the smallest bound, breaking ties toward
// the smallest id; `BinaryHeap` pops maxima, so the ordering is reversed.
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

/// Smallest selection (by sorted index vector) consistent with the node's
/// branching decisions: everything fixed to one plus the lowest free
/// indices up to cardinality k.
fn lex_completion(fix: &[u8], k: usize) -> Selection {
    let mut indices: Vec<usize> = (0..fix.len()).filter(|&i| fix[i] == FIX_ONE).collect();
    for i in 0..fix.len() {
        if indices.len() == k {
            break;
        }
        if fix[i] == FIX_FREE {
            indices.push(i);
        }
    }
    indices.sort_unstable();
    Selection::from_indices(fix.len(), &indices).expect("completion indices are in range")
}

/// Solves the node's linear relaxation: minimize θ over the pooled cuts
/// and exclusion rows, with the free coordinates in [0,1] summing to the
/// remaining cardinality. Fixed coordinates are substituted out, so the
/// relaxation always has a strict interior. Returns the node bound and the
/// free-coordinate values.
fn node_relaxation(
    fix: &[u8],
    free: &[usize],
    remaining: usize,
    pool: &Pool,
    settings: &IpmSettings,
) -> Result<(f64, Vec<f64>), UpperLevelError> {
    let m = free.len();
    let mut prog = ConeProgram::new();
    let b_theta = prog.add_block(Cone::NonNeg(1));
    let b_z = prog.add_block(Cone::NonNeg(m));
    let b_u = prog.add_block(Cone::NonNeg(m));
    let b_w = if pool.cuts.is_empty() {
        None
    } else {
        Some(prog.add_block(Cone::NonNeg(pool.cuts.len())))
    };
    let b_e = if pool.bans.is_empty() {
        None
    } else {
        Some(prog.add_block(Cone::NonNeg(pool.bans.len())))
    };
    prog.add_objective(prog.var(b_theta, 0), 1.0);
    for i in 0..m {
        prog.add_row(&[(prog.var(b_z, i), 1.0), (prog.var(b_u, i), 1.0)], 1.0);
    }
    let simplex: Vec<(usize, f64)> = (0..m).map(|i| (prog.var(b_z, i), 1.0)).collect();
    prog.add_row(&simplex, remaining as f64);
    for (j, cut) in pool.cuts.iter().enumerate() {
        // θ ≥ value + gᵀ(z − anchor) with θ = floor + θ₊ and the fixed
        // coordinates of z moved to the right-hand side.
        let mut rhs = cut.value - pool.floor;
        for &i in cut.anchor.indices() {
            rhs -= cut.gradient[i];
        }
        for (i, &f) in fix.iter().enumerate() {
            if f == FIX_ONE {
                rhs += cut.gradient[i];
            }
        }
        let mut terms = vec![
            (prog.var(b_theta, 0), 1.0),
            (prog.var(b_w.expect("cut block exists"), j), -1.0),
        ];
        for (col, &i) in free.iter().enumerate() {
            if cut.gradient[i] != 0.0 {
                terms.push((prog.var(b_z, col), -cut.gradient[i]));
            }
        }
        prog.add_row(&terms, rhs);
    }
    for (j, ban) in pool.bans.iter().enumerate() {
        // Exclude exactly the banned selection: the Hamming distance to it,
        // Σ_{n∉B} z_n + Σ_{n∈B} (1 − z_n), must be at least one.
        let mut rhs = 1.0 - ban.cardinality() as f64;
        let mut terms = vec![(prog.var(b_e.expect("ban block exists"), j), -1.0)];
        for (i, &f) in fix.iter().enumerate() {
            if f == FIX_ONE {
                rhs -= if ban.contains(i) { -1.0 } else { 1.0 };
            }
        }
        for (col, &i) in free.iter().enumerate() {
            let sign = if ban.contains(i) { -1.0 } else { 1.0 };
            terms.push((prog.var(b_z, col), sign));
        }
        prog.add_row(&terms, rhs);
    }
    let sol = conic::solve(&prog, settings)?;
    if sol.status != SolveStatus::Optimal {
        return Err(UpperLevelError::MasterLp { status: sol.status });
    }
    Ok((pool.floor + sol.primal_objective, sol.block(b_z).to_vec()))
}

/// How a candidate selection was valued by the search's driver.
enum Candidate {
    /// The pool itself is the objective; the value is exact.
    Exact(f64),
    /// An evaluation produced the value and possibly grew the pool, either
    /// with a cut or with an exclusion (value infinite).
    Evaluated { value: f64, grew: bool },
}

struct SearchResult {
    incumbent: Option<(Selection, f64)>,
    /// Certified lower bound on the optimum at the moment the search
    /// stopped.
    bound: f64,
    nodes: u64,
    evaluations: usize,
    termination: Termination,
}

/// The shared branch-and-bound core. Minimizes the driver's objective over
/// cardinality-k selections, where integral candidates are priced by
/// `on_candidate`: the master relaxation prices them by the pool itself,
/// the lazy modes by a real evaluation that may append a cut or an
/// exclusion (the node is then requeued against the grown pool instead of
/// being closed).
///
/// Popped node bounds never decrease, so the running lower bound is the
/// last popped bound capped by the fathoming floor; the search stops when
/// it reaches the incumbent minus epsilon, when the tree is exhausted, or
/// when a budget runs out.
#[allow(clippy::too_many_arguments)]
fn tree_search(
    n: usize,
    k: usize,
    pool: &mut Pool,
    epsilon: f64,
    settings: &IpmSettings,
    node_budget: u64,
    deadline: Option<Instant>,
    on_candidate: &mut dyn FnMut(&mut Pool, &Selection) -> Result<Candidate, UpperLevelError>,
    trace: &mut dyn FnMut(&TraceRecord),
) -> Result<SearchResult, UpperLevelError> {
    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    heap.push(Node {
        bound: pool.floor,
        id: 0,
        fix: vec![FIX_FREE; n],
    });
    let mut next_id: u64 = 1;
    let mut incumbent: Option<(Selection, f64)> = None;
    let mut upper = f64::INFINITY;
    // Bounds of subtrees closed by value dominance; together with the open
    // nodes they cover every unexplored selection.
    let mut fathom_floor = f64::INFINITY;
    let mut ledger = pool.floor;
    let mut nodes: u64 = 0;
    let mut evaluations: usize = 0;

    let termination = loop {
        let Some(node) = heap.pop() else {
            ledger = ledger.max(fathom_floor.min(upper));
            break Termination::EpsOptimal;
        };
        ledger = ledger.max(node.bound.min(fathom_floor).min(upper));
        if incumbent.is_some() {
            if node.bound >= upper - epsilon {
                break Termination::EpsOptimal;
            }
            if let Some(d) = deadline {
                if Instant::now() >= d {
                    break Termination::TimeLimit;
                }
            }
        }
        nodes += 1;
        if nodes > node_budget {
            break Termination::IterLimit;
        }

        let free: Vec<usize> = (0..n).filter(|&i| node.fix[i] == FIX_FREE).collect();
        let ones = node.fix.iter().filter(|&&f| f == FIX_ONE).count();
        let remaining = k - ones;

        // A node whose cardinality is already decided is a single point;
        // its exact pool value doubles as the subtree bound.
        let (node_bound, z_free) = if remaining == 0 || remaining == free.len() {
            let sel = lex_completion(&node.fix, k);
            (pool.value(&sel), Vec::new())
        } else {
            node_relaxation(&node.fix, &free, remaining, pool, settings)?
        };

        let candidate: Option<(Selection, f64)> = if z_free.is_empty() {
            Some((lex_completion(&node.fix, k), node_bound))
        } else {
            if incumbent.is_some() && node_bound >= upper - epsilon {
                fathom_floor = fathom_floor.min(node_bound);
                continue;
            }
            let lex = lex_completion(&node.fix, k);
            if pool.value(&lex) <= node_bound + value_slack(node_bound) {
                // The cheapest completion already attains the relaxation
                // value, so it is optimal for the whole subtree.
                Some((lex, node_bound))
            } else if z_free.iter().all(|&v| v.min(1.0 - v) <= INT_TOL) {
                let mut indices: Vec<usize> =
                    (0..n).filter(|&i| node.fix[i] == FIX_ONE).collect();
                indices.extend(
                    free.iter()
                        .zip(&z_free)
                        .filter(|&(_, &v)| v >= 0.5)
                        .map(|(&i, _)| i),
                );
                if indices.len() == k {
                    let sel = Selection::from_indices(n, &indices)
                        .expect("rounded indices are in range");
                    Some((sel, node_bound))
                } else {
                    None
                }
            } else {
                None
            }
        };

        match candidate {
            Some((sel, subtree_bound)) => match on_candidate(pool, &sel)? {
                Candidate::Exact(value) => {
                    if value < upper {
                        upper = value;
                        incumbent = Some((sel, value));
                    }
                    fathom_floor = fathom_floor.min(subtree_bound);
                }
                Candidate::Evaluated { value, grew } => {
                    if value < upper {
                        upper = value;
                        incumbent = Some((sel.clone(), value));
                    }
                    if value.is_finite() {
                        evaluations += 1;
                        trace(&TraceRecord {
                            t: evaluations,
                            lb: ledger.min(upper),
                            ub: upper,
                            pool: pool.len(),
                            anchor: sel.indices().to_vec(),
                        });
                    }
                    if grew {
                        // The pool changed under this node; its subtree is
                        // not settled, so put it back and re-solve its
                        // relaxation against the new constraint later.
                        heap.push(Node {
                            bound: node.bound.max(subtree_bound),
                            id: node.id,
                            fix: node.fix,
                        });
                    } else {
                        fathom_floor = fathom_floor.min(subtree_bound);
                    }
                }
            },
            None => {
                // Branch on the most fractional coordinate, lowest asset
                // index first on ties; explore the zero branch first.
                let (col, _) = z_free
                    .iter()
                    .map(|&v| v.min(1.0 - v))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, frac)| {
                        if frac > best.1 {
                            (i, frac)
                        } else {
                            best
                        }
                    });
                let asset = free[col];
                let child_bound = node.bound.max(node_bound);
                for (order, fix_as) in [FIX_ZERO, FIX_ONE].into_iter().enumerate() {
                    let mut fix = node.fix.clone();
                    fix[asset] = fix_as;
                    heap.push(Node {
                        bound: child_bound,
                        id: next_id + order as u64,
                        fix,
                    });
                }
                next_id += 2;
            }
        }
    };

    Ok(SearchResult {
        incumbent,
        bound: ledger.min(upper),
        nodes,
        evaluations,
        termination,
    })
}

/// Minimizes the pooled-cut surrogate over cardinality-k selections by
/// branch and bound: best-bound node order, most-fractional branching,
/// zero branch first, every tie broken by the lowest id. With an empty
/// pool every selection ties and the lexicographically smallest wins.
///
/// The returned value is the incumbent's exact pool value; its optimality
/// is certified to the relaxation solver's tolerance (about 1e-7 relative).
pub fn solve_master_relaxation(
    n: usize,
    k: usize,
    cuts: &[Cut],
    theta_lb: f64,
) -> Result<(Selection, f64), UpperLevelError> {
    let mut pool = Pool::new(theta_lb);
    pool.cuts = cuts.to_vec();
    let search = master_search(
        n,
        k,
        &mut pool,
        &IpmSettings::default(),
        DEFAULT_NODE_BUDGET,
        None,
    )?;
    match search.termination {
        Termination::EpsOptimal => {
            let (sel, theta) = search
                .incumbent
                .expect("an exhausted search over a nonempty selection set has an incumbent");
            Ok((sel, theta))
        }
        Termination::IterLimit => Err(UpperLevelError::NodeBudget {
            explored: search.nodes,
        }),
        Termination::TimeLimit => unreachable!("the standalone master runs without a deadline"),
    }
}

/// Runs the search core in pure master mode: candidates are priced by the
/// pool itself and never grow it, so the search is an exact solve of the
/// surrogate problem.
fn master_search(
    n: usize,
    k: usize,
    pool: &mut Pool,
    settings: &IpmSettings,
    node_budget: u64,
    deadline: Option<Instant>,
) -> Result<SearchResult, UpperLevelError> {
    let mut price = |pool: &mut Pool, sel: &Selection| -> Result<Candidate, UpperLevelError> {
        Ok(Candidate::Exact(pool.value(sel)))
    };
    tree_search(
        n,
        k,
        pool,
        0.0,
        settings,
        node_budget,
        deadline,
        &mut price,
        &mut |_| {},
    )
}

/// The result of pricing one candidate selection: either its exact value
/// with the cut that certifies it from below, or a proof that the
/// selection admits no feasible portfolio.
pub(crate) enum Priced {
    Feasible { cut: Cut },
    Infeasible,
}

/// What the generic engine hands back to the objective-specific wrappers.
pub(crate) struct EngineOutcome {
    pub(crate) incumbent: Option<Selection>,
    pub(crate) upper: f64,
    pub(crate) lower: f64,
    pub(crate) iterations: usize,
    pub(crate) nodes: u64,
    pub(crate) constraints: usize,
    pub(crate) termination: Termination,
}

/// Run controls shared by the engine entry point.
pub(crate) struct EngineRun<'a> {
    pub(crate) n: usize,
    pub(crate) k: usize,
    pub(crate) floor: f64,
    pub(crate) config: &'a CutPlaneConfig,
    pub(crate) deadline: Option<Instant>,
}

/// Drives the cutting-plane engine in the configured mode over an
/// arbitrary selection objective, supplied as a pricing callback.
pub(crate) fn run_engine(
    run: &EngineRun<'_>,
    price: &mut dyn FnMut(&Selection) -> Result<Priced, UpperLevelError>,
    sink: &mut dyn FnMut(&TraceRecord),
) -> Result<EngineOutcome, UpperLevelError> {
    match run.config.mode {
        MasterMode::Iterative => iterative_engine(run, price, sink),
        MasterMode::SingleTree => single_tree_engine(run, price, sink),
    }
}

/// The literal alternation: master argmin, candidate evaluation, bound
/// update, cut or exclusion. One trace record per feasible iteration.
fn iterative_engine(
    run: &EngineRun<'_>,
    price: &mut dyn FnMut(&Selection) -> Result<Priced, UpperLevelError>,
    sink: &mut dyn FnMut(&TraceRecord),
) -> Result<EngineOutcome, UpperLevelError> {
    let config = run.config;
    let mut pool = Pool::new(run.floor);
    let mut iteration = 0usize;
    let mut nodes = 0u64;
    let mut upper = f64::INFINITY;
    let mut lower = run.floor;
    let mut incumbent: Option<Selection> = None;
    let termination = loop {
        let budget_left = config.node_budget.saturating_sub(nodes);
        if budget_left == 0 {
            break Termination::IterLimit;
        }
        iteration += 1;
        let search = master_search(
            run.n,
            run.k,
            &mut pool,
            &config.ipm,
            budget_left,
            run.deadline,
        )?;
        nodes += search.nodes;
        let Some((z_t, theta_t)) = search.incumbent else {
            break match search.termination {
                Termination::TimeLimit => Termination::TimeLimit,
                _ => Termination::IterLimit,
            };
        };
        if search.termination != Termination::EpsOptimal {
            // The master stopped early, so theta_t certifies nothing;
            // still price its best point to leave a usable incumbent.
            if let Priced::Feasible { cut } = price(&z_t)? {
                if cut.value < upper {
                    upper = cut.value;
                    incumbent = Some(z_t);
                }
            }
            break match search.termination {
                Termination::TimeLimit => Termination::TimeLimit,
                _ => Termination::IterLimit,
            };
        }
        lower = lower.max(theta_t);
        match price(&z_t)? {
            Priced::Feasible { cut } => {
                let f_t = cut.value;
                if f_t < upper {
                    upper = f_t;
                    incumbent = Some(z_t.clone());
                }
                let done = upper - lower <= config.epsilon;
                if !done {
                    debug_assert!(
                        theta_t < f_t,
                        "an unfinished master optimum must lie below the value that cuts it off"
                    );
                    pool.cuts.push(cut);
                }
                sink(&TraceRecord {
                    t: iteration,
                    lb: lower,
                    ub: upper,
                    pool: pool.len(),
                    anchor: z_t.indices().to_vec(),
                });
                if done {
                    break Termination::EpsOptimal;
                }
            }
            Priced::Infeasible => {
                // The master's argmin admits no portfolio; exclude it and
                // re-solve. The bound from this master round still stands.
                pool.bans.push(z_t);
            }
        }
        if let Some(d) = run.deadline {
            if Instant::now() >= d {
                break Termination::TimeLimit;
            }
        }
    };
    Ok(EngineOutcome {
        incumbent,
        upper,
        lower,
        iterations: iteration,
        nodes,
        constraints: pool.len(),
        termination,
    })
}

/// One lazy-constraint branch-and-bound over the selections.
fn single_tree_engine(
    run: &EngineRun<'_>,
    price: &mut dyn FnMut(&Selection) -> Result<Priced, UpperLevelError>,
    sink: &mut dyn FnMut(&TraceRecord),
) -> Result<EngineOutcome, UpperLevelError> {
    let config = run.config;
    let mut pool = Pool::new(run.floor);
    let mut lazy = |pool: &mut Pool, sel: &Selection| -> Result<Candidate, UpperLevelError> {
        match price(sel)? {
            Priced::Feasible { cut } => {
                let value = cut.value;
                let mut grew = false;
                if pool.value(sel) < value - value_slack(value) {
                    pool.cuts.push(cut);
                    grew = true;
                }
                Ok(Candidate::Evaluated { value, grew })
            }
            Priced::Infeasible => {
                let mut grew = false;
                if !pool.bans.iter().any(|b| b == sel) {
                    pool.bans.push(sel.clone());
                    grew = true;
                }
                Ok(Candidate::Evaluated {
                    value: f64::INFINITY,
                    grew,
                })
            }
        }
    };
    let search = tree_search(
        run.n,
        run.k,
        &mut pool,
        config.epsilon,
        &config.ipm,
        config.node_budget,
        run.deadline,
        &mut lazy,
        sink,
    )?;
    let (incumbent, upper) = match search.incumbent {
        Some((sel, value)) => (Some(sel), value),
        None => (None, f64::INFINITY),
    };
    Ok(EngineOutcome {
        incumbent,
        upper,
        lower: search.bound.max(run.floor).min(upper),
        iterations: search.evaluations,
        nodes: search.nodes,
        constraints: pool.len(),
        termination: search.termination,
    })
}

/// Memoized lower-level evaluations: one reduced dual solve, lift, and cut
/// per distinct selection, reused on every revisit.
struct Evaluator<'a> {
    instance: &'a Instance,
    settings: IpmSettings,
    memo: BTreeMap<Selection, Cut>,
}

impl<'a> Evaluator<'a> {
    fn new(instance: &'a Instance, settings: IpmSettings) -> Self {
        Evaluator {
            instance,
            settings,
            memo: BTreeMap::new(),
        }
    }

    fn evaluate(&mut self, z: &Selection) -> Result<Cut, UpperLevelError> {
        if let Some(cut) = self.memo.get(z) {
            return Ok(cut.clone());
        }
        let sol = solve_lower(self.instance, z, &self.settings)?;
        let lifted = lift(self.instance, z, &sol)?;
        let cut = subgradient_cut(self.instance, z, &lifted, sol.f_prime);
        self.memo.insert(z.clone(), cut.clone());
        Ok(cut)
    }
}

/// Minimizes f over all cardinality-k selections to within
/// `config.epsilon`, returning the selection, its recovered portfolio, and
/// the proven gap.
///
/// Iterative mode alternates exact master solves with single lower-level
/// evaluations and cut additions, improving the incumbent only on strict
/// decrease. Single-tree mode runs one branch-and-bound in which integral
/// candidates are evaluated lazily; both modes stop at the same
/// epsilon-certificate and agree in objective to within 2·epsilon. On an
/// expired time budget the incumbent found so far is returned with its
/// recorded gap — at least one candidate is always evaluated first, so a
/// result exists even with a zero time limit.
///
/// When `trace` is given it receives one record per lower-level
/// evaluation.
pub fn cutting_plane_solve(
    instance: &Instance,
    config: &CutPlaneConfig,
    trace: Option<&mut dyn FnMut(&TraceRecord)>,
) -> Result<SolveResult, UpperLevelError> {
    instance.validate().map_err(LowerLevelError::from)?;
    let start = Instant::now();
    let deadline = start.checked_add(config.time_limit);
    let theta_lb = initial_lower_bound(instance, &config.ipm)?;
    let mut evaluator = Evaluator::new(instance, config.ipm);
    let mut sink: Box<dyn FnMut(&TraceRecord)> = match trace {
        Some(f) => Box::new(f),
        None => Box::new(|_| {}),
    };
    let run = EngineRun {
        n: instance.n_assets(),
        k: instance.k,
        floor: theta_lb,
        config,
        deadline,
    };
    let mut price = |sel: &Selection| -> Result<Priced, UpperLevelError> {
        Ok(Priced::Feasible {
            cut: evaluator.evaluate(sel)?,
        })
    };
    let outcome = run_engine(&run, &mut price, &mut sink)?;

    let z_hat = match outcome.incumbent {
        Some(sel) => sel,
        // Reachable only with a degenerate node budget: fall back to the
        // smallest selection so the caller still gets a valid portfolio.
        None => lex_completion(&vec![FIX_FREE; instance.n_assets()], instance.k),
    };
    let objective = evaluator.evaluate(&z_hat)?.value;
    let primal = recover_portfolio(instance, &z_hat, &config.ipm)?;
    debug_assert!(
        (primal.objective - objective).abs() <= 1e-6 * (1.0 + objective.abs()),
        "recovered portfolio value {} drifted from the dual value {}",
        primal.objective,
        objective
    );
    let gap = (outcome.upper.min(objective) - outcome.lower).max(0.0);
    Ok(SolveResult {
        selection: z_hat,
        portfolio: primal.x,
        objective,
        gap,
        iterations: outcome.iterations,
        cuts: outcome.constraints,
        nodes: outcome.nodes,
        wall_time_s: start.elapsed().as_secs_f64(),
        mode: config.mode,
        termination: outcome.termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Moments;
    use crate::numerics::SymMatrix;
    use crate::synthetic::{default_utility, random_instance};

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn walk(
            start: usize,
            n: usize,
            k: usize,
            current: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if current.len() == k {
                out.push(current.clone());
                return;
            }
            for i in start..n {
                current.push(i);
                walk(i + 1, n, k, current, out);
                current.pop();
            }
        }
        walk(0, n, k, &mut current, &mut out);
        out
    }

    fn brute_force(instance: &Instance, settings: &IpmSettings) -> (Selection, f64) {
        let n = instance.n_assets();
        let mut best: Option<(Selection, f64)> = None;
        for indices in combinations(n, instance.k) {
            let sel = Selection::from_indices(n, &indices).unwrap();
            let f = solve_lower(instance, &sel, settings).unwrap().f_prime;
            if best.as_ref().map_or(true, |&(_, v)| f < v) {
                best = Some((sel, f));
            }
        }
        best.unwrap()
    }

    fn symmetric_instance(n: usize, k: usize) -> Instance {
        let moments = Moments::new(
            vec![0.012; n],
            SymMatrix::from_fn(n, |i, j| if i == j { 0.04 } else { 0.0 }),
        )
        .unwrap();
        let utility = default_utility(&moments, 10.0, 3);
        Instance {
            moments,
            ambiguity: crate::model::UncertaintySet {
                kappa1: 1.0,
                kappa2: 4.0,
            },
            utility,
            gamma: 10.0 / (n as f64).sqrt(),
            k,
        }
    }

    #[test]
    fn relaxed_bound_floors_every_selection() {
        let settings = IpmSettings::default();
        for instance in [symmetric_instance(6, 2), random_instance(11, 6, 2, 3)] {
            let theta_lb = initial_lower_bound(&instance, &settings).unwrap();
            for indices in combinations(6, 2) {
                let sel = Selection::from_indices(6, &indices).unwrap();
                let f = solve_lower(&instance, &sel, &settings).unwrap().f_prime;
                assert!(
                    theta_lb <= f + 1e-9,
                    "floor {theta_lb} exceeds f({indices:?}) = {f}"
                );
            }
        }
    }

    #[test]
    fn relaxed_bound_is_exact_without_a_cardinality_constraint() {
        let instance = random_instance(7, 5, 5, 3);
        let settings = IpmSettings::default();
        let theta_lb = initial_lower_bound(&instance, &settings).unwrap();
        let full = solve_lower(&instance, &Selection::all(5), &settings)
            .unwrap()
            .f_prime;
        assert_eq!(theta_lb, full);
    }

    #[test]
    fn empty_pool_master_returns_the_smallest_support() {
        let (sel, theta) = solve_master_relaxation(6, 2, &[], 0.37).unwrap();
        assert_eq!(sel.indices(), &[0, 1]);
        assert_eq!(theta, 0.37);
    }

    #[test]
    fn flat_cut_raises_the_master_value_everywhere() {
        let cut = Cut {
            anchor: Selection::from_indices(5, &[2, 3]).unwrap(),
            value: 1.25,
            gradient: vec![0.0; 5],
        };
        let (sel, theta) = solve_master_relaxation(5, 2, &[cut], 0.3).unwrap();
        assert_eq!(sel.indices(), &[0, 1]);
        assert_eq!(theta, 1.25);
    }

    #[test]
    fn master_agrees_with_enumeration_on_handmade_cuts() {
        let n = 4;
        let k = 2;
        let cuts = vec![
            Cut {
                anchor: Selection::from_indices(n, &[0, 1]).unwrap(),
                value: 0.9,
                gradient: vec![-0.30, -0.05, -0.20, -0.08],
            },
            Cut {
                anchor: Selection::from_indices(n, &[2, 3]).unwrap(),
                value: 0.7,
                gradient: vec![-0.02, -0.25, -0.10, -0.04],
            },
        ];
        let theta_lb = 0.1;
        let mut best_val = f64::INFINITY;
        let mut best_sel = None;
        for indices in combinations(n, k) {
            let sel = Selection::from_indices(n, &indices).unwrap();
            let v = cuts_value(&cuts, theta_lb, &sel);
            if v < best_val {
                best_val = v;
                best_sel = Some(sel);
            }
        }
        let (sel, theta) = solve_master_relaxation(n, k, &cuts, theta_lb).unwrap();
        assert!((theta - best_val).abs() <= 1e-7 * (1.0 + best_val.abs()));
        assert_eq!(sel.indices(), best_sel.unwrap().indices());
    }

    #[test]
    fn master_agrees_with_enumeration_on_seeded_pools() {
        // Deterministic pseudo-random pools over a small universe; the
        // gradients are nonpositive like real cuts.
        let n = 5;
        let k = 2;
        let mut rng_state: u64 = 0x9e3779b97f4a7c15;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..20 {
            let theta_lb = 0.05 + 0.1 * next();
            let n_cuts = 1 + (trial % 4);
            let mut cuts = Vec::new();
            for _ in 0..n_cuts {
                let mut indices = Vec::new();
                while indices.len() < k {
                    let i = (next() * n as f64) as usize % n;
                    if !indices.contains(&i) {
                        indices.push(i);
                    }
                }
                cuts.push(Cut {
                    anchor: Selection::from_indices(n, &indices).unwrap(),
                    value: 0.3 + 0.5 * next(),
                    gradient: (0..n).map(|_| -0.3 * next()).collect(),
                });
            }
            let mut best = f64::INFINITY;
            for indices in combinations(n, k) {
                let sel = Selection::from_indices(n, &indices).unwrap();
                best = best.min(cuts_value(&cuts, theta_lb, &sel));
            }
            let (_, theta) = solve_master_relaxation(n, k, &cuts, theta_lb).unwrap();
            assert!(
                (theta - best).abs() <= 1e-6 * (1.0 + best.abs()),
                "trial {trial}: master {theta} vs enumeration {best}"
            );
        }
    }

    #[test]
    fn banned_selections_are_skipped_by_the_master() {
        // Ban the two cheapest selections of a flat pool; the master must
        // land on the third-smallest support.
        let mut pool = Pool::new(0.5);
        pool.bans.push(Selection::from_indices(4, &[0, 1]).unwrap());
        pool.bans.push(Selection::from_indices(4, &[0, 2]).unwrap());
        let search =
            master_search(4, 2, &mut pool, &IpmSettings::default(), 10_000, None).unwrap();
        let (sel, theta) = search.incumbent.unwrap();
        assert_eq!(sel.indices(), &[0, 3]);
        assert_eq!(theta, 0.5);
    }

    #[test]
    fn single_tree_matches_brute_force() {
        let instance = random_instance(3, 7, 2, 3);
        let settings = IpmSettings::default();
        let (best_sel, best_val) = brute_force(&instance, &settings);
        let config = CutPlaneConfig::default();
        let result = cutting_plane_solve(&instance, &config, None).unwrap();
        assert!(
            (result.objective - best_val).abs() <= config.epsilon,
            "solver {} vs enumeration {}",
            result.objective,
            best_val
        );
        assert_eq!(result.selection.indices(), best_sel.indices());
        assert_eq!(result.termination, Termination::EpsOptimal);
        assert!(result.gap <= config.epsilon + 1e-9);
        assert!(result.cuts <= 21);
        let relaxed = initial_lower_bound(&instance, &settings).unwrap();
        assert!(relaxed <= result.objective + 1e-9);
    }

    #[test]
    fn iterative_matches_brute_force_and_single_tree() {
        let instance = random_instance(17, 6, 3, 3);
        let settings = IpmSettings::default();
        let (_, best_val) = brute_force(&instance, &settings);
        let iterative = CutPlaneConfig {
            mode: MasterMode::Iterative,
            ..CutPlaneConfig::default()
        };
        let single = CutPlaneConfig::default();
        let a = cutting_plane_solve(&instance, &iterative, None).unwrap();
        let b = cutting_plane_solve(&instance, &single, None).unwrap();
        assert!((a.objective - best_val).abs() <= iterative.epsilon);
        assert!((a.objective - b.objective).abs() <= 2.0 * iterative.epsilon);
        assert_eq!(a.mode, MasterMode::Iterative);
        assert_eq!(b.mode, MasterMode::SingleTree);
    }

    #[test]
    fn selecting_everything_terminates_in_one_iteration() {
        let instance = random_instance(5, 5, 5, 3);
        let config = CutPlaneConfig {
            mode: MasterMode::Iterative,
            ..CutPlaneConfig::default()
        };
        let result = cutting_plane_solve(&instance, &config, None).unwrap();
        assert_eq!(result.iterations, 1);
        assert_eq!(result.selection.indices(), Selection::all(5).indices());
        assert_eq!(result.termination, Termination::EpsOptimal);
        assert!(result.gap <= config.epsilon);
    }

    #[test]
    fn objective_never_worsens_as_the_cardinality_grows() {
        let mut previous = f64::INFINITY;
        for k in 1..=4 {
            let instance = random_instance(23, 6, k, 3);
            let result = cutting_plane_solve(&instance, &CutPlaneConfig::default(), None).unwrap();
            assert!(
                result.objective <= previous + 1e-6,
                "k={k}: {} above {}",
                result.objective,
                previous
            );
            previous = result.objective;
        }
    }

    #[test]
    fn trace_ledgers_are_monotone_and_end_within_epsilon() {
        let instance = random_instance(29, 6, 2, 3);
        for mode in [MasterMode::Iterative, MasterMode::SingleTree] {
            let config = CutPlaneConfig {
                mode,
                ..CutPlaneConfig::default()
            };
            let mut records: Vec<TraceRecord> = Vec::new();
            let mut sink = |r: &TraceRecord| records.push(r.clone());
            let result = cutting_plane_solve(&instance, &config, Some(&mut sink)).unwrap();
            assert!(!records.is_empty());
            // The lower ledger may dip by relaxation-solver dust when a new
            // incumbent lands within tolerance of the certified bound.
            for pair in records.windows(2) {
                assert!(pair[1].lb >= pair[0].lb - 1e-7, "{mode}: lb regressed");
                assert!(pair[1].ub <= pair[0].ub + 1e-12, "{mode}: ub regressed");
                assert!(pair[1].t == pair[0].t + 1);
                assert!(pair[1].pool >= pair[0].pool);
            }
            for r in &records {
                assert!(r.lb <= r.ub + 1e-12);
                assert_eq!(r.anchor.len(), instance.k);
            }
            let last = records.last().unwrap();
            if result.termination == Termination::EpsOptimal {
                assert!(result.gap <= config.epsilon + 1e-9);
                assert!(
                    last.ub - last.lb <= config.epsilon + 1e-9
                        || mode == MasterMode::SingleTree
                );
            }
            records.clear();
        }
    }

    #[test]
    fn zero_time_limit_still_returns_an_incumbent() {
        let instance = random_instance(31, 6, 2, 3);
        let config = CutPlaneConfig {
            time_limit: Duration::ZERO,
            ..CutPlaneConfig::default()
        };
        let result = cutting_plane_solve(&instance, &config, None).unwrap();
        assert_eq!(result.termination, Termination::TimeLimit);
        assert_eq!(result.selection.cardinality(), 2);
        assert!(result.gap >= 0.0);
        assert!(result.objective.is_finite());
    }

    #[test]
    fn recovered_portfolio_value_matches_the_reported_objective() {
        let instance = random_instance(37, 6, 3, 3);
        let config = CutPlaneConfig::default();
        let result = cutting_plane_solve(&instance, &config, None).unwrap();
        let primal = recover_portfolio(&instance, &result.selection, &config.ipm).unwrap();
        assert!(
            (primal.objective - result.objective).abs() <= 1e-6 * (1.0 + result.objective.abs())
        );
        let weight_sum: f64 = primal.x.weights().iter().sum();
        assert!((weight_sum - 1.0).abs() <= 1e-7);
    }
}
