//! Scenario-tree stochastic MPC for a following CAV.
//!
//! Each control step builds a scenario tree over leader accelerations,
//! condenses the tree dynamics into a dense prediction in the shared control
//! sequence, and solves the resulting QP in `[U; Z]`, where `Z` holds the
//! hinge slacks of the probability-weighted headway-violation penalty.
//! The baseline controller runs the same pipeline on a deterministic chain
//! that holds the measured leader acceleration constant.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector5};
use serde::{Deserialize, Serialize};

use crate::driver::{
    AccelBounds, ConstantAccel, Discretization, DriverParams, LeadPredictor, StochasticDriver, MAX_BRANCHING,
};
use crate::dynamics::{
    ControlInput, InputMatrixForm, ModelMatrices, State, DISTURBANCE_DIM, GAP_ERR_PRED_INDEX,
    STATE_DIM,
};
use crate::error::{Error, Result};
use crate::qp::{solve_qp_from, QpOptions, QpProblem, QpStatus};
use crate::tree::{build_tree, LeadEnv, PredecessorForecast, ScenarioTree, TreeConfig};

/// Curvature added to decision variables the cost leaves flat.
pub const FLAT_DIRECTION_REGULARIZATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    #[serde(rename = "Q_diag")]
    pub q_diag: [f64; STATE_DIM],
    pub r_u: f64,
    #[serde(rename = "M")]
    pub big_m: f64,
    pub e_r: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub z_max: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            q_diag: [15.0, 10.0, 15.0, 10.0, 1.0],
            r_u: 2.0,
            big_m: 1000.0,
            e_r: 2.0,
            a_min: -5.0,
            a_max: 3.0,
            z_max: 100.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if self.q_diag.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::param("Q_diag", "weights must be nonnegative"));
        }
        if !(self.r_u >= 0.0) {
            return Err(Error::param("r_u", "must be nonnegative"));
        }
        if !(self.big_m > 0.0) {
            return Err(Error::param("M", "must be positive"));
        }
        if !(self.e_r > 0.0) {
            return Err(Error::param("e_r", "must be positive"));
        }
        if !(self.a_min < self.a_max) {
            return Err(Error::param("a_min", "must be below a_max"));
        }
        if !(self.z_max > 0.0) {
            return Err(Error::param("z_max", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    #[default]
    StochasticDriver,
    ConstantAccel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Sdhl,
    Baseline,
}

impl ControllerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::Sdhl => "sdhl",
            ControllerKind::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdhl" => Ok(ControllerKind::Sdhl),
            "baseline" => Ok(ControllerKind::Baseline),
            other => Err(Error::InvalidInput(format!("unknown controller `{other}`"))),
        }
    }
}

/// Controller configuration; serialized as a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub n_max: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub m: usize,
    pub dt: f64,
    pub tau_a: f64,
    #[serde(flatten)]
    pub weights: CostWeights,
    pub driver_params: DriverParams,
    pub predictor: PredictorKind,
    pub discretization: Discretization,
    pub input_matrix: InputMatrixForm,
    pub qp: QpOptions,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            n_max: 50,
            horizon: 10,
            m: 3,
            dt: 0.1,
            tau_a: 0.4,
            weights: CostWeights::default(),
            driver_params: DriverParams::default(),
            predictor: PredictorKind::default(),
            discretization: Discretization::default(),
            input_matrix: InputMatrixForm::default(),
            qp: QpOptions::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.driver_params.validate()?;
        self.tree_config().validate()?;
        if self.m == 0 || self.m > MAX_BRANCHING {
            return Err(Error::param("m", format!("must be in 1..={MAX_BRANCHING}")));
        }
        if !(self.tau_a > 0.0) {
            return Err(Error::param("tau_a", "must be positive"));
        }
        Ok(())
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            n_max: self.n_max,
            horizon: self.horizon,
            dt: self.dt,
        }
    }

    pub fn model(&self) -> Result<ModelMatrices> {
        ModelMatrices::with_input_form(self.dt, self.tau_a, self.input_matrix)
    }

    pub fn bounds(&self) -> AccelBounds {
        AccelBounds {
            min: self.weights.a_min,
            max: self.weights.a_max,
        }
    }

    pub fn predictor(&self) -> Result<Box<dyn LeadPredictor + Send + Sync>> {
        Ok(match self.predictor {
            PredictorKind::StochasticDriver => Box::new(StochasticDriver::with_scheme(
                self.driver_params,
                self.m,
                self.discretization,
                self.dt,
                self.bounds(),
            )?),
            PredictorKind::ConstantAccel => Box::new(ConstantAccel),
        })
    }
}

/// Tree dynamics condensed onto the initial state, the shared control
/// sequence and the stacked disturbances of the non-leaf nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedSystem {
    pub abar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    pub cbar: DMatrix<f64>,
    pub abar_r: DMatrix<f64>,
    pub bbar_r: DMatrix<f64>,
    pub cbar_r: DMatrix<f64>,
    /// Row block `i` belongs to node `node_order[i]` (all non-root nodes).
    pub node_order: Vec<usize>,
    /// Disturbance block `j` belongs to node `nonleaf_order[j]`.
    pub nonleaf_order: Vec<usize>,
    pub w: DVector<f64>,
    pub horizon: usize,
}

impl CondensedSystem {
    pub fn n_nonroot(&self) -> usize {
        self.node_order.len()
    }

    /// Stacked node states for the given controls and disturbances.
    pub fn predict(&self, x0: &State, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.abar * x0.to_vector() + &self.bbar * u + &self.cbar * w
    }
}

pub fn condense(tree: &ScenarioTree, model: &ModelMatrices, horizon: usize) -> Result<CondensedSystem> {
    tree.check()?;
    if tree.max_depth() > horizon {
        return Err(Error::Structural(format!(
            "tree depth {} exceeds horizon {horizon}",
            tree.max_depth()
        )));
    }
    let node_order: Vec<usize> = (1..tree.len()).collect();
    let nonleaf_order = tree.non_leaves();
    let mut w_index = vec![usize::MAX; tree.len()];
    for (j, &id) in nonleaf_order.iter().enumerate() {
        w_index[id] = j;
    }
    let n_nr = node_order.len();
    let n_nl = nonleaf_order.len();

    let mut a_pow = vec![nalgebra::Matrix5::<f64>::identity()];
    for d in 1..=horizon {
        a_pow.push(model.a * a_pow[d - 1]);
    }

    let rows = STATE_DIM * n_nr;
    let mut abar = DMatrix::zeros(rows, STATE_DIM);
    let mut bbar = DMatrix::zeros(rows, horizon);
    let mut cbar = DMatrix::zeros(rows, DISTURBANCE_DIM * n_nl);
    for (blk, &id) in node_order.iter().enumerate() {
        let path = tree.path_to(id);
        let depth = path.len() - 1;
        let r0 = blk * STATE_DIM;
        abar.view_mut((r0, 0), (STATE_DIM, STATE_DIM)).copy_from(&a_pow[depth]);
        for (j, &anc) in path[..depth].iter().enumerate() {
            let power = &a_pow[depth - 1 - j];
            bbar.view_mut((r0, j), (STATE_DIM, 1)).copy_from(&(power * model.b));
            let c0 = DISTURBANCE_DIM * w_index[anc];
            cbar.view_mut((r0, c0), (STATE_DIM, DISTURBANCE_DIM)).copy_from(&(power * model.c));
        }
    }

    let mut w = DVector::zeros(DISTURBANCE_DIM * n_nl);
    for (j, &id) in nonleaf_order.iter().enumerate() {
        let d = tree.nodes[id].disturbance;
        w[2 * j] = d.a_leader;
        w[2 * j + 1] = d.a_pred;
    }

    let pick = |m: &DMatrix<f64>| {
        DMatrix::from_fn(n_nr, m.ncols(), |i, c| m[(i * STATE_DIM + GAP_ERR_PRED_INDEX, c)])
    };
    Ok(CondensedSystem {
        abar_r: pick(&abar),
        bbar_r: pick(&bbar),
        cbar_r: pick(&cbar),
        abar,
        bbar,
        cbar,
        node_order,
        nonleaf_order,
        w,
        horizon,
    })
}

/// Condensed QP in the decision vector `[U; Z]`:
/// `min ½ uᵀHu + fᵀu + D  s.t.  P u ≤ G,  lb ≤ u ≤ ub`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSpec {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub d: f64,
    pub p: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// Diagonal of the per-node state weight (length 5·N_nr).
    pub q_bar: DVector<f64>,
    /// Per-step control weight (length N).
    pub r_bar: DVector<f64>,
    /// Per-node hinge weight (length N_nr).
    pub m_bar: DVector<f64>,
    pub horizon: usize,
}

impl QpSpec {
    pub fn n_controls(&self) -> usize {
        self.horizon
    }

    pub fn n_slacks(&self) -> usize {
        self.m_bar.len()
    }

    /// Solver-ready problem. Flat directions (the slack block and any control
    /// step no node depends on) get a tiny curvature so the Hessian is
    /// positive definite.
    pub fn to_problem(&self) -> QpProblem {
        let mut h = self.h.clone();
        for i in 0..h.nrows() {
            if i >= self.horizon || h[(i, i)] == 0.0 {
                h[(i, i)] += FLAT_DIRECTION_REGULARIZATION;
            }
        }
        QpProblem {
            h,
            f: self.f.clone(),
            a_ineq: self.p.clone(),
            b_ineq: self.g.clone(),
            lb: self.lb.clone(),
            ub: self.ub.clone(),
        }
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.f.dot(u) + self.d
    }

    /// A feasible point: the given controls clipped to bounds and the
    /// tightest slacks.
    pub fn feasible_point(&self, controls: &[f64]) -> DVector<f64> {
        let n = self.horizon;
        let mut x = DVector::zeros(self.h.nrows());
        for i in 0..n {
            x[i] = controls.get(i).copied().unwrap_or(0.0).clamp(self.lb[i], self.ub[i]);
        }
        for i in 0..self.n_slacks() {
            let y: f64 = (0..n).map(|j| self.p[(i, j)] * x[j]).sum::<f64>() - self.g[i];
            x[n + i] = y.max(0.0).clamp(self.lb[n + i], self.ub[n + i]);
        }
        x
    }
}

pub fn assemble_qp(
    cs: &CondensedSystem,
    tree: &ScenarioTree,
    weights: &CostWeights,
    x0: &State,
) -> Result<QpSpec> {
    let n = cs.horizon;
    let n_nr = cs.n_nonroot();
    if n_nr + 1 != tree.len() || cs.bbar.ncols() != n || cs.abar.nrows() != STATE_DIM * n_nr {
        return Err(Error::Structural("condensed system does not match the tree".into()));
    }

    let mut q_bar = DVector::zeros(STATE_DIM * n_nr);
    let mut m_bar = DVector::zeros(n_nr);
    for (blk, &id) in cs.node_order.iter().enumerate() {
        let pi = tree.nodes[id].pi;
        for s in 0..STATE_DIM {
            q_bar[blk * STATE_DIM + s] = pi * weights.q_diag[s];
        }
        m_bar[blk] = weights.big_m * pi;
    }
    // controls are shared per depth, so each step carries the summed
    // probability of the non-leaf nodes at that depth
    let mut r_bar = DVector::zeros(n);
    for &id in &cs.nonleaf_order {
        let node = &tree.nodes[id];
        if node.depth < n {
            r_bar[node.depth] += node.pi * weights.r_u;
        }
    }

    let x0v: Vector5<f64> = x0.to_vector();
    let free = &cs.abar * x0v + &cs.cbar * &cs.w;
    let qb = DMatrix::from_fn(q_bar.len(), n, |r, c| q_bar[r] * cs.bbar[(r, c)]);
    let qc = free.component_mul(&q_bar);

    let dim = n + n_nr;
    let mut h = DMatrix::zeros(dim, dim);
    let huu = (cs.bbar.tr_mul(&qb) + DMatrix::from_diagonal(&r_bar)) * 2.0;
    // symmetrize away rounding
    let huu = (&huu + huu.transpose()) * 0.5;
    h.view_mut((0, 0), (n, n)).copy_from(&huu);

    let mut f = DVector::zeros(dim);
    f.rows_mut(0, n).copy_from(&(cs.bbar.tr_mul(&qc) * 2.0));
    f.rows_mut(n, n_nr).copy_from(&m_bar);
    let d = free.dot(&qc);

    let mut p = DMatrix::zeros(n_nr, dim);
    p.view_mut((0, 0), (n_nr, n)).copy_from(&cs.bbar_r);
    for i in 0..n_nr {
        p[(i, n + i)] = -1.0;
    }
    let g = DVector::from_element(n_nr, weights.e_r) - &cs.abar_r * x0v - &cs.cbar_r * &cs.w;

    let lb = DVector::from_fn(dim, |i, _| if i < n { weights.a_min } else { 0.0 });
    let ub = DVector::from_fn(dim, |i, _| if i < n { weights.a_max } else { weights.z_max });

    Ok(QpSpec {
        h,
        f,
        d,
        p,
        g,
        lb,
        ub,
        q_bar,
        r_bar,
        m_bar,
        horizon: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub u0: ControlInput,
    /// Full optimal control sequence (length N).
    pub plan: Vec<f64>,
    /// Ego acceleration forecast implied by the plan, for depths 1..=N.
    pub accel_forecast: Vec<f64>,
    pub tree: ScenarioTree,
    pub qp_iterations: usize,
    pub qp_status: QpStatus,
    /// Wall time of tree construction, condensation and solve (s).
    pub solve_time: f64,
    /// Optimal cost including the constant term.
    pub cost: f64,
    /// Set when the solver failed and the previous command was held.
    pub fallback: bool,
}

/// A stateful follower controller: remembers the last applied command for
/// the solver-failure fallback.
pub struct Controller {
    kind: ControllerKind,
    cfg: ControllerConfig,
    model: ModelMatrices,
    predictor: Box<dyn LeadPredictor + Send + Sync>,
    prev_command: f64,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("kind", &self.kind)
            .field("cfg", &self.cfg)
            .field("prev_command", &self.prev_command)
            .finish()
    }
}

impl Controller {
    pub fn new(kind: ControllerKind, cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Controller {
            kind,
            model: cfg.model()?,
            predictor: cfg.predictor()?,
            cfg,
            prev_command: 0.0,
        })
    }

    pub fn kind(&self) -> ControllerKind {
        self.kind
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn build_tree(&self, env: &LeadEnv, forecast: &PredecessorForecast) -> Result<ScenarioTree> {
        match self.kind {
            ControllerKind::Sdhl => {
                build_tree(env, &self.cfg.tree_config(), self.predictor.as_ref(), forecast)
            }
            ControllerKind::Baseline => Ok(ScenarioTree::chain(env, self.cfg.horizon, forecast)),
        }
    }

    pub fn step(
        &mut self,
        x0: &State,
        env: &LeadEnv,
        forecast: &PredecessorForecast,
    ) -> Result<StepOutcome> {
        let started = Instant::now();
        let tree = self.build_tree(env, forecast)?;
        let cs = condense(&tree, &self.model, self.cfg.horizon)?;
        let spec = assemble_qp(&cs, &tree, &self.cfg.weights, x0)?;
        let problem = spec.to_problem();
        let start = spec.feasible_point(&[]);
        let res = solve_qp_from(&problem, Some(&start), &self.cfg.qp)?;
        let solve_time = started.elapsed().as_secs_f64();

        let w = &self.cfg.weights;
        let n = self.cfg.horizon;
        let (u0, plan, fallback) = if res.is_optimal() {
            let plan: Vec<f64> = res.x.rows(0, n).iter().map(|u| u.clamp(w.a_min, w.a_max)).collect();
            (plan[0], plan, false)
        } else {
            (self.prev_command, vec![self.prev_command; n], true)
        };
        self.prev_command = u0;

        let lag = self.cfg.dt / self.cfg.tau_a;
        let mut a = x0.accel;
        let accel_forecast = plan
            .iter()
            .map(|u| {
                a += lag * (u - a);
                a
            })
            .collect();

        Ok(StepOutcome {
            u0: ControlInput { u_a: u0 },
            plan,
            accel_forecast,
            tree,
            qp_iterations: res.iterations,
            qp_status: res.status,
            solve_time,
            cost: spec.objective(&res.x),
            fallback,
        })
    }
}

/// One stateless stochastic MPC step.
pub fn solve_step(
    x0: &State,
    env: &LeadEnv,
    forecast: &PredecessorForecast,
    cfg: &ControllerConfig,
) -> Result<StepOutcome> {
    Controller::new(ControllerKind::Sdhl, cfg.clone())?.step(x0, env, forecast)
}

/// One stateless baseline step (constant leader acceleration over the horizon).
pub fn baseline_step(
    x0: &State,
    env: &LeadEnv,
    forecast: &PredecessorForecast,
    cfg: &ControllerConfig,
) -> Result<StepOutcome> {
    Controller::new(ControllerKind::Baseline, cfg.clone())?.step(x0, env, forecast)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env0() -> LeadEnv {
        LeadEnv {
            v_lead: 17.0,
            headway: crate::driver::equilibrium_headway(17.0, &DriverParams::default()).unwrap(),
            a_lead: 0.0,
            a_pred: 0.0,
            v_front: 17.0,
        }
    }

    #[test]
    fn config_json_is_flat() {
        let cfg = ControllerConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        for key in ["n_max", "N", "m", "dt", "tau_a", "Q_diag", "r_u", "M", "e_r", "a_min", "a_max", "z_max", "driver_params"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: ControllerConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, cfg);
        let partial: ControllerConfig = serde_json::from_str(r#"{"n_max": 20, "M": 50}"#).unwrap();
        assert_eq!(partial.n_max, 20);
        assert_eq!(partial.weights.big_m, 50.0);
        assert_eq!(partial.horizon, 10);
    }

    #[test]
    fn single_step_chain_condenses_to_model() {
        let m = ModelMatrices::new(0.1, 0.4).unwrap();
        let tree = ScenarioTree::chain(&env0(), 1, &PredecessorForecast::Leader);
        let cs = condense(&tree, &m, 1).unwrap();
        assert_eq!(cs.abar, DMatrix::from_column_slice(5, 5, m.a.as_slice()));
        assert_eq!(cs.bbar, DMatrix::from_column_slice(5, 1, m.b.as_slice()));
        assert_eq!(cs.cbar, DMatrix::from_column_slice(5, 2, m.c.as_slice()));
    }

    #[test]
    fn chain_input_matrix_is_block_lower_triangular() {
        let m = ModelMatrices::new(0.1, 0.4).unwrap();
        let tree = ScenarioTree::chain(&env0(), 3, &PredecessorForecast::Leader);
        let cs = condense(&tree, &m, 3).unwrap();
        let blk = |r: usize, c: usize| cs.bbar.view((5 * r, c), (5, 1)).into_owned();
        let b = DMatrix::from_column_slice(5, 1, m.b.as_slice());
        let a = DMatrix::from_column_slice(5, 5, m.a.as_slice());
        assert_eq!(blk(0, 0), b);
        assert_eq!(blk(0, 1), DMatrix::zeros(5, 1));
        assert_eq!(blk(1, 0), &a * &b);
        assert_eq!(blk(1, 1), b);
        assert!((blk(2, 0) - &a * &a * &b).amax() < 1e-15);
        assert_eq!(blk(2, 2), b);
        assert_eq!(blk(0, 2), DMatrix::zeros(5, 1));
    }

    #[test]
    fn too_deep_tree_is_rejected() {
        let m = ModelMatrices::new(0.1, 0.4).unwrap();
        let tree = ScenarioTree::chain(&env0(), 4, &PredecessorForecast::Leader);
        assert!(matches!(condense(&tree, &m, 3), Err(Error::Structural(_))));
    }

    #[test]
    fn origin_is_optimal_without_excitation() {
        let cfg = ControllerConfig::default();
        let m = cfg.model().unwrap();
        let tree = ScenarioTree::chain(&env0(), cfg.horizon, &PredecessorForecast::Leader);
        let cs = condense(&tree, &m, cfg.horizon).unwrap();
        let w = CostWeights { big_m: 1e-12, ..cfg.weights };
        let spec = assemble_qp(&cs, &tree, &w, &State::ZERO).unwrap();
        assert!(spec.f.rows(0, cfg.horizon).amax() == 0.0);
        assert_eq!(spec.d, 0.0);
    }

    #[test]
    fn equilibrium_gives_zero_command() {
        let mut cfg = ControllerConfig::default();
        cfg.driver_params.sigma0 = 0.0;
        for out in [
            solve_step(&State::ZERO, &env0(), &PredecessorForecast::Leader, &cfg).unwrap(),
            baseline_step(&State::ZERO, &env0(), &PredecessorForecast::Leader, &cfg).unwrap(),
        ] {
            assert_eq!(out.qp_status, QpStatus::Optimal);
            assert!(out.u0.u_a.abs() < 1e-6, "{}", out.u0.u_a);
        }
    }

    #[test]
    fn too_close_brakes_and_activates_hinge() {
        let cfg = ControllerConfig::default();
        let x0 = State {
            gap_err_pred: 5.0,
            gap_err_leader: 5.0,
            ..State::ZERO
        };
        let out = solve_step(&x0, &env0(), &PredecessorForecast::Leader, &cfg).unwrap();
        assert!(out.u0.u_a < 0.0);
        let m = cfg.model().unwrap();
        let cs = condense(&out.tree, &m, cfg.horizon).unwrap();
        let spec = assemble_qp(&cs, &out.tree, &cfg.weights, &x0).unwrap();
        let res = crate::qp::solve_qp(&spec.to_problem(), &cfg.qp).unwrap();
        let z = res.x.rows(cfg.horizon, spec.n_slacks());
        assert!(z.max() > 0.0, "{:?} {} {}", res.status, res.x, out.u0.u_a);
    }

    #[test]
    fn baseline_brakes_for_sustained_deceleration() {
        let cfg = ControllerConfig::default();
        let env = LeadEnv {
            a_lead: -3.0,
            a_pred: -3.0,
            ..env0()
        };
        let out = baseline_step(&State::ZERO, &env, &PredecessorForecast::Leader, &cfg).unwrap();
        assert!(out.u0.u_a < 0.0);
        assert_eq!(out.tree.len(), cfg.horizon + 1);
    }

    #[test]
    fn fallback_holds_previous_command() {
        let mut cfg = ControllerConfig::default();
        cfg.qp.max_iter = 1;
        let mut c = Controller::new(ControllerKind::Sdhl, cfg).unwrap();
        let x0 = State {
            gap_err_pred: 6.0,
            gap_err_leader: 6.0,
            dv_pred: -2.0,
            ..State::ZERO
        };
        let out = c.step(&x0, &env0(), &PredecessorForecast::Leader).unwrap();
        assert!(out.fallback);
        assert_eq!(out.u0.u_a, 0.0);
    }
}
