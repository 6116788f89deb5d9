//! Independent reference implementations for cross-checking the controller stack.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use platoon_core::driver::{AccelBounds, DriverParams, LeadObservation, LeadPredictor, StochasticDriver};
use platoon_core::dynamics::{Disturbance, ModelMatrices, State};
use platoon_core::qp::QpProblem;
use platoon_core::tree::{LeadEnv, PredecessorForecast, ScenarioTree, TreeConfig};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleNode {
    pub parent: Option<usize>,
    pub depth: usize,
    pub pi: f64,
    pub a_lead: f64,
    pub a_pred: f64,
    v: f64,
    s: f64,
}

struct Pending {
    pi: f64,
    depth: usize,
    seq: usize,
    parent: usize,
    a: f64,
}

impl PartialEq for Pending {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Pending {
    fn cmp(&self, o: &Self) -> Ordering {
        self.pi
            .total_cmp(&o.pi)
            .then(Reverse(self.depth).cmp(&Reverse(o.depth)))
            .then(Reverse(self.seq).cmp(&Reverse(o.seq)))
    }
}

fn forecast_at(f: &PredecessorForecast, depth: usize, measured: f64, a_lead: f64) -> f64 {
    match f {
        PredecessorForecast::Leader => a_lead,
        PredecessorForecast::Planned(seq) if depth == 0 || seq.is_empty() => measured,
        PredecessorForecast::Planned(seq) => *seq.get(depth - 1).unwrap_or(seq.last().unwrap()),
    }
}

/// Best-first expansion with a binary heap: most probable frontier node first,
/// ties broken by depth, then by discovery order.
pub fn heap_tree(
    env: &LeadEnv,
    n_max: usize,
    horizon: usize,
    dt: f64,
    predictor: &dyn LeadPredictor,
    forecast: &PredecessorForecast,
) -> Vec<OracleNode> {
    let mut out = vec![OracleNode {
        parent: None,
        depth: 0,
        pi: 1.0,
        a_lead: env.a_lead,
        a_pred: forecast_at(forecast, 0, env.a_pred, env.a_lead),
        v: env.v_lead,
        s: env.headway,
    }];
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut push_children = |id: usize, nodes: &[OracleNode], heap: &mut BinaryHeap<Pending>| {
        let n = &nodes[id];
        if n.depth >= horizon {
            return;
        }
        let d = predictor.predict(&LeadObservation {
            v_lead: n.v,
            headway: n.s,
            accel: n.a_lead,
        });
        for (a, p) in d.values.iter().zip(&d.probs) {
            heap.push(Pending {
                pi: n.pi * p,
                depth: n.depth + 1,
                seq,
                parent: id,
                a: *a,
            });
            seq += 1;
        }
    };
    push_children(0, &out, &mut heap);
    while out.len() < n_max {
        let Some(c) = heap.pop() else { break };
        let par = out[c.parent].clone();
        out.push(OracleNode {
            parent: Some(c.parent),
            depth: c.depth,
            pi: c.pi,
            a_lead: c.a,
            a_pred: forecast_at(forecast, c.depth, env.a_pred, c.a),
            v: (par.v + par.a_lead * dt).max(0.0),
            s: (par.s + (env.v_front - par.v) * dt).max(0.0),
        });
        push_children(out.len() - 1, &out, &mut heap);
    }
    out
}

/// Per-node states by stepping the model along each node's parent.
pub fn rollout(
    tree: &ScenarioTree,
    model: &ModelMatrices,
    x0: &State,
    u: &[f64],
    w: &HashMap<usize, Disturbance>,
) -> Vec<Vector5<f64>> {
    let a: Matrix5<f64> = model.a;
    let mut xs = vec![Vector5::zeros(); tree.len()];
    xs[0] = x0.to_vector();
    // parents always precede children
    for node in &tree.nodes[1..] {
        let p = node.parent.unwrap();
        let pd = tree.nodes[p].depth;
        xs[node.id] = a * xs[p] + model.b * u[pd] + model.c * w[&p].to_vector();
    }
    xs
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Lower bound on a strictly convex QP's optimum from an accelerated
/// projected-gradient ascent on its Lagrange dual. Box bounds are dualized
/// together with the general rows.
pub struct DualBound {
    pub value: f64,
    pub x: DVector<f64>,
    pub iterations: usize,
}

pub fn dual_projected_gradient(p: &QpProblem, max_iter: usize) -> DualBound {
    let n = p.h.nrows();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..p.a_ineq.nrows() {
        rows.push(p.a_ineq.row(i).transpose());
        rhs.push(p.b_ineq[i]);
    }
    for i in 0..n {
        if p.ub[i].is_finite() {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            rows.push(e);
            rhs.push(p.ub[i]);
        }
        if p.lb[i].is_finite() {
            let mut e = DVector::zeros(n);
            e[i] = -1.0;
            rows.push(e);
            rhs.push(-p.lb[i]);
        }
    }
    let m = rows.len();
    let g = DMatrix::from_fn(m, n, |r, c| rows[r][c]);
    let h = DVector::from_vec(rhs);
    let chol = p.h.clone().cholesky().expect("oracle needs a positive definite Hessian");
    let hinv = chol.inverse();
    // dual: maximize q(l) = -1/2 l'Kl - c'l - k0 over l >= 0
    let k = &g * &hinv * g.transpose();
    let hinv_f = &hinv * &p.f;
    let c = &g * &hinv_f + &h;
    let k0 = 0.5 * p.f.dot(&hinv_f);
    let q = |l: &DVector<f64>| -0.5 * l.dot(&(&k * l)) - c.dot(l) - k0;

    let lip = k.symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / lip;
    let mut l = DVector::zeros(m);
    let mut y = l.clone();
    let mut t = 1.0f64;
    let mut best = q(&l);
    let mut stall = 0;
    let mut restarted = false;
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let grad = -(&k * &y) - &c;
        let next = (&y + grad * step).map(|v| v.max(0.0));
        let val = q(&next);
        if val < best {
            if restarted {
                // a plain gradient step no longer improves: converged to rounding
                break;
            }
            // adaptive restart
            restarted = true;
            t = 1.0;
            y = l.clone();
            continue;
        }
        restarted = false;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &l) * ((t - 1.0) / t_next);
        t = t_next;
        let gain = val - best;
        l = next;
        best = val;
        if gain <= 1e-16 * best.abs().max(1.0) {
            stall += 1;
            if stall > 2000 {
                break;
            }
        } else {
            stall = 0;
        }
        if it % 50 == 0 {
            // stop once the dual point certifies a primal point to high accuracy
            let x = -(&hinv * (&p.f + g.transpose() * &l));
            let viol = (&g * &x - &h).max().max(0.0);
            let primal = 0.5 * x.dot(&(&p.h * &x)) + p.f.dot(&x);
            let scale = best.abs().max(1.0);
            if viol <= 1e-8 * scale && (primal - best).abs() <= 1e-9 * scale {
                break;
            }
        }
    }
    let x = -(&hinv * (&p.f + g.transpose() * &l));
    DualBound {
        value: best,
        x,
        iterations: it,
    }
}

pub struct TreeCase {
    pub env: LeadEnv,
    pub cfg: TreeConfig,
    pub driver: StochasticDriver,
    pub forecast: PredecessorForecast,
}

/// Random tree-building inputs with `n_max <= 50` and `m <= 4`.
pub fn random_tree_case<R: Rng>(rng: &mut R) -> TreeCase {
    let m = rng.random_range(1..=4);
    let params = DriverParams {
        sigma0: rng.random_range(0.0..1.0),
        ..DriverParams::default()
    };
    let cfg = TreeConfig {
        n_max: rng.random_range(1..=50),
        horizon: rng.random_range(1..=12),
        dt: 0.1,
    };
    let env = LeadEnv {
        v_lead: rng.random_range(0.0..30.0),
        headway: rng.random_range(2.0..60.0),
        a_lead: rng.random_range(-3.0..2.0),
        a_pred: rng.random_range(-3.0..2.0),
        v_front: rng.random_range(0.0..30.0),
    };
    let forecast = if rng.random_bool(0.5) {
        PredecessorForecast::Leader
    } else {
        let len = rng.random_range(0..12);
        PredecessorForecast::Planned((0..len).map(|_| rng.random_range(-5.0..3.0)).collect())
    };
    TreeCase {
        env,
        cfg,
        driver: StochasticDriver::new(params, m, 0.1, AccelBounds::default()).unwrap(),
        forecast,
    }
}

pub fn random_state<R: Rng>(rng: &mut R, scale: f64) -> State {
    State {
        gap_err_leader: rng.random_range(-scale..scale),
        dv_leader: rng.random_range(-scale..scale),
        gap_err_pred: rng.random_range(-scale..scale),
        dv_pred: rng.random_range(-scale..scale),
        accel: rng.random_range(-3.0..2.0),
    }
}

/// A strictly convex random QP with a known feasible point; roughly half of
/// the instances have general rows, some of which are active.
pub fn random_qp<R: Rng>(rng: &mut R, n: usize) -> QpProblem {
    let k = n + 3;
    let m = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
    let h = m.transpose() * &m / k as f64 + DMatrix::identity(n, n) * rng.random_range(0.05..1.0);
    let h = (&h + h.transpose()) * 0.5;
    let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let lb = DVector::from_fn(n, |_, _| -rng.random_range(0.2..2.0));
    let ub = DVector::from_fn(n, |_, _| rng.random_range(0.2..2.0));
    let rows = if rng.random_bool(0.5) { rng.random_range(1..=n.max(1)) } else { 0 };
    let a = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
    // feasible at a point inside the box
    let x_feas = DVector::from_fn(n, |i, _| 0.5 * (lb[i] + ub[i]) + 0.1 * rng.random_range(-1.0..1.0));
    let b = &a * &x_feas + DVector::from_fn(rows, |_, _| rng.random_range(0.0..0.5));
    QpProblem {
        h,
        f,
        a_ineq: a,
        b_ineq: b,
        lb,
        ub,
    }
}
