//! Greedy maximum-likelihood scenario tree over leader accelerations.
//!
//! Starting from the measured root, the tree repeatedly adopts the candidate
//! with the highest probability of being reached from the root, then adds the
//! adopted node's successors (one per support point of the predicted
//! distribution) to the candidate pool. Candidates are never pruned.

use serde::{Deserialize, Serialize};

use crate::driver::{LeadObservation, LeadPredictor};
use crate::dynamics::Disturbance;
use crate::error::{Error, Result};

/// Measurements available to a follower at the current control step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LeadEnv {
    /// Platoon leader speed (m/s).
    pub v_lead: f64,
    /// Gap between the leader and the background vehicle ahead of it (m).
    pub headway: f64,
    /// Leader acceleration (m/s²).
    pub a_lead: f64,
    /// Predecessor acceleration (m/s²).
    pub a_pred: f64,
    /// Speed of the background vehicle ahead of the leader (m/s).
    pub v_front: f64,
}

/// How the predecessor acceleration evolves along the prediction.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PredecessorForecast {
    /// The predecessor is the platoon leader itself.
    #[default]
    Leader,
    /// Broadcast acceleration forecast; entry `d - 1` applies at depth `d`,
    /// the last entry is held beyond the end. The root uses the measurement.
    Planned(Vec<f64>),
}

impl PredecessorForecast {
    fn at(&self, depth: usize, measured: f64, a_lead: f64) -> f64 {
        match self {
            PredecessorForecast::Leader => a_lead,
            PredecessorForecast::Planned(seq) => {
                if depth == 0 || seq.is_empty() {
                    measured
                } else {
                    seq[(depth - 1).min(seq.len() - 1)]
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub n_max: usize,
    /// Maximum depth (longest horizon, in steps).
    pub horizon: usize,
    pub dt: f64,
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::param("n_max", "must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::param("N", "horizon must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::param("dt", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub disturbance: Disturbance,
    /// Probability of reaching this node from the root.
    pub pi: f64,
    /// Probability of the branch from the parent.
    pub branch_prob: f64,
    pub predicted_v_lead: f64,
    pub predicted_headway: f64,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    pub nodes: Vec<ScenarioNode>,
    pub n_max: usize,
    pub horizon: usize,
}

/// One adoption step of the greedy construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditEntry {
    pub id: usize,
    pub pi: f64,
    /// Largest probability left in the pool after the adoption (0 if empty).
    pub max_remaining_pi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeDump {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    #[serde(rename = "a_L")]
    pub a_lead: f64,
    pub a_p: f64,
    pub pi: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    parent: usize,
    depth: usize,
    a_lead: f64,
    branch_prob: f64,
    pi: f64,
    created: usize,
}

impl Candidate {
    /// Strict preference: higher probability, then shallower, then older.
    fn beats(&self, other: &Candidate) -> bool {
        if self.pi != other.pi {
            return self.pi > other.pi;
        }
        if self.depth != other.depth {
            return self.depth < other.depth;
        }
        self.created < other.created
    }
}

pub fn build_tree(
    env: &LeadEnv,
    cfg: &TreeConfig,
    predictor: &dyn LeadPredictor,
    forecast: &PredecessorForecast,
) -> Result<ScenarioTree> {
    build_tree_audited(env, cfg, predictor, forecast).map(|(t, _)| t)
}

pub fn build_tree_audited(
    env: &LeadEnv,
    cfg: &TreeConfig,
    predictor: &dyn LeadPredictor,
    forecast: &PredecessorForecast,
) -> Result<(ScenarioTree, Vec<AuditEntry>)> {
    cfg.validate()?;
    let mut nodes = vec![ScenarioNode {
        id: 0,
        parent: None,
        depth: 0,
        disturbance: Disturbance::new(env.a_lead, forecast.at(0, env.a_pred, env.a_lead)),
        pi: 1.0,
        branch_prob: 1.0,
        predicted_v_lead: env.v_lead,
        predicted_headway: env.headway,
        children: Vec::new(),
    }];
    let mut audit = vec![AuditEntry {
        id: 0,
        pi: 1.0,
        max_remaining_pi: 0.0,
    }];
    let mut pool: Vec<Candidate> = Vec::new();
    let mut created = 0usize;

    let mut expand = |node: &ScenarioNode, pool: &mut Vec<Candidate>| {
        if node.depth >= cfg.horizon {
            return;
        }
        let dist = predictor.predict(&LeadObservation {
            v_lead: node.predicted_v_lead,
            headway: node.predicted_headway,
            accel: node.disturbance.a_leader,
        });
        for (&a, &p) in dist.values.iter().zip(&dist.probs) {
            pool.push(Candidate {
                parent: node.id,
                depth: node.depth + 1,
                a_lead: a,
                branch_prob: p,
                pi: node.pi * p,
                created,
            });
            created += 1;
        }
    };
    expand(&nodes[0], &mut pool);
    audit[0].max_remaining_pi = pool.iter().map(|c| c.pi).fold(0.0, f64::max);

    while nodes.len() < cfg.n_max && !pool.is_empty() {
        let best = (1..pool.len()).fold(0, |b, i| if pool[i].beats(&pool[b]) { i } else { b });
        let cand = pool.swap_remove(best);
        let parent = &nodes[cand.parent];
        let id = nodes.len();
        let node = ScenarioNode {
            id,
            parent: Some(cand.parent),
            depth: cand.depth,
            disturbance: Disturbance::new(
                cand.a_lead,
                forecast.at(cand.depth, env.a_pred, cand.a_lead),
            ),
            pi: cand.pi,
            branch_prob: cand.branch_prob,
            predicted_v_lead: (parent.predicted_v_lead + parent.disturbance.a_leader * cfg.dt)
                .max(0.0),
            predicted_headway: (parent.predicted_headway
                + (env.v_front - parent.predicted_v_lead) * cfg.dt)
                .max(0.0),
            children: Vec::new(),
        };
        nodes[cand.parent].children.push(id);
        expand(&node, &mut pool);
        nodes.push(node);
        audit.push(AuditEntry {
            id,
            pi: cand.pi,
            max_remaining_pi: pool.iter().map(|c| c.pi).fold(0.0, f64::max),
        });
    }

    Ok((
        ScenarioTree {
            nodes,
            n_max: cfg.n_max,
            horizon: cfg.horizon,
        },
        audit,
    ))
}

impl ScenarioTree {
    /// A deterministic chain of `horizon + 1` nodes with the given disturbances.
    pub fn chain(env: &LeadEnv, horizon: usize, forecast: &PredecessorForecast) -> Self {
        let nodes = (0..=horizon)
            .map(|d| ScenarioNode {
                id: d,
                parent: d.checked_sub(1),
                depth: d,
                disturbance: Disturbance::new(env.a_lead, forecast.at(d, env.a_pred, env.a_lead)),
                pi: 1.0,
                branch_prob: 1.0,
                predicted_v_lead: env.v_lead,
                predicted_headway: env.headway,
                children: if d < horizon { vec![d + 1] } else { Vec::new() },
            })
            .collect();
        ScenarioTree {
            nodes,
            n_max: horizon + 1,
            horizon,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> &ScenarioNode {
        &self.nodes[0]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.is_leaf(i)).collect()
    }

    pub fn non_leaves(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| !self.is_leaf(i)).collect()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node ids from the root to `id`, inclusive.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// One root-to-leaf path per leaf, ordered by leaf id.
    pub fn horizons(&self) -> Vec<Vec<usize>> {
        self.leaves().into_iter().map(|l| self.path_to(l)).collect()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Structural(msg));
        if self.nodes.is_empty() {
            return bad("tree has no nodes".into());
        }
        let root = &self.nodes[0];
        if root.parent.is_some() || root.depth != 0 || root.pi != 1.0 {
            return bad("malformed root".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return bad(format!("node {i} carries id {}", n.id));
            }
            if i == 0 {
                continue;
            }
            let Some(p) = n.parent else {
                return bad(format!("node {i} has no parent"));
            };
            if p >= i {
                return bad(format!("node {i} precedes its parent {p}"));
            }
            if n.depth != self.nodes[p].depth + 1 || n.depth > self.horizon {
                return bad(format!("node {i} has inconsistent depth {}", n.depth));
            }
            if !(n.pi > 0.0 && n.pi <= 1.0) {
                return bad(format!("node {i} has probability {}", n.pi));
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> Vec<NodeDump> {
        self.nodes
            .iter()
            .map(|n| NodeDump {
                id: n.id,
                parent: n.parent,
                depth: n.depth,
                a_lead: n.disturbance.a_leader,
                a_p: n.disturbance.a_pred,
                pi: n.pi,
            })
            .collect()
    }

    pub fn dump_json(&self) -> String {
        serde_json::to_string(&self.dump()).expect("tree dump serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::{AccelDistribution, ConstantAccel};

    struct Uniform(Vec<f64>);

    impl LeadPredictor for Uniform {
        fn predict(&self, _: &LeadObservation) -> AccelDistribution {
            let p = 1.0 / self.0.len() as f64;
            AccelDistribution {
                values: self.0.clone(),
                probs: vec![p; self.0.len()],
            }
        }
    }

    fn env() -> LeadEnv {
        LeadEnv {
            v_lead: 17.0,
            headway: 19.4,
            a_lead: 0.2,
            a_pred: 0.2,
            v_front: 17.0,
        }
    }

    fn cfg(n_max: usize, horizon: usize) -> TreeConfig {
        TreeConfig {
            n_max,
            horizon,
            dt: 0.1,
        }
    }

    #[test]
    fn root_only() {
        let t = build_tree(&env(), &cfg(1, 10), &Uniform(vec![-1.0, 1.0]), &Default::default())
            .unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.leaves(), vec![0]);
        assert_eq!(t.horizons(), vec![vec![0]]);
    }

    #[test]
    fn single_branch_is_a_chain() {
        let t = build_tree(&env(), &cfg(5, 6), &ConstantAccel, &Default::default()).unwrap();
        assert_eq!(t.len(), 5);
        assert!(t.nodes.iter().all(|n| n.pi == 1.0));
        assert_eq!(t.nodes.iter().map(|n| n.depth).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(t.horizons(), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn binary_tree_prefers_breadth_on_ties() {
        let t = build_tree(&env(), &cfg(4, 3), &Uniform(vec![-1.0, 1.0]), &Default::default())
            .unwrap();
        assert_eq!(t.nodes.iter().map(|n| n.depth).collect::<Vec<_>>(), vec![0, 1, 1, 2]);
        assert_eq!(t.nodes.iter().map(|n| n.pi).collect::<Vec<_>>(), vec![1.0, 0.5, 0.5, 0.25]);
        // the first depth-1 node is the parent of the depth-2 node
        assert_eq!(t.nodes[3].parent, Some(1));
        let lens: Vec<usize> = t.horizons().iter().map(|h| h.len()).collect();
        assert_eq!(lens, vec![2, 3]);
    }

    #[test]
    fn depth_limit_stops_growth() {
        let t = build_tree(&env(), &cfg(50, 3), &ConstantAccel, &Default::default()).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.max_depth(), 3);
    }

    #[test]
    fn predecessor_forecast_per_depth() {
        let f = PredecessorForecast::Planned(vec![0.5, 0.7]);
        let t = build_tree(&env(), &cfg(5, 10), &ConstantAccel, &f).unwrap();
        let ap: Vec<f64> = t.nodes.iter().map(|n| n.disturbance.a_pred).collect();
        assert_eq!(ap, vec![0.2, 0.5, 0.7, 0.7, 0.7]);
        let t = build_tree(&env(), &cfg(3, 10), &Uniform(vec![-2.0, 1.0]), &Default::default())
            .unwrap();
        assert!(t.nodes.iter().all(|n| n.disturbance.a_pred == n.disturbance.a_leader));
    }

    #[test]
    fn leader_state_propagates_along_branches() {
        let e = LeadEnv {
            v_front: 15.0,
            ..env()
        };
        let t = build_tree(&e, &cfg(3, 10), &ConstantAccel, &Default::default()).unwrap();
        assert!((t.nodes[1].predicted_v_lead - 17.02).abs() < 1e-12);
        assert!((t.nodes[1].predicted_headway - 19.2).abs() < 1e-12);
        assert!((t.nodes[2].predicted_headway - (19.2 - 0.202)).abs() < 1e-12);
    }

    #[test]
    fn chain_matches_constant_prediction() {
        let f = PredecessorForecast::Planned(vec![0.1, 0.3]);
        let a = ScenarioTree::chain(&env(), 4, &f);
        let b = build_tree(&env(), &cfg(5, 4), &ConstantAccel, &f).unwrap();
        assert_eq!(a.dump(), b.dump());
        a.check().unwrap();
    }

    #[test]
    fn dump_format() {
        let t = build_tree(&env(), &cfg(2, 2), &ConstantAccel, &Default::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&t.dump_json()).unwrap();
        assert_eq!(v[0]["parent"], serde_json::Value::Null);
        assert_eq!(v[1]["parent"], 0);
        assert_eq!(v[1]["a_L"], 0.2);
        assert!(v[1].get("a_p").is_some() && v[1].get("pi").is_some());
    }
}
