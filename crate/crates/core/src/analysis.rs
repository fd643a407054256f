//! Greedy decision trees, success curves, terminal statistics, belief-state
//! action values and plain-text exports.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::agent::{argmax, Mlp, TrainingCurve};
use crate::env::{EpisodeRecord, Environment};
use crate::error::{Error, Result};
use crate::levels::{LevelTable, PopulationState, Xi};

pub const QUANTUM: f64 = 1e-6;
pub const DEFAULT_PRUNE: f64 = 1e-4;

/// Hash of the population vector rounded to `QUANTUM`.
pub fn fingerprint(p: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for &x in p {
        ((x / QUANTUM).round() as i64).hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Child {
    Node(usize),
    /// Prepared state index and its purity.
    Terminal { state: usize, purity: f64 },
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub probability: f64,
    pub outcome: usize,
    pub child: Child,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub fingerprint: u64,
    pub state: Vec<f64>,
    pub action: usize,
    pub depth: usize,
    /// Probability of reaching this node.
    pub mass: f64,
    pub children: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
    /// (depth, mass) of every terminal leaf.
    pub leaves: Vec<(usize, f64)>,
    pub pruned_mass: f64,
    /// Mass still undecided when the depth limit was hit.
    pub unexpanded_mass: f64,
    pub max_depth: usize,
    pub partial: bool,
    /// Mass prepared before any pulse.
    pub root_terminal: bool,
}

impl DecisionTree {
    pub fn leaf_mass(&self) -> f64 {
        self.leaves.iter().map(|l| l.1).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.leaf_mass() + self.pruned_mass + self.unexpanded_mass
    }

    /// Mean number of pulses, counting unexpanded mass at the depth limit.
    pub fn expected_depth(&self) -> f64 {
        let decided = self.leaf_mass() + self.unexpanded_mass;
        if decided == 0.0 {
            return 0.0;
        }
        let s: f64 = self.leaves.iter().map(|&(d, m)| d as f64 * m).sum::<f64>()
            + self.unexpanded_mass * self.max_depth as f64;
        s / decided
    }
}

/// Breadth-first expansion of the greedy policy over both outcomes. Nodes
/// with equal fingerprints at the same depth are merged.
pub fn extract_decision_tree(mlp: &Mlp, env: &Environment, prune_prob: f64, max_depth: usize) -> Result<DecisionTree> {
    if env.n_states() != mlp.n_inputs() || env.n_actions() != mlp.n_outputs() {
        return Err(Error::config("network shape does not match the environment"));
    }
    extract_tree_with(|s| Ok(argmax(&mlp.forward(s)?)), env, prune_prob, max_depth)
}

/// Tree for any state-feedback policy.
pub fn extract_tree_with<F>(policy: F, env: &Environment, prune_prob: f64, max_depth: usize) -> Result<DecisionTree>
where
    F: Fn(&[f64]) -> Result<usize>,
{
    if !(0.0..1.0).contains(&prune_prob) {
        return Err(Error::config("prune probability must lie in [0, 1)"));
    }
    let mut tree = DecisionTree {
        nodes: Vec::new(),
        leaves: Vec::new(),
        pruned_mass: 0.0,
        unexpanded_mass: 0.0,
        max_depth,
        partial: false,
        root_terminal: false,
    };
    let start = &env.initial;
    if env.is_terminal(start) {
        tree.leaves.push((0, 1.0));
        tree.root_terminal = true;
        return Ok(tree);
    }
    if max_depth == 0 {
        tree.unexpanded_mass = 1.0;
        tree.partial = true;
        return Ok(tree);
    }
    let mut layer: Vec<usize> = vec![push_node(&mut tree, start.clone(), 0, 1.0, &policy)?];
    for depth in 0..max_depth {
        let mut next_layer: Vec<usize> = Vec::new();
        let mut index: HashMap<u64, usize> = HashMap::new();
        for &id in &layer {
            let (state, action, mass) = {
                let n = &tree.nodes[id];
                (
                    PopulationState {
                        p: n.state.clone(),
                        step_time: 0.0,
                    },
                    n.action,
                    n.mass,
                )
            };
            let branches = env.step_branches(&state, action)?;
            let mut edges = Vec::with_capacity(2);
            for (k, b) in branches.iter().enumerate() {
                if !b.reachable {
                    continue;
                }
                let m = mass * b.probability;
                let child = if b.terminated {
                    tree.leaves.push((depth + 1, m));
                    let (s, purity) = b.next.max_component();
                    Child::Terminal { state: s, purity }
                } else if b.probability < prune_prob {
                    tree.pruned_mass += m;
                    Child::Pruned
                } else if depth + 1 == max_depth {
                    tree.unexpanded_mass += m;
                    tree.partial = true;
                    continue;
                } else {
                    let fp = fingerprint(&b.next.p);
                    let cid = match index.get(&fp) {
                        Some(&cid) => {
                            tree.nodes[cid].mass += m;
                            cid
                        }
                        None => {
                            let cid = push_node(&mut tree, b.next.clone(), depth + 1, m, &policy)?;
                            index.insert(fp, cid);
                            next_layer.push(cid);
                            cid
                        }
                    };
                    Child::Node(cid)
                };
                edges.push(Edge {
                    probability: b.probability,
                    outcome: k,
                    child,
                });
            }
            tree.nodes[id].children = edges;
        }
        if next_layer.is_empty() {
            break;
        }
        layer = next_layer;
    }
    Ok(tree)
}

fn push_node<F>(tree: &mut DecisionTree, state: PopulationState, depth: usize, mass: f64, policy: &F) -> Result<usize>
where
    F: Fn(&[f64]) -> Result<usize>,
{
    let action = policy(&state.p)?;
    tree.nodes.push(TreeNode {
        fingerprint: fingerprint(&state.p),
        state: state.p,
        action,
        depth,
        mass,
        children: Vec::new(),
    });
    Ok(tree.nodes.len() - 1)
}

/// Fraction of episodes finished within each pulse count 0..=max_steps.
pub fn success_curve(records: &[EpisodeRecord], max_steps: usize) -> Result<Vec<(usize, f64)>> {
    if records.is_empty() {
        return Err(Error::config("success curve needs at least one episode"));
    }
    let mut finished_at = vec![0usize; max_steps + 1];
    for r in records {
        if r.finished() && r.length() <= max_steps {
            finished_at[r.length()] += 1;
        }
    }
    let n = records.len() as f64;
    let mut acc = 0;
    Ok(finished_at
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            acc += c;
            (k, acc as f64 / n)
        })
        .collect())
}

/// Smallest pulse count at which the curve reaches `fraction`.
pub fn pulses_to_reach(curve: &[(usize, f64)], fraction: f64) -> Option<usize> {
    curve.iter().find(|&&(_, f)| f >= fraction).map(|&(k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalHistogram {
    pub by_state: Vec<usize>,
    /// Last pulse of each finished episode.
    pub by_action: Vec<usize>,
}

impl TerminalHistogram {
    pub fn finished(&self) -> usize {
        self.by_state.iter().sum()
    }

    pub fn family_fraction(&self, family: &[usize]) -> f64 {
        let total = self.finished();
        if total == 0 {
            return 0.0;
        }
        family.iter().map(|&s| self.by_state[s]).sum::<usize>() as f64 / total as f64
    }
}

pub fn terminal_histogram(records: &[EpisodeRecord], n_states: usize, n_actions: usize) -> Result<TerminalHistogram> {
    let mut h = TerminalHistogram {
        by_state: vec![0; n_states],
        by_action: vec![0; n_actions],
    };
    for r in records {
        if let Some(s) = r.terminal_state {
            if s >= n_states {
                return Err(Error::data(format!("terminal state {s} outside {n_states} levels")));
            }
            h.by_state[s] += 1;
            if let Some(last) = r.steps.last() {
                if last.action >= n_actions {
                    return Err(Error::data(format!("action {} outside library", last.action)));
                }
                h.by_action[last.action] += 1;
            }
        }
    }
    Ok(h)
}

/// Levels |J, -J+1/2, -> and |J, -J-1/2, -> of a rotor with one spin-1/2 nucleus.
pub fn lowest_m_family(table: &LevelTable) -> Vec<usize> {
    table
        .levels()
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            let j2 = 2 * l.label.j as i32;
            l.label.k.is_none()
                && l.label.xi == Xi::Minus
                && (l.label.m.twice() == 1 - j2 || l.label.m.twice() == -1 - j2)
        })
        .map(|(i, _)| i)
        .collect()
}

/// Belief-weighted action values for a belief over population vectors.
pub fn belief_q(belief: &[(f64, Vec<f64>)], mlp: &Mlp) -> Result<Vec<f64>> {
    if belief.is_empty() {
        return Err(Error::config("empty belief"));
    }
    let total: f64 = belief.iter().map(|b| b.0).sum();
    if (total - 1.0).abs() > 1e-9 || belief.iter().any(|b| !(b.0 >= 0.0)) {
        return Err(Error::config(format!("belief weights must be non-negative and sum to 1, got {total}")));
    }
    let states: Vec<&[f64]> = belief.iter().map(|b| b.1.as_slice()).collect();
    let q = mlp.forward_batch(&states)?;
    let mut out = vec![0.0; mlp.n_outputs()];
    for (c, (w, _)) in belief.iter().enumerate() {
        for (a, o) in out.iter_mut().enumerate() {
            *o += w * q[(a, c)];
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(e.to_string())
}

pub fn write_success_curve<W: Write>(curve: &[(usize, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["pulses", "fraction"]).map_err(csv_err)?;
    for (k, f) in curve {
        w.write_record([k.to_string(), format!("{f:?}")]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}

pub fn read_success_curve<R: Read>(reader: R) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let k = rec[0].parse().map_err(|_| Error::data("bad pulse count"))?;
        let f = rec[1].parse().map_err(|_| Error::data("bad fraction"))?;
        out.push((k, f));
    }
    Ok(out)
}

pub fn write_histogram<W: Write>(h: &TerminalHistogram, table: Option<&LevelTable>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "index", "label", "count"]).map_err(csv_err)?;
    for (i, c) in h.by_state.iter().enumerate() {
        let label = table.map(|t| t.label(i).key()).unwrap_or_default();
        w.write_record(["state".to_string(), i.to_string(), label, c.to_string()])
            .map_err(csv_err)?;
    }
    for (i, c) in h.by_action.iter().enumerate() {
        w.write_record(["action".to_string(), i.to_string(), String::new(), c.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}

/// Rows `episode,length,return,moving_avg_<window>`.
pub fn write_training_curve<W: Write>(curve: &TrainingCurve, window: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["episode", "length", "return", &format!("moving_avg_{window}")])
        .map_err(csv_err)?;
    let avg = curve.moving_average(window);
    for (i, ((l, r), m)) in curve.lengths.iter().zip(&curve.returns).zip(avg).enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string(), format!("{r:?}"), format!("{m:?}")])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}

/// Graphviz rendering; pulse ids are printed 1-based.
pub fn write_tree_dot<W: Write>(tree: &DecisionTree, table: Option<&LevelTable>, mut w: W) -> Result<()> {
    let io = |e: std::io::Error| Error::data(e.to_string());
    writeln!(w, "digraph policy {{").map_err(io)?;
    writeln!(w, "  node [shape=circle];").map_err(io)?;
    for (i, n) in tree.nodes.iter().enumerate() {
        writeln!(w, "  n{i} [label=\"{}\"];", n.action + 1).map_err(io)?;
    }
    let mut leaf = 0;
    for (i, n) in tree.nodes.iter().enumerate() {
        for e in &n.children {
            let target = match &e.child {
                Child::Node(c) => format!("n{c}"),
                Child::Terminal { state, .. } => {
                    let name = format!("t{leaf}");
                    leaf += 1;
                    let label = table
                        .map(|t| t.label(*state).to_string())
                        .unwrap_or_else(|| format!("state {state}"));
                    writeln!(w, "  {name} [shape=box, label=\"{label}\"];").map_err(io)?;
                    name
                }
                Child::Pruned => {
                    let name = format!("t{leaf}");
                    leaf += 1;
                    writeln!(w, "  {name} [shape=point];").map_err(io)?;
                    name
                }
            };
            writeln!(w, "  n{i} -> {target} [label=\"{:.4}\"];", e.probability).map_err(io)?;
        }
    }
    writeln!(w, "}}").map_err(io)?;
    Ok(())
}

/// A standalone SVG line chart of one or more named series.
pub fn write_svg_plot<W: Write>(
    series: &[(&str, Vec<(f64, f64)>)],
    x_label: &str,
    y_label: &str,
    mut w: W,
) -> Result<()> {
    let io = |e: std::io::Error| Error::data(e.to_string());
    let (width, height, margin) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (width - 2.0 * margin);
    let sy = |y: f64| height - margin - (y - y0) / (y1 - y0) * (height - 2.0 * margin);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    writeln!(
        w,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">"
    )
    .map_err(io)?;
    writeln!(
        w,
        "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = margin,
        b = height - margin,
        r = width - margin
    )
    .map_err(io)?;
    writeln!(
        w,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{y_label}</text>",
        width / 2.0,
        height - 10.0,
        height / 2.0,
        height / 2.0
    )
    .map_err(io)?;
    writeln!(
        w,
        "<text x=\"{m}\" y=\"{}\" text-anchor=\"middle\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x1:.3}</text>",
        height - margin + 15.0,
        width - margin,
        height - margin + 15.0,
        m = margin
    )
    .map_err(io)?;
    writeln!(
        w,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>",
        margin - 5.0,
        height - margin,
        margin - 5.0,
        margin + 4.0
    )
    .map_err(io)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            w,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            path.join(" ")
        )
        .map_err(io)?;
        writeln!(
            w,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            width - margin - 120.0,
            margin + 15.0 * i as f64
        )
        .map_err(io)?;
    }
    writeln!(w, "</svg>").map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, EpisodeStep};
    use crate::presets::{heralded_transfers, toy_environment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(length: usize, terminal: Option<usize>, last_action: usize) -> EpisodeRecord {
        EpisodeRecord {
            steps: (0..length)
                .map(|t| EpisodeStep {
                    state: vec![],
                    action: if t + 1 == length { last_action } else { 0 },
                    outcome: 0,
                    reward: -1.0,
                    purity: 0.5,
                    terminated: terminal.is_some() && t + 1 == length,
                })
                .collect(),
            terminal_state: terminal,
            truncated: terminal.is_none(),
        }
    }

    #[test]
    fn chain_tree() {
        // the first pulse always clicks; the second ends in state 2 either way
        let env = Environment::new(
            EnvConfig::default(),
            PopulationState::new(vec![0.5, 0.5, 0.0]).unwrap(),
            vec![heralded_transfers(3, &[(0, 1, 1.0), (1, 2, 1.0)], 0)],
            vec![1e-3],
            None,
        )
        .unwrap();
        let t = extract_tree_with(|_| Ok(0), &env, DEFAULT_PRUNE, 10).unwrap();
        assert_eq!(t.nodes.len(), 2);
        assert_eq!(t.nodes[0].children.len(), 1);
        assert_eq!(t.nodes[0].children[0].probability, 1.0);
        let p: f64 = t.nodes[1].children.iter().map(|e| e.probability).sum();
        assert!((p - 1.0).abs() < 1e-12);
        assert!((t.total_mass() - 1.0).abs() < 1e-12);
        assert_eq!(t.expected_depth(), 2.0);
    }

    #[test]
    fn tree_mass_and_depth_on_toy() {
        let env = toy_environment();
        let sweep_like = |s: &[f64]| Ok(if s[0] > 0.0 { 1 } else { 0 });
        let t = extract_tree_with(sweep_like, &env, 0.0, 50).unwrap();
        assert!((t.total_mass() - 1.0).abs() < 1e-9);
        let policy = |s: &PopulationState, _t: usize| if s.p[0] > 0.0 { 1 } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += crate::env::run_episode(&policy, &env, &mut rng, false).unwrap().length() as f64;
        }
        assert!((sum / n as f64 - t.expected_depth()).abs() / t.expected_depth() < 0.02);
    }

    #[test]
    fn success_curve_shapes() {
        let recs: Vec<_> = (0..4).map(|_| record(5, Some(1), 0)).collect();
        let c = success_curve(&recs, 8).unwrap();
        assert!(c.iter().all(|&(k, f)| if k < 5 { f == 0.0 } else { f == 1.0 }));
        let none: Vec<_> = (0..3).map(|_| record(8, None, 0)).collect();
        assert!(success_curve(&none, 8).unwrap().iter().all(|&(_, f)| f == 0.0));
        assert_eq!(pulses_to_reach(&c, 0.85), Some(5));
    }

    #[test]
    fn histogram_counts() {
        let recs = vec![
            record(3, Some(2), 1),
            record(2, Some(2), 0),
            record(4, Some(0), 1),
            record(9, None, 1),
        ];
        let h = terminal_histogram(&recs, 3, 2).unwrap();
        assert_eq!(h.by_state, vec![1, 0, 2]);
        assert_eq!(h.by_action, vec![1, 2]);
        assert_eq!(h.finished(), 3);
        assert!((h.family_fraction(&[2]) - 2.0 / 3.0).abs() < 1e-15);
        let single = terminal_histogram(&[record(1, Some(1), 0)], 3, 2).unwrap();
        assert_eq!(single.family_fraction(&[1]), 1.0);
    }

    #[test]
    fn belief_q_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        let a = vec![0.2, 0.3, 0.5];
        let b = vec![0.9, 0.05, 0.05];
        assert_eq!(belief_q(&[(1.0, a.clone())], &m).unwrap(), m.forward(&a).unwrap());
        let mixed = belief_q(&[(0.5, a.clone()), (0.5, b.clone())], &m).unwrap();
        let (qa, qb) = (m.forward(&a).unwrap(), m.forward(&b).unwrap());
        for i in 0..2 {
            assert!((mixed[i] - 0.5 * (qa[i] + qb[i])).abs() < 1e-12);
        }
        assert!(belief_q(&[(0.7, a)], &m).is_err());
    }

    #[test]
    fn curve_round_trip_and_dot() {
        let c = vec![(0, 0.0), (1, 0.1), (2, 1.0 / 3.0)];
        let mut buf = Vec::new();
        write_success_curve(&c, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("pulses,fraction"));
        assert_eq!(read_success_curve(buf.as_slice()).unwrap(), c);

        let env = toy_environment();
        let t = extract_tree_with(|_| Ok(1), &env, 0.0, 3).unwrap();
        let mut dot = Vec::new();
        write_tree_dot(&t, None, &mut dot).unwrap();
        let text = String::from_utf8(dot).unwrap();
        assert!(text.starts_with("digraph"));
        assert_eq!(text.matches("[label=\"2\"]").count(), t.nodes.len());

        let mut svg = Vec::new();
        write_svg_plot(&[("rl", vec![(0.0, 0.0), (1.0, 1.0)])], "pulses", "fraction", &mut svg).unwrap();
        assert!(String::from_utf8(svg).unwrap().contains("<polyline"));
    }
}
