//! Functional module detection: modularity, size-capped Leiden, and repair of
//! undersized modules.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::callgraph::{CallGraph, SymmetricGraph};
use crate::error::{Error, Result};

/// Relative slack for "strictly improves" comparisons.
const GAIN_EPS: f64 = 1e-12;

/// Modularity of `membership` (community index per node) on a symmetrized
/// graph:
///
/// ```text
/// Q = 1/W * sum_{i,j} [ w'_ij - k_i k_j / W ] * delta(c_i, c_j)
/// ```
pub fn modularity(graph: &SymmetricGraph, membership: &[usize]) -> Result<f64> {
    if membership.len() != graph.len() {
        return Err(Error::Argument(format!(
            "membership covers {} nodes, graph has {}",
            membership.len(),
            graph.len()
        )));
    }
    let total = graph.total_weight();
    if total <= 0.0 {
        return Err(Error::Undefined("modularity of an edgeless graph".into()));
    }
    let ncomm = membership.iter().copied().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; ncomm];
    let mut strength = vec![0.0; ncomm];
    for i in 0..graph.len() {
        let c = membership[i];
        strength[c] += graph.degree(i);
        for &(j, w) in graph.neighbors(i) {
            if membership[j] == c {
                internal[c] += w;
            }
        }
    }
    let q: f64 = internal
        .iter()
        .zip(&strength)
        .map(|(inw, k)| inw - k * k / total)
        .sum();
    Ok(q / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeidenConfig {
    /// Largest module, counted in method nodes.
    pub max_size: usize,
    pub seed: u64,
    /// Cap on full Leiden passes; each pass must strictly improve Q.
    pub max_iterations: usize,
    /// Temperature of the randomized merge choice during refinement.
    pub refinement_theta: f64,
}

impl Default for LeidenConfig {
    fn default() -> Self {
        LeidenConfig {
            max_size: 15,
            seed: 42,
            max_iterations: 32,
            refinement_theta: 0.01,
        }
    }
}

/// Outcome of [`leiden`] over dense node indices.
#[derive(Debug, Clone)]
pub struct LeidenRun {
    pub membership: Vec<usize>,
    pub quality: f64,
    /// Q after each accepted pass, starting with the singleton partition.
    pub trace: Vec<f64>,
}

/// Runs Leiden on a symmetrized graph. Communities never grow beyond
/// `config.max_size` original nodes.
pub fn leiden(graph: &SymmetricGraph, config: &LeidenConfig) -> Result<LeidenRun> {
    if graph.is_empty() || graph.total_weight() <= 0.0 {
        return Err(Error::Argument("leiden needs a graph with positive total weight".into()));
    }
    if config.max_size == 0 {
        return Err(Error::Argument("max_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut membership: Vec<usize> = (0..graph.len()).collect();
    let mut quality = modularity(graph, &membership)?;
    let mut trace = vec![quality];

    for pass in 0..config.max_iterations {
        let candidate = leiden_pass(graph, &membership, config, &mut rng);
        let q = modularity(graph, &candidate)?;
        if q > quality + GAIN_EPS * (1.0 + quality.abs()) {
            log::debug!("leiden pass {pass}: Q {quality:.6} -> {q:.6}");
            membership = candidate;
            quality = q;
            trace.push(q);
        } else {
            break;
        }
    }
    renumber(&mut membership);
    Ok(LeidenRun {
        membership,
        quality,
        trace,
    })
}

/// One pass of move / refine / aggregate until the local moving phase leaves
/// every aggregate node alone.
fn leiden_pass(
    base: &SymmetricGraph,
    start: &[usize],
    config: &LeidenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut graph = base.clone();
    let mut part = start.to_vec();
    renumber(&mut part);
    // aggregate node holding each original node
    let mut owner: Vec<usize> = (0..base.len()).collect();

    loop {
        move_nodes_fast(&graph, &mut part, config.max_size, rng);
        let ncomm = renumber(&mut part);
        if ncomm == graph.len() {
            break;
        }
        let mut refined = refine(&graph, &part, config, rng);
        let mut nref = renumber(&mut refined);
        if nref == graph.len() {
            // refinement merged nothing; aggregate by the partition itself
            refined = part.clone();
            nref = ncomm;
        }
        let mut next_part = vec![0; nref];
        for v in 0..graph.len() {
            next_part[refined[v]] = part[v];
        }
        for o in owner.iter_mut() {
            *o = refined[*o];
        }
        graph = aggregate(&graph, &refined, nref);
        part = next_part;
    }
    owner.iter().map(|&o| part[o]).collect()
}

fn move_nodes_fast(
    graph: &SymmetricGraph,
    part: &mut [usize],
    max_size: usize,
    rng: &mut ChaCha8Rng,
) {
    let n = graph.len();
    let total = graph.total_weight();
    let mut comm_strength = vec![0.0; n];
    let mut comm_size = vec![0usize; n];
    for v in 0..n {
        comm_strength[part[v]] += graph.degree(v);
        comm_size[part[v]] += graph.node_size(v);
    }
    let mut empty: Vec<usize> = (0..n).filter(|&c| comm_size[c] == 0).rev().collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];

    let mut link = vec![0.0; n];
    let mut touched: Vec<usize> = Vec::new();

    while let Some(v) = queue.pop_front() {
        queued[v] = false;
        let old = part[v];
        let kv = graph.degree(v);
        let sv = graph.node_size(v);

        for &(u, w) in graph.neighbors(v) {
            if u == v {
                continue;
            }
            let c = part[u];
            if link[c] == 0.0 && !touched.contains(&c) {
                touched.push(c);
            }
            link[c] += w;
        }

        comm_strength[old] -= kv;
        comm_size[old] -= sv;

        let mut best = old;
        let mut best_gain = link[old] - kv * comm_strength[old] / total;
        for &c in &touched {
            if c == old || comm_size[c] + sv > max_size {
                continue;
            }
            let gain = link[c] - kv * comm_strength[c] / total;
            if gain > best_gain + GAIN_EPS * (1.0 + best_gain.abs()) {
                best = c;
                best_gain = gain;
            }
        }
        if best_gain < -GAIN_EPS && comm_size[old] > 0 {
            if let Some(&c) = empty.last() {
                best = c;
            }
        }

        if best != old {
            if empty.last() == Some(&best) {
                empty.pop();
            }
            if comm_size[old] == 0 {
                empty.push(old);
            }
        }
        part[v] = best;
        comm_strength[best] += kv;
        comm_size[best] += sv;

        for &c in &touched {
            link[c] = 0.0;
        }
        touched.clear();

        if best != old {
            for &(u, _) in graph.neighbors(v) {
                if u != v && part[u] != best && !queued[u] {
                    queued[u] = true;
                    queue.push_back(u);
                }
            }
        }
    }
}

/// Splits each community of `part` into well-connected sub-communities by
/// merging singletons, starting from the singleton partition.
fn refine(
    graph: &SymmetricGraph,
    part: &[usize],
    config: &LeidenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = graph.len();
    let total = graph.total_weight();
    let mut refined: Vec<usize> = (0..n).collect();
    let mut ref_strength: Vec<f64> = (0..n).map(|v| graph.degree(v)).collect();
    let mut ref_size: Vec<usize> = (0..n).map(|v| graph.node_size(v)).collect();
    let mut ref_members = vec![1usize; n];

    let mut comm_strength: HashMap<usize, f64> = HashMap::new();
    for (v, &c) in part.iter().enumerate() {
        *comm_strength.entry(c).or_insert(0.0) += graph.degree(v);
    }
    // weight from each refined cluster to the rest of its community
    let mut external: Vec<f64> = (0..n)
        .map(|v| {
            graph
                .neighbors(v)
                .iter()
                .filter(|&&(u, _)| u != v && part[u] == part[v])
                .map(|(_, w)| w)
                .sum()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let mut link: HashMap<usize, f64> = HashMap::new();
    for v in order {
        if ref_members[refined[v]] != 1 {
            continue;
        }
        let kv = graph.degree(v);
        let k_comm = comm_strength[&part[v]];
        if external[v] < kv * (k_comm - kv) / total - GAIN_EPS {
            continue;
        }

        link.clear();
        let mut link_order = Vec::new();
        for &(u, w) in graph.neighbors(v) {
            if u != v && part[u] == part[v] {
                let r = refined[u];
                let e = link.entry(r).or_insert_with(|| {
                    link_order.push(r);
                    0.0
                });
                *e += w;
            }
        }

        let own = refined[v];
        let sv = graph.node_size(v);
        let mut candidates: Vec<(usize, f64)> = vec![(own, 0.0)];
        for &r in &link_order {
            let kr = ref_strength[r];
            if ref_size[r] + sv > config.max_size {
                continue;
            }
            if external[r] < kr * (k_comm - kr) / total - GAIN_EPS {
                continue;
            }
            let gain = 2.0 * (link[&r] - kv * kr / total) / total;
            if gain >= 0.0 {
                candidates.push((r, gain));
            }
        }
        let target = choose(&candidates, config.refinement_theta, rng);
        if target == own {
            continue;
        }

        let w_vt = link[&target];
        external[target] = external[target] + external[v] - 2.0 * w_vt;
        refined[v] = target;
        ref_strength[target] += kv;
        ref_size[target] += sv;
        ref_members[target] += 1;
        ref_strength[own] = 0.0;
        ref_size[own] = 0;
        ref_members[own] = 0;
    }
    refined
}

fn choose(candidates: &[(usize, f64)], theta: f64, rng: &mut ChaCha8Rng) -> usize {
    if theta <= 0.0 {
        // greedy, first best wins
        let mut best = candidates[0];
        for &c in &candidates[1..] {
            if c.1 > best.1 {
                best = c;
            }
        }
        return best.0;
    }
    let top = candidates.iter().map(|c| c.1).fold(f64::MIN, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|c| ((c.1 - top) / theta).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * sum;
    for (c, w) in candidates.iter().zip(&weights) {
        if x < *w {
            return c.0;
        }
        x -= w;
    }
    candidates[candidates.len() - 1].0
}

fn aggregate(graph: &SymmetricGraph, clusters: &[usize], count: usize) -> SymmetricGraph {
    let mut maps: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); count];
    let mut size = vec![0usize; count];
    for v in 0..graph.len() {
        let cv = clusters[v];
        size[cv] += graph.node_size(v);
        for &(u, w) in graph.neighbors(v) {
            *maps[cv].entry(clusters[u]).or_insert(0.0) += w;
        }
    }
    let ids = (0..count).map(|i| format!("#{i}")).collect();
    SymmetricGraph::from_symmetric(ids, maps, size)
}

/// Renumbers community labels to `0..k` in order of first appearance and
/// returns `k`.
fn renumber(membership: &mut [usize]) -> usize {
    let mut map: HashMap<usize, usize> = HashMap::new();
    for c in membership.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Assignment of covered methods to functional modules.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulePartition {
    assignment: BTreeMap<String, String>,
    modules: BTreeMap<String, BTreeSet<String>>,
    quality: f64,
}

impl ModulePartition {
    /// Builds a partition from groups of node ids. Module ids are assigned in
    /// order of each group's smallest member, so equal groupings always get
    /// equal ids.
    pub fn from_groups(graph: &SymmetricGraph, groups: Vec<BTreeSet<String>>) -> Result<Self> {
        let mut groups: Vec<BTreeSet<String>> = groups.into_iter().filter(|g| !g.is_empty()).collect();
        groups.sort_by(|a, b| a.first().cmp(&b.first()));
        let width = groups.len().saturating_sub(1).to_string().len().max(3);

        let mut assignment = BTreeMap::new();
        let mut modules = BTreeMap::new();
        let mut membership = vec![usize::MAX; graph.len()];
        for (k, group) in groups.into_iter().enumerate() {
            let module_id = format!("module-{k:0width$}");
            for id in &group {
                let idx = graph
                    .index_of(id)
                    .ok_or_else(|| Error::Integrity(format!("{id} is not a graph node")))?;
                if membership[idx] != usize::MAX {
                    return Err(Error::Integrity(format!("{id} assigned to two modules")));
                }
                membership[idx] = k;
                assignment.insert(id.clone(), module_id.clone());
            }
            modules.insert(module_id, group);
        }
        if let Some(i) = membership.iter().position(|&m| m == usize::MAX) {
            return Err(Error::Integrity(format!("{} has no module", graph.ids()[i])));
        }
        let quality = modularity(graph, &membership)?;
        Ok(ModulePartition {
            assignment,
            modules,
            quality,
        })
    }

    pub fn from_membership(graph: &SymmetricGraph, membership: &[usize]) -> Result<Self> {
        let mut groups: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
        for (i, &c) in membership.iter().enumerate() {
            groups.entry(c).or_default().insert(graph.ids()[i].clone());
        }
        Self::from_groups(graph, groups.into_values().collect())
    }

    pub fn quality(&self) -> f64 {
        self.quality
    }

    pub fn module_of(&self, method_id: &str) -> Option<&str> {
        self.assignment.get(method_id).map(String::as_str)
    }

    pub fn modules(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.modules
    }

    pub fn assignment(&self) -> &BTreeMap<String, String> {
        &self.assignment
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    /// Community index per node, in the graph's node order.
    pub fn membership(&self, graph: &SymmetricGraph) -> Vec<usize> {
        let index: HashMap<&str, usize> = self
            .modules
            .keys()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        graph
            .ids()
            .iter()
            .map(|id| index[self.assignment[id].as_str()])
            .collect()
    }

    pub fn functional_modules(&self, graph: &CallGraph) -> Vec<FunctionalModule> {
        self.modules
            .iter()
            .map(|(id, members)| FunctionalModule {
                module_id: id.clone(),
                members: members.iter().cloned().collect(),
                internal_edges: graph.internal_edges(members),
            })
            .collect()
    }

    pub fn to_document(&self, seed: u64, min_size: usize, max_size: usize) -> ModulesDocument {
        ModulesDocument {
            modules: self
                .modules
                .iter()
                .map(|(id, m)| ModuleEntry {
                    module_id: id.clone(),
                    members: m.iter().cloned().collect(),
                })
                .collect(),
            quality: self.quality,
            seed,
            min_size,
            max_size,
        }
    }

    /// Rebuilds a partition from its exported form, recomputing Q.
    pub fn from_document(graph: &SymmetricGraph, doc: &ModulesDocument) -> Result<Self> {
        let p = Self::from_groups(
            graph,
            doc.modules
                .iter()
                .map(|m| m.members.iter().cloned().collect())
                .collect(),
        )?;
        let ids_match = p.modules.keys().eq(doc.modules.iter().map(|m| &m.module_id));
        if !ids_match {
            return Err(Error::Integrity("module ids are not in canonical order".into()));
        }
        Ok(p)
    }
}

/// `modules.json`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulesDocument {
    pub modules: Vec<ModuleEntry>,
    pub quality: f64,
    pub seed: u64,
    pub min_size: usize,
    pub max_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleEntry {
    pub module_id: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionalModule {
    pub module_id: String,
    pub members: Vec<String>,
    pub internal_edges: Vec<(String, String, u64)>,
}

/// Leiden over the call graph, capped at `max_size` methods per module.
pub fn leiden_detect(graph: &CallGraph, max_size: usize, seed: u64) -> Result<ModulePartition> {
    let config = LeidenConfig {
        max_size,
        seed,
        ..LeidenConfig::default()
    };
    leiden_detect_with(graph, &config)
}

pub fn leiden_detect_with(graph: &CallGraph, config: &LeidenConfig) -> Result<ModulePartition> {
    let sym = graph.symmetrized();
    let run = leiden(&sym, config)?;
    ModulePartition::from_membership(&sym, &run.membership)
}

/// One merge performed by [`repair_module_sizes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairStep {
    pub source: BTreeSet<String>,
    pub target: BTreeSet<String>,
    pub weight: f64,
    /// The merge pushed the target past `max_size` because no neighbour had room.
    pub over_cap: bool,
}

/// Folds every module smaller than `min_size` into its most strongly
/// connected neighbour, smallest modules first. Modules without any
/// neighbouring module are left alone.
pub fn repair_module_sizes(
    graph: &CallGraph,
    partition: &ModulePartition,
    min_size: usize,
    max_size: usize,
) -> Result<(ModulePartition, Vec<RepairStep>)> {
    repair_symmetric(&graph.symmetrized(), partition, min_size, max_size)
}

pub fn repair_symmetric(
    sym: &SymmetricGraph,
    partition: &ModulePartition,
    min_size: usize,
    max_size: usize,
) -> Result<(ModulePartition, Vec<RepairStep>)> {
    if min_size > max_size {
        return Err(Error::Argument(format!("min_size {min_size} > max_size {max_size}")));
    }
    // slot per module; None once merged away
    let mut groups: Vec<Option<BTreeSet<usize>>> = partition
        .modules
        .values()
        .map(|m| {
            Some(
                m.iter()
                    .map(|id| sym.index_of(id).expect("partition built over this graph"))
                    .collect(),
            )
        })
        .collect();
    let mut slot_of: Vec<usize> = vec![0; sym.len()];
    for (s, g) in groups.iter().enumerate() {
        for &v in g.as_ref().into_iter().flatten() {
            slot_of[v] = s;
        }
    }
    let mut isolated: BTreeSet<usize> = BTreeSet::new();
    let mut steps = Vec::new();

    loop {
        let mut pending: Vec<(usize, usize, usize)> = groups
            .iter()
            .enumerate()
            .filter_map(|(s, g)| g.as_ref().map(|g| (s, g)))
            .filter(|(s, g)| g.len() < min_size && !isolated.contains(s))
            .map(|(s, g)| (g.len(), *g.first().unwrap(), s))
            .collect();
        if pending.is_empty() {
            break;
        }
        pending.sort_unstable();
        let (_, _, src) = pending[0];
        let src_nodes = groups[src].as_ref().unwrap();

        let mut between: BTreeMap<usize, f64> = BTreeMap::new();
        for &v in src_nodes {
            for &(u, w) in sym.neighbors(v) {
                let s = slot_of[u];
                if s != src {
                    *between.entry(s).or_insert(0.0) += w;
                }
            }
        }
        if between.is_empty() {
            isolated.insert(src);
            continue;
        }

        let src_len = src_nodes.len();
        let key = |s: &usize| *groups[*s].as_ref().unwrap().first().unwrap();
        let pick = |fits: bool| {
            between
                .iter()
                .filter(|(s, _)| !fits || groups[**s].as_ref().unwrap().len() + src_len <= max_size)
                .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| key(b.0).cmp(&key(a.0))))
                .map(|(s, w)| (*s, *w))
        };
        let (target, weight, over_cap) = match pick(true) {
            Some((t, w)) => (t, w, false),
            None => {
                let (t, w) = pick(false).unwrap();
                (t, w, true)
            }
        };

        let moved = groups[src].take().unwrap();
        let step = RepairStep {
            source: moved.iter().map(|&v| sym.ids()[v].clone()).collect(),
            target: groups[target].as_ref().unwrap().iter().map(|&v| sym.ids()[v].clone()).collect(),
            weight,
            over_cap,
        };
        if over_cap {
            log::info!("merge of {} nodes exceeds max_size {max_size}", src_len);
        }
        log::debug!("repair: {} -> {} (weight {weight})", src_len, step.target.len());
        steps.push(step);
        for &v in &moved {
            slot_of[v] = target;
        }
        groups[target].as_mut().unwrap().extend(moved);
    }

    let out: Vec<BTreeSet<String>> = groups
        .into_iter()
        .flatten()
        .map(|g| g.into_iter().map(|v| sym.ids()[v].clone()).collect())
        .collect();
    Ok((ModulePartition::from_groups(sym, out)?, steps))
}

/// Inter-module weights, exposed for diagnostics.
pub fn module_adjacency(sym: &SymmetricGraph, partition: &ModulePartition) -> BTreeMap<(String, String), f64> {
    let mut out = BTreeMap::new();
    for (i, a) in sym.ids().iter().enumerate() {
        let ma = &partition.assignment[a];
        for &(j, w) in sym.neighbors(i) {
            let mb = &partition.assignment[&sym.ids()[j]];
            if ma != mb {
                *out.entry((ma.clone(), mb.clone())).or_insert(0.0) += w;
            }
        }
    }
    out
}
