//! Community detection against exhaustive partition enumeration and a
//! step-by-step simulation of the size repair rule.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semfl::callgraph::CallGraph;
use semfl::community::{
    leiden, leiden_detect, modularity, repair_module_sizes, LeidenConfig, ModulePartition,
};

/// Dense symmetrized weights built straight from the directed edge list.
fn dense(n: usize, edges: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; n]; n];
    for &(a, b, x) in edges {
        w[a][b] += x;
        w[b][a] += x;
    }
    w
}

/// Double sum over every ordered pair, exactly as written.
fn oracle_q(w: &[Vec<f64>], c: &[usize]) -> f64 {
    let n = w.len();
    let total: f64 = w.iter().flatten().sum();
    let k: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if c[i] == c[j] {
                q += w[i][j] - k[i] * k[j] / total;
            }
        }
    }
    q / total
}

/// All set partitions as restricted growth strings.
fn all_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for c in 0..=max + 1 {
            cur.push(c);
            rec(i + 1, n, cur, max.max(c), out);
            cur.pop();
        }
    }
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    let mut cur = vec![0];
    rec(1, n, &mut cur, 0, &mut out);
    out
}

fn best_q(w: &[Vec<f64>]) -> (f64, Vec<usize>) {
    all_partitions(w.len())
        .into_iter()
        .map(|p| (oracle_q(w, &p), p))
        .fold((f64::MIN, vec![]), |a, b| if b.0 > a.0 { b } else { a })
}

fn name(i: usize) -> String {
    format!("n{i}")
}

fn call_graph(edges: &[(usize, usize, f64)]) -> CallGraph {
    let mut g = CallGraph::default();
    for &(a, b, w) in edges {
        g.add_edge(&name(a), &name(b), w as u64);
    }
    g
}

/// Two cliques of sizes `a` and `b` with one bridge between `a0` and `b0`.
fn two_cliques(a: usize, b: usize, bridge: (usize, usize)) -> Vec<(usize, usize, f64)> {
    let mut e = Vec::new();
    for i in 0..a {
        for j in (i + 1)..a {
            e.push((i, j, 1.0));
        }
    }
    for i in 0..b {
        for j in (i + 1)..b {
            e.push((a + i, a + j, 1.0));
        }
    }
    e.push((bridge.0, a + bridge.1, 1.0));
    e
}

#[test]
fn partition_counts_are_bell_numbers() {
    let bell = [1, 1, 2, 5, 15, 52, 203, 877, 4140];
    for (n, b) in bell.iter().enumerate() {
        assert_eq!(all_partitions(n).len(), *b);
    }
}

#[test]
fn implementation_matches_double_sum() {
    let edges = two_cliques(3, 3, (0, 0));
    let w = dense(6, &edges);
    let sym = call_graph(&edges).symmetrized();
    for p in all_partitions(6) {
        // node names n0..n5 sort the same way as their indices
        let q = modularity(&sym, &p).unwrap();
        assert!((q - oracle_q(&w, &p)).abs() < 1e-12);
    }
}

#[test]
fn two_triangles_split_is_the_argmax() {
    let edges = two_cliques(3, 3, (0, 0));
    let w = dense(6, &edges);
    let (best, arg) = best_q(&w);
    assert_eq!(arg, vec![0, 0, 0, 1, 1, 1]);
    let split = oracle_q(&w, &[0, 0, 0, 1, 1, 1]);
    assert!((best - split).abs() < 1e-12);
    // frozen: 5/14 from the enumeration above
    assert!((best - 5.0 / 14.0).abs() < 1e-12);
}

#[test]
fn leiden_recovers_two_four_cliques() {
    let edges = two_cliques(4, 4, (0, 0));
    let w = dense(8, &edges);
    let (best, _) = best_q(&w);
    let p = leiden_detect(&call_graph(&edges), 15, 42).unwrap();
    assert!((p.quality() - best).abs() < 1e-9, "{} vs {best}", p.quality());
    let a: BTreeSet<String> = (0..4).map(name).collect();
    let b: BTreeSet<String> = (4..8).map(name).collect();
    let groups: Vec<_> = p.modules().values().cloned().collect();
    assert_eq!(groups, vec![a, b]);
}

#[test]
fn leiden_reaches_optimum_on_planted_graphs_across_seeds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..30u64 {
        let a = rng.random_range(3..=4);
        let b = rng.random_range(3..=4);
        let edges = two_cliques(a, b, (rng.random_range(0..a), rng.random_range(0..b)));
        let w = dense(a + b, &edges);
        let (best, _) = best_q(&w);
        let sym = call_graph(&edges).symmetrized();
        let run = leiden(&sym, &LeidenConfig { seed, ..LeidenConfig::default() }).unwrap();
        assert!((run.quality - best).abs() < 1e-9, "seed {seed}: {} vs {best}", run.quality);
    }
}

#[test]
fn relabeling_and_scaling_leave_q_unchanged() {
    let edges = two_cliques(4, 3, (1, 2));
    let sym = call_graph(&edges).symmetrized();
    let p = [0, 0, 1, 1, 2, 2, 2];
    let relabeled = [5, 5, 3, 3, 9, 9, 9];
    let q = modularity(&sym, &p).unwrap();
    assert!((q - modularity(&sym, &relabeled).unwrap()).abs() < 1e-12);
    for alpha in [0.5, 3.0, 1e6] {
        assert!((q - modularity(&sym.scaled(alpha), &p).unwrap()).abs() < 1e-9);
    }
}

/// Literal re-implementation of the repair rule over plain vectors: pick the
/// smallest undersized module (ties by smallest member) that has a neighbour,
/// merge into the heaviest neighbour with room, else the heaviest overall.
fn simulate_repair(
    w: &[Vec<f64>],
    mut modules: Vec<BTreeSet<usize>>,
    min: usize,
    max: usize,
) -> Vec<BTreeSet<usize>> {
    loop {
        let between = |a: &BTreeSet<usize>, b: &BTreeSet<usize>| -> f64 {
            a.iter().flat_map(|&i| b.iter().map(move |&j| w[i][j])).sum()
        };
        let mut order: Vec<usize> = (0..modules.len()).collect();
        order.sort_by_key(|&m| (modules[m].len(), *modules[m].first().unwrap()));
        let mut merged = false;
        for src in order {
            if modules[src].len() >= min {
                continue;
            }
            let neighbours: Vec<(usize, f64)> = (0..modules.len())
                .filter(|&t| t != src)
                .map(|t| (t, between(&modules[src], &modules[t])))
                .filter(|(_, x)| *x > 0.0)
                .collect();
            if neighbours.is_empty() {
                continue;
            }
            let better = |a: &(usize, f64), b: &(usize, f64)| {
                b.1 > a.1 || (b.1 == a.1 && modules[b.0].first() < modules[a.0].first())
            };
            let mut best: Option<(usize, f64)> = None;
            for &n in &neighbours {
                if modules[n.0].len() + modules[src].len() <= max
                    && best.is_none_or(|b| better(&b, &n))
                {
                    best = Some(n);
                }
            }
            if best.is_none() {
                for &n in &neighbours {
                    if best.is_none_or(|b| better(&b, &n)) {
                        best = Some(n);
                    }
                }
            }
            let target = best.unwrap().0;
            let moved = std::mem::take(&mut modules[src]);
            modules[target].extend(moved);
            modules.remove(src);
            merged = true;
            break;
        }
        if !merged {
            return modules;
        }
    }
}

#[test]
fn chain_of_undersized_modules() {
    // a: {0,1}  b: {2,3}  c: {4,5}; chain a-b-c, plus a big module {6..11} tied to c
    let mut edges = vec![(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0), (3, 4, 1.0), (4, 5, 1.0), (5, 6, 1.0)];
    for i in 6..12 {
        for j in (i + 1)..12 {
            edges.push((i, j, 1.0));
        }
    }
    let g = call_graph(&edges);
    let sym = g.symmetrized();
    let ids = |v: &[usize]| v.iter().map(|&i| name(i)).collect::<BTreeSet<_>>();
    let p = ModulePartition::from_groups(
        &sym,
        vec![ids(&[0, 1]), ids(&[2, 3]), ids(&[4, 5]), ids(&[6, 7, 8, 9, 10, 11])],
    )
    .unwrap();
    let (out, steps) = repair_module_sizes(&g, &p, 3, 15).unwrap();
    // hand simulation: {0,1} (smallest member 0) merges into {2,3} (weight 2).
    // {4,5} is then adjacent to {0..3} and {6..11} with weight 1 each; the tie
    // goes to the module with the smaller first member, {0,1,2,3}.
    assert_eq!(steps.len(), 2);
    let groups: Vec<_> = out.modules().values().cloned().collect();
    assert_eq!(groups, vec![ids(&[0, 1, 2, 3, 4, 5]), ids(&[6, 7, 8, 9, 10, 11])]);
    let w = dense(12, &edges);
    let sim = simulate_repair(
        &w,
        vec![[0, 1].into(), [2, 3].into(), [4, 5].into(), (6..12).collect()],
        3,
        15,
    );
    let mut sim: Vec<BTreeSet<usize>> = sim;
    sim.sort();
    assert_eq!(sim, vec![(0..6).collect(), (6..12).collect::<BTreeSet<_>>()]);
}

fn random_instance(seed: u64) -> (Vec<(usize, usize, f64)>, usize, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(4..=24);
    let m = rng.random_range(n / 2..=n * 2);
    let mut edges = Vec::new();
    for _ in 0..m {
        edges.push((rng.random_range(0..n), rng.random_range(0..n), rng.random_range(1..=5) as f64));
    }
    // every node must be covered: chain any uncovered ones
    let mut seen = vec![false; n];
    for &(a, b, _) in &edges {
        seen[a] = true;
        seen[b] = true;
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            edges.push((i, (i + 1) % n, 1.0));
        }
    }
    let k = rng.random_range(1..=n);
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (edges, n, labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn repair_matches_simulation(seed in any::<u64>(), min in 1usize..7, extra in 0usize..10) {
        let (edges, n, labels) = random_instance(seed);
        let max = min + extra;
        let g = call_graph(&edges);
        let sym = g.symmetrized();
        // node names sort lexicographically, not numerically: map through ids
        let idx_of = |i: usize| sym.index_of(&name(i)).unwrap();
        let mut groups: std::collections::BTreeMap<usize, BTreeSet<String>> = Default::default();
        for (i, l) in labels.iter().enumerate() {
            groups.entry(*l).or_default().insert(name(i));
        }
        let p = ModulePartition::from_groups(&sym, groups.into_values().collect()).unwrap();
        let (out, _) = repair_module_sizes(&g, &p, min, max).unwrap();

        // node set preserved
        let covered: BTreeSet<&String> = out.modules().values().flatten().collect();
        prop_assert_eq!(covered.len(), n);
        prop_assert_eq!(out.assignment().len(), n);

        // simulation over graph indices (sorted-id order, like the implementation)
        let mut w = vec![vec![0.0; n]; n];
        for &(a, b, x) in &edges {
            w[idx_of(a)][idx_of(b)] += x;
            w[idx_of(b)][idx_of(a)] += x;
        }
        let start: Vec<BTreeSet<usize>> = p
            .modules()
            .values()
            .map(|m| m.iter().map(|id| sym.index_of(id).unwrap()).collect())
            .collect();
        let mut sim = simulate_repair(&w, start, min, max);
        sim.sort();
        let mut got: Vec<BTreeSet<usize>> = out
            .modules()
            .values()
            .map(|m| m.iter().map(|id| sym.index_of(id).unwrap()).collect())
            .collect();
        got.sort();
        prop_assert_eq!(&got, &sim);

        // nothing repairable remains undersized
        for (a, members) in out.modules() {
            if members.len() < min {
                for (b, others) in out.modules() {
                    if a != b {
                        let sym = &sym;
                        let x: f64 = members
                            .iter()
                            .flat_map(|i| others.iter().map(move |j| sym.weight_by_id(i, j)))
                            .sum();
                        prop_assert_eq!(x, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn leiden_beats_singletons_and_respects_cap(seed in any::<u64>(), cap in 2usize..10) {
        let (edges, n, _) = random_instance(seed);
        let g = call_graph(&edges);
        let sym = g.symmetrized();
        let config = LeidenConfig { max_size: cap, seed, ..LeidenConfig::default() };
        let run = leiden(&sym, &config).unwrap();
        let singleton: Vec<usize> = (0..n).collect();
        prop_assert!(run.quality >= modularity(&sym, &singleton).unwrap() - 1e-9);
        prop_assert!(run.trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!((run.quality - modularity(&sym, &run.membership).unwrap()).abs() < 1e-9);
        let mut sizes = std::collections::HashMap::new();
        for &c in &run.membership {
            *sizes.entry(c).or_insert(0usize) += 1;
        }
        prop_assert!(sizes.values().all(|&s| s <= cap));
        prop_assert!(run.quality <= 1.0 && run.quality >= -1.0);
    }
}
