//! Exact transportation LP by the primal network simplex.
//!
//! The graph has one node per cell (supply), one per particle (demand) and an
//! artificial root. The spanning tree starts as the artificial star and is
//! kept between solves of the same shape, so a sequence of nearby problems
//! (the energy-minimization fixed point, successive time steps) restarts from
//! the previous optimal basis whenever that basis is still primal feasible.
//! Pivoting uses block-search pricing and the strongly feasible leaving-arc
//! rule, which rules out cycling and makes every solve deterministic.

use serde::{Deserialize, Serialize};

use super::{check_marginals, CostMatrix, KantorovichPotentials, OtSolution, TransportPlan};
use crate::error::{Error, Result};

/// `(row, column, mass)`
type Triplet = (usize, usize, f64);

const NONE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOptions {
    pub max_cells: usize,
    pub max_particles: usize,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            max_cells: 4096,
            max_particles: 512,
        }
    }
}

#[derive(Debug, Clone)]
struct Tree {
    parent: Vec<usize>,
    pred: Vec<usize>,
    up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    adj: Vec<Vec<(usize, usize)>>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
}

/// Reusable network simplex workspace for problems of one shape.
#[derive(Debug, Clone)]
pub struct NetworkSimplex {
    m: usize,
    n: usize,
    tree: Option<Tree>,
    next_arc: usize,
    pub pivots: usize,
    pub warm_starts: usize,
}

struct Problem<'a> {
    m: usize,
    n: usize,
    cost: &'a [f64],
    art_cost: f64,
    eps: f64,
}

impl Problem<'_> {
    #[inline]
    fn real(&self) -> usize {
        self.m * self.n
    }

    #[inline]
    fn root(&self) -> usize {
        self.m + self.n
    }

    #[inline]
    fn source(&self, a: usize) -> usize {
        if a < self.real() {
            a / self.n
        } else {
            let u = a - self.real();
            if u < self.m {
                u
            } else {
                self.root()
            }
        }
    }

    #[inline]
    fn arc_cost(&self, a: usize) -> f64 {
        if a < self.real() {
            self.cost[a]
        } else if a - self.real() < self.m {
            0.0
        } else {
            self.art_cost
        }
    }
}

impl NetworkSimplex {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            tree: None,
            next_arc: 0,
            pivots: 0,
            warm_starts: 0,
        }
    }

    /// Drops the stored basis so the next solve starts cold.
    pub fn reset(&mut self) {
        self.tree = None;
        self.next_arc = 0;
    }

    fn supply(&self, masses: &[f64], weights: &[f64], u: usize) -> f64 {
        if u < self.m {
            masses[u]
        } else if u < self.m + self.n {
            -weights[u - self.m]
        } else {
            0.0
        }
    }

    fn cold_tree(&self, p: &Problem, masses: &[f64], weights: &[f64]) -> Tree {
        let nodes = self.m + self.n + 1;
        let root = p.root();
        let arcs = p.real() + self.m + self.n;
        let mut t = Tree {
            parent: vec![root; nodes],
            pred: vec![NONE; nodes],
            up: vec![false; nodes],
            depth: vec![1; nodes],
            pi: vec![0.0; nodes],
            adj: vec![Vec::new(); nodes],
            flow: vec![0.0; arcs],
            in_tree: vec![false; p.real()],
        };
        t.parent[root] = NONE;
        t.depth[root] = 0;
        for u in 0..self.m + self.n {
            let a = p.real() + u;
            t.pred[u] = a;
            t.adj[root].push((u, a));
            t.adj[u].push((root, a));
            if u < self.m {
                t.up[u] = true;
                t.flow[a] = masses[u];
                t.pi[u] = 0.0;
            } else {
                t.up[u] = false;
                t.flow[a] = weights[u - self.m];
                t.pi[u] = p.art_cost;
            }
        }
        t
    }

    /// Feasible staircase basis from the north-west corner rule with cells
    /// grouped by the particle `hint` assigns them to. With a hint taken from
    /// a nearby optimal plan this lands close to the new optimum.
    fn staircase_tree(&self, p: &Problem, masses: &[f64], weights: &[f64], hint: &[usize]) -> Tree {
        let (m, n) = (self.m, self.n);
        let root = p.root();
        let nodes = m + n + 1;
        let mut cells: Vec<usize> = (0..m).collect();
        cells.sort_by_key(|&i| (hint[i], i));
        let arcs = p.real() + m + n;
        let mut flow = vec![0.0; arcs];
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        let mut in_tree = vec![false; p.real()];
        let (mut a, mut b) = (0usize, 0usize);
        let mut ri = masses[cells[0]];
        let mut rj = weights[0];
        loop {
            let i = cells[a];
            let e = i * n + b;
            let q = ri.min(rj).max(0.0);
            flow[e] = q;
            in_tree[e] = true;
            adj[i].push((m + b, e));
            adj[m + b].push((i, e));
            ri -= q;
            rj -= q;
            if a + 1 == m && b + 1 == n {
                break;
            }
            if (ri <= rj && a + 1 < m) || b + 1 == n {
                a += 1;
                ri = masses[cells[a]];
            } else {
                b += 1;
                rj = weights[b];
            }
        }
        // hang the staircase from the root through the first cell's slack arc
        let c0 = cells[0];
        let art = p.real() + c0;
        adj[root].push((c0, art));
        adj[c0].push((root, art));
        let mut t = Tree {
            parent: vec![NONE; nodes],
            pred: vec![NONE; nodes],
            up: vec![false; nodes],
            depth: vec![0; nodes],
            pi: vec![0.0; nodes],
            adj,
            flow,
            in_tree,
        };
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for k in 0..t.adj[u].len() {
                let (v, e) = t.adj[u][k];
                if v == t.parent[u] {
                    continue;
                }
                t.parent[v] = u;
                t.pred[v] = e;
                t.up[v] = p.source(e) == v;
                stack.push(v);
            }
        }
        t
    }

    /// Dominant particle per cell in `t`, falling back to the cheapest one.
    fn assignment_hint(&self, t: Option<&Tree>, p: &Problem) -> Vec<usize> {
        let n = self.n;
        (0..self.m)
            .map(|i| {
                let from_tree = t.and_then(|t| {
                    t.adj[i]
                        .iter()
                        .filter(|&&(_, e)| e < p.real() && t.flow[e] > 0.0)
                        .max_by(|x, y| t.flow[x.1].total_cmp(&t.flow[y.1]).then(y.1.cmp(&x.1)))
                        .map(|&(_, e)| e % n)
                });
                from_tree.unwrap_or_else(|| {
                    let row = &p.cost[i * n..(i + 1) * n];
                    (0..n)
                        .min_by(|&x, &y| row[x].total_cmp(&row[y]).then(x.cmp(&y)))
                        .unwrap()
                })
            })
            .collect()
    }

    /// Recomputes tree flows for new marginals. Returns false, leaving the
    /// tree untouched, if the basis is no longer primal feasible.
    fn refill(&self, t: &mut Tree, p: &Problem, masses: &[f64], weights: &[f64]) -> bool {
        let root = p.root();
        let order = preorder(t, root);
        let mut sub: Vec<f64> = (0..=root).map(|u| self.supply(masses, weights, u)).collect();
        let total: f64 = masses.iter().sum();
        let tol = 1e-14 * total.max(1.0);
        let mut fresh = vec![0.0; root];
        for &u in order.iter().rev() {
            if u == root {
                continue;
            }
            let s = sub[u];
            let f = if t.up[u] { s } else { -s };
            if f < -tol {
                return false;
            }
            fresh[u] = f.max(0.0);
            let par = t.parent[u];
            sub[par] += s;
        }
        // only commit once the whole basis is known to be feasible
        for (u, f) in fresh.into_iter().enumerate() {
            t.flow[t.pred[u]] = f;
        }
        true
    }

    fn refresh_potentials(t: &mut Tree, p: &Problem) {
        let root = p.root();
        t.pi[root] = 0.0;
        t.depth[root] = 0;
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for k in 0..t.adj[u].len() {
                let (v, a) = t.adj[u][k];
                if v == t.parent[u] {
                    continue;
                }
                let c = p.arc_cost(a);
                t.pi[v] = if t.up[v] { t.pi[u] - c } else { t.pi[u] + c };
                t.depth[v] = t.depth[u] + 1;
                stack.push(v);
            }
        }
    }

    fn find_entering(&mut self, t: &Tree, p: &Problem) -> Option<usize> {
        let total = p.real();
        let block = ((total as f64).sqrt() as usize).max(10).min(total);
        let mut e = self.next_arc % total;
        let mut i = e / p.n;
        let mut j = e % p.n;
        let mut best = NONE;
        let mut min = -p.eps;
        let mut cnt = block;
        for _ in 0..total {
            if !t.in_tree[e] {
                let rc = p.cost[e] + t.pi[i] - t.pi[p.m + j];
                if rc < min {
                    min = rc;
                    best = e;
                }
            }
            e += 1;
            j += 1;
            if j == p.n {
                j = 0;
                i += 1;
            }
            if e == total {
                e = 0;
                i = 0;
                j = 0;
            }
            cnt -= 1;
            if cnt == 0 {
                if best != NONE {
                    self.next_arc = e;
                    return Some(best);
                }
                cnt = block;
            }
        }
        if best != NONE {
            self.next_arc = e;
            Some(best)
        } else {
            None
        }
    }

    fn pivot(t: &mut Tree, p: &Problem, e: usize) -> Result<()> {
        let first = e / p.n;
        let second = p.m + e % p.n;
        let mut a = first;
        let mut b = second;
        while a != b {
            if t.depth[a] > t.depth[b] {
                a = t.parent[a];
            } else if t.depth[a] < t.depth[b] {
                b = t.parent[b];
            } else {
                a = t.parent[a];
                b = t.parent[b];
            }
        }
        let join = a;

        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut on_first = true;
        let mut u = first;
        while u != join {
            if t.up[u] {
                let d = t.flow[t.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                    on_first = true;
                }
            }
            u = t.parent[u];
        }
        u = second;
        while u != join {
            if !t.up[u] {
                let d = t.flow[t.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    on_first = false;
                }
            }
            u = t.parent[u];
        }
        if u_out == NONE {
            return Err(Error::Internal("unbounded pivot in transport LP".into()));
        }

        if delta > 0.0 {
            t.flow[e] += delta;
            u = first;
            while u != join {
                let a = t.pred[u];
                if t.up[u] {
                    t.flow[a] -= delta;
                } else {
                    t.flow[a] += delta;
                }
                u = t.parent[u];
            }
            u = second;
            while u != join {
                let a = t.pred[u];
                if t.up[u] {
                    t.flow[a] += delta;
                } else {
                    t.flow[a] -= delta;
                }
                u = t.parent[u];
            }
        }
        let leaving = t.pred[u_out];
        t.flow[leaving] = 0.0;
        let v_out = t.parent[u_out];
        remove_adj(&mut t.adj[u_out], leaving);
        remove_adj(&mut t.adj[v_out], leaving);
        if leaving < p.real() {
            t.in_tree[leaving] = false;
        }
        t.in_tree[e] = true;
        t.adj[first].push((second, e));
        t.adj[second].push((first, e));

        let (q, par) = if on_first { (first, second) } else { (second, first) };
        let mut stack = vec![(q, par, e)];
        while let Some((u, par, arc)) = stack.pop() {
            t.parent[u] = par;
            t.pred[u] = arc;
            t.up[u] = p.source(arc) == u;
            t.depth[u] = t.depth[par] + 1;
            let c = p.arc_cost(arc);
            t.pi[u] = if t.up[u] { t.pi[par] - c } else { t.pi[par] + c };
            for &(v, a) in &t.adj[u] {
                if v != par {
                    stack.push((v, u, a));
                }
            }
        }
        Ok(())
    }

    fn run(&mut self, t: &mut Tree, p: &Problem, cap: usize) -> Result<bool> {
        let mut count = 0usize;
        while let Some(e) = self.find_entering(t, p) {
            Self::pivot(t, p, e)?;
            count += 1;
            self.pivots += 1;
            if count > cap {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Solves the balanced problem with row-major cost table `cost`.
    /// Returns `(triplets, row potentials, column potentials)` with
    /// `rc = C_ij + pi_i - pi_j >= 0` and zero on the basis.
    pub fn solve(
        &mut self,
        masses: &[f64],
        weights: &[f64],
        cost: &[f64],
    ) -> Result<(Vec<Triplet>, Vec<f64>, Vec<f64>)> {
        let (m, n) = (self.m, self.n);
        if masses.len() != m || weights.len() != n || cost.len() != m * n {
            return Err(Error::Input("network simplex shape mismatch".into()));
        }
        let cmax = cost.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let p = Problem {
            m,
            n,
            cost,
            art_cost: (cmax + 1.0) * (m + n) as f64,
            eps: 1e-13 * (1.0 + cmax),
        };
        let cap = 50 * (m + n) * (m + n).max(64) + 10 * m * n;

        let mut done = false;
        let mut hint_source = None;
        if let Some(mut t) = self.tree.take() {
            let ok = self.refill(&mut t, &p, masses, weights) && {
                Self::refresh_potentials(&mut t, &p);
                self.run(&mut t, &p, cap)?
            };
            if ok {
                self.warm_starts += 1;
                self.tree = Some(t);
                done = true;
            } else {
                hint_source = Some(t);
            }
        }
        if !done && m > 0 && n > 0 {
            // the old basis no longer fits the marginals; restart from a
            // staircase shaped like the old plan
            let hint = self.assignment_hint(hint_source.as_ref(), &p);
            let mut t = self.staircase_tree(&p, masses, weights, &hint);
            if self.refill(&mut t, &p, masses, weights) {
                Self::refresh_potentials(&mut t, &p);
                if self.run(&mut t, &p, cap)? {
                    self.tree = Some(t);
                    done = true;
                }
            }
        }
        if !done {
            let mut t = self.cold_tree(&p, masses, weights);
            if !self.run(&mut t, &p, cap)? {
                return Err(Error::Internal("network simplex exceeded its pivot budget".into()));
            }
            self.tree = Some(t);
        }

        let t = self.tree.as_ref().unwrap();
        let total: f64 = masses.iter().sum();
        let art: f64 = (0..m + n).map(|u| t.flow[p.real() + u]).sum();
        if art > 1e-9 * total.max(1.0) + 2.0 * (total - weights.iter().sum::<f64>()).abs() {
            return Err(Error::Internal(format!(
                "transport LP left {art} units on artificial arcs"
            )));
        }
        let mut trip = Vec::new();
        for u in 0..m + n {
            let a = t.pred[u];
            if a < p.real() && t.flow[a] > 0.0 {
                trip.push((a / n, a % n, t.flow[a]));
            }
        }
        // Every tree arc is the pred of exactly one node.
        trip.sort_by_key(|x| (x.0, x.1));
        let pi_r = t.pi[..m].to_vec();
        let pi_c = t.pi[m..m + n].to_vec();
        Ok((trip, pi_r, pi_c))
    }
}

fn remove_adj(list: &mut Vec<(usize, usize)>, arc: usize) {
    if let Some(k) = list.iter().position(|&(_, a)| a == arc) {
        list.swap_remove(k);
    }
}

fn preorder(t: &Tree, root: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(t.parent.len());
    let mut stack = vec![root];
    while let Some(u) = stack.pop() {
        out.push(u);
        for &(v, _) in &t.adj[u] {
            if v != t.parent[u] {
                stack.push(v);
            }
        }
    }
    out
}

/// Turns simplex duals into the canonical potential pair: `g` from the
/// simplex, `f` its c-transform, then gauged.
fn finish(
    m: usize,
    n: usize,
    masses: &[f64],
    cost: &[f64],
    trip: Vec<(usize, usize, f64)>,
    pi_c: Vec<f64>,
) -> Result<OtSolution> {
    let mut terms: Vec<f64> = trip.iter().map(|&(i, j, v)| v * cost[i * n + j]).collect();
    // Sorted summation makes the total independent of how the support is labelled.
    terms.sort_by(f64::total_cmp);
    let total_cost = terms.iter().sum();
    let g = pi_c;
    let f: Vec<f64> = (0..m)
        .map(|i| {
            let row = &cost[i * n..(i + 1) * n];
            row.iter().zip(&g).map(|(c, gj)| c - gj).fold(f64::INFINITY, f64::min)
        })
        .collect();
    let plan = TransportPlan::from_triplets(m, n, trip)?;
    Ok(OtSolution {
        plan,
        potentials: KantorovichPotentials::gauged(f, g, masses),
        total_cost,
        smooth: None,
    })
}

/// Exact solve on raw slices without a size cap.
pub fn solve_transport(masses: &[f64], weights: &[f64], cost: &[f64]) -> Result<OtSolution> {
    let m = masses.len();
    let n = weights.len();
    check_marginals(masses, weights, m, n)?;
    if cost.len() != m * n || cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Input("cost table must be finite with one entry per pair".into()));
    }
    let mut ns = NetworkSimplex::new(m, n);
    let (trip, _, pi_c) = ns.solve(masses, weights, cost)?;
    finish(m, n, masses, cost, trip, pi_c)
}

/// Exact solver holding a warm-start basis between calls.
#[derive(Debug, Clone)]
pub struct ExactSolver {
    pub options: ExactOptions,
    simplex: Option<NetworkSimplex>,
}

impl ExactSolver {
    pub fn new(options: ExactOptions) -> Self {
        Self { options, simplex: None }
    }

    pub fn check_capacity(&self, cells: usize, particles: usize) -> Result<()> {
        if cells > self.options.max_cells || particles > self.options.max_particles {
            return Err(Error::Capacity {
                cells,
                particles,
                cap_cells: self.options.max_cells,
                cap_particles: self.options.max_particles,
            });
        }
        Ok(())
    }

    /// Total pivots and warm-started solves so far.
    pub fn stats(&self) -> (usize, usize) {
        self.simplex.as_ref().map_or((0, 0), |s| (s.pivots, s.warm_starts))
    }

    pub fn solve(&mut self, masses: &[f64], weights: &[f64], c: &CostMatrix) -> Result<OtSolution> {
        let (m, n) = (c.rows(), c.cols());
        check_marginals(masses, weights, m, n)?;
        self.check_capacity(m, n)?;
        let reuse = matches!(&self.simplex, Some(s) if s.m == m && s.n == n);
        if !reuse {
            self.simplex = Some(NetworkSimplex::new(m, n));
        }
        let ns = self.simplex.as_mut().unwrap();
        let (trip, _, pi_c) = ns.solve(masses, weights, c.data())?;
        finish(m, n, masses, c.data(), trip, pi_c)
    }
}

/// One-shot exact solve with a size cap.
pub fn solve_exact(masses: &[f64], weights: &[f64], c: &CostMatrix, options: &ExactOptions) -> Result<OtSolution> {
    ExactSolver::new(*options).solve(masses, weights, c)
}
