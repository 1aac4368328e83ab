//! Dinic max-flow over real-valued capacities.

use std::collections::VecDeque;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: f64,
    rev: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FlowNetwork {
    graph: Vec<Vec<Edge>>,
}

impl FlowNetwork {
    pub fn new(vertices: usize) -> Self {
        FlowNetwork { graph: vec![Vec::new(); vertices] }
    }

    pub fn add_vertex(&mut self) -> usize {
        self.graph.push(Vec::new());
        self.graph.len() - 1
    }

    pub fn add_edge(&mut self, from: usize, to: usize, cap: f64) {
        let rev_from = self.graph[to].len();
        let rev_to = self.graph[from].len() + usize::from(from == to);
        self.graph[from].push(Edge { to, cap, rev: rev_from });
        self.graph[to].push(Edge { to: from, cap: 0.0, rev: rev_to });
    }

    fn levels(&self, s: usize, t: usize) -> Option<Vec<i64>> {
        let mut level = vec![-1i64; self.graph.len()];
        level[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(v) = q.pop_front() {
            for e in &self.graph[v] {
                if e.cap > EPS && level[e.to] < 0 {
                    level[e.to] = level[v] + 1;
                    q.push_back(e.to);
                }
            }
        }
        (level[t] >= 0).then_some(level)
    }

    fn push(&mut self, v: usize, t: usize, f: f64, level: &[i64], iter: &mut [usize]) -> f64 {
        if v == t {
            return f;
        }
        while iter[v] < self.graph[v].len() {
            let i = iter[v];
            let Edge { to, cap, rev } = self.graph[v][i];
            if cap > EPS && level[to] == level[v] + 1 {
                let d = self.push(to, t, f.min(cap), level, iter);
                if d > EPS {
                    self.graph[v][i].cap -= d;
                    self.graph[to][rev].cap += d;
                    return d;
                }
            }
            iter[v] += 1;
        }
        0.0
    }

    /// Consumes residual capacity; call on a fresh network per query.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut total = 0.0;
        while let Some(level) = self.levels(s, t) {
            let mut iter = vec![0usize; self.graph.len()];
            loop {
                let f = self.push(s, t, f64::INFINITY, &level, &mut iter);
                if f <= EPS {
                    break;
                }
                total += f;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_instance() {
        // CLRS figure 26.1: max flow 23.
        let mut g = FlowNetwork::new(6);
        for (a, b, c) in [(0, 1, 16.0), (0, 2, 13.0), (1, 3, 12.0), (2, 1, 4.0), (2, 4, 14.0),
            (3, 2, 9.0), (3, 5, 20.0), (4, 3, 7.0), (4, 5, 4.0)] {
            g.add_edge(a, b, c);
        }
        assert!((g.max_flow(0, 5) - 23.0).abs() < 1e-9);
    }

    #[test]
    fn disconnected_is_zero() {
        let mut g = FlowNetwork::new(3);
        g.add_edge(0, 1, 5.0);
        assert_eq!(g.max_flow(0, 2), 0.0);
    }
}
