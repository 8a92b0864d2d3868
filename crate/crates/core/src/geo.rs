//! Two-level geography: states, counties and the county adjacency graph.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub state_id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct County {
    pub county_id: String,
    pub state_id: String,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EdgeRow {
    county_id_a: String,
    county_id_b: String,
}

/// Validated geography. Counties and states keep their input order; that
/// order defines the dense indices used by the panels and the models.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoHierarchy {
    states: Vec<State>,
    counties: Vec<County>,
    /// Undirected edges as `(a, b)` county indices with `a < b`, sorted.
    edges: Vec<(usize, usize)>,
    county_state: Vec<usize>,
    state_counties: Vec<Vec<usize>>,
    state_index: HashMap<String, usize>,
    county_index: HashMap<String, usize>,
}

impl GeoHierarchy {
    /// Builds a hierarchy, symmetrizing and deduplicating the adjacency pairs.
    pub fn new(
        states: Vec<State>,
        counties: Vec<County>,
        pairs: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut problems = Vec::new();

        let mut state_index = HashMap::new();
        for (i, s) in states.iter().enumerate() {
            if state_index.insert(s.state_id.clone(), i).is_some() {
                problems.push(format!("duplicate state_id `{}`", s.state_id));
            }
        }

        let mut county_index = HashMap::new();
        let mut county_state = Vec::with_capacity(counties.len());
        let mut state_counties = vec![Vec::new(); states.len()];
        for (i, c) in counties.iter().enumerate() {
            if county_index.insert(c.county_id.clone(), i).is_some() {
                problems.push(format!("duplicate county_id `{}`", c.county_id));
            }
            match state_index.get(&c.state_id) {
                Some(&s) => {
                    county_state.push(s);
                    state_counties[s].push(i);
                }
                None => {
                    county_state.push(usize::MAX);
                    problems.push(format!(
                        "county `{}` references unknown state `{}`",
                        c.county_id, c.state_id
                    ));
                }
            }
        }

        let mut edges = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                problems.push(format!("self-loop on county `{a}`"));
                continue;
            }
            match (county_index.get(&a), county_index.get(&b)) {
                (Some(&i), Some(&j)) => {
                    edges.insert((i.min(j), i.max(j)));
                }
                (ia, ib) => {
                    if ia.is_none() {
                        problems.push(format!("adjacency references unknown county `{a}`"));
                    }
                    if ib.is_none() {
                        problems.push(format!("adjacency references unknown county `{b}`"));
                    }
                }
            }
        }

        if !problems.is_empty() {
            return Err(Error::Validation(problems));
        }
        Ok(Self {
            states,
            counties,
            edges: edges.into_iter().collect(),
            county_state,
            state_counties,
            state_index,
            county_index,
        })
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn counties(&self) -> &[County] {
        &self.counties
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_counties(&self) -> usize {
        self.counties.len()
    }

    pub fn state_of(&self, county: usize) -> usize {
        self.county_state[county]
    }

    pub fn counties_in(&self, state: usize) -> &[usize] {
        &self.state_counties[state]
    }

    pub fn state_index(&self, id: &str) -> Option<usize> {
        self.state_index.get(id).copied()
    }

    pub fn county_index(&self, id: &str) -> Option<usize> {
        self.county_index.get(id).copied()
    }

    pub fn state_ids(&self) -> Vec<String> {
        self.states.iter().map(|s| s.state_id.clone()).collect()
    }

    pub fn county_ids(&self) -> Vec<String> {
        self.counties.iter().map(|c| c.county_id.clone()).collect()
    }

    /// Writes `states.csv`, `counties.csv` and `adjacency.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        csvio::write_rows(&dir.join("states.csv"), &self.states)?;
        csvio::write_rows(&dir.join("counties.csv"), &self.counties)?;
        let rows: Vec<EdgeRow> = self
            .edges
            .iter()
            .map(|&(a, b)| EdgeRow {
                county_id_a: self.counties[a].county_id.clone(),
                county_id_b: self.counties[b].county_id.clone(),
            })
            .collect();
        csvio::write_rows(&dir.join("adjacency.csv"), &rows)
    }
}

pub fn load_geography(states_path: &Path, counties_path: &Path, adjacency_path: &Path) -> Result<GeoHierarchy> {
    let states: Vec<State> = csvio::read_rows(states_path)?;
    let counties: Vec<County> = csvio::read_rows(counties_path)?;
    let edges: Vec<EdgeRow> = csvio::read_rows(adjacency_path)?;
    GeoHierarchy::new(
        states,
        counties,
        edges.into_iter().map(|e| (e.county_id_a, e.county_id_b)),
    )
}

/// Neighbor lists for the intrinsic CAR prior.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborStructure {
    pub neighbors: Vec<Vec<usize>>,
    pub edges: Vec<(usize, usize)>,
    /// `true` for counties with no neighbors.
    pub islands: Vec<bool>,
    /// Connected components of the non-island counties.
    pub components: Vec<Vec<usize>>,
}

/// Eigenvector of a component's graph Laplacian with a positive eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianMode {
    pub eigenvalue: f64,
    /// `(node, loading)` over the nodes of the component.
    pub loadings: Vec<(usize, f64)>,
}

impl NeighborStructure {
    /// Non-constant Laplacian modes of each component, smoothest first.
    pub fn laplacian_modes(&self) -> Vec<Vec<LaplacianMode>> {
        self.components
            .iter()
            .map(|comp| {
                let n = comp.len();
                let mut lap = DMatrix::<f64>::zeros(n, n);
                for (i, &c) in comp.iter().enumerate() {
                    for &nb in &self.neighbors[c] {
                        let j = comp.binary_search(&nb).expect("neighbor in component");
                        lap[(i, j)] -= 1.0;
                        lap[(i, i)] += 1.0;
                    }
                }
                let eig = SymmetricEigen::new(lap);
                let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
                let mut modes: Vec<LaplacianMode> = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .filter(|&(_, &l)| l > 1e-9 * max.max(1.0))
                    .map(|(k, &eigenvalue)| LaplacianMode {
                        eigenvalue,
                        loadings: comp
                            .iter()
                            .enumerate()
                            .map(|(i, &c)| (c, eig.eigenvectors[(i, k)]))
                            .collect(),
                    })
                    .collect();
                modes.sort_by(|a, b| a.eigenvalue.total_cmp(&b.eigenvalue));
                modes
            })
            .collect()
    }

    pub fn n_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbor_count(&self, c: usize) -> usize {
        self.neighbors[c].len()
    }

    /// Rank of the ICAR precision matrix: non-island nodes minus components.
    pub fn rank(&self) -> usize {
        let connected = self.islands.iter().filter(|&&i| !i).count();
        connected - self.components.len()
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let islands: Vec<bool> = neighbors.iter().map(|l| l.is_empty()).collect();

        let mut seen = vec![false; n];
        let mut components = Vec::new();
        for start in 0..n {
            if seen[start] || islands[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(v) = stack.pop() {
                comp.push(v);
                for &w in &neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }

        Self {
            neighbors,
            edges: edges.to_vec(),
            islands,
            components,
        }
    }
}

pub fn build_icar_structure(geo: &GeoHierarchy) -> NeighborStructure {
    NeighborStructure::from_edges(geo.n_counties(), geo.edges())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(id: &str) -> State {
        State {
            state_id: id.into(),
            name: format!("State {id}"),
        }
    }

    fn co(id: &str, s: &str) -> County {
        County {
            county_id: id.into(),
            state_id: s.into(),
            name: format!("County {id}"),
        }
    }

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.into(), b.into())
    }

    #[test]
    fn island_is_allowed() {
        let geo = GeoHierarchy::new(
            vec![st("A"), st("B")],
            vec![co("c1", "A"), co("c2", "A"), co("c3", "B")],
            vec![pair("c1", "c2"), pair("c2", "c1")],
        )
        .unwrap();
        assert_eq!(geo.edges(), &[(0, 1)]);
        let nb = build_icar_structure(&geo);
        assert!(nb.islands[2]);
        assert_eq!(nb.neighbor_count(2), 0);
        assert_eq!(nb.components, vec![vec![0, 1]]);
        assert_eq!(nb.rank(), 1);
    }

    #[test]
    fn self_loop_rejected() {
        let err = GeoHierarchy::new(vec![st("A")], vec![co("c1", "A")], vec![pair("c1", "c1")]).unwrap_err();
        assert!(err.to_string().contains("self-loop"));
    }

    #[test]
    fn dangling_state_rejected() {
        let err = GeoHierarchy::new(vec![st("A")], vec![co("c1", "A"), co("c2", "ZZ")], Vec::new()).unwrap_err();
        match err {
            Error::Validation(p) => assert!(p[0].contains("ZZ")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn neighbor_counts() {
        let path = NeighborStructure::from_edges(3, &[(0, 1), (1, 2)]);
        let counts: Vec<usize> = (0..3).map(|c| path.neighbor_count(c)).collect();
        assert_eq!(counts, vec![1, 2, 1]);

        let complete = NeighborStructure::from_edges(3, &[(0, 1), (0, 2), (1, 2)]);
        let counts: Vec<usize> = (0..3).map(|c| complete.neighbor_count(c)).collect();
        assert_eq!(counts, vec![2, 2, 2]);
    }
}
