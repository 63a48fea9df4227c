//! Assignment of workers to compute nodes.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("node map is empty")]
    Empty,
    #[error("node ids must be dense: node {0} has no workers")]
    EmptyNode(usize),
}

/// `node_of[w]` is the node hosting worker `w`; node ids are `0..nodes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NodeMap {
    node_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl NodeMap {
    pub fn from_assignment(node_of: Vec<usize>) -> Result<Self, TopologyError> {
        let nodes = node_of.iter().max().map(|m| m + 1).ok_or(TopologyError::Empty)?;
        let mut members = vec![Vec::new(); nodes];
        for (w, &node) in node_of.iter().enumerate() {
            members[node].push(w);
        }
        if let Some(empty) = members.iter().position(|m| m.is_empty()) {
            return Err(TopologyError::EmptyNode(empty));
        }
        Ok(NodeMap { node_of, members })
    }

    /// `nodes × per_node` workers with worker `w` on node `w / per_node`.
    pub fn uniform(nodes: usize, per_node: usize) -> Self {
        let node_of = (0..nodes * per_node).map(|w| w / per_node).collect();
        NodeMap::from_assignment(node_of).expect("uniform layout is dense")
    }

    pub fn workers(&self) -> usize {
        self.node_of.len()
    }

    pub fn nodes(&self) -> usize {
        self.members.len()
    }

    pub fn node_of(&self, worker: usize) -> usize {
        self.node_of[worker]
    }

    pub fn same_node(&self, a: usize, b: usize) -> bool {
        self.node_of[a] == self.node_of[b]
    }

    /// Workers of `node` in ascending order.
    pub fn members(&self, node: usize) -> &[usize] {
        &self.members[node]
    }

    /// Position of `worker` among the workers of its node.
    pub fn local_rank(&self, worker: usize) -> usize {
        let node = self.node_of[worker];
        self.members[node]
            .iter()
            .position(|&w| w == worker)
            .expect("worker is on its node")
    }

    /// `Some(m)` when every node hosts exactly `m` workers laid out as
    /// `node · m + rank`.
    pub fn uniform_width(&self) -> Option<usize> {
        let m = self.members[0].len();
        let regular = self.node_of.iter().enumerate().all(|(w, &node)| node == w / m);
        (regular && self.node_of.len() == m * self.members.len()).then_some(m)
    }
}

impl TryFrom<Vec<usize>> for NodeMap {
    type Error = TopologyError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        NodeMap::from_assignment(v)
    }
}

impl From<NodeMap> for Vec<usize> {
    fn from(m: NodeMap) -> Self {
        m.node_of
    }
}
