//! Live dependency graph over task instances.
//!
//! Edges point from a dependency to its dependent. Runtime additions only ever
//! add edges into freshly created instances, so the graph stays acyclic
//! without a cycle check on the hot path.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::config::WorkflowSpec;
use crate::ids::InstanceId;
use crate::registry::TaskState;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdditionError {
    #[error("task `{0}` is not declared")]
    Undeclared(String),
    #[error("task `{name}` is not in the add_tasks of `{checkpoint}`")]
    NotPermitted { name: String, checkpoint: String },
    #[error("instance {0} is not part of the graph")]
    UnknownAnchor(InstanceId),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LiveGraph {
    instances: BTreeSet<InstanceId>,
    /// (dependency, dependent)
    edges: BTreeSet<(InstanceId, InstanceId)>,
    /// Instances not yet terminal.
    active: BTreeSet<InstanceId>,
    /// Creation order, used for deterministic iteration.
    order: Vec<InstanceId>,
}

impl LiveGraph {
    /// One generation-1 instance per initially active task. Dependencies on
    /// tasks that are declared but not active are satisfied vacuously.
    pub fn build_initial(spec: &WorkflowSpec) -> Self {
        let mut graph = LiveGraph::default();
        for name in &spec.initial_active {
            graph.insert(InstanceId::first(name.clone()));
        }
        let active_names: BTreeSet<&str> = spec.initial_active.iter().map(String::as_str).collect();
        for name in &spec.initial_active {
            for dep in &spec.tasks[name].depends_on {
                if active_names.contains(dep.as_str()) {
                    graph
                        .edges
                        .insert((InstanceId::first(dep.clone()), InstanceId::first(name.clone())));
                }
            }
        }
        graph
    }

    /// Rebuilds a graph from its serialized view. Instances whose recorded
    /// state is terminal are retired.
    pub fn from_view(view: &GraphView) -> Self {
        let mut graph = LiveGraph::default();
        for node in &view.nodes {
            graph.insert(node.id.clone());
            if node.state.is_some_and(TaskState::is_terminal) {
                graph.retire(&node.id);
            }
        }
        for edge in &view.edges {
            graph.edges.insert((edge.from.clone(), edge.to.clone()));
        }
        graph
    }

    fn insert(&mut self, id: InstanceId) {
        self.instances.insert(id.clone());
        self.active.insert(id.clone());
        self.order.push(id);
    }

    pub fn instances(&self) -> &BTreeSet<InstanceId> {
        &self.instances
    }

    /// Instances in the order they were created.
    pub fn creation_order(&self) -> &[InstanceId] {
        &self.order
    }

    pub fn edges(&self) -> &BTreeSet<(InstanceId, InstanceId)> {
        &self.edges
    }

    pub fn active(&self) -> &BTreeSet<InstanceId> {
        &self.active
    }

    pub fn contains(&self, id: &InstanceId) -> bool {
        self.instances.contains(id)
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    /// Marks an instance terminal; it no longer anchors edges for later additions.
    pub fn retire(&mut self, id: &InstanceId) {
        self.active.remove(id);
    }

    pub fn dependencies<'a>(&'a self, id: &'a InstanceId) -> impl Iterator<Item = &'a InstanceId> + 'a {
        self.edges.iter().filter(move |(_, to)| to == id).map(|(from, _)| from)
    }

    pub fn dependents<'a>(&'a self, id: &'a InstanceId) -> impl Iterator<Item = &'a InstanceId> + 'a {
        self.edges.iter().filter(move |(from, _)| from == id).map(|(_, to)| to)
    }

    /// Every instance reachable from `id` along dependency edges, excluding `id`.
    pub fn downstream(&self, id: &InstanceId) -> BTreeSet<InstanceId> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![id.clone()];
        while let Some(cur) = stack.pop() {
            for next in self.dependents(&cur) {
                if seen.insert(next.clone()) {
                    stack.push(next.clone());
                }
            }
        }
        seen
    }

    /// Pending instances whose every dependency has Succeeded, in creation order.
    pub fn ready_set(&self, states: &BTreeMap<InstanceId, TaskState>) -> Vec<InstanceId> {
        let mut blocked: BTreeSet<&InstanceId> = BTreeSet::new();
        for (from, to) in &self.edges {
            if states.get(from) != Some(&TaskState::Succeeded) {
                blocked.insert(to);
            }
        }
        self.order
            .iter()
            .filter(|id| states.get(*id) == Some(&TaskState::Pending) && !blocked.contains(id))
            .cloned()
            .collect()
    }

    fn next_generation(&self, base: &str) -> u32 {
        self.instances
            .iter()
            .filter(|i| i.base() == base)
            .map(InstanceId::generation)
            .max()
            .unwrap_or(0)
            + 1
    }

    /// Newest existing instance of `base`, ignoring `exclude`.
    fn latest_before(&self, base: &str, exclude: &[InstanceId]) -> Option<InstanceId> {
        self.instances
            .iter()
            .filter(|i| i.base() == base && !exclude.contains(i))
            .max_by_key(|i| i.generation())
            .cloned()
    }

    /// Activates `names` after the checkpoint instance `after`.
    ///
    /// Each name gets a new generation, an edge from `after`, and one edge per
    /// declared dependency: from the instance being added alongside it, or
    /// else from the newest existing instance of that task, whatever its
    /// state. Dependencies with no instance at all are satisfied vacuously.
    /// Either everything is added or nothing is.
    pub fn apply_additions(
        &mut self,
        spec: &WorkflowSpec,
        names: &[String],
        after: &InstanceId,
    ) -> Result<Vec<InstanceId>, AdditionError> {
        if !self.instances.contains(after) {
            return Err(AdditionError::UnknownAnchor(after.clone()));
        }
        let anchor = spec
            .task(after.base())
            .ok_or_else(|| AdditionError::Undeclared(after.base().to_string()))?;
        for name in names {
            if spec.task(name).is_none() {
                return Err(AdditionError::Undeclared(name.clone()));
            }
            if !anchor.permits_addition(name) {
                return Err(AdditionError::NotPermitted {
                    name: name.clone(),
                    checkpoint: after.base().to_string(),
                });
            }
        }

        let mut created: BTreeMap<&str, InstanceId> = BTreeMap::new();
        let mut new_ids = Vec::with_capacity(names.len());
        for name in names {
            if created.contains_key(name.as_str()) {
                continue;
            }
            let id = InstanceId::new(name.clone(), self.next_generation(name));
            self.insert(id.clone());
            created.insert(name, id.clone());
            new_ids.push(id);
        }

        for id in &new_ids {
            self.edges.insert((after.clone(), id.clone()));
            for dep in &spec.tasks[id.base()].depends_on {
                if let Some(co_added) = created.get(dep.as_str()) {
                    self.edges.insert((co_added.clone(), id.clone()));
                } else if let Some(latest) = self.latest_before(dep, &new_ids) {
                    self.edges.insert((latest, id.clone()));
                }
            }
        }
        Ok(new_ids)
    }

    /// Serializable node/edge listing.
    pub fn view(&self, states: &BTreeMap<InstanceId, TaskState>) -> GraphView {
        GraphView {
            nodes: self
                .order
                .iter()
                .map(|id| GraphNode {
                    id: id.clone(),
                    base: id.base().to_string(),
                    generation: id.generation(),
                    state: states.get(id).copied(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|(from, to)| GraphEdge {
                    from: from.clone(),
                    to: to.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct GraphNode {
    pub id: InstanceId,
    pub base: String,
    pub generation: u32,
    pub state: Option<TaskState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct GraphEdge {
    pub from: InstanceId,
    pub to: InstanceId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct GraphView {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl GraphView {
    /// Shape only: node ids and edges, states dropped.
    pub fn shape(&self) -> (BTreeSet<InstanceId>, BTreeSet<(InstanceId, InstanceId)>) {
        (
            self.nodes.iter().map(|n| n.id.clone()).collect(),
            self.edges.iter().map(|e| (e.from.clone(), e.to.clone())).collect(),
        )
    }
}
