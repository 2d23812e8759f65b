//! Named parameter storage, training-stage groups and forward sessions.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradCheckTarget, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// Training-stage ownership of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Base,
    HanEncoder,
    HanDecoder,
    Copy,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Base,
        ParamGroup::HanEncoder,
        ParamGroup::HanDecoder,
        ParamGroup::Copy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::HanEncoder => "han-encoder",
            ParamGroup::HanDecoder => "han-decoder",
            ParamGroup::Copy => "copy",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

/// A small set of [`ParamGroup`]s.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);
    pub const ALL: GroupSet = GroupSet(0b1111);

    pub fn of(groups: &[ParamGroup]) -> Self {
        groups.iter().fold(GroupSet::NONE, |s, &g| s.with(g))
    }

    pub fn with(self, g: ParamGroup) -> Self {
        GroupSet(self.0 | 1 << g as u8)
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & (1 << g as u8) != 0
    }

    pub fn iter(self) -> impl Iterator<Item = ParamGroup> {
        ParamGroup::ALL.into_iter().filter(move |&g| self.contains(g))
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(ParamGroup::name).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Every learnable weight of a model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, group: ParamGroup, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            tensor,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn groups(&self) -> GroupSet {
        self.params.iter().fold(GroupSet::NONE, |s, p| s.with(p.group))
    }

    pub fn num_scalars(&self, groups: GroupSet) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(p.group))
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Names of parameters whose values differ between two stores with the
    /// same layout.
    pub fn changed_params(&self, other: &ParamStore) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| {
                other
                    .lookup(&p.name)
                    .is_none_or(|id| other.get(id).tensor.data() != p.tensor.data())
            })
            .map(|p| p.name.clone())
            .collect()
    }
}

/// Inverted dropout with its own generator.
#[derive(Debug, Clone)]
pub struct DropoutState {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
///
/// Parameters in `trainable` groups become gradient-tracking leaves; all
/// others enter as constants.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: GroupSet,
    bound: Vec<Option<Var>>,
    dropout: Option<DropoutState>,
}

impl<'a> Session<'a> {
    /// Evaluation mode: no dropout, nothing tracked.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, GroupSet::NONE, None)
    }

    pub fn new(store: &'a ParamStore, trainable: GroupSet, dropout: Option<DropoutState>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
            dropout: dropout.filter(|d| d.rate > 0.0),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let t = p.tensor.clone();
        let v = if self.trainable.contains(p.group) {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    /// Applies inverted dropout when in training mode; identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some(state) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - state.rate;
        let n = self.graph.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if state.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.graph.dropout_with_mask(x, mask)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                grads.get(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Gradient check over all parameters of `groups` in a store, with the loss
/// built by `f` in an evaluation-mode session.
pub struct StoreGradCheck<'s, F> {
    pub store: &'s mut ParamStore,
    pub groups: GroupSet,
    pub f: F,
    ids: Vec<ParamId>,
}

impl<'s, F> StoreGradCheck<'s, F>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    pub fn new(store: &'s mut ParamStore, groups: GroupSet, f: F) -> Self {
        let ids = store
            .iter()
            .filter(|(_, p)| groups.contains(p.group))
            .map(|(id, _)| id)
            .collect();
        StoreGradCheck {
            store,
            groups,
            f,
            ids,
        }
    }

    pub fn param_name(&self, tensor_index: usize) -> &str {
        &self.store.get(self.ids[tensor_index]).name
    }
}

impl<F> GradCheckTarget for StoreGradCheck<'_, F>
where
    F: FnMut(&mut Session) -> Result<Var>,
{
    fn num_tensors(&self) -> usize {
        self.ids.len()
    }

    fn tensor_mut(&mut self, i: usize) -> &mut [f64] {
        self.store.get_mut(self.ids[i]).tensor.data_mut()
    }

    fn loss(&mut self) -> Result<f64> {
        let mut s = Session::new(self.store, GroupSet::NONE, None);
        let loss = (self.f)(&mut s)?;
        s.value(loss).item()
    }

    fn analytic(&mut self) -> Result<Vec<Vec<f64>>> {
        let mut s = Session::new(self.store, self.groups, None);
        let loss = (self.f)(&mut s)?;
        let grads = s.graph.backward(loss)?;
        let mut by_id: BTreeMap<ParamId, Vec<f64>> = s.param_grads(&grads).into_iter().collect();
        Ok(self
            .ids
            .iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .unwrap_or_else(|| vec![0.0; self.store.get(*id).tensor.numel()])
            })
            .collect())
    }
}
