//! Named parameter registry with per-parameter tunable flags.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter does; drives weight-decay exclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormGain,
    NormBias,
    Embedding,
}

impl ParamRole {
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight | ParamRole::Embedding)
    }
}

/// Which part of the model owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Delta,
    Prompt,
    Decoder,
}

/// One named, possibly tunable array with its gradient slot.
#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    pub tunable: bool,
    pub role: ParamRole,
    pub group: ParamGroup,
}

/// Selector for [`ParamStore::count`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountFilter {
    All,
    Tunable,
    DeltaOnly,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<F>,
        role: ParamRole,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Contract(format!("invalid parameter name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            tunable: true,
            role,
            group,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn tunable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.tunable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn set_tunable(&mut self, id: ParamId, tunable: bool) {
        let p = &mut self.params[id.0];
        p.tunable = tunable;
        if !tunable {
            p.grad = None;
        }
    }

    pub fn count(&self, filter: CountFilter) -> usize {
        self.params
            .iter()
            .filter(|p| match filter {
                CountFilter::All => true,
                CountFilter::Tunable => p.tunable,
                CountFilter::DeltaOnly => p.group == ParamGroup::Delta,
            })
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        self.iter()
            .map(|(id, p)| ParamInfo {
                id,
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                role: p.role,
                group: p.group,
                tunable: p.tunable,
            })
            .collect()
    }

    /// Add `grad` into the slot of a tunable parameter. Frozen parameters are
    /// left untouched and `false` is returned.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<F>) -> Result<bool> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::dim("accumulate_grad", p.value.shape(), grad.shape()));
        }
        if !p.tunable {
            return Ok(false);
        }
        match &mut p.grad {
            Some(slot) => slot
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .for_each(|(s, g)| *s += *g),
            None => p.grad = Some(grad.clone()),
        }
        Ok(true)
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Overwrite a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let p = &mut self.params[id.0];
        if value.shape() != p.value.shape() {
            return Err(Error::dim("assign", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Same registry with every array converted to another precision.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    tunable: p.tunable,
                    role: p.role,
                    group: p.group,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Initial value rule for a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    TruncNormal(f64),
    Normal(f64),
}

/// Static description of a parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub id: ParamId,
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub group: ParamGroup,
    pub tunable: bool,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Anything that can receive parameter registrations while a network is
/// being built: a materialising store, or a shape-only registry used to
/// account for full-size presets without allocating their weights.
pub trait ParamSink {
    fn register(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: Init,
        role: ParamRole,
        group: ParamGroup,
    ) -> Result<ParamId>;

    fn set_tunable(&mut self, id: ParamId, tunable: bool);

    fn infos(&self) -> Vec<ParamInfo>;

    fn count(&self, filter: CountFilter) -> usize {
        self.infos()
            .iter()
            .filter(|p| match filter {
                CountFilter::All => true,
                CountFilter::Tunable => p.tunable,
                CountFilter::DeltaOnly => p.group == ParamGroup::Delta,
            })
            .map(ParamInfo::numel)
            .sum()
    }
}

/// Materialises registrations into a [`ParamStore`] drawing from `rng`.
pub struct Initializer<'a, F, R> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut R,
}

impl<'a, F: Scalar, R: Rng> Initializer<'a, F, R> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut R) -> Self {
        Initializer { store, rng }
    }
}

impl<F: Scalar, R: Rng> ParamSink for Initializer<'_, F, R> {
    fn register(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: Init,
        role: ParamRole,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, F::one()),
            Init::TruncNormal(std) => trunc_normal(shape, std, self.rng),
            Init::Normal(std) => normal(shape, std, self.rng),
        };
        self.store.add(name, value, role, group)
    }

    fn set_tunable(&mut self, id: ParamId, tunable: bool) {
        self.store.set_tunable(id, tunable)
    }

    fn infos(&self) -> Vec<ParamInfo> {
        self.store.infos()
    }
}

/// Shape-only parameter registry.
#[derive(Clone, Debug, Default)]
pub struct ShapeRegistry {
    infos: Vec<ParamInfo>,
}

impl ShapeRegistry {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ParamSink for ShapeRegistry {
    fn register(
        &mut self,
        name: String,
        shape: Vec<usize>,
        _init: Init,
        role: ParamRole,
        group: ParamGroup,
    ) -> Result<ParamId> {
        if self.infos.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.infos.len());
        self.infos.push(ParamInfo {
            id,
            name,
            shape,
            role,
            group,
            tunable: true,
        });
        Ok(id)
    }

    fn set_tunable(&mut self, id: ParamId, tunable: bool) {
        self.infos[id.0].tunable = tunable;
    }

    fn infos(&self) -> Vec<ParamInfo> {
        self.infos.clone()
    }
}

/// Gaussian with standard deviation `std` truncated at ±2σ.
pub fn trunc_normal<F: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break F::lit(v);
        }
    })
}

/// Plain Gaussian.
pub fn normal<F: Scalar, R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::lit(normal.sample(rng)))
}
