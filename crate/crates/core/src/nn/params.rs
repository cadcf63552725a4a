use ndarray::{ArrayD, IxDyn, NdFloat};
use rand::Rng;

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Flat, ordered collection of named parameter tensors.
///
/// Layers hold [`ParamId`]s rather than tensors, so a single store can be
/// checkpointed, perturbed for finite differences, or updated by an optimizer
/// without walking the layer tree.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<ArrayD<F>>,
}

impl<F: NdFloat> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: NdFloat> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: ArrayD<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform `(-bound, bound)` initialisation, the usual fan-in scaled default.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            F::from(rng.random_range(-bound..bound)).unwrap()
        });
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads(
            self.tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        )
    }

    pub fn cast<G: NdFloat>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| G::from(v).unwrap()))
                .collect(),
        }
    }
}

/// Gradient buffers laid out exactly like the owning [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<F>(Vec<ArrayD<F>>);

impl<F: NdFloat> Grads<F> {
    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.0[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<F>> {
        self.0.iter()
    }

    pub fn flatten(&self) -> Vec<F> {
        self.0.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
