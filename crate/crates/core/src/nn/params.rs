use indexmap::IndexMap;

use super::{NdArray, NnError, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer (unless frozen).
    Weight,
    /// Carried state such as normalization statistics; never trained.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub value: NdArray<F>,
    pub grad: NdArray<F>,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl<F: Real> Param<F> {
    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Weight && !self.frozen
    }
}

/// Named parameter arrays in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    entries: IndexMap<String, Param<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray<F>, kind: ParamKind) {
        let grad = NdArray::zeros(value.shape());
        self.entries.insert(
            name.into(),
            Param {
                value,
                grad,
                kind,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>, NnError> {
        self.entries
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>, NnError> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Result<usize, NnError> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn by_index(&self, idx: usize) -> (&str, &Param<F>) {
        let (k, v) = self.entries.get_index(idx).expect("param index in range");
        (k.as_str(), v)
    }

    pub(crate) fn by_index_mut(&mut self, idx: usize) -> &mut Param<F> {
        self.entries.get_index_mut(idx).expect("param index in range").1
    }

    pub fn value(&self, name: &str) -> Result<&NdArray<F>, NnError> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value, keeping kind and freeze flag.
    pub fn set_value(&mut self, name: &str, value: NdArray<F>) -> Result<(), NnError> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<(), NnError> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(F::zero());
        }
    }

    /// Sum of extents of all weights, frozen or not.
    pub fn total_weight_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    /// Sum of extents of weights the optimizer may update.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.is_trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for (name, p) in self.iter() {
            out.insert(name, p.value.cast(), p.kind);
            out.set_frozen(name, p.frozen).expect("just inserted");
        }
        out
    }
}
