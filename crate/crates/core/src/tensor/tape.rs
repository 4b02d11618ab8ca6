use super::Elem;
use ndarray::{ArrayD, IxDyn};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<F> = Box<dyn Fn(&[ArrayD<F>], &ArrayD<F>, &mut Grads<F>)>;

/// Append-only computation tape. Ops evaluate eagerly and record a backward
/// closure; [`Tape::backward`] walks the tape in reverse.
pub struct Tape<F: Elem> {
    pub(crate) values: Vec<ArrayD<F>>,
    pub(crate) backs: Vec<Option<BackFn<F>>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F: Elem> {
    pub(crate) slots: Vec<Option<ArrayD<F>>>,
}

impl<F: Elem> Grads<F> {
    pub(crate) fn accum(&mut self, var: Var, g: ArrayD<F>) {
        match &mut self.slots[var.0] {
            Some(s) => *s += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, var: Var) -> Option<&ArrayD<F>> {
        self.slots[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<ArrayD<F>> {
        self.slots[var.0].take()
    }
}

impl<F: Elem> Tape<F> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), backs: Vec::new() }
    }

    /// Number of recorded tensors.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Insert a leaf tensor (parameter or constant).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, var: Var) -> &ArrayD<F> {
        &self.values[var.0]
    }

    /// Read a `[1]`-shaped tensor as a scalar.
    pub fn scalar(&self, var: Var) -> F {
        let v = &self.values[var.0];
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub(crate) fn push(&mut self, value: ArrayD<F>, back: Option<BackFn<F>>) -> Var {
        self.values.push(value);
        self.backs.push(back);
        Var(self.values.len() - 1)
    }

    /// Index the next op will get; backward closures capture this to read
    /// their own output value.
    pub(crate) fn next_id(&self) -> usize {
        self.values.len()
    }

    /// Reverse sweep seeded with `dL/dL = 1` at `loss` (a `[1]` tensor).
    pub fn backward(&self, loss: Var) -> Grads<F> {
        let mut grads = Grads { slots: vec![None; self.values.len()] };
        grads.slots[loss.0] = Some(ArrayD::ones(IxDyn(self.values[loss.0].shape())));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads.slots[i].take() else { continue };
            if let Some(back) = &self.backs[i] {
                back(&self.values, &g, &mut grads);
            }
            grads.slots[i] = Some(g);
        }
        grads
    }
}

impl<F: Elem> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}
