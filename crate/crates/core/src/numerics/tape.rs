use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

type BackwardFn<S> = Box<dyn Fn(&Tape<S>, &Tensor<S>, &mut GradSlots<S>)>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    backward: Option<BackwardFn<S>>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Forward ops append nodes; [`Tape::backward`] walks the recording in
/// reverse and accumulates gradients into every node that (transitively)
/// depends on a gradient-requiring leaf. Every op output is scanned for
/// NaN/Inf; the first offending op is remembered and can be queried with
/// [`Tape::nonfinite_op`].
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    nonfinite: Option<String>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), nonfinite: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, value: Tensor<S>) -> VarId {
        self.push("leaf", value, true, None)
    }

    /// Leaf excluded from gradient computation (inputs, frozen weights).
    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.push("constant", value, false, None)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn needs_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Name of the first op that produced a non-finite output, if any.
    pub fn nonfinite_op(&self) -> Option<&str> {
        self.nonfinite.as_deref()
    }

    /// Flag a non-finite event detected inside an op (e.g. bad coordinates).
    pub(crate) fn flag_nonfinite(&mut self, op: &str) {
        if self.nonfinite.is_none() {
            self.nonfinite = Some(op.to_string());
        }
    }

    pub(crate) fn push(
        &mut self,
        op: &str,
        value: Tensor<S>,
        needs_grad: bool,
        backward: Option<BackwardFn<S>>,
    ) -> VarId {
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some(op.to_string());
        }
        let id = VarId(self.nodes.len());
        self.nodes.push(Node { value, backward: if needs_grad { backward } else { None }, needs_grad });
        id
    }

    pub(crate) fn any_needs_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].needs_grad)
    }

    /// Run reverse accumulation from a single-element `root`.
    pub fn backward(&self, root: VarId) -> Gradients<S> {
        let root_value = self.value(root);
        assert_eq!(root_value.len(), 1, "backward root must be a single-element tensor");
        let mut slots = GradSlots { slots: vec![None; self.nodes.len()] };
        slots.slots[root.0] = Some(Tensor::filled(root_value.shape().to_vec(), S::one()));
        for id in (0..=root.0).rev() {
            let Some(upstream) = slots.slots[id].take() else { continue };
            if let Some(back) = &self.nodes[id].backward {
                back(self, &upstream, &mut slots);
            }
            slots.slots[id] = Some(upstream);
        }
        Gradients { slots: slots.slots }
    }
}

/// Mutable gradient accumulators, indexed by node id.
pub(crate) struct GradSlots<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradSlots<S> {
    /// Gradient buffer for `id`, zero-initialized on first touch.
    pub(crate) fn acc(&mut self, id: VarId, shape: &[usize]) -> &mut [S] {
        self.slots[id.0]
            .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
            .data_mut()
    }
}

/// Result of a backward pass.
pub struct Gradients<S> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the backward root w.r.t. `id`, if any flowed there.
    pub fn get(&self, id: VarId) -> Option<&Tensor<S>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor<S>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}
