//! Named parameter traversal used by the optimizer and the checkpoint codec.

/// A mutable view of one parameter tensor and its gradient buffer.
pub struct ParamEntry<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Visitor callback over parameter entries, always invoked in a fixed,
/// code-defined order.
pub type ParamFn<'v> = dyn FnMut(ParamEntry<'_>) + 'v;
