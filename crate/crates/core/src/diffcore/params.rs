use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use crate::error::{contract, Result};

/// One matrix-shaped segment of a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameters plus the segment layout that maps them onto matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let total: usize = layout.iter().map(Segment::len).sum();
        if total != values.len() {
            return Err(contract(format!(
                "layout covers {total} parameters but {} were given",
                values.len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let total = layout.iter().map(Segment::len).sum();
        ParamVector {
            values: vec![0.0; total],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    /// Values of segment `i`.
    pub fn segment(&self, i: usize) -> &[f64] {
        let start: usize = self.layout[..i].iter().map(Segment::len).sum();
        &self.values[start..start + self.layout[i].len()]
    }

    /// Copy with the same layout and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.layout.clone())
    }
}

/// Graph leaves registered for one [`ParamVector`], one per segment.
#[derive(Clone, Debug)]
pub struct ParamHandle {
    vars: Vec<Var>,
    total: usize,
}

impl ParamHandle {
    pub fn var(&self, segment: usize) -> Var {
        self.vars[segment]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Graph {
    /// Registers every segment of `params` as a leaf. Frozen parameters are
    /// constants: gradients still flow through them to their inputs but are
    /// never accumulated for the parameters themselves.
    pub fn params(&mut self, params: &ParamVector, trainable: bool) -> ParamHandle {
        let mut offset = 0;
        let mut vars = Vec::with_capacity(params.layout.len());
        for seg in &params.layout {
            let vals = params.values[offset..offset + seg.len()].to_vec();
            offset += seg.len();
            let v = if trainable {
                self.leaf(seg.rows, seg.cols, vals)
            } else {
                self.constant(seg.rows, seg.cols, vals)
            };
            vars.push(v);
        }
        ParamHandle {
            vars,
            total: params.len(),
        }
    }
}

/// d(root)/d(params) laid out like the registered parameter vector.
pub fn backward_grad(graph: &Graph, root: Var, handle: &ParamHandle) -> Result<Vec<f64>> {
    let grads = graph.backward(root)?;
    Ok(collect(&grads, handle))
}

/// Gathers the adjoints of a registered parameter vector into flat form.
pub fn collect(grads: &Gradients, handle: &ParamHandle) -> Vec<f64> {
    let mut out = Vec::with_capacity(handle.total);
    for &v in &handle.vars {
        out.extend(grads.wrt(v));
    }
    out
}
