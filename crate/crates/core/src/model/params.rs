//! Flat parameter vectors partitioned into named segments.
//!
//! The whole model is one `Vec<f64>` so that aggregation, server optimizers,
//! and checkpointing can treat parameters uniformly; the layout gives each
//! stage's weights a name, a shape, and a slice of the flat vector.

use std::sync::Arc;

use ndarray::{ArrayView, ArrayViewMut, IxDyn};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl SegmentSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<SegmentSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new(named_shapes: Vec<(String, Vec<usize>)>) -> ParamLayout {
        let mut segments = Vec::with_capacity(named_shapes.len());
        let mut offset = 0;
        for (name, shape) in named_shapes {
            let len: usize = shape.iter().product();
            segments.push(SegmentSpec { name, shape, offset });
            offset += len;
        }
        ParamLayout { segments, total: offset }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[SegmentSpec] {
        &self.segments
    }

    pub fn find(&self, name: &str) -> Result<&SegmentSpec> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::LayoutMismatch(format!("no segment named {name}")))
    }
}

/// A parameter (or gradient — same partitioning) vector.
#[derive(Clone, Debug)]
pub struct ModelParams {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.values == other.values
    }
}

impl ModelParams {
    pub fn zeros(layout: Arc<ParamLayout>) -> ModelParams {
        let values = vec![0.0; layout.total_len()];
        ModelParams { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<ModelParams> {
        if values.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ModelParams { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
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

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        let spec = self.layout.find(name)?;
        Ok(&self.values[spec.offset..spec.offset + spec.len()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let spec = self.layout.find(name)?.clone();
        Ok(&mut self.values[spec.offset..spec.offset + spec.len()])
    }

    /// Segment as a dynamic-dimension ndarray view.
    pub fn segment_view(&self, name: &str) -> Result<ArrayView<'_, f64, IxDyn>> {
        let spec = self.layout.find(name)?;
        let slice = &self.values[spec.offset..spec.offset + spec.len()];
        ArrayView::from_shape(IxDyn(&spec.shape), slice).map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn segment_view_mut(&mut self, name: &str) -> Result<ArrayViewMut<'_, f64, IxDyn>> {
        let spec = self.layout.find(name)?.clone();
        let slice = &mut self.values[spec.offset..spec.offset + spec.len()];
        ArrayViewMut::from_shape(IxDyn(&spec.shape), slice)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn check_same_layout(&self, other: &ModelParams) -> Result<()> {
        if self.layout == other.layout {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(
                "parameter vectors come from different architectures".into(),
            ))
        }
    }

    /// self += a * other
    pub fn axpy(&mut self, a: f64, other: &ModelParams) -> Result<()> {
        self.check_same_layout(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.values.iter_mut() {
            *x *= a;
        }
    }

    /// self - other, as a new vector.
    pub fn delta(&self, other: &ModelParams) -> Result<ModelParams> {
        self.check_same_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(ModelParams { layout: Arc::clone(&self.layout), values })
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}
