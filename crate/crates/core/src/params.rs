//! Flat, named views over learnable tensors.
//!
//! Modules and their gradient structs both implement [`Parameters`] and must
//! list tensors in the same order with the same lengths; the optimizer and the
//! gradient checker zip the two lists.

/// Borrowed view of one learnable tensor.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Large lookup tables where gradient checking may sample coordinates.
    pub sparse: bool,
}

#[derive(Debug)]
pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub sparse: bool,
}

pub trait Parameters {
    fn params(&self) -> Vec<ParamView<'_>>;
    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }
}

/// Row-major copy if needed; matmul results can come back column-major.
pub(crate) fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn view<'a>(name: impl Into<String>, shape: &[usize], data: &'a [f64]) -> ParamView<'a> {
    ParamView {
        name: name.into(),
        shape: shape.to_vec(),
        data,
        sparse: false,
    }
}

pub(crate) fn view_mut<'a>(
    name: impl Into<String>,
    shape: &[usize],
    data: &'a mut [f64],
) -> ParamViewMut<'a> {
    ParamViewMut {
        name: name.into(),
        shape: shape.to_vec(),
        data,
        sparse: false,
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, views: Vec<ParamView<'a>>) -> Vec<ParamView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, views: Vec<ParamViewMut<'a>>) -> Vec<ParamViewMut<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

/// A loose set of named flat tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NamedTensors {
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl NamedTensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, data: Vec<f64>) -> Self {
        self.tensors.push((name.into(), data));
        self
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }
}

impl Parameters for NamedTensors {
    fn params(&self) -> Vec<ParamView<'_>> {
        self.tensors
            .iter()
            .map(|(n, d)| view(n.clone(), &[d.len()], d))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        self.tensors
            .iter_mut()
            .map(|(n, d)| {
                let len = d.len();
                view_mut(n.clone(), &[len], d)
            })
            .collect()
    }
}

/// Copies every tensor of `src` into a snapshot.
pub fn snapshot(src: &impl Parameters) -> NamedTensors {
    NamedTensors {
        tensors: src
            .params()
            .into_iter()
            .map(|p| (p.name, p.data.to_vec()))
            .collect(),
    }
}
