//! Labelled evaluation sets and reference packs.
//!
//! Both use the LDFC container layout with magic `LDFD`: an `inputs` tensor
//! (f32, NCHW), optional `labels` (u32, one per sample) and optional `outputs`
//! (f32, `[n, classes]`, recorded by the exporting framework).
//! Evaluation data never enters the compression path; it only measures accuracy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, FormatError, Result};
use crate::ir::{read_container, write_container, ContainerTensor, ForwardMode, NetworkGraph};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"LDFD";
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Option<Vec<u32>>,
    pub outputs: Option<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> Result<[usize; 3]> {
        let (_, c, h, w) = self.inputs.dims4("dataset inputs")?;
        Ok([c, h, w])
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        self.inputs.dims4("dataset inputs")?;
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::shape(
                    "dataset labels",
                    format!("{} labels for {n} inputs", l.len()),
                ));
            }
        }
        if let Some(o) = &self.outputs {
            if o.shape().len() != 2 || o.shape()[0] != n {
                return Err(Error::shape(
                    "dataset outputs",
                    format!("expected [{n}, classes], got {:?}", o.shape()),
                ));
            }
        }
        Ok(())
    }
}

pub fn write_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut tensors = vec![ContainerTensor::from_f32(
        "inputs",
        ds.inputs.shape().to_vec(),
        ds.inputs.data(),
    )];
    if let Some(l) = &ds.labels {
        tensors.push(ContainerTensor::from_u32("labels", vec![l.len()], l));
    }
    if let Some(o) = &ds.outputs {
        tensors.push(ContainerTensor::from_f32("outputs", o.shape().to_vec(), o.data()));
    }
    write_container(
        DATASET_MAGIC,
        json!({ "format": "ldfd", "samples": ds.len() }),
        &tensors,
    )
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (_, tensors) = read_container(DATASET_MAGIC, bytes)?;
    let mut ds = Dataset {
        inputs: Tensor::zeros(vec![0, 0, 0, 0]),
        labels: None,
        outputs: None,
    };
    let mut have_inputs = false;
    for t in tensors {
        match t.name.as_str() {
            "inputs" => {
                ds.inputs = Tensor::new(t.shape.clone(), t.to_f32()?)?;
                have_inputs = true;
            }
            "labels" => ds.labels = Some(t.to_u32()?),
            "outputs" => ds.outputs = Some(Tensor::new(t.shape.clone(), t.to_f32()?)?),
            other => return Err(FormatError::Manifest(format!("unexpected dataset tensor '{other}'")).into()),
        }
    }
    if !have_inputs {
        return Err(FormatError::Manifest("dataset has no 'inputs' tensor".into()).into());
    }
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(&fs::read(path)?)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dataset(ds)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: u32,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassStats>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 predictions for every sample.
pub fn predict(graph: &NetworkGraph, inputs: &Tensor, mode: ForwardMode) -> Result<Vec<u32>> {
    let mut preds = Vec::new();
    for chunk in inputs.batch_chunks(EVAL_CHUNK)? {
        for row in graph.logits(&chunk, mode)? {
            preds.push(argmax(&row) as u32);
        }
    }
    Ok(preds)
}

/// Top-1 accuracy (as a fraction) against the dataset labels.
pub fn evaluate(graph: &NetworkGraph, ds: &Dataset, mode: ForwardMode) -> Result<EvalResult> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("dataset has no labels".into()))?;
    let shape = ds.sample_shape()?;
    if shape != graph.input_shape {
        return Err(Error::shape(
            "evaluation",
            format!(
                "dataset samples are {shape:?} but the model expects {:?}",
                graph.input_shape
            ),
        ));
    }
    let preds = predict(graph, &ds.inputs, mode)?;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut per = vec![(0usize, 0usize); classes];
    for (&p, &l) in preds.iter().zip(labels) {
        per[l as usize].0 += 1;
        if p == l {
            per[l as usize].1 += 1;
        }
    }
    let correct = per.iter().map(|c| c.1).sum();
    let total = labels.len();
    Ok(EvalResult {
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
        per_class: per
            .into_iter()
            .enumerate()
            .filter(|(_, (t, _))| *t > 0)
            .map(|(label, (total, correct))| ClassStats {
                label: label as u32,
                total,
                correct,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
    })
}
