//! Checkpoint container: every trainable and EMA tensor of a training run,
//! plus the frozen projection, optimizer moments, the step counter and a
//! config snapshot. One f32 payload with a named-tensor manifest in the
//! header, so save→load→save is byte-identical and resuming continues
//! bit-for-bit.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::conditioner::EncoderParams;
use crate::container::{self, f32_bytes, f32_from_bytes, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::features::FrozenProjection;
use crate::model::ModelParams;
use crate::nn::{TensorView, TensorViewMut};
use crate::optim::AdamState;
use crate::config::RunConfig;
use crate::rvq::RvqCodebooks;
use crate::training::TrainState;

pub const CHECKPOINT_MAGIC: &str = "stylecond.ckpt";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    payload_len: u64,
    /// Full `key = value` configuration snapshot.
    config: String,
    /// Training steps completed.
    step: u64,
    /// Optimizer steps taken (drives Adam bias correction).
    adam_steps: u64,
    tensors: Vec<TensorEntry>,
}

struct PayloadBuilder {
    entries: Vec<TensorEntry>,
    bytes: Vec<u8>,
}

impl PayloadBuilder {
    fn new() -> Self {
        PayloadBuilder { entries: Vec::new(), bytes: Vec::new() }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.entries.push(TensorEntry {
            name,
            shape,
            offset: self.bytes.len() as u64,
        });
        self.bytes.extend_from_slice(&f32_bytes(values));
    }

    fn push_view(&mut self, name: String, view: TensorView<'_, f32>) {
        match view {
            TensorView::D1(a) => {
                let values: Vec<f32> = a.iter().copied().collect();
                self.push(name, vec![a.len()], &values);
            }
            TensorView::D2(a) => {
                let values: Vec<f32> = a.iter().copied().collect();
                let (r, c) = a.dim();
                self.push(name, vec![r, c], &values);
            }
        }
    }
}

/// Writes `state` to `path` with `config` snapshotted in the header.
pub fn save_checkpoint(state: &TrainState<f32>, config: &RunConfig, path: &Path) -> Result<()> {
    let mut p = PayloadBuilder::new();

    state
        .model
        .for_each(&mut |name, view| p.push_view(format!("model.{name}"), view));
    // Encoder names already carry the `enc.` prefix.
    state.encoder.for_each(&mut |name, view| p.push_view(name, view));

    for (k, book) in state.codebooks.books.iter().enumerate() {
        p.push_view(format!("rvq.book{k}"), TensorView::D2(book));
    }
    for (k, size) in state.codebooks.ema_size.iter().enumerate() {
        p.push_view(format!("rvq.ema_size{k}"), TensorView::D1(size));
    }
    for (k, sum) in state.codebooks.ema_sum.iter().enumerate() {
        p.push_view(format!("rvq.ema_sum{k}"), TensorView::D2(sum));
    }

    p.push_view(
        "features.projection".into(),
        TensorView::D2(state.projection.matrix()),
    );

    // BTreeMap iteration order keeps the manifest deterministic.
    for (name, (m, v)) in &state.optimizer.moments {
        p.push(format!("adam.m.{name}"), vec![m.len()], m);
        p.push(format!("adam.v.{name}"), vec![v.len()], v);
    }

    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        version: FORMAT_VERSION,
        payload_len: p.bytes.len() as u64,
        config: config.dump(),
        step: state.step,
        adam_steps: state.optimizer.steps,
        tensors: p.entries,
    };
    container::write_container(path, &header, &p.bytes)
}

/// Random access into the payload by manifest name, tracking consumption so
/// both missing and unexpected tensors are diagnosed.
struct TensorReader<'a> {
    payload: &'a [u8],
    entries: BTreeMap<&'a str, &'a TensorEntry>,
}

impl<'a> TensorReader<'a> {
    fn new(header: &'a CheckpointHeader, payload: &'a [u8]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for e in &header.tensors {
            if entries.insert(e.name.as_str(), e).is_some() {
                return Err(Error::Corruption(format!(
                    "checkpoint manifest lists tensor '{}' twice",
                    e.name
                )));
            }
        }
        Ok(TensorReader { payload, entries })
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self.entries.remove(name).ok_or_else(|| {
            Error::Corruption(format!("checkpoint is missing tensor '{name}'"))
        })?;
        if entry.shape != shape {
            return Err(Error::Incompatible(format!(
                "tensor '{name}' has shape {:?} but the configuration implies {:?}",
                entry.shape, shape
            )));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(n * 4)
            .filter(|&e| e <= self.payload.len())
            .ok_or_else(|| Error::Truncated {
                expected: (entry.offset + (n as u64) * 4),
                found: self.payload.len() as u64,
            })?;
        f32_from_bytes(&self.payload[start..end])
    }

    /// Raw shape lookup for tensors whose shape the config does not fix.
    fn shape_of(&self, name: &str) -> Option<Vec<usize>> {
        self.entries.get(name).map(|e| e.shape.clone())
    }

    fn finish(self) -> Result<()> {
        if let Some(name) = self.entries.keys().next() {
            return Err(Error::Corruption(format!(
                "checkpoint contains unexpected tensor '{name}'"
            )));
        }
        Ok(())
    }
}

fn fill_view(view: TensorViewMut<'_, f32>, values: &[f32]) {
    match view {
        TensorViewMut::D1(a) => {
            for (dst, src) in a.iter_mut().zip(values) {
                *dst = *src;
            }
        }
        TensorViewMut::D2(a) => {
            for (dst, src) in a.iter_mut().zip(values) {
                *dst = *src;
            }
        }
    }
}

fn view_shape(view: &TensorViewMut<'_, f32>) -> Vec<usize> {
    match view {
        TensorViewMut::D1(a) => vec![a.len()],
        TensorViewMut::D2(a) => {
            let (r, c) = a.dim();
            vec![r, c]
        }
    }
}

/// Reads a checkpoint back into live training state plus its config.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState<f32>, RunConfig)> {
    let (header, payload): (CheckpointHeader, Vec<u8>) =
        container::read_container(path, CHECKPOINT_MAGIC)?;
    let mut config = RunConfig::default();
    config.apply_text(&header.config)?;

    let mut reader = TensorReader::new(&header, &payload)?;

    // Seed 0 placeholders are overwritten wholesale below.
    let mut model: ModelParams<f32> = ModelParams::init(&config.model, 0)?;
    let mut first_err: Option<Error> = None;
    model.for_each_mut(&mut |name, view| {
        if first_err.is_some() {
            return;
        }
        match reader.take(&format!("model.{name}"), &view_shape(&view)) {
            Ok(values) => fill_view(view, &values),
            Err(e) => first_err = Some(e),
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }

    let mut encoder: EncoderParams<f32> = EncoderParams::init(&config.conditioner, 0)?;
    let mut first_err: Option<Error> = None;
    encoder.for_each_mut(&mut |name, view| {
        if first_err.is_some() {
            return;
        }
        match reader.take(&name, &view_shape(&view)) {
            Ok(values) => fill_view(view, &values),
            Err(e) => first_err = Some(e),
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }

    let streams = config.rvq.streams;
    let entries = config.rvq.entries;
    let dim = config.conditioner.effective_dim();
    let mut books = Vec::with_capacity(streams);
    let mut ema_size = Vec::with_capacity(streams);
    let mut ema_sum = Vec::with_capacity(streams);
    for k in 0..streams {
        let b = reader.take(&format!("rvq.book{k}"), &[entries, dim])?;
        books.push(Array2::from_shape_vec((entries, dim), b).expect("sized above"));
        let s = reader.take(&format!("rvq.ema_size{k}"), &[entries])?;
        ema_size.push(Array1::from_vec(s));
        let m = reader.take(&format!("rvq.ema_sum{k}"), &[entries, dim])?;
        ema_sum.push(Array2::from_shape_vec((entries, dim), m).expect("sized above"));
    }
    let codebooks = RvqCodebooks {
        books,
        ema_size,
        ema_sum,
        decay: config.rvq.decay as f32,
        dead_threshold: config.rvq.dead_threshold as f32,
    };

    let proj_shape = reader
        .shape_of("features.projection")
        .ok_or_else(|| Error::Corruption("checkpoint is missing tensor 'features.projection'".into()))?;
    if proj_shape.len() != 2 {
        return Err(Error::Corruption(
            "tensor 'features.projection' is not a matrix".into(),
        ));
    }
    let m = reader.take("features.projection", &proj_shape)?;
    let matrix = Array2::from_shape_vec((proj_shape[0], proj_shape[1]), m).expect("sized above");
    let projection = FrozenProjection::from_parts(config.features.clone(), matrix)?;

    let mut moments = BTreeMap::new();
    let moment_names: Vec<String> = reader
        .entries
        .keys()
        .filter_map(|n| n.strip_prefix("adam.m.").map(str::to_owned))
        .collect();
    for name in moment_names {
        let m_shape = reader
            .shape_of(&format!("adam.m.{name}"))
            .expect("listed above");
        let m = reader.take(&format!("adam.m.{name}"), &m_shape)?;
        let v = reader.take(&format!("adam.v.{name}"), &m_shape)?;
        moments.insert(name, (m, v));
    }
    reader.finish()?;

    let optimizer = AdamState {
        config: config.trainer.adam,
        steps: header.adam_steps,
        moments,
    };

    let state = TrainState {
        model,
        encoder,
        codebooks,
        projection,
        optimizer,
        step: header.step,
    };
    Ok((state, config))
}
