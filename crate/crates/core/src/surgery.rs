//! Embedding-row surgery on checkpoints and parameter accounting.
//!
//! Pruning is a stable row selection: the embedding, an untied (or tied but
//! materialized) output head, and an output bias all keep the rows listed in
//! a [`Remap`], in original order. Every other tensor is copied byte for byte.
//! File-to-file surgery streams row by row, so memory stays bounded by the
//! copy buffer rather than the model.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Checkpoint, ContainerError, ContainerReader, ContainerWriter, Dtype, Header, Tensor, TensorInfo};
use crate::remap::{Remap, RemapError};

pub const META_VOCAB_SIZE: &str = "vocab_size";
pub const META_HIDDEN_DIM: &str = "hidden_dim";
pub const META_TIED: &str = "tied";
pub const META_EMBEDDING: &str = "embedding_tensor";
pub const META_OUTPUT_HEAD: &str = "output_head_tensor";
pub const META_OUTPUT_BIAS: &str = "output_bias_tensor";

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Remap(#[from] RemapError),
    #[error("plan: {0}")]
    Plan(String),
    #[error("keep id {id} is not a row of {tensor:?} ({rows} rows)")]
    KeepOutOfRange { id: u32, tensor: String, rows: usize },
    #[error("plan is tied but output head {0:?} differs from the embedding")]
    TiedWithDistinctHead(String),
    #[error("tensor {name:?} must be F32 to be pruned, found {dtype:?}")]
    NotF32 { name: String, dtype: Dtype },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurgeryPlan {
    pub embedding_tensor: String,
    pub output_head_tensor: Option<String>,
    pub output_bias_tensor: Option<String>,
    pub tied: bool,
    pub remap: Remap,
}

impl SurgeryPlan {
    /// Tensor names and tying flag from checkpoint metadata. `tied` is required.
    pub fn from_metadata(metadata: &BTreeMap<String, String>, remap: Remap) -> Result<Self, SurgeryError> {
        let embedding_tensor = metadata
            .get(META_EMBEDDING)
            .cloned()
            .ok_or_else(|| SurgeryError::Plan(format!("metadata has no {META_EMBEDDING:?}")))?;
        let tied = match metadata.get(META_TIED).map(String::as_str) {
            Some("true") => true,
            Some("false") => false,
            other => {
                return Err(SurgeryError::Plan(format!(
                    "metadata {META_TIED:?} must be \"true\" or \"false\", got {other:?}"
                )))
            }
        };
        Ok(SurgeryPlan {
            embedding_tensor,
            output_head_tensor: metadata.get(META_OUTPUT_HEAD).cloned(),
            output_bias_tensor: metadata.get(META_OUTPUT_BIAS).cloned(),
            tied,
            remap,
        })
    }
}

enum Action {
    Copy(TensorInfo),
    SelectRows(TensorInfo),
}

trait Source {
    fn read(&mut self, info: &TensorInfo, offset: u64, buf: &mut [u8]) -> Result<(), ContainerError>;
}

impl Source for ContainerReader {
    fn read(&mut self, info: &TensorInfo, offset: u64, buf: &mut [u8]) -> Result<(), ContainerError> {
        self.read_at(info, offset, buf)
    }
}

struct MemSource<'a>(&'a Checkpoint);

impl Source for MemSource<'_> {
    fn read(&mut self, info: &TensorInfo, offset: u64, buf: &mut [u8]) -> Result<(), ContainerError> {
        let t = self.0.get(&info.name)?;
        let start = offset as usize;
        buf.copy_from_slice(&t.data[start..start + buf.len()]);
        Ok(())
    }
}

const BLOCK: usize = 1 << 20;

fn same_bytes<S: Source>(src: &mut S, a: &TensorInfo, b: &TensorInfo) -> Result<bool, ContainerError> {
    if a.shape != b.shape || a.dtype != b.dtype {
        return Ok(false);
    }
    let mut x = vec![0u8; BLOCK];
    let mut y = vec![0u8; BLOCK];
    let mut done = 0u64;
    while done < a.byte_len() {
        let n = (a.byte_len() - done).min(BLOCK as u64) as usize;
        src.read(a, done, &mut x[..n])?;
        src.read(b, done, &mut y[..n])?;
        if x[..n] != y[..n] {
            return Ok(false);
        }
        done += n as u64;
    }
    Ok(true)
}

fn require_tensor<'h>(header: &'h Header, name: &str) -> Result<&'h TensorInfo, SurgeryError> {
    let info = header
        .get(name)
        .ok_or_else(|| ContainerError::MissingTensor(name.to_owned()))?;
    if info.dtype != Dtype::F32 {
        return Err(SurgeryError::NotF32 {
            name: name.to_owned(),
            dtype: info.dtype,
        });
    }
    Ok(info)
}

/// Output header plus what to do for each output tensor.
fn plan_output<S: Source>(src: &mut S, header: &Header, plan: &SurgeryPlan) -> Result<(Header, Vec<Action>), SurgeryError> {
    let emb = require_tensor(header, &plan.embedding_tensor)?;
    if emb.shape.len() != 2 {
        return Err(SurgeryError::Plan(format!(
            "embedding {:?} must be 2-D, has shape {:?}",
            emb.name, emb.shape
        )));
    }
    let vocab = emb.shape[0];
    if plan.remap.old_size() != vocab {
        if let Some(&bad) = plan.remap.kept().iter().find(|&&id| id as usize >= vocab) {
            return Err(SurgeryError::KeepOutOfRange {
                id: bad,
                tensor: emb.name.clone(),
                rows: vocab,
            });
        }
        return Err(SurgeryError::Plan(format!(
            "remap is for a vocabulary of {}, embedding has {vocab} rows",
            plan.remap.old_size()
        )));
    }
    if let Some(declared) = header.metadata.get(META_VOCAB_SIZE) {
        if declared.parse::<usize>().ok() != Some(vocab) {
            return Err(SurgeryError::Plan(format!(
                "metadata vocab_size {declared} but embedding has {vocab} rows"
            )));
        }
    }

    let mut pruned: Vec<&str> = vec![&plan.embedding_tensor];
    if let Some(head_name) = plan.output_head_tensor.as_deref().filter(|h| *h != plan.embedding_tensor) {
        if plan.tied {
            if let Some(head) = header.get(head_name) {
                if !same_bytes(src, emb, head)? {
                    return Err(SurgeryError::TiedWithDistinctHead(head_name.to_owned()));
                }
                pruned.push(head_name);
            }
        } else {
            let head = require_tensor(header, head_name)?;
            if head.rows() != vocab || head.shape.len() != 2 {
                return Err(SurgeryError::Plan(format!(
                    "output head {head_name:?} has shape {:?}, expected [{vocab}, _]",
                    head.shape
                )));
            }
            pruned.push(head_name);
        }
    }
    if let Some(bias_name) = plan.output_bias_tensor.as_deref() {
        let bias = require_tensor(header, bias_name)?;
        if bias.shape != [vocab] {
            return Err(SurgeryError::Plan(format!(
                "output bias {bias_name:?} has shape {:?}, expected [{vocab}]",
                bias.shape
            )));
        }
        pruned.push(bias_name);
    }

    let new_vocab = plan.remap.new_size();
    let mut specs = Vec::with_capacity(header.tensors.len());
    let mut actions = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        if pruned.contains(&t.name.as_str()) {
            let mut shape = t.shape.clone();
            shape[0] = new_vocab;
            specs.push((t.name.clone(), t.dtype, shape));
            actions.push(Action::SelectRows(t.clone()));
        } else {
            specs.push((t.name.clone(), t.dtype, t.shape.clone()));
            actions.push(Action::Copy(t.clone()));
        }
    }
    let mut metadata = header.metadata.clone();
    metadata.insert(META_VOCAB_SIZE.to_owned(), new_vocab.to_string());
    Ok((Header::contiguous(specs, metadata), actions))
}

fn apply<S: Source, W: Write>(src: &mut S, actions: &[Action], remap: &Remap, out: &mut W) -> Result<(), SurgeryError> {
    let io = |source| {
        SurgeryError::Container(ContainerError::Io {
            path: "output".into(),
            source,
        })
    };
    let mut buf = vec![0u8; BLOCK];
    for action in actions {
        match action {
            Action::Copy(info) => {
                let mut done = 0u64;
                while done < info.byte_len() {
                    let n = (info.byte_len() - done).min(BLOCK as u64) as usize;
                    src.read(info, done, &mut buf[..n])?;
                    out.write_all(&buf[..n]).map_err(io)?;
                    done += n as u64;
                }
            }
            Action::SelectRows(info) => {
                let rb = info.row_bytes();
                let mut row = vec![0u8; rb];
                for &old in remap.kept() {
                    src.read(info, old as u64 * rb as u64, &mut row)?;
                    out.write_all(&row).map_err(io)?;
                }
            }
        }
    }
    Ok(())
}

/// Prune an in-memory checkpoint.
pub fn prune_embeddings(ckpt: &Checkpoint, plan: &SurgeryPlan) -> Result<Checkpoint, SurgeryError> {
    let header = ckpt.header();
    let mut src = MemSource(ckpt);
    let (out_header, actions) = plan_output(&mut src, &header, plan)?;
    let mut payload = Vec::with_capacity(out_header.payload_len() as usize);
    apply(&mut src, &actions, &plan.remap, &mut payload)?;
    let tensors = out_header
        .tensors
        .iter()
        .map(|t| {
            let data = payload[t.begin as usize..t.end as usize].to_vec();
            (
                t.name.clone(),
                Tensor {
                    dtype: t.dtype,
                    shape: t.shape.clone(),
                    data,
                },
            )
        })
        .collect();
    Ok(Checkpoint {
        tensors,
        metadata: out_header.metadata,
    })
}

/// Prune a checkpoint file into a new file without loading it whole.
/// `extra_metadata` is merged into the output header.
pub fn prune_checkpoint_file(
    src_path: &Path,
    dst_path: &Path,
    plan: &SurgeryPlan,
    extra_metadata: &BTreeMap<String, String>,
) -> Result<SizeReport, SurgeryError> {
    let mut reader = ContainerReader::open(src_path)?;
    let header = reader.header().clone();
    let (mut out_header, actions) = plan_output(&mut reader, &header, plan)?;
    out_header.metadata.extend(extra_metadata.clone());
    let report = size_report(&header, &out_header);
    let mut writer = ContainerWriter::create(dst_path, out_header)?;
    apply(&mut reader, &actions, &plan.remap, &mut writer)?;
    writer.finish()?;
    Ok(report)
}

/// Total parameters. A tied output head that is materialized as its own
/// tensor is counted once.
pub fn param_count_header(header: &Header) -> u64 {
    let total: u64 = header.tensors.iter().map(|t| t.numel() as u64).sum();
    let tied = header.metadata.get(META_TIED).map(String::as_str) == Some("true");
    let duplicate = match (
        tied,
        header.metadata.get(META_OUTPUT_HEAD),
        header.metadata.get(META_EMBEDDING),
    ) {
        (true, Some(head), Some(emb)) if head != emb => header.get(head).map_or(0, |t| t.numel() as u64),
        _ => 0,
    };
    total - duplicate
}

pub fn param_count(ckpt: &Checkpoint) -> u64 {
    param_count_header(&ckpt.header())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub params_before: u64,
    pub params_after: u64,
    pub reduction_fraction: f64,
    pub bytes_before: u64,
    pub bytes_after: u64,
}

pub fn size_report(before: &Header, after: &Header) -> SizeReport {
    let params_before = param_count_header(before);
    let params_after = param_count_header(after);
    SizeReport {
        params_before,
        params_after,
        reduction_fraction: if params_before == 0 {
            0.0
        } else {
            1.0 - params_after as f64 / params_before as f64
        },
        bytes_before: before.payload_len(),
        bytes_after: after.payload_len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(tied: bool, head: bool, bias: bool) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let emb: Vec<f32> = (0..10).map(|i| i as f32).collect();
        ckpt.tensors.insert("emb".into(), Tensor::from_f32(vec![5, 2], &emb));
        ckpt.tensors.insert("body".into(), Tensor::from_f32(vec![2, 2], &[9.0, 8.0, 7.0, 6.0]));
        ckpt.metadata.insert(META_EMBEDDING.into(), "emb".into());
        ckpt.metadata.insert(META_TIED.into(), tied.to_string());
        ckpt.metadata.insert(META_VOCAB_SIZE.into(), "5".into());
        if head {
            let values: Vec<f32> = if tied { emb.clone() } else { (0..10).map(|i| -(i as f32)).collect() };
            ckpt.tensors.insert("head".into(), Tensor::from_f32(vec![5, 2], &values));
            ckpt.metadata.insert(META_OUTPUT_HEAD.into(), "head".into());
        }
        if bias {
            ckpt.tensors.insert("bias".into(), Tensor::from_f32(vec![5], &[0.1, 0.2, 0.3, 0.4, 0.5]));
            ckpt.metadata.insert(META_OUTPUT_BIAS.into(), "bias".into());
        }
        ckpt
    }

    fn plan_for(ckpt: &Checkpoint, keep: &[u32]) -> SurgeryPlan {
        let keep: BTreeSet<u32> = keep.iter().copied().collect();
        SurgeryPlan::from_metadata(&ckpt.metadata, Remap::from_keep(&keep, 5).unwrap()).unwrap()
    }

    #[test]
    fn selects_rows() {
        let ckpt = toy(true, false, false);
        let out = prune_embeddings(&ckpt, &plan_for(&ckpt, &[0, 3, 4])).unwrap();
        let emb = out.get("emb").unwrap();
        assert_eq!(emb.shape, vec![3, 2]);
        assert_eq!(emb.to_f32(), vec![0.0, 1.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(out.get("body").unwrap(), ckpt.get("body").unwrap());
        assert_eq!(out.metadata[META_VOCAB_SIZE], "3");
    }

    #[test]
    fn keep_all_is_identity() {
        for (tied, head, bias) in [(true, false, false), (false, true, true), (true, true, true)] {
            let ckpt = toy(tied, head, bias);
            let out = prune_embeddings(&ckpt, &plan_for(&ckpt, &[0, 1, 2, 3, 4])).unwrap();
            assert_eq!(out, ckpt);
        }
    }

    #[test]
    fn untied_head_and_bias_follow_the_remap() {
        let ckpt = toy(false, true, true);
        let out = prune_embeddings(&ckpt, &plan_for(&ckpt, &[1, 4])).unwrap();
        assert_eq!(out.get("head").unwrap().to_f32(), vec![-2.0, -3.0, -8.0, -9.0]);
        assert_eq!(out.get("bias").unwrap().to_f32(), vec![0.2, 0.5]);
        assert_eq!(param_count(&ckpt) - param_count(&out), 3 * 2 * 2 + 3);
    }

    #[test]
    fn tied_head_must_match_embedding() {
        let mut ckpt = toy(true, true, false);
        assert!(prune_embeddings(&ckpt, &plan_for(&ckpt, &[0, 1])).is_ok());
        ckpt.tensors.insert("head".into(), Tensor::from_f32(vec![5, 2], &[1.0; 10]));
        assert!(matches!(
            prune_embeddings(&ckpt, &plan_for(&ckpt, &[0, 1])),
            Err(SurgeryError::TiedWithDistinctHead(_))
        ));
    }

    #[test]
    fn remap_size_must_match_rows() {
        let ckpt = toy(true, false, false);
        let keep: BTreeSet<u32> = [0, 6].into_iter().collect();
        let plan = SurgeryPlan::from_metadata(&ckpt.metadata, Remap::from_keep(&keep, 7).unwrap()).unwrap();
        assert!(matches!(
            prune_embeddings(&ckpt, &plan),
            Err(SurgeryError::KeepOutOfRange { id: 6, .. })
        ));
    }

    #[test]
    fn tying_flag_is_required() {
        let mut ckpt = toy(true, false, false);
        ckpt.metadata.remove(META_TIED);
        assert!(SurgeryPlan::from_metadata(&ckpt.metadata, Remap::identity(5)).is_err());
    }

    #[test]
    fn counts_parameters() {
        let mut single = Checkpoint::default();
        single.tensors.insert("w".into(), Tensor::from_f32(vec![5, 2], &[0.0; 10]));
        assert_eq!(param_count(&single), 10);
        // Tied head materialized as a tensor is counted once.
        assert_eq!(param_count(&toy(true, true, false)), 14);
        assert_eq!(param_count(&toy(false, true, false)), 24);
    }

    #[test]
    fn size_report_fractions() {
        let ckpt = toy(true, false, true);
        let same = size_report(&ckpt.header(), &ckpt.header());
        assert_eq!(same.reduction_fraction, 0.0);
        let mut relabeled = ckpt.clone();
        relabeled.metadata.insert("note".into(), "x".into());
        assert_eq!(size_report(&ckpt.header(), &relabeled.header()).reduction_fraction, 0.0);
        let out = prune_embeddings(&ckpt, &plan_for(&ckpt, &[0, 1])).unwrap();
        let r = size_report(&ckpt.header(), &out.header());
        assert_eq!((r.params_before, r.params_after), (19, 10));
        assert_eq!((r.bytes_before, r.bytes_after), (76, 40));
    }

    #[test]
    fn file_surgery_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("in.bin");
        let dst = dir.path().join("out.bin");
        let ckpt = toy(false, true, true);
        ckpt.save(&src).unwrap();
        let plan = plan_for(&ckpt, &[0, 2, 3]);
        prune_checkpoint_file(&src, &dst, &plan, &BTreeMap::new()).unwrap();
        let expected = prune_embeddings(&ckpt, &plan).unwrap();
        assert_eq!(std::fs::read(&dst).unwrap(), expected.to_bytes());
    }
}
