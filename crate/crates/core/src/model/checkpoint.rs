//! Binary model checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, `u32` d, `u32` h, `u64`
//! num_users, `u64` num_items, `u64` seed, `u32` num_tasks, `f64` init_std,
//! then `f32` row-major user table, item table, user MLP (w1, b1, w2, b2) and
//! item MLP when `h > 0`, and finally the task weights.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{Mlp, ModelConfig, TwoTowerModel};
use crate::error::{HillError, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"HILLMODL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_reals<T: Scalar>(out: &mut Vec<u8>, xs: &[T]) {
    for x in xs {
        out.extend_from_slice(&x.as_f32().to_le_bytes());
    }
}

/// Serializes `model` to bytes. Parameters are stored as `f32`.
pub fn encode<T: Scalar>(model: &TwoTowerModel<T>) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.dim as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(model.num_users() as u64).to_le_bytes());
    out.extend_from_slice(&(model.num_items() as u64).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.extend_from_slice(&(model.task_weights.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg.init_std.to_le_bytes());
    put_reals(&mut out, model.user_table.as_slice());
    put_reals(&mut out, model.item_table.as_slice());
    for mlp in [&model.user_mlp, &model.item_mlp].into_iter().flatten() {
        for p in mlp.params() {
            put_reals(&mut out, p);
        }
    }
    put_reals(&mut out, &model.task_weights);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| HillError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let len = n.checked_mul(4).ok_or_else(|| HillError::Format("checkpoint size overflow".into()))?;
        let raw = self.take(len)?;
        Ok(raw.chunks_exact(4).map(|c| T::lit(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))).collect())
    }

    fn matrix<T: Scalar>(&mut self, rows: usize, cols: usize) -> Result<Matrix<T>> {
        let n = rows.checked_mul(cols).ok_or_else(|| HillError::Format("checkpoint size overflow".into()))?;
        Matrix::from_vec(rows, cols, self.reals(n)?)
    }

    fn mlp<T: Scalar>(&mut self, d: usize, h: usize) -> Result<Mlp<T>> {
        Ok(Mlp { w1: self.matrix(h, d)?, b1: self.reals(h)?, w2: self.matrix(d, h)?, b2: self.reals(d)? })
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<TwoTowerModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(HillError::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(HillError::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let num_users = usize::try_from(r.u64()?).map_err(|_| HillError::Format("user count overflow".into()))?;
    let num_items = usize::try_from(r.u64()?).map_err(|_| HillError::Format("item count overflow".into()))?;
    let seed = r.u64()?;
    let num_tasks = r.u32()? as usize;
    let init_std = r.f64()?;
    let user_table = r.matrix(num_users, dim)?;
    let item_table = r.matrix(num_items, dim)?;
    let (user_mlp, item_mlp) =
        if hidden > 0 { (Some(r.mlp(dim, hidden)?), Some(r.mlp(dim, hidden)?)) } else { (None, None) };
    let task_weights = r.reals(num_tasks)?;
    if r.pos != bytes.len() {
        return Err(HillError::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok(TwoTowerModel {
        config: ModelConfig { dim, hidden, init_std, num_tasks, seed },
        user_table,
        item_table,
        user_mlp,
        item_mlp,
        task_weights,
    })
}

pub fn save_checkpoint<T: Scalar>(model: &TwoTowerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| HillError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(model)).and_then(|_| w.flush()).map_err(|e| HillError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TwoTowerModel<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| HillError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32() {
        for hidden in [0, 5] {
            let cfg = ModelConfig { dim: 6, hidden, num_tasks: 2, seed: 9, ..Default::default() };
            let mut m = TwoTowerModel::<f32>::new(4, 7, cfg).unwrap();
            m.task_weights = vec![0.5, 2.0];
            let back: TwoTowerModel<f32> = decode(&encode(&m)).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = TwoTowerModel::<f32>::new(2, 3, ModelConfig { dim: 4, ..Default::default() }).unwrap();
        let bytes = encode(&m);
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode::<f32>(&bad), Err(HillError::Format(_))));
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut versioned = bytes.clone();
        versioned[8] = 99;
        assert!(decode::<f32>(&versioned).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = TwoTowerModel::<f32>::new(3, 3, ModelConfig { dim: 2, ..Default::default() }).unwrap();
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint::<f32>(&p).unwrap(), m);
    }
}
