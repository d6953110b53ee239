//! Binary checkpoint container.
//!
//! Layout: the magic bytes, a little-endian `u32` format version, a `u64`
//! header length, a JSON header describing the model and listing every
//! array, then the arrays themselves as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auction::AuctionSpec;
use crate::autodiff::{BatchNormStats, Tensor};
use crate::error::{Error, Result};
use crate::networks::{Architecture, PreferenceMlp, RegretNet};
use crate::trainer::{Checkpoint, LagrangeState, Metrics};

pub const MAGIC: &[u8; 8] = b"PREFNET\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    epoch: usize,
    seed: u64,
    spec: AuctionSpec,
    architecture: Architecture,
    net_seed: u64,
    alloc_params: usize,
    payment_params: usize,
    mlp: Option<MlpHeader>,
    metrics: Metrics,
    rho_r: f64,
    rho_s: f64,
    /// Shapes of the arrays that follow, in order.
    arrays: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpHeader {
    input_width: usize,
    hidden: [usize; 2],
    seed: u64,
    params: usize,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

pub fn write_checkpoint<W: Write>(ck: &Checkpoint, writer: W) -> Result<()> {
    let mut arrays: Vec<&[f64]> = Vec::new();
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    for t in ck.net.alloc.iter().chain(&ck.net.payment) {
        shapes.push(t.shape().to_vec());
        arrays.push(t.data());
    }
    if let Some(mlp) = &ck.mlp {
        for t in &mlp.params {
            shapes.push(t.shape().to_vec());
            arrays.push(t.data());
        }
        for st in &mlp.bn {
            shapes.push(vec![st.mean.len()]);
            arrays.push(&st.mean);
            shapes.push(vec![st.var.len()]);
            arrays.push(&st.var);
        }
    }
    shapes.push(vec![ck.lagrange.lambda_r.len()]);
    arrays.push(&ck.lagrange.lambda_r);
    shapes.push(vec![ck.lagrange.lambda_s.len()]);
    arrays.push(&ck.lagrange.lambda_s);

    let header = Header {
        epoch: ck.epoch,
        seed: ck.seed,
        spec: ck.net.spec,
        architecture: ck.net.arch.clone(),
        net_seed: ck.net.seed,
        alloc_params: ck.net.alloc.len(),
        payment_params: ck.net.payment.len(),
        mlp: ck.mlp.as_ref().map(|m| MlpHeader {
            input_width: m.input_width,
            hidden: m.hidden,
            seed: m.seed,
            params: m.params.len(),
        }),
        metrics: ck.metrics,
        rho_r: ck.lagrange.rho_r,
        rho_s: ck.lagrange.rho_s,
        arrays: shapes,
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut w = BufWriter::new(writer);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for a in arrays {
        for v in a {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(reader: R) -> Result<Checkpoint> {
    let mut r = BufReader::new(reader);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated file"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;

    let mut tensors = Vec::with_capacity(h.arrays.len());
    for shape in &h.arrays {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated array data"))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((shape.clone(), data));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after arrays"));
    }

    let mlp_params = h.mlp.as_ref().map_or(0, |m| m.params + 4);
    let expected = h.alloc_params + h.payment_params + mlp_params + 2;
    if tensors.len() != expected {
        return Err(bad(format!("expected {expected} arrays, found {}", tensors.len())));
    }
    let mut it = tensors.into_iter();
    let mut take_raw = |k: usize| -> Vec<(Vec<usize>, Vec<f64>)> {
        (0..k).map(|_| it.next().expect("counted above")).collect()
    };
    let to_tensors = |raw: Vec<(Vec<usize>, Vec<f64>)>| -> Result<Vec<Tensor>> {
        raw.into_iter()
            .map(|(shape, data)| match shape.is_empty() {
                true => Ok(Tensor::scalar(data[0])),
                false => Tensor::new(shape, data),
            })
            .collect()
    };
    let mut take_tensors = |k: usize| to_tensors(take_raw(k));
    let alloc = take_tensors(h.alloc_params)?;
    let payment = take_tensors(h.payment_params)?;
    let mut net = RegretNet::init(h.spec, h.architecture.clone(), h.net_seed)?;
    if alloc.len() != net.alloc.len() || payment.len() != net.payment.len() {
        return Err(bad("parameter count does not match the architecture"));
    }
    let mut all = alloc;
    all.extend(payment);
    net.set_params(all).map_err(|e| bad(e.to_string()))?;

    let mlp = match &h.mlp {
        None => None,
        Some(mh) => {
            let mut mlp = PreferenceMlp::init(mh.input_width, mh.hidden, mh.seed)?;
            let params = take_tensors(mh.params)?;
            if params.len() != mlp.params.len()
                || params.iter().zip(&mlp.params).any(|(a, b)| a.shape() != b.shape())
            {
                return Err(bad("MLP parameter shapes do not match its widths"));
            }
            mlp.params = params;
            let stats = take_raw(4);
            let stat = |k: usize| stats[k].1.clone();
            mlp.bn = [
                BatchNormStats {
                    mean: stat(0),
                    var: stat(1),
                },
                BatchNormStats {
                    mean: stat(2),
                    var: stat(3),
                },
            ];
            if mlp.bn[0].mean.len() != mh.hidden[0] || mlp.bn[1].mean.len() != mh.hidden[1] {
                return Err(bad("batch-norm statistics do not match the MLP widths"));
            }
            Some(mlp)
        }
    };
    let lambdas = take_raw(2);
    Ok(Checkpoint {
        epoch: h.epoch,
        net,
        mlp,
        lagrange: LagrangeState {
            lambda_r: lambdas[0].1.clone(),
            rho_r: h.rho_r,
            lambda_s: lambdas[1].1.clone(),
            rho_s: h.rho_s,
        },
        metrics: h.metrics,
        seed: h.seed,
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(ck, File::create(path)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{PreferenceMode, TrainConfig};

    fn sample(with_mlp: bool, mode: PreferenceMode) -> Checkpoint {
        let spec = AuctionSpec::unit_demand(2, 3);
        let cfg = TrainConfig {
            preference_mode: mode,
            batch_size: 4,
            ..TrainConfig::desk()
        };
        let mut mlp = with_mlp.then(|| PreferenceMlp::for_spec(&spec, 7).unwrap());
        if let Some(m) = mlp.as_mut() {
            m.bn[0].mean[3] = 0.1 + 0.2;
            m.bn[1].var[5] = f64::MIN_POSITIVE;
        }
        let mut lagrange = LagrangeState::new(&cfg, 2);
        lagrange.lambda_r[1] = 1.0 / 3.0;
        Checkpoint {
            epoch: 17,
            net: RegretNet::init(spec, Architecture::default(), 99).unwrap(),
            mlp,
            lagrange,
            metrics: Metrics {
                pca: 0.987,
                regret_mean: 1e-3 / 7.0,
                regret_std: 2e-4,
                regret_max: 0.01,
                payment_mean: 0.8612345678901234,
                payment_std: 0.3,
                payment_max: 1.9,
            },
            seed: u64::MAX,
        }
    }

    fn round_trip(ck: &Checkpoint) -> Checkpoint {
        let mut buf = Vec::new();
        write_checkpoint(ck, &mut buf).unwrap();
        read_checkpoint(buf.as_slice()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for (mlp, mode) in [
            (true, PreferenceMode::Mlp),
            (true, PreferenceMode::Lagrangian),
            (false, PreferenceMode::None),
        ] {
            let ck = sample(mlp, mode);
            assert_eq!(round_trip(&ck), ck);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let ck = sample(true, PreferenceMode::Mlp);
        save(&ck, &path).unwrap();
        assert_eq!(load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_damaged_files() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(true, PreferenceMode::Mlp), &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_checkpoint(bad_magic.as_slice()), Err(Error::Checkpoint(_))));

        let mut bad_version = buf.clone();
        bad_version[8] = 9;
        assert!(read_checkpoint(bad_version.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 8];
        assert!(matches!(read_checkpoint(truncated), Err(Error::Checkpoint(_))));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(trailing.as_slice()).is_err());

        assert!(read_checkpoint(&buf[..5]).is_err());
    }
}
