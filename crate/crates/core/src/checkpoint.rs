//! Versioned binary parameter checkpoints.
//!
//! Network format: magic `SWNB1`, then per parameter tensor
//! `(layer index: u32 LE, rank: u32 LE, dims: u32 LE each, raw f64 LE buffer)`,
//! weights before biases within a layer. HRS checkpoints prefix each
//! parameter group with `(block index: u32 LE, channel index: u32 LE)`.

use crate::error::{Error, Result};
use crate::hrs::HrsModel;
use crate::nn::{LayerParams, Network};
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 5] = b"SWNB1";

fn write_tensor<W: Write>(w: &mut W, layer: u32, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(layer)?;
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(u32, Tensor)> {
    let layer = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated tensor header".into()))?;
    let rank = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated tensor rank".into()))? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(
            r.read_u32::<LittleEndian>()
                .map_err(|_| Error::Checkpoint("truncated tensor dims".into()))? as usize,
        );
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(
            r.read_f64::<LittleEndian>()
                .map_err(|_| Error::Checkpoint("truncated tensor payload".into()))?,
        );
    }
    Ok((layer, Tensor::new(shape, data)?))
}

fn write_params<W: Write>(w: &mut W, params: &[LayerParams], base_index: u32) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        if let Some(t) = &p.weight {
            write_tensor(w, base_index + i as u32, t)?;
        }
        if let Some(t) = &p.bias {
            write_tensor(w, base_index + i as u32, t)?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(r: &mut R, like: &[LayerParams], base_index: u32) -> Result<Vec<LayerParams>> {
    let mut out = Vec::with_capacity(like.len());
    for (i, p) in like.iter().enumerate() {
        let mut loaded = LayerParams::empty();
        for slot in [p.weight.as_ref(), p.bias.as_ref()] {
            if let Some(expected) = slot {
                let (layer, t) = read_tensor(r)?;
                if layer != base_index + i as u32 {
                    return Err(Error::Checkpoint(format!(
                        "expected layer index {}, found {layer}",
                        base_index + i as u32
                    )));
                }
                if t.shape() != expected.shape() {
                    return Err(Error::Checkpoint(format!(
                        "layer {layer}: shape {:?} does not match architecture {:?}",
                        t.shape(),
                        expected.shape()
                    )));
                }
                if loaded.weight.is_none() && p.weight.is_some() {
                    loaded.weight = Some(t);
                } else {
                    loaded.bias = Some(t);
                }
            }
        }
        out.push(loaded);
    }
    Ok(out)
}

pub fn save_network<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    w.write_all(MAGIC)?;
    write_params(w, &net.params, 0)
}

/// Loads parameters into an architecture-matching network.
pub fn load_network<R: Read>(r: &mut R, net: &mut Network) -> Result<()> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    net.params = read_params(r, &net.params.clone(), 0)?;
    Ok(())
}

pub fn save_hrs<W: Write>(w: &mut W, model: &HrsModel) -> Result<()> {
    w.write_all(MAGIC)?;
    let bounds = model.bounds();
    for (b, block) in model.blocks.iter().enumerate() {
        for (c, channel) in block.channels.iter().enumerate() {
            w.write_u32::<LittleEndian>(b as u32)?;
            w.write_u32::<LittleEndian>(c as u32)?;
            write_params(w, channel, bounds[b] as u32)?;
        }
    }
    Ok(())
}

/// Loads channel parameters into a structurally matching HRS model.
pub fn load_hrs<R: Read>(r: &mut R, model: &mut HrsModel) -> Result<()> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let bounds = model.bounds();
    for b in 0..model.blocks.len() {
        for c in 0..model.blocks[b].channels.len() {
            let rb = r
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::Checkpoint("truncated block directory".into()))?;
            let rc = r
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::Checkpoint("truncated channel directory".into()))?;
            if (rb as usize, rc as usize) != (b, c) {
                return Err(Error::Checkpoint(format!(
                    "directory entry ({rb},{rc}) does not match expected ({b},{c})"
                )));
            }
            let like = model.blocks[b].channels[c].clone();
            model.blocks[b].channels[c] = read_params(r, &like, bounds[b] as u32)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hrs::build_hrs;
    use crate::nn::LayerSpec;
    use proptest::prelude::*;

    fn arch() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense { input: 3, output: 5 },
            LayerSpec::ReLU,
            LayerSpec::Dense { input: 5, output: 2 },
        ]
    }

    #[test]
    fn network_roundtrip_bit_exact() {
        let mut net = Network::new(arch(), vec![3]).unwrap();
        net.init_params(17);
        let mut buf = Vec::new();
        save_network(&mut buf, &net).unwrap();
        assert_eq!(&buf[..5], MAGIC);
        let mut loaded = Network::new(arch(), vec![3]).unwrap();
        load_network(&mut std::io::Cursor::new(&buf), &mut loaded).unwrap();
        assert_eq!(net.params, loaded.params);
    }

    #[test]
    fn hrs_roundtrip_bit_exact() {
        let mut model = build_hrs(arch(), vec![3], vec![2], vec![2, 3]).unwrap();
        let mut k = 0.0;
        for block in &mut model.blocks {
            for channel in &mut block.channels {
                for p in channel.iter_mut() {
                    if let Some(w) = p.weight.as_mut() {
                        for v in w.data_mut() {
                            k += 0.125;
                            *v = k;
                        }
                    }
                }
            }
        }
        let mut buf = Vec::new();
        save_hrs(&mut buf, &model).unwrap();
        let mut loaded = build_hrs(arch(), vec![3], vec![2], vec![2, 3]).unwrap();
        load_hrs(&mut std::io::Cursor::new(&buf), &mut loaded).unwrap();
        assert_eq!(model.blocks, loaded.blocks);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut net = Network::new(arch(), vec![3]).unwrap();
        let buf = b"SWNB2xxxxxxx".to_vec();
        assert!(load_network(&mut std::io::Cursor::new(&buf), &mut net).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_arbitrary_weights(values in proptest::collection::vec(-1e6f64..1e6, 27)) {
            let mut net = Network::new(arch(), vec![3]).unwrap();
            let mut it = values.into_iter();
            for p in &mut net.params {
                if let Some(w) = p.weight.as_mut() {
                    for v in w.data_mut() {
                        if let Some(nv) = it.next() { *v = nv; }
                    }
                }
            }
            let mut buf = Vec::new();
            save_network(&mut buf, &net).unwrap();
            let mut loaded = Network::new(arch(), vec![3]).unwrap();
            load_network(&mut std::io::Cursor::new(&buf), &mut loaded).unwrap();
            prop_assert_eq!(net.params, loaded.params);
        }
    }
}
