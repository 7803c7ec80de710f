//! Parameter checkpoints.
//!
//! * `NNC1`: an [`Mlp`]. Magic, `u32` layer count `L`, `L + 1` `u32` widths,
//!   then per layer the `[in, out]` weights followed by the biases, all `f32` LE.
//! * `NNP1`: an ordered list of tensors. Magic, `u32` count, then per tensor a
//!   `u32` rank, `u32` dims and `f32` LE values.
//! * `NNS1`: resumable training state in full `f64` precision: `u64` step,
//!   then parameters, first moments and second moments as three `NNP1`-style
//!   lists with `f64` payloads.

use super::adam::AdamState;
use super::mlp::Mlp;
use super::tensor::Tensor;
use super::NnError;
use crate::binio::{ByteReader, ByteWriter};

pub fn encode_mlp(net: &Mlp) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(b"NNC1");
    w.u32(net.num_layers() as u32);
    for &width in net.widths() {
        w.u32(width as u32);
    }
    for l in 0..net.num_layers() {
        w.f32s(net.weight(l).data().iter().copied());
        w.f32s(net.bias(l).data().iter().copied());
    }
    w.finish()
}

pub fn decode_mlp(bytes: &[u8]) -> Result<Mlp, NnError> {
    let mut r = ByteReader::with_magic(bytes, b"NNC1")?;
    let layers = r.u32()? as usize;
    if layers == 0 || layers > 1024 {
        return Err(NnError::Format(format!("implausible layer count {layers}")));
    }
    let widths = (0..=layers)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);
    for l in 0..layers {
        let (i, o) = (widths[l], widths[l + 1]);
        weights.push(Tensor::new(&[i, o], r.f32s(i * o)?)?);
        biases.push(Tensor::new(&[o], r.f32s(o)?)?);
    }
    r.finish()?;
    Mlp::from_parts(&widths, weights, biases)
}

fn put_shape(w: &mut ByteWriter, t: &Tensor) {
    w.u32(t.shape().len() as u32);
    for &d in t.shape() {
        w.u32(d as u32);
    }
}

fn get_shape(r: &mut ByteReader<'_>) -> Result<Vec<usize>, NnError> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(NnError::Format(format!("implausible tensor rank {rank}")));
    }
    (0..rank)
        .map(|_| r.u32().map(|v| v as usize).map_err(NnError::from))
        .collect()
}

pub fn encode_tensors(tensors: &[&Tensor]) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(b"NNP1");
    w.u32(tensors.len() as u32);
    for t in tensors {
        put_shape(&mut w, t);
        w.f32s(t.data().iter().copied());
    }
    w.finish()
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<Tensor>, NnError> {
    let mut r = ByteReader::with_magic(bytes, b"NNP1")?;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let shape = get_shape(&mut r)?;
        let len = shape.iter().product();
        out.push(Tensor::new(&shape, r.f32s(len)?)?);
    }
    r.finish()?;
    Ok(out)
}

/// Exact snapshot of an optimisation run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: usize,
    pub params: Vec<Tensor>,
    pub adam: AdamState,
}

pub fn encode_training_state(state: &TrainingState) -> Vec<u8> {
    let mut w = ByteWriter::with_magic(b"NNS1");
    w.u64(state.step as u64);
    w.u64(state.adam.t as u64);
    for list in [&state.params, &state.adam.m, &state.adam.v] {
        w.u32(list.len() as u32);
        for t in list {
            put_shape(&mut w, t);
            w.f64s(t.data());
        }
    }
    w.finish()
}

pub fn decode_training_state(bytes: &[u8]) -> Result<TrainingState, NnError> {
    let mut r = ByteReader::with_magic(bytes, b"NNS1")?;
    let step = r.u64()? as usize;
    let t = r.u64()? as usize;
    let mut lists = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.u32()? as usize;
        let mut list = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let shape = get_shape(&mut r)?;
            let len = shape.iter().product();
            list.push(Tensor::new(&shape, r.f64s(len)?)?);
        }
        lists.push(list);
    }
    r.finish()?;
    let v = lists.pop().expect("three lists");
    let m = lists.pop().expect("three lists");
    let params = lists.pop().expect("three lists");
    if params.len() != m.len() || m.len() != v.len() {
        return Err(NnError::Format("training state list lengths disagree".into()));
    }
    Ok(TrainingState {
        step,
        params,
        adam: AdamState { m, v, t },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_layout_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 4, 1], &mut rng).unwrap();
        let bytes = encode_mlp(&net);
        assert_eq!(&bytes[..4], b"NNC1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 4 + 4 + 3 * 4 + 4 * (12 + 4 + 4 + 1));
        let back = decode_mlp(&bytes).unwrap();
        for (a, b) in back.weight(0).data().iter().zip(net.weight(0).data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        let mut bytes = encode_mlp(&net);
        assert!(decode_mlp(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode_mlp(&bytes).is_err());
    }

    #[test]
    fn training_state_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mut adam = AdamState::new(&[&p]);
        adam.m[0] = Tensor::randn(&[2, 3], 1.0, &mut rng);
        adam.t = 17;
        let st = TrainingState {
            step: 17,
            params: vec![p],
            adam,
        };
        assert_eq!(decode_training_state(&encode_training_state(&st)).unwrap(), st);
    }
}
